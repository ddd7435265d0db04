#include "locemb/gradsuite.hpp"

#include <algorithm>
#include <cmath>

#include "locemb/gradcheck.hpp"
#include "locemb/losses.hpp"
#include "locemb/model.hpp"
#include "locemb/rng.hpp"
#include "locemb/synthdata.hpp"
#include "locemb/trainer.hpp"

namespace locemb::gradsuite {

using ad::Tensor64;
using ad::Shape;

namespace {

constexpr double kEps64 = 1e-6;
constexpr double kEps32 = 1e-3;
constexpr int kSliceEntries = 8;

Tensor64 rand64(Rng& rng, Shape shape, double lo = -1, double hi = 1) {
  std::vector<double> v(ad::shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor64::from(std::move(shape), std::move(v));
}

std::vector<geom::BBox> rand_boxes(Rng& rng, int n, double min_side) {
  std::vector<geom::BBox> out;
  while (static_cast<int>(out.size()) < n) {
    double a = rng.uniform(), b = rng.uniform(), c = rng.uniform(), d = rng.uniform();
    if (a > c) std::swap(a, c);
    if (b > d) std::swap(b, d);
    if (c - a >= min_side && d - b >= min_side) out.push_back({a, b, c, d});
  }
  return out;
}

using Builder = std::function<Tensor64(const std::vector<Tensor64>&)>;

// Max relative error over every input of one instance. Non-scalar outputs
// are contracted with fixed random weights.
double check_instance(Rng& rng, std::vector<Tensor64> inputs, const Builder& build) {
  Tensor64 weights;
  {
    ad::NoGradGuard g;
    const Tensor64 out = build(inputs);
    if (out.numel() != 1) weights = rand64(rng, out.shape());
  }
  const ad::ScalarFn<double> f = [&](const Tensor64&) {
    const Tensor64 out = build(inputs);
    return weights.defined() ? ad::sum(ad::mul(out, weights)) : out;
  };
  double worst = 0;
  for (auto& x : inputs) worst = std::max(worst, ad::finite_difference_check<double>(f, x, kEps64));
  return worst;
}

struct Entry {
  std::string name;
  // Draws fresh inputs and returns the instance's max relative error.
  std::function<double(Rng&)> instance;
};

Entry op(std::string name, std::function<std::vector<Tensor64>(Rng&)> make, Builder build) {
  return {std::move(name), [make, build](Rng& rng) { return check_instance(rng, make(rng), build); }};
}

struct Mlp {
  Tensor64 w1, b1, w2, b2;
  bool squash;
  Tensor64 operator()(const Tensor64& x) const {
    const auto h = ad::gelu(ad::add(ad::matmul(x, w1), b1));
    const auto y = ad::add(ad::matmul(h, w2), b2);
    return squash ? ad::order_corners(ad::sigmoid(y)) : y;
  }
};

Mlp make_mlp(Rng& rng, int in, int hidden, int out, bool squash) {
  return {rand64(rng, {in, hidden}, -0.7, 0.7), rand64(rng, {hidden}, -0.1, 0.1),
          rand64(rng, {hidden, out}, -0.7, 0.7), rand64(rng, {out}, -0.1, 0.1), squash};
}

std::vector<Entry> primitive_entries() {
  std::vector<Entry> e;
  auto two = [](Shape a, Shape b) {
    return [a, b](Rng& r) { return std::vector<Tensor64>{rand64(r, a), rand64(r, b)}; };
  };
  auto one = [](Shape a, double lo = -1, double hi = 1) {
    return [a, lo, hi](Rng& r) { return std::vector<Tensor64>{rand64(r, a, lo, hi)}; };
  };
  e.push_back(op("matmul", two({3, 4}, {4, 5}), [](auto& in) { return ad::matmul(in[0], in[1]); }));
  e.push_back(op("add", two({3, 4}, {3, 4}), [](auto& in) { return ad::add(in[0], in[1]); }));
  e.push_back(op("add_row_broadcast", two({3, 4}, {4}), [](auto& in) { return ad::add(in[0], in[1]); }));
  e.push_back(op("sub", two({3, 4}, {3, 4}), [](auto& in) { return ad::sub(in[0], in[1]); }));
  e.push_back(op("mul", two({3, 4}, {3, 4}), [](auto& in) { return ad::mul(in[0], in[1]); }));
  e.push_back(op("scale", one({3, 4}), [](auto& in) { return ad::scale(in[0], -1.7); }));
  e.push_back(op("concat_rows", two({2, 3}, {4, 3}), [](auto& in) { return ad::concat(in, 0); }));
  e.push_back(op("concat_cols", two({3, 2}, {3, 4}), [](auto& in) { return ad::concat(in, 1); }));
  e.push_back(op("slice", one({4, 5}), [](auto& in) { return ad::slice(in[0], 1, 1, 3); }));
  e.push_back(op("reshape", one({4, 6}), [](auto& in) { return ad::reshape(in[0], {2, 3, 4}); }));
  e.push_back(op("embedding_gather", one({5, 3}), [](auto& in) {
    const int ids[] = {0, 2, 2, 4, 1};
    return ad::embedding_gather(in[0], std::span<const int>(ids));
  }));
  e.push_back(op("replace_rows", two({5, 3}, {2, 3}), [](auto& in) {
    const int rows[] = {3, 1};
    return ad::replace_rows(in[0], std::span<const int>(rows), in[1]);
  }));
  e.push_back(op("relu", one({4, 5}), [](auto& in) { return ad::relu(in[0]); }));
  e.push_back(op("gelu", one({4, 5}, -3, 3), [](auto& in) { return ad::gelu(in[0]); }));
  e.push_back(op("sigmoid", one({4, 5}, -4, 4), [](auto& in) { return ad::sigmoid(in[0]); }));
  e.push_back(op("softmax", one({3, 6}, -3, 3), [](auto& in) { return ad::softmax(in[0]); }));
  e.push_back(op("layernorm", one({3, 6}), [](auto& in) { return ad::layernorm(in[0]); }));
  e.push_back(op("layernorm_affine",
                 [](Rng& r) { return std::vector<Tensor64>{rand64(r, {3, 6}), rand64(r, {6}), rand64(r, {6})}; },
                 [](auto& in) { return ad::layernorm(in[0], in[1], in[2]); }));
  e.push_back(op("cross_entropy", one({4, 6}, -3, 3), [](auto& in) {
    const int targets[] = {1, 5, 0, 3};
    const std::uint8_t mask[] = {1, 0, 1, 1};
    return ad::cross_entropy(in[0], std::span<const int>(targets), std::span<const std::uint8_t>(mask));
  }));
  e.push_back(op("sum", one({3, 4}), [](auto& in) { return ad::sum(in[0]); }));
  e.push_back(op("mean", one({3, 4}), [](auto& in) { return ad::mean(in[0]); }));
  e.push_back(op("l1_distance", two({3, 4}, {3, 4}), [](auto& in) { return ad::l1_distance(in[0], in[1]); }));
  e.push_back(op("squared_error", two({3, 4}, {3, 4}), [](auto& in) { return ad::squared_error(in[0], in[1]); }));
  e.push_back(op("causal_attention", one({7, 12}), [](auto& in) {
    const kernels::Segment segs[] = {{0, 3}, {3, 4}};
    return ad::causal_attention(in[0], std::span<const kernels::Segment>(segs), 2);
  }));
  e.push_back(op("conv2d",
                 [](Rng& r) {
                   return std::vector<Tensor64>{rand64(r, {2, 5, 5}), rand64(r, {3, 2, 3, 3}), rand64(r, {3})};
                 },
                 [](auto& in) { return ad::conv2d(in[0], in[1], in[2]); }));
  e.push_back(op("add_upsampled", two({2, 4, 4}, {4, 2}), [](auto& in) { return ad::add_upsampled(in[0], in[1], 2); }));
  e.push_back(op("order_corners", one({3, 4}, 0, 1), [](auto& in) { return ad::order_corners(in[0]); }));
  return e;
}

Tensor64 boxes_input(Rng& r, int n) {
  return loss::boxes_tensor<double>(rand_boxes(r, n, 0.05));
}

std::vector<Entry> loss_entries() {
  std::vector<Entry> e;
  e.push_back({"giou_loss", [](Rng& r) {
                 const auto gt = rand_boxes(r, 3, 0.05);
                 return check_instance(r, {boxes_input(r, 3)},
                                       [gt](auto& in) { return loss::giou_loss<double>(in[0], gt); });
               }});
  e.push_back({"l_det", [](Rng& r) {
                 const auto gt = rand_boxes(r, 3, 0.05);
                 return check_instance(r, {boxes_input(r, 3)},
                                       [gt](auto& in) { return loss::l_det<double>(in[0], gt); });
               }});
  e.push_back({"l_seg", [](Rng& r) {
                 std::vector<geom::MaskGrid> gt(2, geom::MaskGrid(5, 6));
                 for (auto& m : gt)
                   for (auto& v : m.values) v = static_cast<float>(r.uniform());
                 return check_instance(r, {rand64(r, {2, 5, 6}, 0.05, 0.95)},
                                       [gt](auto& in) { return loss::l_seg<double>(in[0], gt); });
               }});
  e.push_back({"l_cyc", [](Rng& r) {
                 const Mlp F = make_mlp(r, 6, 5, 4, true), G = make_mlp(r, 4, 5, 6, false);
                 const loss::Mapping<double> f = F, g = G;
                 const Tensor64 boxes = boxes_input(r, 3);
                 // Checked with respect to the hidden states and to both mappings' weights.
                 return check_instance(r, {rand64(r, {3, 6}), G.w1, F.w2},
                                       [&](auto& in) { return loss::l_cyc<double>(boxes, in[0], f, g); });
               }});
  e.push_back({"l_text", [](Rng& r) {
                 std::vector<int> targets(5);
                 for (auto& t : targets) t = static_cast<int>(r.below(7));
                 const std::vector<std::uint8_t> mask{1, 1, 0, 1, 1};
                 return check_instance(r, {rand64(r, {5, 7}, -3, 3)}, [targets, mask](auto& in) {
                   return loss::l_text<double>(in[0], targets, mask);
                 });
               }});
  e.push_back({"stage_loss_1_2", [](Rng& r) {
                 const Mlp F = make_mlp(r, 6, 5, 4, true), G = make_mlp(r, 4, 5, 6, false);
                 const loss::Mapping<double> f = F, g = G;
                 const auto gt = rand_boxes(r, 2, 0.05);
                 const Tensor64 gt_t = loss::boxes_tensor<double>(gt);
                 const std::vector<int> targets{2, 0, 4};
                 const std::vector<std::uint8_t> mask{1, 1, 1};
                 return check_instance(r, {rand64(r, {3, 5}, -2, 2), rand64(r, {2, 6}), G.w2}, [&](auto& in) {
                   loss::StageParts<double> p;
                   p.text = loss::l_text<double>(in[0], targets, mask);
                   p.det = loss::l_det<double>(F(in[1]), gt);
                   p.cyc = loss::l_cyc<double>(gt_t, in[1], f, g);
                   return loss::stage_loss(1, p);
                 });
               }});
  e.push_back({"stage_loss_3", [](Rng& r) {
                 std::vector<geom::MaskGrid> gt(1, geom::MaskGrid(4, 4));
                 for (auto& v : gt[0].values) v = r.uniform() < 0.5 ? 0.0f : 1.0f;
                 return check_instance(r, {rand64(r, {1, 4, 4}, -2, 2)}, [gt](auto& in) {
                   loss::StageParts<double> p;
                   p.seg = loss::l_seg<double>(ad::sigmoid(in[0]), gt);
                   return loss::stage_loss(3, p);
                 });
               }});
  return e;
}

// fp32 end-to-end: stage-1 loss of a small pemb model, analytic gradient
// against central differences on random entries of a random parameter.
double model_instance(Rng& rng, model::Model& m, const std::vector<model::SequencePlan>& plans,
                      const std::vector<std::span<const float>>& rasters) {
  auto loss_value = [&]() {
    const auto parts = train::text_stage_parts(m, plans, rasters, {});
    return loss::stage_loss(1, parts);
  };
  auto& entries = m.params().entries();
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < entries.size(); ++i)
    if (!model::is_mask_param(entries[i].first)) candidates.push_back(i);
  ad::Tensor& p = entries[candidates[rng.below(candidates.size())]].second;

  for (auto& [name, t] : entries) t.zero_grad();
  ad::active_tape<float>().clear();
  const ad::Tensor l = loss_value();
  ad::backward(l);
  const std::vector<float> analytic(p.grad().begin(), p.grad().end());

  ad::NoGradGuard guard;
  double worst = 0;
  auto data = p.data();
  for (int k = 0; k < kSliceEntries; ++k) {
    const std::size_t i = rng.below(data.size());
    const float saved = data[i];
    const float hi = static_cast<float>(saved + kEps32), lo = static_cast<float>(saved - kEps32);
    data[i] = hi;
    const double fp = loss_value().item();
    data[i] = lo;
    const double fm = loss_value().item();
    data[i] = saved;
    const double numeric = (fp - fm) / (static_cast<double>(hi) - lo);
    worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric)));
  }
  for (auto& [name, t] : entries) t.zero_grad();
  return worst;
}

}  // namespace

std::vector<CheckResult> run_all(std::uint64_t seed, int instances,
                                 const std::function<void(const CheckResult&)>& progress) {
  std::vector<CheckResult> out;
  auto entries = primitive_entries();
  for (auto& e : loss_entries()) entries.push_back(std::move(e));
  for (std::size_t k = 0; k < entries.size(); ++k) {
    Rng rng(mix_seed(seed, k));
    CheckResult r{entries[k].name, 0, instances, kTolerance64};
    for (int i = 0; i < instances; ++i) r.max_rel_err = std::max(r.max_rel_err, entries[k].instance(rng));
    if (progress) progress(r);
    out.push_back(r);
  }

  model::ModelConfig cfg;
  cfg.d_model = 16;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.ffn_mult = 2;
  cfg.patch_grid = 4;
  cfg.max_seq_len = 48;
  cfg.scheme = codec::Scheme::Pemb;
  model::Model m(cfg, mix_seed(seed, 1000));
  const data::Dataset ds = data::generate_dataset(mix_seed(seed, 1001), 2, {1, 0, 0});
  std::vector<model::SequencePlan> plans;
  std::vector<std::vector<float>> raster_store;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    plans.push_back(m.plan(ds.samples[i]));
    raster_store.push_back(ds.rasters[i].to_floats());
  }
  const std::vector<std::span<const float>> rasters(raster_store.begin(), raster_store.end());
  Rng rng(mix_seed(seed, 1002));
  CheckResult r{"model_stage1_fp32", 0, instances, kTolerance32};
  for (int i = 0; i < instances; ++i) r.max_rel_err = std::max(r.max_rel_err, model_instance(rng, m, plans, rasters));
  if (progress) progress(r);
  out.push_back(r);
  return out;
}

}  // namespace locemb::gradsuite
