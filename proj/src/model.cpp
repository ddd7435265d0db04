#include "locemb/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include "json.hpp"
#include "locemb/error.hpp"
#include "locemb/rng.hpp"

namespace locemb::model {

using json = nlohmann::ordered_json;
using ad::Shape;

namespace {

constexpr const char* kCheckpointFormat = "locemb-checkpoint-v1";

std::optional<int> slot_index(const std::string& tok, std::string_view prefix) {
  if (tok.size() <= prefix.size() + 1 || tok.compare(0, prefix.size(), prefix) != 0 || tok.back() != '>')
    return std::nullopt;
  int v = 0;
  for (std::size_t i = prefix.size(); i + 1 < tok.size(); ++i) {
    if (tok[i] < '0' || tok[i] > '9') return std::nullopt;
    v = v * 10 + (tok[i] - '0');
  }
  return v;
}

Tensor constant(Shape shape, std::vector<float> values) { return Tensor::from(std::move(shape), std::move(values)); }

std::vector<float> row_of(const Tensor& t, int row) {
  const int d = t.dim(1);
  auto data = t.data();
  return {data.begin() + static_cast<std::ptrdiff_t>(row) * d, data.begin() + static_cast<std::ptrdiff_t>(row + 1) * d};
}

}  // namespace

void ModelConfig::validate() const {
  auto bad = [](const std::string& what) { fail(ErrorCode::InvalidArgument, "model config: " + what); };
  if (d_model <= 0 || n_layers <= 0 || n_heads <= 0 || ffn_mult <= 0) bad("sizes must be positive");
  if (d_model % n_heads != 0) bad("d_model must be divisible by n_heads");
  if (patch_grid <= 0 || image_size % patch_grid != 0) bad("image_size must be divisible by patch_grid");
  if (max_seq_len <= visual_tokens()) bad("max_seq_len must leave room for text after the visual tokens");
  if (mask_size != image_size) bad("mask_size must equal image_size");
  if (mask_size % patch_grid != 0) bad("mask_size must be divisible by patch_grid");
  if (image_channels <= 0 || mask_prompt_dim <= 0 || mask_channels <= 0) bad("mask head sizes must be positive");
}

std::string ModelConfig::to_json() const {
  json j;
  j["d_model"] = d_model;
  j["n_layers"] = n_layers;
  j["n_heads"] = n_heads;
  j["ffn_mult"] = ffn_mult;
  j["max_seq_len"] = max_seq_len;
  j["patch_grid"] = patch_grid;
  j["image_channels"] = image_channels;
  j["image_size"] = image_size;
  j["mask_size"] = mask_size;
  j["mask_prompt_dim"] = mask_prompt_dim;
  j["mask_channels"] = mask_channels;
  j["scheme"] = codec::scheme_name(scheme);
  j["loc_supervised"] = loc_supervised;
  return j.dump(2);
}

ModelConfig ModelConfig::from_json(std::string_view text) {
  ModelConfig c;
  try {
    const json j = json::parse(text);
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    get("d_model", c.d_model);
    get("n_layers", c.n_layers);
    get("n_heads", c.n_heads);
    get("ffn_mult", c.ffn_mult);
    get("max_seq_len", c.max_seq_len);
    get("patch_grid", c.patch_grid);
    get("image_channels", c.image_channels);
    get("image_size", c.image_size);
    get("mask_size", c.mask_size);
    get("mask_prompt_dim", c.mask_prompt_dim);
    get("mask_channels", c.mask_channels);
    get("loc_supervised", c.loc_supervised);
    if (j.contains("scheme")) c.scheme = codec::parse_scheme(j.at("scheme").get<std::string>());
  } catch (const json::exception& e) {
    fail(ErrorCode::InvalidArgument, std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

Tensor& ParamStore::add(std::string name, Tensor value) {
  if (contains(name)) fail(ErrorCode::InvalidArgument, "duplicate parameter " + name);
  value.set_requires_grad(true);
  entries_.emplace_back(std::move(name), std::move(value));
  return entries_.back().second;
}

const Tensor& ParamStore::get(std::string_view name) const {
  for (const auto& [n, t] : entries_)
    if (n == name) return t;
  fail(ErrorCode::InvalidArgument, "no parameter named " + std::string(name));
}

bool ParamStore::contains(std::string_view name) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const auto& e) { return e.first == name; });
}

std::size_t ParamStore::total_size() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.second.numel();
  return n;
}

bool is_mask_param(std::string_view name) { return name.substr(0, 5) == "mask."; }
bool is_patch_param(std::string_view name) { return name.substr(0, 6) == "patch."; }

void validate_plan(const SequencePlan& p, const codec::Vocab& vocab, bool open_trigger) {
  auto bad = [](const std::string& what) { fail(ErrorCode::InvalidArgument, "sequence plan: " + what); };
  const int n = p.size();
  if (static_cast<int>(p.supervised.size()) != n) bad("supervision mask length differs from tokens");
  if (p.prompt_length < 0 || p.prompt_length > n) bad("prompt length out of range");
  if (p.trigger_mask_refs.size() != p.triggers.size()) bad("one mask ref per trigger");
  std::vector<int> overrides(n, 0);
  for (const auto& [pos, box] : p.loc_overrides) {
    if (pos < 0 || pos >= n || p.tokens[pos] != vocab.loc()) bad("override outside a <loc> position");
    overrides[pos]++;
  }
  for (int i = 0; i < n; ++i)
    if (p.tokens[i] == vocab.loc() && overrides[i] != 1) bad("<loc> at " + std::to_string(i) + " needs one override");
  int triggers = 0;
  for (int i = p.prompt_length; i < n; ++i) {
    if (p.tokens[i] != vocab.trigger()) continue;
    ++triggers;
    const bool trailing = open_trigger && i + 1 == n;
    if (!trailing && (i + 1 >= n || p.tokens[i + 1] != vocab.loc())) bad("<trigger> must be followed by <loc>");
    if (std::none_of(p.triggers.begin(), p.triggers.end(), [&](const auto& t) { return t.first == i; }))
      bad("<trigger> without a gt box");
  }
  if (triggers != static_cast<int>(p.triggers.size())) bad("trigger list does not match the stream");
}

Model::Model(const ModelConfig& cfg, std::uint64_t seed)
    : cfg_(cfg), vocab_(codec::Vocab::for_scheme(cfg.scheme)), codec_(vocab_) {
  cfg_.validate();
  init_params(seed);
}

void Model::init_params(std::uint64_t seed) {
  Rng rng(seed);
  const int d = cfg_.d_model, V = vocab_.size(), C = cfg_.image_channels;
  const int patch_in = C * cfg_.patch_size() * cfg_.patch_size();
  auto normal = [&](Shape shape, double stddev) {
    std::vector<float> v(ad::shape_numel(shape));
    for (auto& x : v) x = static_cast<float>(rng.normal() * stddev);
    return Tensor::from(std::move(shape), std::move(v));
  };
  auto zeros = [](Shape shape) { return Tensor::zeros(std::move(shape)); };
  auto ones = [](Shape shape) { return Tensor::full(std::move(shape), 1.0f); };
  auto linear = [&](const std::string& name, int in, int out, double stddev) {
    params_.add(name + ".w", normal({in, out}, stddev));
    params_.add(name + ".b", zeros({out}));
  };
  const double resid = 1.0 / std::sqrt(2.0 * cfg_.n_layers);

  linear("patch", patch_in, d, 1.0 / std::sqrt(patch_in));
  params_.add("patch.pos", normal({cfg_.visual_tokens(), d}, 0.02));
  params_.add("tok.emb", normal({V, d}, 0.02));
  params_.add("pos.emb", normal({cfg_.max_text_len(), d}, 0.02));
  for (int l = 0; l < cfg_.n_layers; ++l) {
    const std::string b = "blocks." + std::to_string(l);
    params_.add(b + ".ln1.g", ones({d}));
    params_.add(b + ".ln1.b", zeros({d}));
    linear(b + ".attn.qkv", d, 3 * d, 1.0 / std::sqrt(d));
    linear(b + ".attn.out", d, d, resid / std::sqrt(d));
    params_.add(b + ".ln2.g", ones({d}));
    params_.add(b + ".ln2.b", zeros({d}));
    linear(b + ".mlp.fc1", d, cfg_.ffn_mult * d, 1.0 / std::sqrt(d));
    linear(b + ".mlp.fc2", cfg_.ffn_mult * d, d, resid / std::sqrt(cfg_.ffn_mult * d));
  }
  params_.add("ln_f.g", ones({d}));
  params_.add("ln_f.b", zeros({d}));
  linear("lm_head", d, V, 0.02);
  linear("box_decoder.fc1", d, d, 1.0 / std::sqrt(d));
  linear("box_decoder.fc2", d, 4, 1.0 / std::sqrt(d));
  linear("loc_encoder.fc1", 4, d, 1.0);
  linear("loc_encoder.fc2", d, d, 1.0 / std::sqrt(d));

  const int P = cfg_.mask_prompt_dim, K = cfg_.mask_channels;
  linear("mask.proj", d, P, 1.0 / std::sqrt(d));
  params_.add("mask.film.w", normal({P, K}, 1.0 / std::sqrt(P)));
  params_.add("mask.feat.w", normal({d, K}, 0.1 / std::sqrt(d)));
  params_.add("mask.conv1.w", normal({K, C + 1, 3, 3}, std::sqrt(2.0 / ((C + 1) * 9))));
  params_.add("mask.conv1.b", zeros({K}));
  params_.add("mask.conv2.w", normal({1, K, 3, 3}, std::sqrt(1.0 / (K * 9))));
  params_.add("mask.conv2.b", zeros({1}));
}

Tensor Model::linear(const Tensor& x, const std::string& prefix) const {
  return ad::add(ad::matmul(x, params_.get(prefix + ".w")), params_.get(prefix + ".b"));
}

Tensor Model::lm_head(const Tensor& h) const { return linear(h, "lm_head"); }

namespace {

// raster [C x S x S] -> patches [g^2 x C*p*p], channel-major within a patch.
void extract_patches(std::span<const float> raster, const ModelConfig& cfg, float* out) {
  const int C = cfg.image_channels, S = cfg.image_size, g = cfg.patch_grid, p = cfg.patch_size();
  for (int pr = 0; pr < g; ++pr)
    for (int pc = 0; pc < g; ++pc) {
      float* dst = out + static_cast<std::size_t>(pr * g + pc) * C * p * p;
      for (int c = 0; c < C; ++c)
        for (int r = 0; r < p; ++r)
          for (int q = 0; q < p; ++q)
            *dst++ = raster[(static_cast<std::size_t>(c) * S + pr * p + r) * S + pc * p + q];
    }
}

}  // namespace

Tensor Model::encode_image(std::span<const float> raster) const {
  const int C = cfg_.image_channels, S = cfg_.image_size, g2 = cfg_.visual_tokens();
  const std::size_t expect = static_cast<std::size_t>(C) * S * S;
  if (raster.size() != expect)
    fail(ErrorCode::ShapeMismatch,
         "raster has " + std::to_string(raster.size()) + " values, expected " + std::to_string(expect));
  const int patch_in = C * cfg_.patch_size() * cfg_.patch_size();
  std::vector<float> patches(static_cast<std::size_t>(g2) * patch_in);
  extract_patches(raster, cfg_, patches.data());
  return ad::add(linear(constant({g2, patch_in}, std::move(patches)), "patch"), params_.get("patch.pos"));
}

SequencePlan Model::plan(const data::Sample& sample, bool with_target) const {
  SequencePlan p;
  const bool emb = cfg_.scheme == codec::Scheme::Pemb;
  auto box_at = [](const std::vector<geom::BBox>& boxes, int i, const char* what) {
    if (i < 0 || i >= static_cast<int>(boxes.size()))
      fail(ErrorCode::InvalidArgument, std::string("sample refers to a missing ") + what);
    return boxes[i];
  };
  auto push_input_box = [&](const geom::BBox& b) {
    if (emb) {
      p.loc_overrides.emplace_back(p.size(), b);
      p.tokens.push_back(vocab_.loc());
    } else {
      for (int id : codec_.encode_box(b)) p.tokens.push_back(id);
    }
  };

  for (const auto& tok : sample.prompt_tokens) {
    if (auto i = slot_index(tok, "<box:"))
      push_input_box(box_at(sample.boxes, *i, "box"));
    else if (auto c = slot_index(tok, "<cand:"))
      push_input_box(box_at(sample.candidates, *c, "candidate"));
    else
      p.tokens.push_back(vocab_.id(tok));
  }
  p.prompt_length = p.size();

  if (with_target) {
    for (const auto& tok : sample.target_tokens) {
      if (auto i = slot_index(tok, "<box:")) {
        const geom::BBox b = box_at(sample.boxes, *i, "box");
        if (emb) {
          p.triggers.emplace_back(p.size(), b);
          p.trigger_mask_refs.push_back(*i < static_cast<int>(sample.mask_refs.size()) ? sample.mask_refs[*i] : -1);
          p.tokens.push_back(vocab_.trigger());
          p.loc_overrides.emplace_back(p.size(), b);
          p.tokens.push_back(vocab_.loc());
        } else {
          for (int id : codec_.encode_box(b)) p.tokens.push_back(id);
        }
      } else {
        p.tokens.push_back(vocab_.id(tok));
      }
    }
  }
  p.supervised.assign(p.size(), 0);
  for (int j = p.prompt_length; j < p.size(); ++j)
    p.supervised[j] = cfg_.loc_supervised || p.tokens[j] != vocab_.loc();
  return p;
}

Model::Hidden Model::run(std::span<const SequencePlan> plans,
                         std::span<const std::span<const float>> rasters, bool open_trigger) const {
  if (plans.size() != rasters.size() || plans.empty())
    fail(ErrorCode::ShapeMismatch, "forward needs one raster per plan");
  const int n = static_cast<int>(plans.size()), g2 = cfg_.visual_tokens();
  const int C = cfg_.image_channels, S = cfg_.image_size;
  const int patch_in = C * cfg_.patch_size() * cfg_.patch_size();

  int text_total = 0;
  for (const auto& p : plans) {
    if (p.size() == 0) fail(ErrorCode::InvalidArgument, "empty sequence plan");
    if (p.size() > cfg_.max_text_len())
      fail(ErrorCode::SequenceTooLong, std::to_string(g2 + p.size()) + " positions exceed max_seq_len " +
                                           std::to_string(cfg_.max_seq_len));
    validate_plan(p, vocab_, open_trigger);
    text_total += p.size();
  }

  // Visual tokens for all images.
  std::vector<float> patches(static_cast<std::size_t>(n) * g2 * patch_in);
  std::vector<int> pos_ids(static_cast<std::size_t>(n) * g2);
  for (int i = 0; i < n; ++i) {
    if (rasters[i].size() != static_cast<std::size_t>(C) * S * S)
      fail(ErrorCode::ShapeMismatch, "raster size does not match the model config");
    extract_patches(rasters[i], cfg_, patches.data() + static_cast<std::size_t>(i) * g2 * patch_in);
    for (int k = 0; k < g2; ++k) pos_ids[static_cast<std::size_t>(i) * g2 + k] = k;
  }
  Tensor visual = ad::add(linear(constant({n * g2, patch_in}, std::move(patches)), "patch"),
                          ad::embedding_gather(params_.get("patch.pos"), std::span<const int>(pos_ids)));

  // Text embeddings with <loc> substitution.
  std::vector<int> ids, text_pos, loc_rows;
  std::vector<geom::BBox> loc_boxes;
  ids.reserve(text_total);
  text_pos.reserve(text_total);
  for (const auto& p : plans) {
    const int base = static_cast<int>(ids.size());
    for (int j = 0; j < p.size(); ++j) {
      ids.push_back(p.tokens[j]);
      text_pos.push_back(j);
    }
    for (const auto& [pos, box] : p.loc_overrides) {
      loc_rows.push_back(base + pos);
      loc_boxes.push_back(box);
    }
  }
  Tensor text = ad::add(ad::embedding_gather(params_.get("tok.emb"), std::span<const int>(ids)),
                        ad::embedding_gather(params_.get("pos.emb"), std::span<const int>(text_pos)));
  if (!loc_rows.empty())
    text = ad::replace_rows(text, std::span<const int>(loc_rows),
                            loc_encoder(loss::boxes_tensor<float>(loc_boxes)));

  // Pack [visual_i ; text_i] per plan.
  std::vector<int> order;
  std::vector<kernels::Segment> segs;
  Hidden h;
  order.reserve(static_cast<std::size_t>(n) * g2 + text_total);
  int text_base = n * g2;
  for (int i = 0; i < n; ++i) {
    const int start = static_cast<int>(order.size());
    for (int k = 0; k < g2; ++k) order.push_back(i * g2 + k);
    h.text_offset.push_back(static_cast<int>(order.size()));
    for (int j = 0; j < plans[i].size(); ++j) order.push_back(text_base + j);
    text_base += plans[i].size();
    segs.push_back({start, g2 + plans[i].size()});
  }
  Tensor x = ad::embedding_gather(ad::concat(std::vector<Tensor>{visual, text}, 0), std::span<const int>(order));
  h.inputs = x;

  for (int l = 0; l < cfg_.n_layers; ++l) {
    const std::string b = "blocks." + std::to_string(l);
    Tensor a = ad::layernorm(x, params_.get(b + ".ln1.g"), params_.get(b + ".ln1.b"));
    a = ad::causal_attention(linear(a, b + ".attn.qkv"), std::span<const kernels::Segment>(segs), cfg_.n_heads);
    x = ad::add(x, linear(a, b + ".attn.out"));
    Tensor m = ad::layernorm(x, params_.get(b + ".ln2.g"), params_.get(b + ".ln2.b"));
    m = linear(ad::gelu(linear(m, b + ".mlp.fc1")), b + ".mlp.fc2");
    x = ad::add(x, m);
  }
  h.final = ad::layernorm(x, params_.get("ln_f.g"), params_.get("ln_f.b"));
  return h;
}

ForwardOut Model::forward(std::span<const SequencePlan> plans,
                          std::span<const std::span<const float>> rasters) const {
  Hidden h = run(plans, rasters);
  ForwardOut out;
  out.inputs = h.inputs;
  out.text_offset = h.text_offset;

  std::vector<int> pred_rows, trig_rows, vis_rows;
  const int g2 = cfg_.visual_tokens();
  for (int i = 0; i < static_cast<int>(plans.size()); ++i) {
    const auto& p = plans[i];
    const int off = h.text_offset[i];
    for (int j = 1; j < p.size(); ++j)
      if (p.supervised[j]) {
        pred_rows.push_back(off + j - 1);
        out.targets.push_back(p.tokens[j]);
      }
    for (std::size_t k = 0; k < p.triggers.size(); ++k) {
      trig_rows.push_back(off + p.triggers[k].first);
      out.trigger_boxes.push_back(p.triggers[k].second);
      out.trigger_plan.push_back(i);
      out.trigger_mask_refs.push_back(p.trigger_mask_refs[k]);
    }
    for (int k = 0; k < g2; ++k) vis_rows.push_back(off - g2 + k);
  }
  out.mask.assign(out.targets.size(), 1);
  if (!pred_rows.empty()) out.logits = lm_head(ad::embedding_gather(h.final, std::span<const int>(pred_rows)));
  if (!trig_rows.empty()) out.trigger_hidden = ad::embedding_gather(h.final, std::span<const int>(trig_rows));
  out.visual_hidden = ad::embedding_gather(h.final, std::span<const int>(vis_rows));
  return out;
}

Tensor Model::box_decoder(const Tensor& t) const {
  return ad::order_corners(ad::sigmoid(linear(ad::gelu(linear(t, "box_decoder.fc1")), "box_decoder.fc2")));
}

Tensor Model::loc_encoder(const Tensor& boxes) const {
  return linear(ad::gelu(linear(boxes, "loc_encoder.fc1")), "loc_encoder.fc2");
}

geom::BBox Model::decode_box_from_hidden(std::span<const float> t) const {
  if (static_cast<int>(t.size()) != cfg_.d_model)
    fail(ErrorCode::ShapeMismatch, "trigger state must have d_model entries");
  ad::NoGradGuard guard;
  const Tensor b = box_decoder(constant({1, cfg_.d_model}, {t.begin(), t.end()}));
  return {b.at(0), b.at(1), b.at(2), b.at(3)};
}

Tensor Model::decode_masks(const Tensor& t, std::span<const Tensor> visual,
                           std::span<const std::span<const float>> rasters,
                           std::span<const geom::BBox> boxes) const {
  const int n = t.dim(0), S = cfg_.mask_size, C = cfg_.image_channels, K = cfg_.mask_channels;
  if (t.dim(1) != cfg_.d_model || static_cast<int>(visual.size()) != n ||
      static_cast<int>(rasters.size()) != n || static_cast<int>(boxes.size()) != n)
    fail(ErrorCode::ShapeMismatch, "decode_masks needs one visual block, raster and box per state");
  const std::size_t plane = static_cast<std::size_t>(S) * S;

  // FiLM-style conditioning: the projected trigger state shifts conv1's bias.
  const Tensor prompt = linear(t, "mask.proj");
  const Tensor film = ad::matmul(prompt, params_.get("mask.film.w"));
  std::vector<Tensor> outs;
  for (int i = 0; i < n; ++i) {
    if (rasters[i].size() != plane * C) fail(ErrorCode::ShapeMismatch, "raster size does not match the mask head");
    std::vector<float> input(plane * (C + 1));
    std::copy(rasters[i].begin(), rasters[i].end(), input.begin());
    const auto box_cover = geom::rasterize_box(boxes[i], S, S);
    std::copy(box_cover.values.begin(), box_cover.values.end(), input.begin() + plane * C);

    const Tensor bias = ad::add(ad::reshape(ad::slice(film, 0, i, 1), {K}), params_.get("mask.conv1.b"));
    Tensor y = ad::conv2d(constant({C + 1, S, S}, std::move(input)), params_.get("mask.conv1.w"), bias);
    y = ad::add_upsampled(y, ad::matmul(visual[i], params_.get("mask.feat.w")), cfg_.patch_grid);
    y = ad::conv2d(ad::relu(y), params_.get("mask.conv2.w"), params_.get("mask.conv2.b"));
    outs.push_back(y);
  }
  return ad::sigmoid(ad::concat(outs, 0));
}

geom::MaskGrid Model::decode_mask_from_hidden(std::span<const float> t, const Tensor& visual,
                                              std::span<const float> raster, const geom::BBox& b) const {
  ad::NoGradGuard guard;
  const Tensor tt = constant({1, cfg_.d_model}, {t.begin(), t.end()});
  const std::span<const float> r[] = {raster};
  const Tensor m = decode_masks(tt, std::span<const Tensor>(&visual, 1), r, std::span<const geom::BBox>(&b, 1));
  geom::MaskGrid out(cfg_.mask_size, cfg_.mask_size);
  std::copy(m.data().begin(), m.data().end(), out.values.begin());
  return out;
}

GenerateResult Model::generate(const SequencePlan& prompt, std::span<const float> raster, int max_new,
                               bool with_masks) const {
  if (prompt.size() > cfg_.max_text_len())
    fail(ErrorCode::ContextOverflow, "prompt of " + std::to_string(prompt.size()) +
                                         " tokens does not fit the context");
  ad::NoGradGuard guard;
  SequencePlan cur = prompt;
  cur.tokens.resize(cur.prompt_length);
  cur.supervised.assign(cur.size(), 0);
  cur.triggers.clear();
  cur.trigger_mask_refs.clear();
  std::erase_if(cur.loc_overrides, [&](const auto& o) { return o.first >= cur.prompt_length; });

  GenerateResult res;
  const std::span<const float> rs[] = {raster};
  const int g2 = cfg_.visual_tokens();
  Tensor visual;
  bool pending_trigger = false;
  while (static_cast<int>(res.tokens.size()) < max_new && cur.size() < cfg_.max_text_len()) {
    const Hidden h = run(std::span<const SequencePlan>(&cur, 1), rs, true);
    const int last = h.text_offset[0] + cur.size() - 1;
    if (with_masks && !visual.defined()) {
      std::vector<int> vis(g2);
      for (int k = 0; k < g2; ++k) vis[k] = h.text_offset[0] - g2 + k;
      visual = ad::embedding_gather(h.final, std::span<const int>(vis));
    }
    int next;
    if (pending_trigger) {
      // The state at the consumed <trigger> becomes a box, and the box's
      // G-embedding is the input of the forced <loc>.
      std::vector<float> t = row_of(h.final, last);
      const geom::BBox box = decode_box_from_hidden(t);
      const Tensor g = loc_encoder(loss::boxes_tensor<float>(std::span<const geom::BBox>(&box, 1)));
      res.loc_embeddings.push_back({g.data().begin(), g.data().end()});
      res.trigger_states.push_back(std::move(t));
      res.boxes.push_back(box);
      cur.loc_overrides.emplace_back(cur.size(), box);
      cur.triggers.back().second = box;
      next = vocab_.loc();
      pending_trigger = false;
    } else {
      const Tensor logits = lm_head(ad::slice(h.final, 0, last, 1));
      auto lv = logits.data();
      next = -1;
      float best = -std::numeric_limits<float>::infinity();
      for (int v = 0; v < static_cast<int>(lv.size()); ++v) {
        if (v == vocab_.loc()) continue;
        if (next < 0 || lv[v] > best) best = lv[v], next = v;
      }
      pending_trigger = next == vocab_.trigger();
      if (pending_trigger) {
        cur.triggers.emplace_back(cur.size(), geom::BBox{});
        cur.trigger_mask_refs.push_back(-1);
      }
    }
    cur.tokens.push_back(next);
    cur.supervised.push_back(0);
    res.tokens.push_back(next);
    if (next == vocab_.eos()) {
      res.hit_eos = true;
      break;
    }
    // A trailing <trigger> with no room for its <loc> cannot be decoded.
    if (pending_trigger && cur.size() >= cfg_.max_text_len()) break;
  }
  if (pending_trigger) {
    // Keep the stream grammatical: the dangling <trigger> is dropped.
    res.tokens.pop_back();
  }
  if (with_masks)
    for (std::size_t k = 0; k < res.boxes.size(); ++k)
      res.masks.push_back(decode_mask_from_hidden(res.trigger_states[k], visual, raster, res.boxes[k]));
  return res;
}

namespace {

void write_f32(const std::filesystem::path& file, std::span<const float> values) {
  std::ofstream out(file, std::ios::binary);
  if (!out) fail(ErrorCode::Io, "cannot write " + file.string());
  std::vector<unsigned char> bytes(values.size() * 4);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto u = std::bit_cast<std::uint32_t>(values[i]);
    for (int k = 0; k < 4; ++k) bytes[i * 4 + k] = static_cast<unsigned char>(u >> (8 * k));
  }
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorCode::Io, "write failed: " + file.string());
}

void read_f32(const std::filesystem::path& file, std::span<float> values) {
  std::ifstream in(file, std::ios::binary);
  if (!in) fail(ErrorCode::MissingCheckpoint, "missing parameter file " + file.string());
  std::vector<unsigned char> bytes(values.size() * 4);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size()) || in.peek() != EOF)
    fail(ErrorCode::ShapeMismatch, "parameter file has the wrong size: " + file.string());
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::uint32_t u = 0;
    for (int k = 0; k < 4; ++k) u |= static_cast<std::uint32_t>(bytes[i * 4 + k]) << (8 * k);
    values[i] = std::bit_cast<float>(u);
  }
}

json read_manifest(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) fail(ErrorCode::MissingCheckpoint, "no checkpoint manifest in " + dir.string());
  try {
    json j = json::parse(in);
    if (j.value("format", "") != kCheckpointFormat) fail(ErrorCode::MissingCheckpoint, "unknown checkpoint format");
    return j;
  } catch (const json::exception& e) {
    fail(ErrorCode::MissingCheckpoint, std::string("unreadable manifest: ") + e.what());
  }
}

}  // namespace

void Model::save(const std::filesystem::path& dir) const {
  std::error_code ec;
  std::filesystem::create_directories(dir / "params", ec);
  if (ec) fail(ErrorCode::Io, "cannot create " + dir.string() + ": " + ec.message());
  json m;
  m["format"] = kCheckpointFormat;
  m["config"] = json::parse(cfg_.to_json());
  m["vocab_size"] = vocab_.size();
  m["params"] = json::array();
  for (const auto& [name, t] : params_.entries()) {
    const std::string file = "params/" + name + ".bin";
    m["params"].push_back({{"name", name}, {"shape", t.shape()}, {"dtype", "f32"}, {"file", file}});
    write_f32(dir / file, t.data());
  }
  std::ofstream out(dir / "manifest.json", std::ios::binary);
  out << m.dump(2) << '\n';
  if (!out) fail(ErrorCode::Io, "cannot write manifest in " + dir.string());
}

void Model::load_params(const std::filesystem::path& dir) {
  const json m = read_manifest(dir);
  for (auto& [name, t] : params_.entries()) {
    const json* entry = nullptr;
    for (const auto& p : m.at("params"))
      if (p.at("name") == name) entry = &p;
    if (!entry) fail(ErrorCode::MissingCheckpoint, "checkpoint lacks parameter " + name);
    if (entry->at("shape").get<Shape>() != t.shape())
      fail(ErrorCode::ShapeMismatch, "parameter " + name + " has shape " +
                                         ad::shape_str(entry->at("shape").get<Shape>()) + ", model expects " +
                                         ad::shape_str(t.shape()));
    read_f32(dir / entry->at("file").get<std::string>(), t.data());
  }
}

Model Model::load(const std::filesystem::path& dir) {
  const json m = read_manifest(dir);
  Model model(ModelConfig::from_json(m.at("config").dump()), 0);
  model.load_params(dir);
  return model;
}

}  // namespace locemb::model
