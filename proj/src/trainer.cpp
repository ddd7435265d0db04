#include "locemb/trainer.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "json.hpp"
#include "locemb/error.hpp"
#include "locemb/rng.hpp"

namespace locemb::train {

using json = nlohmann::ordered_json;
using ad::Tensor;
namespace fs = std::filesystem;

void TrainConfig::validate() const {
  auto bad = [](const std::string& what) { fail(ErrorCode::InvalidArgument, "train config: " + what); };
  if (stage < 1 || stage > 3) bad("stage must be 1, 2 or 3");
  if (steps < 0) bad("steps must be non-negative");
  if (batch_size <= 0) bad("batch_size must be positive");
  if (!(lr > 0)) bad("lr must be positive");
  if (warmup_steps < 0) bad("warmup_steps must be non-negative");
  if (!(min_lr_ratio >= 0 && min_lr_ratio <= 1)) bad("min_lr_ratio must lie in [0,1]");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) bad("betas must lie in [0,1)");
  if (!(adam_eps > 0) || !(weight_decay >= 0)) bad("adam_eps must be positive, weight_decay non-negative");
  if (log_every <= 0) bad("log_every must be positive");
  if (checkpoint_every < 0) bad("checkpoint_every must be non-negative");
  model.validate();
  loss.validate();
}

std::string TrainConfig::to_json() const {
  json j;
  j["stage"] = stage;
  j["steps"] = steps;
  j["batch_size"] = batch_size;
  j["lr"] = lr;
  j["warmup_steps"] = warmup_steps;
  j["min_lr_ratio"] = min_lr_ratio;
  j["grad_clip"] = grad_clip;
  j["weight_decay"] = weight_decay;
  j["beta1"] = beta1;
  j["beta2"] = beta2;
  j["adam_eps"] = adam_eps;
  j["seed"] = seed;
  j["frozen_patterns"] = frozen_patterns;
  j["freeze_patch_encoder"] = freeze_patch_encoder;
  j["log_every"] = log_every;
  j["checkpoint_every"] = checkpoint_every;
  j["train_data"] = train_data;
  j["checkpoint_in"] = checkpoint_in;
  j["out_dir"] = out_dir;
  j["model"] = json::parse(model.to_json());
  j["loss"] = {{"alpha", loss.alpha},
               {"beta", loss.beta},
               {"focal_gamma", loss.focal_gamma},
               {"focal_alpha", loss.focal_alpha},
               {"cycle_box_weight", loss.cycle_box_weight},
               {"cycle_embedding_weight", loss.cycle_embedding_weight}};
  return j.dump(2);
}

TrainConfig TrainConfig::from_json(std::string_view text) {
  TrainConfig c;
  try {
    const json j = json::parse(text);
    auto get = [](const json& src, const char* key, auto& field) {
      if (src.contains(key)) field = src.at(key).get<std::decay_t<decltype(field)>>();
    };
    get(j, "stage", c.stage);
    get(j, "steps", c.steps);
    get(j, "batch_size", c.batch_size);
    get(j, "lr", c.lr);
    get(j, "warmup_steps", c.warmup_steps);
    get(j, "min_lr_ratio", c.min_lr_ratio);
    get(j, "grad_clip", c.grad_clip);
    get(j, "weight_decay", c.weight_decay);
    get(j, "beta1", c.beta1);
    get(j, "beta2", c.beta2);
    get(j, "adam_eps", c.adam_eps);
    get(j, "seed", c.seed);
    get(j, "frozen_patterns", c.frozen_patterns);
    get(j, "freeze_patch_encoder", c.freeze_patch_encoder);
    get(j, "log_every", c.log_every);
    get(j, "checkpoint_every", c.checkpoint_every);
    get(j, "train_data", c.train_data);
    get(j, "checkpoint_in", c.checkpoint_in);
    get(j, "out_dir", c.out_dir);
    if (j.contains("model")) c.model = model::ModelConfig::from_json(j.at("model").dump());
    if (j.contains("loss")) {
      const json& l = j.at("loss");
      get(l, "alpha", c.loss.alpha);
      get(l, "beta", c.loss.beta);
      get(l, "focal_gamma", c.loss.focal_gamma);
      get(l, "focal_alpha", c.loss.focal_alpha);
      get(l, "cycle_box_weight", c.loss.cycle_box_weight);
      get(l, "cycle_embedding_weight", c.loss.cycle_embedding_weight);
    }
  } catch (const json::exception& e) {
    fail(ErrorCode::InvalidArgument, std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

TrainConfig TrainConfig::from_file(const fs::path& file) {
  std::ifstream in(file);
  if (!in) fail(ErrorCode::Io, "cannot read config " + file.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

bool glob_match(std::string_view pattern, std::string_view name) {
  // Iterative wildcard match with single-star backtracking.
  std::size_t p = 0, n = 0, star = std::string_view::npos, mark = 0;
  while (n < name.size()) {
    if (p < pattern.size() && pattern[p] == '*') {
      star = p++;
      mark = n;
    } else if (p < pattern.size() && pattern[p] == name[n]) {
      ++p, ++n;
    } else if (star != std::string_view::npos) {
      p = star + 1;
      n = ++mark;
    } else {
      return false;
    }
  }
  while (p < pattern.size() && pattern[p] == '*') ++p;
  return p == pattern.size();
}

bool is_frozen(const TrainConfig& cfg, std::string_view name) {
  if (cfg.stage == 3) return !model::is_mask_param(name);
  if (model::is_mask_param(name)) return true;
  if (cfg.freeze_patch_encoder && model::is_patch_param(name)) return true;
  return std::any_of(cfg.frozen_patterns.begin(), cfg.frozen_patterns.end(),
                     [&](const std::string& p) { return glob_match(p, name); });
}

void OptimizerState::resize_for(const model::ParamStore& params) {
  m.clear();
  v.clear();
  for (const auto& [name, t] : params.entries()) {
    m.emplace_back(t.numel(), 0.0f);
    v.emplace_back(t.numel(), 0.0f);
  }
}

StepStats adamw_step(model::ParamStore& params, OptimizerState& state, double lr, const TrainConfig& cfg) {
  auto& entries = params.entries();
  if (state.m.size() != entries.size()) state.resize_for(params);
  StepStats st;
  double sq = 0;
  for (auto& [name, t] : entries) {
    if (!t.requires_grad() || !t.has_grad()) continue;
    for (float g : t.grad()) sq += static_cast<double>(g) * g;
  }
  st.grad_norm = std::sqrt(sq);
  if (!std::isfinite(st.grad_norm))
    fail(ErrorCode::NonFiniteGradient, "non-finite gradient at step " + std::to_string(state.step + 1));
  if (cfg.grad_clip > 0 && st.grad_norm > cfg.grad_clip) st.clip_scale = cfg.grad_clip / st.grad_norm;

  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto& t = entries[i].second;
    if (!t.requires_grad()) continue;
    auto w = t.data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.size() != w.size() || v.size() != w.size())
      fail(ErrorCode::ShapeMismatch, "optimizer moments do not match " + entries[i].first);
    const bool has = t.has_grad();
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double g = has ? t.grad()[k] * st.clip_scale : 0.0;
      const double mk = cfg.beta1 * m[k] + (1 - cfg.beta1) * g;
      const double vk = cfg.beta2 * v[k] + (1 - cfg.beta2) * g * g;
      m[k] = static_cast<float>(mk);
      v[k] = static_cast<float>(vk);
      double x = w[k];
      x -= lr * cfg.weight_decay * x;
      x -= lr * (mk / bc1) / (std::sqrt(vk / bc2) + cfg.adam_eps);
      w[k] = static_cast<float>(x);
    }
  }
  return st;
}

double learning_rate(const TrainConfig& cfg, std::int64_t step) {
  if (cfg.warmup_steps > 0 && step < cfg.warmup_steps) return cfg.lr * (step + 1) / cfg.warmup_steps;
  const double span = std::max<std::int64_t>(1, cfg.steps - cfg.warmup_steps);
  const double progress = std::clamp((step - cfg.warmup_steps) / span, 0.0, 1.0);
  const double cosine = 0.5 * (1.0 + std::cos(M_PI * progress));
  return cfg.lr * (cfg.min_lr_ratio + (1.0 - cfg.min_lr_ratio) * cosine);
}

std::string metrics_header() { return "step,l_text,l_det,l_cyc,l_seg,total,grad_norm,lr"; }

std::string metrics_line(const MetricsRow& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%lld,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g", static_cast<long long>(r.step), r.l_text,
                r.l_det, r.l_cyc, r.l_seg, r.total, r.grad_norm, r.lr);
  return buf;
}

std::string frozen_digest(const model::Model& m, const TrainConfig& cfg) {
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1) fail(ErrorCode::Io, "sha256 unavailable");
  for (const auto& [name, t] : m.params().entries()) {
    if (!is_frozen(cfg, name)) continue;
    EVP_DigestUpdate(ctx, name.data(), name.size());
    EVP_DigestUpdate(ctx, t.data().data(), t.numel() * sizeof(float));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  std::string hex;
  static const char* digits = "0123456789abcdef";
  for (unsigned i = 0; i < len; ++i) {
    hex.push_back(digits[md[i] >> 4]);
    hex.push_back(digits[md[i] & 15]);
  }
  return hex;
}

loss::StageParts<float> text_stage_parts(const model::Model& m, std::span<const model::SequencePlan> plans,
                                         std::span<const std::span<const float>> rasters,
                                         const loss::LossConfig& cfg) {
  const model::ForwardOut o = m.forward(plans, rasters);
  loss::StageParts<float> parts;
  parts.text = loss::l_text(o.logits, o.targets, o.mask);
  parts.det = Tensor::scalar(0.0f);
  parts.cyc = Tensor::scalar(0.0f);
  if (m.config().scheme != codec::Scheme::Pemb) return parts;

  // Every box in the batch, given or predicted, feeds the cycle box term.
  std::vector<geom::BBox> all_boxes = o.trigger_boxes;
  for (const auto& p : plans)
    for (const auto& [pos, box] : p.loc_overrides)
      if (std::none_of(p.triggers.begin(), p.triggers.end(), [&](const auto& t) { return t.first + 1 == pos; }))
        all_boxes.push_back(box);
  const loss::Mapping<float> F = [&](const Tensor& t) { return m.box_decoder(t); };
  const loss::Mapping<float> G = [&](const Tensor& b) { return m.loc_encoder(b); };
  if (o.trigger_hidden.defined()) parts.det = loss::l_det(m.box_decoder(o.trigger_hidden), o.trigger_boxes, cfg);
  if (!all_boxes.empty())
    parts.cyc = loss::l_cyc(loss::boxes_tensor<float>(all_boxes), o.trigger_hidden, F, G, cfg);
  return parts;
}

namespace {

void write_moments(const fs::path& file, const std::vector<std::vector<float>>& moments) {
  std::ofstream out(file, std::ios::binary);
  for (const auto& mv : moments)
    for (float f : mv) {
      const auto u = std::bit_cast<std::uint32_t>(f);
      const unsigned char b[4] = {static_cast<unsigned char>(u), static_cast<unsigned char>(u >> 8),
                                  static_cast<unsigned char>(u >> 16), static_cast<unsigned char>(u >> 24)};
      out.write(reinterpret_cast<const char*>(b), 4);
    }
  if (!out) fail(ErrorCode::Io, "cannot write " + file.string());
}

void read_moments(const fs::path& file, std::vector<std::vector<float>>& moments) {
  std::ifstream in(file, std::ios::binary);
  if (!in) fail(ErrorCode::MissingCheckpoint, "missing optimizer state " + file.string());
  for (auto& mv : moments)
    for (float& f : mv) {
      unsigned char b[4];
      in.read(reinterpret_cast<char*>(b), 4);
      f = std::bit_cast<float>(static_cast<std::uint32_t>(b[0]) | static_cast<std::uint32_t>(b[1]) << 8 |
                               static_cast<std::uint32_t>(b[2]) << 16 | static_cast<std::uint32_t>(b[3]) << 24);
    }
  if (!in || in.peek() != EOF) fail(ErrorCode::MissingCheckpoint, "optimizer state has the wrong size");
}

// Uniform batch without replacement (with replacement only when the dataset
// is smaller than the batch), determined by (seed, step) alone.
std::vector<int> sample_batch(std::uint64_t seed, std::int64_t step, int n, int batch) {
  Rng rng(mix_seed(seed, static_cast<std::uint64_t>(step)));
  std::vector<int> out;
  if (batch >= n) {
    for (int i = 0; i < batch; ++i) out.push_back(i < n ? i : static_cast<int>(rng.below(n)));
    return out;
  }
  std::map<int, int> swapped;  // sparse Fisher-Yates
  auto at = [&](int i) { auto it = swapped.find(i); return it == swapped.end() ? i : it->second; };
  for (int i = 0; i < batch; ++i) {
    const int j = i + static_cast<int>(rng.below(n - i));
    const int vi = at(i), vj = at(j);
    swapped[i] = vj;
    swapped[j] = vi;
    out.push_back(vj);
  }
  return out;
}

// Frozen transformer outputs for one sample, reused across stage-3 steps.
struct MaskInputs {
  std::vector<float> trigger;  // [d]
  Tensor visual;               // [g^2 x d]
  geom::BBox box;              // F(trigger)
  int mask_ref = -1;
};

}  // namespace

void save_training_checkpoint(const fs::path& dir, const model::Model& m, const OptimizerState& opt,
                              const TrainConfig& cfg) {
  m.save(dir);
  write_moments(dir / "adam_m.bin", opt.m);
  write_moments(dir / "adam_v.bin", opt.v);
  json st;
  st["step"] = opt.step;
  st["train_config"] = json::parse(cfg.to_json());
  std::ofstream out(dir / "trainer_state.json", std::ios::binary);
  out << st.dump(2) << '\n';
  if (!out) fail(ErrorCode::Io, "cannot write trainer state in " + dir.string());
}

TrainResult run_stage(const TrainConfig& cfg, const data::Dataset& ds,
                      const std::optional<fs::path>& resume_from, bool verbose) {
  cfg.validate();
  if (ds.samples.empty()) fail(ErrorCode::InvalidArgument, "training set is empty");

  std::optional<model::Model> start;
  OptimizerState opt;
  if (resume_from) {
    start.emplace(model::Model::load(*resume_from));
    opt.resize_for(start->params());
    read_moments(*resume_from / "adam_m.bin", opt.m);
    read_moments(*resume_from / "adam_v.bin", opt.v);
    std::ifstream in(*resume_from / "trainer_state.json");
    if (!in) fail(ErrorCode::MissingCheckpoint, "no trainer state in " + resume_from->string());
    opt.step = json::parse(in).at("step").get<std::int64_t>();
  } else if (!cfg.checkpoint_in.empty()) {
    start.emplace(model::Model::load(cfg.checkpoint_in));
  } else if (cfg.stage == 3) {
    fail(ErrorCode::MissingCheckpoint, "stage 3 needs a checkpoint from stages 1-2");
  } else {
    start.emplace(cfg.model, cfg.seed);
  }
  TrainResult res{std::move(*start), std::move(opt), {}, {}, {}, 0};
  model::Model& m = res.model;
  if (res.optimizer.m.size() != m.params().entries().size()) res.optimizer.resize_for(m.params());
  if (cfg.stage == 3 && m.config().scheme != codec::Scheme::Pemb)
    fail(ErrorCode::UnsupportedScheme, "mask training needs trigger states, which only pemb produces");

  for (auto& [name, t] : m.params().entries()) t.set_requires_grad(!is_frozen(cfg, name));
  res.frozen_digest_before = frozen_digest(m, cfg);

  // Plans and float rasters are built once.
  std::vector<model::SequencePlan> plans;
  plans.reserve(ds.size());
  for (const auto& s : ds.samples) plans.push_back(m.plan(s));
  std::vector<std::vector<float>> rasters;
  rasters.reserve(ds.size());
  for (const auto& r : ds.rasters) rasters.push_back(r.to_floats());
  std::vector<std::optional<MaskInputs>> mask_cache(ds.size());

  std::ofstream metrics_file;
  if (!cfg.out_dir.empty()) {
    fs::create_directories(cfg.out_dir);
    const bool append = resume_from.has_value() && fs::exists(fs::path(cfg.out_dir) / "metrics.csv");
    metrics_file.open(fs::path(cfg.out_dir) / "metrics.csv", append ? std::ios::app : std::ios::trunc);
    if (!append) metrics_file << metrics_header() << '\n';
  }

  auto mask_inputs = [&](int i) -> const MaskInputs& {
    if (!mask_cache[i]) {
      ad::NoGradGuard guard;
      const std::span<const float> r[] = {rasters[i]};
      const model::ForwardOut o = m.forward(std::span(&plans[i], 1), r);
      if (!o.trigger_hidden.defined())
        fail(ErrorCode::InvalidArgument, "stage 3 sample " + std::to_string(ds.samples[i].id) + " has no <trigger>");
      MaskInputs mi;
      mi.trigger.assign(o.trigger_hidden.data().begin(), o.trigger_hidden.data().begin() + m.config().d_model);
      mi.visual = o.visual_hidden;
      mi.box = m.decode_box_from_hidden(mi.trigger);
      mi.mask_ref = o.trigger_mask_refs[0];
      mask_cache[i] = std::move(mi);
    }
    return *mask_cache[i];
  };

  const std::int64_t first = res.optimizer.step;
  for (std::int64_t step = first; step < cfg.steps; ++step) {
    const auto idx = sample_batch(cfg.seed, step, static_cast<int>(ds.size()), cfg.batch_size);
    for (auto& [name, t] : m.params().entries())
      if (t.requires_grad()) t.zero_grad();
    ad::active_tape<float>().clear();

    loss::StageParts<float> parts;
    MetricsRow row;
    if (cfg.stage == 3) {
      std::vector<float> t;
      std::vector<Tensor> visual;
      std::vector<std::span<const float>> rs;
      std::vector<geom::BBox> boxes;
      std::vector<geom::MaskGrid> gts;
      for (int i : idx) {
        const MaskInputs& mi = mask_inputs(i);
        t.insert(t.end(), mi.trigger.begin(), mi.trigger.end());
        visual.push_back(mi.visual);
        rs.push_back(rasters[i]);
        boxes.push_back(mi.box);
        gts.push_back(ds.scenes[i].objects.at(mi.mask_ref).mask.to_mask());
      }
      const Tensor th = Tensor::from({static_cast<int>(idx.size()), m.config().d_model}, std::move(t));
      parts.seg = loss::l_seg(m.decode_masks(th, visual, rs, boxes), gts, cfg.loss);
      row.l_seg = parts.seg.item();
    } else {
      std::vector<model::SequencePlan> bp;
      std::vector<std::span<const float>> rs;
      for (int i : idx) {
        bp.push_back(plans[i]);
        rs.push_back(rasters[i]);
      }
      parts = text_stage_parts(m, bp, rs, cfg.loss);
      row.l_text = parts.text.item();
      row.l_det = parts.det.item();
      row.l_cyc = parts.cyc.item();
    }
    const Tensor total = loss::stage_loss(cfg.stage, parts);
    row.total = total.item();
    row.step = step + 1;
    row.lr = learning_rate(cfg, step);
    ad::backward(total);

    try {
      row.grad_norm = adamw_step(m.params(), res.optimizer, row.lr, cfg).grad_norm;
    } catch (const Error& e) {
      if (e.code() != ErrorCode::NonFiniteGradient) throw;
      ++res.skipped_steps;
      ++res.optimizer.step;  // the schedule moves on; parameters do not
      row.grad_norm = std::nan("");
      std::cerr << "warning: " << e.what() << ", step skipped\n";
    }

    if (row.step % cfg.log_every == 0 || row.step == cfg.steps) {
      res.metrics.push_back(row);
      if (metrics_file.is_open()) metrics_file << metrics_line(row) << '\n' << std::flush;
      if (verbose) std::cerr << metrics_line(row) << '\n';
    }
    if (cfg.checkpoint_every > 0 && row.step % cfg.checkpoint_every == 0 && !cfg.out_dir.empty() &&
        row.step != cfg.steps)
      save_training_checkpoint(fs::path(cfg.out_dir) / ("step_" + std::to_string(row.step)), m, res.optimizer, cfg);
  }

  res.frozen_digest_after = frozen_digest(m, cfg);
  if (res.frozen_digest_after != res.frozen_digest_before)
    fail(ErrorCode::FrozenParamDrift, "frozen parameters changed during stage " + std::to_string(cfg.stage));
  for (auto& [name, t] : m.params().entries()) t.set_requires_grad(true);
  if (!cfg.out_dir.empty()) save_training_checkpoint(cfg.out_dir, m, res.optimizer, cfg);
  return res;
}

}  // namespace locemb::train
