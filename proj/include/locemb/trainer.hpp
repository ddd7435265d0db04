#pragma once

// Staged training: AdamW with warmup and cosine decay, global-norm clipping,
// name-pattern freezing, resumable checkpoints and a CSV metrics log.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "locemb/losses.hpp"
#include "locemb/model.hpp"
#include "locemb/synthdata.hpp"

namespace locemb::train {

struct TrainConfig {
  int stage = 1;
  int steps = 20000;
  int batch_size = 16;
  double lr = 1e-3;
  int warmup_steps = 200;
  double min_lr_ratio = 0.1;  // cosine decay floor, relative to lr
  double grad_clip = 1.0;     // <= 0 disables clipping
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  std::vector<std::string> frozen_patterns;  // '*' wildcards over parameter names
  bool freeze_patch_encoder = false;         // keep patch.* fixed in stages 1-2
  int log_every = 50;
  int checkpoint_every = 0;  // 0: only at the end
  std::string train_data;    // dataset directory
  std::string checkpoint_in;
  std::string out_dir;
  model::ModelConfig model;
  loss::LossConfig loss;

  void validate() const;
  std::string to_json() const;
  static TrainConfig from_json(std::string_view text);
  static TrainConfig from_file(const std::filesystem::path& file);
};

bool glob_match(std::string_view pattern, std::string_view name);
// Whether a parameter stays fixed under the config's stage policy.
bool is_frozen(const TrainConfig& cfg, std::string_view name);

struct OptimizerState {
  std::vector<std::vector<float>> m, v;  // one pair per model parameter
  std::int64_t step = 0;

  void resize_for(const model::ParamStore& params);
};

struct StepStats {
  double grad_norm = 0;  // before clipping
  double clip_scale = 1;
};

// Updates every parameter whose requires_grad is set. Throws
// NonFiniteGradient without touching parameters or state.
StepStats adamw_step(model::ParamStore& params, OptimizerState& state, double lr, const TrainConfig& cfg);

double learning_rate(const TrainConfig& cfg, std::int64_t step);

struct MetricsRow {
  std::int64_t step = 0;
  double l_text = 0, l_det = 0, l_cyc = 0, l_seg = 0, total = 0, grad_norm = 0, lr = 0;
};
std::string metrics_header();
std::string metrics_line(const MetricsRow& r);

struct TrainResult {
  model::Model model;
  OptimizerState optimizer;
  std::vector<MetricsRow> metrics;
  std::string frozen_digest_before, frozen_digest_after;
  int skipped_steps = 0;
};

// Stage 1-2 loss components for a packed batch. Location terms are zero for
// token-based schemes, whose boxes are supervised by the text loss alone.
loss::StageParts<float> text_stage_parts(const model::Model& m, std::span<const model::SequencePlan> plans,
                                         std::span<const std::span<const float>> rasters,
                                         const loss::LossConfig& cfg);

// Hex SHA-256 over the names and bytes of every frozen parameter.
std::string frozen_digest(const model::Model& m, const TrainConfig& cfg);

// Runs cfg.steps optimizer steps of the stage loss on ds. The starting point
// is, in order: resume_from (model plus optimizer state), cfg.checkpoint_in,
// or a fresh model seeded from cfg.seed. Stage 3 requires a checkpoint.
// Writes checkpoint and metrics.csv to cfg.out_dir when it is set.
TrainResult run_stage(const TrainConfig& cfg, const data::Dataset& ds,
                      const std::optional<std::filesystem::path>& resume_from = std::nullopt,
                      bool verbose = false);

// Model plus optimizer state and step counter.
void save_training_checkpoint(const std::filesystem::path& dir, const model::Model& m,
                              const OptimizerState& opt, const TrainConfig& cfg);

}  // namespace locemb::train
