#pragma once

// Metrics, greedy-decoding evaluation and the matched-budget scheme
// comparison.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "locemb/model.hpp"
#include "locemb/synthdata.hpp"
#include "locemb/trainer.hpp"

namespace locemb::eval {

// Fraction of pairs with IoU >= thresh. thresh must lie in (0,1).
double acc_at_iou(std::span<const geom::BBox> preds, std::span<const geom::BBox> gts, double thresh);
// Exact-match rate; a choice of -1 (no valid letter emitted) counts as wrong.
double vqa_accuracy(std::span<const int> choices, std::span<const int> answers);

struct SampleResult {
  std::int64_t id = 0;
  data::Task task = data::Task::Grounding;
  bool parse_failed = false;
  std::optional<geom::BBox> box;  // grounding prediction
  double iou = 0;                 // 0 when no box was produced
  int choice = -1;                // region vqa
  int answer = -1;
  bool caption_correct = false;
  std::optional<double> mask_iou;
};

struct EvalReport {
  std::string scheme;
  std::string task;  // "grounding", "region_vqa", "region_caption" or "mixed"
  double acc_at_05 = 0;
  double mean_iou = 0;
  double vqa_accuracy = 0;
  double caption_accuracy = 0;
  double mask_miou = 0;
  double parse_failure_rate = 0;
  int sample_count = 0;
  int grounding_count = 0, vqa_count = 0, caption_count = 0, mask_count = 0;
  std::uint64_t seed = 0;
  double wall_time_s = 0;  // excluded from the deterministic fields

  std::string to_json(bool with_time = true) const;
};

struct EvalOptions {
  bool with_masks = false;
  std::uint64_t seed = 0;  // recorded in the report; decoding is greedy
};

std::vector<SampleResult> evaluate_samples(const model::Model& m, const data::Dataset& ds,
                                           const EvalOptions& opts = {});
EvalReport summarize(const model::Model& m, std::span<const SampleResult> results, const EvalOptions& opts);
EvalReport evaluate(const model::Model& m, const data::Dataset& ds, const EvalOptions& opts = {});

// Fixed CSV column set. Wall time is left out so report files are reproducible.
std::string report_csv_header();
std::string report_csv_line(const EvalReport& r);

struct CompareConfig {
  train::TrainConfig train;  // grounding stage; scheme is overridden per row
  std::string grounding_train, grounding_eval;
  std::string vqa_train, vqa_eval;  // optional; VQA fine-tunes from the grounding run
  int vqa_steps = 0;
  double vqa_lr = 0;  // 0: same as train.lr
  std::string out_dir;

  static CompareConfig from_json(std::string_view text);
  static CompareConfig from_file(const std::filesystem::path& file);
};

struct ComparisonRow {
  codec::Scheme scheme = codec::Scheme::Pemb;
  EvalReport grounding;
  std::optional<EvalReport> vqa;
};

struct CompareData {
  data::Dataset grounding_train, grounding_eval;
  std::optional<data::Dataset> vqa_train, vqa_eval;

  static CompareData load(const CompareConfig& cfg);
};

// Trains and evaluates each scheme under the same seed, data and budget.
std::vector<ComparisonRow> compare_schemes(const CompareConfig& cfg, const CompareData& data,
                                           std::span<const codec::Scheme> schemes, bool verbose = false);
std::string comparison_csv(std::span<const ComparisonRow> rows);
std::string comparison_table(std::span<const ComparisonRow> rows);

}  // namespace locemb::eval
