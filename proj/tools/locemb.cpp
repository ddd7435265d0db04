// Command-line entry point: dataset generation, staged training, evaluation,
// scheme comparison and the gradient suite.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "locemb/error.hpp"
#include "locemb/eval.hpp"
#include "locemb/gradsuite.hpp"
#include "locemb/kernels.hpp"
#include "locemb/synthdata.hpp"
#include "locemb/trainer.hpp"

using namespace locemb;
namespace fs = std::filesystem;

namespace {

void write_text(const fs::path& file, const std::string& text) {
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  std::ofstream out(file, std::ios::binary);
  out << text;
  if (!out) fail(ErrorCode::Io, "cannot write " + file.string());
}

int cmd_gen_data(std::uint64_t seed, int n, const std::string& mix, const std::string& split, const std::string& out) {
  const auto ds = data::generate_dataset(seed, n, data::TaskMix::parse(mix), data::parse_split(split));
  data::write_dataset(ds, out);
  std::cout << "wrote " << ds.size() << " samples to " << out << "\n";
  return 0;
}

int cmd_train(const std::string& config, int stage, const std::string& resume, const std::string& data_dir,
              int steps, bool verbose) {
  auto cfg = train::TrainConfig::from_file(config);
  if (stage > 0) cfg.stage = stage;
  if (steps >= 0) cfg.steps = steps;
  if (!data_dir.empty()) cfg.train_data = data_dir;
  if (cfg.train_data.empty()) fail(ErrorCode::InvalidArgument, "no training data: set train_data or --data");
  if (cfg.out_dir.empty()) fail(ErrorCode::InvalidArgument, "no output directory: set out_dir");
  cfg.validate();
  const auto ds = data::read_dataset(cfg.train_data);
  std::optional<fs::path> from;
  if (!resume.empty()) from = resume;
  const auto res = train::run_stage(cfg, ds, from, verbose);
  if (!res.metrics.empty()) std::cout << train::metrics_header() << "\n" << train::metrics_line(res.metrics.back()) << "\n";
  std::cout << "frozen-sha256 " << res.frozen_digest_after << "\n";
  std::cout << "checkpoint " << cfg.out_dir << "\n";
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& split, const std::string& report, bool masks,
             std::uint64_t seed) {
  const auto m = model::Model::load(checkpoint);
  const auto ds = data::read_dataset(split);
  eval::EvalOptions opts;
  opts.with_masks = masks;
  opts.seed = seed;
  const auto r = eval::evaluate(m, ds, opts);
  const std::string json = r.to_json(false);
  if (!report.empty()) {
    const fs::path p(report);
    if (p.extension() == ".csv")
      write_text(p, eval::report_csv_header() + "\n" + eval::report_csv_line(r) + "\n");
    else
      write_text(p, json + "\n");
  }
  std::cout << json << "\n";
  std::fprintf(stderr, "eval wall time %.2fs\n", r.wall_time_s);
  return 0;
}

int cmd_compare(const std::string& config, const std::string& schemes_arg, const std::string& out, bool verbose) {
  const auto cfg = eval::CompareConfig::from_file(config);
  std::vector<codec::Scheme> schemes;
  std::stringstream ss(schemes_arg);
  std::string item;
  while (std::getline(ss, item, ',')) schemes.push_back(codec::parse_scheme(item));
  const auto data = eval::CompareData::load(cfg);
  const auto rows = eval::compare_schemes(cfg, data, schemes, verbose);
  const std::string csv = eval::comparison_csv(rows);
  const std::string table = eval::comparison_table(rows);
  if (!out.empty()) {
    write_text(fs::path(out) / "comparison.csv", csv);
    write_text(fs::path(out) / "comparison.txt", table);
  }
  std::cout << table;
  return 0;
}

int cmd_gradcheck(std::uint64_t seed) {
  bool ok = true;
  double worst = 0;
  gradsuite::run_all(seed, gradsuite::kInstances, [&](const gradsuite::CheckResult& r) {
    std::printf("%-22s max_rel_err=%.3e tol=%.0e %s\n", r.name.c_str(), r.max_rel_err, r.tolerance,
                r.passed() ? "ok" : "FAIL");
    ok &= r.passed();
    worst = std::max(worst, r.max_rel_err / r.tolerance);
  });
  std::printf("gradcheck %s (worst error/tolerance ratio %.3e)\n", ok ? "passed" : "FAILED", worst);
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Location modeling at desk scale: pixel2emb versus pixel2seq"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset");
  std::uint64_t seed = 0;
  int n = 0;
  std::string mix = "1,0,0", split = "train", out;
  gen->add_option("--seed", seed, "Generator seed")->required();
  gen->add_option("--n", n, "Number of samples")->required();
  gen->add_option("--mix", mix, "Task ratios grounding,region_caption,region_vqa")->capture_default_str();
  gen->add_option("--split", split, "train, val or test (scene ids never overlap)")->capture_default_str();
  gen->add_option("--out", out, "Output directory")->required();

  auto* tr = app.add_subcommand("train", "Run one training stage");
  std::string config, resume, data_dir;
  int stage = 0, steps = -1;
  bool verbose = false;
  tr->add_option("--config", config, "TrainConfig JSON")->required()->check(CLI::ExistingFile);
  tr->add_option("--stage", stage, "Override the stage (1, 2 or 3)")->check(CLI::Range(1, 3));
  tr->add_option("--resume", resume, "Resume from a training checkpoint directory");
  tr->add_option("--data", data_dir, "Override the training dataset directory");
  tr->add_option("--steps", steps, "Override the step count");
  tr->add_flag("--verbose", verbose, "Print metrics as they are logged");

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
  std::string checkpoint, report;
  bool masks = false;
  ev->add_option("--checkpoint", checkpoint, "Checkpoint directory")->required();
  ev->add_option("--split", split, "Dataset directory to evaluate")->required();
  ev->add_option("--report", report, "Write the report (.json or .csv)");
  ev->add_option("--seed", seed, "Seed recorded in the report");
  ev->add_flag("--masks", masks, "Also decode masks (pemb)");

  auto* cmp = app.add_subcommand("compare", "Train and evaluate schemes under a matched budget");
  std::string schemes = "pemb,p4bin,p2bin";
  cmp->add_option("--config", config, "Comparison config JSON")->required()->check(CLI::ExistingFile);
  cmp->add_option("--schemes", schemes, "Comma-separated schemes")->capture_default_str();
  cmp->add_option("--out", out, "Directory for comparison.csv and comparison.txt");
  cmp->add_flag("--verbose", verbose, "Print training progress");

  auto* gc = app.add_subcommand("gradcheck", "Run the finite-difference gradient suite");
  gc->add_option("--seed", seed, "Suite seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() != 0) {
      std::cerr << app.help() << "\n";
      std::cerr << "error: code=Usage msg=" << e.what() << "\n";
      return 2;
    }
    return app.exit(e);
  }

  try {
    if (gen->parsed()) return cmd_gen_data(seed, n, mix, split, out);
    if (tr->parsed()) return cmd_train(config, stage, resume, data_dir, steps, verbose);
    if (ev->parsed()) return cmd_eval(checkpoint, split, report, masks, seed);
    if (cmp->parsed()) return cmd_compare(config, schemes, out, verbose);
    if (gc->parsed()) return cmd_gradcheck(seed);
  } catch (const Error& e) {
    std::cerr << "error: code=" << to_string(e.code()) << " msg=" << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: code=Internal msg=" << e.what() << "\n";
    return 1;
  }
  return 0;
}
