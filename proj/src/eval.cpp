#include "locemb/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <exception>
#include <fstream>
#include <iostream>
#include <sstream>

#include "json.hpp"
#include "locemb/error.hpp"
#include "locemb/kernels.hpp"

namespace locemb::eval {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

double acc_at_iou(std::span<const geom::BBox> preds, std::span<const geom::BBox> gts, double thresh) {
  if (preds.size() != gts.size())
    fail(ErrorCode::LengthMismatch, std::to_string(preds.size()) + " predictions for " +
                                        std::to_string(gts.size()) + " ground-truth boxes");
  if (!(thresh > 0 && thresh < 1)) fail(ErrorCode::InvalidArgument, "IoU threshold must lie in (0,1)");
  if (preds.empty()) fail(ErrorCode::InvalidArgument, "no predictions to score");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    // A degenerate pair has no overlap to measure.
    const bool degenerate = preds[i].area() <= 0 && gts[i].area() <= 0;
    hits += !degenerate && geom::box_iou(preds[i], gts[i]) >= thresh;
  }
  return static_cast<double>(hits) / preds.size();
}

double vqa_accuracy(std::span<const int> choices, std::span<const int> answers) {
  if (choices.size() != answers.size())
    fail(ErrorCode::LengthMismatch, std::to_string(choices.size()) + " choices for " +
                                        std::to_string(answers.size()) + " answers");
  if (answers.empty()) fail(ErrorCode::InvalidArgument, "no answers to score");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < answers.size(); ++i) {
    if (answers[i] < 0 || answers[i] > 3) fail(ErrorCode::InvalidArgument, "answer index outside 0..3");
    if (choices[i] < -1 || choices[i] > 3) fail(ErrorCode::InvalidArgument, "choice index outside -1..3");
    hits += choices[i] == answers[i];
  }
  return static_cast<double>(hits) / answers.size();
}

namespace {

SampleResult evaluate_one(const model::Model& m, const data::Dataset& ds, std::size_t i,
                          const std::vector<float>& raster, const EvalOptions& opts) {
  const data::Sample& s = ds.samples[i];
  const auto& vocab = m.vocab();
  const model::SequencePlan prompt = m.plan(s, false);
  SampleResult r;
  r.id = s.id;
  r.task = s.task;

  switch (s.task) {
    case data::Task::Grounding: {
      const int tob = codec::tokens_per_box(m.config().scheme);
      const auto g = m.generate(prompt, raster, tob + 2, opts.with_masks);
      if (m.config().scheme == codec::Scheme::Pemb) {
        if (!g.boxes.empty()) r.box = g.boxes.front();
        if (opts.with_masks && !g.masks.empty()) {
          const int ref = s.mask_refs.at(0);
          r.mask_iou = geom::mask_soft_iou(g.masks.front(), ds.scenes[i].objects.at(ref).mask.to_mask());
        }
      } else {
        try {
          if (static_cast<int>(g.tokens.size()) < tob) fail(ErrorCode::LocParseError, "stream ended early");
          r.box = m.codec().decode_box(std::span<const int>(g.tokens.data(), tob));
        } catch (const Error& e) {
          if (e.code() != ErrorCode::LocParseError) throw;
          r.parse_failed = true;
        }
      }
      if (r.box && (r.box->area() > 0 || s.boxes[0].area() > 0)) r.iou = geom::box_iou(*r.box, s.boxes[0]);
      break;
    }
    case data::Task::RegionVqa: {
      r.answer = s.answer_idx;
      const auto g = m.generate(prompt, raster, 1);
      if (!g.tokens.empty()) {
        const std::string& tok = vocab.token(g.tokens[0]);
        if (tok.size() == 1 && tok[0] >= 'A' && tok[0] <= 'D') r.choice = tok[0] - 'A';
      }
      break;
    }
    case data::Task::RegionCaption: {
      const auto g = m.generate(prompt, raster, static_cast<int>(s.target_tokens.size()) + 2);
      std::vector<int> want;
      for (const auto& t : s.target_tokens) want.push_back(vocab.id(t));
      r.caption_correct = g.tokens == want;
      break;
    }
  }
  return r;
}

}  // namespace

std::vector<SampleResult> evaluate_samples(const model::Model& m, const data::Dataset& ds, const EvalOptions& opts) {
  const int n = static_cast<int>(ds.size());
  std::vector<SampleResult> out(n);
  std::exception_ptr err;
  // Each sample is independent; results land in their own slot and are
  // reduced in index order afterwards.
#pragma omp parallel for schedule(dynamic, 4) num_threads(kernels::thread_count())
  for (int i = 0; i < n; ++i) {
    try {
      out[i] = evaluate_one(m, ds, i, ds.rasters[i].to_floats(), opts);
    } catch (...) {
#pragma omp critical
      if (!err) err = std::current_exception();
    }
  }
  if (err) std::rethrow_exception(err);
  return out;
}

EvalReport summarize(const model::Model& m, std::span<const SampleResult> results, const EvalOptions& opts) {
  if (results.empty()) fail(ErrorCode::InvalidArgument, "nothing to evaluate");
  EvalReport r;
  r.scheme = std::string(codec::scheme_name(m.config().scheme));
  r.seed = opts.seed;
  r.sample_count = static_cast<int>(results.size());
  double iou_sum = 0, mask_sum = 0;
  int hits = 0, cap_hits = 0, parse_fail = 0;
  bool tasks[3] = {false, false, false};
  for (const auto& s : results) {
    tasks[static_cast<int>(s.task)] = true;
    switch (s.task) {
      case data::Task::Grounding:
        ++r.grounding_count;
        iou_sum += s.iou;
        hits += s.iou >= 0.5;
        parse_fail += s.parse_failed;
        if (s.mask_iou) {
          ++r.mask_count;
          mask_sum += *s.mask_iou;
        }
        break;
      case data::Task::RegionVqa:
        ++r.vqa_count;
        break;
      case data::Task::RegionCaption:
        ++r.caption_count;
        cap_hits += s.caption_correct;
        break;
    }
  }
  const int kinds = tasks[0] + tasks[1] + tasks[2];
  r.task = kinds == 1 ? std::string(data::task_name(results[0].task)) : "mixed";
  if (r.grounding_count) {
    r.acc_at_05 = static_cast<double>(hits) / r.grounding_count;
    r.mean_iou = iou_sum / r.grounding_count;
    r.parse_failure_rate = static_cast<double>(parse_fail) / r.grounding_count;
  }
  if (r.mask_count) r.mask_miou = mask_sum / r.mask_count;
  std::vector<int> choices, answers;
  for (const auto& s : results)
    if (s.task == data::Task::RegionVqa) {
      choices.push_back(s.choice);
      answers.push_back(s.answer);
    }
  if (!answers.empty()) r.vqa_accuracy = vqa_accuracy(choices, answers);
  if (r.caption_count) r.caption_accuracy = static_cast<double>(cap_hits) / r.caption_count;
  return r;
}

EvalReport evaluate(const model::Model& m, const data::Dataset& ds, const EvalOptions& opts) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto results = evaluate_samples(m, ds, opts);
  EvalReport r = summarize(m, results, opts);
  r.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

std::string EvalReport::to_json(bool with_time) const {
  json j;
  j["scheme"] = scheme;
  j["task"] = task;
  j["acc_at_0.5"] = acc_at_05;
  j["mean_iou"] = mean_iou;
  j["vqa_accuracy"] = vqa_accuracy;
  j["caption_accuracy"] = caption_accuracy;
  j["mask_miou"] = mask_miou;
  j["parse_failure_rate"] = parse_failure_rate;
  j["sample_count"] = sample_count;
  j["grounding_count"] = grounding_count;
  j["vqa_count"] = vqa_count;
  j["caption_count"] = caption_count;
  j["mask_count"] = mask_count;
  j["seed"] = seed;
  if (with_time) j["wall_time_s"] = wall_time_s;
  return j.dump(2);
}

std::string report_csv_header() {
  return "scheme,task,acc_at_0.5,mean_iou,vqa_accuracy,caption_accuracy,mask_miou,parse_failure_rate,sample_count,"
         "seed";
}

std::string report_csv_line(const EvalReport& r) {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%s,%s,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%d,%llu", r.scheme.c_str(),
                r.task.c_str(), r.acc_at_05, r.mean_iou, r.vqa_accuracy, r.caption_accuracy, r.mask_miou,
                r.parse_failure_rate, r.sample_count, static_cast<unsigned long long>(r.seed));
  return buf;
}

CompareConfig CompareConfig::from_json(std::string_view text) {
  CompareConfig c;
  try {
    const json j = json::parse(text);
    if (!j.contains("train")) fail(ErrorCode::InvalidArgument, "compare config needs a train section");
    c.train = train::TrainConfig::from_json(j.at("train").dump());
    c.grounding_train = j.value("grounding_train", "");
    c.grounding_eval = j.value("grounding_eval", "");
    c.vqa_train = j.value("vqa_train", "");
    c.vqa_eval = j.value("vqa_eval", "");
    c.vqa_steps = j.value("vqa_steps", 0);
    c.vqa_lr = j.value("vqa_lr", 0.0);
    c.out_dir = j.value("out_dir", "");
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::InvalidArgument, std::string("compare config: ") + e.what());
  }
  if (c.grounding_train.empty() || c.grounding_eval.empty())
    fail(ErrorCode::InvalidArgument, "compare config needs grounding_train and grounding_eval");
  if (c.vqa_train.empty() != c.vqa_eval.empty())
    fail(ErrorCode::InvalidArgument, "compare config needs both vqa_train and vqa_eval, or neither");
  return c;
}

CompareConfig CompareConfig::from_file(const fs::path& file) {
  std::ifstream in(file);
  if (!in) fail(ErrorCode::Io, "cannot read config " + file.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

CompareData CompareData::load(const CompareConfig& cfg) {
  CompareData d;
  d.grounding_train = data::read_dataset(cfg.grounding_train);
  d.grounding_eval = data::read_dataset(cfg.grounding_eval);
  if (!cfg.vqa_train.empty()) {
    d.vqa_train = data::read_dataset(cfg.vqa_train);
    d.vqa_eval = data::read_dataset(cfg.vqa_eval);
  }
  return d;
}

std::vector<ComparisonRow> compare_schemes(const CompareConfig& cfg, const CompareData& data,
                                           std::span<const codec::Scheme> schemes, bool verbose) {
  if (schemes.empty()) fail(ErrorCode::InvalidArgument, "no schemes to compare");
  std::vector<ComparisonRow> rows;
  for (const auto scheme : schemes) {
    ComparisonRow row;
    row.scheme = scheme;
    train::TrainConfig tc = cfg.train;
    tc.model.scheme = scheme;
    tc.stage = 1;
    tc.checkpoint_in.clear();
    tc.out_dir = cfg.out_dir.empty() ? "" : (fs::path(cfg.out_dir) / codec::scheme_name(scheme) / "grounding").string();
    if (verbose) std::cerr << "[" << codec::scheme_name(scheme) << "] grounding: " << tc.steps << " steps\n";
    train::TrainResult tr = train::run_stage(tc, data.grounding_train, std::nullopt, verbose);
    EvalOptions eo;
    eo.seed = tc.seed;
    row.grounding = evaluate(tr.model, data.grounding_eval, eo);
    if (verbose) std::cerr << report_csv_line(row.grounding) << '\n';

    if (data.vqa_train && cfg.vqa_steps > 0) {
      train::TrainConfig vc = tc;
      vc.stage = 2;
      vc.steps = cfg.vqa_steps;
      if (cfg.vqa_lr > 0) vc.lr = cfg.vqa_lr;
      vc.warmup_steps = std::min(vc.warmup_steps, vc.steps / 10);
      vc.out_dir = cfg.out_dir.empty() ? "" : (fs::path(cfg.out_dir) / codec::scheme_name(scheme) / "vqa").string();
      // Fine-tune from the grounding weights with fresh optimizer state.
      const fs::path tmp = fs::temp_directory_path() /
                           ("locemb_compare_" + std::string(codec::scheme_name(scheme)) + "_" + std::to_string(tc.seed));
      tr.model.save(tmp);
      vc.checkpoint_in = tmp.string();
      if (verbose) std::cerr << "[" << codec::scheme_name(scheme) << "] vqa: " << vc.steps << " steps\n";
      train::TrainResult vr = train::run_stage(vc, *data.vqa_train, std::nullopt, verbose);
      fs::remove_all(tmp);
      row.vqa = evaluate(vr.model, *data.vqa_eval, eo);
      if (verbose) std::cerr << report_csv_line(*row.vqa) << '\n';
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string comparison_csv(std::span<const ComparisonRow> rows) {
  std::string out = report_csv_header() + "\n";
  for (const auto& r : rows) {
    out += report_csv_line(r.grounding) + "\n";
    if (r.vqa) out += report_csv_line(*r.vqa) + "\n";
  }
  return out;
}

std::string comparison_table(std::span<const ComparisonRow> rows) {
  std::ostringstream os;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-8s %6s %10s %10s %10s %12s\n", "scheme", "ToB", "Acc@0.5", "mIoU", "parse-fail",
                "VQA acc");
  os << buf;
  for (const auto& r : rows) {
    const std::string vqa = r.vqa ? std::to_string(r.vqa->vqa_accuracy).substr(0, 6) : "-";
    std::snprintf(buf, sizeof buf, "%-8s %6d %10.4f %10.4f %10.4f %12s\n", r.grounding.scheme.c_str(),
                  codec::tokens_per_box(r.scheme), r.grounding.acc_at_05, r.grounding.mean_iou,
                  r.grounding.parse_failure_rate, vqa.c_str());
    os << buf;
  }
  return os.str();
}

}  // namespace locemb::eval
