// Acceptance run: one [PASS]/[FAIL] line per criterion. Criteria can be
// selected by number on the command line; the CLI binary path is required for
// the determinism check.
//
//   acceptance --cli <path to locemb> [--work <dir>] [1 2 ...]

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "locemb/codec.hpp"
#include "locemb/error.hpp"
#include "locemb/eval.hpp"
#include "locemb/geometry.hpp"
#include "locemb/gradsuite.hpp"
#include "locemb/losses.hpp"
#include "locemb/model.hpp"
#include "locemb/rng.hpp"
#include "locemb/synthdata.hpp"
#include "locemb/trainer.hpp"

namespace fs = std::filesystem;
using namespace locemb;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, auto... args) {
  char buf[1024];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

geom::BBox random_box(Rng& rng, double min_side = 0.0) {
  for (;;) {
    double a = rng.uniform(), b = rng.uniform(), c = rng.uniform(), d = rng.uniform();
    if (a > c) std::swap(a, c);
    if (b > d) std::swap(b, d);
    if (c - a >= min_side && d - b >= min_side) return {a, b, c, d};
  }
}

// Desk-scale model shared by the training criteria.
model::ModelConfig small_model(codec::Scheme scheme, int patch_grid) {
  model::ModelConfig m;
  m.d_model = 64;
  m.n_layers = 2;
  m.n_heads = 4;
  m.ffn_mult = 4;
  m.patch_grid = patch_grid;
  m.max_seq_len = 96;
  m.scheme = scheme;
  return m;
}

// 1. Finite-difference gradient suite.
Outcome gradient_suite() {
  constexpr double kBudgetS = 120;
  const auto t0 = Clock::now();
  const auto results = gradsuite::run_all(0, gradsuite::kInstances);
  const double secs = seconds_since(t0);
  bool ok = secs < kBudgetS;
  double worst64 = 0, worst32 = 0;
  std::string failed;
  for (const auto& r : results) {
    (r.tolerance == gradsuite::kTolerance32 ? worst32 : worst64) =
        std::max(r.tolerance == gradsuite::kTolerance32 ? worst32 : worst64, r.max_rel_err);
    if (!r.passed() || r.instances != gradsuite::kInstances) {
      ok = false;
      failed += " " + r.name;
    }
  }
  return {ok, fmt("%zu checks x %d instances, max rel err fp64 %.3g (< %.0e), fp32 %.3g (< %.0e), %.1fs (< %.0fs)%s",
                  results.size(), gradsuite::kInstances, worst64, gradsuite::kTolerance64, worst32,
                  gradsuite::kTolerance32, secs, kBudgetS, failed.empty() ? "" : (" failed:" + failed).c_str())};
}

// 2. Closed-form IoU/GIoU against the grid-counting oracle. Counting cell
// centres misplaces each edge by up to half a cell, so sides are kept at
// 0.1 or more (every synthetic object is at least 0.12 wide) to keep the
// oracle's own error well inside the tolerance.
Outcome iou_oracle() {
  constexpr int kPairs = 1000, kGrid = 512;
  constexpr double kTol = 1e-2, kBudgetS = 30, kMinSide = 0.1;
  const auto t0 = Clock::now();
  Rng rng(2);
  double worst = 0;
  int order_bad = 0, range_bad = 0;
  for (int i = 0; i < kPairs; ++i) {
    const auto a = random_box(rng, kMinSide), b = random_box(rng, kMinSide);
    const double iou = geom::box_iou(a, b), giou = geom::box_giou(a, b);
    worst = std::max(worst, std::abs(iou - geom::oracle_iou(a, b, kGrid)));
    order_bad += giou > iou;
    range_bad += !(giou > -1.0 && giou <= 1.0);
  }
  const double secs = seconds_since(t0);
  return {worst < kTol && order_bad == 0 && range_bad == 0 && secs < kBudgetS,
          fmt("%d pairs (sides >= 0.1), max |iou - oracle| %.3g (< %.0e), giou > iou: %d, giou outside (-1,1]: %d, %.1fs", kPairs,
              worst, kTol, order_bad, range_bad, secs)};
}

// 3. Codec roundtrip bounds and per-scheme accounting.
Outcome codec_roundtrip() {
  using codec::Scheme;
  struct Case {
    Scheme scheme;
    double bound;
  };
  bool ok = true;
  std::string detail;
  Rng rng(3);
  for (const auto [scheme, bound] : {Case{Scheme::P4bin, 0.5 / 224}, Case{Scheme::P2bin, 0.5 / 32},
                                     Case{Scheme::Pnum, 5e-4}}) {
    const auto v = codec::Vocab::for_scheme(scheme);
    const codec::LocCodec c(v);
    double worst = 0;
    for (int i = 0; i < 1000; ++i) {
      const auto b = random_box(rng);
      const auto bb = b.as_array(), dd = c.decode_box(c.encode_box(b)).as_array();
      for (int k = 0; k < 4; ++k) worst = std::max(worst, std::abs(bb[k] - dd[k]));
    }
    ok = ok && worst <= bound + 1e-12;
    detail += fmt("%s err %.3g (<= %.3g); ", std::string(codec::scheme_name(scheme)).c_str(), worst, bound);
  }
  const auto count = [](Scheme s) { return codec::Vocab::for_scheme(s).location_token_count(); };
  const bool tob = codec::tokens_per_box(Scheme::P4bin) == 6 && codec::tokens_per_box(Scheme::P2bin) == 4 &&
                   codec::tokens_per_box(Scheme::Pemb) == 2;
  const bool added = count(Scheme::P4bin) == 224 && count(Scheme::P2bin) == 1024 && count(Scheme::Pnum) == 0 &&
                     count(Scheme::Pemb) == 2;
  detail += fmt("ToB 6/4/2 %s, added vocab 224/1024/0/2 %s", tob ? "ok" : "WRONG", added ? "ok" : "WRONG");
  return {ok && tob && added, detail};
}

// 4. The cycle loss alone binds the location encoder and decoder.
Outcome cycle_binding() {
  constexpr int kSteps = 2000, kBatch = 64, kHeldOut = 1000;
  constexpr double kTarget = 0.02, kBudgetS = 60;
  const auto t0 = Clock::now();
  model::ModelConfig mc;  // default width
  model::Model m(mc, 4);
  for (auto& [name, t] : m.params().entries())
    t.set_requires_grad(name.starts_with("box_decoder.") || name.starts_with("loc_encoder."));
  train::TrainConfig tc;
  tc.steps = kSteps;
  tc.lr = 3e-3;
  tc.warmup_steps = 100;
  tc.weight_decay = 0;
  train::OptimizerState opt;
  opt.resize_for(m.params());
  const loss::Mapping<float> F = [&](const ad::Tensor& t) { return m.box_decoder(t); };
  const loss::Mapping<float> G = [&](const ad::Tensor& b) { return m.loc_encoder(b); };
  Rng rng(4);
  for (int step = 0; step < kSteps; ++step) {
    std::vector<geom::BBox> boxes(kBatch);
    for (auto& b : boxes) b = random_box(rng);
    for (auto& [name, t] : m.params().entries())
      if (t.requires_grad()) t.zero_grad();
    const auto l = loss::l_cyc<float>(loss::boxes_tensor<float>(boxes), ad::Tensor{}, F, G);
    ad::backward(l);
    train::adamw_step(m.params(), opt, train::learning_rate(tc, step), tc);
  }
  ad::NoGradGuard guard;
  std::vector<geom::BBox> held(kHeldOut);
  for (auto& b : held) b = random_box(rng);
  const auto rec = F(G(loss::boxes_tensor<float>(held)));
  double l1 = 0;
  for (int i = 0; i < kHeldOut; ++i) {
    const auto bb = held[i].as_array();
    for (int k = 0; k < 4; ++k) l1 += std::abs(rec.at(4 * i + k) - bb[k]);
  }
  l1 /= 4.0 * kHeldOut;
  const double secs = seconds_since(t0);
  return {l1 < kTarget && secs < kBudgetS,
          fmt("mean L1(b, F(G(b))) %.4f (< %.2f) on %d held-out boxes after %d steps, %.1fs (< %.0fs)", l1, kTarget,
              kHeldOut, kSteps, secs, kBudgetS)};
}

// 5. Overfit 64 grounding samples in stage 1, then train the mask head alone.
Outcome overfit() {
  constexpr int kSamples = 64, kStage1Steps = 2500, kStage3Steps = 600;
  constexpr double kAccTarget = 0.9, kMaskTarget = 0.7, kBudgetS = 900;
  const auto t0 = Clock::now();
  const auto ds = data::generate_dataset(5, kSamples, data::TaskMix{}, data::Split::Train);
  train::TrainConfig tc;
  tc.stage = 1;
  tc.steps = kStage1Steps;
  tc.batch_size = 16;
  tc.lr = 1e-3;
  tc.warmup_steps = 200;
  tc.seed = 5;
  tc.log_every = 100;
  tc.model = small_model(codec::Scheme::Pemb, 8);
  auto s1 = train::run_stage(tc, ds);
  const auto r1 = eval::evaluate(s1.model, ds);

  const fs::path ckpt = fs::temp_directory_path() / "locemb_acceptance_overfit";
  s1.model.save(ckpt);
  train::TrainConfig t3 = tc;
  t3.stage = 3;
  t3.steps = kStage3Steps;
  t3.lr = 3e-3;
  t3.warmup_steps = 50;
  t3.checkpoint_in = ckpt.string();
  const auto s3 = train::run_stage(t3, ds);
  fs::remove_all(ckpt);
  eval::EvalOptions eo;
  eo.with_masks = true;
  const auto r3 = eval::evaluate(s3.model, ds, eo);
  const bool frozen = !s3.frozen_digest_before.empty() && s3.frozen_digest_before == s3.frozen_digest_after &&
                      s3.frozen_digest_after == train::frozen_digest(s1.model, t3);
  const double secs = seconds_since(t0);
  return {r1.acc_at_05 >= kAccTarget && r3.mask_miou >= kMaskTarget && frozen && secs < kBudgetS,
          fmt("stage 1: Acc@0.5 %.3f (>= %.1f) after %d steps; stage 3: mask soft-IoU %.3f (>= %.1f) after %d "
              "steps, frozen SHA-256 %s; %.0fs (< %.0fs)",
              r1.acc_at_05, kAccTarget, kStage1Steps, r3.mask_miou, kMaskTarget, kStage3Steps,
              frozen ? "identical" : "CHANGED", secs, kBudgetS)};
}

constexpr int kTrendSteps = 24000;
constexpr int kTrendVqaSteps = 4000;

// 6. Matched-budget scheme comparison on held-out grounding and region VQA.
Outcome trend() {
  constexpr int kTrain = 16000, kHeldOut = 2000, kVqaTrain = 8000, kVqaHeldOut = 1000;
  constexpr double kBudgetS = 7200;
  const auto t0 = Clock::now();
  eval::CompareData data;
  data.grounding_train = data::generate_dataset(60, kTrain, {1, 0, 0}, data::Split::Train);
  data.grounding_eval = data::generate_dataset(60, kHeldOut, {1, 0, 0}, data::Split::Test);
  data.vqa_train = data::generate_dataset(61, kVqaTrain, {0, 0, 1}, data::Split::Train);
  data.vqa_eval = data::generate_dataset(61, kVqaHeldOut, {0, 0, 1}, data::Split::Test);

  eval::CompareConfig cfg;
  cfg.train.steps = kTrendSteps;
  cfg.train.batch_size = 16;
  cfg.train.lr = 1e-3;
  cfg.train.warmup_steps = 200;
  cfg.train.seed = 6;
  cfg.train.log_every = 500;
  cfg.train.model = small_model(codec::Scheme::Pemb, 4);
  cfg.vqa_steps = kTrendVqaSteps;

  using codec::Scheme;
  const std::vector<Scheme> grounding_only{Scheme::P4bin};
  const std::vector<Scheme> with_vqa{Scheme::Pemb, Scheme::P2bin};
  const auto rows = eval::compare_schemes(cfg, data, with_vqa);
  eval::CompareData gdata{data.grounding_train, data.grounding_eval, std::nullopt, std::nullopt};
  const auto p4 = eval::compare_schemes(cfg, gdata, grounding_only);
  const auto& pe = rows[0];
  const auto& p2 = rows[1];
  const double acc_e = pe.grounding.acc_at_05, acc_4 = p4[0].grounding.acc_at_05, acc_2 = p2.grounding.acc_at_05;
  const double vqa_e = pe.vqa->vqa_accuracy, vqa_2 = p2.vqa->vqa_accuracy;
  const double secs = seconds_since(t0);
  return {acc_e >= acc_4 && acc_e >= acc_2 && vqa_e >= vqa_2 && secs < kBudgetS,
          fmt("grounding Acc@0.5 on %d held-out: pemb %.3f, p4bin %.3f, p2bin %.3f (parse failures %.3f / %.3f); "
              "region VQA on %d held-out: pemb %.3f, p2bin %.3f; %d steps each; %.0fs (< %.0fs)",
              kHeldOut, acc_e, acc_4, acc_2, p4[0].grounding.parse_failure_rate, p2.grounding.parse_failure_rate,
              kVqaHeldOut, vqa_e, vqa_2, kTrendSteps, secs, kBudgetS)};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// Concatenated bytes of every regular file under dir, keyed by relative path.
std::string tree_bytes(const fs::path& dir) {
  std::set<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) files.insert(fs::relative(e.path(), dir));
  std::string out;
  for (const auto& f : files) out += f.generic_string() + '\0' + slurp(dir / f) + '\0';
  return out;
}

int run(const std::string& cmd) {
  return std::system((cmd + " > /dev/null 2>&1").c_str());
}

// 7. gen-data, train and eval each reproduce their outputs bit for bit.
Outcome determinism(const std::string& cli, const fs::path& work) {
  const fs::path root = work / "determinism";
  fs::remove_all(root);
  fs::create_directories(root);
  const auto q = [](const fs::path& p) { return "'" + p.string() + "'"; };
  bool ok = true;
  std::string detail;
  std::string outputs[3][2];
  // Each run works in its own directory with identical relative paths, so the
  // configs recorded in the checkpoints match byte for byte.
  const std::string exe = q(fs::absolute(cli));
  for (int r = 0; r < 2; ++r) {
    const fs::path dir = root / ("run" + std::to_string(r));
    fs::create_directories(dir);
    const std::string in_dir = "cd " + q(dir) + " && ";
    bool ran = run(in_dir + exe + " gen-data --seed 7 --n 48 --mix 0.5,0.25,0.25 --out data") == 0;
    const nlohmann::json tc = {{"steps", 30},
                               {"batch_size", 8},
                               {"warmup_steps", 5},
                               {"seed", 7},
                               {"log_every", 10},
                               {"checkpoint_every", 15},
                               {"train_data", "data"},
                               {"out_dir", "ckpt"},
                               {"model", {{"d_model", 32}, {"n_layers", 1}, {"n_heads", 2}, {"patch_grid", 4},
                                          {"max_seq_len", 96}}}};
    std::ofstream(dir / "train.json") << tc.dump();
    ran = ran && run(in_dir + "NEXTCHAT_THREADS=1 " + exe + " train --config train.json") == 0;
    ran = ran && run(in_dir + exe + " eval --checkpoint ckpt --split data --report report.csv") == 0;
    ran = ran && run(in_dir + exe + " eval --checkpoint ckpt --split data --report report.json") == 0;
    if (!ran) return {false, fmt("a CLI invocation failed in run %d", r)};
    outputs[0][r] = tree_bytes(dir / "data");
    outputs[1][r] = tree_bytes(dir / "ckpt");
    outputs[2][r] = slurp(dir / "report.csv") + slurp(dir / "report.json");
  }
  const char* names[3] = {"gen-data", "train", "eval"};
  for (int k = 0; k < 3; ++k) {
    const bool same = !outputs[k][0].empty() && outputs[k][0] == outputs[k][1];
    ok = ok && same;
    detail += fmt("%s %s (%zu bytes)%s", names[k], same ? "identical" : "DIFFERENT", outputs[k][0].size(),
                  k < 2 ? ", " : "");
  }
  fs::remove_all(root);
  return {ok, detail};
}

// 8. Each loss vanishes on an exact match.
Outcome loss_zero_cases() {
  Rng rng(8);
  std::vector<geom::BBox> boxes(64);
  for (auto& b : boxes) {
    do b = random_box(rng);
    while (b.width() < 1e-3 || b.height() < 1e-3);
  }
  const auto bt = loss::boxes_tensor<double>(boxes);
  const double det = loss::l_det<double>(bt, boxes).item();

  std::vector<geom::MaskGrid> masks;
  std::vector<double> pred;
  for (int i = 0; i < 4; ++i) {
    geom::MaskGrid g(32, 32);
    for (auto& v : g.values) v = rng.uniform() < 0.4 ? 1.0f : 0.0f;
    pred.insert(pred.end(), g.values.begin(), g.values.end());
    masks.push_back(std::move(g));
  }
  const auto pt = ad::Tensor64::from({4, 32, 32}, pred);
  const double seg = loss::l_seg<double>(pt, masks).item();

  // An invertible affine pair: G(b) = A b + c embedded in 8 dims, F its left inverse.
  const loss::Mapping<double> G = [](const ad::Tensor64& b) {
    const auto w = ad::Tensor64::from({4, 8}, {2, 0, 0, 0, 1, 0, 0, 0,  //
                                               0, 3, 0, 0, 0, 1, 0, 0,  //
                                               0, 0, 4, 0, 0, 0, 1, 0,  //
                                               0, 0, 0, 5, 0, 0, 0, 1});
    return ad::matmul(b, w);
  };
  const loss::Mapping<double> F = [](const ad::Tensor64& t) {
    std::vector<double> w(8 * 4, 0.0);
    w[0 * 4 + 0] = 0.5;
    w[1 * 4 + 1] = 1.0 / 3;
    w[2 * 4 + 2] = 0.25;
    w[3 * 4 + 3] = 0.2;
    return ad::matmul(t, ad::Tensor64::from({8, 4}, w));
  };
  const auto hidden = G(bt);
  const double cyc = loss::l_cyc<double>(bt, hidden, F, G).item();
  const bool ok = det == 0.0 && seg < 1e-6 && std::abs(cyc) < 1e-12;
  return {ok, fmt("l_det(b,b) = %.3g (== 0), l_seg perfect saturated match = %.3g (< 1e-6), l_cyc exact inverses = "
                  "%.3g (< 1e-12)",
                  det, seg, cyc)};
}

}  // namespace

int main(int argc, char** argv) {
  std::string cli;
  fs::path work = fs::temp_directory_path() / "locemb_acceptance";
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--cli" && i + 1 < argc)
      cli = argv[++i];
    else if (a == "--work" && i + 1 < argc)
      work = argv[++i];
    else
      selected.insert(std::atoi(a.c_str()));
  }
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient suite", gradient_suite},
      {"IoU/GIoU oracle", iou_oracle},
      {"codec roundtrip and accounting", codec_roundtrip},
      {"cycle-loss binding", cycle_binding},
      {"overfit trainability", overfit},
      {"scheme ordering at matched budget", trend},
      {"determinism", [&] { return cli.empty() ? Outcome{false, "no --cli given"} : determinism(cli, work); }},
      {"loss zero-cases", loss_zero_cases},
  };
  int failures = 0;
  for (std::size_t k = 0; k < criteria.size(); ++k) {
    const int n = static_cast<int>(k) + 1;
    if (!selected.empty() && !selected.contains(n)) continue;
    Outcome o;
    try {
      o = criteria[k].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::printf("[%s] %d. %s: %s\n", o.pass ? "PASS" : "FAIL", n, criteria[k].first.c_str(), o.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
