#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "locemb/error.hpp"
#include "locemb/trainer.hpp"

using namespace locemb;
using namespace locemb::train;
namespace fs = std::filesystem;

namespace {

TrainConfig tiny_config(int steps) {
  TrainConfig c;
  c.steps = steps;
  c.batch_size = 4;
  c.warmup_steps = 2;
  c.log_every = 1;
  c.seed = 3;
  c.model.d_model = 16;
  c.model.n_layers = 1;
  c.model.n_heads = 2;
  c.model.ffn_mult = 2;
  c.model.patch_grid = 4;
  c.model.max_seq_len = 48;
  c.model.mask_prompt_dim = 4;
  c.model.mask_channels = 4;
  return c;
}

const data::Dataset& tiny_data() {
  static const data::Dataset ds = data::generate_dataset(17, 12, {1, 0, 0});
  return ds;
}

bool same_params(const model::Model& a, const model::Model& b, bool (*select)(std::string_view) = nullptr) {
  const auto& ea = a.params().entries();
  const auto& eb = b.params().entries();
  if (ea.size() != eb.size()) return false;
  for (std::size_t i = 0; i < ea.size(); ++i) {
    if (select && !select(ea[i].first)) continue;
    if (std::memcmp(ea[i].second.data().data(), eb[i].second.data().data(), ea[i].second.numel() * 4) != 0)
      return false;
  }
  return true;
}

fs::path scratch(const char* name) {
  const fs::path p = fs::temp_directory_path() / name;
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST_SUITE("trainer") {
  TEST_CASE("glob patterns") {
    CHECK(glob_match("blocks.*", "blocks.0.ln1.g"));
    CHECK(glob_match("*.b", "lm_head.b"));
    CHECK(glob_match("blocks.*.attn.*", "blocks.3.attn.qkv.w"));
    CHECK_FALSE(glob_match("blocks.*.attn.*", "blocks.3.mlp.fc1.w"));
    CHECK(glob_match("tok.emb", "tok.emb"));
    CHECK_FALSE(glob_match("tok.emb", "tok.emb2"));
    CHECK(glob_match("*", ""));
  }

  TEST_CASE("freezing policy per stage") {
    TrainConfig c = tiny_config(0);
    c.stage = 1;
    CHECK(is_frozen(c, "mask.conv1.w"));
    CHECK_FALSE(is_frozen(c, "patch.w"));
    CHECK_FALSE(is_frozen(c, "blocks.0.attn.qkv.w"));
    c.freeze_patch_encoder = true;
    CHECK(is_frozen(c, "patch.w"));
    c.frozen_patterns = {"tok.*"};
    CHECK(is_frozen(c, "tok.emb"));
    c.stage = 3;
    CHECK_FALSE(is_frozen(c, "mask.proj.w"));
    CHECK(is_frozen(c, "box_decoder.fc1.w"));
    CHECK(is_frozen(c, "loc_encoder.fc2.b"));
    CHECK(is_frozen(c, "patch.pos"));
  }

  TEST_CASE("config json roundtrip and validation") {
    TrainConfig c = tiny_config(7);
    c.frozen_patterns = {"a.*"};
    CHECK(TrainConfig::from_json(c.to_json()).to_json() == c.to_json());
    CHECK_THROWS_AS(TrainConfig::from_json(R"({"stage":4})"), Error);
    CHECK_THROWS_AS(TrainConfig::from_json(R"({"batch_size":0})"), Error);
  }

  TEST_CASE("adamw: zero gradients leave only weight decay") {
    model::Model m(tiny_config(0).model, 1);
    const model::Model before(tiny_config(0).model, 1);
    for (auto& [n, t] : m.params().entries()) t.zero_grad();
    OptimizerState st;
    TrainConfig c = tiny_config(0);
    adamw_step(m.params(), st, 0.01, c);
    CHECK(st.step == 1);
    for (std::size_t i = 0; i < m.params().entries().size(); ++i) {
      const auto& a = m.params().entries()[i].second;
      const auto& b = before.params().entries()[i].second;
      for (std::size_t k = 0; k < a.numel(); ++k)
        CHECK(a.at(k) == doctest::Approx(b.at(k) * (1 - 0.01 * 0.01)).epsilon(1e-6));
    }
  }

  TEST_CASE("adamw: clipping scales gradients to the clip norm") {
    TrainConfig c = tiny_config(0);
    c.grad_clip = 1.0;
    c.weight_decay = 0;
    model::Model clipped(c.model, 1), scaled(c.model, 1);
    // Gradients with global norm exactly 10.
    const auto total = clipped.params().total_size();
    const float g = static_cast<float>(10.0 / std::sqrt(double(total)));
    for (auto& [n, t] : clipped.params().entries())
      for (auto& v : t.grad()) v = g;
    for (auto& [n, t] : scaled.params().entries())
      for (auto& v : t.grad()) v = g * 0.1f;
    OptimizerState s1, s2;
    const auto st = adamw_step(clipped.params(), s1, 1e-3, c);
    CHECK(st.grad_norm == doctest::Approx(10.0).epsilon(1e-5));
    CHECK(st.clip_scale == doctest::Approx(0.1).epsilon(1e-5));
    c.grad_clip = 0;
    adamw_step(scaled.params(), s2, 1e-3, c);
    for (std::size_t i = 0; i < s1.m.size(); ++i)
      for (std::size_t k = 0; k < s1.m[i].size(); ++k) CHECK(s1.m[i][k] == doctest::Approx(s2.m[i][k]).epsilon(1e-5));
  }

  TEST_CASE("adamw: non-finite gradients abort without side effects") {
    TrainConfig c = tiny_config(0);
    model::Model m(c.model, 1);
    const model::Model before(c.model, 1);
    for (auto& [n, t] : m.params().entries()) t.zero_grad();
    m.params().entries()[0].second.grad()[0] = std::nanf("");
    OptimizerState st;
    try {
      adamw_step(m.params(), st, 1e-3, c);
      FAIL("expected NonFiniteGradient");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::NonFiniteGradient);
    }
    CHECK(st.step == 0);
    CHECK(same_params(m, before));
  }

  TEST_CASE("learning-rate schedule") {
    TrainConfig c = tiny_config(100);
    c.warmup_steps = 10;
    c.lr = 1e-3;
    CHECK(learning_rate(c, 0) == doctest::Approx(1e-4));
    CHECK(learning_rate(c, 9) == doctest::Approx(1e-3));
    CHECK(learning_rate(c, 10) == doctest::Approx(1e-3));
    CHECK(learning_rate(c, 100) == doctest::Approx(1e-4));
    for (int s = 11; s < 100; ++s) CHECK(learning_rate(c, s) <= learning_rate(c, s - 1) + 1e-15);
  }

  TEST_CASE("steps=0 returns the input checkpoint unchanged") {
    const fs::path in = scratch("locemb_tr_in"), out = scratch("locemb_tr_out");
    TrainConfig c = tiny_config(0);
    model::Model m(c.model, 4);
    m.save(in);
    c.checkpoint_in = in.string();
    c.out_dir = out.string();
    const auto res = run_stage(c, tiny_data());
    CHECK(same_params(res.model, m));
    CHECK(same_params(model::Model::load(out), m));
    fs::remove_all(in);
    fs::remove_all(out);
  }

  TEST_CASE("identical runs are bit-identical; losses stay finite") {
    const TrainConfig c = tiny_config(12);
    const auto a = run_stage(c, tiny_data());
    const auto b = run_stage(c, tiny_data());
    CHECK(same_params(a.model, b.model));
    REQUIRE(a.metrics.size() == 12);
    for (std::size_t i = 0; i < a.metrics.size(); ++i) {
      CHECK(metrics_line(a.metrics[i]) == metrics_line(b.metrics[i]));
      CHECK(std::isfinite(a.metrics[i].total));
      CHECK(a.metrics[i].l_seg == 0);
    }
    CHECK(same_params(a.model, model::Model(c.model, c.seed), model::is_mask_param));
  }

  TEST_CASE("pixel2seq schemes train on the text loss alone") {
    TrainConfig c = tiny_config(3);
    c.model.scheme = codec::Scheme::P4bin;
    c.model.max_seq_len = 64;
    const auto r = run_stage(c, tiny_data());
    for (const auto& row : r.metrics) {
      CHECK(row.l_det == 0);
      CHECK(row.l_cyc == 0);
      CHECK(row.total == doctest::Approx(row.l_text));
    }
  }

  TEST_CASE("resume reproduces the uninterrupted run") {
    const fs::path dir = scratch("locemb_tr_resume");
    TrainConfig c = tiny_config(10);
    c.out_dir = (dir / "full").string();
    c.checkpoint_every = 5;
    const auto full = run_stage(c, tiny_data());
    TrainConfig r = c;
    r.out_dir = (dir / "resumed").string();
    const auto resumed = run_stage(r, tiny_data(), dir / "full" / "step_5");
    CHECK(same_params(full.model, resumed.model));
    REQUIRE(resumed.metrics.size() == 5);
    for (int i = 0; i < 5; ++i) {
      const auto& x = full.metrics[5 + i];
      const auto& y = resumed.metrics[i];
      CHECK(x.step == y.step);
      CHECK(std::abs(x.total - y.total) <= 1e-5 * std::abs(x.total));
    }
    fs::remove_all(dir);
  }

  TEST_CASE("stage 3 trains only the mask head") {
    const fs::path dir = scratch("locemb_tr_stage3");
    TrainConfig c = tiny_config(4);
    c.out_dir = (dir / "s1").string();
    const auto s1 = run_stage(c, tiny_data());
    TrainConfig c3 = tiny_config(6);
    c3.stage = 3;
    c3.checkpoint_in = c.out_dir;
    const auto s3 = run_stage(c3, tiny_data());
    CHECK(s3.frozen_digest_before == s3.frozen_digest_after);
    CHECK(s3.frozen_digest_before.size() == 64);
    CHECK(same_params(s1.model, s3.model, [](std::string_view n) { return !model::is_mask_param(n); }));
    CHECK_FALSE(same_params(s1.model, s3.model, model::is_mask_param));
    for (const auto& row : s3.metrics) {
      CHECK(row.l_seg > 0);
      CHECK(row.l_text == 0);
    }

    TrainConfig none = tiny_config(2);
    none.stage = 3;
    try {
      run_stage(none, tiny_data());
      FAIL("expected MissingCheckpoint");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::MissingCheckpoint);
    }
    fs::remove_all(dir);
  }

  TEST_CASE("metrics csv layout") {
    const fs::path dir = scratch("locemb_tr_csv");
    TrainConfig c = tiny_config(4);
    c.log_every = 2;
    c.out_dir = dir.string();
    run_stage(c, tiny_data());
    std::ifstream in(dir / "metrics.csv");
    std::string header, l1, l2, extra;
    std::getline(in, header);
    std::getline(in, l1);
    std::getline(in, l2);
    CHECK(header == "step,l_text,l_det,l_cyc,l_seg,total,grad_norm,lr");
    CHECK(l1.rfind("2,", 0) == 0);
    CHECK(l2.rfind("4,", 0) == 0);
    CHECK_FALSE(std::getline(in, extra));
    fs::remove_all(dir);
  }
}
