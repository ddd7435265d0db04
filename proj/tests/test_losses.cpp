#include <cmath>

#include "doctest.h"
#include "locemb/gradcheck.hpp"
#include "locemb/losses.hpp"
#include "test_helpers.hpp"

using namespace locemb;
using namespace locemb::ad;
using namespace locemb::loss;
using geom::BBox;
using geom::MaskGrid;

namespace {

Tensor64 box_row(const BBox& b) { return Tensor64::from({1, 4}, {b.x0, b.y0, b.x1, b.y1}); }

// Two-layer GELU MLP built from primitives, standing in for F and G.
struct TinyMlp {
  Tensor64 w1, b1, w2, b2;
  bool squash;
  Tensor64 operator()(const Tensor64& x) const {
    auto h = gelu(add(matmul(x, w1), b1));
    auto y = add(matmul(h, w2), b2);
    return squash ? order_corners(sigmoid(y)) : y;
  }
};

TinyMlp make_mlp(Rng& rng, int in, int hidden, int out, bool squash) {
  return {testutil::random_tensor<double>(rng, {in, hidden}, -0.7, 0.7, true),
          testutil::random_tensor<double>(rng, {hidden}, -0.1, 0.1, true),
          testutil::random_tensor<double>(rng, {hidden, out}, -0.7, 0.7, true),
          testutil::random_tensor<double>(rng, {out}, -0.1, 0.1, true), squash};
}

}  // namespace

TEST_SUITE("losses") {
  TEST_CASE("l_det examples") {
    const BBox gt{.2, .3, .6, .9};
    std::vector<BBox> g{gt};
    CHECK(l_det(box_row(gt), g).item() == doctest::Approx(0.0).epsilon(1e-12));

    std::vector<BBox> far{{.9, .9, 1, 1}};
    CHECK(l_det(box_row({0, 0, .1, .1}), far).item() == doctest::Approx(1.692).epsilon(1e-12));

    std::vector<BBox> degenerate{{.5, .5, .5, .8}};
    try {
      l_det(box_row({0, 0, .1, .1}), degenerate);
      FAIL("expected DegenerateBox");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::DegenerateBox);
    }
  }

  TEST_CASE("zero-area predictions stay finite") {
    auto p = Tensor64::from({1, 4}, {.4, .4, .4, .4}, true);
    std::vector<BBox> g{{.1, .1, .5, .5}};
    auto l = l_det(p, g);
    CHECK(std::isfinite(l.item()));
    backward(l);
    for (double v : p.grad()) CHECK(std::isfinite(v));
  }

  TEST_CASE("l_det gradient matches finite differences") {
    Rng rng(31);
    for (int i = 0; i < 32; ++i) {
      std::vector<BBox> g{testutil::random_box(rng, 0.05), testutil::random_box(rng, 0.05)};
      const auto p1 = testutil::random_box(rng, 0.05), p2 = testutil::random_box(rng, 0.05);
      auto x = Tensor64::from({2, 4}, {p1.x0, p1.y0, p1.x1, p1.y1, p2.x0, p2.y0, p2.x1, p2.y1});
      ScalarFn<double> f = [&](const Tensor64& t) { return l_det(t, g); };
      CHECK(finite_difference_check(f, x, 1e-6) < 1e-4);
    }
  }

  TEST_CASE("GIoU term is invariant to joint scaling") {
    Rng rng(32);
    for (int i = 0; i < 50; ++i) {
      const auto a = testutil::random_box(rng, 0.05), b = testutil::random_box(rng, 0.05);
      const double s = rng.uniform(0.2, 1.0);
      auto scaled = [s](const BBox& x) { return BBox{x.x0 * s, x.y0 * s, x.x1 * s, x.y1 * s}; };
      std::vector<BBox> gb{b}, gbs{scaled(b)};
      const double l0 = giou_loss(box_row(a), gb).item();
      const double l1 = giou_loss(box_row(scaled(a)), gbs).item();
      CHECK(l0 == doctest::Approx(l1).epsilon(1e-9));
    }
  }

  TEST_CASE("l_seg examples") {
    MaskGrid gt(8, 8, 0.0f);
    for (int r = 2; r < 6; ++r)
      for (int c = 1; c < 7; ++c) gt.at(r, c) = 1.0f;
    std::vector<double> v(gt.values.begin(), gt.values.end());
    std::vector<MaskGrid> g{gt};
    CHECK(l_seg(Tensor64::from({8, 8}, v), g).item() < 1e-6);

    MaskGrid ones(8, 8, 1.0f);
    std::vector<MaskGrid> go{ones};
    LossConfig cfg;
    const auto half = Tensor64::full({8, 8}, 0.5);
    // (1 - IoU) + Dice + beta * focal with IoU = 0.5, Dice = 1/3,
    // focal = 0.25 * 0.25 * ln 2 per cell.
    const double expected = 0.5 + 1.0 / 3.0 + cfg.beta * 0.25 * 0.25 * std::log(2.0);
    CHECK(l_seg(half, go, cfg).item() == doctest::Approx(expected).epsilon(1e-6));

    std::vector<MaskGrid> wrong{MaskGrid(4, 4)};
    CHECK_THROWS_AS(l_seg(half, wrong), Error);
  }

  TEST_CASE("l_seg gradient matches finite differences") {
    Rng rng(33);
    for (int i = 0; i < 32; ++i) {
      MaskGrid g(8, 8);
      for (auto& v : g.values) v = static_cast<float>(rng.uniform() < 0.4 ? 1.0 : rng.uniform(0, 0.3));
      std::vector<MaskGrid> gs{g};
      auto m = testutil::random_tensor<double>(rng, {8, 8}, 0.02, 0.98);
      ScalarFn<double> f = [&](const Tensor64& t) { return l_seg(t, gs); };
      CHECK(finite_difference_check(f, m, 1e-6) < 1e-4);
    }
  }

  TEST_CASE("l_cyc examples and gradients") {
    // Identity mappings are exact inverses.
    Mapping<double> id = [](const Tensor64& x) { return x; };
    auto boxes = Tensor64::from({1, 4}, {.1, .2, .3, .4});
    auto t = Tensor64::from({1, 4}, {.5, .6, .7, .8});
    CHECK(l_cyc(boxes, t, id, id).item() == 0.0);

    Rng rng(34);
    const int d = 6;
    auto F = make_mlp(rng, d, 8, 4, true);
    auto G = make_mlp(rng, 4, 8, d, false);
    Mapping<double> fm = [&](const Tensor64& x) { return F(x); };
    Mapping<double> gm = [&](const Tensor64& x) { return G(x); };
    for (int i = 0; i < 32; ++i) {
      const auto b = testutil::random_box(rng, 0.05);
      auto bt = box_row(b);
      auto h = testutil::random_tensor<double>(rng, {2, d});
      CHECK(l_cyc(bt, h, fm, gm).item() >= 0.0);
      ScalarFn<double> wrt_hidden = [&](const Tensor64& x) { return l_cyc(bt, x, fm, gm); };
      CHECK(finite_difference_check(wrt_hidden, h, 1e-6) < 1e-4);
      ScalarFn<double> wrt_weights = [&](const Tensor64& w) {
        auto saved = G.w2;
        G.w2 = w;
        auto out = l_cyc(bt, h, fm, gm);
        G.w2 = saved;
        return out;
      };
      CHECK(finite_difference_check(wrt_weights, G.w2, 1e-6) < 1e-4);
    }
  }

  TEST_CASE("l_text examples") {
    const int v = 7;
    std::vector<int> targets{3, 1};
    std::vector<std::uint8_t> both{1, 1}, first{1, 0}, none{0, 0};
    CHECK(l_text(ad::Tensor::zeros({2, v}), targets, both).item() ==
          doctest::Approx(std::log(double(v))).epsilon(1e-6));

    std::vector<float> sat(2 * v, -50.0f);
    sat[3] = 50.0f;
    sat[v + 1] = 50.0f;
    CHECK(l_text(ad::Tensor::from({2, v}, sat), targets, both).item() < 1e-6);

    auto logits = ad::Tensor::from({2, v}, std::vector<float>(2 * v, 0.3f), true);
    backward(l_text(logits, targets, first));
    for (int j = 0; j < v; ++j) CHECK(logits.grad()[v + j] == 0.0f);

    try {
      l_text(ad::Tensor::zeros({2, v}), targets, none);
      FAIL("expected EmptyMask");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::EmptyMask);
    }
  }

  TEST_CASE("stage_loss composition") {
    StageParts<double> parts;
    parts.seg = Tensor64::scalar(0.75);
    CHECK(stage_loss(3, parts).item() == 0.75);

    StageParts<double> zero{Tensor64::scalar(0), Tensor64::scalar(0), Tensor64::scalar(0), {}};
    CHECK(stage_loss(1, zero).item() == 0.0);

    StageParts<double> s1{Tensor64::scalar(0.5), Tensor64::scalar(0.25), Tensor64::scalar(0.125), {}};
    CHECK(stage_loss(1, s1).item() == 0.875);
    CHECK(stage_loss(2, s1).item() == 0.875);

    try {
      stage_loss(3, s1);
      FAIL("expected MissingComponent");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::MissingComponent);
    }
    StageParts<double> partial;
    partial.text = Tensor64::scalar(1);
    CHECK_THROWS_AS(stage_loss(1, partial), Error);
  }
}
