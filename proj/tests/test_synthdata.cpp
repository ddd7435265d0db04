#include <array>
#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "doctest.h"
#include "locemb/error.hpp"
#include "locemb/kernels.hpp"
#include "locemb/synthdata.hpp"

using namespace locemb;
using namespace locemb::data;

namespace {

// Independent interpreter over the scene graph: returns every object that
// satisfies the query words.
std::vector<int> interpret(const Scene& sc, const std::vector<std::string>& w) {
  auto kind_is = [](const ShapeSpec& o, const std::string& k) { return kind_word(o.kind) == k; };
  auto color_is = [](const ShapeSpec& o, const std::string& c) { return color_word(o.color) == c; };
  const int n = static_cast<int>(sc.objects.size());
  std::vector<int> hits;
  if (w.size() == 3 && w[0] == "the" && w[1] == "largest") {
    std::vector<int> same;
    for (int i = 0; i < n; ++i)
      if (kind_is(sc.objects[i], w[2])) same.push_back(i);
    double best = -1;
    for (int i : same) best = std::max(best, sc.objects[i].bbox.area());
    for (int i : same)
      if (sc.objects[i].bbox.area() == best) hits.push_back(i);
  } else if (w.size() == 3 && w[0] == "the") {
    for (int i = 0; i < n; ++i)
      if (color_is(sc.objects[i], w[1]) && kind_is(sc.objects[i], w[2])) hits.push_back(i);
  } else if (w.size() == 7 && w[2] == "left" && w[3] == "of") {
    std::vector<int> anchors;
    for (int i = 0; i < n; ++i)
      if (color_is(sc.objects[i], w[5]) && kind_is(sc.objects[i], w[6])) anchors.push_back(i);
    if (anchors.size() != 1) return {};
    const auto& a = sc.objects[anchors[0]].bbox;
    for (int i = 0; i < n; ++i)
      if (i != anchors[0] && kind_is(sc.objects[i], w[1]) && sc.objects[i].bbox.x1 <= a.x0) hits.push_back(i);
  }
  return hits;
}

std::vector<std::string> query_words(const Sample& s) {
  // Grounding prompts are "<bos> find ... :".
  return {s.prompt_tokens.begin() + 2, s.prompt_tokens.end() - 1};
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace

TEST_SUITE("synthdata") {
  TEST_CASE("scenes respect object count, placement and attribute rules") {
    for (std::uint64_t seed = 0; seed < 300; ++seed) {
      const Scene sc = generate_scene(seed, static_cast<std::int64_t>(seed));
      REQUIRE(sc.objects.size() >= 2);
      REQUIRE(sc.objects.size() <= 6);
      for (std::size_t i = 0; i < sc.objects.size(); ++i) {
        const auto& o = sc.objects[i];
        CHECK(o.bbox.valid());
        for (std::size_t j = i + 1; j < sc.objects.size(); ++j) {
          CHECK(geom::box_iou(o.bbox, sc.objects[j].bbox) <= 0.1);
          CHECK_FALSE((o.kind == sc.objects[j].kind && o.color == sc.objects[j].color));
        }
      }
    }
  }

  TEST_CASE("mask support lies inside the bbox raster and re-measures the box within a cell") {
    const double cell = 1.0 / kResolution;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      const Scene sc = generate_scene(seed, 0);
      for (const auto& o : sc.objects) {
        int rmin = kResolution, rmax = -1, cmin = kResolution, cmax = -1;
        for (int r = 0; r < kResolution; ++r)
          for (int c = 0; c < kResolution; ++c) {
            if (o.mask.value(r, c) <= 0) continue;
            rmin = std::min(rmin, r), rmax = std::max(rmax, r);
            cmin = std::min(cmin, c), cmax = std::max(cmax, c);
            // The cell must intersect the bbox.
            CHECK((c + 1) * cell > o.bbox.x0);
            CHECK(c * cell < o.bbox.x1);
            CHECK((r + 1) * cell > o.bbox.y0);
            CHECK(r * cell < o.bbox.y1);
          }
        REQUIRE(rmax >= 0);
        CHECK(std::abs(cmin * cell - o.bbox.x0) <= cell);
        CHECK(std::abs((cmax + 1) * cell - o.bbox.x1) <= cell);
        CHECK(std::abs(rmin * cell - o.bbox.y0) <= cell);
        CHECK(std::abs((rmax + 1) * cell - o.bbox.y1) <= cell);
      }
    }
  }

  TEST_CASE("square masks equal exact box coverage") {
    for (std::uint64_t seed = 0; seed < 60; ++seed) {
      const Scene sc = generate_scene(seed, 0);
      for (const auto& o : sc.objects) {
        if (o.kind != Kind::Square) continue;
        const auto exact = geom::rasterize_box(o.bbox, kResolution, kResolution);
        for (std::size_t i = 0; i < exact.values.size(); ++i)
          CHECK(std::abs(o.mask.levels[i] / double(kCoverageLevels) - exact.values[i]) <= 1.0 / kSuper + 1e-9);
      }
    }
  }

  TEST_CASE("raster channels are the per-colour maximum of object masks") {
    const Scene sc = generate_scene(5, 0);
    const Raster r = render_scene(sc);
    REQUIRE(r.levels.size() == std::size_t(kColors) * kResolution * kResolution);
    const std::size_t plane = kResolution * kResolution;
    for (int ch = 0; ch < kColors; ++ch)
      for (std::size_t i = 0; i < plane; ++i) {
        std::uint8_t want = 0;
        for (const auto& o : sc.objects)
          if (static_cast<int>(o.color) == ch) want = std::max(want, o.mask.levels[i]);
        CHECK(r.levels[ch * plane + i] == want);
      }
  }

  TEST_CASE("grounding queries select exactly the annotated referent") {
    const Dataset ds = generate_dataset(123, 2000, {1, 0, 0});
    std::set<std::size_t> lengths;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      const auto& s = ds.samples[i];
      REQUIRE(s.task == Task::Grounding);
      const auto q = query_words(s);
      lengths.insert(q.size());
      const auto hits = interpret(ds.scenes[i], q);
      REQUIRE(hits.size() == 1);
      CHECK(hits[0] == s.mask_refs.at(0));
      CHECK(ds.scenes[i].objects[hits[0]].bbox == s.boxes.at(0));
      CHECK(std::count(s.prompt_tokens.begin(), s.prompt_tokens.end(), "<box:0>") == 0);
      CHECK(std::count(s.target_tokens.begin(), s.target_tokens.end(), "<box:0>") == 1);
    }
    // All three templates occur.
    CHECK(lengths == std::set<std::size_t>{3, 7});
    bool largest = false;
    for (const auto& s : ds.samples) largest |= s.prompt_tokens[3] == "largest";
    CHECK(largest);
  }

  TEST_CASE("every unique query is unique under the interpreter") {
    for (std::uint64_t seed = 0; seed < 300; ++seed) {
      const Scene sc = generate_scene(seed, 0);
      for (int t = 0; t < static_cast<int>(sc.objects.size()); ++t)
        for (const auto& q : unique_queries(sc, t)) {
          const auto hits = interpret(sc, q.words);
          REQUIRE(hits.size() == 1);
          CHECK(hits[0] == t);
        }
    }
  }

  TEST_CASE("task mix counts and validation") {
    const Dataset ds = generate_dataset(1, 100, {1, 0, 0});
    CHECK(ds.size() == 100);
    CHECK(std::all_of(ds.samples.begin(), ds.samples.end(), [](const Sample& s) { return s.task == Task::Grounding; }));
    const Dataset mixed = generate_dataset(1, 300, TaskMix::parse("0.4,0.3,0.3"));
    std::array<int, 3> counts{};
    for (const auto& s : mixed.samples) counts[static_cast<int>(s.task)]++;
    for (int c : counts) CHECK(c > 50);
    CHECK_THROWS_AS(TaskMix::parse("0.5,0.5,0.5"), Error);
    CHECK_THROWS_AS(TaskMix::parse("1,0"), Error);
    CHECK_THROWS_AS(generate_dataset(1, 0, {}), Error);
  }

  TEST_CASE("region vqa construction") {
    for (std::uint64_t seed = 0; seed < 500; ++seed) {
      const Scene sc = generate_scene(seed, 0);
      const Sample s = make_region_vqa(sc, seed * 7 + 1);
      REQUIRE(s.candidates.size() == 4);
      REQUIRE(s.answer_idx >= 0);
      REQUIRE(s.answer_idx < 4);
      int exact = 0;
      for (int i = 0; i < 4; ++i) {
        const double iou = geom::box_iou(s.candidates[i], s.boxes[0]);
        if (i == s.answer_idx)
          CHECK(iou == 1.0);
        else
          CHECK(iou < 0.5);
        exact += s.candidates[i] == s.boxes[0];
      }
      CHECK(exact == 1);
      const auto letter = std::string(1, char('A' + s.answer_idx));
      CHECK(s.target_tokens == std::vector<std::string>{letter, "<eos>"});
      // Deterministic for a given seed.
      const Sample again = make_region_vqa(sc, seed * 7 + 1);
      CHECK(again.candidates == s.candidates);
      CHECK(again.answer_idx == s.answer_idx);
    }
  }

  TEST_CASE("region vqa on a single-object scene uses non-overlapping random boxes") {
    Scene sc = generate_scene(3, 0);
    sc.objects.resize(1);
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
      const Sample s = make_region_vqa(sc, seed);
      for (int i = 0; i < 4; ++i)
        for (int j = i + 1; j < 4; ++j) CHECK(geom::box_iou(s.candidates[i], s.candidates[j]) == 0.0);
    }
  }

  TEST_CASE("answer positions are uniform over 10k samples") {
    const Dataset ds = generate_dataset(99, 10000, {0, 0, 1});
    std::array<int, 4> hist{};
    for (const auto& s : ds.samples) hist[s.answer_idx]++;
    double chi2 = 0;
    for (int h : hist) {
      CHECK(std::abs(h / 10000.0 - 0.25) <= 0.03);
      chi2 += (h - 2500.0) * (h - 2500.0) / 2500.0;
    }
    // 3 degrees of freedom, p = 0.001.
    CHECK(chi2 < 16.27);
  }

  TEST_CASE("splits are disjoint by scene id") {
    const Dataset tr = generate_dataset(5, 200, {1, 0, 0}, Split::Train);
    const Dataset va = generate_dataset(5, 200, {1, 0, 0}, Split::Val);
    const Dataset te = generate_dataset(5, 200, {1, 0, 0}, Split::Test);
    std::set<std::int64_t> ids;
    for (const auto* d : {&tr, &va, &te})
      for (const auto& s : d->samples) ids.insert(s.scene_id);
    CHECK(ids.size() == 600);
  }

  TEST_CASE("nearby seeds draw unrelated scenes") {
    // Scenes are compared by their first box; a shifted copy would repeat it.
    std::set<std::array<double, 4>> seen;
    int total = 0;
    for (std::uint64_t seed = 1000; seed < 1008; ++seed) {
      const Dataset d = generate_dataset(seed, 300, {1, 0, 0}, Split::Train);
      for (const auto& sc : d.scenes) {
        seen.insert(sc.objects.front().bbox.as_array());
        ++total;
      }
    }
    CHECK(static_cast<int>(seen.size()) == total);
  }

  TEST_CASE("same seed gives byte-identical files, across thread counts") {
    namespace fs = std::filesystem;
    const fs::path base = fs::temp_directory_path() / "locemb_synth_test";
    fs::remove_all(base);
    const TaskMix mix{0.4, 0.3, 0.3};
    write_dataset(generate_dataset(7, 40, mix), base / "a");
    const int before = kernels::thread_count();
    kernels::set_thread_count(4);
    write_dataset(generate_dataset(7, 40, mix), base / "b");
    kernels::set_thread_count(before);
    CHECK(slurp(base / "a" / "samples.jsonl") == slurp(base / "b" / "samples.jsonl"));
    CHECK(slurp(base / "a" / "scenes.jsonl") == slurp(base / "b" / "scenes.jsonl"));
    for (const auto& e : fs::directory_iterator(base / "a" / "rasters"))
      CHECK(slurp(e.path()) == slurp(base / "b" / "rasters" / e.path().filename()));

    write_dataset(generate_dataset(8, 40, mix), base / "c");
    CHECK(slurp(base / "a" / "samples.jsonl") != slurp(base / "c" / "samples.jsonl"));

    const Dataset back = read_dataset(base / "a");
    const Dataset orig = generate_dataset(7, 40, mix);
    REQUIRE(back.size() == orig.size());
    for (std::size_t i = 0; i < orig.size(); ++i) {
      CHECK(sample_to_json(back.samples[i]) == sample_to_json(orig.samples[i]));
      CHECK(back.rasters[i].levels == orig.rasters[i].levels);
      REQUIRE(back.scenes[i].objects.size() == orig.scenes[i].objects.size());
      for (std::size_t k = 0; k < orig.scenes[i].objects.size(); ++k) {
        CHECK(back.scenes[i].objects[k].bbox == orig.scenes[i].objects[k].bbox);
        CHECK(back.scenes[i].objects[k].mask.levels == orig.scenes[i].objects[k].mask.levels);
      }
    }
    fs::remove_all(base);
  }

  TEST_CASE("jsonl fields") {
    const Dataset ds = generate_dataset(2, 30, {0, 0, 1});
    const std::string line = sample_to_json(ds.samples[0]);
    for (const char* key : {"\"id\"", "\"task\"", "\"prompt_tokens\"", "\"target_tokens\"", "\"boxes\"",
                            "\"mask_refs\"", "\"candidates\"", "\"answer_idx\""})
      CHECK(line.find(key) != std::string::npos);
    CHECK_THROWS_AS(read_dataset("/nonexistent/locemb"), Error);
  }
}
