#include "locemb/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"

#include "locemb/error.hpp"
#include "locemb/kernels.hpp"

namespace locemb::data {

using json = nlohmann::ordered_json;

namespace {

constexpr std::array<std::string_view, 3> kKindWords{"circle", "square", "triangle"};
constexpr std::array<std::string_view, 6> kColorWords{"red", "green", "blue", "yellow", "purple", "orange"};
constexpr std::array<std::string_view, 2> kSizeWords{"small", "large"};
constexpr std::array<std::string_view, 3> kTaskNames{"grounding", "region_caption", "region_vqa"};
constexpr std::array<std::string_view, 4> kLetters{"A", "B", "C", "D"};

// Side ranges per size class, in canvas units.
constexpr double kSmallLo = 0.12, kSmallHi = 0.18;
constexpr double kLargeLo = 0.26, kLargeHi = 0.36;
// "the largest X" is only used when the winner is clearly larger.
constexpr double kLargestAreaRatio = 1.25;
constexpr int kSceneAttempts = 64;

template <class E, std::size_t N>
E parse_word(const std::array<std::string_view, N>& words, std::string_view w, const char* what) {
  for (std::size_t i = 0; i < N; ++i)
    if (words[i] == w) return static_cast<E>(i);
  fail(ErrorCode::InvalidArgument, std::string("unknown ") + what + ": " + std::string(w));
}

bool inside_shape(Kind kind, const geom::BBox& b, double x, double y) {
  if (x < b.x0 || x > b.x1 || y < b.y0 || y > b.y1) return false;
  switch (kind) {
    case Kind::Square:
      return true;
    case Kind::Circle: {
      const double rx = 0.5 * b.width(), ry = 0.5 * b.height();
      const double dx = (x - b.cx()) / rx, dy = (y - b.cy()) / ry;
      return dx * dx + dy * dy <= 1.0;
    }
    case Kind::Triangle: {
      // Apex at top centre, base along the bottom edge.
      const double t = (y - b.y0) / b.height();
      return std::abs(x - b.cx()) <= t * 0.5 * b.width();
    }
  }
  return false;
}

CoverageGrid render_shape(Kind kind, const geom::BBox& b) {
  CoverageGrid g{kResolution, kResolution,
                 std::vector<std::uint8_t>(static_cast<std::size_t>(kResolution) * kResolution, 0)};
  const double cell = 1.0 / kResolution;
  const int r0 = std::max(0, static_cast<int>(std::floor(b.y0 * kResolution)));
  const int r1 = std::min(kResolution - 1, static_cast<int>(std::floor(b.y1 * kResolution)));
  const int c0 = std::max(0, static_cast<int>(std::floor(b.x0 * kResolution)));
  const int c1 = std::min(kResolution - 1, static_cast<int>(std::floor(b.x1 * kResolution)));
  for (int r = r0; r <= r1; ++r)
    for (int c = c0; c <= c1; ++c) {
      int hits = 0;
      for (int i = 0; i < kSuper; ++i) {
        const double y = (r + (i + 0.5) / kSuper) * cell;
        for (int j = 0; j < kSuper; ++j) {
          const double x = (c + (j + 0.5) / kSuper) * cell;
          hits += inside_shape(kind, b, x, y);
        }
      }
      g.levels[static_cast<std::size_t>(r) * kResolution + c] = static_cast<std::uint8_t>(hits);
    }
  return g;
}

bool boxes_overlap(const geom::BBox& a, const geom::BBox& b) {
  return std::min(a.x1, b.x1) > std::max(a.x0, b.x0) && std::min(a.y1, b.y1) > std::max(a.y0, b.y0);
}

std::vector<std::string> words_of(std::initializer_list<std::string_view> ws) {
  std::vector<std::string> out;
  for (auto w : ws) out.emplace_back(w);
  return out;
}

bool left_of(const ShapeSpec& a, const ShapeSpec& b) { return a.bbox.x1 <= b.bbox.x0; }

}  // namespace

std::string_view kind_word(Kind k) { return kKindWords[static_cast<int>(k)]; }
std::string_view color_word(Color c) { return kColorWords[static_cast<int>(c)]; }
std::string_view size_word(SizeClass s) { return kSizeWords[static_cast<int>(s)]; }
std::string_view task_name(Task t) { return kTaskNames[static_cast<int>(t)]; }
Task parse_task(std::string_view name) { return parse_word<Task>(kTaskNames, name, "task"); }

geom::MaskGrid CoverageGrid::to_mask() const {
  geom::MaskGrid m(height, width);
  for (std::size_t i = 0; i < levels.size(); ++i) m.values[i] = levels[i] / float(kCoverageLevels);
  return m;
}

std::vector<float> Raster::to_floats() const {
  std::vector<float> out(levels.size());
  for (std::size_t i = 0; i < levels.size(); ++i) out[i] = levels[i] / float(kCoverageLevels);
  return out;
}

void TaskMix::validate() const {
  if (!(grounding >= 0 && region_caption >= 0 && region_vqa >= 0))
    fail(ErrorCode::InvalidArgument, "task mix ratios must be non-negative");
  if (std::abs(grounding + region_caption + region_vqa - 1.0) > 1e-6)
    fail(ErrorCode::InvalidArgument, "task mix ratios must sum to 1");
}

TaskMix TaskMix::parse(std::string_view text) {
  std::vector<double> parts;
  std::stringstream ss{std::string(text)};
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      parts.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      fail(ErrorCode::InvalidArgument, "bad task mix: " + std::string(text));
    }
  }
  if (parts.size() != 3) fail(ErrorCode::InvalidArgument, "task mix needs three ratios: " + std::string(text));
  TaskMix m{parts[0], parts[1], parts[2]};
  m.validate();
  return m;
}

std::int64_t split_id_offset(Split s) {
  switch (s) {
    case Split::Train: return 0;
    case Split::Val: return 100'000'000;
    case Split::Test: return 200'000'000;
  }
  return 0;
}

Split parse_split(std::string_view name) {
  if (name == "train") return Split::Train;
  if (name == "val") return Split::Val;
  if (name == "test") return Split::Test;
  fail(ErrorCode::InvalidArgument, "unknown split: " + std::string(name));
}

Scene generate_scene(std::uint64_t seed, std::int64_t id) {
  Rng rng(seed);
  for (int attempt = 0; attempt < kSceneAttempts; ++attempt) {
    const int n = 2 + static_cast<int>(rng.below(5));
    Scene scene{id, {}};
    std::vector<std::pair<Kind, Color>> used;
    bool ok = true;
    for (int k = 0; k < n && ok; ++k) {
      ShapeSpec s;
      do {
        s.kind = static_cast<Kind>(rng.below(3));
        s.color = static_cast<Color>(rng.below(kColors));
      } while (std::find(used.begin(), used.end(), std::make_pair(s.kind, s.color)) != used.end());
      used.emplace_back(s.kind, s.color);
      s.size = static_cast<SizeClass>(rng.below(2));
      const double side = s.size == SizeClass::Small ? rng.uniform(kSmallLo, kSmallHi)
                                                     : rng.uniform(kLargeLo, kLargeHi);
      ok = false;
      for (int p = 0; p < kPlacementAttempts; ++p) {
        const double x0 = rng.uniform(0.0, 1.0 - side), y0 = rng.uniform(0.0, 1.0 - side);
        const geom::BBox b{x0, y0, x0 + side, y0 + side};
        const bool clear = std::none_of(scene.objects.begin(), scene.objects.end(),
                                        [&](const ShapeSpec& o) { return boxes_overlap(o.bbox, b); });
        if (clear) {
          s.bbox = b;
          ok = true;
          break;
        }
      }
      if (ok) {
        s.mask = render_shape(s.kind, s.bbox);
        scene.objects.push_back(std::move(s));
      }
    }
    if (ok) return scene;
  }
  fail(ErrorCode::UnsatisfiableScene, "placement budget exhausted for scene " + std::to_string(id));
}

Raster render_scene(const Scene& scene) {
  Raster r;
  const std::size_t plane = static_cast<std::size_t>(r.height) * r.width;
  r.levels.assign(plane * r.channels, 0);
  for (const auto& o : scene.objects) {
    auto* ch = r.levels.data() + plane * static_cast<int>(o.color);
    for (std::size_t i = 0; i < plane; ++i) ch[i] = std::max(ch[i], o.mask.levels[i]);
  }
  return r;
}

std::vector<Query> unique_queries(const Scene& scene, int target) {
  const auto& objs = scene.objects;
  const auto& t = objs.at(target);
  std::vector<Query> out;

  // Colour-kind pairs are distinct within a scene.
  out.push_back({words_of({"the", color_word(t.color), kind_word(t.kind)}), target});

  for (int a = 0; a < static_cast<int>(objs.size()); ++a) {
    if (a == target || !left_of(t, objs[a])) continue;
    int matches = 0;
    for (int o = 0; o < static_cast<int>(objs.size()); ++o)
      if (o != a && objs[o].kind == t.kind && left_of(objs[o], objs[a])) ++matches;
    if (matches == 1)
      out.push_back({words_of({"the", kind_word(t.kind), "left", "of", "the", color_word(objs[a].color),
                               kind_word(objs[a].kind)}),
                     target});
  }

  int same_kind = 0;
  bool clearly_largest = true;
  for (int o = 0; o < static_cast<int>(objs.size()); ++o) {
    if (objs[o].kind != t.kind) continue;
    ++same_kind;
    if (o != target && t.bbox.area() < kLargestAreaRatio * objs[o].bbox.area()) clearly_largest = false;
  }
  if (same_kind >= 2 && clearly_largest)
    out.push_back({words_of({"the", "largest", kind_word(t.kind)}), target});
  return out;
}

namespace {

Query pick_query(const Scene& scene, int target, Rng& rng) {
  auto qs = unique_queries(scene, target);
  return qs[rng.below(qs.size())];
}

}  // namespace

Sample make_grounding(const Scene& scene, Rng& rng) {
  const int target = static_cast<int>(rng.below(scene.objects.size()));
  const Query q = pick_query(scene, target, rng);
  Sample s;
  s.task = Task::Grounding;
  s.scene_id = scene.id;
  s.prompt_tokens = {"<bos>", "find"};
  s.prompt_tokens.insert(s.prompt_tokens.end(), q.words.begin(), q.words.end());
  s.prompt_tokens.push_back(":");
  s.target_tokens = {"<box:0>", "<eos>"};
  s.boxes = {scene.objects[target].bbox};
  s.mask_refs = {target};
  return s;
}

Sample make_region_caption(const Scene& scene, Rng& rng) {
  const int target = static_cast<int>(rng.below(scene.objects.size()));
  const auto& o = scene.objects[target];
  Sample s;
  s.task = Task::RegionCaption;
  s.scene_id = scene.id;
  s.prompt_tokens = {"<bos>", "describe", "region", "<box:0>", ":"};
  s.target_tokens = words_of({size_word(o.size), color_word(o.color), kind_word(o.kind), "<eos>"});
  s.boxes = {o.bbox};
  s.mask_refs = {target};
  return s;
}

Sample make_region_vqa(const Scene& scene, std::uint64_t seed) {
  if (scene.objects.empty()) fail(ErrorCode::InvalidArgument, "region vqa needs a non-empty scene");
  Rng rng(seed);
  const int target = static_cast<int>(rng.below(scene.objects.size()));
  const geom::BBox gt = scene.objects[target].bbox;
  const Query q = pick_query(scene, target, rng);

  std::vector<geom::BBox> distractors;
  std::vector<int> others;
  for (int o = 0; o < static_cast<int>(scene.objects.size()); ++o)
    if (o != target && geom::box_iou(scene.objects[o].bbox, gt) < 0.5) others.push_back(o);
  rng.shuffle(others.begin(), others.end());
  for (int o : others) {
    if (distractors.size() == 3) break;
    distractors.push_back(scene.objects[o].bbox);
  }
  // Fallback: random boxes that overlap neither the answer nor each other.
  while (distractors.size() < 3) {
    const double side = rng.uniform(0.10, 0.35);
    const double x0 = rng.uniform(0.0, 1.0 - side), y0 = rng.uniform(0.0, 1.0 - side);
    const geom::BBox b{x0, y0, x0 + side, y0 + side};
    if (boxes_overlap(b, gt)) continue;
    if (std::any_of(distractors.begin(), distractors.end(),
                    [&](const geom::BBox& d) { return boxes_overlap(d, b); }))
      continue;
    distractors.push_back(b);
  }

  Sample s;
  s.task = Task::RegionVqa;
  s.scene_id = scene.id;
  s.answer_idx = static_cast<int>(rng.below(4));
  for (int i = 0, d = 0; i < 4; ++i) s.candidates.push_back(i == s.answer_idx ? gt : distractors[d++]);
  s.prompt_tokens = {"<bos>", "which", "region", "is"};
  s.prompt_tokens.insert(s.prompt_tokens.end(), q.words.begin(), q.words.end());
  s.prompt_tokens.push_back("?");
  for (int i = 0; i < 4; ++i) {
    s.prompt_tokens.emplace_back(kLetters[i]);
    s.prompt_tokens.push_back("<cand:" + std::to_string(i) + ">");
  }
  s.prompt_tokens.push_back(":");
  s.target_tokens = {std::string(kLetters[s.answer_idx]), "<eos>"};
  s.boxes = {gt};
  s.mask_refs = {target};
  return s;
}

Dataset generate_dataset(std::uint64_t seed, int n, const TaskMix& mix, Split split) {
  if (n <= 0) fail(ErrorCode::InvalidArgument, "dataset size must be positive");
  mix.validate();
  Dataset ds;
  ds.scenes.resize(n);
  ds.rasters.resize(n);
  ds.samples.resize(n);
  const std::int64_t offset = split_id_offset(split);
  std::exception_ptr err;

#pragma omp parallel for schedule(dynamic, 8) num_threads(kernels::thread_count())
  for (int i = 0; i < n; ++i) {
    try {
      const std::int64_t id = offset + i;
      const std::uint64_t sample_seed = mix_seed(seed, static_cast<std::uint64_t>(id));
      Scene scene = generate_scene(sample_seed, id);
      Rng rng(mix_seed(sample_seed, 1));
      const double u = rng.uniform();
      Sample s;
      if (u < mix.grounding || (mix.region_caption == 0 && mix.region_vqa == 0))
        s = make_grounding(scene, rng);
      else if (u < mix.grounding + mix.region_caption || mix.region_vqa == 0)
        s = make_region_caption(scene, rng);
      else
        s = make_region_vqa(scene, mix_seed(sample_seed, 2));
      s.id = id;
      ds.rasters[i] = render_scene(scene);
      ds.scenes[i] = std::move(scene);
      ds.samples[i] = std::move(s);
    } catch (...) {
#pragma omp critical
      if (!err) err = std::current_exception();
    }
  }
  if (err) std::rethrow_exception(err);
  return ds;
}

namespace {

json box_json(const geom::BBox& b) { return json::array({b.x0, b.y0, b.x1, b.y1}); }

geom::BBox box_from_json(const json& j) {
  if (!j.is_array() || j.size() != 4) fail(ErrorCode::Io, "malformed box in dataset");
  return geom::make_box(j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>());
}

std::filesystem::path raster_path(const std::filesystem::path& dir, std::int64_t id) {
  return dir / "rasters" / (std::to_string(id) + ".bin");
}

}  // namespace

std::string sample_to_json(const Sample& s) {
  json j;
  j["id"] = s.id;
  j["task"] = task_name(s.task);
  j["scene"] = s.scene_id;
  j["prompt_tokens"] = s.prompt_tokens;
  j["target_tokens"] = s.target_tokens;
  j["boxes"] = json::array();
  for (const auto& b : s.boxes) j["boxes"].push_back(box_json(b));
  j["mask_refs"] = s.mask_refs;
  if (s.task == Task::RegionVqa) {
    j["candidates"] = json::array();
    for (const auto& b : s.candidates) j["candidates"].push_back(box_json(b));
    j["answer_idx"] = s.answer_idx;
  }
  return j.dump();
}

void write_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir / "rasters", ec);
  if (ec) fail(ErrorCode::Io, "cannot create " + dir.string() + ": " + ec.message());

  std::ofstream samples(dir / "samples.jsonl", std::ios::binary);
  std::ofstream scenes(dir / "scenes.jsonl", std::ios::binary);
  if (!samples || !scenes) fail(ErrorCode::Io, "cannot write dataset in " + dir.string());
  for (const auto& s : ds.samples) samples << sample_to_json(s) << '\n';

  for (std::size_t i = 0; i < ds.scenes.size(); ++i) {
    const Scene& sc = ds.scenes[i];
    json j;
    j["id"] = sc.id;
    j["objects"] = json::array();
    for (const auto& o : sc.objects)
      j["objects"].push_back({{"kind", kind_word(o.kind)},
                              {"color", color_word(o.color)},
                              {"size", size_word(o.size)},
                              {"bbox", box_json(o.bbox)}});
    scenes << j.dump() << '\n';

    std::ofstream bin(raster_path(dir, sc.id), std::ios::binary);
    if (!bin) fail(ErrorCode::Io, "cannot write raster for scene " + std::to_string(sc.id));
    const auto& lv = ds.rasters[i].levels;
    bin.write(reinterpret_cast<const char*>(lv.data()), static_cast<std::streamsize>(lv.size()));
    for (const auto& o : sc.objects)
      bin.write(reinterpret_cast<const char*>(o.mask.levels.data()),
                static_cast<std::streamsize>(o.mask.levels.size()));
  }
  if (!samples || !scenes) fail(ErrorCode::Io, "write failed in " + dir.string());
}

Dataset read_dataset(const std::filesystem::path& dir) {
  std::ifstream samples(dir / "samples.jsonl");
  std::ifstream scenes(dir / "scenes.jsonl");
  if (!samples || !scenes) fail(ErrorCode::Io, "no dataset in " + dir.string());

  Dataset ds;
  std::string line;
  try {
    while (std::getline(scenes, line)) {
      if (line.empty()) continue;
      const json j = json::parse(line);
      Scene sc;
      sc.id = j.at("id").get<std::int64_t>();
      for (const auto& o : j.at("objects")) {
        ShapeSpec s;
        s.kind = parse_word<Kind>(kKindWords, o.at("kind").get<std::string>(), "kind");
        s.color = parse_word<Color>(kColorWords, o.at("color").get<std::string>(), "color");
        s.size = parse_word<SizeClass>(kSizeWords, o.at("size").get<std::string>(), "size");
        s.bbox = box_from_json(o.at("bbox"));
        sc.objects.push_back(std::move(s));
      }
      const std::size_t plane = static_cast<std::size_t>(kResolution) * kResolution;
      std::ifstream bin(raster_path(dir, sc.id), std::ios::binary);
      if (!bin) fail(ErrorCode::Io, "missing raster for scene " + std::to_string(sc.id));
      Raster r;
      r.levels.resize(plane * kColors);
      bin.read(reinterpret_cast<char*>(r.levels.data()), static_cast<std::streamsize>(r.levels.size()));
      for (auto& o : sc.objects) {
        o.mask = {kResolution, kResolution, std::vector<std::uint8_t>(plane)};
        bin.read(reinterpret_cast<char*>(o.mask.levels.data()), static_cast<std::streamsize>(plane));
      }
      if (!bin) fail(ErrorCode::Io, "truncated raster for scene " + std::to_string(sc.id));
      ds.scenes.push_back(std::move(sc));
      ds.rasters.push_back(std::move(r));
    }

    while (std::getline(samples, line)) {
      if (line.empty()) continue;
      const json j = json::parse(line);
      Sample s;
      s.id = j.at("id").get<std::int64_t>();
      s.task = parse_task(j.at("task").get<std::string>());
      s.scene_id = j.at("scene").get<std::int64_t>();
      s.prompt_tokens = j.at("prompt_tokens").get<std::vector<std::string>>();
      s.target_tokens = j.at("target_tokens").get<std::vector<std::string>>();
      for (const auto& b : j.at("boxes")) s.boxes.push_back(box_from_json(b));
      s.mask_refs = j.at("mask_refs").get<std::vector<int>>();
      if (j.contains("candidates"))
        for (const auto& b : j.at("candidates")) s.candidates.push_back(box_from_json(b));
      if (j.contains("answer_idx")) s.answer_idx = j.at("answer_idx").get<int>();
      ds.samples.push_back(std::move(s));
    }
  } catch (const json::exception& e) {
    fail(ErrorCode::Io, std::string("malformed dataset file: ") + e.what());
  }
  if (ds.samples.size() != ds.scenes.size())
    fail(ErrorCode::Io, "sample and scene counts differ in " + dir.string());
  for (std::size_t i = 0; i < ds.samples.size(); ++i)
    if (ds.samples[i].scene_id != ds.scenes[i].id) fail(ErrorCode::Io, "sample/scene order mismatch");
  return ds;
}

}  // namespace locemb::data
