#pragma once

// Synthetic referring-expression scenes: a few coloured shapes on a unit
// canvas, rendered to one coverage channel per colour, with templated
// grounding, region-caption and region-VQA samples.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "locemb/geometry.hpp"
#include "locemb/rng.hpp"

namespace locemb::data {

inline constexpr int kResolution = 64;
inline constexpr int kColors = 6;
// Coverage is measured with kSuper x kSuper samples per pixel, so every
// value is an exact multiple of 1 / kCoverageLevels and fits in a byte.
inline constexpr int kSuper = 15;
inline constexpr int kCoverageLevels = kSuper * kSuper;

enum class Kind { Circle, Square, Triangle };
enum class Color { Red, Green, Blue, Yellow, Purple, Orange };
enum class SizeClass { Small, Large };
enum class Task { Grounding, RegionCaption, RegionVqa };

std::string_view kind_word(Kind k);
std::string_view color_word(Color c);
std::string_view size_word(SizeClass s);
std::string_view task_name(Task t);
Task parse_task(std::string_view name);

// Coverage grid quantized to byte levels in [0, kCoverageLevels].
struct CoverageGrid {
  int height = 0, width = 0;
  std::vector<std::uint8_t> levels;

  float value(int r, int c) const {
    return levels[static_cast<std::size_t>(r) * width + c] / float(kCoverageLevels);
  }
  geom::MaskGrid to_mask() const;
};

struct ShapeSpec {
  Kind kind = Kind::Square;
  Color color = Color::Red;
  SizeClass size = SizeClass::Small;
  geom::BBox bbox;
  CoverageGrid mask;  // exact per-pixel coverage of this shape
};

struct Scene {
  std::int64_t id = 0;
  std::vector<ShapeSpec> objects;
};

// Channelized raster: one coverage channel per colour, [kColors x H x W].
struct Raster {
  int channels = kColors, height = kResolution, width = kResolution;
  std::vector<std::uint8_t> levels;

  std::vector<float> to_floats() const;
};

struct Sample {
  std::int64_t id = 0;
  Task task = Task::Grounding;
  std::int64_t scene_id = 0;
  // Words plus box slots: "<box:i>" refers to boxes[i], "<cand:i>" to
  // candidates[i]. Slots are expanded per location scheme downstream.
  std::vector<std::string> prompt_tokens;
  std::vector<std::string> target_tokens;
  std::vector<geom::BBox> boxes;
  std::vector<int> mask_refs;  // scene object index for each entry of boxes
  std::vector<geom::BBox> candidates;
  int answer_idx = -1;
};

struct TaskMix {
  double grounding = 1.0;
  double region_caption = 0.0;
  double region_vqa = 0.0;

  void validate() const;
  // Parses "g,c,v" ratios.
  static TaskMix parse(std::string_view text);
};

struct Dataset {
  std::vector<Scene> scenes;    // scenes[i] belongs to samples[i]
  std::vector<Raster> rasters;  // rasters[i] renders scenes[i]
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }
};

enum class Split { Train, Val, Test };
// Scene ids of different splits never collide.
std::int64_t split_id_offset(Split s);
Split parse_split(std::string_view name);

// Placement retries before a scene is abandoned and re-drawn.
inline constexpr int kPlacementAttempts = 400;

Scene generate_scene(std::uint64_t seed, std::int64_t id);
Raster render_scene(const Scene& scene);

// A query that resolves to one object of the scene.
struct Query {
  std::vector<std::string> words;
  int referent = -1;
};
// All template queries whose referent is unique, for the given target.
std::vector<Query> unique_queries(const Scene& scene, int target);

Sample make_grounding(const Scene& scene, Rng& rng);
Sample make_region_caption(const Scene& scene, Rng& rng);
Sample make_region_vqa(const Scene& scene, std::uint64_t seed);

// n samples, one scene each; sample i uses seed mix_seed(seed, scene id) so
// any subset can be regenerated independently.
Dataset generate_dataset(std::uint64_t seed, int n, const TaskMix& mix, Split split = Split::Train);

// On disk: samples.jsonl, scenes.jsonl and rasters/<scene id>.bin holding
// the colour channels followed by one mask per object, as coverage bytes.
void write_dataset(const Dataset& ds, const std::filesystem::path& dir);
Dataset read_dataset(const std::filesystem::path& dir);
std::string sample_to_json(const Sample& s);

}  // namespace locemb::data
