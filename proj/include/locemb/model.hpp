#pragma once

// Toy decoder-only transformer over [visual tokens ; text tokens] with
// <trigger>-gated box and mask decoding and <loc> embedding substitution.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "locemb/codec.hpp"
#include "locemb/geometry.hpp"
#include "locemb/losses.hpp"
#include "locemb/ops.hpp"
#include "locemb/synthdata.hpp"

namespace locemb::model {

using ad::Tensor;

struct ModelConfig {
  int d_model = 128;
  int n_layers = 4;
  int n_heads = 4;
  int ffn_mult = 4;
  int max_seq_len = 128;  // visual + text positions
  int patch_grid = 8;     // patches per side
  int image_channels = data::kColors;
  int image_size = data::kResolution;
  int mask_size = data::kResolution;
  int mask_prompt_dim = 32;  // width of the projected trigger state
  int mask_channels = 16;    // hidden channels of the conv mask decoder
  codec::Scheme scheme = codec::Scheme::Pemb;
  bool loc_supervised = true;  // cross-entropy on <loc> target positions

  int visual_tokens() const { return patch_grid * patch_grid; }
  int patch_size() const { return image_size / patch_grid; }
  int max_text_len() const { return max_seq_len - visual_tokens(); }
  void validate() const;

  std::string to_json() const;
  static ModelConfig from_json(std::string_view text);
};

// Named parameters in creation order.
class ParamStore {
 public:
  Tensor& add(std::string name, Tensor value);
  const Tensor& get(std::string_view name) const;
  bool contains(std::string_view name) const;
  std::vector<std::pair<std::string, Tensor>>& entries() { return entries_; }
  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
  std::size_t total_size() const;

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
};

// One training or prompting sequence, already expanded for a scheme.
struct SequencePlan {
  std::vector<int> tokens;
  int prompt_length = 0;  // tokens[prompt_length..] is the target stream
  // supervised[j] != 0 when tokens[j] is predicted from position j - 1.
  std::vector<std::uint8_t> supervised;
  // <loc> positions and the box whose G-embedding replaces their input.
  std::vector<std::pair<int, geom::BBox>> loc_overrides;
  // <trigger> positions in the target stream with their gt boxes.
  std::vector<std::pair<int, geom::BBox>> triggers;
  std::vector<int> trigger_mask_refs;  // scene object per trigger

  int size() const { return static_cast<int>(tokens.size()); }
};

// Checks the stream grammar against a vocab; throws InvalidArgument. During
// generation the last token may be a <trigger> still waiting for its <loc>.
void validate_plan(const SequencePlan& plan, const codec::Vocab& vocab, bool open_trigger = false);

struct ForwardOut {
  Tensor logits;                  // [n_pred x V]
  std::vector<int> targets;       // next-token ids for the logits rows
  std::vector<std::uint8_t> mask;  // all ones; kept for the loss signature
  Tensor trigger_hidden;           // [n_trig x d], undefined when there are none
  std::vector<geom::BBox> trigger_boxes;
  std::vector<int> trigger_plan;      // plan index per trigger
  std::vector<int> trigger_mask_refs;  // scene object per trigger
  Tensor visual_hidden;                // [n_plans * g^2 x d] final-layer visual states
  Tensor inputs;                       // [rows x d] packed input embeddings
  std::vector<int> text_offset;        // packed row of each plan's first text token
};

struct GenerateResult {
  std::vector<int> tokens;  // generated stream, prompt excluded
  std::vector<geom::BBox> boxes;  // one per emitted <trigger>
  std::vector<std::vector<float>> trigger_states;  // the t decoded for each box
  std::vector<std::vector<float>> loc_embeddings;  // G(F(t)) appended after each <trigger>
  std::vector<geom::MaskGrid> masks;  // when masks were requested
  bool hit_eos = false;
};

class Model {
 public:
  Model(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  const codec::Vocab& vocab() const { return vocab_; }
  const codec::LocCodec& codec() const { return codec_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  // raster [C x H x W] -> [g^2 x d] visual tokens.
  Tensor encode_image(std::span<const float> raster) const;

  // Expands a sample's box slots for this model's scheme. Without the target
  // the plan is a generation prompt.
  SequencePlan plan(const data::Sample& sample, bool with_target = true) const;

  // Packed teacher-forced pass over several plans.
  ForwardOut forward(std::span<const SequencePlan> plans,
                     std::span<const std::span<const float>> rasters) const;

  // F: [n x d] -> [n x 4] ordered boxes in [0,1].
  Tensor box_decoder(const Tensor& t) const;
  // G: [n x 4] -> [n x d]
  Tensor loc_encoder(const Tensor& boxes) const;
  geom::BBox decode_box_from_hidden(std::span<const float> t) const;

  // Mask probabilities [n x S x S] for trigger states t [n x d]. visual is
  // the [g^2 x d] block of final visual states of each mask's image.
  Tensor decode_masks(const Tensor& t, std::span<const Tensor> visual,
                      std::span<const std::span<const float>> rasters,
                      std::span<const geom::BBox> boxes) const;
  geom::MaskGrid decode_mask_from_hidden(std::span<const float> t, const Tensor& visual,
                                         std::span<const float> raster, const geom::BBox& b) const;

  // Greedy decoding; <loc> is never sampled but force-appended after each
  // <trigger> with embedding G(F(t)).
  GenerateResult generate(const SequencePlan& prompt, std::span<const float> raster, int max_new,
                          bool with_masks = false) const;

  // Directory with manifest.json and one little-endian fp32 file per parameter.
  void save(const std::filesystem::path& dir) const;
  static Model load(const std::filesystem::path& dir);
  // Overwrites parameter values from a checkpoint written by save().
  void load_params(const std::filesystem::path& dir);

 private:
  struct Hidden {
    Tensor final;  // [rows x d] after ln_f
    Tensor inputs;
    std::vector<int> text_offset;
  };
  Hidden run(std::span<const SequencePlan> plans, std::span<const std::span<const float>> rasters,
             bool open_trigger = false) const;
  Tensor linear(const Tensor& x, const std::string& prefix) const;
  Tensor lm_head(const Tensor& h) const;
  void init_params(std::uint64_t seed);

  ModelConfig cfg_;
  codec::Vocab vocab_;
  codec::LocCodec codec_;
  ParamStore params_;
};

// Parameter-name prefixes per component.
bool is_mask_param(std::string_view name);
bool is_patch_param(std::string_view name);

}  // namespace locemb::model
