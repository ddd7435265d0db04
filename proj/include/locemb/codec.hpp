#pragma once

// Location-modeling schemes: how a box becomes part of the token stream.
//
//   P4bin  [ x0 y0 x1 y1 ]  one of 224 bins per coordinate      6 tokens
//   P2bin  [ p0 p1 ]        one of 32x32 grid cells per corner  4 tokens
//   Pnum   [0.111,0.111,0.333,0.333] spelled out per character 25 tokens
//   Pemb   <trigger> <loc>  continuous embedding, regressed     2 tokens

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "locemb/geometry.hpp"

namespace locemb::codec {

enum class Scheme { P4bin, P2bin, Pnum, Pemb };

std::string_view scheme_name(Scheme s);
// Accepts "p4bin", "p2bin", "pnum", "pemb" (case-insensitive).
Scheme parse_scheme(std::string_view name);

inline constexpr int kP4binBins = 224;
inline constexpr int kP2binGrid = 32;

// Shared vocabulary: specials, template words, punctuation, digits and
// candidate labels. <trigger> and <loc> are always present.
const std::vector<std::string>& base_tokens();

class Vocab {
 public:
  static Vocab for_scheme(Scheme scheme);
  // Rebuilds from a token list in id order. The scheme is inferred from the
  // location tokens; pnum and pemb share a token list, so `hint` picks
  // between them (default pemb).
  static Vocab from_tokens(std::vector<std::string> tokens,
                           std::optional<Scheme> hint = std::nullopt);

  int size() const { return static_cast<int>(tokens_.size()); }
  int base_size() const { return base_size_; }
  Scheme scheme() const { return scheme_; }

  // Number of tokens this scheme introduces for location modeling: the bin
  // tokens for P4bin/P2bin, none for Pnum, <trigger> and <loc> for Pemb.
  int location_token_count() const;

  std::optional<int> find(std::string_view token) const;
  int id(std::string_view token) const;  // throws InvalidArgument if absent
  const std::string& token(int id) const;
  const std::vector<std::string>& tokens() const { return tokens_; }

  // JSON array of token strings in id order.
  std::string to_json() const;
  static Vocab from_json(std::string_view text, std::optional<Scheme> hint = std::nullopt);

  int pad() const { return pad_; }
  int bos() const { return bos_; }
  int eos() const { return eos_; }
  int trigger() const { return trigger_; }
  int loc() const { return loc_; }

 private:
  Vocab(Scheme scheme, std::vector<std::string> tokens);

  Scheme scheme_ = Scheme::Pemb;
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
  int base_size_ = 0;
  int pad_ = 0, bos_ = 0, eos_ = 0, trigger_ = 0, loc_ = 0;
};

int tokens_per_box(Scheme scheme);

class LocCodec {
 public:
  explicit LocCodec(const Vocab& vocab);

  Scheme scheme() const { return scheme_; }
  int tokens_per_box() const { return codec::tokens_per_box(scheme()); }

  // Throws UnsupportedScheme for Pemb, whose boxes never become tokens.
  std::vector<int> encode_box(const geom::BBox& b) const;
  // Throws LocParseError when tokens are not exactly one well-formed box.
  geom::BBox decode_box(std::span<const int> tokens) const;

  // Bin index for a normalized coordinate: clamp(floor(v * bins), 0, bins-1).
  static int bin_of(double v, int bins);
  static double bin_center(int bin, int bins) { return (bin + 0.5) / bins; }

 private:
  Scheme scheme_;
  int first_location_id_ = -1;
  int open_ = -1, close_ = -1, comma_ = -1, dot_ = -1, digit0_ = -1;
};

}  // namespace locemb::codec
