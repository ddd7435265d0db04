#include "locemb/codec.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

#include "json.hpp"
#include "locemb/error.hpp"

namespace locemb::codec {

namespace {

const char* kBinPrefix = "<bin_";
const char* kPointPrefix = "<pt_";

}  // namespace

std::string_view scheme_name(Scheme s) {
  switch (s) {
    case Scheme::P4bin: return "p4bin";
    case Scheme::P2bin: return "p2bin";
    case Scheme::Pnum: return "pnum";
    case Scheme::Pemb: return "pemb";
  }
  return "?";
}

Scheme parse_scheme(std::string_view name) {
  std::string lower(name);
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (lower == "p4bin") return Scheme::P4bin;
  if (lower == "p2bin") return Scheme::P2bin;
  if (lower == "pnum") return Scheme::Pnum;
  if (lower == "pemb") return Scheme::Pemb;
  fail(ErrorCode::InvalidArgument, "unknown location scheme '" + std::string(name) + "'");
}

const std::vector<std::string>& base_tokens() {
  static const std::vector<std::string> tokens = {
      "<pad>", "<bos>", "<eos>", "<img>", "<trigger>", "<loc>",
      // template words
      "the", "find", "describe", "region", "which", "is", "left", "of", "largest",
      "red", "green", "blue", "yellow", "purple", "orange",
      "circle", "square", "triangle", "small", "large",
      // punctuation and digits
      "[", "]", ",", ".", "?", ":",
      "0", "1", "2", "3", "4", "5", "6", "7", "8", "9",
      // candidate labels
      "A", "B", "C", "D"};
  return tokens;
}

Vocab::Vocab(Scheme scheme, std::vector<std::string> tokens)
    : scheme_(scheme), tokens_(std::move(tokens)), base_size_(static_cast<int>(base_tokens().size())) {
  for (int i = 0; i < static_cast<int>(tokens_.size()); ++i) {
    if (!ids_.emplace(tokens_[i], i).second)
      fail(ErrorCode::InvalidArgument, "duplicate vocabulary token '" + tokens_[i] + "'");
  }
  pad_ = id("<pad>");
  bos_ = id("<bos>");
  eos_ = id("<eos>");
  trigger_ = id("<trigger>");
  loc_ = id("<loc>");
}

Vocab Vocab::for_scheme(Scheme scheme) {
  std::vector<std::string> tokens = base_tokens();
  if (scheme == Scheme::P4bin)
    for (int i = 0; i < kP4binBins; ++i) tokens.push_back(kBinPrefix + std::to_string(i) + ">");
  if (scheme == Scheme::P2bin)
    for (int i = 0; i < kP2binGrid * kP2binGrid; ++i)
      tokens.push_back(kPointPrefix + std::to_string(i) + ">");
  return Vocab(scheme, std::move(tokens));
}

Vocab Vocab::from_tokens(std::vector<std::string> tokens, std::optional<Scheme> hint) {
  const auto& base = base_tokens();
  if (tokens.size() < base.size() || !std::equal(base.begin(), base.end(), tokens.begin()))
    fail(ErrorCode::InvalidArgument, "vocabulary does not start with the base tokens");
  const std::size_t extra = tokens.size() - base.size();
  Scheme scheme;
  if (extra == 0) {
    scheme = hint == Scheme::Pnum ? Scheme::Pnum : Scheme::Pemb;
  } else if (extra == kP4binBins && tokens[base.size()] == std::string(kBinPrefix) + "0>") {
    scheme = Scheme::P4bin;
  } else if (extra == kP2binGrid * kP2binGrid &&
             tokens[base.size()] == std::string(kPointPrefix) + "0>") {
    scheme = Scheme::P2bin;
  } else {
    fail(ErrorCode::InvalidArgument, "unrecognised location tokens in vocabulary");
  }
  Vocab v(scheme, std::move(tokens));
  if (v.tokens_ != for_scheme(scheme).tokens_)
    fail(ErrorCode::InvalidArgument, "vocabulary location tokens are out of order");
  return v;
}

int Vocab::location_token_count() const {
  switch (scheme_) {
    case Scheme::P4bin: return kP4binBins;
    case Scheme::P2bin: return kP2binGrid * kP2binGrid;
    case Scheme::Pnum: return 0;
    case Scheme::Pemb: return 2;
  }
  return 0;
}

std::optional<int> Vocab::find(std::string_view token) const {
  auto it = ids_.find(std::string(token));
  if (it == ids_.end()) return std::nullopt;
  return it->second;
}

int Vocab::id(std::string_view token) const {
  if (auto i = find(token)) return *i;
  fail(ErrorCode::InvalidArgument, "token '" + std::string(token) + "' not in vocabulary");
}

const std::string& Vocab::token(int i) const {
  if (i < 0 || i >= size()) fail(ErrorCode::InvalidArgument, "token id out of range");
  return tokens_[static_cast<std::size_t>(i)];
}

std::string Vocab::to_json() const { return nlohmann::json(tokens_).dump(); }

Vocab Vocab::from_json(std::string_view text, std::optional<Scheme> hint) {
  try {
    return from_tokens(nlohmann::json::parse(text).get<std::vector<std::string>>(), hint);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::InvalidArgument, std::string("vocabulary JSON: ") + e.what());
  }
}

int tokens_per_box(Scheme scheme) {
  switch (scheme) {
    case Scheme::P4bin: return 6;
    case Scheme::P2bin: return 4;
    case Scheme::Pnum: return 25;  // "[d.ddd,d.ddd,d.ddd,d.ddd]"
    case Scheme::Pemb: return 2;
  }
  return 0;
}

LocCodec::LocCodec(const Vocab& vocab) : scheme_(vocab.scheme()) {
  open_ = vocab.id("[");
  close_ = vocab.id("]");
  comma_ = vocab.id(",");
  dot_ = vocab.id(".");
  digit0_ = vocab.id("0");
  if (vocab.scheme() == Scheme::P4bin || vocab.scheme() == Scheme::P2bin)
    first_location_id_ = vocab.base_size();
}

int LocCodec::bin_of(double v, int bins) {
  return std::clamp(static_cast<int>(std::floor(v * bins)), 0, bins - 1);
}

std::vector<int> LocCodec::encode_box(const geom::BBox& b) const {
  switch (scheme()) {
    case Scheme::P4bin: {
      std::vector<int> out{open_};
      for (double v : b.as_array()) out.push_back(first_location_id_ + bin_of(v, kP4binBins));
      out.push_back(close_);
      return out;
    }
    case Scheme::P2bin: {
      auto point = [&](double x, double y) {
        return first_location_id_ + bin_of(y, kP2binGrid) * kP2binGrid + bin_of(x, kP2binGrid);
      };
      return {open_, point(b.x0, b.y0), point(b.x1, b.y1), close_};
    }
    case Scheme::Pnum: {
      std::vector<int> out{open_};
      const auto coords = b.as_array();
      for (int i = 0; i < 4; ++i) {
        if (i) out.push_back(comma_);
        const long milli = std::lround(std::clamp(coords[i], 0.0, 1.0) * 1000.0);
        out.push_back(digit0_ + static_cast<int>(milli / 1000));
        out.push_back(dot_);
        out.push_back(digit0_ + static_cast<int>(milli / 100 % 10));
        out.push_back(digit0_ + static_cast<int>(milli / 10 % 10));
        out.push_back(digit0_ + static_cast<int>(milli % 10));
      }
      out.push_back(close_);
      return out;
    }
    case Scheme::Pemb:
      fail(ErrorCode::UnsupportedScheme, "pemb boxes are embeddings, not tokens");
  }
  return {};
}

geom::BBox LocCodec::decode_box(std::span<const int> tokens) const {
  auto parse_fail = [&](const std::string& why) -> geom::BBox {
    fail(ErrorCode::LocParseError, std::string(scheme_name(scheme())) + ": " + why);
  };
  const int expected = tokens_per_box();
  if (scheme() == Scheme::Pemb) fail(ErrorCode::UnsupportedScheme, "pemb has no token form");
  if (static_cast<int>(tokens.size()) != expected)
    return parse_fail("expected " + std::to_string(expected) + " tokens, got " +
                      std::to_string(tokens.size()));
  if (tokens.front() != open_ || tokens.back() != close_) return parse_fail("missing brackets");

  double c[4] = {0, 0, 0, 0};
  switch (scheme()) {
    case Scheme::P4bin:
      for (int i = 0; i < 4; ++i) {
        const int bin = tokens[1 + i] - first_location_id_;
        if (bin < 0 || bin >= kP4binBins) return parse_fail("non-bin token in coordinate slot");
        c[i] = bin_center(bin, kP4binBins);
      }
      break;
    case Scheme::P2bin:
      for (int i = 0; i < 2; ++i) {
        const int cell = tokens[1 + i] - first_location_id_;
        if (cell < 0 || cell >= kP2binGrid * kP2binGrid)
          return parse_fail("non-point token in corner slot");
        c[2 * i] = bin_center(cell % kP2binGrid, kP2binGrid);
        c[2 * i + 1] = bin_center(cell / kP2binGrid, kP2binGrid);
      }
      break;
    case Scheme::Pnum:
      for (int i = 0; i < 4; ++i) {
        const auto field = tokens.subspan(1 + 6 * i, 5);
        if (i < 3 && tokens[6 + 6 * i] != comma_) return parse_fail("missing comma");
        int digits[4];
        const int positions[4] = {0, 2, 3, 4};
        for (int k = 0; k < 4; ++k) {
          digits[k] = field[positions[k]] - digit0_;
          if (digits[k] < 0 || digits[k] > 9) return parse_fail("non-digit in number");
        }
        if (field[1] != dot_) return parse_fail("missing decimal point");
        const int milli = digits[0] * 1000 + digits[1] * 100 + digits[2] * 10 + digits[3];
        if (milli > 1000) return parse_fail("coordinate above 1.000");
        c[i] = milli / 1000.0;
      }
      break;
    case Scheme::Pemb:
      break;
  }
  return geom::normalized_box(c[0], c[1], c[2], c[3]);
}

}  // namespace locemb::codec
