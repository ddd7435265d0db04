#include "locemb/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "locemb/error.hpp"

namespace locemb::geom {

BBox make_box(double x0, double y0, double x1, double y1) {
  BBox b{x0, y0, x1, y1};
  if (!b.valid())
    fail(ErrorCode::InvalidArgument, "invalid box [" + std::to_string(x0) + "," +
                                         std::to_string(y0) + "," + std::to_string(x1) + "," +
                                         std::to_string(y1) + "]");
  return b;
}

BBox normalized_box(double x0, double y0, double x1, double y1) {
  auto c = [](double v) { return std::clamp(std::isfinite(v) ? v : 0.0, 0.0, 1.0); };
  if (x0 > x1) std::swap(x0, x1);
  if (y0 > y1) std::swap(y0, y1);
  return BBox{c(x0), c(y0), c(x1), c(y1)};
}

MaskGrid::MaskGrid(int h, int w, float fill)
    : height(h), width(w), values(static_cast<std::size_t>(h) * w, fill) {
  if (h < 1 || w < 1) fail(ErrorCode::InvalidArgument, "mask dimensions must be positive");
}

double MaskGrid::soft_area() const {
  double s = 0.0;
  for (float v : values) s += v;
  return values.empty() ? 0.0 : s / static_cast<double>(values.size());
}

namespace {

double intersection(const BBox& a, const BBox& b) {
  const double iw = std::min(a.x1, b.x1) - std::max(a.x0, b.x0);
  const double ih = std::min(a.y1, b.y1) - std::max(a.y0, b.y0);
  return (iw > 0 && ih > 0) ? iw * ih : 0.0;
}

void check_pair(const BBox& a, const BBox& b) {
  if (a.area() <= 0.0 && b.area() <= 0.0)
    fail(ErrorCode::DegenerateBox, "IoU of two zero-area boxes is undefined");
}

}  // namespace

double box_iou(const BBox& a, const BBox& b) {
  check_pair(a, b);
  const double inter = intersection(a, b);
  return inter / (a.area() + b.area() - inter);
}

double box_giou(const BBox& a, const BBox& b) {
  check_pair(a, b);
  const double inter = intersection(a, b);
  const double uni = a.area() + b.area() - inter;
  const double enclosing =
      (std::max(a.x1, b.x1) - std::min(a.x0, b.x0)) * (std::max(a.y1, b.y1) - std::min(a.y0, b.y0));
  // enclosing >= uni up to rounding; clamping keeps giou <= iou exact.
  return inter / uni - std::max(0.0, (enclosing - uni) / enclosing);
}

double oracle_iou(const BBox& a, const BBox& b, int grid) {
  if (grid < 1) fail(ErrorCode::InvalidArgument, "oracle_iou: grid must be positive");
  auto inside = [](const BBox& box, double x, double y) {
    return box.x0 <= x && x <= box.x1 && box.y0 <= y && y <= box.y1;
  };
  long inter = 0, uni = 0;
  for (int r = 0; r < grid; ++r) {
    const double y = (r + 0.5) / grid;
    for (int c = 0; c < grid; ++c) {
      const double x = (c + 0.5) / grid;
      const bool ia = inside(a, x, y), ib = inside(b, x, y);
      inter += (ia && ib);
      uni += (ia || ib);
    }
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

MaskGrid rasterize_box(const BBox& b, int h, int w) {
  MaskGrid m(h, w);
  for (int r = 0; r < h; ++r) {
    const double cy = std::min(b.y1, (r + 1.0) / h) - std::max(b.y0, double(r) / h);
    if (cy <= 0) continue;
    for (int c = 0; c < w; ++c) {
      const double cx = std::min(b.x1, (c + 1.0) / w) - std::max(b.x0, double(c) / w);
      if (cx <= 0) continue;
      m.at(r, c) = static_cast<float>(std::min(1.0, cx * w * cy * h));
    }
  }
  return m;
}

double mask_soft_iou(const MaskGrid& m, const MaskGrid& g) {
  if (m.height != g.height || m.width != g.width)
    fail(ErrorCode::ShapeMismatch, "mask_soft_iou: mask shapes differ");
  double smin = 0.0, smax = 0.0;
  for (std::size_t i = 0; i < m.values.size(); ++i) {
    smin += std::min(m.values[i], g.values[i]);
    smax += std::max(m.values[i], g.values[i]);
  }
  return smin / (smax + 1e-6);
}

}  // namespace locemb::geom
