#pragma once

// Boxes and masks in normalized image coordinates: [0,1]^2, origin top-left,
// corner format [x0, y0, x1, y1].

#include <array>
#include <vector>

namespace locemb::geom {

struct BBox {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  double width() const { return x1 - x0; }
  double height() const { return y1 - y0; }
  double area() const { return width() * height(); }
  double cx() const { return 0.5 * (x0 + x1); }
  double cy() const { return 0.5 * (y0 + y1); }
  bool valid() const {
    return 0.0 <= x0 && x0 <= x1 && x1 <= 1.0 && 0.0 <= y0 && y0 <= y1 && y1 <= 1.0;
  }
  std::array<double, 4> as_array() const { return {x0, y0, x1, y1}; }

  bool operator==(const BBox&) const = default;
};

// Throws InvalidArgument unless the corners describe a valid box.
BBox make_box(double x0, double y0, double x1, double y1);

// Swaps out-of-order corners and clamps into [0,1]; always valid.
BBox normalized_box(double x0, double y0, double x1, double y1);

struct MaskGrid {
  int height = 0;
  int width = 0;
  std::vector<float> values;  // row-major, each in [0,1]

  MaskGrid() = default;
  MaskGrid(int h, int w, float fill = 0.0f);

  float at(int r, int c) const { return values[static_cast<std::size_t>(r) * width + c]; }
  float& at(int r, int c) { return values[static_cast<std::size_t>(r) * width + c]; }
  double soft_area() const;  // mean value
};

double box_iou(const BBox& a, const BBox& b);
double box_giou(const BBox& a, const BBox& b);

// Brute-force IoU by counting grid x grid cell centres inside each box.
double oracle_iou(const BBox& a, const BBox& b, int grid);

// Per-cell fractional coverage of the box.
MaskGrid rasterize_box(const BBox& b, int h, int w);

// sum(min(m, g)) / (sum(max(m, g)) + 1e-6)
double mask_soft_iou(const MaskGrid& m, const MaskGrid& g);

}  // namespace locemb::geom
