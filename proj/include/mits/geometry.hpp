#pragma once

// Box/mask conventions. Pixel (row, col) occupies a unit cell; a discrete box
// is inclusive of both corner pixels, so the solid block over rows 2..5 and
// cols 3..7 has Box{3, 2, 7, 5}. Areas are computed on the continuous
// rectangle (x2 - x1) * (y2 - y1), the same formula used for predictions.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include "mits/error.hpp"

namespace mits {

struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
  double cx() const { return 0.5 * (x1 + x2); }
  double cy() const { return 0.5 * (y1 + y2); }
  bool valid() const {
    return std::isfinite(x1) && std::isfinite(y1) && std::isfinite(x2) && std::isfinite(y2) && x1 <= x2 &&
           y1 <= y2;
  }
  friend bool operator==(const Box&, const Box&) = default;
};

using MaybeBox = std::optional<Box>;

template <typename T>
class Grid {
 public:
  Grid() = default;
  Grid(int rows, int cols, T fill = T{}) : rows_(rows), cols_(cols), data_(std::size_t(rows) * cols, fill) {
    if (rows < 0 || cols < 0) throw Error(Errc::ShapeError, "negative grid extent");
  }

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& operator()(int r, int c) { return data_[std::size_t(r) * cols_ + c]; }
  const T& operator()(int r, int c) const { return data_[std::size_t(r) * cols_ + c]; }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }

  friend bool operator==(const Grid&, const Grid&) = default;

 private:
  int rows_ = 0;
  int cols_ = 0;
  std::vector<T> data_;
};

using BinaryMask = Grid<std::uint8_t>;

/// Per-pixel object identity: 0 is background, 1..num_objects are objects.
struct LabelMap {
  Grid<std::uint8_t> grid;
  int num_objects = 0;

  LabelMap() = default;
  LabelMap(int rows, int cols, int n = 0) : grid(rows, cols, 0), num_objects(n) {}

  int rows() const { return grid.rows(); }
  int cols() const { return grid.cols(); }
  std::uint8_t& operator()(int r, int c) { return grid(r, c); }
  std::uint8_t operator()(int r, int c) const { return grid(r, c); }

  BinaryMask object_mask(int label) const {
    BinaryMask m(rows(), cols());
    auto src = grid.data();
    auto dst = m.data();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] = src[i] == label ? 1 : 0;
    return m;
  }

  /// Throws LabelOutOfRange when a value exceeds num_objects.
  void validate() const {
    for (auto v : grid.data())
      if (v > num_objects) throw Error(Errc::LabelOutOfRange, "label " + std::to_string(v) + " > N");
  }

  friend bool operator==(const LabelMap&, const LabelMap&) = default;
};

struct Pixel {
  int row = 0;
  int col = 0;
  friend bool operator==(const Pixel&, const Pixel&) = default;
};

/// Foreground pixels touching each side of the tight bounding box.
struct PinpointSet {
  std::vector<Pixel> top, bottom, left, right;
};

inline MaybeBox mask_to_box(const BinaryMask& mask) {
  int rmin = mask.rows(), rmax = -1, cmin = mask.cols(), cmax = -1;
  for (int r = 0; r < mask.rows(); ++r)
    for (int c = 0; c < mask.cols(); ++c)
      if (mask(r, c)) {
        rmin = std::min(rmin, r);
        rmax = std::max(rmax, r);
        cmin = std::min(cmin, c);
        cmax = std::max(cmax, c);
      }
  if (rmax < 0) return std::nullopt;
  return Box{double(cmin), double(rmin), double(cmax), double(rmax)};
}

inline PinpointSet extract_pinpoints(const BinaryMask& mask) {
  auto box = mask_to_box(mask);
  if (!box) throw Error(Errc::EmptyMask, "mask has no foreground pixel");
  const int top = int(box->y1), bottom = int(box->y2), left = int(box->x1), right = int(box->x2);
  PinpointSet p;
  for (int r = 0; r < mask.rows(); ++r)
    for (int c = 0; c < mask.cols(); ++c) {
      if (!mask(r, c)) continue;
      if (r == top) p.top.push_back({r, c});
      if (r == bottom) p.bottom.push_back({r, c});
      if (c == left) p.left.push_back({r, c});
      if (c == right) p.right.push_back({r, c});
    }
  return p;
}

inline Box box_from_pinpoints(const PinpointSet& p) {
  if (p.top.empty() || p.bottom.empty() || p.left.empty() || p.right.empty())
    throw Error(Errc::EmptySide, "every box side needs at least one pinpoint");
  return Box{double(p.left.front().col), double(p.top.front().row), double(p.right.front().col),
             double(p.bottom.front().row)};
}

inline double intersection_area(const Box& a, const Box& b) {
  const double w = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double h = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  return (w > 0 && h > 0) ? w * h : 0.0;
}

inline double iou(const Box& a, const Box& b) {
  const double inter = intersection_area(a, b);
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

inline double giou(const Box& a, const Box& b) {
  const double inter = intersection_area(a, b);
  const double uni = a.area() + b.area() - inter;
  const double hull = (std::max(a.x2, b.x2) - std::min(a.x1, b.x1)) * (std::max(a.y2, b.y2) - std::min(a.y1, b.y1));
  const double i = uni > 0 ? inter / uni : 0.0;
  if (hull <= 0) return i;
  return i - (hull - uni) / hull;
}

inline Box clamp_box(const Box& b, int rows, int cols) {
  auto cl = [](double v, double hi) { return std::clamp(v, 0.0, hi); };
  return Box{cl(b.x1, cols - 1.0), cl(b.y1, rows - 1.0), cl(b.x2, cols - 1.0), cl(b.y2, rows - 1.0)};
}

/// Box i becomes label i+1. On overlap the smallest box wins; equal areas go
/// to the higher object index.
inline LabelMap rasterize_boxes(std::span<const Box> boxes, int rows, int cols) {
  LabelMap out(rows, cols, int(boxes.size()));
  std::vector<int> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    const double aa = boxes[a].area(), ab = boxes[b].area();
    if (aa != ab) return aa > ab;
    return a < b;
  });
  for (int i : order) {
    const Box b = clamp_box(boxes[i], rows, cols);
    const int c0 = int(std::ceil(b.x1 - 1e-9)), c1 = int(std::floor(b.x2 + 1e-9));
    const int r0 = int(std::ceil(b.y1 - 1e-9)), r1 = int(std::floor(b.y2 + 1e-9));
    for (int r = r0; r <= r1; ++r)
      for (int c = c0; c <= c1; ++c) out(r, c) = std::uint8_t(i + 1);
  }
  return out;
}

/// Per-object tight boxes of a label map; index k holds object k+1.
inline std::vector<MaybeBox> label_boxes(const LabelMap& labels) {
  std::vector<int> rmin(labels.num_objects, labels.rows()), rmax(labels.num_objects, -1);
  std::vector<int> cmin(labels.num_objects, labels.cols()), cmax(labels.num_objects, -1);
  for (int r = 0; r < labels.rows(); ++r)
    for (int c = 0; c < labels.cols(); ++c) {
      const int v = labels(r, c);
      if (v == 0 || v > labels.num_objects) continue;
      const int k = v - 1;
      rmin[k] = std::min(rmin[k], r);
      rmax[k] = std::max(rmax[k], r);
      cmin[k] = std::min(cmin[k], c);
      cmax[k] = std::max(cmax[k], c);
    }
  std::vector<MaybeBox> out(labels.num_objects);
  for (int k = 0; k < labels.num_objects; ++k)
    if (rmax[k] >= 0) out[k] = Box{double(cmin[k]), double(rmin[k]), double(cmax[k]), double(rmax[k])};
  return out;
}

}  // namespace mits
