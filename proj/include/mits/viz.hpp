#pragma once

#include <torch/torch.h>

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "mits/geometry.hpp"
#include "mits/png_io.hpp"

namespace mits {

/// Frame with masks blended at `alpha` and box outlines in the object colour.
inline Image overlay(const Image& frame, const LabelMap& labels, const std::vector<MaybeBox>& boxes,
                     double alpha = 0.5, const Palette& palette = default_palette()) {
  Image out = frame;
  auto color = [&](int k, int ch) { return float(palette[k % palette.size()][ch]) / 255.f; };
  for (int r = 0; r < out.height; ++r)
    for (int c = 0; c < out.width; ++c) {
      const int k = labels(r, c);
      if (!k) continue;
      for (int ch = 0; ch < 3; ++ch) out.at(r, c, ch) = float((1 - alpha) * out.at(r, c, ch) + alpha * color(k, ch));
    }
  for (std::size_t k = 0; k < boxes.size(); ++k) {
    if (!boxes[k]) continue;
    const Box b = clamp_box(*boxes[k], out.height, out.width);
    const int x1 = int(std::lround(b.x1)), x2 = int(std::lround(b.x2));
    const int y1 = int(std::lround(b.y1)), y2 = int(std::lround(b.y2));
    auto put = [&](int r, int c) {
      for (int ch = 0; ch < 3; ++ch) out.at(r, c, ch) = color(int(k) + 1, ch);
    };
    for (int c = x1; c <= x2; ++c) {
      put(y1, c);
      put(y2, c);
    }
    for (int r = y1; r <= y2; ++r) {
      put(r, x1);
      put(r, x2);
    }
  }
  return out;
}

/// Side probability maps (4, N, H, W) as a 2x2 mosaic of heat maps (max over
/// objects), each cell nearest-upsampled to `cell_h` x `cell_w`. Order:
/// left/top in the first row, right/bottom in the second.
inline Image pinpoint_mosaic(const torch::Tensor& side_probs, int cell_h, int cell_w) {
  auto maps = std::get<0>(side_probs.detach().to(torch::kFloat64).max(1));  // (4, H, W)
  const int h = int(maps.size(1)), w = int(maps.size(2));
  Image out(2 * cell_h, 2 * cell_w);
  for (int s = 0; s < 4; ++s) {
    auto m = maps[s];
    const double peak = std::max(m.max().item<double>(), 1e-12);
    auto acc = m.accessor<double, 2>();
    const int oy = (s / 2) * cell_h, ox = (s % 2) * cell_w;
    for (int r = 0; r < cell_h; ++r)
      for (int c = 0; c < cell_w; ++c) {
        const double v = acc[r * h / cell_h][c * w / cell_w] / peak;
        out.at(oy + r, ox + c, 0) = float(v);
        out.at(oy + r, ox + c, 1) = float(v * v);
        out.at(oy + r, ox + c, 2) = float(0.2 * (1 - v));
      }
  }
  return out;
}

}  // namespace mits
