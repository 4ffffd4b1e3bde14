#pragma once

// Dual-branch decoding. Side order in score maps is x1 (left), y1 (top),
// x2 (right), y2 (bottom); box tensors are laid out (x1, y1, x2, y2).

#include <torch/torch.h>

#include <vector>

#include "mits/attention.hpp"
#include "mits/config.hpp"
#include "mits/encoder.hpp"
#include "mits/error.hpp"
#include "mits/geometry.hpp"
#include "mits/propagation.hpp"

namespace mits {

namespace F = torch::nn::functional;

inline torch::Tensor to_grid(const torch::Tensor& tokens, int64_t h, int64_t w) {
  return tokens.transpose(1, 2).reshape({tokens.size(0), tokens.size(2), h, w});
}

/// Softmax over `active` channels of dim 1 only; every other channel gets
/// probability exactly 0.
inline torch::Tensor active_softmax(const torch::Tensor& logits, const std::vector<int64_t>& active) {
  auto idx = torch::tensor(active, torch::kInt64);
  auto p = torch::softmax(logits.index_select(1, idx), 1);
  return torch::zeros_like(logits).index_copy(1, idx, p);
}

struct MaskPrediction {
  torch::Tensor logits;       // (B, M+1, H_s, W_s) at stride 4, padded grid
  torch::Tensor full_logits;  // (B, M+1, H_I, W_I), bilinear upsampled and cropped
  torch::Tensor probs;        // (B, M+1, H_I, W_I), zero on inactive channels
  torch::Tensor bank_labels;  // (B, H_I, W_I) argmax bank row
};

class MaskDecoderImpl : public torch::nn::Module {
 public:
  explicit MaskDecoderImpl(const ModelConfig& cfg) {
    const int64_t c = cfg.channels, d = cfg.decoder_channels;
    auto conv = [](int64_t i, int64_t o, int64_t k) {
      return torch::nn::Conv2d(torch::nn::Conv2dOptions(i, o, k).padding(k / 2));
    };
    auto block = [&](int64_t i, int64_t o) {
      return torch::nn::Sequential(conv(i, o, 3), torch::nn::GroupNorm(4, o), torch::nn::ReLU());
    };
    fuse = register_module("fuse", block(2 * c, d));
    lateral8 = register_module("lateral8", conv(cfg.encoder_widths[2], d, 1));
    lateral4 = register_module("lateral4", conv(cfg.encoder_widths[1], d, 1));
    smooth8 = register_module("smooth8", block(d, d));
    smooth4 = register_module("smooth4", block(d, d));
    head = register_module("head", torch::nn::Sequential(conv(d, d, 3), torch::nn::GroupNorm(4, d), torch::nn::ReLU(),
                                                         conv(d, cfg.bank_capacity + 1, 1)));
  }

  /// Stride-4 logits from the propagated embedding and the same frame's skips.
  torch::Tensor forward(const PropagatedEmbedding& d, const VisualEmbedding& v) {
    if (d.d.size(1) != v.features.size(1) || d.height != v.height)
      throw Error(Errc::ShapeMismatch, "propagated embedding and skips come from different grids");
    auto up = [](const torch::Tensor& x, const torch::Tensor& like) {
      return F::interpolate(x, F::InterpolateFuncOptions()
                                   .size(std::vector<int64_t>{like.size(2), like.size(3)})
                                   .mode(torch::kBilinear)
                                   .align_corners(false));
    };
    auto x = fuse->forward(torch::cat({to_grid(d.d, d.height, d.width), v.grid}, 1));
    x = smooth8->forward(up(x, v.skip8) + lateral8->forward(v.skip8));
    x = smooth4->forward(up(x, v.skip4) + lateral4->forward(v.skip4));
    return head->forward(x);
  }

  torch::nn::Sequential fuse{nullptr}, smooth8{nullptr}, smooth4{nullptr}, head{nullptr};
  torch::nn::Conv2d lateral8{nullptr}, lateral4{nullptr};
};
TORCH_MODULE(MaskDecoder);

inline MaskPrediction finish_masks(const torch::Tensor& logits, const VisualEmbedding& v,
                                   const std::vector<int64_t>& active) {
  MaskPrediction out;
  out.logits = logits;
  auto full = F::interpolate(logits, F::InterpolateFuncOptions()
                                         .size(std::vector<int64_t>{v.height * v.stride, v.width * v.stride})
                                         .mode(torch::kBilinear)
                                         .align_corners(false));
  out.full_logits = full.narrow(2, 0, v.image_height).narrow(3, 0, v.image_width);
  out.probs = active_softmax(out.full_logits, active);
  out.bank_labels = out.probs.argmax(1);
  return out;
}

// ---------------------------------------------------------------------------
// Box branch.

struct BoxDistributions {
  torch::Tensor side_probs;  // (B, 4, M, H, W) per-side probability maps (empty for the implicit head)
  torch::Tensor px1, px2;    // (B, M, W)
  torch::Tensor py1, py2;    // (B, M, H)
};

/// Expectation of integer coordinates 0..n-1 under `dist` along its last dim.
inline torch::Tensor soft_argmax(const torch::Tensor& dist) {
  auto coords = torch::arange(dist.size(-1), dist.options());
  return (dist * coords).sum(-1);
}

/// Softmax of each side map over all H*W positions, then left/right maps are
/// summed over rows (x distributions) and top/bottom maps over columns.
inline BoxDistributions aggregate_decoupled(const torch::Tensor& scores) {
  const auto b = scores.size(0), m = scores.size(2), h = scores.size(3), w = scores.size(4);
  BoxDistributions out;
  out.side_probs = torch::softmax(scores.reshape({b, 4, m, h * w}), -1).reshape({b, 4, m, h, w});
  out.px1 = out.side_probs.select(1, 0).sum(2);
  out.py1 = out.side_probs.select(1, 1).sum(3);
  out.px2 = out.side_probs.select(1, 2).sum(2);
  out.py2 = out.side_probs.select(1, 3).sum(3);
  return out;
}

/// Box coordinates (B, M, 4) in feature units, with each coordinate pair
/// put in ascending order.
inline torch::Tensor boxes_from_distributions(const BoxDistributions& d) {
  auto x1 = soft_argmax(d.px1), x2 = soft_argmax(d.px2), y1 = soft_argmax(d.py1), y2 = soft_argmax(d.py2);
  return torch::stack({torch::minimum(x1, x2), torch::minimum(y1, y2), torch::maximum(x1, x2), torch::maximum(y1, y2)},
                      -1);
}

/// Linear map from feature cells 0..W-1 onto pixels 0..W*stride-1.
inline torch::Tensor feature_to_pixels(const torch::Tensor& boxes, int64_t h, int64_t w, int64_t stride) {
  const double sx = w > 1 ? double(w * stride - 1) / double(w - 1) : 0.0;
  const double sy = h > 1 ? double(h * stride - 1) / double(h - 1) : 0.0;
  return boxes * torch::tensor({sx, sy, sx, sy}, boxes.options());
}

inline torch::Tensor pixels_to_feature(const torch::Tensor& boxes, int64_t h, int64_t w, int64_t stride) {
  const double sx = w > 1 ? double(w - 1) / double(w * stride - 1) : 0.0;
  const double sy = h > 1 ? double(h - 1) / double(h * stride - 1) : 0.0;
  return boxes * torch::tensor({sx, sy, sx, sy}, boxes.options());
}

struct BoxPrediction {
  BoxDistributions dist;
  torch::Tensor boxes_feature;  // (B, M, 4)
  torch::Tensor boxes;          // (B, M, 4) pixels
};

/// FPN-style localizer used as the ablation alternative to self-attention:
/// one top-down merge with the stride-8 skip, then back to the stride-16 grid.
class FpnLocalizerImpl : public torch::nn::Module {
 public:
  explicit FpnLocalizerImpl(const ModelConfig& cfg) {
    const int64_t c = cfg.channels;
    lateral = register_module("lateral", torch::nn::Conv2d(torch::nn::Conv2dOptions(cfg.encoder_widths[2], c, 1)));
    for (int i = 0; i < cfg.box_layers; ++i)
      blocks.push_back(register_module(
          "block" + std::to_string(i),
          torch::nn::Sequential(torch::nn::Conv2d(torch::nn::Conv2dOptions(c, c, 3).padding(1)),
                                torch::nn::GroupNorm(8, c), torch::nn::ReLU())));
  }
  torch::Tensor forward(const torch::Tensor& grid, const torch::Tensor& skip8) {
    auto x = F::interpolate(grid, F::InterpolateFuncOptions()
                                      .size(std::vector<int64_t>{skip8.size(2), skip8.size(3)})
                                      .mode(torch::kBilinear)
                                      .align_corners(false)) +
             lateral->forward(skip8);
    for (std::size_t i = 0; i + 1 < blocks.size(); ++i) x = blocks[i]->forward(x);
    x = F::avg_pool2d(x, F::AvgPool2dFuncOptions(2));
    return blocks.back()->forward(x) + grid;
  }

  torch::nn::Conv2d lateral{nullptr};
  std::vector<torch::nn::Sequential> blocks;
};
TORCH_MODULE(FpnLocalizer);

class BoxHeadImpl : public torch::nn::Module {
 public:
  explicit BoxHeadImpl(const ModelConfig& cfg)
      : kind_(cfg.box_head), localizer_(cfg.localizer), m_(cfg.bank_capacity), c_(cfg.channels) {
    if (localizer_ == LocalizerKind::Transformer) {
      for (int i = 0; i < cfg.box_layers; ++i)
        layers.push_back(register_module("layer" + std::to_string(i),
                                         SelfAttentionLayer(cfg.channels, cfg.heads, cfg.ffn_multiplier)));
    } else {
      fpn = register_module("fpn", FpnLocalizer(cfg));
    }
    norm = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({cfg.channels})));
    const int64_t outs = kind_ == BoxHeadKind::Corner ? 2 * m_ : (kind_ == BoxHeadKind::Pinpoint ? 4 * m_ : 2 * m_);
    proj = register_module("proj", torch::nn::Linear(cfg.channels, outs));
    if (kind_ == BoxHeadKind::PinpointImplicit) proj_y = register_module("proj_y", torch::nn::Linear(cfg.channels, 2 * m_));
  }

  /// Localization features after the self-attention (or FPN) stack, (B, HW, C).
  torch::Tensor localize(const PropagatedEmbedding& d, const VisualEmbedding& v) {
    if (localizer_ == LocalizerKind::Fpn)
      return norm->forward(fpn->forward(to_grid(d.d, d.height, d.width), v.skip8).flatten(2).transpose(1, 2));
    auto pos = positional_encoding_2d(d.height, d.width, c_, d.d.options()).unsqueeze(0);
    auto x = d.d;
    for (auto& l : layers) x = l->forward(x, pos);
    return norm->forward(x);
  }

  /// Per-side score maps (B, 4, M, H, W) for the explicit pinpoint head.
  torch::Tensor localize_pinpoints(const PropagatedEmbedding& d, const VisualEmbedding& v) {
    if (kind_ != BoxHeadKind::Pinpoint) throw Error(Errc::ConfigError, "score maps exist only for the pinpoint head");
    auto s = proj->forward(localize(d, v));  // (B, HW, 4M)
    return s.reshape({s.size(0), d.height, d.width, 4, m_}).permute({0, 3, 4, 1, 2});
  }

  BoxPrediction forward(const PropagatedEmbedding& d, const VisualEmbedding& v) {
    BoxPrediction out;
    const auto b = d.d.size(0), h = d.height, w = d.width;
    switch (kind_) {
      case BoxHeadKind::Pinpoint:
        out.dist = aggregate_decoupled(localize_pinpoints(d, v));
        out.boxes_feature = boxes_from_distributions(out.dist);
        break;
      case BoxHeadKind::PinpointImplicit: {
        // Decoupled pooling on features, then projection to 1-D distributions.
        auto g = to_grid(localize(d, v), h, w);                   // (B, C, H, W)
        auto cols = proj->forward(g.mean(2).transpose(1, 2));     // (B, W, 2M)
        auto rows = proj_y->forward(g.mean(3).transpose(1, 2));   // (B, H, 2M)
        auto px = torch::softmax(cols.reshape({b, w, 2, m_}), 1);
        auto py = torch::softmax(rows.reshape({b, h, 2, m_}), 1);
        out.dist.px1 = px.select(2, 0).transpose(1, 2);
        out.dist.px2 = px.select(2, 1).transpose(1, 2);
        out.dist.py1 = py.select(2, 0).transpose(1, 2);
        out.dist.py2 = py.select(2, 1).transpose(1, 2);
        out.boxes_feature = boxes_from_distributions(out.dist);
        break;
      }
      case BoxHeadKind::Corner: {
        auto s = proj->forward(localize(d, v)).reshape({b, h, w, 2, m_}).permute({0, 3, 4, 1, 2});
        auto p = torch::softmax(s.reshape({b, 2, m_, h * w}), -1).reshape({b, 2, m_, h, w});
        auto ys = torch::arange(h, p.options()).view({1, 1, 1, h, 1});
        auto xs = torch::arange(w, p.options()).view({1, 1, 1, 1, w});
        auto ex = (p * xs).sum({3, 4}), ey = (p * ys).sum({3, 4});  // (B, 2, M)
        out.dist.side_probs = p;
        out.dist.px1 = p.select(1, 0).sum(2);
        out.dist.py1 = p.select(1, 0).sum(3);
        out.dist.px2 = p.select(1, 1).sum(2);
        out.dist.py2 = p.select(1, 1).sum(3);
        auto x1 = ex.select(1, 0), y1 = ey.select(1, 0), x2 = ex.select(1, 1), y2 = ey.select(1, 1);
        out.boxes_feature = torch::stack({torch::minimum(x1, x2), torch::minimum(y1, y2), torch::maximum(x1, x2),
                                          torch::maximum(y1, y2)},
                                         -1);
        break;
      }
    }
    out.boxes = feature_to_pixels(out.boxes_feature, h, w, v.stride);
    return out;
  }

  BoxHeadKind kind() const { return kind_; }

  std::vector<SelfAttentionLayer> layers;
  FpnLocalizer fpn{nullptr};
  torch::nn::LayerNorm norm{nullptr};
  torch::nn::Linear proj{nullptr}, proj_y{nullptr};

 private:
  BoxHeadKind kind_;
  LocalizerKind localizer_;
  int64_t m_;
  int64_t c_;
};
TORCH_MODULE(BoxHead);

/// The boxes at the assigned bank rows (object k -> row bank[k]), in pixels.
inline std::vector<Box> select_boxes(const torch::Tensor& boxes_px, const std::vector<int>& bank_rows, int64_t batch = 0) {
  auto cpu = boxes_px.detach().to(torch::kFloat64).contiguous();
  auto acc = cpu.accessor<double, 3>();
  std::vector<Box> out;
  for (int row : bank_rows) {
    const int64_t m = row - 1;
    out.push_back(Box{acc[batch][m][0], acc[batch][m][1], acc[batch][m][2], acc[batch][m][3]});
  }
  return out;
}

/// IoU between the box-branch box and the mask-derived box per object. Two
/// absent predictions agree (1); one-sided absence disagrees (0).
inline std::vector<double> branch_consistency(const std::vector<MaybeBox>& box_branch,
                                              const std::vector<MaybeBox>& mask_boxes) {
  if (box_branch.size() != mask_boxes.size()) throw Error(Errc::LengthMismatch, "object counts differ");
  std::vector<double> out(box_branch.size());
  for (std::size_t k = 0; k < out.size(); ++k) {
    if (!box_branch[k] && !mask_boxes[k]) out[k] = 1.0;
    else if (!box_branch[k] || !mask_boxes[k]) out[k] = 0.0;
    else out[k] = iou(*box_branch[k], *mask_boxes[k]);
  }
  return out;
}

}  // namespace mits
