#pragma once

#include <torch/torch.h>

#include <random>

#include "mits/config.hpp"
#include "mits/error.hpp"

namespace mits {

inline constexpr double kJaccardEps = 1e-6;

/// Mean per-pixel NLL. logits: (B, K, H, W) over the active channels only;
/// target: (B, H, W) int64 in [0, K).
inline torch::Tensor cross_entropy_mask(const torch::Tensor& logits, const torch::Tensor& target) {
  const auto k = logits.size(1);
  if (target.numel() > 0 && (target.min().item<int64_t>() < 0 || target.max().item<int64_t>() >= k))
    throw Error(Errc::LabelOutOfRange, "target label outside the active channels");
  return torch::nn::functional::cross_entropy(logits, target);
}

/// Mean over (batch, object channel 1..K-1) of 1 - sum(min(p,y)) / sum(max(p,y)),
/// both sums smoothed by eps. probs: (B, K, H, W); target: (B, H, W).
inline torch::Tensor soft_jaccard_loss(const torch::Tensor& probs, const torch::Tensor& target) {
  const auto k = probs.size(1);
  if (k < 2) return torch::zeros({}, probs.options());
  auto onehot = torch::one_hot(target, k).permute({0, 3, 1, 2}).to(probs.dtype());
  auto p = probs.narrow(1, 1, k - 1), y = onehot.narrow(1, 1, k - 1);
  auto inter = torch::minimum(p, y).sum({2, 3}), uni = torch::maximum(p, y).sum({2, 3});
  return (1 - (inter + kJaccardEps) / (uni + kJaccardEps)).mean();
}

/// Row-wise GIoU of (n, 4) boxes laid out (x1, y1, x2, y2).
inline torch::Tensor giou_tensor(const torch::Tensor& a, const torch::Tensor& b) {
  auto area = [](const torch::Tensor& t) {
    return (t.select(-1, 2) - t.select(-1, 0)).clamp_min(0) * (t.select(-1, 3) - t.select(-1, 1)).clamp_min(0);
  };
  auto iw = (torch::minimum(a.select(-1, 2), b.select(-1, 2)) - torch::maximum(a.select(-1, 0), b.select(-1, 0))).clamp_min(0);
  auto ih = (torch::minimum(a.select(-1, 3), b.select(-1, 3)) - torch::maximum(a.select(-1, 1), b.select(-1, 1))).clamp_min(0);
  auto inter = iw * ih;
  auto uni = area(a) + area(b) - inter;
  auto hw = torch::maximum(a.select(-1, 2), b.select(-1, 2)) - torch::minimum(a.select(-1, 0), b.select(-1, 0));
  auto hh = torch::maximum(a.select(-1, 3), b.select(-1, 3)) - torch::minimum(a.select(-1, 1), b.select(-1, 1));
  auto hull = hw * hh;
  const double tiny = 1e-12;
  auto iou = inter / uni.clamp_min(tiny);
  return iou - (hull - uni) / hull.clamp_min(tiny);
}

/// w_l1 * mean|pred - gt| + w_giou * mean(1 - GIoU) on boxes normalised to [0,1].
inline torch::Tensor box_loss(const torch::Tensor& pred, const torch::Tensor& gt, const LossWeights& w) {
  if (pred.numel() == 0) return torch::zeros({}, pred.options());
  return w.l1 * (pred - gt).abs().mean() + w.giou * (1 - giou_tensor(pred, gt)).mean();
}

struct ObjectiveSample {
  InitFormat init_format = InitFormat::Mask;
  double p_box = 0.3;
};

inline ObjectiveSample sample_objective(double p_box, std::mt19937_64& rng) {
  std::bernoulli_distribution coin(p_box);
  return ObjectiveSample{coin(rng) ? InitFormat::Box : InitFormat::Mask, p_box};
}

}  // namespace mits
