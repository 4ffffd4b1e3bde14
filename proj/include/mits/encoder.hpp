#pragma once

#include <torch/torch.h>

#include <array>
#include <cstring>
#include <vector>

#include "mits/config.hpp"
#include "mits/error.hpp"
#include "mits/png_io.hpp"

namespace mits {

/// Encoder output for a batch of frames. `features` is the flattened
/// stride-16 grid (B, H*W, C); skips hold the stride-8 and stride-4 maps.
struct VisualEmbedding {
  torch::Tensor features;
  torch::Tensor grid;  // (B, C, H, W), same storage order as features
  torch::Tensor skip8;
  torch::Tensor skip4;
  int64_t height = 0;  // H
  int64_t width = 0;   // W
  int64_t stride = 16;
  int64_t image_height = 0;  // unpadded input size
  int64_t image_width = 0;

  int64_t batch() const { return features.size(0); }
  VisualEmbedding select(int64_t b) const {
    VisualEmbedding v = *this;
    v.features = features.narrow(0, b, 1);
    v.grid = grid.narrow(0, b, 1);
    v.skip8 = skip8.narrow(0, b, 1);
    v.skip4 = skip4.narrow(0, b, 1);
    return v;
  }
};

/// Images (interleaved RGB in [0,1]) to a (B, 3, H, W) float tensor.
inline torch::Tensor images_to_tensor(const std::vector<const Image*>& images) {
  if (images.empty()) throw Error(Errc::ShapeError, "no images");
  const int h = images.front()->height, w = images.front()->width;
  auto out = torch::empty({int64_t(images.size()), h, w, 3}, torch::kFloat32);
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i]->height != h || images[i]->width != w) throw Error(Errc::ShapeError, "mixed image sizes");
    std::memcpy(out[i].data_ptr<float>(), images[i]->rgb.data(), sizeof(float) * h * w * 3);
  }
  return out.permute({0, 3, 1, 2}).contiguous();
}

inline int64_t round_up(int64_t v, int64_t m) { return (v + m - 1) / m * m; }

namespace detail {

inline torch::nn::Sequential conv_block(int64_t in, int64_t out, int64_t stride) {
  auto groups = [](int64_t c) { return c % 8 == 0 ? int64_t(8) : (c % 4 == 0 ? int64_t(4) : int64_t(1)); };
  return torch::nn::Sequential(
      torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).stride(stride).padding(1).bias(false)),
      torch::nn::GroupNorm(groups(out), out), torch::nn::ReLU(),
      torch::nn::Conv2d(torch::nn::Conv2dOptions(out, out, 3).padding(1).bias(false)),
      torch::nn::GroupNorm(groups(out), out), torch::nn::ReLU());
}

}  // namespace detail

/// Small strided CNN: four downsampling stages to stride 16, shared by every
/// frame of a session.
class EncoderImpl : public torch::nn::Module {
 public:
  EncoderImpl(const ModelConfig& cfg, const std::array<double, 3>& mean, const std::array<double, 3>& std)
      : channels_(cfg.channels) {
    const auto& w = cfg.encoder_widths;
    stage1 = register_module("stage1", detail::conv_block(3, w[0], 2));
    stage2 = register_module("stage2", detail::conv_block(w[0], w[1], 2));
    stage3 = register_module("stage3", detail::conv_block(w[1], w[2], 2));
    stage4 = register_module("stage4", detail::conv_block(w[2], cfg.channels, 2));
    mean_ = register_buffer("pixel_mean", torch::tensor({mean[0], mean[1], mean[2]}).view({1, 3, 1, 1}).to(torch::kFloat32));
    std_ = register_buffer("pixel_std", torch::tensor({std[0], std[1], std[2]}).view({1, 3, 1, 1}).to(torch::kFloat32));
  }

  /// images: (B, 3, H_I, W_I) in [0,1]. Inputs are reflect-padded to a
  /// multiple of 16 on the bottom/right.
  VisualEmbedding forward(torch::Tensor images) {
    if (images.dim() != 4 || images.size(1) != 3) throw Error(Errc::ShapeError, "expected (B,3,H,W) images");
    const int64_t h = images.size(2), w = images.size(3);
    const int64_t ph = round_up(h, 16) - h, pw = round_up(w, 16) - w;
    if (ph >= h || pw >= w) throw Error(Errc::ShapeError, "image too small to reflect-pad to stride 16");
    auto x = (images.to(mean_.dtype()) - mean_) / std_;
    if (ph || pw)
      x = torch::nn::functional::pad(x, torch::nn::functional::PadFuncOptions({0, pw, 0, ph}).mode(torch::kReflect));
    auto s2 = stage1->forward(x);
    auto s4 = stage2->forward(s2);
    auto s8 = stage3->forward(s4);
    auto s16 = stage4->forward(s8);
    VisualEmbedding out;
    out.grid = s16;
    out.height = s16.size(2);
    out.width = s16.size(3);
    out.features = s16.flatten(2).transpose(1, 2);
    out.skip8 = s8;
    out.skip4 = s4;
    out.image_height = h;
    out.image_width = w;
    return out;
  }

  int64_t channels() const { return channels_; }

  torch::nn::Sequential stage1{nullptr}, stage2{nullptr}, stage3{nullptr}, stage4{nullptr};

 private:
  int64_t channels_;
  torch::Tensor mean_, std_;
};
TORCH_MODULE(Encoder);

}  // namespace mits
