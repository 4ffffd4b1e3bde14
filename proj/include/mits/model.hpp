#pragma once

// Encoding-propagation-decoding pipeline shared by training and tracking.

#include <torch/torch.h>

#include <vector>

#include "mits/config.hpp"
#include "mits/encoder.hpp"
#include "mits/heads.hpp"
#include "mits/propagation.hpp"
#include "mits/uidm.hpp"

namespace mits {

struct FrameOutput {
  PropagatedEmbedding propagated;
  MaskPrediction masks;
  BoxPrediction boxes;
};

class TrackerModelImpl : public torch::nn::Module {
 public:
  TrackerModelImpl(const ModelConfig& cfg, const std::array<double, 3>& pixel_mean = {0.5, 0.5, 0.5},
                   const std::array<double, 3>& pixel_std = {0.25, 0.25, 0.25})
      : cfg_(cfg) {
    encoder = register_module("encoder", Encoder(cfg, pixel_mean, pixel_std));
    uidm = register_module("uidm", UnifiedIdModule(cfg));
    propagation = register_module(
        "propagation", Propagation(cfg.channels, cfg.heads, cfg.propagation_layers, cfg.ffn_multiplier));
    mask_decoder = register_module("mask_decoder", MaskDecoder(cfg));
    box_head = register_module("box_head", BoxHead(cfg));
  }

  explicit TrackerModelImpl(const Config& cfg) : TrackerModelImpl(cfg.model, cfg.synth.pixel_mean, cfg.synth.pixel_std) {}

  VisualEmbedding encode(const torch::Tensor& images) { return encoder->forward(images); }
  VisualEmbedding encode(const Image& frame) { return encode(images_to_tensor({&frame})); }

  IdEmbeddingResult identify(const VisualEmbedding& v, const Reference& ref, const IDAssignment& a) {
    return uidm->forward(v, ref, a);
  }

  /// ID embedding of a predicted bank-row map (B=1, H_I, W_I) for memory writes.
  torch::Tensor embed_bank_labels(const torch::Tensor& bank_labels, const VisualEmbedding& v) {
    auto cpu = bank_labels.to(torch::kUInt8).contiguous();
    Grid<std::uint8_t> g(int(cpu.size(1)), int(cpu.size(2)));
    std::memcpy(g.data().data(), cpu.data_ptr<std::uint8_t>(), g.size());
    auto rows = downsample_majority(pad_grid(g, int(v.height * v.stride), int(v.width * v.stride)), int(v.stride),
                                    int(v.height), int(v.width));
    return uidm->bank->forward(grid_to_index_tensor(rows));
  }

  MemoryEntry memory_entry(const VisualEmbedding& v, const torch::Tensor& id_emb, int frame_index) {
    return propagation->make_entry(v, id_emb, frame_index);
  }

  FrameOutput decode(const VisualEmbedding& v, const std::vector<const MemoryEntry*>& memory,
                     const IDAssignment& assignment) {
    FrameOutput out;
    out.propagated = propagation->forward(v, memory);
    out.masks = finish_masks(mask_decoder->forward(out.propagated, v), v, assignment.active_channels());
    out.boxes = box_head->forward(out.propagated, v);
    return out;
  }

  const ModelConfig& config() const { return cfg_; }

  Encoder encoder{nullptr};
  UnifiedIdModule uidm{nullptr};
  Propagation propagation{nullptr};
  MaskDecoder mask_decoder{nullptr};
  BoxHead box_head{nullptr};

 private:
  ModelConfig cfg_;
};
TORCH_MODULE(TrackerModel);

}  // namespace mits
