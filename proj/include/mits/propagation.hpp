#pragma once

#include <torch/torch.h>

#include <deque>
#include <optional>
#include <vector>

#include "mits/attention.hpp"
#include "mits/config.hpp"
#include "mits/encoder.hpp"
#include "mits/error.hpp"

namespace mits {

struct MemoryEntry {
  torch::Tensor keys;    // (1, HW, C)
  torch::Tensor values;  // (1, HW, C)
  torch::Tensor id_emb;  // (1, HW, C)
  int frame_index = 0;
};

/// Reference entry is permanent; every `long_term_interval`-th frame is kept
/// as a long-term entry (FIFO, oldest evicted first); the most recent frame is
/// the short-term entry. Total entries never exceed `capacity`.
class MemoryBank {
 public:
  explicit MemoryBank(MemoryConfig cfg = {}) : cfg_(cfg) {}

  void write(MemoryEntry e) {
    if (!reference_) {
      reference_ = std::move(e);
      return;
    }
    const std::size_t long_cap = std::size_t(std::max(0, cfg_.capacity - 2));
    if (long_cap > 0 && e.frame_index % cfg_.long_term_interval == 0) {
      long_term_.push_back(e);
      while (long_term_.size() > long_cap) long_term_.pop_front();
    }
    short_term_ = std::move(e);
  }

  /// Time-ordered entries; the short-term entry is skipped when it is also the
  /// newest long-term entry.
  std::vector<const MemoryEntry*> entries() const {
    std::vector<const MemoryEntry*> out;
    if (reference_) out.push_back(&*reference_);
    for (const auto& e : long_term_) out.push_back(&e);
    if (short_term_ && (long_term_.empty() || long_term_.back().frame_index != short_term_->frame_index))
      out.push_back(&*short_term_);
    return out;
  }

  std::vector<int> frame_indices() const {
    std::vector<int> out;
    for (const auto* e : entries()) out.push_back(e->frame_index);
    return out;
  }

  std::size_t size() const { return entries().size(); }
  bool empty() const { return !reference_; }
  const MemoryEntry* reference() const { return reference_ ? &*reference_ : nullptr; }
  const MemoryConfig& config() const { return cfg_; }

 private:
  MemoryConfig cfg_;
  std::optional<MemoryEntry> reference_;
  std::deque<MemoryEntry> long_term_;
  std::optional<MemoryEntry> short_term_;
};

struct PropagatedEmbedding {
  torch::Tensor d;  // (B, HW, C)
  int64_t head_dim = 0;
  int64_t height = 0;
  int64_t width = 0;
};

class PropagationLayerImpl : public torch::nn::Module {
 public:
  PropagationLayerImpl(int64_t c, int64_t heads, int64_t ffn_mult) {
    norm_q = register_module("norm_q", torch::nn::LayerNorm(torch::nn::LayerNormOptions({c})));
    attn = register_module("attn", MultiHeadAttention(c, heads));
    norm_ffn = register_module("norm_ffn", torch::nn::LayerNorm(torch::nn::LayerNormOptions({c})));
    ffn = register_module("ffn", FeedForward(c, c * ffn_mult));
  }

  /// `mem_keys` already carry their positional encoding.
  torch::Tensor forward(torch::Tensor x, const torch::Tensor& pos, const torch::Tensor& mem_keys,
                        const torch::Tensor& mem_values, const torch::Tensor& mem_ids) {
    auto h = norm_q->forward(x);
    x = x + attn->forward(h + pos, mem_keys, mem_values, mem_ids);
    return x + ffn->forward(norm_ffn->forward(x));
  }

  torch::nn::LayerNorm norm_q{nullptr}, norm_ffn{nullptr};
  MultiHeadAttention attn{nullptr};
  FeedForward ffn{nullptr};
};
TORCH_MODULE(PropagationLayer);

/// Stacked attention from the current frame onto all memory positions, with
/// values V_m + E_id.
class PropagationImpl : public torch::nn::Module {
 public:
  PropagationImpl(int64_t channels, int64_t heads, int64_t layers, int64_t ffn_mult)
      : channels_(channels), heads_(heads) {
    memory_norm = register_module("memory_norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({channels})));
    for (int64_t i = 0; i < layers; ++i)
      this->layers.push_back(register_module("layer" + std::to_string(i), PropagationLayer(channels, heads, ffn_mult)));
    out_norm = register_module("out_norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({channels})));
  }

  MemoryEntry make_entry(const VisualEmbedding& v, const torch::Tensor& id_emb, int frame_index) {
    auto m = memory_norm->forward(v.features);
    return MemoryEntry{m, m, id_emb, frame_index};
  }

  PropagatedEmbedding forward(const VisualEmbedding& query, const std::vector<const MemoryEntry*>& memory) {
    if (memory.empty()) throw Error(Errc::EmptyMemory, "propagation needs at least one memory entry");
    auto pos = positional_encoding_2d(query.height, query.width, channels_, query.features.options()).unsqueeze(0);
    std::vector<torch::Tensor> ks, vs, es;
    for (const auto* e : memory) {
      if (e->keys.size(1) != query.features.size(1)) throw Error(Errc::ShapeMismatch, "memory grid differs from query");
      ks.push_back(e->keys + pos);
      vs.push_back(e->values);
      es.push_back(e->id_emb);
    }
    auto k = torch::cat(ks, 1), v = torch::cat(vs, 1), ids = torch::cat(es, 1);
    auto x = query.features;
    for (auto& layer : layers) x = layer->forward(x, pos, k, v, ids);
    return PropagatedEmbedding{out_norm->forward(x), channels_ / heads_, query.height, query.width};
  }

  torch::nn::LayerNorm memory_norm{nullptr}, out_norm{nullptr};
  std::vector<PropagationLayer> layers;

 private:
  int64_t channels_;
  int64_t heads_;
};
TORCH_MODULE(Propagation);

}  // namespace mits
