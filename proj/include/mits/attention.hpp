#pragma once

// Multi-head attention over batch-first token sequences (B, L, C), with
// optional recording of the attention weights for inspection.

#include <torch/torch.h>

#include <cmath>
#include <optional>

namespace mits {

/// 2-D sinusoidal positional encoding for an H x W grid: the first C/2
/// channels encode the row, the rest the column. Returns (H*W, C).
inline torch::Tensor positional_encoding_2d(int64_t h, int64_t w, int64_t c,
                                            torch::TensorOptions opts = torch::kFloat32) {
  const int64_t half = c / 2, quarter = c / 4;
  auto freq = torch::exp(torch::arange(quarter, opts.dtype(torch::kFloat64)) *
                         (-std::log(10000.0) / std::max<int64_t>(quarter, 1)));
  auto ys = (torch::arange(h, opts.dtype(torch::kFloat64)) + 0.5) / h * (2 * M_PI);
  auto xs = (torch::arange(w, opts.dtype(torch::kFloat64)) + 0.5) / w * (2 * M_PI);
  auto ey = torch::outer(ys, freq);
  auto ex = torch::outer(xs, freq);
  auto pe_y = torch::cat({ey.sin(), ey.cos()}, 1);  // (h, half)
  auto pe_x = torch::cat({ex.sin(), ex.cos()}, 1);  // (w, half)
  auto pe = torch::cat({pe_y.unsqueeze(1).expand({h, w, half}), pe_x.unsqueeze(0).expand({h, w, half})}, 2);
  return pe.reshape({h * w, c}).to(opts.dtype());
}

class MultiHeadAttentionImpl : public torch::nn::Module {
 public:
  MultiHeadAttentionImpl(int64_t channels, int64_t heads) : channels_(channels), heads_(heads) {
    q_proj = register_module("q_proj", torch::nn::Linear(channels, channels));
    k_proj = register_module("k_proj", torch::nn::Linear(channels, channels));
    v_proj = register_module("v_proj", torch::nn::Linear(channels, channels));
    out_proj = register_module("out_proj", torch::nn::Linear(channels, channels));
  }

  /// `value_add` is summed onto the projected values before attention; the
  /// propagation layers use it to carry the identification embedding.
  torch::Tensor forward(const torch::Tensor& query, const torch::Tensor& key, const torch::Tensor& value,
                        const std::optional<torch::Tensor>& value_add = std::nullopt) {
    const auto b = query.size(0), lq = query.size(1), lk = key.size(1);
    const auto d = channels_ / heads_;
    auto split = [&](const torch::Tensor& t, int64_t len) {
      return t.reshape({b, len, heads_, d}).transpose(1, 2);  // (B, heads, L, d)
    };
    auto q = split(q_proj->forward(query), lq);
    auto k = split(k_proj->forward(key), lk);
    auto v_in = v_proj->forward(value);
    if (value_add) v_in = v_in + *value_add;
    auto v = split(v_in, lk);
    auto weights = torch::softmax(torch::matmul(q, k.transpose(-2, -1)) / std::sqrt(double(d)), -1);
    auto ctx = torch::matmul(weights, v).transpose(1, 2).reshape({b, lq, channels_});
    if (record) {
      last_weights = weights.detach();
      last_context = ctx.detach();
    }
    return out_proj->forward(ctx);
  }

  int64_t heads() const { return heads_; }

  torch::nn::Linear q_proj{nullptr}, k_proj{nullptr}, v_proj{nullptr}, out_proj{nullptr};
  bool record = false;
  torch::Tensor last_weights;  // (B, heads, Lq, Lk)
  torch::Tensor last_context;  // attention output before out_proj, (B, Lq, C)

 private:
  int64_t channels_;
  int64_t heads_;
};
TORCH_MODULE(MultiHeadAttention);

class FeedForwardImpl : public torch::nn::Module {
 public:
  FeedForwardImpl(int64_t channels, int64_t hidden) {
    fc1 = register_module("fc1", torch::nn::Linear(channels, hidden));
    fc2 = register_module("fc2", torch::nn::Linear(hidden, channels));
  }
  torch::Tensor forward(const torch::Tensor& x) { return fc2->forward(torch::gelu(fc1->forward(x))); }

  torch::nn::Linear fc1{nullptr}, fc2{nullptr};
};
TORCH_MODULE(FeedForward);

/// Pre-norm transformer encoder layer; `pos` (L, C) is added to queries and keys.
class SelfAttentionLayerImpl : public torch::nn::Module {
 public:
  SelfAttentionLayerImpl(int64_t channels, int64_t heads, int64_t ffn_mult) {
    norm1 = register_module("norm1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({channels})));
    attn = register_module("attn", MultiHeadAttention(channels, heads));
    norm2 = register_module("norm2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({channels})));
    ffn = register_module("ffn", FeedForward(channels, channels * ffn_mult));
  }

  torch::Tensor forward(torch::Tensor x, const std::optional<torch::Tensor>& pos = std::nullopt) {
    auto h = norm1->forward(x);
    auto qk = pos ? h + *pos : h;
    x = x + attn->forward(qk, qk, h);
    return x + ffn->forward(norm2->forward(x));
  }

  torch::nn::LayerNorm norm1{nullptr}, norm2{nullptr};
  MultiHeadAttention attn{nullptr};
  FeedForward ffn{nullptr};
};
TORCH_MODULE(SelfAttentionLayer);

}  // namespace mits
