#pragma once

// Unified identification: an ID bank shared by mask and box references, the
// Box ID Refiner (BIDR) that upgrades box-shaped embeddings, and the
// training-only ID decoder used for auxiliary mask reconstruction.

#include <torch/torch.h>

#include <algorithm>
#include <numeric>
#include <set>
#include <variant>
#include <vector>

#include "mits/attention.hpp"
#include "mits/config.hpp"
#include "mits/encoder.hpp"
#include "mits/error.hpp"
#include "mits/geometry.hpp"

namespace mits {

/// Object k+1 uses bank row `bank[k]`; rows are 1..M, row 0 is background.
struct IDAssignment {
  std::vector<int> bank;

  static IDAssignment identity(int n) {
    IDAssignment a;
    a.bank.resize(n);
    std::iota(a.bank.begin(), a.bank.end(), 1);
    return a;
  }
  int size() const { return int(bank.size()); }
  /// Background first, then the assigned rows in ascending order.
  std::vector<int64_t> active_channels() const {
    std::vector<int64_t> ch(bank.begin(), bank.end());
    std::sort(ch.begin(), ch.end());
    ch.insert(ch.begin(), 0);
    return ch;
  }
  void validate(int capacity) const {
    std::set<int> seen;
    for (int b : bank) {
      if (b < 1 || b > capacity) throw Error(Errc::UnassignedLabel, "bank index out of range");
      if (!seen.insert(b).second) throw Error(Errc::UnassignedLabel, "assignment is not injective");
    }
  }
};

/// Replaces object labels by their bank rows.
inline Grid<std::uint8_t> to_bank_indices(const Grid<std::uint8_t>& labels, const IDAssignment& a) {
  Grid<std::uint8_t> out(labels.rows(), labels.cols());
  auto src = labels.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < src.size(); ++i) {
    const int v = src[i];
    if (v == 0) continue;
    if (v > a.size()) throw Error(Errc::UnassignedLabel, "label " + std::to_string(v) + " has no bank index");
    dst[i] = std::uint8_t(a.bank[v - 1]);
  }
  return out;
}

/// Majority vote per stride x stride cell. Ties go to foreground, and among
/// tied foreground values to the smaller bank row. Pixels beyond the source
/// extent (padding) are ignored.
inline Grid<std::uint8_t> downsample_majority(const Grid<std::uint8_t>& src, int stride, int out_rows, int out_cols) {
  Grid<std::uint8_t> out(out_rows, out_cols);
  std::array<int, 256> count{};
  for (int gr = 0; gr < out_rows; ++gr)
    for (int gc = 0; gc < out_cols; ++gc) {
      count.fill(0);
      const int r1 = std::min(src.rows(), (gr + 1) * stride), c1 = std::min(src.cols(), (gc + 1) * stride);
      for (int r = gr * stride; r < r1; ++r)
        for (int c = gc * stride; c < c1; ++c) ++count[src(r, c)];
      int best = 0;
      for (int v = 1; v < 256; ++v)
        if (count[v] > count[best] || (best == 0 && count[v] == count[0] && count[v] > 0)) best = v;
      out(gr, gc) = std::uint8_t(best);
    }
  return out;
}

inline torch::Tensor grid_to_index_tensor(const Grid<std::uint8_t>& g) {
  auto t = torch::empty({1, int64_t(g.size())}, torch::kInt64);
  auto acc = t.accessor<int64_t, 2>();
  auto d = g.data();
  for (std::size_t i = 0; i < d.size(); ++i) acc[0][i] = d[i];
  return t;
}

class IDBankImpl : public torch::nn::Module {
 public:
  IDBankImpl(int64_t capacity, int64_t channels) : capacity_(capacity) {
    vectors = register_parameter("vectors", torch::randn({capacity + 1, channels}) * 0.5);
  }
  /// indices: (B, HW) int64 bank rows -> (B, HW, C).
  torch::Tensor forward(const torch::Tensor& indices) {
    return vectors.index_select(0, indices.reshape({-1})).reshape({indices.size(0), indices.size(1), vectors.size(1)});
  }
  int64_t capacity() const { return capacity_; }

  torch::Tensor vectors;

 private:
  int64_t capacity_;
};
TORCH_MODULE(IDBank);

/// `labels` must already be on the encoder grid (H x W).
inline torch::Tensor assign_ids(const LabelMap& labels, IDBank& bank, const IDAssignment& assignment) {
  assignment.validate(int(bank->capacity()));
  return bank->forward(grid_to_index_tensor(to_bank_indices(labels.grid, assignment)));
}

/// Pads a full-resolution grid with zeros up to the encoder's padded extent.
inline Grid<std::uint8_t> pad_grid(const Grid<std::uint8_t>& g, int rows, int cols) {
  if (g.rows() == rows && g.cols() == cols) return g;
  Grid<std::uint8_t> out(rows, cols);
  for (int r = 0; r < std::min(rows, g.rows()); ++r)
    for (int c = 0; c < std::min(cols, g.cols()); ++c) out(r, c) = g(r, c);
  return out;
}

/// Full-resolution labels -> bank rows on the encoder grid.
inline Grid<std::uint8_t> bank_grid(const LabelMap& labels, const IDAssignment& a, const VisualEmbedding& v) {
  const auto bank = to_bank_indices(labels.grid, a);
  return downsample_majority(pad_grid(bank, int(v.height * v.stride), int(v.width * v.stride)), int(v.stride),
                             int(v.height), int(v.width));
}

/// One BIDR block: self-attention in each path, then cross-attention between
/// them, then feed-forward. With `dual == false` only the image path receives
/// cross-attention.
class DualPathLayerImpl : public torch::nn::Module {
 public:
  DualPathLayerImpl(int64_t c, int64_t heads, int64_t ffn_mult, bool dual) : dual_(dual) {
    img_self = register_module("img_self", MultiHeadAttention(c, heads));
    obj_self = register_module("obj_self", MultiHeadAttention(c, heads));
    img_cross = register_module("img_cross", MultiHeadAttention(c, heads));
    if (dual_) obj_cross = register_module("obj_cross", MultiHeadAttention(c, heads));
    auto ln = [&](const char* name) {
      return register_module(name, torch::nn::LayerNorm(torch::nn::LayerNormOptions({c})));
    };
    n_img1 = ln("n_img1");
    n_obj1 = ln("n_obj1");
    n_img2 = ln("n_img2");
    n_obj2 = ln("n_obj2");
    n_img3 = ln("n_img3");
    n_obj3 = ln("n_obj3");
    img_ffn = register_module("img_ffn", FeedForward(c, c * ffn_mult));
    obj_ffn = register_module("obj_ffn", FeedForward(c, c * ffn_mult));
  }

  std::pair<torch::Tensor, torch::Tensor> forward(torch::Tensor img, torch::Tensor obj, const torch::Tensor& img_pos) {
    auto hi = n_img1->forward(img);
    img = img + img_self->forward(hi + img_pos, hi + img_pos, hi);
    auto ho = n_obj1->forward(obj);
    obj = obj + obj_self->forward(ho, ho, ho);

    hi = n_img2->forward(img);
    ho = n_obj2->forward(obj);
    auto to_img = img_cross->forward(hi + img_pos, ho, ho);  // image queries, object keys/values
    if (dual_) obj = obj + obj_cross->forward(ho, hi + img_pos, hi);  // object queries, image keys/values
    img = img + to_img;

    img = img + img_ffn->forward(n_img3->forward(img));
    obj = obj + obj_ffn->forward(n_obj3->forward(obj));
    return {img, obj};
  }

  bool dual() const { return dual_; }
  void set_record(bool on) {
    for (auto* m : {&img_self, &obj_self, &img_cross, &obj_cross})
      if (!m->is_empty()) (*m)->record = on;
  }

  MultiHeadAttention img_self{nullptr}, obj_self{nullptr}, img_cross{nullptr}, obj_cross{nullptr};
  torch::nn::LayerNorm n_img1{nullptr}, n_obj1{nullptr}, n_img2{nullptr}, n_obj2{nullptr}, n_img3{nullptr},
      n_obj3{nullptr};
  FeedForward img_ffn{nullptr}, obj_ffn{nullptr};

 private:
  bool dual_;
};
TORCH_MODULE(DualPathLayer);

/// Box ID Refiner. Object tokens come from a pool x pool bilinear sampling of
/// the visual features inside each box, tagged with the object's ID vector.
class BoxIdRefinerImpl : public torch::nn::Module {
 public:
  BoxIdRefinerImpl(const ModelConfig& cfg) : channels_(cfg.channels), pool_(cfg.pool_size) {
    for (int i = 0; i < cfg.bidr_layers; ++i)
      layers.push_back(register_module("layer" + std::to_string(i),
                                       DualPathLayer(cfg.channels, cfg.heads, cfg.ffn_multiplier,
                                                     cfg.bidr_dual_cross_attention)));
    inbox_pos = register_parameter("inbox_pos", torch::randn({int64_t(pool_) * pool_, cfg.channels}) * 0.02);
    out_norm = register_module("out_norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({cfg.channels})));
    out_proj = register_module("out_proj", torch::nn::Linear(cfg.channels, cfg.channels));
    torch::NoGradGuard g;
    out_proj->weight.zero_();
    out_proj->bias.zero_();
  }

  /// Pooled features inside each box: (1, n*pool*pool, C).
  torch::Tensor pool_boxes(const VisualEmbedding& v, const std::vector<Box>& boxes) const {
    const double pw = double(v.width * v.stride), ph = double(v.height * v.stride);
    const int64_t n = int64_t(boxes.size()), p = pool_;
    auto grid = torch::empty({1, n * p, p, 2}, torch::kFloat64);
    auto acc = grid.accessor<double, 4>();
    for (int64_t i = 0; i < n; ++i) {
      const Box& b = boxes[i];
      const double bw = b.x2 + 1 - b.x1, bh = b.y2 + 1 - b.y1;
      for (int64_t r = 0; r < p; ++r)
        for (int64_t c = 0; c < p; ++c) {
          const double x = b.x1 + (c + 0.5) * bw / p, y = b.y1 + (r + 0.5) * bh / p;
          acc[0][i * p + r][c][0] = 2 * x / pw - 1;
          acc[0][i * p + r][c][1] = 2 * y / ph - 1;
        }
    }
    namespace F = torch::nn::functional;
    auto pooled = F::grid_sample(v.grid, grid.to(v.grid.dtype()),
                                 F::GridSampleFuncOptions().mode(torch::kBilinear).padding_mode(torch::kBorder).align_corners(false));
    return pooled.flatten(2).transpose(1, 2);  // (1, n*p*p, C)
  }

  /// Returns the residual added to the coarse embedding, (1, HW, C).
  /// `boxes` and `id_vectors` (n, C) must share object order.
  torch::Tensor forward(const VisualEmbedding& v, const torch::Tensor& coarse, const std::vector<Box>& boxes,
                        const torch::Tensor& id_vectors) {
    ++calls;
    const int64_t n = int64_t(boxes.size()), pp = int64_t(pool_) * pool_;
    auto pos = positional_encoding_2d(v.height, v.width, channels_, v.features.options()).unsqueeze(0);
    auto img = v.features + coarse;
    auto obj = pool_boxes(v, boxes) + id_vectors.unsqueeze(1).expand({n, pp, channels_}).reshape({1, n * pp, channels_}) +
               inbox_pos.repeat({n, 1}).unsqueeze(0);
    for (auto& layer : layers) std::tie(img, obj) = layer->forward(img, obj, pos);
    return out_proj->forward(out_norm->forward(img));
  }

  void set_record(bool on) {
    for (auto& l : layers) l->set_record(on);
  }

  std::vector<DualPathLayer> layers;
  torch::Tensor inbox_pos;
  torch::nn::LayerNorm out_norm{nullptr};
  torch::nn::Linear out_proj{nullptr};
  int64_t calls = 0;

 private:
  int64_t channels_;
  int pool_;
};
TORCH_MODULE(BoxIdRefiner);

/// Reconstructs (M+1)-way mask logits on the encoder grid from an ID embedding.
class IdDecoderImpl : public torch::nn::Module {
 public:
  IdDecoderImpl(int64_t channels, int64_t capacity) {
    conv1 = register_module("conv1", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, channels, 3).padding(1)));
    conv2 = register_module("conv2", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, capacity + 1, 1)));
  }
  torch::Tensor forward(const torch::Tensor& grid) { return conv2->forward(torch::relu(conv1->forward(grid))); }

  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr};
};
TORCH_MODULE(IdDecoder);

/// A reference annotation: a label map (mask form) or one box per object.
using Reference = std::variant<LabelMap, std::vector<Box>>;

struct IdEmbeddingResult {
  torch::Tensor embedding;  // (1, HW, C)
  torch::Tensor coarse;     // (1, HW, C); equals embedding for mask references
  Grid<std::uint8_t> bank_rows;  // reference rasterised to bank rows on the encoder grid
};

class UnifiedIdModuleImpl : public torch::nn::Module {
 public:
  explicit UnifiedIdModuleImpl(const ModelConfig& cfg) : cfg_(cfg) {
    bank = register_module("bank", IDBank(cfg.bank_capacity, cfg.channels));
    bidr = register_module("bidr", BoxIdRefiner(cfg));
    id_decoder = register_module("id_decoder", IdDecoder(cfg.channels, cfg.bank_capacity));
  }

  IdEmbeddingResult forward(const VisualEmbedding& v, const Reference& ref, const IDAssignment& assignment) {
    assignment.validate(cfg_.bank_capacity);
    IdEmbeddingResult out;
    if (const auto* labels = std::get_if<LabelMap>(&ref)) {
      out.bank_rows = bank_grid(*labels, assignment, v);
      out.embedding = out.coarse = bank->forward(grid_to_index_tensor(out.bank_rows));
      return out;
    }
    const auto& boxes = std::get<std::vector<Box>>(ref);
    if (int(boxes.size()) != assignment.size())
      throw Error(Errc::UnassignedLabel, "box count differs from assignment size");
    const LabelMap box_masks = rasterize_boxes(boxes, int(v.image_height), int(v.image_width));
    out.bank_rows = bank_grid(box_masks, assignment, v);
    out.coarse = bank->forward(grid_to_index_tensor(out.bank_rows));
    out.embedding = out.coarse;
    if (!cfg_.bidr_enabled || boxes.empty()) return out;
    // Object tokens are ordered by bank row so relabelled objects see an
    // identical token sequence.
    std::vector<int> order(boxes.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) { return assignment.bank[a] < assignment.bank[b]; });
    std::vector<Box> sorted;
    std::vector<int64_t> rows;
    for (int i : order) {
      sorted.push_back(clamp_box(boxes[i], int(v.image_height), int(v.image_width)));
      rows.push_back(assignment.bank[i]);
    }
    auto ids = bank->vectors.index_select(0, torch::tensor(rows, torch::kInt64));
    out.embedding = out.coarse + bidr->forward(v, out.coarse, sorted, ids);
    return out;
  }

  /// Auxiliary reconstruction logits, (1, M+1, H, W). Training only.
  torch::Tensor reconstruct_mask(const torch::Tensor& embedding, int64_t h, int64_t w) {
    if (!is_training()) throw Error(Errc::InvokedAtInference, "the ID decoder is a training-only component");
    return id_decoder->forward(embedding.transpose(1, 2).reshape({embedding.size(0), embedding.size(2), h, w}));
  }

  IDBank bank{nullptr};
  BoxIdRefiner bidr{nullptr};
  IdDecoder id_decoder{nullptr};

 private:
  ModelConfig cfg_;
};
TORCH_MODULE(UnifiedIdModule);

}  // namespace mits
