#pragma once

#include <torch/torch.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "mits/checkpoint.hpp"
#include "mits/config.hpp"
#include "mits/data.hpp"
#include "mits/error.hpp"
#include "mits/losses.hpp"
#include "mits/model.hpp"
#include "mits/tracker.hpp"

namespace mits {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) { return splitmix64(splitmix64(a) ^ (b + 0x632be59bd9b4e019ULL)); }

/// Copy of `s` restricted to the objects present at frame `t0`, relabelled
/// 1..n in ascending order of their original label.
inline SequenceSample relabel_targets(const SequenceSample& s, int t0) {
  std::vector<int> map(s.num_objects() + 1, 0);
  int n = 0;
  for (int k = 0; k < s.num_objects(); ++k)
    if (s.presence[t0][k]) map[k + 1] = ++n;
  SequenceSample out;
  out.name = s.name;
  out.frames = s.frames;
  for (const auto& lm : s.labels) {
    LabelMap r(lm.rows(), lm.cols(), n);
    auto src = lm.grid.data();
    auto dst = r.grid.data();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] = std::uint8_t(map[src[i]]);
    out.labels.push_back(std::move(r));
  }
  derive_boxes(out);
  return out;
}

inline torch::Tensor labels_to_tensor(const LabelMap& lm) {
  auto t = torch::empty({1, lm.rows(), lm.cols()}, torch::kInt64);
  auto acc = t.accessor<int64_t, 3>();
  for (int r = 0; r < lm.rows(); ++r)
    for (int c = 0; c < lm.cols(); ++c) acc[0][r][c] = lm(r, c);
  return t;
}

/// Frame-index targets for a clip frame: object k+1 -> its position in the
/// active channel list.
inline torch::Tensor active_targets(const LabelMap& lm, const IDAssignment& a) {
  const auto active = a.active_channels();
  std::vector<int64_t> pos(lm.num_objects + 1, 0);
  for (int k = 0; k < a.size(); ++k)
    pos[k + 1] = std::find(active.begin(), active.end(), a.bank[k]) - active.begin();
  auto t = labels_to_tensor(lm);
  auto lut = torch::tensor(pos, torch::kInt64);
  return lut.index_select(0, t.reshape({-1})).reshape(t.sizes());
}

struct Clip {
  std::vector<const Image*> frames;
  std::vector<LabelMap> labels;  // relabelled targets
  IDAssignment assignment;
  bool box_only = false;
};

struct LossParts {
  double ce = 0, jaccard = 0, box = 0, recon = 0;
};

struct StepStats {
  int64_t step = 0;
  double loss = 0;
  double lr = 0;
  InitFormat init_format = InitFormat::Mask;
  LossParts parts;
};

inline double poly_lr(const TrainConfig& t, int64_t step) {
  if (t.steps <= 0) return t.lr;
  const double frac = std::clamp(double(step) / double(t.steps), 0.0, 1.0);
  return (t.lr - t.lr_end) * std::pow(1.0 - frac, t.lr_power) + t.lr_end;
}

/// Loss of one clip under one initialization format. Frame 0 is the
/// reference; each later frame is decoded against [reference, previous frame]
/// with the previous frame written from its own detached prediction.
inline torch::Tensor total_step_loss(TrackerModel& model, const std::vector<VisualEmbedding>& enc, const Clip& clip,
                                     InitFormat fmt, const LossWeights& w, LossParts* parts = nullptr) {
  const auto& a = clip.assignment;
  const auto active = a.active_channels();
  auto idx = torch::tensor(active, torch::kInt64);
  const bool mask_terms = !clip.box_only;
  const auto& v0 = enc.front();
  const int h = int(v0.image_height), wd = int(v0.image_width);
  auto ref = clip.box_only || fmt == InitFormat::Box ? reference_from(clip.labels.front(), InitFormat::Box)
                                                      : Reference(clip.labels.front());
  auto id = model->identify(v0, ref, a);
  std::vector<MemoryEntry> memory{model->memory_entry(v0, id.embedding, 0)};

  auto loss = torch::zeros({}, v0.features.options());
  LossParts acc;
  int supervised = 0;
  auto frame_loss = [&](const FrameOutput& out, const LabelMap& gt) {
    if (mask_terms) {
      auto target = active_targets(gt, a);
      auto ce = cross_entropy_mask(out.masks.full_logits.index_select(1, idx), target);
      auto jac = soft_jaccard_loss(out.masks.probs.index_select(1, idx), target);
      loss = loss + w.ce * ce + w.jaccard * jac;
      acc.ce += ce.item<double>();
      acc.jaccard += jac.item<double>();
    }
    std::vector<int64_t> rows;
    std::vector<double> gt_boxes;
    const auto boxes = label_boxes(gt);
    for (int k = 0; k < gt.num_objects; ++k) {
      if (!boxes[k]) continue;
      rows.push_back(a.bank[k] - 1);
      const Box& b = *boxes[k];
      gt_boxes.insert(gt_boxes.end(), {b.x1 / wd, b.y1 / h, b.x2 / wd, b.y2 / h});
    }
    if (!rows.empty()) {
      auto scale = torch::tensor({double(wd), double(h), double(wd), double(h)}, out.boxes.boxes.options());
      auto pred = out.boxes.boxes[0].index_select(0, torch::tensor(rows, torch::kInt64)) / scale;
      auto gtt = torch::tensor(gt_boxes, pred.options()).view({-1, 4});
      auto bl = box_loss(pred, gtt, w);
      loss = loss + bl;
      acc.box += bl.item<double>();
    }
    ++supervised;
  };

  if (fmt == InitFormat::Box) {
    std::vector<const MemoryEntry*> mem{&memory.front()};
    frame_loss(model->decode(v0, mem, a), clip.labels.front());
  }
  for (std::size_t t = 1; t < enc.size(); ++t) {
    std::vector<const MemoryEntry*> mem{&memory.front()};
    if (memory.size() > 1) mem.push_back(&memory.back());
    auto out = model->decode(enc[t], mem, a);
    frame_loss(out, clip.labels[t]);
    if (t + 1 < enc.size()) {
      auto pred = out.masks.bank_labels.detach();
      auto entry = model->memory_entry(enc[t], model->embed_bank_labels(pred, enc[t]), int(t));
      if (memory.size() > 1) memory.back() = std::move(entry);
      else memory.push_back(std::move(entry));
    }
  }
  loss = loss / double(std::max(supervised, 1));
  acc.ce /= std::max(supervised, 1);
  acc.jaccard /= std::max(supervised, 1);
  acc.box /= std::max(supervised, 1);

  if (mask_terms && w.recon > 0 && model->config().mask_reconstruction) {
    auto logits = model->uidm->reconstruct_mask(id.embedding, v0.height, v0.width).index_select(1, idx);
    // True-mask bank rows on the encoder grid, as positions in `active`.
    const auto g = bank_grid(clip.labels.front(), a, v0);
    std::vector<int64_t> lut(model->config().bank_capacity + 1, 0);
    for (std::size_t i = 0; i < active.size(); ++i) lut[active[i]] = int64_t(i);
    auto target = torch::empty({1, g.rows(), g.cols()}, torch::kInt64);
    auto ta = target.accessor<int64_t, 3>();
    for (int r = 0; r < g.rows(); ++r)
      for (int c = 0; c < g.cols(); ++c) ta[0][r][c] = lut[g(r, c)];
    auto rl = cross_entropy_mask(logits, target);
    loss = loss + w.recon * rl;
    acc.recon = rl.item<double>();
  }
  if (parts) *parts = acc;
  return loss;
}

/// Samples training clips from a fixed pool or from fresh synthetic sequences.
class ClipSource {
 public:
  ClipSource(const Config& cfg) : cfg_(cfg) {
    const int n = cfg.train.num_sequences;
    for (int i = 0; i < n; ++i) pool_.push_back(make_sequence(mix_seed(cfg.train.seed, 1000 + i)));
  }

  explicit ClipSource(const Config& cfg, std::vector<SequenceSample> pool) : cfg_(cfg), pool_(std::move(pool)) {
    if (pool_.empty()) throw Error(Errc::DataSourceEmpty, "empty sequence pool");
  }

  const std::vector<SequenceSample>& pool() const { return pool_; }

  /// Draws a clip; `storage` keeps the sequence alive when it is generated on the fly.
  Clip sample(std::mt19937_64& rng, SequenceSample& storage) {
    const int frames = cfg_.train.clip_frames;
    for (int attempt = 0; attempt < 64; ++attempt) {
      const SequenceSample* s = nullptr;
      if (pool_.empty()) {
        storage = make_sequence(rng());
        s = &storage;
      } else {
        s = &pool_[std::uniform_int_distribution<std::size_t>(0, pool_.size() - 1)(rng)];
      }
      if (s->length() < frames) throw Error(Errc::DataSourceEmpty, "sequence shorter than a clip");
      std::vector<int> gaps(frames - 1);
      for (auto& g : gaps) g = std::uniform_int_distribution<int>(1, std::max(1, cfg_.train.max_gap))(rng);
      int span = std::accumulate(gaps.begin(), gaps.end(), 0);
      while (span > s->length() - 1) {
        for (auto& g : gaps) g = 1;
        span = frames - 1;
      }
      const int t0 = std::uniform_int_distribution<int>(0, s->length() - 1 - span)(rng);
      int n = 0;
      for (bool p : s->presence[t0]) n += p;
      if (n == 0) continue;
      Clip clip;
      std::vector<int> ts{t0};
      for (int g : gaps) ts.push_back(ts.back() + g);
      std::vector<int> map(s->num_objects() + 1, 0);
      int next = 0;
      for (int k = 0; k < s->num_objects(); ++k)
        if (s->presence[t0][k]) map[k + 1] = ++next;
      for (int t : ts) {
        clip.frames.push_back(&s->frames[t]);
        const auto& src = s->labels[t];
        LabelMap lm(src.rows(), src.cols(), n);
        auto a = src.grid.data();
        auto b = lm.grid.data();
        for (std::size_t i = 0; i < a.size(); ++i) b[i] = std::uint8_t(map[a[i]]);
        clip.labels.push_back(std::move(lm));
      }
      std::vector<int> rows(cfg_.model.bank_capacity);
      std::iota(rows.begin(), rows.end(), 1);
      if (cfg_.train.random_assignment) std::shuffle(rows.begin(), rows.end(), rng);
      clip.assignment.bank.assign(rows.begin(), rows.begin() + n);
      clip.box_only = std::bernoulli_distribution(cfg_.train.box_only_fraction)(rng);
      return clip;
    }
    throw Error(Errc::DataSourceEmpty, "no clip with a visible object");
  }

 private:
  SequenceSample make_sequence(std::uint64_t seed) const {
    SynthConfig sc = cfg_.synth;
    sc.seed = seed;
    return generate_sequence(sc);
  }

  Config cfg_;
  std::vector<SequenceSample> pool_;
};

/// Adam with polynomial learning-rate decay and gradient clipping. The data
/// RNG of step s is seeded from (seed, s) alone, so a resumed run replays the
/// same clips as an uninterrupted one.
class Trainer {
 public:
  explicit Trainer(const Config& cfg, std::ostream* log = nullptr) : Trainer(cfg, fresh_model(cfg), log) {}

  Trainer(const Config& cfg, TrackerModel model, std::ostream* log, std::optional<ClipSource> source = std::nullopt)
      : cfg_(cfg),
        model_(std::move(model)),
        optimizer_(model_->parameters(), torch::optim::AdamOptions(cfg.train.lr).weight_decay(cfg.train.weight_decay)),
        source_(source ? std::move(*source) : ClipSource(cfg)),
        log_(log) {
    validate(cfg_);
  }

  static Trainer resume(const std::string& path, std::ostream* log = nullptr) {
    auto ck = load_checkpoint(path);
    Trainer t(ck.manifest.config, ck.model, log);
    if (ck.has_optimizer) t.optimizer_.load(ck.optimizer_archive);
    t.step_ = ck.manifest.step;
    return t;
  }

  StepStats step() {
    model_->train();
    std::mt19937_64 rng(mix_seed(cfg_.train.seed, std::uint64_t(step_)));
    const auto objective = sample_objective(cfg_.train.p_box, rng);
    const double lr = poly_lr(cfg_.train, step_);
    for (auto& group : optimizer_.param_groups()) static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);

    std::vector<SequenceSample> storage(cfg_.train.batch_size);
    std::vector<Clip> clips;
    std::vector<const Image*> images;
    for (int b = 0; b < cfg_.train.batch_size; ++b) {
      clips.push_back(source_.sample(rng, storage[b]));
      images.insert(images.end(), clips.back().frames.begin(), clips.back().frames.end());
    }
    optimizer_.zero_grad();
    auto all = model_->encode(images_to_tensor(images));
    auto loss = torch::zeros({});
    StepStats st;
    const int f = cfg_.train.clip_frames;
    for (int b = 0; b < cfg_.train.batch_size; ++b) {
      std::vector<VisualEmbedding> enc;
      for (int t = 0; t < f; ++t) enc.push_back(all.select(b * f + t));
      const auto fmt = clips[b].box_only ? InitFormat::Box : objective.init_format;
      LossParts parts;
      loss = loss + total_step_loss(model_, enc, clips[b], fmt, cfg_.loss, &parts);
      st.parts.ce += parts.ce / cfg_.train.batch_size;
      st.parts.jaccard += parts.jaccard / cfg_.train.batch_size;
      st.parts.box += parts.box / cfg_.train.batch_size;
      st.parts.recon += parts.recon / cfg_.train.batch_size;
    }
    loss = loss / double(cfg_.train.batch_size);
    const double value = loss.item<double>();
    if (!std::isfinite(value)) {
      std::ostringstream msg;
      msg << "non-finite loss at step " << step_ << " (ce " << st.parts.ce << ", jaccard " << st.parts.jaccard
          << ", box " << st.parts.box << ", recon " << st.parts.recon << ")";
      throw Error(Errc::NonFiniteLoss, msg.str(), long(step_));
    }
    loss.backward();
    if (cfg_.train.grad_clip > 0) torch::nn::utils::clip_grad_norm_(model_->parameters(), cfg_.train.grad_clip);
    optimizer_.step();

    st.step = step_;
    st.loss = value;
    st.lr = lr;
    st.init_format = objective.init_format;
    history_.push_back(st);
    if (log_ && cfg_.train.log_every > 0 && step_ % cfg_.train.log_every == 0)
      *log_ << "step " << step_ << " loss " << value << " init " << (st.init_format == InitFormat::Box ? "box" : "mask")
            << " lr " << lr << " ce " << st.parts.ce << " jac " << st.parts.jaccard << " box " << st.parts.box
            << " recon " << st.parts.recon << "\n";
    ++step_;
    return st;
  }

  /// Trains until `cfg.train.steps` (or `until`), writing periodic checkpoints
  /// to `checkpoint_path` when configured.
  void run(std::optional<int64_t> until = std::nullopt, const std::string& checkpoint_path = "") {
    const int64_t end = until.value_or(cfg_.train.steps);
    while (step_ < end) {
      step();
      if (!checkpoint_path.empty() && cfg_.train.checkpoint_every > 0 && step_ % cfg_.train.checkpoint_every == 0)
        save(checkpoint_path);
    }
    if (!checkpoint_path.empty()) save(checkpoint_path);
  }

  void save(const std::string& path) { save_checkpoint(path, model_, &optimizer_, {kCheckpointFormat, step_, cfg_}); }

  TrackerModel model() const { return model_; }
  int64_t current_step() const { return step_; }
  const Config& config() const { return cfg_; }
  const std::vector<StepStats>& history() const { return history_; }
  const ClipSource& source() const { return source_; }

 private:
  static TrackerModel fresh_model(const Config& cfg) {
    validate(cfg);
    torch::manual_seed(cfg.train.seed);
    return TrackerModel(cfg);
  }

  Config cfg_;
  TrackerModel model_;
  torch::optim::Adam optimizer_;
  ClipSource source_;
  std::ostream* log_;
  int64_t step_ = 0;
  std::vector<StepStats> history_;
};

}  // namespace mits
