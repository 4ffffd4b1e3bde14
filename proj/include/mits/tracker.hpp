#pragma once

#include <torch/torch.h>

#include <optional>
#include <variant>
#include <vector>

#include "mits/config.hpp"
#include "mits/error.hpp"
#include "mits/geometry.hpp"
#include "mits/heads.hpp"
#include "mits/model.hpp"

namespace mits {

struct FrameResult {
  LabelMap labels;                  // object indices, absent objects erased
  std::vector<MaybeBox> boxes;      // box branch, suppressed for absent objects
  std::vector<MaybeBox> mask_boxes; // tight boxes of `labels`
  std::vector<bool> present;
  std::vector<double> consistency;
  std::vector<double> mask_mass;    // predicted probability mass per object, in stride-4 cells
  torch::Tensor side_probs;         // (4, N, H, W) pinpoint maps of the selected objects, if available
};

/// One tracking session per sequence. Frame 0 seeds the memory with the
/// reference; every later frame runs encode -> propagate -> dual decode and is
/// written back to memory with its own predicted labels.
class TrackerSession {
 public:
  TrackerSession(TrackerModel model, MemoryConfig memory, std::optional<IDAssignment> assignment = std::nullopt)
      : model_(std::move(model)), memory_(memory), assignment_(std::move(assignment)) {}

  FrameResult initialize(const Image& frame, const Reference& ref) {
    if (initialized_) throw Error(Errc::InitFormatMismatch, "session already initialized");
    int n = 0;
    if (const auto* lm = std::get_if<LabelMap>(&ref)) {
      if (lm->rows() != frame.height || lm->cols() != frame.width)
        throw Error(Errc::InitFormatMismatch, "reference mask size differs from the frame");
      lm->validate();
      n = lm->num_objects;
      format_ = InitFormat::Mask;
    } else {
      const auto& boxes = std::get<std::vector<Box>>(ref);
      for (const auto& b : boxes)
        if (!b.valid()) throw Error(Errc::InitFormatMismatch, "invalid reference box");
      n = int(boxes.size());
      format_ = InitFormat::Box;
    }
    if (n < 1) throw Error(Errc::InitFormatMismatch, "reference holds no object");
    if (!assignment_) assignment_ = IDAssignment::identity(n);
    if (assignment_->size() != n) throw Error(Errc::InitFormatMismatch, "assignment size differs from object count");
    assignment_->validate(model_->config().bank_capacity);
    num_objects_ = n;
    height_ = frame.height;
    width_ = frame.width;

    torch::NoGradGuard no_grad;
    auto v = model_->encode(frame);
    auto id = model_->identify(v, ref, *assignment_);
    memory_.write(model_->memory_entry(v, id.embedding, 0));
    initialized_ = true;
    frame_ = 1;

    if (format_ == InitFormat::Mask) {
      FrameResult r;
      r.labels = std::get<LabelMap>(ref);
      r.mask_boxes = label_boxes(r.labels);
      r.boxes = r.mask_boxes;
      r.present.resize(n);
      for (int k = 0; k < n; ++k) r.present[k] = r.boxes[k].has_value();
      r.consistency = branch_consistency(r.boxes, r.mask_boxes);
      r.mask_mass.assign(n, 0.0);
      return last_ = r;
    }
    // Box reference: segment frame 0 from its own refined embedding; the
    // box branch reports the given boxes.
    auto r = finish(model_->decode(v, memory_.entries(), *assignment_));
    const auto& boxes = std::get<std::vector<Box>>(ref);
    for (int k = 0; k < n; ++k) {
      r.boxes[k] = boxes[k];
      r.present[k] = true;
    }
    r.consistency = branch_consistency(r.boxes, r.mask_boxes);
    return last_ = r;
  }

  FrameResult step(const Image& frame) {
    if (!initialized_) throw Error(Errc::InitFormatMismatch, "step() before initialize()");
    if (frame.height != height_ || frame.width != width_) throw Error(Errc::ShapeMismatch, "frame size changed");
    torch::NoGradGuard no_grad;
    auto v = model_->encode(frame);
    auto out = model_->decode(v, memory_.entries(), *assignment_);
    auto r = finish(out);
    // Memory uses the frame's own prediction, with absent objects erased.
    auto rows = to_bank_indices(r.labels.grid, *assignment_);
    auto t = torch::from_blob(rows.data().data(), {1, rows.rows(), rows.cols()}, torch::kUInt8).clone();
    memory_.write(model_->memory_entry(v, model_->embed_bank_labels(t, v), frame_));
    ++frame_;
    return last_ = r;
  }

  const MemoryBank& memory() const { return memory_; }
  const IDAssignment& assignment() const { return *assignment_; }
  InitFormat init_format() const { return format_; }
  int frame_counter() const { return frame_; }
  const FrameResult& last() const { return last_; }

 private:
  FrameResult finish(const FrameOutput& out) {
    const int n = num_objects_;
    const auto& bank = assignment_->bank;
    FrameResult r;
    // Mass of each object channel on the stride-4 grid.
    auto coarse = active_softmax(out.masks.logits, assignment_->active_channels()).sum({2, 3})[0];
    r.mask_mass.resize(n);
    r.present.resize(n);
    std::vector<int> row_to_object(model_->config().bank_capacity + 1, 0);
    for (int k = 0; k < n; ++k) {
      r.mask_mass[k] = coarse[bank[k]].item<double>();
      r.present[k] = r.mask_mass[k] >= model_->config().absent_mass;
      if (r.present[k]) row_to_object[bank[k]] = k + 1;
    }
    auto labels = out.masks.bank_labels[0].to(torch::kInt64).contiguous();
    r.labels = LabelMap(height_, width_, n);
    auto acc = labels.accessor<int64_t, 2>();
    for (int y = 0; y < height_; ++y)
      for (int x = 0; x < width_; ++x) r.labels(y, x) = std::uint8_t(row_to_object[acc[y][x]]);
    r.mask_boxes = label_boxes(r.labels);
    auto boxes = select_boxes(out.boxes.boxes, bank);
    r.boxes.resize(n);
    for (int k = 0; k < n; ++k)
      if (r.present[k]) r.boxes[k] = clamp_box(boxes[k], height_, width_);
    r.consistency = branch_consistency(r.boxes, r.mask_boxes);
    if (out.boxes.dist.side_probs.defined() && out.boxes.dist.side_probs.size(1) == 4) {
      std::vector<int64_t> rows;
      for (int b : bank) rows.push_back(b - 1);
      r.side_probs = out.boxes.dist.side_probs[0].index_select(1, torch::tensor(rows, torch::kInt64)).detach();
    }
    return r;
  }

  TrackerModel model_;
  MemoryBank memory_;
  std::optional<IDAssignment> assignment_;
  InitFormat format_ = InitFormat::Mask;
  bool initialized_ = false;
  int frame_ = 0;
  int num_objects_ = 0;
  int height_ = 0;
  int width_ = 0;
  FrameResult last_;
};

inline std::vector<FrameResult> track_sequence(TrackerModel model, const MemoryConfig& memory,
                                               const std::vector<Image>& frames, const Reference& init,
                                               std::optional<IDAssignment> assignment = std::nullopt) {
  if (frames.empty()) throw Error(Errc::InitFormatMismatch, "no frames to track");
  const bool was_training = model->is_training();
  model->eval();
  TrackerSession session(model, memory, std::move(assignment));
  std::vector<FrameResult> out;
  out.push_back(session.initialize(frames.front(), init));
  for (std::size_t t = 1; t < frames.size(); ++t) out.push_back(session.step(frames[t]));
  model->train(was_training);
  return out;
}

/// Reference built from frame 0 of a sample, restricted to objects present there.
inline Reference reference_from(const LabelMap& labels, InitFormat fmt) {
  if (fmt == InitFormat::Mask) return labels;
  std::vector<Box> boxes;
  for (const auto& b : label_boxes(labels)) {
    if (!b) throw Error(Errc::InitFormatMismatch, "object absent in the reference frame");
    boxes.push_back(*b);
  }
  return boxes;
}

}  // namespace mits
