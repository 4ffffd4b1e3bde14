#pragma once

#include <optional>
#include <ostream>
#include <vector>

#include "mits/metrics.hpp"
#include "mits/trainer.hpp"
#include "mits/tracker.hpp"

namespace mits {

struct TrackingScores {
  double mask_iou = 0;     // mean over objects and frames 1..T-1 (absent ground truth scored as background)
  double box_iou = 0;      // mean over objects and frames 1..T-1 where the object is present
  double consistency = 0;  // mean branch consistency over objects and frames 1..T-1
};

/// Tracks one sequence (targets = objects visible at frame 0) and scores it.
inline TrackingScores score_sequence(TrackerModel model, const MemoryConfig& memory, const SequenceSample& raw,
                                     InitFormat fmt, std::vector<FrameResult>* results = nullptr) {
  const auto s = relabel_targets(raw, 0);
  auto out = track_sequence(model, memory, s.frames, reference_from(s.labels.front(), fmt));
  TrackingScores sc;
  double box_n = 0, cons_n = 0, mask_n = 0;
  for (std::size_t t = 1; t < out.size(); ++t) {
    for (int k = 0; k < s.num_objects(); ++k) {
      sc.mask_iou += mask_iou(out[t].labels.object_mask(k + 1), s.labels[t].object_mask(k + 1));
      ++mask_n;
      sc.consistency += out[t].consistency[k];
      ++cons_n;
      if (s.boxes[t][k]) {
        sc.box_iou += out[t].boxes[k] ? iou(*out[t].boxes[k], *s.boxes[t][k]) : 0.0;
        ++box_n;
      }
    }
  }
  if (mask_n) sc.mask_iou /= mask_n;
  if (cons_n) sc.consistency /= cons_n;
  if (box_n) sc.box_iou /= box_n;
  if (results) *results = std::move(out);
  return sc;
}

inline TrackingScores score_sequences(TrackerModel model, const MemoryConfig& memory,
                                      const std::vector<SequenceSample>& seqs, InitFormat fmt) {
  TrackingScores mean;
  for (const auto& s : seqs) {
    auto sc = score_sequence(model, memory, s, fmt);
    mean.mask_iou += sc.mask_iou / double(seqs.size());
    mean.box_iou += sc.box_iou / double(seqs.size());
    mean.consistency += sc.consistency / double(seqs.size());
  }
  return mean;
}

/// Synthetic sequences whose seeds come from a range disjoint from the
/// training pool (which uses mix_seed(train seed, 1000 + i)).
inline std::vector<SequenceSample> held_out_sequences(const SynthConfig& base, int count, std::uint64_t salt = 7) {
  std::vector<SequenceSample> out;
  for (int i = 0; i < count; ++i) {
    SynthConfig sc = base;
    sc.seed = mix_seed(0xfeedULL + salt, 500000 + i);
    out.push_back(generate_sequence(sc));
  }
  return out;
}

struct AblationFlags {
  bool no_dual_cross_attention = false;
  bool no_mask_reconstruction = false;
  std::optional<BoxHeadKind> head;
};

inline Config apply_ablation(Config cfg, const AblationFlags& f) {
  if (f.no_dual_cross_attention) cfg.model.bidr_dual_cross_attention = false;
  if (f.no_mask_reconstruction) cfg.model.mask_reconstruction = false;
  if (f.head) cfg.model.box_head = *f.head;
  validate(cfg);
  return cfg;
}

struct VariantScores {
  TrackingScores mask_init;
  TrackingScores box_init;
  double final_loss = 0;
};

/// Trains a fresh model under `cfg` and scores it on `held_out` with both
/// initialization formats.
inline VariantScores train_and_score(const Config& cfg, const std::vector<SequenceSample>& held_out,
                                     std::ostream* log = nullptr, TrackerModel* trained = nullptr) {
  Trainer trainer(cfg, log);
  trainer.run();
  VariantScores v;
  if (!trainer.history().empty()) v.final_loss = trainer.history().back().loss;
  v.mask_init = score_sequences(trainer.model(), cfg.memory, held_out, InitFormat::Mask);
  v.box_init = score_sequences(trainer.model(), cfg.memory, held_out, InitFormat::Box);
  if (trained) *trained = trainer.model();
  return v;
}

/// Frames 1..T-1 of tracking results against relabelled ground truth, as a
/// metrics report entry.
inline SequenceReport report_sequence(const SequenceSample& gt, const std::vector<FrameResult>& res,
                                      const std::string& task) {
  if (gt.length() != int(res.size())) throw Error(Errc::LengthMismatch, "result and ground-truth lengths differ");
  SequenceReport r;
  r.name = gt.name;
  std::vector<LabelMap> pl, gl;
  std::vector<std::vector<MaybeBox>> pb, gb;
  double cons = 0, n = 0;
  for (std::size_t t = 1; t < res.size(); ++t) {
    pl.push_back(res[t].labels);
    gl.push_back(gt.labels[t]);
    pb.push_back(res[t].boxes);
    gb.push_back(gt.boxes[t]);
    for (double c : res[t].consistency) {
      cons += c;
      ++n;
    }
  }
  if (task != "vos") r.vot = eval_vot_objects(transpose_boxes(pb, gt.num_objects()), transpose_boxes(gb, gt.num_objects()));
  if (task != "vot") r.vos = eval_vos(pl, gl);
  r.consistency = n ? cons / n : 0.0;
  return r;
}

}  // namespace mits
