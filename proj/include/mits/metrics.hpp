#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "mits/error.hpp"
#include "mits/geometry.hpp"

namespace mits {

inline constexpr int kSuccessSteps = 51;           // IoU thresholds 0, 0.02, ..., 1
inline constexpr double kPrecisionPixels = 20.0;
inline constexpr double kNormPrecisionBound = 0.5;  // normalized thresholds 0 .. 0.5, 51 steps
inline constexpr double kBoundaryTolerance = 0.008; // fraction of the image diagonal

struct VotScores {
  double auc = 0, precision = 0, norm_precision = 0;
  int frames = 0;  // frames with the object present in the ground truth
};

/// One object's track. Frames whose ground truth is absent are skipped; an
/// absent prediction on a present frame scores IoU 0 and infinite center error.
inline VotScores eval_vot(const std::vector<MaybeBox>& pred, const std::vector<MaybeBox>& gt) {
  if (pred.size() != gt.size()) throw Error(Errc::LengthMismatch, "prediction and ground truth lengths differ");
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> ious, err, nerr;
  for (std::size_t t = 0; t < gt.size(); ++t) {
    if (!gt[t]) continue;
    const Box& g = *gt[t];
    if (!pred[t]) {
      ious.push_back(0);
      err.push_back(inf);
      nerr.push_back(inf);
      continue;
    }
    const Box& p = *pred[t];
    ious.push_back(iou(p, g));
    const double dx = p.cx() - g.cx(), dy = p.cy() - g.cy();
    err.push_back(std::hypot(dx, dy));
    nerr.push_back(std::hypot(dx / std::max(1.0, g.width()), dy / std::max(1.0, g.height())));
  }
  VotScores s;
  s.frames = int(ious.size());
  if (ious.empty()) return s;
  const double n = double(ious.size());
  double auc = 0, np = 0;
  for (int i = 0; i < kSuccessSteps; ++i) {
    const double th = double(i) / (kSuccessSteps - 1);
    auc += double(std::count_if(ious.begin(), ious.end(), [&](double v) { return v >= th && v > 0; })) / n;
    const double nth = kNormPrecisionBound * th;
    np += double(std::count_if(nerr.begin(), nerr.end(), [&](double v) { return v <= nth; })) / n;
  }
  s.auc = auc / kSuccessSteps;
  s.norm_precision = np / kSuccessSteps;
  s.precision = double(std::count_if(err.begin(), err.end(), [](double v) { return v < kPrecisionPixels; })) / n;
  return s;
}

/// Foreground pixels with a 4-neighbour that is background or off-image.
inline BinaryMask boundary_map(const BinaryMask& m) {
  BinaryMask b(m.rows(), m.cols());
  for (int r = 0; r < m.rows(); ++r)
    for (int c = 0; c < m.cols(); ++c) {
      if (!m(r, c)) continue;
      const bool edge = r == 0 || c == 0 || r == m.rows() - 1 || c == m.cols() - 1 || !m(r - 1, c) ||
                        !m(r + 1, c) || !m(r, c - 1) || !m(r, c + 1);
      b(r, c) = edge ? 1 : 0;
    }
  return b;
}

inline BinaryMask dilate_disk(const BinaryMask& m, int radius) {
  BinaryMask out(m.rows(), m.cols());
  for (int r = 0; r < m.rows(); ++r)
    for (int c = 0; c < m.cols(); ++c) {
      if (!m(r, c)) continue;
      for (int dr = -radius; dr <= radius; ++dr)
        for (int dc = -radius; dc <= radius; ++dc) {
          if (dr * dr + dc * dc > radius * radius) continue;
          const int rr = r + dr, cc = c + dc;
          if (rr >= 0 && cc >= 0 && rr < m.rows() && cc < m.cols()) out(rr, cc) = 1;
        }
    }
  return out;
}

inline int boundary_radius(int rows, int cols) {
  return int(std::ceil(kBoundaryTolerance * std::hypot(double(rows), double(cols))));
}

inline double mask_iou(const BinaryMask& a, const BinaryMask& b) {
  std::size_t inter = 0, uni = 0;
  auto da = a.data(), db = b.data();
  for (std::size_t i = 0; i < da.size(); ++i) {
    inter += (da[i] && db[i]);
    uni += (da[i] || db[i]);
  }
  return uni == 0 ? 1.0 : double(inter) / double(uni);
}

inline double boundary_f(const BinaryMask& pred, const BinaryMask& gt) {
  const auto pb = boundary_map(pred), gb = boundary_map(gt);
  std::size_t np = 0, ng = 0;
  for (auto v : pb.data()) np += v;
  for (auto v : gb.data()) ng += v;
  if (np == 0 && ng == 0) return 1.0;
  if (np == 0 || ng == 0) return 0.0;
  const int radius = boundary_radius(pred.rows(), pred.cols());
  const auto gd = dilate_disk(gb, radius), pd = dilate_disk(pb, radius);
  std::size_t hit_p = 0, hit_g = 0;
  for (std::size_t i = 0; i < pb.size(); ++i) {
    hit_p += (pb.data()[i] && gd.data()[i]);
    hit_g += (gb.data()[i] && pd.data()[i]);
  }
  const double precision = double(hit_p) / double(np), recall = double(hit_g) / double(ng);
  return precision + recall == 0 ? 0.0 : 2 * precision * recall / (precision + recall);
}

struct VosScores {
  double J = 0, F = 0, G = 0;
  std::vector<double> per_object_j, per_object_f;
};

/// Objects are 1..max(num_objects of gt); frames where an object is absent in
/// the ground truth are scored against background.
inline VosScores eval_vos(const std::vector<LabelMap>& pred, const std::vector<LabelMap>& gt) {
  if (pred.size() != gt.size()) throw Error(Errc::LengthMismatch, "prediction and ground truth lengths differ");
  int n = 0;
  for (const auto& g : gt) n = std::max(n, g.num_objects);
  VosScores s;
  if (gt.empty() || n == 0) return s;
  for (std::size_t t = 0; t < gt.size(); ++t)
    if (pred[t].rows() != gt[t].rows() || pred[t].cols() != gt[t].cols())
      throw Error(Errc::ShapeMismatch, "label map sizes differ", long(t));
  for (int k = 1; k <= n; ++k) {
    double j = 0, f = 0;
    for (std::size_t t = 0; t < gt.size(); ++t) {
      const auto pm = pred[t].object_mask(k), gm = gt[t].object_mask(k);
      j += mask_iou(pm, gm);
      f += boundary_f(pm, gm);
    }
    s.per_object_j.push_back(j / double(gt.size()));
    s.per_object_f.push_back(f / double(gt.size()));
  }
  for (std::size_t k = 0; k < s.per_object_j.size(); ++k) {
    s.J += s.per_object_j[k];
    s.F += s.per_object_f[k];
  }
  s.J /= double(n);
  s.F /= double(n);
  s.G = 0.5 * (s.J + s.F);
  return s;
}

struct SequenceReport {
  std::string name;
  VotScores vot;
  VosScores vos;
  double consistency = 0;
};

/// Per-sequence and aggregate scores; aggregates are means over sequences so
/// they do not depend on sequence order.
struct MetricsReport {
  std::string task;  // "vot" or "vos"
  std::vector<SequenceReport> sequences;
  double auc = 0, precision = 0, norm_precision = 0, J = 0, F = 0, G = 0, consistency = 0;

  void aggregate() {
    auc = precision = norm_precision = J = F = G = consistency = 0;
    if (sequences.empty()) return;
    for (const auto& s : sequences) {
      auc += s.vot.auc;
      precision += s.vot.precision;
      norm_precision += s.vot.norm_precision;
      J += s.vos.J;
      F += s.vos.F;
      G += s.vos.G;
      consistency += s.consistency;
    }
    const double n = double(sequences.size());
    auc /= n;
    precision /= n;
    norm_precision /= n;
    J /= n;
    F /= n;
    G /= n;
    consistency /= n;
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["task"] = task;
    auto put = [&](nlohmann::ordered_json& o, const VotScores& v, const VosScores& m, double c) {
      if (task != "vos") {
        o["auc"] = v.auc;
        o["precision"] = v.precision;
        o["norm_precision"] = v.norm_precision;
      }
      if (task != "vot") {
        o["J"] = m.J;
        o["F"] = m.F;
        o["G"] = m.G;
      }
      o["consistency"] = c;
    };
    VotScores v{auc, precision, norm_precision, 0};
    VosScores m;
    m.J = J;
    m.F = F;
    m.G = G;
    nlohmann::ordered_json agg;
    put(agg, v, m, consistency);
    j["aggregate"] = agg;
    j["sequences"] = nlohmann::ordered_json::array();
    for (const auto& s : sequences) {
      nlohmann::ordered_json o;
      o["name"] = s.name;
      put(o, s.vot, s.vos, s.consistency);
      j["sequences"].push_back(o);
    }
    return j;
  }

  void save(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw Error(Errc::IoError, "cannot write " + path);
    f << to_json().dump(2) << "\n";
  }
};

/// Mean of the per-track VOT scores over the objects of one sequence.
/// pred[k][t] / gt[k][t]: object k at frame t.
inline VotScores eval_vot_objects(const std::vector<std::vector<MaybeBox>>& pred,
                                  const std::vector<std::vector<MaybeBox>>& gt) {
  if (pred.size() != gt.size()) throw Error(Errc::LengthMismatch, "object counts differ");
  VotScores out;
  int used = 0;
  for (std::size_t k = 0; k < gt.size(); ++k) {
    auto s = eval_vot(pred[k], gt[k]);
    if (s.frames == 0) continue;
    out.auc += s.auc;
    out.precision += s.precision;
    out.norm_precision += s.norm_precision;
    out.frames += s.frames;
    ++used;
  }
  if (used) {
    out.auc /= used;
    out.precision /= used;
    out.norm_precision /= used;
  }
  return out;
}

/// Frame-major boxes (frames x objects) to object-major tracks.
inline std::vector<std::vector<MaybeBox>> transpose_boxes(const std::vector<std::vector<MaybeBox>>& frames,
                                                          int num_objects) {
  std::vector<std::vector<MaybeBox>> out(num_objects, std::vector<MaybeBox>(frames.size()));
  for (std::size_t t = 0; t < frames.size(); ++t)
    for (int k = 0; k < num_objects && k < int(frames[t].size()); ++k) out[k][t] = frames[t][k];
  return out;
}

}  // namespace mits
