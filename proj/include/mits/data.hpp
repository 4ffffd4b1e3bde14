#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "mits/config.hpp"
#include "mits/error.hpp"
#include "mits/geometry.hpp"
#include "mits/png_io.hpp"

namespace mits {

/// A video clip with ground truth in both formats. `boxes[t][k]` and
/// `presence[t][k]` refer to object k+1 at frame t.
struct SequenceSample {
  std::string name;
  std::vector<Image> frames;
  std::vector<LabelMap> labels;
  std::vector<std::vector<MaybeBox>> boxes;
  std::vector<std::vector<bool>> presence;

  int length() const { return int(frames.size()); }
  int num_objects() const { return labels.empty() ? 0 : labels.front().num_objects; }
};

/// Fills boxes/presence from the label maps.
inline void derive_boxes(SequenceSample& s) {
  s.boxes.clear();
  s.presence.clear();
  for (const auto& lm : s.labels) {
    auto b = label_boxes(lm);
    std::vector<bool> p(b.size());
    for (std::size_t k = 0; k < b.size(); ++k) p[k] = b[k].has_value();
    s.boxes.push_back(std::move(b));
    s.presence.push_back(std::move(p));
  }
}

namespace detail {

enum class Shape { Rectangle, Ellipse, Plus, L };

inline Shape parse_shape(const std::string& s) {
  if (s == "rectangle") return Shape::Rectangle;
  if (s == "ellipse") return Shape::Ellipse;
  if (s == "plus") return Shape::Plus;
  if (s == "L") return Shape::L;
  throw Error(Errc::ConfigError, "unknown shape " + s);
}

struct Appearance {
  std::array<float, 3> color{};
  std::array<float, 3> stripe{};
  double stripe_period = 6;
  double stripe_angle = 0;
};

struct Sprite {
  Shape shape = Shape::Rectangle;
  int w = 0, h = 0;
  double x = 0, y = 0, vx = 0, vy = 0;
  Appearance look;
  int label = 0;  // 0 for distractors and occluders
};

inline bool covers(const Sprite& s, int r, int c) {
  const int x0 = int(std::lround(s.x)), y0 = int(std::lround(s.y));
  if (c < x0 || c >= x0 + s.w || r < y0 || r >= y0 + s.h) return false;
  const double u = (c - x0 + 0.5) / s.w, v = (r - y0 + 0.5) / s.h;
  switch (s.shape) {
    case Shape::Rectangle: return true;
    case Shape::Ellipse: return (u - 0.5) * (u - 0.5) + (v - 0.5) * (v - 0.5) <= 0.25;
    case Shape::Plus: return std::abs(u - 0.5) < 1.0 / 6 || std::abs(v - 0.5) < 1.0 / 6;
    case Shape::L: return u < 0.4 || v > 0.6;
  }
  return false;
}

inline void advance(Sprite& s, int width, int height) {
  s.x += s.vx;
  s.y += s.vy;
  const double xmax = width - s.w, ymax = height - s.h;
  if (s.x < 0) s.x = -s.x, s.vx = -s.vx;
  if (s.x > xmax) s.x = 2 * xmax - s.x, s.vx = -s.vx;
  if (s.y < 0) s.y = -s.y, s.vy = -s.vy;
  if (s.y > ymax) s.y = 2 * ymax - s.y, s.vy = -s.vy;
  s.x = std::clamp(s.x, 0.0, xmax);
  s.y = std::clamp(s.y, 0.0, ymax);
}

inline std::array<float, 3> hsv(double h, double s, double v) {
  const double c = v * s, hp = std::fmod(h, 1.0) * 6, x = c * (1 - std::abs(std::fmod(hp, 2.0) - 1));
  double r = 0, g = 0, b = 0;
  if (hp < 1) r = c, g = x;
  else if (hp < 2) r = x, g = c;
  else if (hp < 3) g = c, b = x;
  else if (hp < 4) g = x, b = c;
  else if (hp < 5) r = x, b = c;
  else r = c, b = x;
  const double m = v - c;
  return {float(r + m), float(g + m), float(b + m)};
}

inline float quantize(float v) { return float(to_byte(v)) / 255.f; }

}  // namespace detail

/// Deterministic multi-object moving-shapes clip. Rendering uses strict depth
/// order; nearer sprites overwrite both colour and label.
inline SequenceSample generate_sequence(const SynthConfig& cfg) {
  using namespace detail;
  if (cfg.height <= 0 || cfg.width <= 0 || cfg.length <= 0 || cfg.min_objects < 1 ||
      cfg.max_objects < cfg.min_objects || cfg.shapes.empty() || cfg.min_size < 2 || cfg.max_size < cfg.min_size ||
      cfg.max_size >= std::min(cfg.height, cfg.width) || cfg.max_objects > 254)
    throw Error(Errc::ConfigError, "invalid synthetic config");
  std::vector<Shape> shapes;
  for (const auto& s : cfg.shapes) shapes.push_back(parse_shape(s));

  std::mt19937_64 rng(cfg.seed);
  auto uni = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  auto pick = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };

  const int n = pick(cfg.min_objects, cfg.max_objects);
  const double hue0 = uni(0, 1);
  const auto bg_a = hsv(uni(0, 1), uni(0.0, 0.3), uni(0.25, 0.55));
  const auto bg_b = hsv(uni(0, 1), uni(0.0, 0.3), uni(0.25, 0.55));
  const double bg_freq = uni(0.02, 0.08), bg_phase = uni(0, 6.283);

  auto make_sprite = [&](int label, const Appearance& look, int min_size, int max_size) {
    Sprite s;
    s.shape = shapes[pick(0, int(shapes.size()) - 1)];
    s.w = pick(min_size, max_size);
    s.h = pick(min_size, max_size);
    s.x = uni(0, cfg.width - s.w);
    s.y = uni(0, cfg.height - s.h);
    s.vx = cfg.max_speed > 0 ? uni(-cfg.max_speed, cfg.max_speed) : 0.0;
    s.vy = cfg.max_speed > 0 ? uni(-cfg.max_speed, cfg.max_speed) : 0.0;
    s.look = look;
    s.label = label;
    return s;
  };

  std::vector<Sprite> sprites;
  for (int k = 0; k < n; ++k) {
    Appearance look;
    const double hue = hue0 + double(k) / n + uni(-0.05, 0.05);
    look.color = hsv(hue, uni(0.6, 1.0), uni(0.7, 1.0));
    look.stripe = hsv(hue + 0.5, uni(0.3, 0.8), uni(0.3, 0.9));
    look.stripe_period = uni(4, 10);
    look.stripe_angle = uni(0, 3.1416);
    sprites.push_back(make_sprite(k + 1, look, cfg.min_size, cfg.max_size));
  }
  if (uni(0, 1) < cfg.distractor_probability) {
    const Sprite& twin = sprites[pick(0, n - 1)];
    Sprite d = make_sprite(0, twin.look, cfg.min_size, cfg.max_size);
    d.shape = twin.shape;
    d.w = twin.w;
    d.h = twin.h;
    sprites.push_back(d);
  }
  if (uni(0, 1) < cfg.occlusion_probability) {
    Appearance look;
    look.color = hsv(uni(0, 1), uni(0.0, 0.2), uni(0.6, 0.9));
    look.stripe = look.color;
    const int big = std::min(std::min(cfg.height, cfg.width) - 1, int(cfg.max_size * 1.5));
    Sprite occ = make_sprite(0, look, std::max(cfg.min_size, big / 2), big);
    occ.shape = Shape::Rectangle;
    const double speed = std::max(cfg.max_speed, 1.0) * 1.5;
    occ.vx = cfg.max_speed > 0 ? (uni(0, 1) < 0.5 ? -speed : speed) : 0.0;
    sprites.push_back(occ);
  }
  // Depth order: index 0 is farthest.
  std::shuffle(sprites.begin(), sprites.end(), rng);

  SequenceSample out;
  out.name = "synth_" + std::to_string(cfg.seed);
  for (int t = 0; t < cfg.length; ++t) {
    Image img(cfg.height, cfg.width);
    LabelMap lm(cfg.height, cfg.width, n);
    for (int r = 0; r < cfg.height; ++r)
      for (int c = 0; c < cfg.width; ++c) {
        const double wgt = 0.5 + 0.5 * std::sin(bg_freq * (r + 0.7 * c) + bg_phase);
        for (int ch = 0; ch < 3; ++ch) img.at(r, c, ch) = float(wgt * bg_a[ch] + (1 - wgt) * bg_b[ch]);
      }
    for (const auto& s : sprites) {
      const int x0 = int(std::lround(s.x)), y0 = int(std::lround(s.y));
      const double ca = std::cos(s.look.stripe_angle), sa = std::sin(s.look.stripe_angle);
      for (int r = std::max(0, y0); r < std::min(cfg.height, y0 + s.h); ++r)
        for (int c = std::max(0, x0); c < std::min(cfg.width, x0 + s.w); ++c) {
          if (!covers(s, r, c)) continue;
          const double phase = ((c - x0) * ca + (r - y0) * sa) / s.look.stripe_period;
          const bool stripe = (phase - std::floor(phase)) < 0.3;
          for (int ch = 0; ch < 3; ++ch) img.at(r, c, ch) = stripe ? s.look.stripe[ch] : s.look.color[ch];
          lm(r, c) = std::uint8_t(s.label);
        }
    }
    for (auto& v : img.rgb) v = quantize(v);
    out.frames.push_back(std::move(img));
    out.labels.push_back(std::move(lm));
    for (auto& s : sprites) advance(s, cfg.width, cfg.height);
  }
  derive_boxes(out);
  return out;
}

inline SynthConfig load_synth_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::ConfigError, "cannot open " + path);
  try {
    json j;
    in >> j;
    return j.get<SynthConfig>();
  } catch (const json::exception& e) {
    throw Error(Errc::ConfigError, e.what());
  }
}

// ---------------------------------------------------------------------------
// Box files: one line per frame, "x,y,w,h" per object, "nan,nan,nan,nan" for
// an absent object. x,y is the top-left corner; x2 = x + w, y2 = y + h.

inline std::string format_number(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline std::vector<std::vector<MaybeBox>> parse_box_text(const std::string& text) {
  std::vector<std::vector<MaybeBox>> frames;
  std::istringstream in(text);
  std::string line;
  long lineno = 0;
  std::size_t width = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    std::vector<double> vals;
    std::stringstream fields(line);
    std::string tok;
    while (std::getline(fields, tok, ',')) {
      const auto b = tok.find_first_not_of(" \t"), e = tok.find_last_not_of(" \t");
      if (b == std::string::npos) throw Error(Errc::ParseError, "empty field", lineno);
      tok = tok.substr(b, e - b + 1);
      if (tok == "nan" || tok == "NaN" || tok == "NAN") {
        vals.push_back(std::numeric_limits<double>::quiet_NaN());
        continue;
      }
      double v = 0;
      auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
      if (res.ec != std::errc() || res.ptr != tok.data() + tok.size())
        throw Error(Errc::ParseError, "bad number '" + tok + "'", lineno);
      vals.push_back(v);
    }
    if (vals.empty() || vals.size() % 4 != 0) throw Error(Errc::ParseError, "expected x,y,w,h groups", lineno);
    if (width == 0) width = vals.size();
    if (vals.size() != width) throw Error(Errc::ParseError, "object count differs from first line", lineno);
    std::vector<MaybeBox> row;
    for (std::size_t i = 0; i < vals.size(); i += 4) {
      const int nans = std::isnan(vals[i]) + std::isnan(vals[i + 1]) + std::isnan(vals[i + 2]) + std::isnan(vals[i + 3]);
      if (nans == 4) {
        row.push_back(std::nullopt);
        continue;
      }
      if (nans != 0 || vals[i + 2] < 0 || vals[i + 3] < 0) throw Error(Errc::ParseError, "invalid box", lineno);
      row.push_back(Box{vals[i], vals[i + 1], vals[i] + vals[i + 2], vals[i + 1] + vals[i + 3]});
    }
    frames.push_back(std::move(row));
  }
  return frames;
}

inline std::vector<std::vector<MaybeBox>> load_box_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::IoError, "cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_box_text(ss.str());
}

inline std::string format_box_text(const std::vector<std::vector<MaybeBox>>& boxes) {
  std::string out;
  for (const auto& row : boxes) {
    for (std::size_t k = 0; k < row.size(); ++k) {
      if (k) out += ',';
      if (!row[k]) {
        out += "nan,nan,nan,nan";
        continue;
      }
      const Box& b = *row[k];
      out += format_number(b.x1) + ',' + format_number(b.y1) + ',' + format_number(b.x2 - b.x1) + ',' +
             format_number(b.y2 - b.y1);
    }
    out += '\n';
  }
  return out;
}

inline void write_box_file(const std::string& path, const std::vector<std::vector<MaybeBox>>& boxes) {
  std::ofstream out(path);
  if (!out) throw Error(Errc::IoError, "cannot write " + path);
  out << format_box_text(boxes);
}

// ---------------------------------------------------------------------------
// Mask folders: <seq>/frames/%05d.png (RGB), <seq>/masks/%05d.png (indexed),
// <seq>/boxes.txt.

inline std::string frame_filename(int t) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%05d.png", t);
  return buf;
}

inline void write_mask_folder(const std::filesystem::path& dir, const SequenceSample& s) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "frames");
  fs::create_directories(dir / "masks");
  for (int t = 0; t < s.length(); ++t) {
    write_png_rgb((dir / "frames" / frame_filename(t)).string(), s.frames[t]);
    write_png_indexed((dir / "masks" / frame_filename(t)).string(), s.labels[t].grid);
  }
  write_box_file((dir / "boxes.txt").string(), s.boxes);
}

inline SequenceSample load_mask_folder(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir / "frames")) throw Error(Errc::IoError, "no frames/ under " + dir.string());
  std::vector<fs::path> frames;
  for (const auto& e : fs::directory_iterator(dir / "frames"))
    if (e.path().extension() == ".png") frames.push_back(e.path());
  std::sort(frames.begin(), frames.end());
  SequenceSample s;
  s.name = dir.filename().string();
  std::optional<Palette> palette;
  int max_label = 0;
  for (std::size_t k = 0; k < frames.size(); ++k) {
    const fs::path mask_path = dir / "masks" / frames[k].filename();
    if (!fs::exists(mask_path))
      throw Error(Errc::MissingFrame, "no mask for frame " + std::to_string(k), long(k));
    s.frames.push_back(read_png_rgb(frames[k].string()));
    auto png = read_png_indexed(mask_path.string());
    if (!palette) palette = png.palette;
    const std::size_t common = std::min(palette->size(), png.palette.size());
    if (!std::equal(palette->begin(), palette->begin() + common, png.palette.begin()))
      throw Error(Errc::PaletteMismatch, mask_path.string() + " palette differs from first mask");
    if (png.indices.rows() != s.frames.back().height || png.indices.cols() != s.frames.back().width)
      throw Error(Errc::ShapeMismatch, "mask and frame size differ at frame " + std::to_string(k));
    LabelMap lm;
    lm.grid = std::move(png.indices);
    for (auto v : lm.grid.data()) max_label = std::max(max_label, int(v));
    s.labels.push_back(std::move(lm));
  }
  if (s.frames.empty()) throw Error(Errc::MissingFrame, "no frames in " + dir.string(), 0L);
  for (auto& lm : s.labels) lm.num_objects = max_label;
  derive_boxes(s);
  return s;
}

}  // namespace mits
