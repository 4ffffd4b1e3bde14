#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mits/error.hpp"

namespace mits {

using json = nlohmann::json;

enum class BoxHeadKind { Pinpoint, PinpointImplicit, Corner };
enum class LocalizerKind { Transformer, Fpn };
enum class InitFormat { Mask, Box };

NLOHMANN_JSON_SERIALIZE_ENUM(BoxHeadKind, {{BoxHeadKind::Pinpoint, "pinpoint"},
                                           {BoxHeadKind::PinpointImplicit, "pinpoint-implicit"},
                                           {BoxHeadKind::Corner, "corner"}})
NLOHMANN_JSON_SERIALIZE_ENUM(LocalizerKind, {{LocalizerKind::Transformer, "transformer"}, {LocalizerKind::Fpn, "fpn"}})
NLOHMANN_JSON_SERIALIZE_ENUM(InitFormat, {{InitFormat::Mask, "mask"}, {InitFormat::Box, "box"}})

struct ModelConfig {
  int image_height = 128;
  int image_width = 128;
  int stride = 16;
  int channels = 64;                        // C, shared by encoder, ID bank and propagation
  std::vector<int> encoder_widths{16, 32, 48};  // stages at stride 2, 4, 8; stride 16 emits `channels`
  int decoder_channels = 32;
  int bank_capacity = 8;  // M
  int heads = 8;
  int propagation_layers = 3;
  int bidr_layers = 3;
  int box_layers = 3;
  int ffn_multiplier = 2;
  int pool_size = 7;  // per-box token grid for the BIDR object path
  bool bidr_enabled = true;
  bool bidr_dual_cross_attention = true;
  bool mask_reconstruction = true;
  BoxHeadKind box_head = BoxHeadKind::Pinpoint;
  LocalizerKind localizer = LocalizerKind::Transformer;
  double absent_mass = 0.5;  // objects with less predicted mask mass (in stride-4 cells) are Absent
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ModelConfig, image_height, image_width, stride, channels,
                                                encoder_widths, decoder_channels, bank_capacity, heads,
                                                propagation_layers, bidr_layers, box_layers, ffn_multiplier,
                                                pool_size, bidr_enabled, bidr_dual_cross_attention,
                                                mask_reconstruction, box_head, localizer, absent_mass)

struct MemoryConfig {
  int long_term_interval = 5;  // delta
  int capacity = 8;            // T_max, including reference and short-term entries
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(MemoryConfig, long_term_interval, capacity)

struct LossWeights {
  double ce = 1.0;
  double jaccard = 1.0;
  double l1 = 5.0;
  double giou = 2.0;
  double recon = 0.5;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(LossWeights, ce, jaccard, l1, giou, recon)

struct SynthConfig {
  int height = 128;
  int width = 128;
  int min_objects = 1;
  int max_objects = 4;
  std::vector<std::string> shapes{"rectangle", "ellipse", "plus", "L"};
  int min_size = 18;
  int max_size = 44;
  double max_speed = 3.0;  // pixels per frame; 0 freezes every object
  double occlusion_probability = 0.3;
  double distractor_probability = 0.5;
  int length = 24;
  std::uint64_t seed = 0;
  std::array<double, 3> pixel_mean{0.5, 0.5, 0.5};
  std::array<double, 3> pixel_std{0.25, 0.25, 0.25};
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SynthConfig, height, width, min_objects, max_objects, shapes,
                                                min_size, max_size, max_speed, occlusion_probability,
                                                distractor_probability, length, seed, pixel_mean, pixel_std)

struct TrainConfig {
  int steps = 2000;
  int batch_size = 2;
  int clip_frames = 3;  // reference + (clip_frames - 1) propagated frames
  int max_gap = 3;
  double lr = 2e-4;
  double lr_end = 1e-5;
  double lr_power = 0.9;
  double weight_decay = 0.0;
  double grad_clip = 1.0;
  double p_box = 0.3;
  double box_only_fraction = 0.0;  // clips treated as box-annotated only (mask losses off)
  int num_sequences = 0;           // 0: fresh synthetic sequence per clip; >0: fixed pool
  bool random_assignment = true;   // random injective object -> bank row map per clip; else identity
  std::uint64_t seed = 1;
  int checkpoint_every = 0;
  int log_every = 50;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainConfig, steps, batch_size, clip_frames, max_gap, lr, lr_end,
                                                lr_power, weight_decay, grad_clip, p_box, box_only_fraction,
                                                num_sequences, random_assignment, seed, checkpoint_every, log_every)

struct Config {
  ModelConfig model;
  MemoryConfig memory;
  LossWeights loss;
  SynthConfig synth;
  TrainConfig train;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(Config, model, memory, loss, synth, train)

inline void validate(const Config& cfg) {
  const auto& m = cfg.model;
  auto fail = [](const std::string& msg) { throw Error(Errc::ConfigError, msg); };
  if (m.stride != 16 || m.encoder_widths.size() != 3) fail("encoder is built for stride 16 with 3 skip widths");
  if (m.channels <= 0 || m.heads <= 0 || m.channels % m.heads != 0) fail("channels must be divisible by heads");
  if (m.channels % 4 != 0) fail("channels must be a multiple of 4 for 2-D positional encoding");
  if (m.bank_capacity < 1 || m.bank_capacity > 254) fail("bank_capacity out of range");
  if (m.image_height % m.stride || m.image_width % m.stride) fail("image size must be a multiple of stride");
  if (cfg.memory.capacity < 2 || cfg.memory.long_term_interval < 1) fail("memory capacity must be >= 2");
  const auto& s = cfg.synth;
  if (s.height <= 0 || s.width <= 0 || s.length <= 0) fail("synthetic extent must be positive");
  if (s.min_objects < 1 || s.max_objects < s.min_objects) fail("object count range invalid");
  if (s.max_objects > m.bank_capacity) fail("max_objects exceeds bank capacity");
  if (s.min_size < 2 || s.max_size < s.min_size || s.max_size >= std::min(s.height, s.width))
    fail("object size range invalid");
  if (s.shapes.empty()) fail("shape set empty");
  for (const auto& name : s.shapes)
    if (name != "rectangle" && name != "ellipse" && name != "plus" && name != "L") fail("unknown shape " + name);
  const auto& t = cfg.train;
  if (t.p_box < 0 || t.p_box > 1) fail("p_box must lie in [0,1]");
  if (t.clip_frames < 2 || t.batch_size < 1 || t.steps < 0) fail("train clip/batch invalid");
  const auto& w = cfg.loss;
  if (w.ce < 0 || w.jaccard < 0 || w.l1 < 0 || w.giou < 0 || w.recon < 0) fail("loss weights must be >= 0");
}

inline Config config_from_json(const json& j) {
  Config cfg;
  try {
    cfg = j.get<Config>();
  } catch (const json::exception& e) {
    throw Error(Errc::ConfigError, e.what());
  }
  validate(cfg);
  return cfg;
}

inline Config load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::ConfigError, "cannot open config " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw Error(Errc::ConfigError, path + ": " + e.what());
  }
  return config_from_json(j);
}

inline json to_json_value(const Config& cfg) { return json(cfg); }

}  // namespace mits
