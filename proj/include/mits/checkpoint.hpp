#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <string>

#include "mits/config.hpp"
#include "mits/error.hpp"
#include "mits/model.hpp"

namespace mits {

inline constexpr int kCheckpointFormat = 1;

struct CheckpointManifest {
  int format_version = kCheckpointFormat;
  int64_t step = 0;
  Config config;
};

/// Archive layout: "manifest" (JSON text), "step", "model" and, when present,
/// "optimizer" sub-archives.
inline void save_checkpoint(const std::string& path, TrackerModel& model, torch::optim::Optimizer* optimizer,
                            const CheckpointManifest& manifest) {
  torch::serialize::OutputArchive archive;
  json j{{"format_version", manifest.format_version}, {"step", manifest.step}, {"config", to_json_value(manifest.config)}};
  archive.write("manifest", c10::IValue(j.dump()));
  archive.write("step", c10::IValue(manifest.step));
  torch::serialize::OutputArchive m;
  model->save(m);
  archive.write("model", m);
  if (optimizer) {
    torch::serialize::OutputArchive o;
    optimizer->save(o);
    archive.write("optimizer", o);
  }
  try {
    archive.save_to(path);
  } catch (const c10::Error& e) {
    throw Error(Errc::IoError, "cannot write checkpoint " + path + ": " + e.what_without_backtrace());
  }
}

struct LoadedCheckpoint {
  CheckpointManifest manifest;
  TrackerModel model{nullptr};
  bool has_optimizer = false;
  torch::serialize::InputArchive optimizer_archive;
};

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
  LoadedCheckpoint out;
  torch::serialize::InputArchive archive;
  try {
    archive.load_from(path);
  } catch (const c10::Error& e) {
    throw Error(Errc::IoError, "cannot read checkpoint " + path + ": " + e.what_without_backtrace());
  }
  c10::IValue text;
  if (!archive.try_read("manifest", text) || !text.isString())
    throw Error(Errc::ParseError, "checkpoint has no manifest");
  json j;
  try {
    j = json::parse(text.toStringRef());
  } catch (const json::exception& e) {
    throw Error(Errc::ParseError, std::string("bad checkpoint manifest: ") + e.what());
  }
  out.manifest.format_version = j.at("format_version").get<int>();
  if (out.manifest.format_version != kCheckpointFormat)
    throw Error(Errc::ParseError, "unsupported checkpoint format " + std::to_string(out.manifest.format_version));
  out.manifest.step = j.at("step").get<int64_t>();
  out.manifest.config = config_from_json(j.at("config"));
  out.model = TrackerModel(out.manifest.config);
  torch::serialize::InputArchive m;
  archive.read("model", m);
  out.model->load(m);
  out.has_optimizer = archive.try_read("optimizer", out.optimizer_archive);
  return out;
}

}  // namespace mits
