#pragma once

#include <optional>
#include <stdexcept>
#include <string>

namespace mits {

enum class Errc {
  EmptyMask,
  EmptySide,
  ShapeError,
  ShapeMismatch,
  UnassignedLabel,
  InvokedAtInference,
  EmptyMemory,
  LabelOutOfRange,
  ConfigError,
  MissingFrame,
  PaletteMismatch,
  ParseError,
  DataSourceEmpty,
  NonFiniteLoss,
  InitFormatMismatch,
  LengthMismatch,
  IoError,
};

inline const char* errc_name(Errc code) {
  switch (code) {
    case Errc::EmptyMask: return "EmptyMask";
    case Errc::EmptySide: return "EmptySide";
    case Errc::ShapeError: return "ShapeError";
    case Errc::ShapeMismatch: return "ShapeMismatch";
    case Errc::UnassignedLabel: return "UnassignedLabel";
    case Errc::InvokedAtInference: return "InvokedAtInference";
    case Errc::EmptyMemory: return "EmptyMemory";
    case Errc::LabelOutOfRange: return "LabelOutOfRange";
    case Errc::ConfigError: return "ConfigError";
    case Errc::MissingFrame: return "MissingFrame";
    case Errc::PaletteMismatch: return "PaletteMismatch";
    case Errc::ParseError: return "ParseError";
    case Errc::DataSourceEmpty: return "DataSourceEmpty";
    case Errc::NonFiniteLoss: return "NonFiniteLoss";
    case Errc::InitFormatMismatch: return "InitFormatMismatch";
    case Errc::LengthMismatch: return "LengthMismatch";
    case Errc::IoError: return "IoError";
  }
  return "Unknown";
}

/// Every failure raised by the library. `index()` carries the frame number
/// (MissingFrame) or 1-based line number (ParseError) when one applies.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what, std::optional<long> index = std::nullopt)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code), index_(index) {}

  Errc code() const noexcept { return code_; }
  std::optional<long> index() const noexcept { return index_; }

 private:
  Errc code_;
  std::optional<long> index_;
};

}  // namespace mits
