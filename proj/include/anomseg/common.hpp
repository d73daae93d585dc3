#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace anomseg {

// Error taxonomy. CLI maps ConfigError -> exit 1, everything else -> exit 2.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};
struct GenerationError : std::runtime_error {
  explicit GenerationError(const std::string& msg) : std::runtime_error(msg) {}
};
struct ContractViolation : std::logic_error {
  explicit ContractViolation(const std::string& msg) : std::logic_error(msg) {}
};
struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};
struct MetricError : std::runtime_error {
  explicit MetricError(const std::string& msg) : std::runtime_error(msg) {}
};
struct TrainingError : std::runtime_error {
  explicit TrainingError(const std::string& msg) : std::runtime_error(msg) {}
};

enum class Domain : uint8_t { V = 0, A = 1 };

inline const char* domain_name(Domain d) { return d == Domain::V ? "V" : "A"; }

// Pixel address within a batch: image slot + coordinates.
struct PixelRef {
  int n = 0;
  int y = 0;
  int x = 0;
  bool operator==(const PixelRef&) const = default;
};

// Ground-truth label encoding used throughout.
constexpr uint8_t kLabelNormal = 0;
constexpr uint8_t kLabelAnomaly = 1;
constexpr uint8_t kLabelIgnore = 255;

std::string fmt_g17(double v);

}  // namespace anomseg
