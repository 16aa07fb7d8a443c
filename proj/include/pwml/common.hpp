#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace pwml {

using Index3 = std::array<int, 3>;
using Spacing3 = std::array<double, 3>;

/// Invalid configuration (bad shapes, missing fields, unsatisfiable settings).
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

/// Malformed operand passed to an operation (shape mismatch, non-binary mask, ...).
class ValidationError : public std::runtime_error {
 public:
  explicit ValidationError(const std::string& what) : std::runtime_error(what) {}
};

/// Corrupt or unsupported file content.
class FormatError : public std::runtime_error {
 public:
  explicit FormatError(const std::string& what) : std::runtime_error(what) {}
};

/// Filesystem-level failure (unreadable/unwritable path).
class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

/// A training stage was requested before its prerequisites exist.
class StagingError : public std::runtime_error {
 public:
  explicit StagingError(const std::string& what) : std::runtime_error(what) {}
};

/// Training diverged or hit a non-finite loss.
class TrainingError : public std::runtime_error {
 public:
  explicit TrainingError(const std::string& what) : std::runtime_error(what) {}
};

/// Infeasible patch-sampling request (e.g. positives from a lesion-free subject).
class SamplingError : public std::runtime_error {
 public:
  explicit SamplingError(const std::string& what) : std::runtime_error(what) {}
};

/// FNV-1a over raw bytes; stable across runs, used for determinism checks.
inline std::uint64_t fnv1a(const void* data, std::size_t n,
                           std::uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace pwml
