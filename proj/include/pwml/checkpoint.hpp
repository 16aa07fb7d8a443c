#pragma once

#include <string>
#include <vector>

#include "pwml/networks.hpp"

namespace pwml {

/// FNV-1a over the raw value bytes of every parameter, in collection order.
/// Used for freeze contracts and determinism checks.
std::uint64_t parameter_hash(const std::vector<ParamRef>& params);

struct CheckpointMeta {
  std::string stage;
  NetworkSpec spec;
  std::uint64_t seed = 0;
  int epoch = 0;
};

/// Binary parameter archive plus a `<path>.json` sidecar with the stage,
/// network spec, seed and epoch.
void save_checkpoint(const std::vector<ParamRef>& params, const std::string& path,
                     const CheckpointMeta& meta);

/// Loads values into the given parameter views; names, sizes and order must
/// match the archive exactly (FormatError otherwise; IoError on missing file).
void load_checkpoint(const std::vector<ParamRef>& params, const std::string& path);

CheckpointMeta read_checkpoint_meta(const std::string& path);

}  // namespace pwml
