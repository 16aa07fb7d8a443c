#pragma once

#include <map>
#include <string>
#include <vector>

#include "pwml/phantom.hpp"
#include "pwml/tensor.hpp"
#include "pwml/volume.hpp"

namespace pwml {

constexpr int kPatchSize = 32;

enum class PatchLabel { positive, negative, unlabeled };

/// Aligned cubic crops of one or more channels plus their source coordinate.
/// Channel names are drawn from {t1, sp0..sp3, cf, lesion, tissue}.
struct Patch {
  std::map<std::string, Eigen::ArrayXf> data;
  Index3 origin{0, 0, 0};
  PatchLabel label = PatchLabel::unlabeled;

  const Eigen::ArrayXf& channel(const std::string& name) const;
  bool has_channel(const std::string& name) const { return data.count(name) != 0; }
};

struct SlidingWindowPlan {
  Index3 volume_shape{0, 0, 0};
  int patch_size = kPatchSize;
  int stride = 16;
  std::vector<Index3> origins;

  std::string to_json() const;
};

/// positive iff the crop holds at least one lesion voxel. Input must be binary.
PatchLabel label_patch(const Eigen::ArrayXf& lesion_crop);

/// Exactly n_pos positive and n_neg negative patches when feasible. Positive
/// patches are centred near a lesion component with a small jitter; negative
/// patches are rejection-sampled lesion-free crops containing some brain.
/// Channels: t1, lesion, tissue. Deterministic under seed.
std::vector<Patch> sample_training_patches(const PhantomSubject& subject, int n_pos, int n_neg,
                                           std::uint64_t seed);

/// Regular grid with the final window per axis clamped to the boundary, so
/// every voxel is covered at least once.
SlidingWindowPlan plan_sliding_window(Index3 volume_shape, int patch_size = kPatchSize,
                                      int stride = 16);

struct Reconstruction {
  VolumeF mean;       // per-voxel average of contributions; 0 where uncovered
  VolumeI32 coverage; // number of windows covering each voxel
};

/// Overlap-average window values back into a full volume.
Reconstruction reconstruct_average(
    const std::vector<std::pair<Index3, Eigen::ArrayXf>>& patch_values, Index3 volume_shape,
    int patch_size = kPatchSize);

/// Which auxiliary channels join the raw image for lesion segmentation.
/// Canonical labels follow the sp, cf, t1 order: "sp+cf+t1".
struct FusionSet {
  bool t1 = false;
  bool sp = false;  // the four tissue-probability channels
  bool cf = false;

  int channels() const { return (t1 ? 1 : 0) + (sp ? 4 : 0) + (cf ? 1 : 0); }
  std::string label() const;
  static FusionSet parse(const std::string& s);  // ConfigError on unknown tokens
  bool operator==(const FusionSet&) const = default;
};

/// Stack the selected channels into a network input, ordered t1 (divided by
/// intensity_scale), sp0..sp3, cf. Missing channels raise ValidationError.
Tensor fused_input(const Patch& patch, const FusionSet& fusion, double intensity_scale);

}  // namespace pwml
