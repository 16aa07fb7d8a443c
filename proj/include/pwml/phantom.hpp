#pragma once

#include <map>
#include <string>
#include <vector>

#include "pwml/volume.hpp"

namespace pwml {

enum class Tissue : std::uint8_t { background = 0, csf = 1, gm = 2, wm = 3 };

enum class Group { control, pwml };

std::string to_string(Group g);
Group group_from_string(const std::string& s);

/// Settings for the synthetic infant-brain generator. Geometry is a set of
/// concentric, smoothly deformed ellipsoids: an outer CSF shell, a GM ribbon,
/// a WM interior and a central CSF ventricle core. Lesions are small bright
/// blobs planted in WM near the ventricle.
struct PhantomConfig {
  Index3 volume_shape{130, 130, 170};
  Spacing3 voxel_spacing{0.9375, 0.9375, 1.0};
  std::array<int, 2> lesion_count_range{3, 8};
  std::array<int, 2> lesion_size_range{3, 40};  // voxels per connected component
  std::map<std::string, double> intensity_means{
      {"background", 20.0}, {"csf", 150.0}, {"gm", 500.0}, {"wm", 400.0}, {"lesion", 620.0}};
  double intensity_noise_sigma = 25.0;
  double deformation_amplitude = 0.06;   // relative boundary perturbation
  double bias_amplitude = 0.08;          // multiplicative bias field strength
  int lesion_max_csf_distance = 10;      // max voxel distance from the ventricle core
  std::uint64_t rng_seed = 0;

  void validate() const;  // throws ConfigError
};

struct PhantomSubject {
  VolumeF t1;
  VolumeU8 tissue;   // Tissue labels
  VolumeU8 lesions;  // binary
  std::string subject_id;
  Group group = Group::control;
};

/// Deterministic for fixed (config, group, seed).
PhantomSubject generate_subject(const PhantomConfig& config, Group group, std::uint64_t seed);

/// Per-subject seeds are derived from the cohort seed; ids are unique.
std::vector<PhantomSubject> generate_cohort(const PhantomConfig& config, int n_control,
                                            int n_pwml, std::uint64_t seed);

/// Subject seed used by generate_cohort for entry `index` of `group`.
std::uint64_t cohort_subject_seed(std::uint64_t cohort_seed, Group group, int index);

}  // namespace pwml
