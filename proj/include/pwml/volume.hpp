#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <utility>
#include <vector>

#include "pwml/common.hpp"

namespace pwml {

/// Dense 3D scalar field with voxel spacing. Storage is a flat Eigen array in
/// x-fastest order: index = x + nx*(y + ny*z).
template <typename T>
class Volume {
 public:
  using Storage = Eigen::Array<T, Eigen::Dynamic, 1>;

  Volume() = default;
  Volume(Index3 shape, Spacing3 spacing, T fill = T{})
      : shape_(shape), spacing_(spacing) {
    if (shape[0] <= 0 || shape[1] <= 0 || shape[2] <= 0)
      throw ValidationError("Volume: non-positive shape");
    data_ = Storage::Constant(static_cast<Eigen::Index>(shape[0]) * shape[1] * shape[2], fill);
  }
  explicit Volume(Index3 shape, T fill = T{}) : Volume(shape, {1.0, 1.0, 1.0}, fill) {}

  const Index3& shape() const { return shape_; }
  const Spacing3& spacing() const { return spacing_; }
  void set_spacing(const Spacing3& s) { spacing_ = s; }

  int nx() const { return shape_[0]; }
  int ny() const { return shape_[1]; }
  int nz() const { return shape_[2]; }
  Eigen::Index size() const { return data_.size(); }

  Eigen::Index index(int x, int y, int z) const {
    return x + static_cast<Eigen::Index>(shape_[0]) * (y + static_cast<Eigen::Index>(shape_[1]) * z);
  }

  T& operator()(int x, int y, int z) { return data_[index(x, y, z)]; }
  const T& operator()(int x, int y, int z) const { return data_[index(x, y, z)]; }
  T& operator[](Eigen::Index i) { return data_[i]; }
  const T& operator[](Eigen::Index i) const { return data_[i]; }

  Storage& data() { return data_; }
  const Storage& data() const { return data_; }

  bool same_grid(const Volume& other) const {
    return shape_ == other.shape_ && spacing_ == other.spacing_;
  }

 private:
  Index3 shape_{0, 0, 0};
  Spacing3 spacing_{1.0, 1.0, 1.0};
  Storage data_;
};

using VolumeF = Volume<float>;
using VolumeU8 = Volume<std::uint8_t>;
using VolumeI32 = Volume<std::int32_t>;

/// Copy a cubic region of side n starting at origin (must be in bounds).
template <typename T>
Eigen::Array<T, Eigen::Dynamic, 1> crop_cube(const Volume<T>& v, Index3 origin, int n) {
  for (int a = 0; a < 3; ++a) {
    if (origin[a] < 0 || origin[a] + n > v.shape()[a])
      throw ValidationError("crop_cube: region out of bounds");
  }
  Eigen::Array<T, Eigen::Dynamic, 1> out(static_cast<Eigen::Index>(n) * n * n);
  Eigen::Index k = 0;
  for (int z = 0; z < n; ++z)
    for (int y = 0; y < n; ++y) {
      const T* src = &v(origin[0], origin[1] + y, origin[2] + z);
      for (int x = 0; x < n; ++x) out[k++] = src[x];
    }
  return out;
}

/// Number of 26-connected components among nonzero voxels.
int count_components(const VolumeU8& mask);

/// Component sizes (voxel counts) of the nonzero set, 26-connectivity.
std::vector<int> component_sizes(const VolumeU8& mask);

}  // namespace pwml
