#pragma once

#include <string>

#include "pwml/volume.hpp"

namespace pwml {

/// Minimal NIfTI-1 I/O: single-file .nii or .nii.gz, 3D, FLOAT32 or UINT8,
/// little-endian. The gzip wrapper is written with a zeroed timestamp so the
/// same volume always produces the same bytes.
void write_volume(const VolumeF& v, const std::string& path);
void write_volume(const VolumeU8& v, const std::string& path);

template <typename T>
Volume<T> read_volume(const std::string& path);

extern template Volume<float> read_volume<float>(const std::string&);
extern template Volume<std::uint8_t> read_volume<std::uint8_t>(const std::string&);

}  // namespace pwml
