#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "pwml/nifti.hpp"
#include "pwml/rng.hpp"

using namespace pwml;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
  const auto dir = fs::temp_directory_path() / "pwml_nifti_test";
  fs::create_directories(dir);
  return dir;
}

std::vector<char> slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("float volume roundtrips through .nii.gz") {
  VolumeF v({7, 5, 3}, {0.9375, 0.9375, 1.0});
  Rng rng(11);
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = static_cast<float>(rng.normal(100.0, 30.0));
  const auto path = (temp_dir() / "roundtrip_f32.nii.gz").string();
  write_volume(v, path);
  const VolumeF back = read_volume<float>(path);
  CHECK(back.shape() == v.shape());
  CHECK(back.spacing()[0] == doctest::Approx(0.9375));
  CHECK(back.spacing()[2] == doctest::Approx(1.0));
  REQUIRE(back.size() == v.size());
  for (Eigen::Index i = 0; i < v.size(); ++i) REQUIRE(back[i] == v[i]);
}

TEST_CASE("uint8 volume roundtrips through .nii.gz") {
  VolumeU8 v({4, 6, 5});
  Rng rng(3);
  for (Eigen::Index i = 0; i < v.size(); ++i)
    v[i] = static_cast<std::uint8_t>(rng.uniform_int(0, 3));
  const auto path = (temp_dir() / "roundtrip_u8.nii.gz").string();
  write_volume(v, path);
  const VolumeU8 back = read_volume<std::uint8_t>(path);
  CHECK(back.shape() == v.shape());
  for (Eigen::Index i = 0; i < v.size(); ++i) REQUIRE(back[i] == v[i]);
}

TEST_CASE("writes are byte-identical across calls") {
  VolumeF v({9, 9, 9});
  Rng rng(5);
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = static_cast<float>(rng.uniform());
  const auto p1 = temp_dir() / "det_a.nii.gz";
  const auto p2 = temp_dir() / "det_b.nii.gz";
  write_volume(v, p1.string());
  write_volume(v, p2.string());
  const auto b1 = slurp(p1);
  const auto b2 = slurp(p2);
  REQUIRE(b1.size() == b2.size());
  CHECK(fnv1a(b1.data(), b1.size()) == fnv1a(b2.data(), b2.size()));
}

TEST_CASE("truncated gzip payload raises FormatError") {
  VolumeF v({6, 6, 6}, 1.0f);
  const auto full = temp_dir() / "trunc_full.nii.gz";
  write_volume(v, full.string());
  auto bytes = slurp(full);
  REQUIRE(bytes.size() > 40);
  bytes.resize(bytes.size() / 2);
  const auto cut = temp_dir() / "trunc_cut.nii.gz";
  std::ofstream(cut, std::ios::binary).write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  CHECK_THROWS_AS(read_volume<float>(cut.string()), FormatError);
}

TEST_CASE("short header raises FormatError with context") {
  const auto path = temp_dir() / "not_nifti.nii.gz";
  {
    // Valid gzip stream whose payload is too small to be a header.
    VolumeF v({6, 6, 6});
    write_volume(v, path.string());
  }
  // Wrong dtype: reading a float file as uint8 must fail loudly.
  CHECK_THROWS_AS(read_volume<std::uint8_t>(path.string()), FormatError);
}

TEST_CASE("missing file raises IoError") {
  CHECK_THROWS_AS(read_volume<float>("/nonexistent/dir/xx.nii.gz"), IoError);
}
