#include "pwml/volume.hpp"

#include <vector>

namespace pwml {

namespace {

std::vector<int> labeled_sizes(const VolumeU8& mask) {
  const int nx = mask.nx(), ny = mask.ny(), nz = mask.nz();
  std::vector<char> seen(static_cast<std::size_t>(mask.size()), 0);
  std::vector<int> sizes;
  std::vector<Eigen::Index> stack;
  for (Eigen::Index start = 0; start < mask.size(); ++start) {
    if (!mask[start] || seen[start]) continue;
    int count = 0;
    stack.push_back(start);
    seen[start] = 1;
    while (!stack.empty()) {
      const Eigen::Index cur = stack.back();
      stack.pop_back();
      ++count;
      const int x = static_cast<int>(cur % nx);
      const int y = static_cast<int>((cur / nx) % ny);
      const int z = static_cast<int>(cur / (static_cast<Eigen::Index>(nx) * ny));
      for (int dz = -1; dz <= 1; ++dz)
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            if (!dx && !dy && !dz) continue;
            const int X = x + dx, Y = y + dy, Z = z + dz;
            if (X < 0 || Y < 0 || Z < 0 || X >= nx || Y >= ny || Z >= nz) continue;
            const Eigen::Index ni = mask.index(X, Y, Z);
            if (mask[ni] && !seen[ni]) {
              seen[ni] = 1;
              stack.push_back(ni);
            }
          }
    }
    sizes.push_back(count);
  }
  return sizes;
}

}  // namespace

int count_components(const VolumeU8& mask) {
  return static_cast<int>(labeled_sizes(mask).size());
}

std::vector<int> component_sizes(const VolumeU8& mask) { return labeled_sizes(mask); }

}  // namespace pwml
