#include "pwml/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <queue>
#include <vector>

#include "pwml/rng.hpp"

namespace pwml {

std::string to_string(Group g) { return g == Group::control ? "control" : "pwml"; }

Group group_from_string(const std::string& s) {
  if (s == "control") return Group::control;
  if (s == "pwml") return Group::pwml;
  throw ConfigError("unknown group: " + s);
}

void PhantomConfig::validate() const {
  for (int a = 0; a < 3; ++a) {
    if (volume_shape[a] < 64)
      throw ConfigError("phantom: volume_shape must be >= 64 per axis, got " +
                        std::to_string(volume_shape[a]));
    if (voxel_spacing[a] <= 0) throw ConfigError("phantom: non-positive voxel spacing");
  }
  if (lesion_size_range[0] < 1 || lesion_size_range[1] < lesion_size_range[0])
    throw ConfigError("phantom: invalid lesion_size_range");
  if (lesion_count_range[0] < 0 || lesion_count_range[1] < lesion_count_range[0])
    throw ConfigError("phantom: invalid lesion_count_range");
  if (intensity_means.empty()) throw ConfigError("phantom: intensity_means is empty");
  for (const char* key : {"background", "csf", "gm", "wm", "lesion"})
    if (!intensity_means.count(key))
      throw ConfigError(std::string("phantom: intensity_means missing key '") + key + "'");
  const auto mean = [&](const char* k) { return intensity_means.at(k); };
  if (!(mean("wm") < mean("gm")) || !(mean("wm") < mean("lesion")))
    throw ConfigError("phantom: intensity means must satisfy WM < GM and WM < lesion");
  if (intensity_noise_sigma < 0) throw ConfigError("phantom: negative noise sigma");
  if (lesion_max_csf_distance < 1) throw ConfigError("phantom: lesion_max_csf_distance < 1");
}

namespace {

// Low-frequency scalar field: Gaussian values on a coarse grid, trilinearly
// interpolated to the full volume.
VolumeF smooth_field(Index3 shape, int coarse, double amplitude, Rng& rng) {
  std::vector<double> grid(static_cast<std::size_t>(coarse) * coarse * coarse);
  for (auto& g : grid) g = rng.normal();
  const auto at = [&](int i, int j, int k) {
    return grid[static_cast<std::size_t>(i) + coarse * (static_cast<std::size_t>(j) + coarse * k)];
  };
  VolumeF f(shape);
  for (int z = 0; z < shape[2]; ++z) {
    const double tz = static_cast<double>(z) / (shape[2] - 1) * (coarse - 1);
    const int k0 = std::min(static_cast<int>(tz), coarse - 2);
    const double fz = tz - k0;
    for (int y = 0; y < shape[1]; ++y) {
      const double ty = static_cast<double>(y) / (shape[1] - 1) * (coarse - 1);
      const int j0 = std::min(static_cast<int>(ty), coarse - 2);
      const double fy = ty - j0;
      for (int x = 0; x < shape[0]; ++x) {
        const double tx = static_cast<double>(x) / (shape[0] - 1) * (coarse - 1);
        const int i0 = std::min(static_cast<int>(tx), coarse - 2);
        const double fx = tx - i0;
        double v = 0.0;
        for (int dk = 0; dk < 2; ++dk)
          for (int dj = 0; dj < 2; ++dj)
            for (int di = 0; di < 2; ++di) {
              const double wgt = (di ? fx : 1 - fx) * (dj ? fy : 1 - fy) * (dk ? fz : 1 - fz);
              v += wgt * at(i0 + di, j0 + dj, k0 + dk);
            }
        f(x, y, z) = static_cast<float>(amplitude * v);
      }
    }
  }
  return f;
}

struct Geometry {
  VolumeU8 tissue;
  VolumeU8 ventricle;  // the central CSF core, used for lesion placement
};

Geometry make_tissue(const PhantomConfig& cfg, Rng& rng) {
  const Index3 shape = cfg.volume_shape;
  const double cx = (shape[0] - 1) / 2.0, cy = (shape[1] - 1) / 2.0, cz = (shape[2] - 1) / 2.0;
  const double ax = 0.44 * shape[0], ay = 0.44 * shape[1], az = 0.46 * shape[2];
  // ventricle core: narrow, elongated along z
  const double vx = 0.18 * ax, vy = 0.18 * ay, vz = 0.38 * az;

  VolumeF deform = smooth_field(shape, 5, cfg.deformation_amplitude, rng);
  VolumeF deform_v = smooth_field(shape, 4, cfg.deformation_amplitude, rng);

  Geometry geo;
  geo.tissue = VolumeU8(shape, cfg.voxel_spacing, static_cast<std::uint8_t>(Tissue::background));
  geo.ventricle = VolumeU8(shape, cfg.voxel_spacing, 0);

  constexpr double kCsfShell = 0.94;
  constexpr double kGmRibbon = 0.74;

  for (int z = 0; z < shape[2]; ++z)
    for (int y = 0; y < shape[1]; ++y)
      for (int x = 0; x < shape[0]; ++x) {
        const double dx = (x - cx) / ax, dy = (y - cy) / ay, dz = (z - cz) / az;
        const double rho = std::sqrt(dx * dx + dy * dy + dz * dz) * (1.0 + deform(x, y, z));
        Tissue t = Tissue::background;
        if (rho <= 1.0) {
          if (rho > kCsfShell) t = Tissue::csf;
          else if (rho > kGmRibbon) t = Tissue::gm;
          else t = Tissue::wm;
        }
        if (t == Tissue::wm) {
          const double ex = (x - cx) / vx, ey = (y - cy) / vy, ez = (z - cz) / vz;
          const double rv = std::sqrt(ex * ex + ey * ey + ez * ez) * (1.0 + deform_v(x, y, z));
          if (rv <= 1.0) {
            t = Tissue::csf;
            geo.ventricle(x, y, z) = 1;
          }
        }
        geo.tissue(x, y, z) = static_cast<std::uint8_t>(t);
      }
  return geo;
}

// Voxel-step distance from the ventricle core through WM (multi-source BFS,
// 6-connectivity), capped at max_dist. -1 means unreached or not WM.
std::vector<int> wm_distance_to_ventricle(const Geometry& geo, int max_dist) {
  const auto& tis = geo.tissue;
  const int nx = tis.nx(), ny = tis.ny(), nz = tis.nz();
  std::vector<int> dist(static_cast<std::size_t>(tis.size()), -1);
  std::queue<Eigen::Index> q;
  for (Eigen::Index i = 0; i < tis.size(); ++i)
    if (geo.ventricle[i]) {
      dist[i] = 0;
      q.push(i);
    }
  const Eigen::Index sx = 1, sy = nx, sz = static_cast<Eigen::Index>(nx) * ny;
  while (!q.empty()) {
    const Eigen::Index cur = q.front();
    q.pop();
    if (dist[cur] >= max_dist) continue;
    const int x = static_cast<int>(cur % nx);
    const int y = static_cast<int>((cur / nx) % ny);
    const int z = static_cast<int>(cur / sz);
    const auto try_push = [&](bool ok, Eigen::Index ni) {
      if (ok && dist[ni] < 0 && tis[ni] == static_cast<std::uint8_t>(Tissue::wm)) {
        dist[ni] = dist[cur] + 1;
        q.push(ni);
      }
    };
    try_push(x > 0, cur - sx);
    try_push(x + 1 < nx, cur + sx);
    try_push(y > 0, cur - sy);
    try_push(y + 1 < ny, cur + sy);
    try_push(z > 0, cur - sz);
    try_push(z + 1 < nz, cur + sz);
  }
  return dist;
}

// Grow a connected near-ellipsoidal blob of exactly `target` WM voxels around
// `center`: Dijkstra-style expansion through WM ordered by anisotropically
// scaled distance from the center. Returns empty if WM runs out.
std::vector<Eigen::Index> grow_blob(const VolumeU8& tissue, Eigen::Index center, int target,
                                    const std::array<double, 3>& axis_scale) {
  const int nx = tissue.nx(), ny = tissue.ny(), nz = tissue.nz();
  const Eigen::Index sz = static_cast<Eigen::Index>(nx) * ny;
  const int cx = static_cast<int>(center % nx);
  const int cy = static_cast<int>((center / nx) % ny);
  const int cz = static_cast<int>(center / sz);
  const auto key = [&](int x, int y, int z) {
    const double dx = (x - cx) / axis_scale[0], dy = (y - cy) / axis_scale[1],
                 dz = (z - cz) / axis_scale[2];
    return dx * dx + dy * dy + dz * dz;
  };
  using Node = std::pair<double, Eigen::Index>;
  std::priority_queue<Node, std::vector<Node>, std::greater<>> heap;
  std::vector<Eigen::Index> blob;
  std::vector<std::pair<Eigen::Index, char>> visited;  // sorted; blobs are tiny
  const auto seen = [&](Eigen::Index i) {
    auto it = std::lower_bound(visited.begin(), visited.end(), std::make_pair(i, char(0)),
                               [](const auto& a, const auto& b) { return a.first < b.first; });
    return it != visited.end() && it->first == i;
  };
  const auto mark = [&](Eigen::Index i) {
    auto it = std::lower_bound(visited.begin(), visited.end(), std::make_pair(i, char(0)),
                               [](const auto& a, const auto& b) { return a.first < b.first; });
    visited.insert(it, {i, 1});
  };
  heap.push({0.0, center});
  mark(center);
  while (!heap.empty() && static_cast<int>(blob.size()) < target) {
    const auto [d, cur] = heap.top();
    heap.pop();
    blob.push_back(cur);
    const int x = static_cast<int>(cur % nx);
    const int y = static_cast<int>((cur / nx) % ny);
    const int z = static_cast<int>(cur / sz);
    const auto push = [&](int X, int Y, int Z) {
      if (X < 0 || Y < 0 || Z < 0 || X >= nx || Y >= ny || Z >= nz) return;
      const Eigen::Index ni = tissue.index(X, Y, Z);
      if (seen(ni) || tissue[ni] != static_cast<std::uint8_t>(Tissue::wm)) return;
      mark(ni);
      heap.push({key(X, Y, Z), ni});
    };
    push(x - 1, y, z);
    push(x + 1, y, z);
    push(x, y - 1, z);
    push(x, y + 1, z);
    push(x, y, z - 1);
    push(x, y, z + 1);
  }
  if (static_cast<int>(blob.size()) < target) blob.clear();
  return blob;
}

// True if any voxel of `blob` is within a 1-voxel (26-neighbourhood) margin of
// an existing lesion voxel; keeps planted components separated.
bool touches_mask(const VolumeU8& mask, const std::vector<Eigen::Index>& blob) {
  const int nx = mask.nx(), ny = mask.ny(), nz = mask.nz();
  const Eigen::Index sz = static_cast<Eigen::Index>(nx) * ny;
  for (Eigen::Index i : blob) {
    const int x = static_cast<int>(i % nx);
    const int y = static_cast<int>((i / nx) % ny);
    const int z = static_cast<int>(i / sz);
    for (int dz = -2; dz <= 2; ++dz)
      for (int dy = -2; dy <= 2; ++dy)
        for (int dx = -2; dx <= 2; ++dx) {
          const int X = x + dx, Y = y + dy, Z = z + dz;
          if (X < 0 || Y < 0 || Z < 0 || X >= nx || Y >= ny || Z >= nz) continue;
          if (mask(X, Y, Z)) return true;
        }
  }
  return false;
}

VolumeU8 plant_lesions(const PhantomConfig& cfg, const Geometry& geo, Rng& rng) {
  VolumeU8 lesions(cfg.volume_shape, cfg.voxel_spacing, 0);
  const std::vector<int> dist = wm_distance_to_ventricle(geo, cfg.lesion_max_csf_distance);
  std::vector<Eigen::Index> candidates;
  for (Eigen::Index i = 0; i < geo.tissue.size(); ++i)
    if (dist[i] >= 2 && dist[i] <= cfg.lesion_max_csf_distance) candidates.push_back(i);
  if (candidates.empty()) return lesions;

  const int want = rng.uniform_int(cfg.lesion_count_range[0], cfg.lesion_count_range[1]);
  int placed = 0;
  const int max_attempts = 40 * std::max(want, 1);
  for (int attempt = 0; attempt < max_attempts && placed < want; ++attempt) {
    const Eigen::Index center =
        candidates[rng.uniform_int(0, static_cast<int>(candidates.size()) - 1)];
    const int target = rng.uniform_int(cfg.lesion_size_range[0], cfg.lesion_size_range[1]);
    std::array<double, 3> scale;
    for (auto& s : scale) s = rng.uniform(0.75, 1.35);
    const auto blob = grow_blob(geo.tissue, center, target, scale);
    if (blob.empty() || touches_mask(lesions, blob)) continue;
    for (Eigen::Index i : blob) lesions[i] = 1;
    ++placed;
  }
  return lesions;
}

}  // namespace

PhantomSubject generate_subject(const PhantomConfig& config, Group group, std::uint64_t seed) {
  config.validate();
  Rng rng(mix_seed(config.rng_seed, seed));

  Geometry geo = make_tissue(config, rng);
  VolumeU8 lesions = group == Group::pwml
                         ? plant_lesions(config, geo, rng)
                         : VolumeU8(config.volume_shape, config.voxel_spacing, 0);

  VolumeF bias = smooth_field(config.volume_shape, 4, config.bias_amplitude, rng);
  VolumeF t1(config.volume_shape, config.voxel_spacing, 0.0f);
  const double means[4] = {
      config.intensity_means.at("background"), config.intensity_means.at("csf"),
      config.intensity_means.at("gm"), config.intensity_means.at("wm")};
  const double lesion_mean = config.intensity_means.at("lesion");
  for (Eigen::Index i = 0; i < t1.size(); ++i) {
    const double mu = lesions[i] ? lesion_mean : means[geo.tissue[i]];
    t1[i] = static_cast<float>(mu * (1.0 + bias[i]) +
                               rng.normal(0.0, config.intensity_noise_sigma));
  }

  PhantomSubject s;
  s.t1 = std::move(t1);
  s.tissue = std::move(geo.tissue);
  s.lesions = std::move(lesions);
  s.group = group;
  s.subject_id = to_string(group) + "-s" + std::to_string(seed);
  return s;
}

std::uint64_t cohort_subject_seed(std::uint64_t cohort_seed, Group group, int index) {
  const std::uint64_t salt =
      (group == Group::pwml ? 0x50000000ull : 0) + static_cast<std::uint64_t>(index);
  return mix_seed(cohort_seed, salt);
}

std::vector<PhantomSubject> generate_cohort(const PhantomConfig& config, int n_control,
                                            int n_pwml, std::uint64_t seed) {
  if (n_control < 0 || n_pwml < 0) throw ConfigError("generate_cohort: negative subject count");
  std::vector<PhantomSubject> cohort;
  cohort.reserve(static_cast<std::size_t>(n_control) + n_pwml);
  char id[64];
  for (int i = 0; i < n_control; ++i) {
    auto s = generate_subject(config, Group::control, cohort_subject_seed(seed, Group::control, i));
    std::snprintf(id, sizeof(id), "control-%03d", i);
    s.subject_id = id;
    cohort.push_back(std::move(s));
  }
  for (int i = 0; i < n_pwml; ++i) {
    auto s = generate_subject(config, Group::pwml, cohort_subject_seed(seed, Group::pwml, i));
    std::snprintf(id, sizeof(id), "pwml-%03d", i);
    s.subject_id = id;
    cohort.push_back(std::move(s));
  }
  return cohort;
}

}  // namespace pwml
