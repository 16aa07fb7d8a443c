#include "pwml/patching.hpp"

#include <algorithm>
#include <sstream>

#include "pwml/rng.hpp"

namespace pwml {

const Eigen::ArrayXf& Patch::channel(const std::string& name) const {
  auto it = data.find(name);
  if (it == data.end()) throw ValidationError("patch has no channel '" + name + "'");
  return it->second;
}

PatchLabel label_patch(const Eigen::ArrayXf& lesion_crop) {
  float sum = 0.0f;
  for (Eigen::Index i = 0; i < lesion_crop.size(); ++i) {
    const float v = lesion_crop[i];
    if (v != 0.0f && v != 1.0f)
      throw ValidationError("label_patch: non-binary value " + std::to_string(v));
    sum += v;
  }
  return sum > 0.0f ? PatchLabel::positive : PatchLabel::negative;
}

namespace {

template <typename T>
Eigen::ArrayXf crop_as_float(const Volume<T>& v, Index3 origin, int n) {
  return crop_cube(v, origin, n).template cast<float>();
}

Index3 clamp_origin(Index3 o, Index3 shape, int n) {
  for (int a = 0; a < 3; ++a) o[a] = std::clamp(o[a], 0, shape[a] - n);
  return o;
}

// Lesion component centroids (26-connectivity), in deterministic scan order.
std::vector<Index3> lesion_centroids(const VolumeU8& lesions) {
  const int nx = lesions.nx(), ny = lesions.ny(), nz = lesions.nz();
  std::vector<char> seen(static_cast<std::size_t>(lesions.size()), 0);
  std::vector<Index3> centroids;
  std::vector<Eigen::Index> stack;
  for (Eigen::Index start = 0; start < lesions.size(); ++start) {
    if (!lesions[start] || seen[start]) continue;
    double sx = 0, sy = 0, sz = 0;
    int count = 0;
    stack.push_back(start);
    seen[start] = 1;
    while (!stack.empty()) {
      const Eigen::Index cur = stack.back();
      stack.pop_back();
      const int x = static_cast<int>(cur % nx);
      const int y = static_cast<int>((cur / nx) % ny);
      const int z = static_cast<int>(cur / (static_cast<Eigen::Index>(nx) * ny));
      sx += x;
      sy += y;
      sz += z;
      ++count;
      for (int dz = -1; dz <= 1; ++dz)
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const int X = x + dx, Y = y + dy, Z = z + dz;
            if (X < 0 || Y < 0 || Z < 0 || X >= nx || Y >= ny || Z >= nz) continue;
            const Eigen::Index ni = lesions.index(X, Y, Z);
            if (lesions[ni] && !seen[ni]) {
              seen[ni] = 1;
              stack.push_back(ni);
            }
          }
    }
    centroids.push_back({static_cast<int>(sx / count), static_cast<int>(sy / count),
                         static_cast<int>(sz / count)});
  }
  return centroids;
}

Patch make_patch(const PhantomSubject& s, Index3 origin) {
  Patch p;
  p.origin = origin;
  p.data["t1"] = crop_cube(s.t1, origin, kPatchSize);
  p.data["lesion"] = crop_as_float(s.lesions, origin, kPatchSize);
  p.data["tissue"] = crop_as_float(s.tissue, origin, kPatchSize);
  p.label = label_patch(p.data["lesion"]);
  return p;
}

}  // namespace

std::vector<Patch> sample_training_patches(const PhantomSubject& subject, int n_pos, int n_neg,
                                           std::uint64_t seed) {
  const Index3 shape = subject.t1.shape();
  for (int a = 0; a < 3; ++a)
    if (shape[a] < kPatchSize)
      throw ValidationError("sample_training_patches: volume smaller than patch size");
  if (n_pos < 0 || n_neg < 0) throw ValidationError("sample_training_patches: negative count");

  Rng rng(seed);
  std::vector<Patch> out;
  out.reserve(static_cast<std::size_t>(n_pos) + n_neg);

  if (n_pos > 0) {
    const auto centroids = lesion_centroids(subject.lesions);
    if (centroids.empty())
      throw SamplingError("sample_training_patches: subject " + subject.subject_id +
                          " has no lesions, cannot sample positive patches");
    constexpr int kJitter = 4;
    int made = 0;
    for (int attempt = 0; made < n_pos && attempt < 100 * n_pos; ++attempt) {
      const Index3 c = centroids[rng.uniform_int(0, static_cast<int>(centroids.size()) - 1)];
      Index3 origin;
      for (int a = 0; a < 3; ++a)
        origin[a] = c[a] - kPatchSize / 2 + rng.uniform_int(-kJitter, kJitter);
      Patch p = make_patch(subject, clamp_origin(origin, shape, kPatchSize));
      if (p.label != PatchLabel::positive) continue;  // jitter may slide off tiny components
      out.push_back(std::move(p));
      ++made;
    }
    if (made < n_pos)
      throw SamplingError("sample_training_patches: could not find enough positive patches");
  }

  // When positives are in play (classifier-style sampling) the negatives are
  // anchored at random white-matter voxels with the same centering and jitter
  // as the positives. Uniform crops would differ from lesion-centered ones in
  // gross content (border background, brain fraction), handing downstream
  // classifiers a shortcut that has nothing to do with lesions. Pure-negative
  // requests (tissue segmentation) keep uniform crops for tissue diversity.
  int made_neg = 0;
  if (n_pos > 0) {
    constexpr int kJitter = 4;
    for (int attempt = 0; made_neg < n_neg && attempt < 2000 * std::max(n_neg, 1); ++attempt) {
      Index3 anchor;
      for (int a = 0; a < 3; ++a) anchor[a] = rng.uniform_int(0, shape[a] - 1);
      if (static_cast<Tissue>(subject.tissue(anchor[0], anchor[1], anchor[2])) != Tissue::wm)
        continue;
      Index3 origin;
      for (int a = 0; a < 3; ++a)
        origin[a] = anchor[a] - kPatchSize / 2 + rng.uniform_int(-kJitter, kJitter);
      Patch p = make_patch(subject, clamp_origin(origin, shape, kPatchSize));
      if (p.label != PatchLabel::negative) continue;
      out.push_back(std::move(p));
      ++made_neg;
    }
  } else {
    for (int attempt = 0; made_neg < n_neg && attempt < 200 * std::max(n_neg, 1); ++attempt) {
      Index3 origin;
      for (int a = 0; a < 3; ++a) origin[a] = rng.uniform_int(0, shape[a] - kPatchSize);
      Patch p = make_patch(subject, origin);
      if (p.label != PatchLabel::negative) continue;
      const float brain_fraction =
          (p.channel("tissue") != static_cast<float>(Tissue::background)).cast<float>().mean();
      if (brain_fraction < 0.3f) continue;
      out.push_back(std::move(p));
      ++made_neg;
    }
  }
  if (made_neg < n_neg)
    throw SamplingError("sample_training_patches: could not find enough negative patches");
  return out;
}

SlidingWindowPlan plan_sliding_window(Index3 volume_shape, int patch_size, int stride) {
  if (stride < 1) throw ConfigError("plan_sliding_window: stride must be >= 1");
  for (int a = 0; a < 3; ++a)
    if (patch_size > volume_shape[a])
      throw ValidationError("plan_sliding_window: patch size " + std::to_string(patch_size) +
                            " exceeds volume axis " + std::to_string(volume_shape[a]));
  std::array<std::vector<int>, 3> axis;
  for (int a = 0; a < 3; ++a) {
    const int last = volume_shape[a] - patch_size;
    for (int o = 0; o < last; o += stride) axis[a].push_back(o);
    axis[a].push_back(last);  // clamped final window; also the sole window when last == 0
  }
  SlidingWindowPlan plan;
  plan.volume_shape = volume_shape;
  plan.patch_size = patch_size;
  plan.stride = stride;
  for (int oz : axis[2])
    for (int oy : axis[1])
      for (int ox : axis[0]) plan.origins.push_back({ox, oy, oz});
  return plan;
}

std::string SlidingWindowPlan::to_json() const {
  std::ostringstream os;
  os << "{\"volume_shape\":[" << volume_shape[0] << "," << volume_shape[1] << ","
     << volume_shape[2] << "],\"patch_size\":" << patch_size << ",\"stride\":" << stride
     << ",\"origins\":[";
  for (std::size_t i = 0; i < origins.size(); ++i) {
    if (i) os << ",";
    os << "[" << origins[i][0] << "," << origins[i][1] << "," << origins[i][2] << "]";
  }
  os << "]}";
  return os.str();
}

Reconstruction reconstruct_average(
    const std::vector<std::pair<Index3, Eigen::ArrayXf>>& patch_values, Index3 volume_shape,
    int patch_size) {
  if (patch_values.empty())
    throw ValidationError("reconstruct_average: empty patch list");
  Reconstruction r{VolumeF(volume_shape, 0.0f), VolumeI32(volume_shape, 0)};
  const int n = patch_size;
  for (const auto& [origin, values] : patch_values) {
    if (values.size() != static_cast<Eigen::Index>(n) * n * n)
      throw ValidationError("reconstruct_average: patch value size mismatch");
    for (int a = 0; a < 3; ++a)
      if (origin[a] < 0 || origin[a] + n > volume_shape[a])
        throw ValidationError("reconstruct_average: origin out of bounds");
    Eigen::Index k = 0;
    for (int z = 0; z < n; ++z)
      for (int y = 0; y < n; ++y) {
        float* dst = &r.mean(origin[0], origin[1] + y, origin[2] + z);
        std::int32_t* cov = &r.coverage(origin[0], origin[1] + y, origin[2] + z);
        for (int x = 0; x < n; ++x, ++k) {
          dst[x] += values[k];
          cov[x] += 1;
        }
      }
  }
  for (Eigen::Index i = 0; i < r.mean.size(); ++i)
    if (r.coverage[i] > 0) r.mean[i] /= static_cast<float>(r.coverage[i]);
  return r;
}

std::string FusionSet::label() const {
  std::string out;
  for (const auto& [on, tok] : {std::pair{sp, "sp"}, {cf, "cf"}, {t1, "t1"}}) {
    if (!on) continue;
    if (!out.empty()) out += '+';
    out += tok;
  }
  if (out.empty()) throw ConfigError("fusion set selects no channels");
  return out;
}

FusionSet FusionSet::parse(const std::string& s) {
  FusionSet f;
  std::stringstream ss(s);
  std::string tok;
  bool any = false;
  while (std::getline(ss, tok, '+')) {
    if (tok == "t1")
      f.t1 = true;
    else if (tok == "sp")
      f.sp = true;
    else if (tok == "cf")
      f.cf = true;
    else
      throw ConfigError("unknown fusion channel '" + tok + "' in '" + s + "'");
    any = true;
  }
  if (!any) throw ConfigError("empty fusion set");
  return f;
}

Tensor fused_input(const Patch& patch, const FusionSet& fusion, double intensity_scale) {
  if (intensity_scale <= 0) throw ConfigError("fused_input: intensity_scale must be > 0");
  Tensor x(fusion.channels(), kPatchSize, kPatchSize, kPatchSize);
  int c = 0;
  if (fusion.t1)
    x.m.col(c++) = (patch.channel("t1") / static_cast<float>(intensity_scale)).matrix();
  if (fusion.sp)
    for (int i = 0; i < 4; ++i) x.m.col(c++) = patch.channel("sp" + std::to_string(i)).matrix();
  if (fusion.cf) x.m.col(c++) = patch.channel("cf").matrix();
  return x;
}

}  // namespace pwml
