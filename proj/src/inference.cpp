#include "pwml/inference.hpp"

#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "pwml/nifti.hpp"

namespace pwml {

VolumeU8 binarize(const VolumeF& prob, double threshold) {
  VolumeU8 out(prob.shape(), prob.spacing());
  for (Eigen::Index i = 0; i < prob.size(); ++i) {
    const float p = prob[i];
    if (p < 0.0f || p > 1.0f) throw ValidationError("binarize: probability outside [0,1]");
    out[i] = p >= threshold ? 1 : 0;
  }
  return out;
}

VolumeU8 tissue_filter(const VolumeU8& lesion_mask, const VolumeU8& tissue_map) {
  if (lesion_mask.shape() != tissue_map.shape())
    throw ValidationError("tissue_filter: shape mismatch");
  VolumeU8 out = lesion_mask;
  for (Eigen::Index i = 0; i < out.size(); ++i) {
    if (out[i] && tissue_map[i] <= static_cast<std::uint8_t>(Tissue::csf)) out[i] = 0;
  }
  return out;
}

namespace {

// Scanline add of a window-sized channel column into a full-volume
// accumulator.
void scatter_add(VolumeF& sum, Index3 origin, const float* col, int n) {
  for (int z = 0; z < n; ++z)
    for (int y = 0; y < n; ++y) {
      float* dst = &sum(origin[0], origin[1] + y, origin[2] + z);
      const float* src = col + static_cast<std::ptrdiff_t>(n) * (y + static_cast<std::ptrdiff_t>(n) * z);
      for (int x = 0; x < n; ++x) dst[x] += src[x];
    }
}

void bump_coverage(VolumeI32& cov, Index3 origin, int n) {
  for (int z = 0; z < n; ++z)
    for (int y = 0; y < n; ++y) {
      std::int32_t* dst = &cov(origin[0], origin[1] + y, origin[2] + z);
      for (int x = 0; x < n; ++x) ++dst[x];
    }
}

struct SharedAccum {
  std::array<VolumeF, 4> sp_sum;
  VolumeF cf_sum;
  VolumeI32 coverage;
};

// The shared part of a SubjectPrediction once the sums are in.
void finalize_shared(SubjectPrediction& pred, const SharedAccum& acc, const VolumeF& t1) {
  pred.coverage = acc.coverage;
  pred.cf_map = VolumeF(t1.shape(), t1.spacing());
  for (int c = 0; c < 4; ++c) pred.sp_map[c] = VolumeF(t1.shape(), t1.spacing());
  pred.tissue_map = VolumeU8(t1.shape(), t1.spacing());
  for (Eigen::Index i = 0; i < t1.size(); ++i) {
    const float cov = static_cast<float>(acc.coverage[i]);
    pred.cf_map[i] = acc.cf_sum[i] / cov;
    int best = 0;
    float best_p = -1.0f;
    for (int c = 0; c < 4; ++c) {
      const float p = acc.sp_sum[c][i] / cov;
      pred.sp_map[c][i] = p;
      if (p > best_p) {
        best_p = p;
        best = c;
      }
    }
    pred.tissue_map[i] = static_cast<std::uint8_t>(best);
  }
}

void finalize_lesion(SubjectPrediction& pred, const VolumeF& lesion_sum, double threshold) {
  pred.lesion_prob = VolumeF(lesion_sum.shape(), lesion_sum.spacing());
  for (Eigen::Index i = 0; i < lesion_sum.size(); ++i)
    pred.lesion_prob[i] = lesion_sum[i] / static_cast<float>(pred.coverage[i]);
  pred.lesion_mask = tissue_filter(binarize(pred.lesion_prob, threshold), pred.tissue_map);
}

void check_plan(const VolumeF& t1, const SlidingWindowPlan& plan) {
  if (plan.volume_shape != t1.shape())
    throw ValidationError("inference: plan was built for a different volume shape");
  if (plan.origins.empty()) throw ValidationError("inference: empty window plan");
  if (plan.patch_size != kPatchSize)
    throw ConfigError("inference: networks expect windows of side " + std::to_string(kPatchSize));
}

// Stack the requested channels for one window. Column layout follows
// fused_input: t1 (normalized), sp0..sp3, cf.
void build_fused(Tensor& fx, const FusionSet& fusion, const Tensor& x, const Tensor& probs,
                 const Tensor& cf) {
  fx = Tensor(fusion.channels(), x.d, x.h, x.w);
  int col = 0;
  if (fusion.t1) fx.m.col(col++) = x.m.col(0);
  if (fusion.sp)
    for (int c = 0; c < 4; ++c) fx.m.col(col++) = probs.m.col(c);
  if (fusion.cf) fx.m.col(col++) = cf.m.col(0);
}

}  // namespace

std::map<std::string, SubjectPrediction> run_ablation(
    const VolumeF& t1, TsegNet& tseg, ClsNet& cls, CmgNet& cmg,
    const std::vector<std::pair<FusionSet, PsegNet*>>& psegs, const SlidingWindowPlan& plan,
    double threshold) {
  check_plan(t1, plan);
  if (psegs.empty()) throw ConfigError("inference: no fusion configurations");
  for (const auto& [fusion, pseg] : psegs) {
    if (pseg == nullptr) throw ConfigError("inference: missing P-SEG for fusion " + fusion.label());
    if (pseg->in_channels() != fusion.channels())
      throw ConfigError("inference: P-SEG for fusion " + fusion.label() + " expects " +
                        std::to_string(pseg->in_channels()) + " channels, fusion provides " +
                        std::to_string(fusion.channels()));
  }

  const double scale = tseg.spec().intensity_scale;
  SharedAccum acc;
  for (int c = 0; c < 4; ++c) acc.sp_sum[c] = VolumeF(t1.shape(), t1.spacing());
  acc.cf_sum = VolumeF(t1.shape(), t1.spacing());
  acc.coverage = VolumeI32(t1.shape(), t1.spacing());
  std::vector<VolumeF> lesion_sums(psegs.size(), VolumeF(t1.shape(), t1.spacing()));

  const int n = plan.patch_size;
  Tensor x(1, n, n, n), probs, cf, fx, lesion;
  for (const Index3& origin : plan.origins) {
    x.m.col(0) = (crop_cube(t1, origin, n) / static_cast<float>(scale)).matrix();
    tseg.forward(x, probs);  // every window: the filter needs full tissue maps
    for (int c = 0; c < 4; ++c) scatter_add(acc.sp_sum[c], origin, probs.m.col(c).data(), n);
    bump_coverage(acc.coverage, origin, n);

    const Eigen::Vector2f pr = cls.forward(x);
    const bool positive = pr[1] >= pr[0];
    if (!positive) continue;  // zeros stay in every lesion/cf accumulator

    cmg.forward(x, SwitchState::remove, cf);
    scatter_add(acc.cf_sum, origin, cf.m.col(0).data(), n);
    for (std::size_t k = 0; k < psegs.size(); ++k) {
      build_fused(fx, psegs[k].first, x, probs, cf);
      psegs[k].second->forward(fx, lesion);
      scatter_add(lesion_sums[k], origin, lesion.m.col(0).data(), n);
    }
  }

  std::map<std::string, SubjectPrediction> out;
  for (std::size_t k = 0; k < psegs.size(); ++k) {
    SubjectPrediction pred;
    finalize_shared(pred, acc, t1);
    finalize_lesion(pred, lesion_sums[k], threshold);
    out.emplace(psegs[k].first.label(), std::move(pred));
  }
  return out;
}

SubjectPrediction segment_subject(const VolumeF& t1, TsegNet& tseg, ClsNet& cls, CmgNet& cmg,
                                  PsegNet& pseg, const FusionSet& fusion,
                                  const SlidingWindowPlan& plan, double threshold) {
  auto preds = run_ablation(t1, tseg, cls, cmg, {{fusion, &pseg}}, plan, threshold);
  return std::move(preds.begin()->second);
}

std::string prediction_summary_json(const SubjectPrediction& pred, const std::string& subject_id,
                                    const std::string& fusion_label, double threshold) {
  nlohmann::json j;
  j["subject_id"] = subject_id;
  j["fusion"] = fusion_label;
  j["threshold"] = threshold;
  std::int64_t voxels = 0;
  for (Eigen::Index i = 0; i < pred.lesion_mask.size(); ++i) voxels += pred.lesion_mask[i];
  j["lesion_voxels"] = voxels;
  j["component_count"] = count_components(pred.lesion_mask);
  return j.dump(2) + "\n";
}

void save_prediction(const SubjectPrediction& pred, const std::string& dir,
                     const std::string& subject_id, const std::string& fusion_label,
                     double threshold) {
  const std::filesystem::path base = std::filesystem::path(dir) / subject_id / fusion_label;
  std::filesystem::create_directories(base);
  write_volume(pred.lesion_prob, (base / "lesion_prob.nii.gz").string());
  write_volume(pred.lesion_mask, (base / "lesion_mask.nii.gz").string());
  write_volume(pred.tissue_map, (base / "tissue_map.nii.gz").string());
  write_volume(pred.cf_map, (base / "cf_map.nii.gz").string());
  std::ofstream out(base / "summary.json", std::ios::binary);
  if (!out) throw IoError("save_prediction: cannot write under " + base.string());
  out << prediction_summary_json(pred, subject_id, fusion_label, threshold);
}

}  // namespace pwml
