#pragma once

#include <map>
#include <string>
#include <vector>

#include "pwml/networks.hpp"
#include "pwml/patching.hpp"

namespace pwml {

/// Full-volume output of the test-time pipeline for one subject.
struct SubjectPrediction {
  VolumeF lesion_prob;             // overlap-averaged, in [0,1]
  VolumeU8 lesion_mask;            // binarize(lesion_prob) after the tissue filter
  std::array<VolumeF, 4> sp_map;   // tissue probabilities, averaged over all windows
  VolumeF cf_map;                  // counterfactual map at switch=remove, >= 0
  VolumeU8 tissue_map;             // per-voxel argmax of sp_map
  VolumeI32 coverage;              // windows covering each voxel
};

/// Voxel >= threshold maps to 1. Probabilities must lie in [0,1].
VolumeU8 binarize(const VolumeF& prob, double threshold = 0.5);

/// Drop predicted lesion voxels sitting on background or CSF; GM/WM voxels
/// pass through. Never adds voxels.
VolumeU8 tissue_filter(const VolumeU8& lesion_mask, const VolumeU8& tissue_map);

/// Sliding-window pipeline: T-SEG on every window; CLS gates the window; a
/// positive window runs CMG (switch=remove) and P-SEG on the fused channels,
/// a negative one contributes zeros to the lesion and cf accumulators. All
/// windows count in the averaging denominator either way.
SubjectPrediction segment_subject(const VolumeF& t1, TsegNet& tseg, ClsNet& cls, CmgNet& cmg,
                                  PsegNet& pseg, const FusionSet& fusion,
                                  const SlidingWindowPlan& plan, double threshold);

/// One pipeline pass shared across fusion configurations: T-SEG/CLS/CMG run
/// once per window, each fusion's P-SEG runs on its own channel stack.
/// Keys of `psegs` and of the result are fusion labels.
std::map<std::string, SubjectPrediction> run_ablation(
    const VolumeF& t1, TsegNet& tseg, ClsNet& cls, CmgNet& cmg,
    const std::vector<std::pair<FusionSet, PsegNet*>>& psegs, const SlidingWindowPlan& plan,
    double threshold);

/// {subject_id, fusion, threshold, lesion_voxels, component_count}
std::string prediction_summary_json(const SubjectPrediction& pred, const std::string& subject_id,
                                    const std::string& fusion_label, double threshold);

/// lesion_prob/lesion_mask/tissue_map/cf_map as .nii.gz plus summary.json,
/// under <dir>/<subject_id>/<fusion_label>/.
void save_prediction(const SubjectPrediction& pred, const std::string& dir,
                     const std::string& subject_id, const std::string& fusion_label,
                     double threshold);

}  // namespace pwml
