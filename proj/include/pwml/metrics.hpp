#pragma once

#include <string>
#include <vector>

#include "pwml/volume.hpp"

namespace pwml {

/// Voxel-level overlap scores for one subject. The rates are recomputable
/// from the stored counts: dice = 2tp/(2tp+fp+fn), tpr = tp/(tp+fn),
/// ppv = tp/(tp+fp).
struct SubjectScore {
  std::string subject_id;
  std::int64_t tp = 0, fp = 0, fn = 0;
  std::int64_t pred_voxels = 0, gt_voxels = 0;
  double dice = 0.0, tpr = 0.0, ppv = 0.0;
  /// Set when a ratio was 0/0: empty-empty scores 1 across the board, any
  /// other undefined ratio scores 0.
  bool degenerate = false;
};

/// Both volumes must share a shape and hold only 0/1 (ValidationError).
SubjectScore score_subject(const std::string& subject_id, const VolumeU8& pred,
                           const VolumeU8& gt);

/// Cohort mean and population standard deviation per metric.
struct CohortReport {
  std::string fusion;
  int n_subjects = 0;
  double dice_mean = 0.0, dice_std = 0.0;
  double tpr_mean = 0.0, tpr_std = 0.0;
  double ppv_mean = 0.0, ppv_std = 0.0;
  std::vector<SubjectScore> subjects;
};

/// ValidationError on an empty score list.
CohortReport aggregate(const std::vector<SubjectScore>& scores, const std::string& fusion_label);

std::string report_to_json(const CohortReport& report);

/// One aligned text table, one row per report: mean(std) per metric.
std::string reports_to_table(const std::vector<CohortReport>& reports);

}  // namespace pwml
