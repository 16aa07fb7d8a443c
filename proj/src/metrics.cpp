#include "pwml/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include <json.hpp>

namespace pwml {

SubjectScore score_subject(const std::string& subject_id, const VolumeU8& pred,
                           const VolumeU8& gt) {
  if (pred.shape() != gt.shape())
    throw ValidationError("score_subject: shape mismatch for " + subject_id);
  SubjectScore s;
  s.subject_id = subject_id;
  for (Eigen::Index i = 0; i < pred.size(); ++i) {
    const std::uint8_t p = pred[i], g = gt[i];
    if (p > 1 || g > 1) throw ValidationError("score_subject: masks must be binary");
    s.tp += p & g;
    s.fp += p & (1 - g);
    s.fn += (1 - p) & g;
  }
  s.pred_voxels = s.tp + s.fp;
  s.gt_voxels = s.tp + s.fn;

  // 0/0 ratios: both masks empty counts as perfect agreement, anything else
  // scores zero; either way the flag marks the convention at work.
  if (s.pred_voxels == 0 && s.gt_voxels == 0) {
    s.dice = s.tpr = s.ppv = 1.0;
    s.degenerate = true;
    return s;
  }
  const auto ratio = [&s](std::int64_t num, std::int64_t den) {
    if (den == 0) {
      s.degenerate = true;
      return 0.0;
    }
    return static_cast<double>(num) / static_cast<double>(den);
  };
  s.dice = ratio(2 * s.tp, 2 * s.tp + s.fp + s.fn);
  s.tpr = ratio(s.tp, s.tp + s.fn);
  s.ppv = ratio(s.tp, s.tp + s.fp);
  return s;
}

CohortReport aggregate(const std::vector<SubjectScore>& scores, const std::string& fusion_label) {
  if (scores.empty()) throw ValidationError("aggregate: no subject scores");
  CohortReport r;
  r.fusion = fusion_label;
  r.n_subjects = static_cast<int>(scores.size());
  r.subjects = scores;
  const double n = static_cast<double>(scores.size());
  const auto stats = [&](auto field, double& mean, double& sd) {
    double sum = 0.0;
    for (const SubjectScore& s : scores) sum += s.*field;
    mean = sum / n;
    double var = 0.0;
    for (const SubjectScore& s : scores) var += (s.*field - mean) * (s.*field - mean);
    sd = std::sqrt(var / n);  // population std
  };
  stats(&SubjectScore::dice, r.dice_mean, r.dice_std);
  stats(&SubjectScore::tpr, r.tpr_mean, r.tpr_std);
  stats(&SubjectScore::ppv, r.ppv_mean, r.ppv_std);
  return r;
}

std::string report_to_json(const CohortReport& report) {
  nlohmann::json j;
  j["fusion"] = report.fusion;
  j["n_subjects"] = report.n_subjects;
  j["dice"] = {{"mean", report.dice_mean}, {"std", report.dice_std}};
  j["tpr"] = {{"mean", report.tpr_mean}, {"std", report.tpr_std}};
  j["ppv"] = {{"mean", report.ppv_mean}, {"std", report.ppv_std}};
  nlohmann::json rows = nlohmann::json::array();
  for (const SubjectScore& s : report.subjects) {
    rows.push_back({{"subject_id", s.subject_id},
                    {"dice", s.dice},
                    {"tpr", s.tpr},
                    {"ppv", s.ppv},
                    {"tp", s.tp},
                    {"fp", s.fp},
                    {"fn", s.fn},
                    {"pred_voxels", s.pred_voxels},
                    {"gt_voxels", s.gt_voxels},
                    {"degenerate", s.degenerate}});
  }
  j["subjects"] = rows;
  return j.dump(2) + "\n";
}

namespace {

std::string mean_std(double mean, double sd) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.3f(%.3f)", mean, sd);
  return buf;
}

}  // namespace

std::string reports_to_table(const std::vector<CohortReport>& reports) {
  std::size_t label_w = std::string("fusion").size();
  for (const CohortReport& r : reports) label_w = std::max(label_w, r.fusion.size());
  std::ostringstream out;
  const auto cell = [&out](const std::string& s, std::size_t width) {
    out << s << std::string(s.size() < width ? width - s.size() : 1, ' ');
  };
  const auto row = [&](const std::string& label, const std::string& n, const std::string& dice,
                       const std::string& tpr, const std::string& ppv) {
    cell(label, label_w + 2);
    cell(n, 4);
    cell(dice, 15);
    cell(tpr, 15);
    out << ppv << "\n";
  };
  row("fusion", "n", "dice", "tpr", "ppv");
  for (const CohortReport& r : reports)
    row(r.fusion, std::to_string(r.n_subjects), mean_std(r.dice_mean, r.dice_std),
        mean_std(r.tpr_mean, r.tpr_std), mean_std(r.ppv_mean, r.ppv_std));
  return out.str();
}

}  // namespace pwml
