#pragma once

// One config file drives the whole experiment lifecycle: cohort generation,
// the four training stages, inference, ablation and evaluation. Every run_*
// entry point validates the config before touching disk, and the master seed
// determines phantom data, splits, initialization and batch order.

#include <map>
#include <string>
#include <vector>

#include "pwml/inference.hpp"
#include "pwml/metrics.hpp"
#include "pwml/phantom.hpp"
#include "pwml/training.hpp"

#include <json.hpp>

namespace pwml {

/// Patches sampled per subject for each stage's dataset.
struct PatchPlan {
  int tseg = 8;  // lesion-free crops per control subject
  int cls_pos = 12, cls_neg = 12;
  int cmg_pos = 12, cmg_neg = 12;
  int pseg_pos = 12, pseg_neg = 4;

  void validate() const;
};

struct SplitSpec {
  std::array<double, 3> ratios{0.7, 0.15, 0.15};  // train / val / test
  std::uint64_t seed = 0;  // derived from the master seed unless overridden

  void validate() const;
};

struct InferencePlan {
  int stride = 16;
  double threshold = 0.5;
  std::string primary = "sp+cf+t1";  // fusion used by `infer`
  // Ablation rows; the full set mirrors the channel combinations under study.
  std::vector<std::string> fusions = {"t1",    "sp",    "cf",      "sp+t1",
                                      "cf+t1", "sp+cf", "sp+cf+t1"};

  void validate() const;
};

struct Paths {
  std::string data_dir;        // default: $DEEPPWML_DATA_DIR, else "data"
  std::string checkpoint_dir;  // default: <data_dir>/checkpoints
  std::string report_dir;      // default: <data_dir>/reports
};

struct ExperimentConfig {
  std::uint64_t seed = 17;
  PhantomConfig phantom;
  int n_control = 20;
  int n_pwml = 20;
  SplitSpec splits;
  NetworkSpec network;
  std::map<Stage, StageConfig> stages;  // always holds all four stages
  PatchPlan patches;
  InferencePlan inference;
  Paths paths;

  static ExperimentConfig defaults();
  /// Partial documents are fine; absent fields keep their defaults. Unknown
  /// keys raise ConfigError so typos cannot silently change an experiment.
  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig load_file(const std::string& path);
  nlohmann::json to_json() const;
  void validate() const;

  /// Swap the master seed and re-derive the split seed and all stage seeds.
  void reseed(std::uint64_t new_seed);
};

struct ManifestEntry {
  std::string subject_id;
  Group group = Group::control;
  std::uint64_t seed = 0;
  std::map<std::string, std::string> paths;  // channel -> path under data_dir
};

struct CohortManifest {
  std::uint64_t seed = 0;
  std::vector<ManifestEntry> entries;

  std::vector<std::string> ids(Group g) const;
  const ManifestEntry& entry(const std::string& subject_id) const;  // ValidationError
};

/// Write the synthetic cohort and `manifest.json` under data_dir. Rerunning
/// with the same config produces byte-identical files.
CohortManifest run_generate(const ExperimentConfig& cfg);

CohortManifest read_manifest(const std::string& data_dir);  // StagingError when absent
PhantomSubject load_subject(const std::string& data_dir, const ManifestEntry& entry);

/// Subject-level split of one group, deterministic under the split seed.
SplitResult group_split(const ExperimentConfig& cfg, const CohortManifest& manifest, Group g);

/// Rebuild the deterministic patch sets a stage trains and validates on
/// (tseg draws from control subjects, the rest from PWML subjects; pseg
/// patches carry model channels from the frozen tseg/cmg checkpoints).
TrainData stage_patches(const ExperimentConfig& cfg, const CohortManifest& manifest, Stage stage);

/// Train one stage: samples patches, runs the stage trainer, writes
/// {stage}.{epoch}.ckpt per epoch plus a {stage}.best.ckpt copy, and appends
/// JSONL epoch records to <report_dir>/train_{stage}.jsonl (echoed to
/// stdout). The pseg stage trains one network per configured fusion set,
/// keyed by fusion label in the result; other stages use the stage name.
std::map<std::string, TrainResult> run_train(const ExperimentConfig& cfg, Stage stage);

/// Rebuild a trained network from its best checkpoint (StagingError when the
/// stage has not been trained yet).
TsegNet load_tseg(const ExperimentConfig& cfg);
ClsNet load_cls(const ExperimentConfig& cfg);
CmgNet load_cmg(const ExperimentConfig& cfg);
PsegNet load_pseg(const ExperimentConfig& cfg, const FusionSet& fusion);

/// Segment subjects with the primary fusion (empty ids = the PWML test
/// split) into <report_dir>/predictions/<subject>/<fusion>/.
void run_infer(const ExperimentConfig& cfg, std::vector<std::string> subject_ids = {});

/// Same, but under every configured fusion set.
void run_ablate(const ExperimentConfig& cfg, std::vector<std::string> subject_ids = {});

/// Score saved predictions for every configured fusion against ground truth;
/// writes report.json and report.txt under report_dir and returns the
/// reports in config order. Missing predictions raise StagingError listing
/// the absent subjects.
std::vector<CohortReport> run_evaluate(const ExperimentConfig& cfg);

}  // namespace pwml
