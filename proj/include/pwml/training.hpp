#pragma once

#include <array>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "pwml/losses.hpp"
#include "pwml/networks.hpp"
#include "pwml/patching.hpp"

namespace pwml {

enum class Stage { tseg, cls, cmg, pseg };

std::string to_string(Stage s);
Stage stage_from_string(const std::string& s);

/// Linear decay from initial to final_rate across the stage's epochs.
struct LrSchedule {
  double initial = 1e-3;
  double final_rate = 1e-5;

  double at(int epoch, int total_epochs) const;
};

struct StageConfig {
  Stage stage = Stage::tseg;
  LrSchedule lr;
  int epochs = 10;
  int batch_size = 8;
  CmgLossWeights loss_weights;  // used by the cmg stage only
  std::uint64_t seed = 0;

  void validate() const;  // throws ConfigError
};

struct TrainData {
  std::vector<Patch> train;
  std::vector<Patch> val;
};

struct SplitResult {
  std::vector<std::string> train, val, test;
};

/// Subject-level partition: floor(n * ratio) for val and test, remainder to
/// train. Deterministic under seed.
SplitResult split_cohort(const std::vector<std::string>& subject_ids,
                         const std::array<double, 3>& ratios, std::uint64_t seed);

struct EpochRecord {
  int epoch = 0;  // 1-based
  double train_loss = 0;
  double val_loss = 0;
  double val_metric = 0;  // accuracy / flip rate / dice, per stage
  double lr = 0;
};

struct TrainResult {
  std::vector<EpochRecord> log;
  int best_epoch = 0;  // lowest validation loss
  double best_val_loss = std::numeric_limits<double>::infinity();
};

/// Called after every epoch; the network holds that epoch's parameters.
using EpochCallback = std::function<void(const EpochRecord&)>;

/// Adam over a fixed parameter set; step() consumes accumulated gradients
/// scaled by grad_scale (1/batch for mean-of-batch semantics).
class Adam {
 public:
  explicit Adam(std::vector<ParamRef> params, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8);

  void zero_grad();
  void step(double lr, double grad_scale);

 private:
  std::vector<ParamRef> params_;
  std::vector<Eigen::ArrayXf> m_, v_;
  double b1_, b2_, eps_;
  long t_ = 0;
};

// Stage trainers. Patches must carry the channels each stage consumes:
// tseg: t1 + tissue; cls/cmg: t1 + label; pseg: fusion channels + lesion.
// Frozen networks are taken by reference because forward passes mutate their
// activation caches; their parameters are never touched (hash-checked in
// tests). NaN losses abort with TrainingError.

TrainResult train_tseg(TsegNet& net, const StageConfig& cfg, const TrainData& data,
                       const EpochCallback& cb = {});
TrainResult train_cls(ClsNet& net, const StageConfig& cfg, const TrainData& data,
                      const EpochCallback& cb = {});
TrainResult train_cmg(CmgNet& net, ClsNet& frozen_cls, const StageConfig& cfg,
                      const TrainData& data, const EpochCallback& cb = {});
TrainResult train_pseg(PsegNet& net, const FusionSet& fusion, const StageConfig& cfg,
                       const TrainData& data, const EpochCallback& cb = {});

/// Attach sp0..sp3 (tissue probabilities) and cf (switch=remove) channels to
/// patches using frozen models, for lesion-segmentation training.
void add_model_channels(std::vector<Patch>& patches, TsegNet& tseg, CmgNet& cmg);

/// Fraction of patches whose pseudo version flips the classifier: positives
/// with (patch - cf) read as negative, negatives with (patch + cf) as
/// positive. Switch follows the patch label (remove for positives).
struct FlipRates {
  double removed = 0;  // positives flipped to negative
  double seeded = 0;   // negatives flipped to positive
  int n_positive = 0;
  int n_negative = 0;
};
FlipRates measure_flip_rates(CmgNet& cmg, ClsNet& cls, const std::vector<Patch>& patches);

}  // namespace pwml
