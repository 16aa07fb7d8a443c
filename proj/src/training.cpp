#include "pwml/training.hpp"

#include <algorithm>
#include <cmath>

namespace pwml {

std::string to_string(Stage s) {
  switch (s) {
    case Stage::tseg: return "tseg";
    case Stage::cls: return "cls";
    case Stage::cmg: return "cmg";
    case Stage::pseg: return "pseg";
  }
  throw ConfigError("unknown stage value");
}

Stage stage_from_string(const std::string& s) {
  for (Stage st : {Stage::tseg, Stage::cls, Stage::cmg, Stage::pseg})
    if (to_string(st) == s) return st;
  throw ConfigError("unknown stage: " + s);
}

double LrSchedule::at(int epoch, int total_epochs) const {
  if (total_epochs <= 1) return initial;
  const double f = static_cast<double>(epoch) / static_cast<double>(total_epochs - 1);
  return initial + (final_rate - initial) * f;
}

void StageConfig::validate() const {
  if (epochs < 1) throw ConfigError("stage config: epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("stage config: batch_size must be >= 1");
  for (double r : {lr.initial, lr.final_rate})
    if (!(r > 0) || r > 1.0) throw ConfigError("stage config: learning rates must be in (0, 1]");
  if (lr.final_rate > lr.initial)
    throw ConfigError("stage config: final learning rate above initial");
  if (loss_weights.l1 < 0 || loss_weights.l2 < 0 || loss_weights.cls < 0)
    throw ConfigError("stage config: loss weights must be >= 0");
  if (stage == Stage::cmg && !(loss_weights.cls > 0))
    throw ConfigError("stage config: cmg requires a positive classification weight");
}

SplitResult split_cohort(const std::vector<std::string>& subject_ids,
                         const std::array<double, 3>& ratios, std::uint64_t seed) {
  double sum = 0;
  for (double r : ratios) {
    if (r < 0) throw ConfigError("split: ratios must be >= 0");
    sum += r;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("split: ratios must sum to 1");
  std::vector<std::string> ids = subject_ids;
  Rng rng(mix_seed(seed, 0x5b117));
  for (std::size_t i = ids.size(); i > 1; --i)
    std::swap(ids[i - 1], ids[rng.uniform_int(0, static_cast<int>(i) - 1)]);
  const auto n = static_cast<double>(ids.size());
  const auto n_val = static_cast<std::size_t>(n * ratios[1] + 1e-9);
  const auto n_test = static_cast<std::size_t>(n * ratios[2] + 1e-9);
  const std::size_t n_train = ids.size() - n_val - n_test;
  SplitResult out;
  out.train.assign(ids.begin(), ids.begin() + n_train);
  out.val.assign(ids.begin() + n_train, ids.begin() + n_train + n_val);
  out.test.assign(ids.begin() + n_train + n_val, ids.end());
  return out;
}

Adam::Adam(std::vector<ParamRef> params, double beta1, double beta2, double eps)
    : params_(std::move(params)), b1_(beta1), b2_(beta2), eps_(eps) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& p : params_) {
    m_.emplace_back(Eigen::ArrayXf::Zero(p.size));
    v_.emplace_back(Eigen::ArrayXf::Zero(p.size));
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) Eigen::Map<Eigen::ArrayXf>(p.grad, p.size).setZero();
}

void Adam::step(double lr, double grad_scale) {
  ++t_;
  const float alpha = static_cast<float>(
      lr * std::sqrt(1.0 - std::pow(b2_, t_)) / (1.0 - std::pow(b1_, t_)));
  const auto b1 = static_cast<float>(b1_), b2 = static_cast<float>(b2_);
  const auto eps = static_cast<float>(eps_), gs = static_cast<float>(grad_scale);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Eigen::Map<Eigen::ArrayXf> g(params_[i].grad, params_[i].size);
    Eigen::Map<Eigen::ArrayXf> w(params_[i].value, params_[i].size);
    m_[i] = b1 * m_[i] + (1.0f - b1) * (g * gs);
    v_[i] = b2 * v_[i] + (1.0f - b2) * (g * gs).square();
    w -= alpha * m_[i] / (v_[i].sqrt() + eps);
  }
}

namespace {

std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed);
  for (std::size_t i = n; i > 1; --i)
    std::swap(order[i - 1], order[rng.uniform_int(0, static_cast<int>(i) - 1)]);
  return order;
}

int label_of(const Patch& p) {
  if (p.label == PatchLabel::negative) return 0;
  if (p.label == PatchLabel::positive) return 1;
  throw ValidationError("training patch is unlabeled");
}

Tensor patch_input(const Patch& p, double intensity_scale) {
  Tensor x(1, kPatchSize, kPatchSize, kPatchSize);
  x.m.col(0) = (p.channel("t1") / static_cast<float>(intensity_scale)).matrix();
  return x;
}

Eigen::VectorXi tissue_target(const Patch& p) {
  const Eigen::ArrayXf& t = p.channel("tissue");
  Eigen::VectorXi target(t.size());
  for (Eigen::Index i = 0; i < t.size(); ++i) target[i] = static_cast<int>(t[i]);
  return target;
}

void check_finite(double loss, const char* stage, int epoch) {
  if (!std::isfinite(loss))
    throw TrainingError(std::string(stage) + ": non-finite loss at epoch " +
                        std::to_string(epoch) + " — aborting");
}

void require_data(const TrainData& data, const char* stage) {
  if (data.train.empty()) throw StagingError(std::string(stage) + ": empty training set");
  if (data.val.empty()) throw StagingError(std::string(stage) + ": empty validation set");
}

void finish_epoch(TrainResult& res, const EpochRecord& rec, const EpochCallback& cb) {
  res.log.push_back(rec);
  if (cb) cb(rec);
  if (rec.val_loss < res.best_val_loss) {
    res.best_val_loss = rec.val_loss;
    res.best_epoch = rec.epoch;
  }
}

}  // namespace

TrainResult train_tseg(TsegNet& net, const StageConfig& cfg, const TrainData& data,
                       const EpochCallback& cb) {
  cfg.validate();
  if (cfg.stage != Stage::tseg) throw ConfigError("train_tseg: wrong stage in config");
  require_data(data, "tseg");
  const double scale = net.spec().intensity_scale;
  Adam opt(net.params());
  TrainResult res;
  Tensor x, probs, dlogits, dx;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const double lr = cfg.lr.at(epoch - 1, cfg.epochs);
    const auto order = shuffled_indices(data.train.size(), mix_seed(cfg.seed, 0x7e50u + epoch));
    double loss_sum = 0;
    std::size_t done = 0;
    while (done < order.size()) {
      const auto bsz = std::min<std::size_t>(cfg.batch_size, order.size() - done);
      opt.zero_grad();
      for (std::size_t k = 0; k < bsz; ++k) {
        const Patch& p = data.train[order[done + k]];
        x = patch_input(p, scale);
        net.forward(x, probs);
        const Eigen::VectorXi target = tissue_target(p);
        loss_sum += voxel_cross_entropy<float>(probs.m, target);
        // Fused softmax+CE gradient injected at the logits: (p - y) / vox.
        dlogits.resize_like(probs);
        dlogits.m = probs.m;
        for (Eigen::Index v = 0; v < dlogits.m.rows(); ++v) dlogits.m(v, target[v]) -= 1.0f;
        dlogits.m /= static_cast<float>(dlogits.m.rows());
        net.backward_logits(dlogits, dx, true);
      }
      opt.step(lr, 1.0 / static_cast<double>(bsz));
      done += bsz;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.train_loss = loss_sum / static_cast<double>(order.size());
    check_finite(rec.train_loss, "tseg", epoch);
    double val_sum = 0;
    long correct = 0, total = 0;
    for (const Patch& p : data.val) {
      x = patch_input(p, scale);
      net.forward(x, probs);
      const Eigen::VectorXi target = tissue_target(p);
      val_sum += voxel_cross_entropy<float>(probs.m, target);
      for (Eigen::Index v = 0; v < probs.m.rows(); ++v) {
        Eigen::Index cls;
        probs.m.row(v).maxCoeff(&cls);
        correct += cls == target[v];
        ++total;
      }
    }
    rec.val_loss = val_sum / static_cast<double>(data.val.size());
    rec.val_metric = static_cast<double>(correct) / static_cast<double>(total);
    check_finite(rec.val_loss, "tseg", epoch);
    finish_epoch(res, rec, cb);
  }
  return res;
}

TrainResult train_cls(ClsNet& net, const StageConfig& cfg, const TrainData& data,
                      const EpochCallback& cb) {
  cfg.validate();
  if (cfg.stage != Stage::cls) throw ConfigError("train_cls: wrong stage in config");
  require_data(data, "cls");
  const double scale = net.spec().intensity_scale;
  Adam opt(net.params());
  TrainResult res;
  Tensor x, dx;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const double lr = cfg.lr.at(epoch - 1, cfg.epochs);
    const auto order = shuffled_indices(data.train.size(), mix_seed(cfg.seed, 0xc150u + epoch));
    double loss_sum = 0;
    std::size_t done = 0;
    while (done < order.size()) {
      const auto bsz = std::min<std::size_t>(cfg.batch_size, order.size() - done);
      opt.zero_grad();
      for (std::size_t k = 0; k < bsz; ++k) {
        const Patch& p = data.train[order[done + k]];
        const int y = label_of(p);
        x = patch_input(p, scale);
        const Eigen::Vector2f pr = net.forward(x);
        loss_sum += categorical_cross_entropy<float>(pr, y);
        Eigen::Vector2f dlogits = pr;
        dlogits[y] -= 1.0f;
        net.backward_logits(dlogits, dx, true);
      }
      opt.step(lr, 1.0 / static_cast<double>(bsz));
      done += bsz;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.train_loss = loss_sum / static_cast<double>(order.size());
    check_finite(rec.train_loss, "cls", epoch);
    double val_sum = 0;
    int correct = 0;
    for (const Patch& p : data.val) {
      const int y = label_of(p);
      x = patch_input(p, scale);
      const Eigen::Vector2f pr = net.forward(x);
      val_sum += categorical_cross_entropy<float>(pr, y);
      correct += (pr[1] >= pr[0]) == (y == 1);
    }
    rec.val_loss = val_sum / static_cast<double>(data.val.size());
    rec.val_metric = static_cast<double>(correct) / static_cast<double>(data.val.size());
    check_finite(rec.val_loss, "cls", epoch);
    finish_epoch(res, rec, cb);
  }
  return res;
}

namespace {

struct CmgSample {
  double loss = 0;
  Tensor cf;
  bool flipped = false;
};

// Forward through CMG and the frozen classifier; when dcf is non-null the
// sample also backpropagates (classifier gradients are never accumulated).
CmgSample cmg_forward(CmgNet& net, ClsNet& cls, const Patch& p, const CmgLossWeights& w,
                      double scale, Tensor* dcf) {
  CmgSample out;
  const int y = label_of(p);
  const int flip = 1 - y;
  const SwitchState sw = y == 1 ? SwitchState::remove : SwitchState::seed;
  const float sign = y == 1 ? -1.0f : 1.0f;  // pseudo = x + sign * cf
  Tensor x = patch_input(p, scale);
  net.forward(x, sw, out.cf);
  Tensor pseudo;
  pseudo.resize_like(x);
  pseudo.m = x.m + sign * out.cf.m;
  const Eigen::Vector2f pr = cls.forward(pseudo);
  out.loss = cmg_loss<float>(out.cf.m.col(0).array(), pr, flip, w);
  out.flipped = (pr[1] >= pr[0]) == (flip == 1);
  if (dcf) {
    Eigen::Vector2f dlogits = pr;
    dlogits[flip] -= 1.0f;
    dlogits *= static_cast<float>(w.cls);
    Tensor dpseudo;
    cls.backward_logits(dlogits, dpseudo, false);
    dcf->resize_like(out.cf);
    dcf->m.col(0) = sign * dpseudo.m.col(0) +
                    cmg_loss_cf_grad<float>(out.cf.m.col(0).array(), w).matrix();
  }
  return out;
}

}  // namespace

TrainResult train_cmg(CmgNet& net, ClsNet& frozen_cls, const StageConfig& cfg,
                      const TrainData& data, const EpochCallback& cb) {
  cfg.validate();
  if (cfg.stage != Stage::cmg) throw ConfigError("train_cmg: wrong stage in config");
  require_data(data, "cmg");
  const double scale = frozen_cls.spec().intensity_scale;
  Adam opt(net.params());
  TrainResult res;
  Tensor dcf, dx;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const double lr = cfg.lr.at(epoch - 1, cfg.epochs);
    const auto order = shuffled_indices(data.train.size(), mix_seed(cfg.seed, 0xc260u + epoch));
    double loss_sum = 0;
    std::size_t done = 0;
    while (done < order.size()) {
      const auto bsz = std::min<std::size_t>(cfg.batch_size, order.size() - done);
      opt.zero_grad();
      for (std::size_t k = 0; k < bsz; ++k) {
        const Patch& p = data.train[order[done + k]];
        const CmgSample s = cmg_forward(net, frozen_cls, p, cfg.loss_weights, scale, &dcf);
        loss_sum += s.loss;
        net.backward(dcf, dx, true);
      }
      opt.step(lr, 1.0 / static_cast<double>(bsz));
      done += bsz;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.train_loss = loss_sum / static_cast<double>(order.size());
    check_finite(rec.train_loss, "cmg", epoch);
    double val_sum = 0;
    int flipped = 0;
    for (const Patch& p : data.val) {
      const CmgSample s = cmg_forward(net, frozen_cls, p, cfg.loss_weights, scale, nullptr);
      val_sum += s.loss;
      flipped += s.flipped;
    }
    rec.val_loss = val_sum / static_cast<double>(data.val.size());
    rec.val_metric = static_cast<double>(flipped) / static_cast<double>(data.val.size());
    check_finite(rec.val_loss, "cmg", epoch);
    finish_epoch(res, rec, cb);
  }
  return res;
}

TrainResult train_pseg(PsegNet& net, const FusionSet& fusion, const StageConfig& cfg,
                       const TrainData& data, const EpochCallback& cb) {
  cfg.validate();
  if (cfg.stage != Stage::pseg) throw ConfigError("train_pseg: wrong stage in config");
  require_data(data, "pseg");
  if (net.in_channels() != fusion.channels())
    throw ConfigError("train_pseg: network expects " + std::to_string(net.in_channels()) +
                      " channels but fusion '" + fusion.label() + "' provides " +
                      std::to_string(fusion.channels()));
  const double scale = net.spec().intensity_scale;
  Adam opt(net.params());
  TrainResult res;
  Tensor x, prob, dlogits, dx;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const double lr = cfg.lr.at(epoch - 1, cfg.epochs);
    const auto order = shuffled_indices(data.train.size(), mix_seed(cfg.seed, 0x95e6u + epoch));
    double loss_sum = 0;
    std::size_t done = 0;
    while (done < order.size()) {
      const auto bsz = std::min<std::size_t>(cfg.batch_size, order.size() - done);
      opt.zero_grad();
      for (std::size_t k = 0; k < bsz; ++k) {
        const Patch& p = data.train[order[done + k]];
        x = fused_input(p, fusion, scale);
        net.forward(x, prob);
        const Eigen::ArrayXf target = p.channel("lesion");
        const auto pc = prob.m.col(0).array();
        loss_sum += dice_loss<float>(pc, target);
        const Eigen::ArrayXf dprob = dice_loss_grad<float>(pc, target);
        dlogits.resize_like(prob);
        dlogits.m.col(0) = (dprob * pc * (1.0f - pc)).matrix();
        net.backward_logits(dlogits, dx, true);
      }
      opt.step(lr, 1.0 / static_cast<double>(bsz));
      done += bsz;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.train_loss = loss_sum / static_cast<double>(order.size());
    check_finite(rec.train_loss, "pseg", epoch);
    double val_sum = 0;
    for (const Patch& p : data.val) {
      x = fused_input(p, fusion, scale);
      net.forward(x, prob);
      val_sum += dice_loss<float>(prob.m.col(0).array(), p.channel("lesion"));
    }
    rec.val_loss = val_sum / static_cast<double>(data.val.size());
    rec.val_metric = 1.0 - rec.val_loss;
    check_finite(rec.val_loss, "pseg", epoch);
    finish_epoch(res, rec, cb);
  }
  return res;
}

void add_model_channels(std::vector<Patch>& patches, TsegNet& tseg, CmgNet& cmg) {
  const double scale = tseg.spec().intensity_scale;
  Tensor probs, cf;
  for (Patch& p : patches) {
    const Tensor x = patch_input(p, scale);
    tseg.forward(x, probs);
    for (int c = 0; c < 4; ++c) p.data["sp" + std::to_string(c)] = probs.m.col(c).array();
    cmg.forward(x, SwitchState::remove, cf);
    p.data["cf"] = cf.m.col(0).array();
  }
}

FlipRates measure_flip_rates(CmgNet& cmg, ClsNet& cls, const std::vector<Patch>& patches) {
  const double scale = cls.spec().intensity_scale;
  const CmgLossWeights w;  // weights do not affect the argmax
  FlipRates out;
  int flip_pos = 0, flip_neg = 0;
  for (const Patch& p : patches) {
    const CmgSample s = cmg_forward(cmg, cls, p, w, scale, nullptr);
    if (p.label == PatchLabel::positive) {
      ++out.n_positive;
      flip_pos += s.flipped;
    } else {
      ++out.n_negative;
      flip_neg += s.flipped;
    }
  }
  if (out.n_positive > 0) out.removed = static_cast<double>(flip_pos) / out.n_positive;
  if (out.n_negative > 0) out.seeded = static_cast<double>(flip_neg) / out.n_negative;
  return out;
}

}  // namespace pwml
