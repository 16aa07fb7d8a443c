#pragma once

#include <Eigen/Dense>
#include <cmath>

#include "pwml/common.hpp"

namespace pwml {

// Losses are templated on the scalar so gradient checks can run in double
// while training runs in float.

template <typename S>
using ArrX = Eigen::Array<S, Eigen::Dynamic, 1>;
template <typename S>
using VecX = Eigen::Matrix<S, Eigen::Dynamic, 1>;
template <typename S>
using MatX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;

// Guard for log() on probabilities that can underflow to 0 in float; keeps
// logged loss values finite. Gradients in the trainers bypass 1/p entirely
// (they are fused with softmax), so this only affects reported numbers.
template <typename S>
S safe_log(S p) {
  return std::log(std::max(p, static_cast<S>(1e-12)));
}

/// Mean negative log-likelihood over voxels; pred is (vox x classes)
/// probabilities, target holds class indices.
template <typename S>
S voxel_cross_entropy(const MatX<S>& pred, const Eigen::VectorXi& target) {
  if (pred.rows() != target.size())
    throw ValidationError("voxel_cross_entropy: voxel count mismatch");
  S sum = 0;
  for (Eigen::Index v = 0; v < pred.rows(); ++v) {
    const int t = target[v];
    if (t < 0 || t >= pred.cols())
      throw ValidationError("voxel_cross_entropy: target class out of range");
    sum -= safe_log(pred(v, t));
  }
  return sum / static_cast<S>(pred.rows());
}

/// d(voxel_cross_entropy)/d(pred); nonzero only at target entries.
template <typename S>
MatX<S> voxel_cross_entropy_grad(const MatX<S>& pred, const Eigen::VectorXi& target) {
  MatX<S> g = MatX<S>::Zero(pred.rows(), pred.cols());
  const S inv_n = static_cast<S>(1) / static_cast<S>(pred.rows());
  for (Eigen::Index v = 0; v < pred.rows(); ++v)
    g(v, target[v]) = -inv_n / pred(v, target[v]);
  return g;
}

/// Single-sample NLL for the patch classifier.
template <typename S>
S categorical_cross_entropy(const VecX<S>& pred, int label) {
  if (label < 0 || label >= pred.size())
    throw ValidationError("categorical_cross_entropy: label out of range");
  return -safe_log(pred[label]);
}

template <typename S>
VecX<S> categorical_cross_entropy_grad(const VecX<S>& pred, int label) {
  VecX<S> g = VecX<S>::Zero(pred.size());
  g[label] = static_cast<S>(-1) / pred[label];
  return g;
}

/// Batch mean of per-sample NLL; pred is (n x classes).
template <typename S>
S categorical_cross_entropy_mean(const MatX<S>& pred, const Eigen::VectorXi& labels) {
  if (pred.rows() != labels.size())
    throw ValidationError("categorical_cross_entropy_mean: batch size mismatch");
  S sum = 0;
  for (Eigen::Index i = 0; i < pred.rows(); ++i)
    sum += categorical_cross_entropy<S>(pred.row(i).transpose(), labels[i]);
  return sum / static_cast<S>(pred.rows());
}

constexpr double kDiceEps = 1e-5;

/// 1 - (2*sum(p*t) + eps) / (sum(p) + sum(t) + eps), eps = 1e-5.
template <typename S>
S dice_loss(const ArrX<S>& pred, const ArrX<S>& target) {
  if (pred.size() != target.size()) throw ValidationError("dice_loss: shape mismatch");
  const S eps = static_cast<S>(kDiceEps);
  const S num = 2 * (pred * target).sum() + eps;
  const S den = pred.sum() + target.sum() + eps;
  return 1 - num / den;
}

template <typename S>
ArrX<S> dice_loss_grad(const ArrX<S>& pred, const ArrX<S>& target) {
  if (pred.size() != target.size()) throw ValidationError("dice_loss: shape mismatch");
  const S eps = static_cast<S>(kDiceEps);
  const S num = 2 * (pred * target).sum() + eps;
  const S den = pred.sum() + target.sum() + eps;
  // d/dp_i [1 - num/den] = -(2*t_i*den - num) / den^2
  return -(2 * target * den - num) / (den * den);
}

enum class Direction { removed, seeded };

inline std::string to_string(Direction d) { return d == Direction::removed ? "removed" : "seeded"; }

/// A patch pushed toward the opposite class: removed = patch - cf,
/// seeded = patch + cf.
template <typename S>
struct PseudoPatch {
  ArrX<S> data;
  Direction direction;
};

template <typename S>
PseudoPatch<S> transform_patch(const ArrX<S>& patch, const ArrX<S>& cf, Direction direction) {
  if (patch.size() != cf.size()) throw ValidationError("transform_patch: shape mismatch");
  if ((cf < 0).any()) throw ValidationError("transform_patch: cf map has negative entries");
  PseudoPatch<S> out;
  out.direction = direction;
  out.data = direction == Direction::removed ? (patch - cf).eval() : (patch + cf).eval();
  return out;
}

struct CmgLossWeights {
  double l1 = 1.0;
  double l2 = 1.0;
  double cls = 1.0;
};

/// Sparsity (L1 + L2 means over the cf map) plus classification loss against
/// the flipped label.
template <typename S>
S cmg_loss(const ArrX<S>& cf, const VecX<S>& pseudo_pred, int flipped_label,
           const CmgLossWeights& w) {
  if (w.l1 < 0 || w.l2 < 0 || w.cls < 0) throw ConfigError("cmg_loss: weights must be >= 0");
  const S n = static_cast<S>(cf.size());
  return static_cast<S>(w.l1) * cf.abs().sum() / n +
         static_cast<S>(w.l2) * cf.square().sum() / n +
         static_cast<S>(w.cls) * categorical_cross_entropy<S>(pseudo_pred, flipped_label);
}

/// Gradient of the explicit sparsity terms w.r.t. cf. The classification term
/// reaches cf only through the network; trainers propagate that part
/// separately.
template <typename S>
ArrX<S> cmg_loss_cf_grad(const ArrX<S>& cf, const CmgLossWeights& w) {
  const S n = static_cast<S>(cf.size());
  const ArrX<S> sgn = cf.unaryExpr([](S v) {
    return v > 0 ? static_cast<S>(1) : (v < 0 ? static_cast<S>(-1) : static_cast<S>(0));
  });
  return (static_cast<S>(w.l1) * sgn + static_cast<S>(w.l2) * 2 * cf) / n;
}

template <typename S>
VecX<S> cmg_loss_pred_grad(const VecX<S>& pseudo_pred, int flipped_label,
                           const CmgLossWeights& w) {
  return static_cast<S>(w.cls) *
         categorical_cross_entropy_grad<S>(pseudo_pred, flipped_label);
}

}  // namespace pwml
