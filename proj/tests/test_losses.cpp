#include <doctest.h>

#include <cmath>

#include "pwml/losses.hpp"
#include "pwml/rng.hpp"

using namespace pwml;

namespace {

double rel_err(double a, double b) {
  return std::abs(a - b) / std::max(1e-12, std::abs(a) + std::abs(b));
}

}  // namespace

TEST_CASE("safe_log clamps at 1e-12") {
  CHECK(safe_log(0.0) == std::log(1e-12));
  CHECK(safe_log(1e-15) == std::log(1e-12));
  CHECK(safe_log(0.5) == std::log(0.5));
}

TEST_CASE("voxel cross entropy matches hand-worked values") {
  // Two voxels, four classes. Row 0 uniform (target 2): -ln(1/4) = 2 ln 2.
  // Row 1 = [.5 .25 .125 .125] (target 0): ln 2. Mean = 1.5 ln 2.
  MatX<double> pred(2, 4);
  pred.row(0) << 0.25, 0.25, 0.25, 0.25;
  pred.row(1) << 0.5, 0.25, 0.125, 0.125;
  Eigen::VectorXi target(2);
  target << 2, 0;
  CHECK(voxel_cross_entropy<double>(pred, target) == doctest::Approx(1.5 * std::log(2.0)).epsilon(1e-12));

  // Gradient is -1/(p_t * N) at target entries, zero elsewhere.
  MatX<double> g = voxel_cross_entropy_grad<double>(pred, target);
  CHECK(g(0, 2) == doctest::Approx(-1.0 / (0.25 * 2)).epsilon(1e-12));
  CHECK(g(1, 0) == doctest::Approx(-1.0 / (0.5 * 2)).epsilon(1e-12));
  CHECK(g(0, 0) == 0.0);
  CHECK(g(1, 3) == 0.0);
}

TEST_CASE("voxel cross entropy rejects bad targets") {
  MatX<double> pred = MatX<double>::Constant(2, 4, 0.25);
  Eigen::VectorXi target(2);
  target << 0, 4;
  CHECK_THROWS_AS(voxel_cross_entropy<double>(pred, target), ValidationError);
  target << -1, 0;
  CHECK_THROWS_AS(voxel_cross_entropy<double>(pred, target), ValidationError);
  Eigen::VectorXi short_target(1);
  short_target << 0;
  CHECK_THROWS_AS(voxel_cross_entropy<double>(pred, short_target), ValidationError);
}

TEST_CASE("categorical cross entropy hand values and gradient") {
  VecX<double> pred(2);
  pred << 0.25, 0.75;
  CHECK(categorical_cross_entropy<double>(pred, 1) == doctest::Approx(std::log(4.0 / 3.0)).epsilon(1e-12));
  CHECK(categorical_cross_entropy<double>(pred, 0) == doctest::Approx(std::log(4.0)).epsilon(1e-12));

  VecX<double> g = categorical_cross_entropy_grad<double>(pred, 1);
  CHECK(g[0] == 0.0);
  CHECK(g[1] == doctest::Approx(-4.0 / 3.0).epsilon(1e-12));

  MatX<double> batch(2, 2);
  batch.row(0) << 0.25, 0.75;
  batch.row(1) << 0.25, 0.75;
  Eigen::VectorXi labels(2);
  labels << 1, 0;
  const double want = 0.5 * (std::log(4.0 / 3.0) + std::log(4.0));
  CHECK(categorical_cross_entropy_mean<double>(batch, labels) == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("dice loss integer-ratio oracle") {
  // pred [1,0,1,0] vs target [1,1,0,0]: overlap 1, sums 2+2.
  // With eps = 1e-5 the loss is exactly 200000/400001 in rational arithmetic.
  ArrX<double> pred(4), target(4);
  pred << 1, 0, 1, 0;
  target << 1, 1, 0, 0;
  CHECK(dice_loss<double>(pred, target) == doctest::Approx(200000.0 / 400001.0).epsilon(1e-12));

  // Perfect overlap: numerator equals denominator bit-for-bit, loss 0.
  CHECK(dice_loss<double>(target, target) == 0.0);

  // Both empty: (0+eps)/(0+eps) = 1 exactly, loss 0.
  ArrX<double> zero = ArrX<double>::Zero(4);
  CHECK(dice_loss<double>(zero, zero) == 0.0);

  ArrX<double> five = ArrX<double>::Zero(5);
  CHECK_THROWS_AS(dice_loss<double>(pred, five), ValidationError);
}

TEST_CASE("dice loss gradient vs central differences") {
  Rng rng(41);
  ArrX<double> pred(64), target(64);
  for (int i = 0; i < 64; ++i) {
    pred[i] = rng.uniform(0.05, 0.95);
    target[i] = rng.uniform() < 0.3 ? 1.0 : 0.0;
  }
  const ArrX<double> g = dice_loss_grad<double>(pred, target);
  const double h = 1e-6;
  for (int i = 0; i < 64; i += 7) {
    const double keep = pred[i];
    pred[i] = keep + h;
    const double up = dice_loss<double>(pred, target);
    pred[i] = keep - h;
    const double dn = dice_loss<double>(pred, target);
    pred[i] = keep;
    CHECK(rel_err(g[i], (up - dn) / (2 * h)) < 1e-6);
  }
}

TEST_CASE("transform_patch applies the direction sign") {
  ArrX<float> patch(3), cf(3);
  patch << 1.0f, 2.0f, 3.0f;
  cf << 0.5f, 0.0f, 1.0f;

  const PseudoPatch<float> removed = transform_patch<float>(patch, cf, Direction::removed);
  CHECK(removed.direction == Direction::removed);
  CHECK(removed.data[0] == 0.5f);
  CHECK(removed.data[1] == 2.0f);
  CHECK(removed.data[2] == 2.0f);

  const PseudoPatch<float> seeded = transform_patch<float>(patch, cf, Direction::seeded);
  CHECK(seeded.data[0] == 1.5f);
  CHECK(seeded.data[2] == 4.0f);
}

TEST_CASE("transform_patch validates its inputs") {
  ArrX<float> patch(3), cf(3);
  patch.setZero();
  cf << 0.0f, -0.1f, 0.0f;
  CHECK_THROWS_AS(transform_patch<float>(patch, cf, Direction::removed), ValidationError);
  ArrX<float> cf2 = ArrX<float>::Zero(2);
  CHECK_THROWS_AS(transform_patch<float>(patch, cf2, Direction::removed), ValidationError);
}

TEST_CASE("cmg loss hand value") {
  // cf = [0.5, 1.5]: mean|cf| = 1, mean cf^2 = 1.25; pred [0.25, 0.75],
  // flipped label 1: CE = ln(4/3). Unit weights sum the three terms.
  ArrX<double> cf(2);
  cf << 0.5, 1.5;
  VecX<double> pred(2);
  pred << 0.25, 0.75;
  CmgLossWeights w;
  CHECK(cmg_loss<double>(cf, pred, 1, w) == doctest::Approx(2.25 + std::log(4.0 / 3.0)).epsilon(1e-12));

  CmgLossWeights bad;
  bad.l1 = -1.0;
  CHECK_THROWS_AS(cmg_loss<double>(cf, pred, 1, bad), ConfigError);
}

TEST_CASE("cmg loss gradients vs central differences") {
  Rng rng(42);
  ArrX<double> cf(64);
  for (int i = 0; i < 64; ++i) cf[i] = rng.uniform(0.1, 2.0);  // keep |.| smooth
  VecX<double> pred(2);
  pred << 0.3, 0.7;
  CmgLossWeights w;
  w.l1 = 0.7;
  w.l2 = 1.3;
  w.cls = 2.0;
  const int flip = 0;
  const double h = 1e-6;

  // d/d(cf): the classification term reads pred, not cf, so the sparsity
  // gradient is the whole story.
  const ArrX<double> gcf = cmg_loss_cf_grad<double>(cf, w);
  for (int i = 0; i < 64; i += 9) {
    const double keep = cf[i];
    cf[i] = keep + h;
    const double up = cmg_loss<double>(cf, pred, flip, w);
    cf[i] = keep - h;
    const double dn = cmg_loss<double>(cf, pred, flip, w);
    cf[i] = keep;
    CHECK(rel_err(gcf[i], (up - dn) / (2 * h)) < 1e-6);
  }

  const VecX<double> gp = cmg_loss_pred_grad<double>(pred, flip, w);
  for (int i = 0; i < 2; ++i) {
    const double keep = pred[i];
    pred[i] = keep + h;
    const double up = cmg_loss<double>(cf, pred, flip, w);
    pred[i] = keep - h;
    const double dn = cmg_loss<double>(cf, pred, flip, w);
    pred[i] = keep;
    CHECK(rel_err(gp[i], (up - dn) / (2 * h)) < 1e-6);
  }
}
