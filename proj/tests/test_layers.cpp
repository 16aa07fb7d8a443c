#include <doctest.h>

#include "pwml/layers.hpp"

using namespace pwml;

namespace {

Tensor random_tensor(int c, int d, int h, int w, Rng& rng) {
  Tensor t(c, d, h, w);
  for (Eigen::Index i = 0; i < t.m.size(); ++i)
    t.m.data()[i] = static_cast<float>(rng.normal());
  return t;
}

float dot(const Tensor& a, const Tensor& b) {
  return (a.m.array() * b.m.array()).sum();
}

}  // namespace

TEST_CASE("conv k=3 counts its neighbourhood on an all-ones input") {
  Conv3d conv("c", 1, 1, 3);
  std::vector<ParamRef> params;
  conv.collect(params);
  REQUIRE(params.size() == 2);
  REQUIRE(params[0].size == 27);
  for (Eigen::Index i = 0; i < 27; ++i) params[0].value[i] = 1.0f;
  params[1].value[0] = 0.5f;
  Tensor x(1, 3, 3, 3);
  x.m.setOnes();
  Tensor y;
  conv.forward(x, y);
  // Zero padding: output = (#in-bounds neighbours) + bias.
  CHECK(y.m(x.vox() / 2, 0) == 27.5f);  // centre (1,1,1)
  CHECK(y.m(0, 0) == 8.5f);             // corner (0,0,0)
  CHECK(y.m(1, 0) == 12.5f);            // edge centre (1,0,0)
  CHECK(y.m(4, 0) == 18.5f);            // face centre (1,1,0)
}

TEST_CASE("conv k=3 shifts a delta by the kernel offset") {
  Conv3d conv("c", 1, 1, 3);
  std::vector<ParamRef> params;
  conv.collect(params);
  // Kernel nonzero only at offset (dz,dy,dx) = (-1, 0, +1): o = 0*9 + 1*3 + 2.
  for (Eigen::Index i = 0; i < 27; ++i) params[0].value[i] = 0.0f;
  params[0].value[5] = 2.0f;
  Tensor x(1, 4, 4, 4);
  x.m.setZero();
  const auto at = [&](int xx, int yy, int zz) { return xx + 4 * (yy + 4 * zz); };
  x.m(at(2, 2, 2), 0) = 1.0f;
  Tensor y;
  conv.forward(x, y);
  // y(v) = sum_o w[o] * x(v + off(o)), so the response lands where
  // v + (+1,0,-1) hits the delta: v = (1, 2, 3).
  CHECK(y.m(at(1, 2, 3), 0) == 2.0f);
  CHECK(y.m.array().abs().sum() == 2.0f);
}

TEST_CASE("conv k=1 is a per-voxel channel mix") {
  Conv3d conv("c", 2, 1, 1);
  std::vector<ParamRef> params;
  conv.collect(params);
  params[0].value[0] = 3.0f;
  params[0].value[1] = -1.0f;
  params[1].value[0] = 10.0f;
  Tensor x(2, 2, 2, 2);
  x.m.col(0).setConstant(2.0f);
  x.m.col(1).setConstant(5.0f);
  Tensor y;
  conv.forward(x, y);
  CHECK(y.c == 1);
  for (Eigen::Index v = 0; v < y.vox(); ++v) CHECK(y.m(v, 0) == doctest::Approx(11.0f));
}

TEST_CASE("conv backward satisfies the adjoint identity") {
  // <dy, A x> == <A^T dy, x> for the linear part (bias removed by x=0 probe).
  Rng rng(21);
  for (int k : {1, 3}) {
    Conv3d conv("c", 3, 2, k);
    conv.init(rng);
    Tensor x = random_tensor(3, 4, 5, 6, rng);
    Tensor y;
    conv.forward(x, y);
    Tensor zero(3, 4, 5, 6);
    Tensor bias_only;
    conv.forward(zero, bias_only);
    Tensor ax;
    ax.resize_like(y);
    ax.m = y.m - bias_only.m;
    Tensor dy = random_tensor(2, 4, 5, 6, rng);
    conv.forward(x, y);  // restore cache
    Tensor dx;
    conv.backward(dy, dx, false);
    const float lhs = dot(dy, ax);
    const float rhs = dot(dx, x);
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-4));
  }
}

TEST_CASE("conv weight gradient matches finite differences") {
  Rng rng(8);
  Conv3d conv("c", 2, 2, 3);
  conv.init(rng);
  Tensor x = random_tensor(2, 3, 3, 3, rng);
  Tensor g = random_tensor(2, 3, 3, 3, rng);  // dL/dy for L = <g, y>
  Tensor y, dx;
  conv.forward(x, y);
  conv.backward(g, dx, true);
  std::vector<ParamRef> params;
  conv.collect(params);
  Rng pick(99);
  for (const ParamRef& p : params) {
    for (int probe = 0; probe < 4; ++probe) {
      const Eigen::Index i = pick.uniform_int(0, static_cast<int>(p.size) - 1);
      const float keep = p.value[i];
      const float h = 1e-2f;
      p.value[i] = keep + h;
      conv.forward(x, y);
      const float up = dot(g, y);
      p.value[i] = keep - h;
      conv.forward(x, y);
      const float dn = dot(g, y);
      p.value[i] = keep;
      const float fd = (up - dn) / (2.0f * h);
      CHECK(p.grad[i] == doctest::Approx(fd).epsilon(5e-2));
    }
  }
}

TEST_CASE("relu clamps and gates") {
  Relu relu;
  Tensor x(1, 1, 1, 4);
  x.m << -2.0f, -0.5f, 0.0f, 3.0f;
  Tensor y;
  relu.forward(x, y);
  CHECK(y.m(0, 0) == 0.0f);
  CHECK(y.m(1, 0) == 0.0f);
  CHECK(y.m(2, 0) == 0.0f);
  CHECK(y.m(3, 0) == 3.0f);
  Tensor dy(1, 1, 1, 4);
  dy.m.setOnes();
  Tensor dx;
  relu.backward(dy, dx);
  CHECK(dx.m(0, 0) == 0.0f);
  CHECK(dx.m(3, 0) == 1.0f);
}

TEST_CASE("avgpool halves dims and averages blocks") {
  AvgPool2 pool;
  Tensor x(1, 2, 2, 2);
  x.m << 1, 2, 3, 4, 5, 6, 7, 8;
  Tensor y;
  pool.forward(x, y);
  CHECK(y.d == 1);
  CHECK(y.h == 1);
  CHECK(y.w == 1);
  CHECK(y.m(0, 0) == doctest::Approx(4.5f));
  Tensor dy(1, 1, 1, 1);
  dy.m(0, 0) = 8.0f;
  Tensor dx;
  pool.backward(dy, dx);
  for (Eigen::Index i = 0; i < 8; ++i) CHECK(dx.m(i, 0) == doctest::Approx(1.0f));
  Tensor odd(1, 3, 2, 2);
  Tensor tmp;
  CHECK_THROWS_AS(pool.forward(odd, tmp), ValidationError);
}

TEST_CASE("upsample repeats voxels and its backward sums children") {
  Upsample2 up;
  Tensor x(1, 1, 1, 2);
  x.m << 3.0f, 7.0f;
  Tensor y;
  up.forward(x, y);
  CHECK(y.d == 2);
  CHECK(y.h == 2);
  CHECK(y.w == 4);
  const auto at = [&](int xx, int yy, int zz) { return xx + 4 * (yy + 2 * zz); };
  CHECK(y.m(at(0, 0, 0), 0) == 3.0f);
  CHECK(y.m(at(1, 1, 1), 0) == 3.0f);
  CHECK(y.m(at(2, 0, 1), 0) == 7.0f);
  CHECK(y.m(at(3, 1, 0), 0) == 7.0f);
  Tensor dy(1, 2, 2, 4);
  dy.m.setOnes();
  Tensor dx;
  up.backward(dy, dx);
  CHECK(dx.m(0, 0) == 8.0f);
  CHECK(dx.m(1, 0) == 8.0f);
}

TEST_CASE("pool then upsample preserves a constant field") {
  Rng rng(4);
  AvgPool2 pool;
  Upsample2 up;
  Tensor x(2, 4, 4, 4);
  x.m.col(0).setConstant(2.5f);
  x.m.col(1).setConstant(-1.0f);
  Tensor mid, back;
  pool.forward(x, mid);
  up.forward(mid, back);
  CHECK(back.same_shape(x));
  CHECK((back.m - x.m).cwiseAbs().maxCoeff() == 0.0f);
}

TEST_CASE("linear layer forward and adjoint") {
  Linear fc("fc", 3, 2);
  std::vector<ParamRef> params;
  fc.collect(params);
  // w is in x out, column-major: w(i,j) = weight from input i to output j.
  float wvals[6] = {1, 2, 3, 4, 5, 6};  // col0 = (1,2,3), col1 = (4,5,6)
  for (int i = 0; i < 6; ++i) params[0].value[i] = wvals[i];
  params[1].value[0] = 0.5f;
  params[1].value[1] = -0.5f;
  Eigen::VectorXf x(3);
  x << 1, 1, 2;
  Eigen::VectorXf y;
  fc.forward(x, y);
  CHECK(y[0] == doctest::Approx(1 + 2 + 6 + 0.5));
  CHECK(y[1] == doctest::Approx(4 + 5 + 12 - 0.5));
  Eigen::VectorXf dy(2);
  dy << 1, -1;
  Eigen::VectorXf dx;
  fc.backward(dy, dx, true);
  CHECK(dx[0] == doctest::Approx(1 - 4));
  CHECK(dx[1] == doctest::Approx(2 - 5));
  CHECK(dx[2] == doctest::Approx(3 - 6));
  // dW = x dy^T
  CHECK(params[0].grad[0] == doctest::Approx(1.0f));
  CHECK(params[0].grad[2] == doctest::Approx(2.0f));
  CHECK(params[0].grad[3] == doctest::Approx(-1.0f));
  CHECK(params[1].grad[1] == doctest::Approx(-1.0f));
}

TEST_CASE("global average pool and its backward") {
  GlobalAvgPool gap;
  Tensor x(2, 1, 2, 2);
  x.m.col(0) << 1, 2, 3, 4;
  x.m.col(1) << 10, 10, 10, 10;
  Eigen::VectorXf y;
  gap.forward(x, y);
  REQUIRE(y.size() == 2);
  CHECK(y[0] == doctest::Approx(2.5f));
  CHECK(y[1] == doctest::Approx(10.0f));
  Eigen::VectorXf dy(2);
  dy << 4.0f, 8.0f;
  Tensor dx;
  gap.backward(dy, dx);
  CHECK(dx.m(0, 0) == doctest::Approx(1.0f));
  CHECK(dx.m(3, 1) == doctest::Approx(2.0f));
}

TEST_CASE("softmax rows are simplex points with known values") {
  Eigen::MatrixXf logits(2, 2);
  logits << 0.0f, std::log(3.0f), 5.0f, 5.0f;
  Eigen::MatrixXf probs;
  softmax_rows(logits, probs);
  CHECK(probs(0, 0) == doctest::Approx(0.25));
  CHECK(probs(0, 1) == doctest::Approx(0.75));
  CHECK(probs(1, 0) == doctest::Approx(0.5));
  CHECK(probs.rowwise().sum().minCoeff() == doctest::Approx(1.0));
}

TEST_CASE("softmax backward matches the analytic jacobian") {
  Eigen::MatrixXf probs(1, 2);
  probs << 0.25f, 0.75f;
  Eigen::MatrixXf dprobs(1, 2);
  dprobs << 1.0f, 0.0f;
  Eigen::MatrixXf dlogits;
  softmax_rows_backward(probs, dprobs, dlogits);
  // dlogits = p * (dp - <p, dp>): hand-derived values.
  CHECK(dlogits(0, 0) == doctest::Approx(0.1875));
  CHECK(dlogits(0, 1) == doctest::Approx(-0.1875));
}

TEST_CASE("tensor channel concat and split roundtrip") {
  Rng rng(2);
  Tensor a = random_tensor(2, 2, 2, 2, rng);
  Tensor b = random_tensor(3, 2, 2, 2, rng);
  Tensor cat = concat_channels(a, b);
  CHECK(cat.c == 5);
  Tensor a2, b2;
  split_channels(cat, 2, a2, b2);
  CHECK((a2.m - a.m).cwiseAbs().maxCoeff() == 0.0f);
  CHECK((b2.m - b.m).cwiseAbs().maxCoeff() == 0.0f);
  Tensor wrong(1, 3, 2, 2);
  CHECK_THROWS_AS(concat_channels(a, wrong), ValidationError);
}
