#include "pwml/layers.hpp"

#include <cmath>
#include <cstring>

namespace pwml {

namespace {

// Shared scratch. The stack is single-threaded per network evaluation; these
// only ever grow to the largest layer in the model.
thread_local std::vector<float> g_cols;
thread_local std::vector<float> g_dcols;
thread_local std::vector<float> g_pad;

float* grow(std::vector<float>& buf, std::size_t n) {
  if (buf.size() < n) buf.resize(n);
  return buf.data();
}

// Gather the padded 3x3x3 neighbourhood matrix: cols is (vox x 27*c),
// column ci*27 + o where o indexes the (dz,dy,dx) offset.
void im2col3(const Tensor& x, float* cols) {
  const int d = x.d, h = x.h, w = x.w;
  const int pd = d + 2, ph = h + 2, pw = w + 2;
  const Eigen::Index vox = x.vox();
  float* pad = grow(g_pad, static_cast<std::size_t>(pd) * ph * pw);
  for (int ci = 0; ci < x.c; ++ci) {
    std::memset(pad, 0, sizeof(float) * static_cast<std::size_t>(pd) * ph * pw);
    const float* src = x.m.col(ci).data();
    for (int z = 0; z < d; ++z)
      for (int y = 0; y < h; ++y)
        std::memcpy(pad + (static_cast<std::size_t>(z + 1) * ph + (y + 1)) * pw + 1,
                    src + (static_cast<std::size_t>(z) * h + y) * w, sizeof(float) * w);
    for (int dz = -1; dz <= 1; ++dz)
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const int o = ((dz + 1) * 3 + (dy + 1)) * 3 + (dx + 1);
          float* dst = cols + (static_cast<std::size_t>(ci) * 27 + o) * vox;
          for (int z = 0; z < d; ++z)
            for (int y = 0; y < h; ++y)
              std::memcpy(dst + (static_cast<std::size_t>(z) * h + y) * w,
                          pad + (static_cast<std::size_t>(z + dz + 1) * ph + (y + dy + 1)) * pw +
                              (dx + 1),
                          sizeof(float) * w);
        }
  }
}

// Scatter-add the column gradients back onto the input grid (adjoint of
// im2col3).
void col2im3(const float* dcols, Tensor& dx) {
  const int d = dx.d, h = dx.h, w = dx.w;
  const int pd = d + 2, ph = h + 2, pw = w + 2;
  const Eigen::Index vox = dx.vox();
  float* pad = grow(g_pad, static_cast<std::size_t>(pd) * ph * pw);
  for (int ci = 0; ci < dx.c; ++ci) {
    std::memset(pad, 0, sizeof(float) * static_cast<std::size_t>(pd) * ph * pw);
    for (int dz = -1; dz <= 1; ++dz)
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx_ = -1; dx_ <= 1; ++dx_) {
          const int o = ((dz + 1) * 3 + (dy + 1)) * 3 + (dx_ + 1);
          const float* src = dcols + (static_cast<std::size_t>(ci) * 27 + o) * vox;
          for (int z = 0; z < d; ++z)
            for (int y = 0; y < h; ++y) {
              float* prow = pad + (static_cast<std::size_t>(z + dz + 1) * ph + (y + dy + 1)) * pw +
                            (dx_ + 1);
              const float* srow = src + (static_cast<std::size_t>(z) * h + y) * w;
              for (int x = 0; x < w; ++x) prow[x] += srow[x];
            }
        }
    float* out = dx.m.col(ci).data();
    for (int z = 0; z < d; ++z)
      for (int y = 0; y < h; ++y)
        std::memcpy(out + (static_cast<std::size_t>(z) * h + y) * w,
                    pad + (static_cast<std::size_t>(z + 1) * ph + (y + 1)) * pw + 1,
                    sizeof(float) * w);
  }
}

}  // namespace

Conv3d::Conv3d(std::string name, int in_ch, int out_ch, int ksize)
    : name_(std::move(name)), in_(in_ch), out_(out_ch), k_(ksize) {
  if (in_ch < 1 || out_ch < 1) throw ConfigError("Conv3d: channel counts must be >= 1");
  if (ksize != 1 && ksize != 3) throw ConfigError("Conv3d: kernel size must be 1 or 3");
  const Eigen::Index rows = static_cast<Eigen::Index>(k_) * k_ * k_ * in_;
  w_.setZero(rows, out_);
  wg_.setZero(rows, out_);
  b_.setZero(out_);
  bg_.setZero(out_);
}

void Conv3d::init(Rng& rng) {
  const double fan_in = static_cast<double>(w_.rows());
  const double sd = std::sqrt(2.0 / fan_in);
  for (Eigen::Index i = 0; i < w_.size(); ++i)
    w_.data()[i] = static_cast<float>(rng.normal(0.0, sd));
  b_.setZero();
}

void Conv3d::forward(const Tensor& x, Tensor& y) {
  if (x.c != in_) throw ValidationError("Conv3d " + name_ + ": expected " + std::to_string(in_) +
                                        " input channels, got " + std::to_string(x.c));
  x_ = x;
  y.c = out_;
  y.d = x.d;
  y.h = x.h;
  y.w = x.w;
  y.m.resize(x.vox(), out_);
  if (k_ == 1) {
    y.m.noalias() = x.m * w_;
  } else {
    float* cols = grow(g_cols, static_cast<std::size_t>(x.vox()) * 27 * in_);
    im2col3(x, cols);
    Eigen::Map<const Eigen::MatrixXf> cmap(cols, x.vox(), 27 * in_);
    y.m.noalias() = cmap * w_;
  }
  y.m.rowwise() += b_;
}

void Conv3d::backward(const Tensor& dy, Tensor& dx, bool accumulate_param_grads) {
  dx.resize_like(x_);
  if (k_ == 1) {
    if (accumulate_param_grads) {
      wg_.noalias() += x_.m.transpose() * dy.m;
      bg_ += dy.m.colwise().sum();
    }
    dx.m.noalias() = dy.m * w_.transpose();
    return;
  }
  const Eigen::Index vox = x_.vox();
  float* cols = grow(g_cols, static_cast<std::size_t>(vox) * 27 * in_);
  im2col3(x_, cols);
  Eigen::Map<const Eigen::MatrixXf> cmap(cols, vox, 27 * in_);
  if (accumulate_param_grads) {
    wg_.noalias() += cmap.transpose() * dy.m;
    bg_ += dy.m.colwise().sum();
  }
  float* dcols = grow(g_dcols, static_cast<std::size_t>(vox) * 27 * in_);
  Eigen::Map<Eigen::MatrixXf> dmap(dcols, vox, 27 * in_);
  dmap.noalias() = dy.m * w_.transpose();
  col2im3(dcols, dx);
}

void Conv3d::collect(std::vector<ParamRef>& out) {
  out.push_back({name_ + ".w", w_.data(), wg_.data(), w_.size()});
  out.push_back({name_ + ".b", b_.data(), bg_.data(), b_.size()});
}

void Relu::forward(const Tensor& x, Tensor& y) {
  y.c = x.c;
  y.d = x.d;
  y.h = x.h;
  y.w = x.w;
  y.m = x.m.cwiseMax(0.0f);
  y_ = y;
}

void Relu::backward(const Tensor& dy, Tensor& dx) const {
  dx.resize_like(y_);
  dx.m = (y_.m.array() > 0.0f).cast<float>() * dy.m.array();
}

void AvgPool2::forward(const Tensor& x, Tensor& y) {
  if (x.d % 2 || x.h % 2 || x.w % 2)
    throw ValidationError("AvgPool2: spatial dims must be even");
  c_ = x.c;
  d_ = x.d;
  h_ = x.h;
  w_ = x.w;
  y.c = x.c;
  y.d = x.d / 2;
  y.h = x.h / 2;
  y.w = x.w / 2;
  y.m.setZero(y.vox(), y.c);
  for (int ci = 0; ci < x.c; ++ci) {
    const float* src = x.m.col(ci).data();
    float* dst = y.m.col(ci).data();
    for (int z = 0; z < y.d; ++z)
      for (int yy = 0; yy < y.h; ++yy)
        for (int xx = 0; xx < y.w; ++xx) {
          float s = 0.0f;
          for (int dz = 0; dz < 2; ++dz)
            for (int dyy = 0; dyy < 2; ++dyy)
              for (int dxx = 0; dxx < 2; ++dxx)
                s += src[(static_cast<std::size_t>(2 * z + dz) * x.h + (2 * yy + dyy)) * x.w +
                         (2 * xx + dxx)];
          dst[(static_cast<std::size_t>(z) * y.h + yy) * y.w + xx] = s * 0.125f;
        }
  }
}

void AvgPool2::backward(const Tensor& dy, Tensor& dx) const {
  dx = Tensor(c_, d_, h_, w_);
  for (int ci = 0; ci < c_; ++ci) {
    const float* src = dy.m.col(ci).data();
    float* dst = dx.m.col(ci).data();
    for (int z = 0; z < dy.d; ++z)
      for (int yy = 0; yy < dy.h; ++yy)
        for (int xx = 0; xx < dy.w; ++xx) {
          const float g = src[(static_cast<std::size_t>(z) * dy.h + yy) * dy.w + xx] * 0.125f;
          for (int dz = 0; dz < 2; ++dz)
            for (int dyy = 0; dyy < 2; ++dyy)
              for (int dxx = 0; dxx < 2; ++dxx)
                dst[(static_cast<std::size_t>(2 * z + dz) * h_ + (2 * yy + dyy)) * w_ +
                    (2 * xx + dxx)] = g;
        }
  }
}

void Upsample2::forward(const Tensor& x, Tensor& y) {
  c_ = x.c;
  d_ = x.d;
  h_ = x.h;
  w_ = x.w;
  y.c = x.c;
  y.d = x.d * 2;
  y.h = x.h * 2;
  y.w = x.w * 2;
  y.m.resize(y.vox(), y.c);
  for (int ci = 0; ci < x.c; ++ci) {
    const float* src = x.m.col(ci).data();
    float* dst = y.m.col(ci).data();
    for (int z = 0; z < y.d; ++z)
      for (int yy = 0; yy < y.h; ++yy) {
        const float* srow = src + (static_cast<std::size_t>(z / 2) * x.h + yy / 2) * x.w;
        float* drow = dst + (static_cast<std::size_t>(z) * y.h + yy) * y.w;
        for (int xx = 0; xx < y.w; ++xx) drow[xx] = srow[xx / 2];
      }
  }
}

void Upsample2::backward(const Tensor& dy, Tensor& dx) const {
  dx = Tensor(c_, d_, h_, w_);
  for (int ci = 0; ci < c_; ++ci) {
    const float* src = dy.m.col(ci).data();
    float* dst = dx.m.col(ci).data();
    for (int z = 0; z < dy.d; ++z)
      for (int yy = 0; yy < dy.h; ++yy) {
        const float* srow = src + (static_cast<std::size_t>(z) * dy.h + yy) * dy.w;
        float* drow = dst + (static_cast<std::size_t>(z / 2) * h_ + yy / 2) * w_;
        for (int xx = 0; xx < dy.w; ++xx) drow[xx / 2] += srow[xx];
      }
  }
}

Linear::Linear(std::string name, int in_dim, int out_dim) : name_(std::move(name)) {
  if (in_dim < 1 || out_dim < 1) throw ConfigError("Linear: dims must be >= 1");
  w_.setZero(in_dim, out_dim);
  wg_.setZero(in_dim, out_dim);
  b_.setZero(out_dim);
  bg_.setZero(out_dim);
}

void Linear::init(Rng& rng) {
  const double sd = std::sqrt(2.0 / static_cast<double>(w_.rows()));
  for (Eigen::Index i = 0; i < w_.size(); ++i)
    w_.data()[i] = static_cast<float>(rng.normal(0.0, sd));
  b_.setZero();
}

void Linear::forward(const Eigen::VectorXf& x, Eigen::VectorXf& y) {
  if (x.size() != w_.rows()) throw ValidationError("Linear " + name_ + ": input size mismatch");
  x_ = x;
  y.noalias() = w_.transpose() * x + b_;
}

void Linear::backward(const Eigen::VectorXf& dy, Eigen::VectorXf& dx,
                      bool accumulate_param_grads) {
  if (accumulate_param_grads) {
    wg_.noalias() += x_ * dy.transpose();
    bg_ += dy;
  }
  dx.noalias() = w_ * dy;
}

void Linear::collect(std::vector<ParamRef>& out) {
  out.push_back({name_ + ".w", w_.data(), wg_.data(), w_.size()});
  out.push_back({name_ + ".b", b_.data(), bg_.data(), b_.size()});
}

void GlobalAvgPool::forward(const Tensor& x, Eigen::VectorXf& y) {
  c_ = x.c;
  d_ = x.d;
  h_ = x.h;
  w_ = x.w;
  y = x.m.colwise().mean();
}

void GlobalAvgPool::backward(const Eigen::VectorXf& dy, Tensor& dx) const {
  dx = Tensor(c_, d_, h_, w_);
  const float inv = 1.0f / static_cast<float>(dx.vox());
  for (int ci = 0; ci < c_; ++ci) dx.m.col(ci).setConstant(dy[ci] * inv);
}

void softmax_rows(const Eigen::MatrixXf& logits, Eigen::MatrixXf& probs) {
  probs.resize(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const float mx = logits.row(r).maxCoeff();
    float sum = 0.0f;
    for (Eigen::Index c = 0; c < logits.cols(); ++c) {
      const float e = std::exp(logits(r, c) - mx);
      probs(r, c) = e;
      sum += e;
    }
    probs.row(r) /= sum;
  }
}

void softmax_rows_backward(const Eigen::MatrixXf& probs, const Eigen::MatrixXf& dprobs,
                           Eigen::MatrixXf& dlogits) {
  dlogits.resize(probs.rows(), probs.cols());
  for (Eigen::Index r = 0; r < probs.rows(); ++r) {
    const float dot = probs.row(r).dot(dprobs.row(r));
    dlogits.row(r) = probs.row(r).array() * (dprobs.row(r).array() - dot);
  }
}

Eigen::VectorXf softmax_vector(const Eigen::VectorXf& logits) {
  const float mx = logits.maxCoeff();
  Eigen::VectorXf e = (logits.array() - mx).exp();
  return e / e.sum();
}

}  // namespace pwml
