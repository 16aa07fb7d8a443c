#pragma once

#include <string>
#include <vector>

#include "pwml/rng.hpp"
#include "pwml/tensor.hpp"

namespace pwml {

/// View into one trainable parameter blob (contiguous floats).
struct ParamRef {
  std::string name;
  float* value = nullptr;
  float* grad = nullptr;
  Eigen::Index size = 0;
};

/// 3D convolution, kernel 1 or 3, stride 1, zero padding k/2 (shape
/// preserving). Weights are (k^3 * in_ch) x out_ch so the forward pass is a
/// single GEMM against the im2col matrix.
class Conv3d {
 public:
  Conv3d() = default;
  Conv3d(std::string name, int in_ch, int out_ch, int ksize);

  void init(Rng& rng);  // He-normal weights, zero bias
  void forward(const Tensor& x, Tensor& y);
  void backward(const Tensor& dy, Tensor& dx, bool accumulate_param_grads);
  void collect(std::vector<ParamRef>& out);
  Eigen::Index param_count() const { return w_.size() + b_.size(); }
  int in_channels() const { return in_; }
  int out_channels() const { return out_; }

 private:
  std::string name_;
  int in_ = 0, out_ = 0, k_ = 1;
  Eigen::MatrixXf w_, wg_;
  Eigen::RowVectorXf b_, bg_;
  Tensor x_;  // cached input for the weight-gradient GEMM
};

class Relu {
 public:
  void forward(const Tensor& x, Tensor& y);
  void backward(const Tensor& dy, Tensor& dx) const;

 private:
  Tensor y_;
};

/// 2x2x2 average pooling; spatial dims must be even.
class AvgPool2 {
 public:
  void forward(const Tensor& x, Tensor& y);
  void backward(const Tensor& dy, Tensor& dx) const;

 private:
  int c_ = 0, d_ = 0, h_ = 0, w_ = 0;  // input dims
};

/// Nearest-neighbour 2x upsampling.
class Upsample2 {
 public:
  void forward(const Tensor& x, Tensor& y);
  void backward(const Tensor& dy, Tensor& dx) const;

 private:
  int c_ = 0, d_ = 0, h_ = 0, w_ = 0;  // input dims
};

class Linear {
 public:
  Linear() = default;
  Linear(std::string name, int in_dim, int out_dim);

  void init(Rng& rng);
  void forward(const Eigen::VectorXf& x, Eigen::VectorXf& y);
  void backward(const Eigen::VectorXf& dy, Eigen::VectorXf& dx, bool accumulate_param_grads);
  void collect(std::vector<ParamRef>& out);
  Eigen::Index param_count() const { return w_.size() + b_.size(); }

 private:
  std::string name_;
  Eigen::MatrixXf w_, wg_;  // in x out
  Eigen::VectorXf b_, bg_;
  Eigen::VectorXf x_;
};

class GlobalAvgPool {
 public:
  void forward(const Tensor& x, Eigen::VectorXf& y);
  void backward(const Eigen::VectorXf& dy, Tensor& dx) const;

 private:
  int c_ = 0, d_ = 0, h_ = 0, w_ = 0;
};

/// Per-voxel softmax over channels (rows of the tensor matrix).
void softmax_rows(const Eigen::MatrixXf& logits, Eigen::MatrixXf& probs);
/// Chain rule through softmax_rows: given d(loss)/d(probs), produce
/// d(loss)/d(logits).
void softmax_rows_backward(const Eigen::MatrixXf& probs, const Eigen::MatrixXf& dprobs,
                           Eigen::MatrixXf& dlogits);

Eigen::VectorXf softmax_vector(const Eigen::VectorXf& logits);

}  // namespace pwml
