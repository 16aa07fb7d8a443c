#pragma once

#include <string>
#include <vector>

#include "pwml/layers.hpp"

namespace pwml {

enum class PsegVariant { conv4, dense1, dense2, dunet_d1, dunet_d2, dunet_full };

std::string to_string(PsegVariant v);
PsegVariant pseg_variant_from_string(const std::string& s);

/// Architecture hyperparameters shared by all four modules. Networks consume
/// tensors already normalized by intensity_scale; callers divide raw t1
/// intensities by that factor at the data boundary.
struct NetworkSpec {
  int growth = 16;       // dense-block growth rate
  int db_layers = 2;     // convs per dense block
  int tseg_depth = 3;    // down-samplings in the tissue net
  int cmg_width = 16;    // first-level CMG width; doubles per level
  int cls_hidden = 32;   // units in the first FC layer of the classifier
  PsegVariant pseg_variant = PsegVariant::dunet_full;
  double intensity_scale = 600.0;

  void validate() const;  // throws ConfigError
  bool operator==(const NetworkSpec&) const = default;
};

/// conv(c0 + i*g -> g) + relu per layer; output is the concatenation of the
/// input with every layer's features: c0 + layers*g channels.
class DenseBlock {
 public:
  DenseBlock() = default;
  DenseBlock(const std::string& name, int in_ch, int growth, int layers);

  void init(Rng& rng);
  void forward(const Tensor& x, Tensor& y);
  void backward(const Tensor& dy, Tensor& dx, bool acc);
  void collect(std::vector<ParamRef>& out);
  int in_channels() const { return in_; }
  int out_channels() const { return in_ + growth_ * static_cast<int>(convs_.size()); }

 private:
  std::vector<Conv3d> convs_;
  std::vector<Relu> relus_;
  int in_ = 0, growth_ = 0;
};

/// stem conv + depth x (dense block -> 1x1 transition -> pool) + bottleneck
/// dense block. Skip i is the level-i dense-block output before pooling.
class Encoder {
 public:
  Encoder() = default;
  Encoder(const std::string& name, int in_ch, int depth, const NetworkSpec& spec);

  void init(Rng& rng);
  void forward(const Tensor& x, Tensor& code);
  /// dskips may be null (classifier use); when present it must hold one
  /// gradient tensor per level, added to the dense-block outputs.
  void backward(const Tensor& dcode, const std::vector<Tensor>* dskips, Tensor& dx, bool acc);
  void collect(std::vector<ParamRef>& out);

  const Tensor& skip(int level) const { return skips_[level]; }
  int depth() const { return depth_; }
  int code_channels() const;
  int skip_channels(int level) const;

 private:
  Conv3d stem_;
  Relu stem_relu_;
  std::vector<DenseBlock> dbs_;
  std::vector<Conv3d> trans_;
  std::vector<Relu> trans_relus_;
  std::vector<AvgPool2> pools_;
  DenseBlock bottleneck_;
  std::vector<Tensor> skips_;
  int depth_ = 0;
};

/// Mirror of Encoder: upsample, concat the matching skip, 1x1 compression,
/// dense block; finishes with a 1x1 head producing out_ch logits.
class Decoder {
 public:
  Decoder() = default;
  Decoder(const std::string& name, const Encoder& enc, int out_ch, const NetworkSpec& spec);

  void init(Rng& rng);
  void forward(const Tensor& code, const Encoder& enc, Tensor& logits);
  void backward(const Tensor& dlogits, Tensor& dcode, std::vector<Tensor>& dskips, bool acc);
  void collect(std::vector<ParamRef>& out);

 private:
  std::vector<Upsample2> ups_;
  std::vector<Conv3d> compress_;
  std::vector<Relu> comp_relus_;
  std::vector<DenseBlock> dbs_;
  Conv3d head_;
  std::vector<int> skip_ch_;
  int depth_ = 0;
};

class DenseUnet {
 public:
  DenseUnet() = default;
  DenseUnet(const std::string& name, int in_ch, int out_ch, int depth, const NetworkSpec& spec);

  void init(Rng& rng);
  void forward(const Tensor& x, Tensor& logits);
  void backward(const Tensor& dlogits, Tensor& dx, bool acc);
  void collect(std::vector<ParamRef>& out);

 private:
  Encoder enc_;
  Decoder dec_;
  Tensor code_;
};

/// Tissue segmentation: Dense-Unet with a 4-class per-voxel softmax head.
class TsegNet {
 public:
  explicit TsegNet(const NetworkSpec& spec);

  void init(Rng& rng);
  void forward(const Tensor& t1, Tensor& probs);
  const Tensor& logits() const { return logits_; }
  void backward_logits(const Tensor& dlogits, Tensor& dx, bool acc);
  std::vector<ParamRef> params();
  Eigen::Index param_count();
  const NetworkSpec& spec() const { return spec_; }

 private:
  NetworkSpec spec_;
  DenseUnet unet_;
  Tensor logits_;
};

/// Patch classifier: the tissue encoder topology plus two FC layers over
/// globally pooled features. Class 0 = negative, class 1 = positive.
class ClsNet {
 public:
  explicit ClsNet(const NetworkSpec& spec);

  void init(Rng& rng);
  Eigen::Vector2f forward(const Tensor& t1);  // probabilities
  void backward_logits(const Eigen::Vector2f& dlogits, Tensor& dx, bool acc);
  std::vector<ParamRef> params();
  Eigen::Index param_count();
  Eigen::Index encoder_param_count();
  const NetworkSpec& spec() const { return spec_; }

 private:
  NetworkSpec spec_;
  Encoder enc_;
  GlobalAvgPool gap_;
  Linear fc1_, fc2_;
  Eigen::VectorXf hidden_;  // post-relu, cached for backward
  Tensor code_;
};

enum class SwitchState { remove = 0, seed = 1 };

/// Counterfactual map generator: plain two-level U-Net whose bottleneck code
/// and skip features all receive the switch constant (0 for remove, 1 for
/// seed) before decoding; final ReLU keeps the map nonnegative.
class CmgNet {
 public:
  explicit CmgNet(const NetworkSpec& spec);

  void init(Rng& rng);
  void forward(const Tensor& x, SwitchState sw, Tensor& cf);
  /// dswitch, when non-null, receives d(loss)/d(switch constant) — the sum of
  /// gradients entering every injection site (used to prove the switch is
  /// wired in).
  void backward(const Tensor& dcf, Tensor& dx, bool acc, float* dswitch = nullptr);
  std::vector<ParamRef> params();
  Eigen::Index param_count();
  const NetworkSpec& spec() const { return spec_; }

 private:
  NetworkSpec spec_;
  Conv3d e0_, e1_, bott_;
  Relu r0_, r1_, rb_;
  AvgPool2 p0_, p1_;
  Upsample2 u1_, u0_;
  Conv3d d1_, d0_;
  Relu rd1_, rd0_;
  Conv3d head_;
  Relu rhead_;
  int w0_ = 0;
};

/// Lesion segmentation head over fused channels; sigmoid output.
class PsegNet {
 public:
  PsegNet(const NetworkSpec& spec, PsegVariant variant, int in_channels);

  void init(Rng& rng);
  void forward(const Tensor& x, Tensor& prob);
  const Tensor& logits() const { return logits_; }
  void backward_logits(const Tensor& dlogits, Tensor& dx, bool acc);
  std::vector<ParamRef> params();
  Eigen::Index param_count();
  PsegVariant variant() const { return variant_; }
  int in_channels() const { return in_; }
  const NetworkSpec& spec() const { return spec_; }

 private:
  NetworkSpec spec_;
  PsegVariant variant_;
  int in_ = 0;
  // conv4 / denseN storage
  std::vector<Conv3d> convs_;
  std::vector<Relu> relus_;
  std::vector<DenseBlock> dbs_;
  Conv3d head_;
  bool has_unet_ = false;
  DenseUnet unet_;
  Tensor logits_;
};

Eigen::Index count_parameters(const std::vector<ParamRef>& params);

}  // namespace pwml
