#include "pwml/networks.hpp"

#include <cmath>

namespace pwml {

std::string to_string(PsegVariant v) {
  switch (v) {
    case PsegVariant::conv4: return "conv4";
    case PsegVariant::dense1: return "dense1";
    case PsegVariant::dense2: return "dense2";
    case PsegVariant::dunet_d1: return "dunet_d1";
    case PsegVariant::dunet_d2: return "dunet_d2";
    case PsegVariant::dunet_full: return "dunet_full";
  }
  throw ConfigError("unknown pseg variant value");
}

PsegVariant pseg_variant_from_string(const std::string& s) {
  for (PsegVariant v : {PsegVariant::conv4, PsegVariant::dense1, PsegVariant::dense2,
                        PsegVariant::dunet_d1, PsegVariant::dunet_d2, PsegVariant::dunet_full})
    if (to_string(v) == s) return v;
  throw ConfigError("unknown pseg variant: " + s);
}

void NetworkSpec::validate() const {
  if (growth < 1) throw ConfigError("network spec: growth must be >= 1");
  if (db_layers < 1) throw ConfigError("network spec: db_layers must be >= 1");
  if (tseg_depth < 1 || tseg_depth > 4)
    throw ConfigError("network spec: tseg_depth must be 1..4");
  if (cmg_width < 1) throw ConfigError("network spec: cmg_width must be >= 1");
  if (cls_hidden < 1) throw ConfigError("network spec: cls_hidden must be >= 1");
  if (intensity_scale <= 0) throw ConfigError("network spec: intensity_scale must be > 0");
}

namespace {

// 1x1 transition after each encoder dense block halves the channel count.
int transition_channels(int db_out) { return db_out / 2; }

// Confine a counterfactual map to the window interior by zeroing the outer
// eighth of each axis (4 voxels per face at the 32^3 working size). Border
// features sit on convolution padding, where a gradient-trained generator
// otherwise parks its edits; with overlapping windows every brain voxel is
// interior to some window, so nothing is lost at reconstruction.
void zero_window_border(Tensor& t) {
  const int md = t.d / 8, mh = t.h / 8, mw = t.w / 8;
  if (md == 0 && mh == 0 && mw == 0) return;
  for (int z = 0; z < t.d; ++z) {
    const bool zin = z >= md && z < t.d - md;
    for (int y = 0; y < t.h; ++y) {
      const bool yin = zin && y >= mh && y < t.h - mh;
      Eigen::Index row = (static_cast<Eigen::Index>(z) * t.h + y) * t.w;
      if (!yin) {
        t.m.middleRows(row, t.w).setZero();
        continue;
      }
      t.m.middleRows(row, mw).setZero();
      t.m.middleRows(row + t.w - mw, mw).setZero();
    }
  }
}

// Decoder compression width after each skip concatenation.
int compress_channels(const NetworkSpec& spec) { return std::max(2, 3 * spec.growth / 2); }

}  // namespace

// ---------------------------------------------------------------- DenseBlock

DenseBlock::DenseBlock(const std::string& name, int in_ch, int growth, int layers)
    : in_(in_ch), growth_(growth) {
  convs_.reserve(layers);
  relus_.resize(layers);
  for (int i = 0; i < layers; ++i)
    convs_.emplace_back(name + ".conv" + std::to_string(i), in_ch + i * growth, growth, 3);
}

void DenseBlock::init(Rng& rng) {
  for (auto& c : convs_) c.init(rng);
}

void DenseBlock::forward(const Tensor& x, Tensor& y) {
  Tensor cat = x;
  Tensor pre, f;
  for (std::size_t i = 0; i < convs_.size(); ++i) {
    convs_[i].forward(cat, pre);
    relus_[i].forward(pre, f);
    cat = concat_channels(cat, f);
  }
  y = std::move(cat);
}

void DenseBlock::backward(const Tensor& dy, Tensor& dx, bool acc) {
  Tensor dcat = dy;
  Tensor df, dpre, dprev;
  for (int i = static_cast<int>(convs_.size()) - 1; i >= 0; --i) {
    const int c_in = in_ + i * growth_;
    df = Tensor(growth_, dcat.d, dcat.h, dcat.w);
    df.m = dcat.m.middleCols(c_in, growth_);
    relus_[i].backward(df, dpre);
    convs_[i].backward(dpre, dprev, acc);
    dcat.m.leftCols(c_in) += dprev.m;
    dcat.c = c_in;
    dcat.m.conservativeResize(Eigen::NoChange, c_in);
  }
  dx = std::move(dcat);
}

void DenseBlock::collect(std::vector<ParamRef>& out) {
  for (auto& c : convs_) c.collect(out);
}

// ------------------------------------------------------------------- Encoder

Encoder::Encoder(const std::string& name, int in_ch, int depth, const NetworkSpec& spec)
    : stem_(name + ".stem", in_ch, spec.growth, 3), depth_(depth) {
  int c = spec.growth;
  for (int i = 0; i < depth; ++i) {
    dbs_.emplace_back(name + ".db" + std::to_string(i), c, spec.growth, spec.db_layers);
    const int db_out = dbs_.back().out_channels();
    const int t_out = transition_channels(db_out);
    trans_.emplace_back(name + ".trans" + std::to_string(i), db_out, t_out, 1);
    c = t_out;
  }
  trans_relus_.resize(depth);
  pools_.resize(depth);
  bottleneck_ = DenseBlock(name + ".bottleneck", c, spec.growth, spec.db_layers);
  skips_.resize(depth);
}

void Encoder::init(Rng& rng) {
  stem_.init(rng);
  for (auto& db : dbs_) db.init(rng);
  for (auto& t : trans_) t.init(rng);
  bottleneck_.init(rng);
}

int Encoder::code_channels() const { return bottleneck_.out_channels(); }

int Encoder::skip_channels(int level) const { return dbs_[level].out_channels(); }

void Encoder::forward(const Tensor& x, Tensor& code) {
  Tensor cur, pre;
  stem_.forward(x, pre);
  stem_relu_.forward(pre, cur);
  for (int i = 0; i < depth_; ++i) {
    dbs_[i].forward(cur, skips_[i]);
    Tensor t, tr;
    trans_[i].forward(skips_[i], t);
    trans_relus_[i].forward(t, tr);
    pools_[i].forward(tr, cur);
  }
  bottleneck_.forward(cur, code);
}

void Encoder::backward(const Tensor& dcode, const std::vector<Tensor>* dskips, Tensor& dx,
                       bool acc) {
  Tensor cur, t, tr;
  bottleneck_.backward(dcode, cur, acc);
  for (int i = depth_ - 1; i >= 0; --i) {
    pools_[i].backward(cur, tr);
    trans_relus_[i].backward(tr, t);
    Tensor ddb;
    trans_[i].backward(t, ddb, acc);
    if (dskips) ddb.m += (*dskips)[i].m;
    dbs_[i].backward(ddb, cur, acc);
  }
  Tensor dpre;
  stem_relu_.backward(cur, dpre);
  stem_.backward(dpre, dx, acc);
}

void Encoder::collect(std::vector<ParamRef>& out) {
  stem_.collect(out);
  for (int i = 0; i < depth_; ++i) {
    dbs_[i].collect(out);
    trans_[i].collect(out);
  }
  bottleneck_.collect(out);
}

// ------------------------------------------------------------------- Decoder

Decoder::Decoder(const std::string& name, const Encoder& enc, int out_ch,
                 const NetworkSpec& spec)
    : depth_(enc.depth()) {
  const int comp = compress_channels(spec);
  int c = enc.code_channels();
  ups_.resize(depth_);
  comp_relus_.resize(depth_);
  for (int i = 0; i < depth_; ++i) {
    const int level = depth_ - 1 - i;  // deepest skip first
    const int sk = enc.skip_channels(level);
    skip_ch_.push_back(sk);
    compress_.emplace_back(name + ".comp" + std::to_string(i), c + sk, comp, 1);
    dbs_.emplace_back(name + ".db" + std::to_string(i), comp, spec.growth, spec.db_layers);
    c = dbs_.back().out_channels();
  }
  head_ = Conv3d(name + ".head", c, out_ch, 1);
}

void Decoder::init(Rng& rng) {
  for (auto& c : compress_) c.init(rng);
  for (auto& db : dbs_) db.init(rng);
  head_.init(rng);
}

void Decoder::forward(const Tensor& code, const Encoder& enc, Tensor& logits) {
  Tensor cur = code;
  for (int i = 0; i < depth_; ++i) {
    Tensor up;
    ups_[i].forward(cur, up);
    const Tensor cat = concat_channels(up, enc.skip(depth_ - 1 - i));
    Tensor pre, comp;
    compress_[i].forward(cat, pre);
    comp_relus_[i].forward(pre, comp);
    dbs_[i].forward(comp, cur);
  }
  head_.forward(cur, logits);
}

void Decoder::backward(const Tensor& dlogits, Tensor& dcode, std::vector<Tensor>& dskips,
                       bool acc) {
  dskips.resize(depth_);
  Tensor cur;
  head_.backward(dlogits, cur, acc);
  for (int i = depth_ - 1; i >= 0; --i) {
    Tensor dcomp, dpre, dcat, dup;
    dbs_[i].backward(cur, dcomp, acc);
    comp_relus_[i].backward(dcomp, dpre);
    compress_[i].backward(dpre, dcat, acc);
    Tensor dskip;
    split_channels(dcat, dcat.c - skip_ch_[i], dup, dskip);
    dskips[depth_ - 1 - i] = std::move(dskip);
    ups_[i].backward(dup, cur);
  }
  dcode = std::move(cur);
}

void Decoder::collect(std::vector<ParamRef>& out) {
  for (int i = 0; i < depth_; ++i) {
    compress_[i].collect(out);
    dbs_[i].collect(out);
  }
  head_.collect(out);
}

// ----------------------------------------------------------------- DenseUnet

DenseUnet::DenseUnet(const std::string& name, int in_ch, int out_ch, int depth,
                     const NetworkSpec& spec)
    : enc_(name + ".enc", in_ch, depth, spec), dec_(name + ".dec", enc_, out_ch, spec) {}

void DenseUnet::init(Rng& rng) {
  enc_.init(rng);
  dec_.init(rng);
}

void DenseUnet::forward(const Tensor& x, Tensor& logits) {
  enc_.forward(x, code_);
  dec_.forward(code_, enc_, logits);
}

void DenseUnet::backward(const Tensor& dlogits, Tensor& dx, bool acc) {
  Tensor dcode;
  std::vector<Tensor> dskips;
  dec_.backward(dlogits, dcode, dskips, acc);
  enc_.backward(dcode, &dskips, dx, acc);
}

void DenseUnet::collect(std::vector<ParamRef>& out) {
  enc_.collect(out);
  dec_.collect(out);
}

// ------------------------------------------------------------------- TsegNet

TsegNet::TsegNet(const NetworkSpec& spec) : spec_(spec) {
  spec.validate();
  unet_ = DenseUnet("tseg", 1, 4, spec.tseg_depth, spec);
}

void TsegNet::init(Rng& rng) { unet_.init(rng); }

void TsegNet::forward(const Tensor& t1, Tensor& probs) {
  if (t1.c != 1) throw ValidationError("tseg: expected a single input channel");
  unet_.forward(t1, logits_);
  probs.resize_like(logits_);
  softmax_rows(logits_.m, probs.m);
}

void TsegNet::backward_logits(const Tensor& dlogits, Tensor& dx, bool acc) {
  unet_.backward(dlogits, dx, acc);
}

std::vector<ParamRef> TsegNet::params() {
  std::vector<ParamRef> out;
  unet_.collect(out);
  return out;
}

Eigen::Index TsegNet::param_count() { return count_parameters(params()); }

// -------------------------------------------------------------------- ClsNet

ClsNet::ClsNet(const NetworkSpec& spec) : spec_(spec) {
  spec.validate();
  enc_ = Encoder("cls.enc", 1, spec.tseg_depth, spec);
  fc1_ = Linear("cls.fc1", enc_.code_channels(), spec.cls_hidden);
  fc2_ = Linear("cls.fc2", spec.cls_hidden, 2);
}

void ClsNet::init(Rng& rng) {
  enc_.init(rng);
  fc1_.init(rng);
  fc2_.init(rng);
}

Eigen::Vector2f ClsNet::forward(const Tensor& t1) {
  if (t1.c != 1) throw ValidationError("cls: expected a single input channel");
  enc_.forward(t1, code_);
  Eigen::VectorXf pooled, pre;
  gap_.forward(code_, pooled);
  fc1_.forward(pooled, pre);
  hidden_ = pre.cwiseMax(0.0f);
  Eigen::VectorXf logits;
  fc2_.forward(hidden_, logits);
  const Eigen::VectorXf p = softmax_vector(logits);
  return {p[0], p[1]};
}

void ClsNet::backward_logits(const Eigen::Vector2f& dlogits, Tensor& dx, bool acc) {
  Eigen::VectorXf dhid, dpre, dpooled;
  fc2_.backward(dlogits, dhid, acc);
  dpre = (hidden_.array() > 0.0f).cast<float>() * dhid.array();
  fc1_.backward(dpre, dpooled, acc);
  Tensor dcode;
  gap_.backward(dpooled, dcode);
  enc_.backward(dcode, nullptr, dx, acc);
}

std::vector<ParamRef> ClsNet::params() {
  std::vector<ParamRef> out;
  enc_.collect(out);
  fc1_.collect(out);
  fc2_.collect(out);
  return out;
}

Eigen::Index ClsNet::param_count() { return count_parameters(params()); }

Eigen::Index ClsNet::encoder_param_count() {
  std::vector<ParamRef> out;
  enc_.collect(out);
  return count_parameters(out);
}

// -------------------------------------------------------------------- CmgNet

CmgNet::CmgNet(const NetworkSpec& spec) : spec_(spec), w0_(spec.cmg_width) {
  spec.validate();
  e0_ = Conv3d("cmg.e0", 1, w0_, 3);
  e1_ = Conv3d("cmg.e1", w0_, 2 * w0_, 3);
  bott_ = Conv3d("cmg.bott", 2 * w0_, 4 * w0_, 3);
  d1_ = Conv3d("cmg.d1", 6 * w0_, 2 * w0_, 3);
  d0_ = Conv3d("cmg.d0", 3 * w0_, w0_, 3);
  head_ = Conv3d("cmg.head", w0_, 1, 1);
}

void CmgNet::init(Rng& rng) {
  e0_.init(rng);
  e1_.init(rng);
  bott_.init(rng);
  d1_.init(rng);
  d0_.init(rng);
  head_.init(rng);
  // Start the head bias slightly positive so the rectified map is born alive
  // everywhere. A head whose pre-activations are all negative is an absorbing
  // state (the final ReLU blocks every gradient), and with zero bias the
  // pre-activations start near zero, one bad early step away from exactly
  // that. The sparsity terms trim the surplus within a few epochs.
  std::vector<ParamRef> hp;
  head_.collect(hp);
  Eigen::Map<Eigen::RowVectorXf>(hp[1].value, hp[1].size).setConstant(0.1f);
}

void CmgNet::forward(const Tensor& x, SwitchState sw, Tensor& cf) {
  if (x.c != 1) throw ValidationError("cmg: expected a single input channel");
  const float s = sw == SwitchState::seed ? 1.0f : 0.0f;
  Tensor pre, f0, f1, code, cur;
  e0_.forward(x, pre);
  r0_.forward(pre, f0);
  p0_.forward(f0, cur);
  e1_.forward(cur, pre);
  r1_.forward(pre, f1);
  p1_.forward(f1, cur);
  bott_.forward(cur, pre);
  rb_.forward(pre, code);
  // Switch injection: the same constant joins the code and every skip.
  code.m.array() += s;
  f1.m.array() += s;
  f0.m.array() += s;
  Tensor up;
  u1_.forward(code, up);
  Tensor cat = concat_channels(up, f1);
  d1_.forward(cat, pre);
  Tensor g1;
  rd1_.forward(pre, g1);
  u0_.forward(g1, up);
  cat = concat_channels(up, f0);
  d0_.forward(cat, pre);
  Tensor g0;
  rd0_.forward(pre, g0);
  head_.forward(g0, pre);
  rhead_.forward(pre, cf);
  zero_window_border(cf);
}

void CmgNet::backward(const Tensor& dcf, Tensor& dx, bool acc, float* dswitch) {
  float dsw = 0.0f;
  Tensor pre, cur, dcat, dup, dskip0, dskip1, dcode;
  Tensor dcf_in = dcf;
  zero_window_border(dcf_in);
  rhead_.backward(dcf_in, pre);
  Tensor g0;
  head_.backward(pre, g0, acc);
  rd0_.backward(g0, pre);
  d0_.backward(pre, dcat, acc);
  split_channels(dcat, 2 * w0_, dup, dskip0);
  Tensor dg1;
  u0_.backward(dup, dg1);
  rd1_.backward(dg1, pre);
  d1_.backward(pre, dcat, acc);
  split_channels(dcat, 4 * w0_, dup, dskip1);
  u1_.backward(dup, dcode);
  // The injected constant feeds the code and both skips; its gradient is the
  // sum of everything arriving at those sites.
  dsw += dcode.m.sum() + dskip1.m.sum() + dskip0.m.sum();
  rb_.backward(dcode, pre);
  bott_.backward(pre, cur, acc);
  p1_.backward(cur, dup);
  dup.m += dskip1.m;
  r1_.backward(dup, pre);
  e1_.backward(pre, cur, acc);
  p0_.backward(cur, dup);
  dup.m += dskip0.m;
  r0_.backward(dup, pre);
  e0_.backward(pre, dx, acc);
  if (dswitch) *dswitch = dsw;
}

std::vector<ParamRef> CmgNet::params() {
  std::vector<ParamRef> out;
  e0_.collect(out);
  e1_.collect(out);
  bott_.collect(out);
  d1_.collect(out);
  d0_.collect(out);
  head_.collect(out);
  return out;
}

Eigen::Index CmgNet::param_count() { return count_parameters(params()); }

// ------------------------------------------------------------------- PsegNet

PsegNet::PsegNet(const NetworkSpec& spec, PsegVariant variant, int in_channels)
    : spec_(spec), variant_(variant), in_(in_channels) {
  spec.validate();
  if (in_channels < 1) throw ConfigError("pseg: in_channels must be >= 1");
  const int g = spec.growth;
  switch (variant) {
    case PsegVariant::conv4: {
      convs_.emplace_back("pseg.conv0", in_channels, g, 3);
      convs_.emplace_back("pseg.conv1", g, g, 3);
      convs_.emplace_back("pseg.conv2", g, g, 3);
      relus_.resize(3);
      head_ = Conv3d("pseg.head", g, 1, 3);
      break;
    }
    case PsegVariant::dense1:
    case PsegVariant::dense2: {
      const int n = variant == PsegVariant::dense1 ? 1 : 2;
      convs_.emplace_back("pseg.stem", in_channels, g, 3);
      relus_.resize(1);
      int c = g;
      for (int i = 0; i < n; ++i) {
        dbs_.emplace_back("pseg.db" + std::to_string(i), c, g, spec.db_layers);
        c = dbs_.back().out_channels();
      }
      head_ = Conv3d("pseg.head", c, 1, 1);
      break;
    }
    case PsegVariant::dunet_d1:
    case PsegVariant::dunet_d2:
    case PsegVariant::dunet_full: {
      const int depth = variant == PsegVariant::dunet_d1   ? 1
                        : variant == PsegVariant::dunet_d2 ? 2
                                                           : spec.tseg_depth;
      has_unet_ = true;
      unet_ = DenseUnet("pseg", in_channels, 1, depth, spec);
      break;
    }
  }
}

void PsegNet::init(Rng& rng) {
  if (has_unet_) {
    unet_.init(rng);
    return;
  }
  for (auto& c : convs_) c.init(rng);
  for (auto& db : dbs_) db.init(rng);
  head_.init(rng);
}

void PsegNet::forward(const Tensor& x, Tensor& prob) {
  if (x.c != in_)
    throw ValidationError("pseg: expected " + std::to_string(in_) + " input channels, got " +
                          std::to_string(x.c));
  if (has_unet_) {
    unet_.forward(x, logits_);
  } else {
    Tensor cur = x, pre;
    for (std::size_t i = 0; i < convs_.size(); ++i) {
      convs_[i].forward(cur, pre);
      relus_[i].forward(pre, cur);
    }
    for (auto& db : dbs_) {
      Tensor next;
      db.forward(cur, next);
      cur = std::move(next);
    }
    head_.forward(cur, logits_);
  }
  prob.resize_like(logits_);
  prob.m = (1.0f / (1.0f + (-logits_.m.array()).exp())).matrix();
}

void PsegNet::backward_logits(const Tensor& dlogits, Tensor& dx, bool acc) {
  if (has_unet_) {
    unet_.backward(dlogits, dx, acc);
    return;
  }
  Tensor cur, pre;
  head_.backward(dlogits, cur, acc);
  for (int i = static_cast<int>(dbs_.size()) - 1; i >= 0; --i) {
    Tensor prev;
    dbs_[i].backward(cur, prev, acc);
    cur = std::move(prev);
  }
  for (int i = static_cast<int>(convs_.size()) - 1; i >= 0; --i) {
    relus_[i].backward(cur, pre);
    convs_[i].backward(pre, cur, acc);
  }
  dx = std::move(cur);
}

std::vector<ParamRef> PsegNet::params() {
  std::vector<ParamRef> out;
  if (has_unet_) {
    unet_.collect(out);
    return out;
  }
  for (auto& c : convs_) c.collect(out);
  for (auto& db : dbs_) db.collect(out);
  head_.collect(out);
  return out;
}

Eigen::Index PsegNet::param_count() { return count_parameters(params()); }

Eigen::Index count_parameters(const std::vector<ParamRef>& params) {
  Eigen::Index n = 0;
  for (const auto& p : params) n += p.size;
  return n;
}

}  // namespace pwml
