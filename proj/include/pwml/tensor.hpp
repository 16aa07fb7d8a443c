#pragma once

#include <Eigen/Dense>

#include "pwml/common.hpp"

namespace pwml {

/// Single-sample feature map: (d*h*w) x c matrix, column-major, so each
/// channel is one contiguous volume in w-fastest order
/// (voxel = x + w*(y + h*z)).
struct Tensor {
  int c = 0, d = 0, h = 0, w = 0;
  Eigen::MatrixXf m;

  Tensor() = default;
  Tensor(int c_, int d_, int h_, int w_) : c(c_), d(d_), h(h_), w(w_) {
    m.setZero(static_cast<Eigen::Index>(d_) * h_ * w_, c_);
  }

  Eigen::Index vox() const { return static_cast<Eigen::Index>(d) * h * w; }

  void resize_like(const Tensor& o) {
    c = o.c;
    d = o.d;
    h = o.h;
    w = o.w;
    m.resize(o.vox(), o.c);
  }

  bool same_shape(const Tensor& o) const {
    return c == o.c && d == o.d && h == o.h && w == o.w;
  }
};

inline Tensor concat_channels(const Tensor& a, const Tensor& b) {
  if (a.d != b.d || a.h != b.h || a.w != b.w)
    throw ValidationError("concat_channels: spatial shape mismatch");
  Tensor out(a.c + b.c, a.d, a.h, a.w);
  out.m.leftCols(a.c) = a.m;
  out.m.rightCols(b.c) = b.m;
  return out;
}

/// Inverse of concat_channels for gradients; da/db are resized.
inline void split_channels(const Tensor& dcat, int ca, Tensor& da, Tensor& db) {
  da = Tensor(ca, dcat.d, dcat.h, dcat.w);
  db = Tensor(dcat.c - ca, dcat.d, dcat.h, dcat.w);
  da.m = dcat.m.leftCols(ca);
  db.m = dcat.m.rightCols(dcat.c - ca);
}

}  // namespace pwml
