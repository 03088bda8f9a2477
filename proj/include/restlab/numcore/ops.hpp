#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "restlab/numcore/tape.hpp"
#include "restlab/numcore/tensor.hpp"

// Primitive vocabulary for the three networks. Images are NCHW tensors.
// Every op allocates its output on the tape and records a backward closure
// when at least one input requires a gradient.

namespace restlab::nc {

namespace detail {

template <typename Real>
using RowMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Real>
using MatMap = Eigen::Map<RowMat<Real>>;
template <typename Real>
using ConstMatMap = Eigen::Map<const RowMat<Real>>;
template <typename Real>
using VecMap = Eigen::Map<Eigen::Matrix<Real, Eigen::Dynamic, 1>>;
template <typename Real>
using ConstVecMap = Eigen::Map<const Eigen::Matrix<Real, Eigen::Dynamic, 1>>;

[[noreturn]] inline void shape_fail(const std::string& op, const std::string& detail) {
  throw DataError(op + ": shape mismatch: " + detail);
}

template <typename Real>
AlignedVector<Real>& scratch(int slot) {
  thread_local AlignedVector<Real> buffers[2];
  return buffers[slot];
}

// Copies [C,H,W] planes into zero-bordered [C,H+2,W+2] planes. The buffer
// carries one extra vector of slack so full-width loads past the last row stay
// inside the allocation.
template <typename Real>
void pad_planes(const Real* src, int channels, int height, int width, AlignedVector<Real>& dst) {
  const int pw = width + 2;
  const std::size_t padded = static_cast<std::size_t>(height + 2) * pw;
  dst.assign(channels * padded + 64 / sizeof(Real) + 2, Real{0});
  for (int c = 0; c < channels; ++c) {
    for (int y = 0; y < height; ++y) {
      const Real* s = src + (static_cast<std::size_t>(c) * height + y) * width;
      std::copy(s, s + width, dst.data() + c * padded + static_cast<std::size_t>(y + 1) * pw + 1);
    }
  }
}

// out[o] += sum_c w[o,c] (*) xpad[c] for a block of OB output channels, 3x3 taps.
// Each tile of XB pixels keeps OB accumulators live across all input taps.
template <int OB, typename Real>
void conv3_block(const Real* xpad, int channels, int height, int width, const Real* w, Real* out) {
  constexpr int XB = 64 / sizeof(Real);
  using Packet = Eigen::Array<Real, XB, 1>;
  const int pw = width + 2;
  const std::size_t padded = static_cast<std::size_t>(height + 2) * pw;
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  for (int y = 0; y < height; ++y) {
    for (int x0 = 0; x0 < width; x0 += XB) {
      Packet acc[OB];
      for (int o = 0; o < OB; ++o) acc[o].setZero();
      for (int c = 0; c < channels; ++c) {
        const Real* wc = w + static_cast<std::size_t>(c) * 9;
        for (int ky = 0; ky < 3; ++ky) {
          const Real* row = xpad + c * padded + static_cast<std::size_t>(y + ky) * pw + x0;
          for (int kx = 0; kx < 3; ++kx) {
            const Packet src = Eigen::Map<const Packet>(row + kx);
            for (int o = 0; o < OB; ++o) {
              acc[o] += wc[static_cast<std::size_t>(o) * channels * 9 + ky * 3 + kx] * src;
            }
          }
        }
      }
      const int xb = std::min(XB, width - x0);
      for (int o = 0; o < OB; ++o) {
        Real* dst = out + o * plane + static_cast<std::size_t>(y) * width + x0;
        for (int i = 0; i < xb; ++i) dst[i] += acc[o][i];
      }
    }
  }
}

// out [O,H,W] += 3x3 correlation of xpad [C,H+2,W+2] with w [O,C,3,3].
template <typename Real>
void conv3_accumulate(const Real* xpad, int channels, int height, int width, const Real* w, int out_c, Real* out) {
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  const std::size_t wstride = static_cast<std::size_t>(channels) * 9;
  int o = 0;
  for (; o + 8 <= out_c; o += 8) conv3_block<8>(xpad, channels, height, width, w + o * wstride, out + o * plane);
  for (; o + 4 <= out_c; o += 4) conv3_block<4>(xpad, channels, height, width, w + o * wstride, out + o * plane);
  for (; o < out_c; ++o) conv3_block<1>(xpad, channels, height, width, w + o * wstride, out + o * plane);
}

// dw [O,C,3,3] += sum over pixels of dy[o] * shifted xpad[c].
template <int OB, typename Real>
void conv3_weight_grad_block(const Real* xpad, int channels, int height, int width, const Real* dy, Real* dw) {
  constexpr int XB = 64 / sizeof(Real);
  using Packet = Eigen::Array<Real, XB, 1>;
  const int pw = width + 2;
  const std::size_t padded = static_cast<std::size_t>(height + 2) * pw;
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  for (int c = 0; c < channels; ++c) {
    for (int ky = 0; ky < 3; ++ky) {
      Packet acc[OB][3];
      for (int o = 0; o < OB; ++o)
        for (int kx = 0; kx < 3; ++kx) acc[o][kx].setZero();
      for (int y = 0; y < height; ++y) {
        const Real* row = xpad + c * padded + static_cast<std::size_t>(y + ky) * pw;
        for (int x0 = 0; x0 < width; x0 += XB) {
          const int xb = std::min(XB, width - x0);
          Packet g[OB];
          for (int o = 0; o < OB; ++o) {
            const Real* d = dy + o * plane + static_cast<std::size_t>(y) * width + x0;
            if (xb == XB) {
              g[o] = Eigen::Map<const Packet>(d);
            } else {
              g[o].setZero();
              std::copy(d, d + xb, g[o].data());
            }
          }
          for (int kx = 0; kx < 3; ++kx) {
            const Packet src = Eigen::Map<const Packet>(row + x0 + kx);
            for (int o = 0; o < OB; ++o) acc[o][kx] += g[o] * src;
          }
        }
      }
      for (int o = 0; o < OB; ++o) {
        for (int kx = 0; kx < 3; ++kx) {
          dw[(static_cast<std::size_t>(o) * channels + c) * 9 + ky * 3 + kx] += acc[o][kx].sum();
        }
      }
    }
  }
}

template <typename Real>
void conv3_weight_grad(const Real* xpad, int channels, int height, int width, const Real* dy, int out_c, Real* dw) {
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  const std::size_t wstride = static_cast<std::size_t>(channels) * 9;
  int o = 0;
  for (; o + 4 <= out_c; o += 4) {
    conv3_weight_grad_block<4>(xpad, channels, height, width, dy + o * plane, dw + o * wstride);
  }
  for (; o < out_c; ++o) conv3_weight_grad_block<1>(xpad, channels, height, width, dy + o * plane, dw + o * wstride);
}

template <typename Real>
Real stable_sigmoid(Real v) {
  if (v >= Real{0}) return Real{1} / (Real{1} + std::exp(-v));
  const Real e = std::exp(v);
  return e / (Real{1} + e);
}

inline void require_rank4(const std::string& op, const Shape& s) {
  if (s.size() != 4) shape_fail(op, "expected NCHW input, got " + shape_str(s));
}

}  // namespace detail

/// 2-D convolution, stride 1, zero padding k/2, kernel k in {1, 3}.
/// x: [N,C,H,W], weight: [O,C,k,k], bias: [O] -> [N,O,H,W].
template <typename Real>
Tensor<Real>& conv2d(Tape<Real>& tape, Tensor<Real>& x, Tensor<Real>& weight, Tensor<Real>& bias) {
  using namespace detail;
  require_rank4("conv2d", x.shape());
  const Shape& ws = weight.shape();
  if (ws.size() != 4 || ws[1] != x.dim(1) || ws[2] != ws[3] || (ws[2] != 1 && ws[2] != 3)) {
    shape_fail("conv2d", "input " + shape_str(x.shape()) + " vs kernel " + shape_str(ws));
  }
  if (bias.rank() != 1 || bias.dim(0) != ws[0]) {
    shape_fail("conv2d", "bias " + shape_str(bias.shape()) + " vs kernel " + shape_str(ws));
  }
  const int n_batch = x.dim(0), in_c = x.dim(1), height = x.dim(2), width = x.dim(3);
  const int out_c = ws[0], k = ws[2];
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  Tensor<Real>& out = tape.make({n_batch, out_c, height, width});

  ConstVecMap<Real> bvec(bias.data().data(), out_c);
  auto& pad = scratch<Real>(0);
  for (int n = 0; n < n_batch; ++n) {
    const Real* xn = x.data().data() + n * in_c * plane;
    Real* on = out.data().data() + n * out_c * plane;
    MatMap<Real> omat(on, out_c, static_cast<Eigen::Index>(plane));
    if (k == 1) {
      omat.noalias() = ConstMatMap<Real>(weight.data().data(), out_c, in_c) *
                       ConstMatMap<Real>(xn, in_c, static_cast<Eigen::Index>(plane));
    } else {
      pad_planes(xn, in_c, height, width, pad);
      conv3_accumulate(pad.data(), in_c, height, width, weight.data().data(), out_c, on);
    }
    omat.colwise() += bvec;
  }

  tape.record("conv2d", {&x, &weight, &bias}, out, [&x, &weight, &bias, &out, n_batch, in_c, height, width,
                                                    out_c, k, plane]() {
    auto& xpad = scratch<Real>(0);
    auto& dpad = scratch<Real>(1);
    AlignedVector<Real> flipped;
    if (k == 3 && x.requires_grad()) {
      // dx is the correlation of dy with the spatially flipped, transposed kernel.
      flipped.resize(static_cast<std::size_t>(in_c) * out_c * 9);
      for (int o = 0; o < out_c; ++o)
        for (int c = 0; c < in_c; ++c)
          for (int t = 0; t < 9; ++t)
            flipped[(static_cast<std::size_t>(c) * out_c + o) * 9 + t] =
                weight[(static_cast<std::size_t>(o) * in_c + c) * 9 + (8 - t)];
    }
    for (int n = 0; n < n_batch; ++n) {
      const Real* dyn = out.grad().data() + n * out_c * plane;
      ConstMatMap<Real> dy(dyn, out_c, static_cast<Eigen::Index>(plane));
      const Real* xn = x.data().data() + n * in_c * plane;
      if (bias.requires_grad()) VecMap<Real>(bias.grad().data(), out_c) += dy.rowwise().sum();
      if (k == 1) {
        if (weight.requires_grad()) {
          MatMap<Real>(weight.grad().data(), out_c, in_c).noalias() +=
              dy * ConstMatMap<Real>(xn, in_c, static_cast<Eigen::Index>(plane)).transpose();
        }
        if (x.requires_grad()) {
          MatMap<Real>(x.grad().data() + n * in_c * plane, in_c, static_cast<Eigen::Index>(plane)).noalias() +=
              ConstMatMap<Real>(weight.data().data(), out_c, in_c).transpose() * dy;
        }
        continue;
      }
      if (weight.requires_grad()) {
        pad_planes(xn, in_c, height, width, xpad);
        conv3_weight_grad(xpad.data(), in_c, height, width, dyn, out_c, weight.grad().data());
      }
      if (x.requires_grad()) {
        pad_planes(dyn, out_c, height, width, dpad);
        conv3_accumulate(dpad.data(), out_c, height, width, flipped.data(), in_c, x.grad().data() + n * in_c * plane);
      }
    }
  });
  return out;
}

/// 2x2 max pooling, stride 2. Ties route the gradient to the first maximum
/// in row-major window order.
template <typename Real>
Tensor<Real>& max_pool2(Tape<Real>& tape, Tensor<Real>& x) {
  detail::require_rank4("max_pool2", x.shape());
  const int nc = x.dim(0) * x.dim(1), height = x.dim(2), width = x.dim(3);
  if (height % 2 != 0 || width % 2 != 0) {
    detail::shape_fail("max_pool2", "spatial dims must be even, got " + shape_str(x.shape()));
  }
  const int oh = height / 2, ow = width / 2;
  Tensor<Real>& out = tape.make({x.dim(0), x.dim(1), oh, ow});
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
  const Real* src = x.data().data();
  for (int p = 0; p < nc; ++p) {
    for (int y = 0; y < oh; ++y) {
      for (int xx = 0; xx < ow; ++xx) {
        std::size_t best = (static_cast<std::size_t>(p) * height + 2 * y) * width + 2 * xx;
        for (int dy = 0; dy < 2; ++dy) {
          for (int dx = 0; dx < 2; ++dx) {
            const std::size_t idx = (static_cast<std::size_t>(p) * height + 2 * y + dy) * width + 2 * xx + dx;
            if (src[idx] > src[best]) best = idx;
          }
        }
        const std::size_t o = (static_cast<std::size_t>(p) * oh + y) * ow + xx;
        out[o] = src[best];
        (*argmax)[o] = best;
      }
    }
  }
  tape.record("max_pool2", {&x}, out, [&x, &out, argmax]() {
    auto g = out.grad();
    auto dx = x.grad();
    for (std::size_t o = 0; o < g.size(); ++o) dx[(*argmax)[o]] += g[o];
  });
  return out;
}

/// Nearest-neighbour 2x upsampling.
template <typename Real>
Tensor<Real>& upsample2(Tape<Real>& tape, Tensor<Real>& x) {
  detail::require_rank4("upsample2", x.shape());
  const int nc = x.dim(0) * x.dim(1), height = x.dim(2), width = x.dim(3);
  const int oh = 2 * height, ow = 2 * width;
  Tensor<Real>& out = tape.make({x.dim(0), x.dim(1), oh, ow});
  for (int p = 0; p < nc; ++p) {
    for (int y = 0; y < oh; ++y) {
      const Real* src = x.data().data() + (static_cast<std::size_t>(p) * height + y / 2) * width;
      Real* dst = out.data().data() + (static_cast<std::size_t>(p) * oh + y) * ow;
      for (int xx = 0; xx < ow; ++xx) dst[xx] = src[xx / 2];
    }
  }
  tape.record("upsample2", {&x}, out, [&x, &out, nc, height, width, oh, ow]() {
    for (int p = 0; p < nc; ++p) {
      for (int y = 0; y < oh; ++y) {
        const Real* g = out.grad().data() + (static_cast<std::size_t>(p) * oh + y) * ow;
        Real* dst = x.grad().data() + (static_cast<std::size_t>(p) * height + y / 2) * width;
        for (int xx = 0; xx < ow; ++xx) dst[xx / 2] += g[xx];
      }
    }
  });
  return out;
}

/// Channel concatenation [N,A,H,W] ++ [N,B,H,W] -> [N,A+B,H,W].
template <typename Real>
Tensor<Real>& concat_channels(Tape<Real>& tape, Tensor<Real>& a, Tensor<Real>& b) {
  detail::require_rank4("concat_channels", a.shape());
  detail::require_rank4("concat_channels", b.shape());
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
    detail::shape_fail("concat_channels", shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const int n_batch = a.dim(0);
  const std::size_t sa = a.size() / n_batch, sb = b.size() / n_batch;
  Tensor<Real>& out = tape.make({n_batch, a.dim(1) + b.dim(1), a.dim(2), a.dim(3)});
  for (int n = 0; n < n_batch; ++n) {
    Real* dst = out.data().data() + n * (sa + sb);
    std::copy_n(a.data().data() + n * sa, sa, dst);
    std::copy_n(b.data().data() + n * sb, sb, dst + sa);
  }
  tape.record("concat_channels", {&a, &b}, out, [&a, &b, &out, n_batch, sa, sb]() {
    for (int n = 0; n < n_batch; ++n) {
      const Real* g = out.grad().data() + n * (sa + sb);
      if (a.requires_grad()) {
        Real* da = a.grad().data() + n * sa;
        for (std::size_t i = 0; i < sa; ++i) da[i] += g[i];
      }
      if (b.requires_grad()) {
        Real* db = b.grad().data() + n * sb;
        for (std::size_t i = 0; i < sb; ++i) db[i] += g[sa + i];
      }
    }
  });
  return out;
}

template <typename Real>
Tensor<Real>& relu(Tape<Real>& tape, Tensor<Real>& x) {
  Tensor<Real>& out = tape.make(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > Real{0} ? x[i] : Real{0};
  tape.record("relu", {&x}, out, [&x, &out]() {
    auto g = out.grad();
    auto dx = x.grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (x[i] > Real{0}) dx[i] += g[i];
    }
  });
  return out;
}

template <typename Real>
Tensor<Real>& sigmoid(Tape<Real>& tape, Tensor<Real>& x) {
  Tensor<Real>& out = tape.make(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = detail::stable_sigmoid(x[i]);
  tape.record("sigmoid", {&x}, out, [&x, &out]() {
    auto g = out.grad();
    auto dx = x.grad();
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * out[i] * (Real{1} - out[i]);
  });
  return out;
}

/// Scalar-with-tensor multiplication (the only broadcasting form supported).
template <typename Real>
Tensor<Real>& scale(Tape<Real>& tape, Tensor<Real>& x, Real factor) {
  Tensor<Real>& out = tape.make(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * factor;
  tape.record("scale", {&x}, out, [&x, &out, factor]() {
    auto g = out.grad();
    auto dx = x.grad();
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * factor;
  });
  return out;
}

/// Elementwise sum of two tensors of identical shape.
template <typename Real>
Tensor<Real>& add(Tape<Real>& tape, Tensor<Real>& a, Tensor<Real>& b) {
  if (a.shape() != b.shape()) {
    detail::shape_fail("add", shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  Tensor<Real>& out = tape.make(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  tape.record("add", {&a, &b}, out, [&a, &b, &out]() {
    auto g = out.grad();
    if (a.requires_grad()) {
      auto da = a.grad();
      for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
    }
    if (b.requires_grad()) {
      auto db = b.grad();
      for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i];
    }
  });
  return out;
}

/// Mean of all elements -> scalar tensor of shape [1].
template <typename Real>
Tensor<Real>& mean(Tape<Real>& tape, Tensor<Real>& x) {
  Tensor<Real>& out = tape.make({1});
  Real acc{0};
  for (Real v : x.data()) acc += v;
  out[0] = acc / static_cast<Real>(x.size());
  tape.record("mean", {&x}, out, [&x, &out]() {
    const Real g = out.grad()[0] / static_cast<Real>(x.size());
    for (Real& d : x.grad()) d += g;
  });
  return out;
}

/// Per-channel spatial mean [N,C,H,W] -> [N,C,1,1].
template <typename Real>
Tensor<Real>& mean_spatial(Tape<Real>& tape, Tensor<Real>& x) {
  detail::require_rank4("mean_spatial", x.shape());
  const int nc = x.dim(0) * x.dim(1);
  const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  Tensor<Real>& out = tape.make({x.dim(0), x.dim(1), 1, 1});
  for (int p = 0; p < nc; ++p) {
    Real acc{0};
    for (std::size_t i = 0; i < plane; ++i) acc += x[p * plane + i];
    out[p] = acc / static_cast<Real>(plane);
  }
  tape.record("mean_spatial", {&x}, out, [&x, &out, nc, plane]() {
    for (int p = 0; p < nc; ++p) {
      const Real g = out.grad()[p] / static_cast<Real>(plane);
      for (std::size_t i = 0; i < plane; ++i) x.grad()[p * plane + i] += g;
    }
  });
  return out;
}

enum class Reduction { kMean, kSum };

/// Binary cross-entropy between probabilities and {0,1} (or soft) targets.
/// Probabilities are clamped to [eps, 1-eps]; the clamp has zero gradient.
template <typename Real>
Tensor<Real>& bce(Tape<Real>& tape, Tensor<Real>& prob, const Tensor<Real>& target,
                  Reduction reduction = Reduction::kMean) {
  if (prob.shape() != target.shape()) {
    detail::shape_fail("bce", shape_str(prob.shape()) + " vs target " + shape_str(target.shape()));
  }
  constexpr Real eps = std::numeric_limits<Real>::epsilon();
  Tensor<Real>& out = tape.make({1});
  Real acc{0};
  for (std::size_t i = 0; i < prob.size(); ++i) {
    const Real p = std::clamp(prob[i], eps, Real{1} - eps);
    const Real y = target[i];
    acc -= y * std::log(p) + (Real{1} - y) * std::log(Real{1} - p);
  }
  const Real norm = reduction == Reduction::kMean ? static_cast<Real>(prob.size()) : Real{1};
  out[0] = acc / norm;
  tape.record("bce", {&prob}, out, [&prob, &target, &out, norm]() {
    const Real g = out.grad()[0] / norm;
    auto dp = prob.grad();
    for (std::size_t i = 0; i < prob.size(); ++i) {
      const Real p = prob[i];
      if (p < eps || p > Real{1} - eps) continue;
      dp[i] += g * (p - target[i]) / (p * (Real{1} - p));
    }
  });
  return out;
}

/// Binary cross-entropy evaluated from logits z: max(z,0) - z*y + log(1 + exp(-|z|)).
/// The gradient sigmoid(z) - y never vanishes through saturation.
template <typename Real>
Tensor<Real>& bce_with_logits(Tape<Real>& tape, Tensor<Real>& logits, const Tensor<Real>& target,
                              Reduction reduction = Reduction::kMean) {
  if (logits.shape() != target.shape()) {
    detail::shape_fail("bce_with_logits", shape_str(logits.shape()) + " vs target " + shape_str(target.shape()));
  }
  Tensor<Real>& out = tape.make({1});
  Real acc{0};
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const Real z = logits[i];
    acc += std::max(z, Real{0}) - z * target[i] + std::log1p(std::exp(-std::abs(z)));
  }
  const Real norm = reduction == Reduction::kMean ? static_cast<Real>(logits.size()) : Real{1};
  out[0] = acc / norm;
  tape.record("bce_with_logits", {&logits}, out, [&logits, &target, &out, norm]() {
    const Real g = out.grad()[0] / norm;
    auto dz = logits.grad();
    for (std::size_t i = 0; i < logits.size(); ++i) dz[i] += g * (detail::stable_sigmoid(logits[i]) - target[i]);
  });
  return out;
}

/// Mean hinge loss max(0, 1 - y*s) over scores s with labels y in {-1,+1}.
template <typename Real>
Tensor<Real>& hinge(Tape<Real>& tape, Tensor<Real>& scores, const Tensor<Real>& labels) {
  if (scores.size() != labels.size()) {
    detail::shape_fail("hinge", shape_str(scores.shape()) + " vs labels " + shape_str(labels.shape()));
  }
  Tensor<Real>& out = tape.make({1});
  Real acc{0};
  for (std::size_t i = 0; i < scores.size(); ++i) {
    acc += std::max(Real{0}, Real{1} - labels[i] * scores[i]);
  }
  const Real n = static_cast<Real>(scores.size());
  out[0] = acc / n;
  tape.record("hinge", {&scores}, out, [&scores, &labels, &out, n]() {
    const Real g = out.grad()[0] / n;
    auto ds = scores.grad();
    for (std::size_t i = 0; i < scores.size(); ++i) {
      if (Real{1} - labels[i] * scores[i] > Real{0}) ds[i] -= g * labels[i];
    }
  });
  return out;
}

}  // namespace restlab::nc
