#pragma once

// Forward/backward kernels for the layers FReLU and the baseline networks
// need. "Convolution" is cross-correlation (no kernel flip) throughout, and
// every padded tap reads zero.

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "fnk/error.hpp"
#include "fnk/parallel.hpp"
#include "fnk/tensor.hpp"

namespace fnk {

namespace detail {

// Output rows o in [lo, hi) whose input row o*stride - pad + tap is in [0, in).
struct TapRange {
  std::size_t lo = 0;
  std::size_t hi = 0;
};

inline TapRange tap_range(std::size_t in, std::size_t out, std::size_t stride, std::size_t pad, std::size_t tap) {
  const long long p = static_cast<long long>(pad) - static_cast<long long>(tap);
  const long long s = static_cast<long long>(stride);
  long long lo = p > 0 ? (p + s - 1) / s : 0;
  long long hi_in = static_cast<long long>(in) - 1 + p;  // o*s <= hi_in
  long long hi = hi_in < 0 ? 0 : hi_in / s + 1;
  if (hi > static_cast<long long>(out)) hi = static_cast<long long>(out);
  if (lo > hi) lo = hi;
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

inline std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
  const long long span = static_cast<long long>(in) + 2 * static_cast<long long>(pad) - static_cast<long long>(k);
  if (span < 0) throw Error(ErrorKind::ShapeMismatch, "kernel larger than padded input");
  return static_cast<std::size_t>(span) / stride + 1;
}

// acc[o, q] += weight * src[o*stride - pad_h + th, q*stride - pad_w + tw] over valid taps.
inline void accumulate_tap(std::span<double> acc, std::size_t out_h, std::size_t out_w,
                           std::span<const double> src, std::size_t in_h, std::size_t in_w, std::size_t stride,
                           std::size_t pad_h, std::size_t pad_w, std::size_t th, std::size_t tw, double weight) {
  const TapRange rows = tap_range(in_h, out_h, stride, pad_h, th);
  const TapRange cols = tap_range(in_w, out_w, stride, pad_w, tw);
  for (std::size_t o = rows.lo; o < rows.hi; ++o) {
    const std::size_t i = o * stride + th - pad_h;
    double* dst = acc.data() + o * out_w;
    const double* row = src.data() + i * in_w;
    if (stride == 1) {
      const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(tw) - static_cast<std::ptrdiff_t>(pad_w);
      for (std::size_t q = cols.lo; q < cols.hi; ++q) dst[q] += weight * row[static_cast<std::ptrdiff_t>(q) + off];
    } else {
      for (std::size_t q = cols.lo; q < cols.hi; ++q) dst[q] += weight * row[q * stride + tw - pad_w];
    }
  }
}

// Adjoint of accumulate_tap: dst_in[...] += weight * grad[o, q].
inline void scatter_tap(std::span<double> dst_in, std::size_t in_h, std::size_t in_w, std::span<const double> grad,
                        std::size_t out_h, std::size_t out_w, std::size_t stride, std::size_t pad_h,
                        std::size_t pad_w, std::size_t th, std::size_t tw, double weight) {
  const TapRange rows = tap_range(in_h, out_h, stride, pad_h, th);
  const TapRange cols = tap_range(in_w, out_w, stride, pad_w, tw);
  for (std::size_t o = rows.lo; o < rows.hi; ++o) {
    const std::size_t i = o * stride + th - pad_h;
    const double* g = grad.data() + o * out_w;
    double* row = dst_in.data() + i * in_w;
    for (std::size_t q = cols.lo; q < cols.hi; ++q) row[q * stride + tw - pad_w] += weight * g[q];
  }
}

// Σ grad[o, q] * src[o*stride - pad_h + th, ...] over valid taps.
inline double correlate_tap(std::span<const double> grad, std::size_t out_h, std::size_t out_w,
                            std::span<const double> src, std::size_t in_h, std::size_t in_w, std::size_t stride,
                            std::size_t pad_h, std::size_t pad_w, std::size_t th, std::size_t tw) {
  const TapRange rows = tap_range(in_h, out_h, stride, pad_h, th);
  const TapRange cols = tap_range(in_w, out_w, stride, pad_w, tw);
  double s = 0.0;
  for (std::size_t o = rows.lo; o < rows.hi; ++o) {
    const std::size_t i = o * stride + th - pad_h;
    const double* g = grad.data() + o * out_w;
    const double* row = src.data() + i * in_w;
    for (std::size_t q = cols.lo; q < cols.hi; ++q) s += g[q] * row[q * stride + tw - pad_w];
  }
  return s;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Depthwise convolution

/// One kh x kw window per channel, shared over all positions; stride 1; no bias.
struct DepthwiseConvParams {
  std::size_t kh = 3;
  std::size_t kw = 3;
  std::size_t pad_h = 1;
  std::size_t pad_w = 1;
  Tensor weights;  // (1, c, kh, kw)

  std::size_t channels() const { return weights.shape().c; }
};

/// Same-padded depthwise window of the given size with the given weights.
inline DepthwiseConvParams make_depthwise(std::size_t channels, std::size_t kh, std::size_t kw, double fill = 0.0) {
  return DepthwiseConvParams{kh, kw, (kh - 1) / 2, (kw - 1) / 2, Tensor(Shape{1, channels, kh, kw}, fill)};
}

namespace detail {
inline void check_depthwise(const Tensor& x, const DepthwiseConvParams& p) {
  const Shape ws = p.weights.shape();
  if (ws.n != 1 || ws.h != p.kh || ws.w != p.kw)
    throw Error(ErrorKind::ShapeMismatch, "depthwise weights must be (1,c,kh,kw), got " + ws.to_string());
  if (x.shape().c != ws.c)
    throw Error(ErrorKind::ShapeMismatch, "depthwise conv: input has " + std::to_string(x.shape().c) +
                                              " channels, weights have " + std::to_string(ws.c));
}
}  // namespace detail

inline Tensor depthwise_conv_forward(const Tensor& x, const DepthwiseConvParams& p) {
  detail::check_depthwise(x, p);
  const Shape s = x.shape();
  const std::size_t oh = detail::conv_out_extent(s.h, p.kh, 1, p.pad_h);
  const std::size_t ow = detail::conv_out_extent(s.w, p.kw, 1, p.pad_w);
  Tensor out(Shape{s.n, s.c, oh, ow});
  parallel_for(s.n, [&](std::size_t n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      auto dst = out.plane(n, c);
      const auto src = x.plane(n, c);
      for (std::size_t th = 0; th < p.kh; ++th)
        for (std::size_t tw = 0; tw < p.kw; ++tw)
          detail::accumulate_tap(dst, oh, ow, src, s.h, s.w, 1, p.pad_h, p.pad_w, th, tw,
                                 p.weights.at(0, c, th, tw));
    }
  });
  return out;
}

struct DepthwiseConvGrads {
  Tensor grad_x;
  Tensor grad_weights;
};

inline DepthwiseConvGrads depthwise_conv_backward(const Tensor& x, const DepthwiseConvParams& p,
                                                  const Tensor& grad_out) {
  detail::check_depthwise(x, p);
  const Shape s = x.shape();
  const std::size_t oh = detail::conv_out_extent(s.h, p.kh, 1, p.pad_h);
  const std::size_t ow = detail::conv_out_extent(s.w, p.kw, 1, p.pad_w);
  if (grad_out.shape() != Shape{s.n, s.c, oh, ow})
    throw Error(ErrorKind::ShapeMismatch, "depthwise conv backward: grad_out shape " + grad_out.shape().to_string());
  DepthwiseConvGrads g{Tensor(s), Tensor(p.weights.shape())};
  parallel_for(s.n, [&](std::size_t n) {
    for (std::size_t c = 0; c < s.c; ++c)
      for (std::size_t th = 0; th < p.kh; ++th)
        for (std::size_t tw = 0; tw < p.kw; ++tw)
          detail::scatter_tap(g.grad_x.plane(n, c), s.h, s.w, grad_out.plane(n, c), oh, ow, 1, p.pad_h, p.pad_w, th,
                              tw, p.weights.at(0, c, th, tw));
  });
  parallel_for(s.c, [&](std::size_t c) {
    for (std::size_t th = 0; th < p.kh; ++th)
      for (std::size_t tw = 0; tw < p.kw; ++tw) {
        double acc = 0.0;
        for (std::size_t n = 0; n < s.n; ++n)
          acc += detail::correlate_tap(grad_out.plane(n, c), oh, ow, x.plane(n, c), s.h, s.w, 1, p.pad_h, p.pad_w,
                                       th, tw);
        g.grad_weights.at(0, c, th, tw) = acc;
      }
  });
  return g;
}

// ---------------------------------------------------------------------------
// Dense convolution

struct ConvParams {
  Tensor weights;                    // (c_out, c_in, kh, kw)
  std::optional<Tensor> bias;        // (1, c_out, 1, 1)
  std::size_t pad = 0;
  std::size_t stride = 1;

  std::size_t c_out() const { return weights.shape().n; }
  std::size_t c_in() const { return weights.shape().c; }
};

inline Shape conv_output_shape(const Shape& in, const ConvParams& p) {
  const Shape ws = p.weights.shape();
  return Shape{in.n, ws.n, detail::conv_out_extent(in.h, ws.h, p.stride, p.pad),
               detail::conv_out_extent(in.w, ws.w, p.stride, p.pad)};
}

namespace detail {
inline void check_conv(const Tensor& x, const ConvParams& p) {
  if (p.stride == 0) throw Error(ErrorKind::Config, "conv stride must be >= 1");
  if (x.shape().c != p.c_in())
    throw Error(ErrorKind::ShapeMismatch, "conv: input has " + std::to_string(x.shape().c) +
                                              " channels, kernel expects " + std::to_string(p.c_in()));
  if (p.bias && p.bias->size() != p.c_out())
    throw Error(ErrorKind::ShapeMismatch, "conv: bias length does not match c_out");
}
}  // namespace detail

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

// Unrolls one sample into a (c_in*kh*kw) x (out_h*out_w) matrix; padding taps are zero.
inline void im2col(std::span<const double> sample, const Shape& s, const Shape& ws, const Shape& os,
                   std::size_t stride, std::size_t pad, RowMatrix& cols) {
  const std::size_t P = os.h * os.w;
  cols.setZero(static_cast<Eigen::Index>(ws.c * ws.h * ws.w), static_cast<Eigen::Index>(P));
  for (std::size_t ci = 0; ci < ws.c; ++ci) {
    const auto src = sample.subspan(ci * s.h * s.w, s.h * s.w);
    for (std::size_t th = 0; th < ws.h; ++th)
      for (std::size_t tw = 0; tw < ws.w; ++tw) {
        const std::size_t k = (ci * ws.h + th) * ws.w + tw;
        std::span<double> row(cols.data() + k * P, P);
        accumulate_tap(row, os.h, os.w, src, s.h, s.w, stride, pad, pad, th, tw, 1.0);
      }
  }
}

// Adjoint of im2col: folds column gradients back onto the input sample.
inline void col2im(const RowMatrix& cols, const Shape& s, const Shape& ws, const Shape& os, std::size_t stride,
                   std::size_t pad, std::span<double> sample) {
  const std::size_t P = os.h * os.w;
  for (std::size_t ci = 0; ci < ws.c; ++ci) {
    auto dst = sample.subspan(ci * s.h * s.w, s.h * s.w);
    for (std::size_t th = 0; th < ws.h; ++th)
      for (std::size_t tw = 0; tw < ws.w; ++tw) {
        const std::size_t k = (ci * ws.h + th) * ws.w + tw;
        scatter_tap(dst, s.h, s.w, std::span<const double>(cols.data() + k * P, P), os.h, os.w, stride, pad, pad,
                    th, tw, 1.0);
      }
  }
}

}  // namespace detail

/// Dense convolution as a per-sample matrix product over unrolled patches.
inline Tensor conv_forward(const Tensor& x, const ConvParams& p) {
  detail::check_conv(x, p);
  const Shape s = x.shape();
  const Shape ws = p.weights.shape();
  const Shape os = conv_output_shape(s, p);
  const auto K = static_cast<Eigen::Index>(ws.c * ws.h * ws.w);
  const auto P = static_cast<Eigen::Index>(os.h * os.w);
  const auto CO = static_cast<Eigen::Index>(ws.n);
  Tensor out(os);
  const detail::ConstMatrixMap w(p.weights.data().data(), CO, K);
  const std::size_t in_sample = s.c * s.h * s.w;
  parallel_for(s.n, [&](std::size_t n) {
    detail::RowMatrix cols;
    detail::im2col(x.data().subspan(n * in_sample, in_sample), s, ws, os, p.stride, p.pad, cols);
    detail::MatrixMap dst(out.data().data() + n * static_cast<std::size_t>(CO * P), CO, P);
    dst.noalias() = w * cols;
    if (p.bias)
      for (Eigen::Index co = 0; co < CO; ++co) dst.row(co).array() += (*p.bias)[static_cast<std::size_t>(co)];
  });
  return out;
}

struct ConvGrads {
  Tensor grad_x;
  Tensor grad_weights;
  std::optional<Tensor> grad_bias;
};

inline ConvGrads conv_backward(const Tensor& x, const ConvParams& p, const Tensor& grad_out) {
  detail::check_conv(x, p);
  const Shape s = x.shape();
  const Shape ws = p.weights.shape();
  const Shape os = conv_output_shape(s, p);
  if (grad_out.shape() != os)
    throw Error(ErrorKind::ShapeMismatch, "conv backward: grad_out shape " + grad_out.shape().to_string() +
                                              ", expected " + os.to_string());
  const auto K = static_cast<Eigen::Index>(ws.c * ws.h * ws.w);
  const auto P = static_cast<Eigen::Index>(os.h * os.w);
  const auto CO = static_cast<Eigen::Index>(ws.n);
  const std::size_t in_sample = s.c * s.h * s.w;
  ConvGrads g{Tensor(s), Tensor(ws), std::nullopt};
  const detail::ConstMatrixMap w(p.weights.data().data(), CO, K);
  // Weight gradients are summed over samples in sample order so the result
  // does not depend on the thread count.
  std::vector<detail::RowMatrix> per_sample(s.n);
  parallel_for(s.n, [&](std::size_t n) {
    detail::RowMatrix cols;
    detail::im2col(x.data().subspan(n * in_sample, in_sample), s, ws, os, p.stride, p.pad, cols);
    const detail::ConstMatrixMap go(grad_out.data().data() + n * static_cast<std::size_t>(CO * P), CO, P);
    per_sample[n].noalias() = go * cols.transpose();
    detail::RowMatrix gcols = w.transpose() * go;
    detail::col2im(gcols, s, ws, os, p.stride, p.pad, g.grad_x.data().subspan(n * in_sample, in_sample));
  });
  detail::MatrixMap gw(g.grad_weights.data().data(), CO, K);
  for (const auto& m : per_sample) gw += m;
  if (p.bias) {
    Tensor gb(Shape{1, ws.n, 1, 1});
    for (std::size_t co = 0; co < ws.n; ++co) {
      double acc = 0.0;
      for (std::size_t n = 0; n < s.n; ++n)
        for (double v : grad_out.plane(n, co)) acc += v;
      gb[co] = acc;
    }
    g.grad_bias = std::move(gb);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Normalization

enum class NormKind { None, BatchNorm, LayerNorm, InstanceNorm, GroupNorm };
enum class Mode { Train, Eval };

inline const char* to_string(NormKind k) {
  switch (k) {
    case NormKind::None: return "none";
    case NormKind::BatchNorm: return "bn";
    case NormKind::LayerNorm: return "ln";
    case NormKind::InstanceNorm: return "in";
    case NormKind::GroupNorm: return "gn";
  }
  return "none";
}

inline NormKind parse_norm_kind(const std::string& s) {
  if (s == "none" || s == "-") return NormKind::None;
  if (s == "bn") return NormKind::BatchNorm;
  if (s == "ln") return NormKind::LayerNorm;
  if (s == "in") return NormKind::InstanceNorm;
  if (s == "gn") return NormKind::GroupNorm;
  throw Error(ErrorKind::Config, "unknown norm kind '" + s + "'");
}

/// Per-channel affine normalization. LayerNorm, InstanceNorm and GroupNorm
/// always use the statistics of the current sample; only BatchNorm keeps
/// running statistics for eval mode.
struct NormParams {
  NormKind kind = NormKind::None;
  std::size_t groups = 1;  // GroupNorm only
  Tensor gamma;            // (1, c, 1, 1)
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;
  double eps = 1e-5;
  double momentum = 0.1;
  bool affine = true;

  std::size_t channels() const { return gamma.shape().c; }
};

inline NormParams make_norm(NormKind kind, std::size_t channels, std::size_t groups = 1, bool affine = true) {
  if (kind == NormKind::GroupNorm && (groups == 0 || channels % groups != 0))
    throw Error(ErrorKind::Config, "group norm: " + std::to_string(channels) + " channels not divisible by " +
                                       std::to_string(groups) + " groups");
  const Shape cs{1, channels, 1, 1};
  NormParams p;
  p.kind = kind;
  p.groups = groups;
  p.gamma = Tensor(cs, 1.0);
  p.beta = Tensor(cs, 0.0);
  p.running_mean = Tensor(cs, 0.0);
  p.running_var = Tensor(cs, 1.0);
  p.affine = affine;
  return p;
}

struct RunningStats {
  Tensor mean;
  Tensor var;
};

struct NormForward {
  Tensor y;
  std::optional<RunningStats> running;  // set for BatchNorm in train mode
};

struct NormGrads {
  Tensor grad_x;
  Tensor grad_gamma;
  Tensor grad_beta;
};

namespace detail {

// Planes (n, c) are partitioned into groups; each group is standardized with
// its own mean and variance over all pixels of its planes.
struct PlaneGroups {
  std::vector<std::vector<std::pair<std::size_t, std::size_t>>> members;
};

inline PlaneGroups plane_groups(const Shape& s, const NormParams& p) {
  PlaneGroups g;
  switch (p.kind) {
    case NormKind::BatchNorm:
      g.members.resize(s.c);
      for (std::size_t c = 0; c < s.c; ++c)
        for (std::size_t n = 0; n < s.n; ++n) g.members[c].emplace_back(n, c);
      break;
    case NormKind::LayerNorm:
      g.members.resize(s.n);
      for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t c = 0; c < s.c; ++c) g.members[n].emplace_back(n, c);
      break;
    case NormKind::InstanceNorm:
      for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t c = 0; c < s.c; ++c) g.members.push_back({{n, c}});
      break;
    case NormKind::GroupNorm: {
      const std::size_t per = s.c / p.groups;
      for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t gi = 0; gi < p.groups; ++gi) {
          g.members.emplace_back();
          for (std::size_t c = gi * per; c < (gi + 1) * per; ++c) g.members.back().emplace_back(n, c);
        }
      break;
    }
    case NormKind::None: break;
  }
  return g;
}

inline void check_norm(const Tensor& x, const NormParams& p) {
  if (p.kind == NormKind::None) return;
  if (x.shape().c != p.channels())
    throw Error(ErrorKind::ShapeMismatch, "norm: input has " + std::to_string(x.shape().c) +
                                              " channels, parameters have " + std::to_string(p.channels()));
  if (!(p.eps > 0.0)) throw Error(ErrorKind::Config, "norm eps must be > 0");
  if (p.kind == NormKind::GroupNorm && (p.groups == 0 || p.channels() % p.groups != 0))
    throw Error(ErrorKind::Config, "group norm: channel count not divisible by group count");
}

struct GroupStats {
  double mean = 0.0;
  double inv_std = 0.0;
  double var = 0.0;
  std::size_t count = 0;
};

inline GroupStats group_stats(const Tensor& x, const std::vector<std::pair<std::size_t, std::size_t>>& planes,
                              double eps) {
  GroupStats st;
  double s = 0.0;
  for (auto [n, c] : planes)
    for (double v : x.plane(n, c)) s += v;
  st.count = planes.size() * x.shape().plane();
  st.mean = s / static_cast<double>(st.count);
  double ss = 0.0;
  for (auto [n, c] : planes)
    for (double v : x.plane(n, c)) ss += (v - st.mean) * (v - st.mean);
  st.var = ss / static_cast<double>(st.count);
  st.inv_std = 1.0 / std::sqrt(st.var + eps);
  return st;
}

inline bool uses_running_stats(const NormParams& p, Mode mode) {
  return p.kind == NormKind::BatchNorm && mode == Mode::Eval;
}

}  // namespace detail

inline NormForward norm_forward(const Tensor& x, const NormParams& p, Mode mode) {
  detail::check_norm(x, p);
  if (p.kind == NormKind::None) return {x, std::nullopt};
  const Shape s = x.shape();
  NormForward out{Tensor(s), std::nullopt};
  auto affine = [&](std::size_t c, double xhat) { return p.affine ? p.gamma[c] * xhat + p.beta[c] : xhat; };

  if (detail::uses_running_stats(p, mode)) {
    for (std::size_t n = 0; n < s.n; ++n)
      for (std::size_t c = 0; c < s.c; ++c) {
        const double m = p.running_mean[c];
        const double inv = 1.0 / std::sqrt(p.running_var[c] + p.eps);
        const auto src = x.plane(n, c);
        auto dst = out.y.plane(n, c);
        for (std::size_t i = 0; i < src.size(); ++i) dst[i] = affine(c, (src[i] - m) * inv);
      }
    return out;
  }

  const auto groups = detail::plane_groups(s, p);
  std::vector<detail::GroupStats> stats(groups.members.size());
  for (std::size_t g = 0; g < groups.members.size(); ++g) {
    stats[g] = detail::group_stats(x, groups.members[g], p.eps);
    for (auto [n, c] : groups.members[g]) {
      const auto src = x.plane(n, c);
      auto dst = out.y.plane(n, c);
      for (std::size_t i = 0; i < src.size(); ++i) dst[i] = affine(c, (src[i] - stats[g].mean) * stats[g].inv_std);
    }
  }
  if (p.kind == NormKind::BatchNorm && mode == Mode::Train) {
    RunningStats rs{p.running_mean, p.running_var};
    for (std::size_t c = 0; c < s.c; ++c) {
      const auto& st = stats[c];
      const double unbiased = st.count > 1 ? st.var * static_cast<double>(st.count) / (st.count - 1.0) : st.var;
      rs.mean[c] = (1.0 - p.momentum) * rs.mean[c] + p.momentum * st.mean;
      rs.var[c] = (1.0 - p.momentum) * rs.var[c] + p.momentum * unbiased;
    }
    out.running = std::move(rs);
  }
  return out;
}

inline NormGrads norm_backward(const Tensor& x, const NormParams& p, const Tensor& grad_out, Mode mode) {
  detail::check_norm(x, p);
  require_same_shape(x, grad_out, "norm backward");
  const Shape s = x.shape();
  if (p.kind == NormKind::None) return {grad_out, Tensor(Shape{1, s.c, 1, 1}), Tensor(Shape{1, s.c, 1, 1})};
  const Shape cs{1, s.c, 1, 1};
  NormGrads g{Tensor(s), Tensor(cs), Tensor(cs)};
  auto gamma = [&](std::size_t c) { return p.affine ? p.gamma[c] : 1.0; };

  if (detail::uses_running_stats(p, mode)) {
    for (std::size_t n = 0; n < s.n; ++n)
      for (std::size_t c = 0; c < s.c; ++c) {
        const double m = p.running_mean[c];
        const double inv = 1.0 / std::sqrt(p.running_var[c] + p.eps);
        const auto src = x.plane(n, c);
        const auto go = grad_out.plane(n, c);
        auto gx = g.grad_x.plane(n, c);
        for (std::size_t i = 0; i < src.size(); ++i) {
          gx[i] = go[i] * gamma(c) * inv;
          g.grad_gamma[c] += go[i] * (src[i] - m) * inv;
          g.grad_beta[c] += go[i];
        }
      }
    if (!p.affine) {
      g.grad_gamma.fill(0.0);
      g.grad_beta.fill(0.0);
    }
    return g;
  }

  const auto groups = detail::plane_groups(s, p);
  for (const auto& members : groups.members) {
    const auto st = detail::group_stats(x, members, p.eps);
    // dxhat = grad_out * gamma; dx = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
    double sum_dxhat = 0.0;
    double sum_dxhat_xhat = 0.0;
    for (auto [n, c] : members) {
      const auto src = x.plane(n, c);
      const auto go = grad_out.plane(n, c);
      for (std::size_t i = 0; i < src.size(); ++i) {
        const double xhat = (src[i] - st.mean) * st.inv_std;
        const double dxhat = go[i] * gamma(c);
        sum_dxhat += dxhat;
        sum_dxhat_xhat += dxhat * xhat;
        g.grad_gamma[c] += go[i] * xhat;
        g.grad_beta[c] += go[i];
      }
    }
    const double m = static_cast<double>(st.count);
    const double mean_dxhat = sum_dxhat / m;
    const double mean_dxhat_xhat = sum_dxhat_xhat / m;
    for (auto [n, c] : members) {
      const auto src = x.plane(n, c);
      const auto go = grad_out.plane(n, c);
      auto gx = g.grad_x.plane(n, c);
      for (std::size_t i = 0; i < src.size(); ++i) {
        const double xhat = (src[i] - st.mean) * st.inv_std;
        gx[i] = st.inv_std * (go[i] * gamma(c) - mean_dxhat - xhat * mean_dxhat_xhat);
      }
    }
  }
  if (!p.affine) {
    g.grad_gamma.fill(0.0);
    g.grad_beta.fill(0.0);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Stride-1, same-size window pooling. Out-of-bounds taps are skipped: they
// never win the max and are not counted in the average's denominator.

namespace detail {
inline void check_window(std::size_t kh, std::size_t kw) {
  if (kh == 0 || kw == 0 || kh % 2 == 0 || kw % 2 == 0)
    throw Error(ErrorKind::Config, "pooling window must be odd, got " + std::to_string(kh) + "x" + std::to_string(kw));
}

template <class Visit>
void for_each_window(const Shape& s, std::size_t kh, std::size_t kw, Visit&& visit) {
  const long long rh = static_cast<long long>(kh / 2);
  const long long rw = static_cast<long long>(kw / 2);
  const long long H = static_cast<long long>(s.h);
  const long long W = static_cast<long long>(s.w);
  for (long long i = 0; i < H; ++i)
    for (long long j = 0; j < W; ++j) {
      const std::size_t i0 = static_cast<std::size_t>(std::max(0LL, i - rh));
      const std::size_t i1 = static_cast<std::size_t>(std::min(H - 1, i + rh));
      const std::size_t j0 = static_cast<std::size_t>(std::max(0LL, j - rw));
      const std::size_t j1 = static_cast<std::size_t>(std::min(W - 1, j + rw));
      visit(static_cast<std::size_t>(i * W + j), i0, i1, j0, j1);
    }
}
}  // namespace detail

inline Tensor window_maxpool(const Tensor& x, std::size_t kh, std::size_t kw) {
  detail::check_window(kh, kw);
  const Shape s = x.shape();
  Tensor out(s);
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c) {
      const auto src = x.plane(n, c);
      auto dst = out.plane(n, c);
      detail::for_each_window(s, kh, kw, [&](std::size_t o, std::size_t i0, std::size_t i1, std::size_t j0,
                                             std::size_t j1) {
        double best = src[i0 * s.w + j0];
        for (std::size_t i = i0; i <= i1; ++i)
          for (std::size_t j = j0; j <= j1; ++j) best = std::max(best, src[i * s.w + j]);
        dst[o] = best;
      });
    }
  return out;
}

/// Routes each output gradient to the first (row-major) arg-max of its window.
inline Tensor window_maxpool_backward(const Tensor& x, std::size_t kh, std::size_t kw, const Tensor& grad_out) {
  detail::check_window(kh, kw);
  require_same_shape(x, grad_out, "maxpool backward");
  const Shape s = x.shape();
  Tensor gx(s);
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c) {
      const auto src = x.plane(n, c);
      const auto go = grad_out.plane(n, c);
      auto dst = gx.plane(n, c);
      detail::for_each_window(s, kh, kw, [&](std::size_t o, std::size_t i0, std::size_t i1, std::size_t j0,
                                             std::size_t j1) {
        std::size_t arg = i0 * s.w + j0;
        for (std::size_t i = i0; i <= i1; ++i)
          for (std::size_t j = j0; j <= j1; ++j)
            if (src[i * s.w + j] > src[arg]) arg = i * s.w + j;
        dst[arg] += go[o];
      });
    }
  return gx;
}

inline Tensor window_avgpool(const Tensor& x, std::size_t kh, std::size_t kw) {
  detail::check_window(kh, kw);
  const Shape s = x.shape();
  Tensor out(s);
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c) {
      const auto src = x.plane(n, c);
      auto dst = out.plane(n, c);
      detail::for_each_window(s, kh, kw, [&](std::size_t o, std::size_t i0, std::size_t i1, std::size_t j0,
                                             std::size_t j1) {
        double acc = 0.0;
        for (std::size_t i = i0; i <= i1; ++i)
          for (std::size_t j = j0; j <= j1; ++j) acc += src[i * s.w + j];
        dst[o] = acc / static_cast<double>((i1 - i0 + 1) * (j1 - j0 + 1));
      });
    }
  return out;
}

inline Tensor window_avgpool_backward(const Shape& s, std::size_t kh, std::size_t kw, const Tensor& grad_out) {
  detail::check_window(kh, kw);
  if (grad_out.shape() != s) throw Error(ErrorKind::ShapeMismatch, "avgpool backward: grad_out shape mismatch");
  Tensor gx(s);
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c) {
      const auto go = grad_out.plane(n, c);
      auto dst = gx.plane(n, c);
      detail::for_each_window(s, kh, kw, [&](std::size_t o, std::size_t i0, std::size_t i1, std::size_t j0,
                                             std::size_t j1) {
        const double share = go[o] / static_cast<double>((i1 - i0 + 1) * (j1 - j0 + 1));
        for (std::size_t i = i0; i <= i1; ++i)
          for (std::size_t j = j0; j <= j1; ++j) dst[i * s.w + j] += share;
      });
    }
  return gx;
}

// ---------------------------------------------------------------------------
// Strided, padded pooling for downsampling layers. Same border rule as above:
// only in-bounds taps take part.

struct PoolWindow {
  std::size_t kh = 3, kw = 3, stride = 2, pad = 1;
};

namespace detail {
inline Shape pool_output_shape(const Shape& s, const PoolWindow& p) {
  if (p.kh == 0 || p.kw == 0 || p.stride == 0 || 2 * p.pad >= p.kh || 2 * p.pad >= p.kw)
    throw Error(ErrorKind::Config, "pool window must be >= 1 and padding less than half the window");
  return Shape{s.n, s.c, conv_out_extent(s.h, p.kh, p.stride, p.pad), conv_out_extent(s.w, p.kw, p.stride, p.pad)};
}

template <class Visit>
void for_each_strided_window(const Shape& s, const Shape& os, const PoolWindow& p, Visit&& visit) {
  for (std::size_t oi = 0; oi < os.h; ++oi)
    for (std::size_t oj = 0; oj < os.w; ++oj) {
      const long long top = static_cast<long long>(oi * p.stride) - static_cast<long long>(p.pad);
      const long long left = static_cast<long long>(oj * p.stride) - static_cast<long long>(p.pad);
      const std::size_t i0 = static_cast<std::size_t>(std::max(0LL, top));
      const std::size_t j0 = static_cast<std::size_t>(std::max(0LL, left));
      const std::size_t i1 = static_cast<std::size_t>(std::min<long long>(static_cast<long long>(s.h) - 1, top + static_cast<long long>(p.kh) - 1));
      const std::size_t j1 = static_cast<std::size_t>(std::min<long long>(static_cast<long long>(s.w) - 1, left + static_cast<long long>(p.kw) - 1));
      visit(oi * os.w + oj, i0, i1, j0, j1);
    }
}
}  // namespace detail

inline Tensor pool_forward(const Tensor& x, const PoolWindow& p, bool is_max) {
  const Shape s = x.shape();
  const Shape os = detail::pool_output_shape(s, p);
  Tensor out(os);
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c) {
      const auto src = x.plane(n, c);
      auto dst = out.plane(n, c);
      detail::for_each_strided_window(s, os, p, [&](std::size_t o, std::size_t i0, std::size_t i1, std::size_t j0,
                                                    std::size_t j1) {
        double acc = is_max ? src[i0 * s.w + j0] : 0.0;
        for (std::size_t i = i0; i <= i1; ++i)
          for (std::size_t j = j0; j <= j1; ++j) acc = is_max ? std::max(acc, src[i * s.w + j]) : acc + src[i * s.w + j];
        dst[o] = is_max ? acc : acc / static_cast<double>((i1 - i0 + 1) * (j1 - j0 + 1));
      });
    }
  return out;
}

inline Tensor pool_backward(const Tensor& x, const PoolWindow& p, bool is_max, const Tensor& grad_out) {
  const Shape s = x.shape();
  const Shape os = detail::pool_output_shape(s, p);
  if (grad_out.shape() != os) throw Error(ErrorKind::ShapeMismatch, "pool backward: grad_out shape mismatch");
  Tensor gx(s);
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c) {
      const auto src = x.plane(n, c);
      const auto go = grad_out.plane(n, c);
      auto dst = gx.plane(n, c);
      detail::for_each_strided_window(s, os, p, [&](std::size_t o, std::size_t i0, std::size_t i1, std::size_t j0,
                                                    std::size_t j1) {
        if (is_max) {
          std::size_t arg = i0 * s.w + j0;
          for (std::size_t i = i0; i <= i1; ++i)
            for (std::size_t j = j0; j <= j1; ++j)
              if (src[i * s.w + j] > src[arg]) arg = i * s.w + j;
          dst[arg] += go[o];
          return;
        }
        const double share = go[o] / static_cast<double>((i1 - i0 + 1) * (j1 - j0 + 1));
        for (std::size_t i = i0; i <= i1; ++i)
          for (std::size_t j = j0; j <= j1; ++j) dst[i * s.w + j] += share;
      });
    }
  return gx;
}

// ---------------------------------------------------------------------------
// Global average pooling and the fully connected head.

inline Tensor global_avg_pool(const Tensor& x) { return mean(x, kAxisH | kAxisW); }

inline Tensor global_avg_pool_backward(const Shape& s, const Tensor& grad_out) {
  Tensor gx(s);
  const double inv = 1.0 / static_cast<double>(s.plane());
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c) {
      const double g = grad_out.at(n, c, 0, 0) * inv;
      for (auto& v : gx.plane(n, c)) v = g;
    }
  return gx;
}

/// weights (out, in, 1, 1), bias (1, out, 1, 1); x is flattened per sample.
struct LinearParams {
  Tensor weights;
  Tensor bias;

  std::size_t in_features() const { return weights.shape().c; }
  std::size_t out_features() const { return weights.shape().n; }
};

inline Tensor linear_forward(const Tensor& x, const LinearParams& p) {
  const Shape s = x.shape();
  const std::size_t in = s.c * s.h * s.w;
  if (in != p.in_features())
    throw Error(ErrorKind::ShapeMismatch, "linear: input has " + std::to_string(in) + " features, expected " +
                                              std::to_string(p.in_features()));
  const std::size_t out_f = p.out_features();
  Tensor out(Shape{s.n, out_f, 1, 1});
  for (std::size_t n = 0; n < s.n; ++n) {
    const double* xv = x.data().data() + n * in;
    for (std::size_t o = 0; o < out_f; ++o) {
      const double* wv = p.weights.data().data() + o * in;
      double acc = p.bias[o];
      for (std::size_t i = 0; i < in; ++i) acc += wv[i] * xv[i];
      out.at(n, o, 0, 0) = acc;
    }
  }
  return out;
}

struct LinearGrads {
  Tensor grad_x;
  Tensor grad_weights;
  Tensor grad_bias;
};

inline LinearGrads linear_backward(const Tensor& x, const LinearParams& p, const Tensor& grad_out) {
  const Shape s = x.shape();
  const std::size_t in = s.c * s.h * s.w;
  const std::size_t out_f = p.out_features();
  if (in != p.in_features() || grad_out.shape() != Shape{s.n, out_f, 1, 1})
    throw Error(ErrorKind::ShapeMismatch, "linear backward: shape mismatch");
  LinearGrads g{Tensor(s), Tensor(p.weights.shape()), Tensor(p.bias.shape())};
  for (std::size_t n = 0; n < s.n; ++n) {
    const double* xv = x.data().data() + n * in;
    double* gx = g.grad_x.data().data() + n * in;
    for (std::size_t o = 0; o < out_f; ++o) {
      const double go = grad_out.at(n, o, 0, 0);
      const double* wv = p.weights.data().data() + o * in;
      double* gw = g.grad_weights.data().data() + o * in;
      for (std::size_t i = 0; i < in; ++i) {
        gx[i] += go * wv[i];
        gw[i] += go * xv[i];
      }
      g.grad_bias[o] += go;
    }
  }
  return g;
}

}  // namespace fnk
