#pragma once

// Brute-force reference implementations used only by tests. They index
// padded inputs directly and share no code with the library kernels.

#include <cmath>
#include <vector>

#include "fnk/tensor.hpp"

namespace fnk::oracle {

inline double padded(const Tensor& x, std::size_t n, std::size_t c, long long i, long long j) {
  const Shape s = x.shape();
  if (i < 0 || j < 0 || i >= static_cast<long long>(s.h) || j >= static_cast<long long>(s.w)) return 0.0;
  return x.at(n, c, static_cast<std::size_t>(i), static_cast<std::size_t>(j));
}

/// Six nested loops over (n, co, oi, oj, ci, taps).
inline Tensor naive_conv(const Tensor& x, const Tensor& w, const std::vector<double>& bias, std::size_t pad,
                         std::size_t stride, std::size_t* mac_count = nullptr) {
  const Shape s = x.shape();
  const Shape ws = w.shape();
  const std::size_t oh = (s.h + 2 * pad - ws.h) / stride + 1;
  const std::size_t ow = (s.w + 2 * pad - ws.w) / stride + 1;
  Tensor out(Shape{s.n, ws.n, oh, ow});
  std::size_t macs = 0;
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t co = 0; co < ws.n; ++co)
      for (std::size_t oi = 0; oi < oh; ++oi)
        for (std::size_t oj = 0; oj < ow; ++oj) {
          double acc = bias.empty() ? 0.0 : bias[co];
          for (std::size_t ci = 0; ci < ws.c; ++ci)
            for (std::size_t a = 0; a < ws.h; ++a)
              for (std::size_t b = 0; b < ws.w; ++b) {
                const long long i = static_cast<long long>(oi * stride + a) - static_cast<long long>(pad);
                const long long j = static_cast<long long>(oj * stride + b) - static_cast<long long>(pad);
                acc += w.at(co, ci, a, b) * padded(x, n, ci, i, j);
                ++macs;
              }
          out.at(n, co, oi, oj) = acc;
        }
  if (mac_count) *mac_count = macs / s.n;
  return out;
}

/// Same-padded per-channel window sum with weights (1, c, kh, kw).
inline Tensor naive_depthwise(const Tensor& x, const Tensor& w, std::size_t* mac_count = nullptr) {
  const Shape s = x.shape();
  const Shape ws = w.shape();
  const long long ph = static_cast<long long>(ws.h / 2), pw = static_cast<long long>(ws.w / 2);
  Tensor out(s);
  std::size_t macs = 0;
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c)
      for (std::size_t i = 0; i < s.h; ++i)
        for (std::size_t j = 0; j < s.w; ++j) {
          double acc = 0.0;
          for (std::size_t a = 0; a < ws.h; ++a)
            for (std::size_t b = 0; b < ws.w; ++b) {
              acc += w.at(0, c, a, b) *
                     padded(x, n, c, static_cast<long long>(i + a) - ph, static_cast<long long>(j + b) - pw);
              ++macs;
            }
          out.at(n, c, i, j) = acc;
        }
  if (mac_count) *mac_count = macs / s.n;
  return out;
}

/// Window scan over in-bounds taps only.
inline Tensor naive_pool(const Tensor& x, std::size_t k, bool is_max) {
  const Shape s = x.shape();
  const long long r = static_cast<long long>(k / 2);
  Tensor out(s);
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c)
      for (long long i = 0; i < static_cast<long long>(s.h); ++i)
        for (long long j = 0; j < static_cast<long long>(s.w); ++j) {
          double best = -INFINITY, acc = 0.0;
          int count = 0;
          for (long long a = i - r; a <= i + r; ++a)
            for (long long b = j - r; b <= j + r; ++b) {
              if (a < 0 || b < 0 || a >= static_cast<long long>(s.h) || b >= static_cast<long long>(s.w)) continue;
              const double v = x.at(n, c, static_cast<std::size_t>(a), static_cast<std::size_t>(b));
              best = std::max(best, v);
              acc += v;
              ++count;
            }
          out.at(n, c, static_cast<std::size_t>(i), static_cast<std::size_t>(j)) = is_max ? best : acc / count;
        }
  return out;
}

}  // namespace fnk::oracle
