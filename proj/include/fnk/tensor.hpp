#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <initializer_list>
#include <istream>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "fnk/error.hpp"
#include "fnk/rng.hpp"

namespace fnk {

/// Rank-4 extent in batch/channel/row/column order.
struct Shape {
  std::size_t n = 1;
  std::size_t c = 1;
  std::size_t h = 1;
  std::size_t w = 1;

  std::size_t size() const noexcept { return n * c * h * w; }
  std::size_t plane() const noexcept { return h * w; }
  bool operator==(const Shape&) const = default;

  std::string to_string() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
           std::to_string(w) + ")";
  }
};

/// Dense row-major NCHW array of doubles. Owns its storage; copies are deep.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) : shape_(checked(shape)), data_(shape.size(), fill) {}

  Tensor(Shape shape, std::vector<double> values) : shape_(checked(shape)), data_(std::move(values)) {
    if (data_.size() != shape_.size())
      throw Error(ErrorKind::InvalidShape, "value count " + std::to_string(data_.size()) +
                                               " does not match shape " + shape_.to_string());
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }

  std::size_t index(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const noexcept {
    return ((n * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }
  double& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) noexcept {
    return data_[index(n, c, h, w)];
  }
  double at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const noexcept {
    return data_[index(n, c, h, w)];
  }

  /// Contiguous h*w plane of sample n, channel c.
  std::span<double> plane(std::size_t n, std::size_t c) noexcept {
    return std::span<double>(data_).subspan(index(n, c, 0, 0), shape_.plane());
  }
  std::span<const double> plane(std::size_t n, std::size_t c) const noexcept {
    return std::span<const double>(data_).subspan(index(n, c, 0, 0), shape_.plane());
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  /// Exact (bitwise on value) equality of shape and data.
  bool operator==(const Tensor& o) const { return shape_ == o.shape_ && data_ == o.data_; }

 private:
  static Shape checked(Shape s) {
    if (s.n == 0 || s.c == 0 || s.h == 0 || s.w == 0)
      throw Error(ErrorKind::InvalidShape, "all dimensions must be >= 1, got " + s.to_string());
    return s;
  }

  Shape shape_{};
  std::vector<double> data_;
};

inline Tensor zeros(Shape shape) { return Tensor(shape, 0.0); }
inline Tensor full(Shape shape, double v) { return Tensor(shape, v); }
inline Tensor zeros_like(const Tensor& t) { return Tensor(t.shape(), 0.0); }

inline Tensor gaussian(Shape shape, double mean, double stddev, Rng& rng) {
  if (!(stddev >= 0.0)) throw Error(ErrorKind::InvalidArgument, "gaussian std must be >= 0");
  Tensor t(shape);
  for (auto& v : t.data()) v = rng.normal(mean, stddev);
  return t;
}

inline Tensor uniform(Shape shape, double lo, double hi, Rng& rng) {
  Tensor t(shape);
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw Error(ErrorKind::ShapeMismatch, std::string(op) + ": " + a.shape().to_string() + " vs " +
                                              b.shape().to_string());
}

template <class F>
Tensor zip_with(const Tensor& a, const Tensor& b, const char* op, F f) {
  require_same_shape(a, b, op);
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
  return out;
}

template <class F>
Tensor map(const Tensor& a, F f) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
  return out;
}

inline Tensor elementwise_max(const Tensor& a, const Tensor& b) {
  return zip_with(a, b, "elementwise_max", [](double x, double y) { return x >= y ? x : y; });
}
inline Tensor add(const Tensor& a, const Tensor& b) {
  return zip_with(a, b, "add", [](double x, double y) { return x + y; });
}
inline Tensor sub(const Tensor& a, const Tensor& b) {
  return zip_with(a, b, "sub", [](double x, double y) { return x - y; });
}
inline Tensor mul(const Tensor& a, const Tensor& b) {
  return zip_with(a, b, "mul", [](double x, double y) { return x * y; });
}
inline Tensor mul_scalar(const Tensor& a, double s) {
  return map(a, [s](double x) { return x * s; });
}

/// a += alpha * b
inline void axpy_inplace(Tensor& a, double alpha, const Tensor& b) {
  require_same_shape(a, b, "axpy");
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += alpha * b[i];
}

inline double sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return s;
}

inline double dot(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double mean(const Tensor& a) { return sum(a) / static_cast<double>(a.size()); }

/// Axis selector for reductions; combine with |.
enum Axis : unsigned { kAxisN = 1, kAxisC = 2, kAxisH = 4, kAxisW = 8, kAxisAll = 15 };

/// Mean over the selected axes; reduced axes keep extent 1.
inline Tensor mean(const Tensor& a, unsigned axes) {
  const Shape s = a.shape();
  const Shape r{(axes & kAxisN) ? 1 : s.n, (axes & kAxisC) ? 1 : s.c, (axes & kAxisH) ? 1 : s.h,
                (axes & kAxisW) ? 1 : s.w};
  Tensor out(r);
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c)
      for (std::size_t h = 0; h < s.h; ++h)
        for (std::size_t w = 0; w < s.w; ++w)
          out.at(r.n == 1 ? 0 : n, r.c == 1 ? 0 : c, r.h == 1 ? 0 : h, r.w == 1 ? 0 : w) += a.at(n, c, h, w);
  const double count = static_cast<double>(s.size() / r.size());
  for (auto& v : out.data()) v /= count;
  return out;
}

// ---------------------------------------------------------------------------
// Binary serialization: "FNK1", u32 n, u32 c, u32 h, u32 w, then n*c*h*w
// IEEE-754 doubles. Everything little-endian.

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline void read_exact(std::istream& is, unsigned char* dst, std::size_t count, const char* what) {
  const auto offset = static_cast<long long>(is.tellg());
  is.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(count));
  if (static_cast<std::size_t>(is.gcount()) != count)
    throw Error(ErrorKind::Format, std::string("truncated input reading ") + what + " at byte offset " +
                                       std::to_string(offset < 0 ? 0 : offset));
}

inline std::uint32_t get_u32(std::istream& is, const char* what) {
  unsigned char b[4];
  read_exact(is, b, 4, what);
  return std::uint32_t{b[0]} | (std::uint32_t{b[1]} << 8) | (std::uint32_t{b[2]} << 16) |
         (std::uint32_t{b[3]} << 24);
}

inline std::uint64_t get_u64(std::istream& is, const char* what) {
  unsigned char b[8];
  read_exact(is, b, 8, what);
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

}  // namespace detail

inline void write_tensor(std::ostream& os, const Tensor& t) {
  os.write("FNK1", 4);
  const Shape s = t.shape();
  for (std::size_t d : {s.n, s.c, s.h, s.w}) detail::put_u32(os, static_cast<std::uint32_t>(d));
  for (double v : t.data()) detail::put_u64(os, std::bit_cast<std::uint64_t>(v));
}

inline Tensor read_tensor(std::istream& is) {
  unsigned char magic[4];
  detail::read_exact(is, magic, 4, "tensor magic");
  if (std::memcmp(magic, "FNK1", 4) != 0) throw Error(ErrorKind::Format, "bad tensor magic (expected FNK1)");
  Shape s;
  s.n = detail::get_u32(is, "tensor dims");
  s.c = detail::get_u32(is, "tensor dims");
  s.h = detail::get_u32(is, "tensor dims");
  s.w = detail::get_u32(is, "tensor dims");
  Tensor t(s);
  for (auto& v : t.data()) v = std::bit_cast<double>(detail::get_u64(is, "tensor data"));
  return t;
}

inline void save_tensor(const std::string& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error(ErrorKind::Format, "cannot open " + path + " for writing");
  write_tensor(os, t);
}

inline Tensor load_tensor(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorKind::Format, "cannot open " + path);
  return read_tensor(is);
}

}  // namespace fnk
