#pragma once

// Datasets for the training harness: the synthetic layout task and IDX
// (MNIST-style) files.
//
// Synthetic layouts are 4-class single-channel images: an axis-aligned bar,
// an oblique line, a circular arc and a blob, each with random position,
// orientation, thickness and contrast, on a noisy background. Pixel values
// are quantized to k/255 so an IDX export reloads bit-identically.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include "fnk/error.hpp"
#include "fnk/rng.hpp"
#include "fnk/tensor.hpp"

namespace fnk {

struct Dataset {
  Tensor images;            // (N, c, h, w), values in [0, 1]
  std::vector<int> labels;  // length N, in [0, num_classes)
  std::size_t num_classes = 0;

  std::size_t size() const { return labels.size(); }

  /// Copies the listed samples into one batch.
  Tensor batch(const std::vector<std::size_t>& idx) const {
    const Shape s = images.shape();
    const std::size_t per = s.c * s.h * s.w;
    Tensor out(Shape{idx.size(), s.c, s.h, s.w});
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const auto src = images.data().subspan(idx[b] * per, per);
      std::copy(src.begin(), src.end(), out.data().begin() + static_cast<std::ptrdiff_t>(b * per));
    }
    return out;
  }

  std::vector<int> batch_labels(const std::vector<std::size_t>& idx) const {
    std::vector<int> out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(labels[i]);
    return out;
  }
};

// ---------------------------------------------------------------------------
// Synthetic layouts

enum LayoutClass : int { kBar = 0, kObliqueLine = 1, kArc = 2, kBlob = 3 };

inline const char* layout_class_name(int c) {
  static const char* names[] = {"bar", "oblique_line", "arc", "blob"};
  return c >= 0 && c < 4 ? names[c] : "?";
}

/// Rendering knobs. Lengths are fractions of the image size.
struct SynthOptions {
  double noise = 0.2;             // gaussian pixel noise sd
  double background = 0.2;
  double min_contrast = 0.45, max_contrast = 0.8;
  double min_thickness = 1.2, max_thickness = 2.6;
  double min_length = 0.35, max_length = 0.7;
  std::size_t distractors = 2;    // short random strokes added to every image
  bool operator==(const SynthOptions&) const = default;
};

namespace detail {

struct Vec2 {
  double x, y;
};

inline double segment_distance(Vec2 p, Vec2 a, Vec2 b) {
  const double dx = b.x - a.x, dy = b.y - a.y;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0 ? ((p.x - a.x) * dx + (p.y - a.y) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  return std::hypot(p.x - (a.x + t * dx), p.y - (a.y + t * dy));
}

inline double wrap_angle(double a) {
  constexpr double two_pi = 2 * std::numbers::pi;
  a = std::fmod(a, two_pi);
  return a < 0 ? a + two_pi : a;
}

// Distance to the arc of radius r around c spanning [start, start + span).
inline double arc_distance(Vec2 p, Vec2 c, double r, double start, double span) {
  const double ang = wrap_angle(std::atan2(p.y - c.y, p.x - c.x) - start);
  if (ang <= span) return std::abs(std::hypot(p.x - c.x, p.y - c.y) - r);
  const Vec2 e0{c.x + r * std::cos(start), c.y + r * std::sin(start)};
  const Vec2 e1{c.x + r * std::cos(start + span), c.y + r * std::sin(start + span)};
  return std::min(std::hypot(p.x - e0.x, p.y - e0.y), std::hypot(p.x - e1.x, p.y - e1.y));
}

// Stroke coverage for a pixel at distance d from the centerline.
inline double stroke(double d, double thickness) { return std::clamp(thickness / 2 + 0.5 - d, 0.0, 1.0); }

inline void draw(std::vector<double>& canvas, std::size_t size, double contrast, auto&& distance_to_coverage) {
  for (std::size_t i = 0; i < size; ++i)
    for (std::size_t j = 0; j < size; ++j) {
      const double cov = distance_to_coverage(Vec2{static_cast<double>(j), static_cast<double>(i)});
      double& v = canvas[i * size + j];
      v = std::max(v, contrast * cov);
    }
}

inline Vec2 random_center(Rng& rng, double size, double margin) {
  return Vec2{rng.uniform(margin, size - 1 - margin), rng.uniform(margin, size - 1 - margin)};
}

}  // namespace detail

/// Renders one image of class `label` into a size*size canvas of [0, 1] values.
inline std::vector<double> render_layout(int label, std::size_t size, Rng& rng, const SynthOptions& o = {}) {
  using detail::Vec2;
  const double S = static_cast<double>(size);
  const double pi = std::numbers::pi;
  std::vector<double> canvas(size * size, 0.0);
  const double contrast = rng.uniform(o.min_contrast, o.max_contrast);
  const double thick = rng.uniform(o.min_thickness, o.max_thickness);
  const double len = rng.uniform(o.min_length, o.max_length) * S;
  switch (label) {
    case kBar:
    case kObliqueLine: {
      double angle;
      if (label == kBar) {
        angle = rng.below(2) == 0 ? 0.0 : pi / 2;
      } else {
        angle = rng.uniform(pi / 9, 4 * pi / 9);  // 20..80 degrees
        if (rng.below(2) == 1) angle = pi - angle;
      }
      const Vec2 c = detail::random_center(rng, S, len / 2 * 0.7 + 2);
      const Vec2 a{c.x - len / 2 * std::cos(angle), c.y - len / 2 * std::sin(angle)};
      const Vec2 b{c.x + len / 2 * std::cos(angle), c.y + len / 2 * std::sin(angle)};
      detail::draw(canvas, size, contrast, [&](Vec2 p) { return detail::stroke(detail::segment_distance(p, a, b), thick); });
      break;
    }
    case kArc: {
      const double span = rng.uniform(0.6 * pi, 1.2 * pi);
      const double r = std::clamp(len / span, 0.18 * S, 0.32 * S);
      const double start = rng.uniform(0.0, 2 * pi);
      const Vec2 c = detail::random_center(rng, S, r * 0.6 + 2);
      detail::draw(canvas, size, contrast,
                   [&](Vec2 p) { return detail::stroke(detail::arc_distance(p, c, r, start, span), thick); });
      break;
    }
    case kBlob: {
      const double a = rng.uniform(0.08, 0.16) * S;
      const double b = rng.uniform(0.08, 0.16) * S;
      const double rot = rng.uniform(0.0, pi);
      const Vec2 c = detail::random_center(rng, S, std::max(a, b) + 2);
      detail::draw(canvas, size, contrast, [&](Vec2 p) {
        const double dx = p.x - c.x, dy = p.y - c.y;
        const double u = dx * std::cos(rot) + dy * std::sin(rot);
        const double v = -dx * std::sin(rot) + dy * std::cos(rot);
        const double rn = std::sqrt((u * u) / (a * a) + (v * v) / (b * b));
        return std::clamp(0.5 - (rn - 1.0) * std::min(a, b), 0.0, 1.0);
      });
      break;
    }
    default: throw Error(ErrorKind::InvalidArgument, "unknown layout class " + std::to_string(label));
  }
  for (std::size_t d = 0; d < o.distractors; ++d) {
    const double dl = rng.uniform(0.08, 0.16) * S;
    const double ang = rng.uniform(0.0, pi);
    const Vec2 c = detail::random_center(rng, S, 1.0);
    const Vec2 a{c.x - dl / 2 * std::cos(ang), c.y - dl / 2 * std::sin(ang)};
    const Vec2 b{c.x + dl / 2 * std::cos(ang), c.y + dl / 2 * std::sin(ang)};
    const double dc = rng.uniform(o.min_contrast, o.max_contrast);
    detail::draw(canvas, size, dc, [&](Vec2 p) { return detail::stroke(detail::segment_distance(p, a, b), 1.0); });
  }
  for (auto& v : canvas) {
    const double noisy = std::clamp(o.background + v + rng.normal(0.0, o.noise), 0.0, 1.0);
    v = std::round(noisy * 255.0) / 255.0;
  }
  return canvas;
}

/// n labeled images; labels are drawn uniformly. Deterministic per rng state.
inline Dataset synth_layouts(std::size_t n, std::size_t image_size, Rng& rng, const SynthOptions& o = {}) {
  if (image_size < 16) throw Error(ErrorKind::InvalidArgument, "synth image size must be >= 16");
  if (n == 0) throw Error(ErrorKind::InvalidArgument, "synth dataset needs at least one sample");
  Dataset d{Tensor(Shape{n, 1, image_size, image_size}), {}, 4};
  d.labels.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(rng.below(4));
    const auto img = render_layout(label, image_size, rng, o);
    std::copy(img.begin(), img.end(), d.images.plane(i, 0).begin());
    d.labels.push_back(label);
  }
  return d;
}

// ---------------------------------------------------------------------------
// IDX files: big-endian magic 0x00000803 (u8 images, n x rows x cols) and
// 0x00000801 (u8 labels). Images are scaled to [0, 1] on load.

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

namespace detail {

inline void put_be32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_be32(std::istream& is, const char* what) {
  unsigned char b[4];
  read_exact(is, b, 4, what);
  return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) | std::uint32_t{b[3]};
}

inline std::ifstream open_in(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorKind::Format, "cannot open " + path);
  return is;
}

inline std::ofstream open_out(const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error(ErrorKind::Format, "cannot open " + path + " for writing");
  return os;
}

}  // namespace detail

inline Tensor read_idx_images(std::istream& is) {
  const std::uint32_t magic = detail::get_be32(is, "IDX magic");
  if (magic != kIdxImagesMagic)
    throw Error(ErrorKind::Format, "bad IDX image magic at byte offset 0 (expected 0x00000803)");
  const std::size_t n = detail::get_be32(is, "IDX dims");
  const std::size_t h = detail::get_be32(is, "IDX dims");
  const std::size_t w = detail::get_be32(is, "IDX dims");
  Tensor t(Shape{n, 1, h, w});
  std::vector<unsigned char> buf(n * h * w);
  detail::read_exact(is, buf.data(), buf.size(), "IDX pixels");
  for (std::size_t i = 0; i < buf.size(); ++i) t[i] = static_cast<double>(buf[i]) / 255.0;
  return t;
}

inline std::vector<int> read_idx_labels(std::istream& is) {
  const std::uint32_t magic = detail::get_be32(is, "IDX magic");
  if (magic != kIdxLabelsMagic)
    throw Error(ErrorKind::Format, "bad IDX label magic at byte offset 0 (expected 0x00000801)");
  const std::size_t n = detail::get_be32(is, "IDX dims");
  std::vector<unsigned char> buf(n);
  detail::read_exact(is, buf.data(), n, "IDX labels");
  return std::vector<int>(buf.begin(), buf.end());
}

/// Values must be multiples of 1/255 in [0, 1] for the round trip to be exact.
inline void write_idx_images(std::ostream& os, const Tensor& images) {
  const Shape s = images.shape();
  if (s.c != 1) throw Error(ErrorKind::InvalidArgument, "IDX images must have one channel");
  detail::put_be32(os, kIdxImagesMagic);
  for (std::size_t d : {s.n, s.h, s.w}) detail::put_be32(os, static_cast<std::uint32_t>(d));
  for (double v : images.data()) os.put(static_cast<char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
}

inline void write_idx_labels(std::ostream& os, const std::vector<int>& labels) {
  detail::put_be32(os, kIdxLabelsMagic);
  detail::put_be32(os, static_cast<std::uint32_t>(labels.size()));
  for (int l : labels) {
    if (l < 0 || l > 255) throw Error(ErrorKind::InvalidArgument, "IDX labels must fit in a byte");
    os.put(static_cast<char>(l));
  }
}

inline Tensor load_idx_images(const std::string& path) {
  auto is = detail::open_in(path);
  return read_idx_images(is);
}

inline std::vector<int> load_idx_labels(const std::string& path) {
  auto is = detail::open_in(path);
  return read_idx_labels(is);
}

/// Pairs an image file with a label file; num_classes = max label + 1.
inline Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  Dataset d{load_idx_images(images_path), load_idx_labels(labels_path), 0};
  if (d.labels.size() != d.images.shape().n)
    throw Error(ErrorKind::Format, images_path + " has " + std::to_string(d.images.shape().n) + " images but " +
                                       labels_path + " has " + std::to_string(d.labels.size()) + " labels");
  for (int l : d.labels) d.num_classes = std::max(d.num_classes, static_cast<std::size_t>(l) + 1);
  return d;
}

inline void save_idx(const Dataset& d, const std::string& images_path, const std::string& labels_path) {
  auto is = detail::open_out(images_path);
  write_idx_images(is, d.images);
  auto ls = detail::open_out(labels_path);
  write_idx_labels(ls, d.labels);
}

}  // namespace fnk
