#pragma once

// Activate-field analysis for stacks of funnel activations.
//
// After n funnel layers with k x k windows, each pixel's value depends on a
// square neighborhood whose side is one of {1, 1+r, ..., 1+n*r}, r = k-1,
// depending on which branch each max selected. Besides the symbolic set this
// file measures the field empirically by perturbation and probes how well the
// sizes cover rendered layouts. Stacks here hold funnel layers only, with no
// convolutions in between.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "fnk/activations.hpp"
#include "fnk/data.hpp"
#include "fnk/error.hpp"
#include "fnk/rng.hpp"

namespace fnk {

struct ActivateFieldSet {
  std::size_t n_layers = 0;
  std::size_t k = 1;
  std::size_t r = 0;
  std::vector<std::size_t> sizes;  // sorted, distinct
};

/// {1 + i*r : i = 0..n}. n = 0 gives {1}.
inline ActivateFieldSet activate_field(std::size_t n_layers, std::size_t k) {
  if (k == 0 || k % 2 == 0) throw Error(ErrorKind::Config, "window size must be odd, got " + std::to_string(k));
  ActivateFieldSet s{n_layers, k, k - 1, {}};
  std::set<std::size_t> sizes;
  for (std::size_t i = 0; i <= n_layers; ++i) sizes.insert(1 + i * s.r);
  s.sizes.assign(sizes.begin(), sizes.end());
  return s;
}

inline std::string join_sizes(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Empirical receptive field

struct PixelTarget {
  std::size_t c = 0, i = 0, j = 0;
};

struct ReceptiveMask {
  PixelTarget target;
  std::size_t h = 0, w = 0;
  std::vector<bool> mask;  // h*w, row-major
  std::size_t extent_h = 0, extent_w = 0;  // bounding box of the set pixels

  bool at(std::size_t i, std::size_t j) const { return mask[i * w + j]; }

  void merge(const ReceptiveMask& o) {
    for (std::size_t q = 0; q < mask.size(); ++q) mask[q] = mask[q] || o.mask[q];
    update_extent();
  }

  void update_extent() {
    std::size_t i0 = h, i1 = 0, j0 = w, j1 = 0;
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j)
        if (at(i, j)) {
          i0 = std::min(i0, i);
          i1 = std::max(i1, i);
          j0 = std::min(j0, j);
          j1 = std::max(j1, j);
        }
    extent_h = i0 <= i1 && i0 < h ? i1 - i0 + 1 : 0;
    extent_w = j0 <= j1 && j0 < w ? j1 - j0 + 1 : 0;
  }
};

/// Input pixels (any channel) whose perturbation by delta moves output
/// `t` of f(x) (sample 0) by more than tol.
inline ReceptiveMask influence_mask(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, PixelTarget t,
                                    double delta = 1e-3, double tol = 1e-9) {
  const Shape s = x.shape();
  const Tensor base = f(x);
  const Shape os = base.shape();
  if (t.c >= os.c || t.i >= os.h || t.j >= os.w)
    throw Error(ErrorKind::Index, "target (" + std::to_string(t.c) + "," + std::to_string(t.i) + "," +
                                      std::to_string(t.j) + ") outside output " + os.to_string());
  ReceptiveMask m{t, s.h, s.w, std::vector<bool>(s.h * s.w, false), 0, 0};
  const double ref = base.at(0, t.c, t.i, t.j);
  Tensor probe = x;
  for (std::size_t c = 0; c < s.c; ++c)
    for (std::size_t i = 0; i < s.h; ++i)
      for (std::size_t j = 0; j < s.w; ++j) {
        if (m.at(i, j)) continue;
        const double orig = probe.at(0, c, i, j);
        probe.at(0, c, i, j) = orig + delta;
        const double moved = f(probe).at(0, t.c, t.i, t.j);
        probe.at(0, c, i, j) = orig;
        if (std::abs(moved - ref) > tol) m.mask[i * s.w + j] = true;
      }
  m.update_extent();
  return m;
}

/// A stack of funnel activations applied in eval mode.
struct FunnelStack {
  FunnelConfig cfg;
  std::vector<FunnelParams> layers;

  Tensor operator()(const Tensor& x) const {
    Tensor y = x;
    for (const auto& p : layers) y = frelu_forward(y, cfg, p, Mode::Eval);
    return y;
  }
};

struct ReceptiveFieldOptions {
  std::size_t k = 3;
  std::size_t size = 0;  // image side; 0 picks 1 + 2*n*r + 4
  std::size_t channels = 1;
  std::size_t draws = 8;
  double delta = 1e-3;
  double tol = 1e-9;
  NormKind norm = NormKind::None;
  bool worst_case = false;  // all-positive windows and inputs: the condition wins everywhere
  double weight_scale = 1.0;  // window weights ~ N(0, weight_scale) in random draws
};

inline std::size_t receptive_field_image_size(std::size_t n_layers, const ReceptiveFieldOptions& o) {
  return o.size ? o.size : 1 + 2 * n_layers * (o.k - 1) + 4;
}

/// Draws one stack and one probe input from rng.
inline FunnelStack draw_funnel_stack(std::size_t n_layers, const ReceptiveFieldOptions& o, Rng& rng) {
  FunnelStack st;
  st.cfg.k = o.k;
  st.cfg.norm = o.norm;
  st.cfg.init_std = o.weight_scale;
  st.cfg.validate();
  for (std::size_t l = 0; l < n_layers; ++l) {
    auto p = make_funnel_params(st.cfg, o.channels, rng);
    if (o.worst_case)
      for (auto& b : p.branches)
        for (auto& v : b.conv.weights.data()) v = std::abs(v) + 0.1;
    st.layers.push_back(std::move(p));
  }
  return st;
}

/// Union of influence masks over o.draws random stacks and inputs. The
/// target defaults to the image center.
inline ReceptiveMask empirical_receptive_field(std::size_t n_layers, Rng& rng, const ReceptiveFieldOptions& o = {},
                                               std::optional<PixelTarget> target = std::nullopt) {
  const std::size_t size = receptive_field_image_size(n_layers, o);
  const PixelTarget t = target.value_or(PixelTarget{0, size / 2, size / 2});
  if (o.draws == 0) throw Error(ErrorKind::InvalidArgument, "receptive field needs at least one draw");
  std::optional<ReceptiveMask> out;
  for (std::size_t d = 0; d < o.draws; ++d) {
    const FunnelStack st = draw_funnel_stack(n_layers, o, rng);
    Tensor x = gaussian(Shape{1, o.channels, size, size}, 0.0, 1.0, rng);
    if (o.worst_case)
      for (auto& v : x.data()) v = std::abs(v) + 0.1;
    auto m = influence_mask(st, x, t, o.delta, o.tol);
    if (out) out->merge(m);
    else out = std::move(m);
  }
  return *out;
}

// ---------------------------------------------------------------------------
// Layout probe
//
// Scores how well the per-pixel field sizes available after n layers fit a
// layout. For each pixel on a rendered layout, the required size is the
// shorter of its horizontal and vertical runs through the layout, rounded up
// to odd. The pixel is covered if some available size lies within r of the
// required one. The score is the covered fraction averaged over trials.

enum class LayoutShape { AxisRect, ObliqueLine, Arc };

inline const char* to_string(LayoutShape s) {
  switch (s) {
    case LayoutShape::AxisRect: return "axis_rect";
    case LayoutShape::ObliqueLine: return "oblique_line";
    case LayoutShape::Arc: return "arc";
  }
  return "axis_rect";
}

inline LayoutShape parse_layout_shape(const std::string& s) {
  for (auto v : {LayoutShape::AxisRect, LayoutShape::ObliqueLine, LayoutShape::Arc})
    if (s == to_string(v)) return v;
  throw Error(ErrorKind::Config, "unknown layout shape '" + s + "'");
}

/// Binary layout mask on a size x size canvas.
inline std::vector<bool> render_layout_mask(LayoutShape shape, std::size_t size, Rng& rng) {
  using detail::Vec2;
  const double S = static_cast<double>(size);
  const double pi = std::numbers::pi;
  std::vector<bool> mask(size * size, false);
  std::function<double(Vec2)> dist;
  double thickness = 1.0;
  switch (shape) {
    case LayoutShape::AxisRect: {
      thickness = static_cast<double>(1 + rng.below(3));  // 1..3 pixels
      const double len = rng.uniform(0.4, 0.7) * S;
      const bool vertical = rng.below(2) == 1;
      const double c = std::floor(S / 2);
      const double off = thickness / 2 - 0.5;
      // Pixel centers inside [c - off, c + off] across, [c - len/2, c + len/2] along.
      for (std::size_t i = 0; i < size; ++i)
        for (std::size_t j = 0; j < size; ++j) {
          const double across = static_cast<double>(vertical ? j : i);
          const double along = static_cast<double>(vertical ? i : j);
          mask[i * size + j] = std::abs(across - c) <= off + 1e-9 && std::abs(along - c) <= len / 2;
        }
      return mask;
    }
    case LayoutShape::ObliqueLine: {
      thickness = rng.uniform(2.0, 4.0);
      double angle = rng.uniform(25.0, 65.0) * pi / 180.0;
      if (rng.below(2) == 1) angle = pi - angle;
      const double len = 0.6 * S;
      const Vec2 c{S / 2, S / 2};
      const Vec2 a{c.x - len / 2 * std::cos(angle), c.y - len / 2 * std::sin(angle)};
      const Vec2 b{c.x + len / 2 * std::cos(angle), c.y + len / 2 * std::sin(angle)};
      dist = [a, b](Vec2 p) { return detail::segment_distance(p, a, b); };
      break;
    }
    case LayoutShape::Arc: {
      thickness = rng.uniform(2.0, 4.0);
      const double r = rng.uniform(0.2, 0.35) * S;
      const double start = rng.uniform(0.0, 2 * pi);
      const double span = rng.uniform(0.5 * pi, pi);
      const Vec2 c{S / 2, S / 2};
      dist = [=](Vec2 p) { return detail::arc_distance(p, c, r, start, span); };
      break;
    }
  }
  for (std::size_t i = 0; i < size; ++i)
    for (std::size_t j = 0; j < size; ++j)
      mask[i * size + j] = dist(Vec2{static_cast<double>(j), static_cast<double>(i)}) <= thickness / 2;
  return mask;
}

/// Required field size at each set pixel of a layout mask (0 elsewhere).
inline std::vector<std::size_t> required_sizes(const std::vector<bool>& mask, std::size_t size) {
  std::vector<std::size_t> row_run(size * size, 0), col_run(size * size, 0), out(size * size, 0);
  for (std::size_t i = 0; i < size; ++i)
    for (std::size_t j = 0; j < size;) {
      if (!mask[i * size + j]) {
        ++j;
        continue;
      }
      std::size_t e = j;
      while (e < size && mask[i * size + e]) ++e;
      for (std::size_t q = j; q < e; ++q) row_run[i * size + q] = e - j;
      j = e;
    }
  for (std::size_t j = 0; j < size; ++j)
    for (std::size_t i = 0; i < size;) {
      if (!mask[i * size + j]) {
        ++i;
        continue;
      }
      std::size_t e = i;
      while (e < size && mask[e * size + j]) ++e;
      for (std::size_t q = i; q < e; ++q) col_run[q * size + j] = e - i;
      i = e;
    }
  for (std::size_t q = 0; q < size * size; ++q)
    if (mask[q]) {
      const std::size_t need = std::min(row_run[q], col_run[q]);
      out[q] = need % 2 == 0 ? need + 1 : need;
    }
  return out;
}

struct LayoutProbeResult {
  double coverage = 0.0;
  std::vector<double> per_trial;
};

inline LayoutProbeResult layout_probe(LayoutShape shape, std::size_t n_layers, std::size_t k, std::size_t trials,
                                      Rng& rng, std::size_t canvas = 48) {
  if (trials == 0) throw Error(ErrorKind::InvalidArgument, "layout probe needs at least one trial");
  const auto field = activate_field(n_layers, k);
  LayoutProbeResult res;
  for (std::size_t t = 0; t < trials; ++t) {
    const auto mask = render_layout_mask(shape, canvas, rng);
    const auto need = required_sizes(mask, canvas);
    std::size_t total = 0, covered = 0;
    for (std::size_t q = 0; q < mask.size(); ++q) {
      if (!mask[q]) continue;
      ++total;
      const bool ok = std::any_of(field.sizes.begin(), field.sizes.end(), [&](std::size_t s) {
        const std::size_t diff = s > need[q] ? s - need[q] : need[q] - s;
        return diff <= field.r;
      });
      covered += ok;
    }
    res.per_trial.push_back(total ? static_cast<double>(covered) / static_cast<double>(total) : 1.0);
  }
  for (double v : res.per_trial) res.coverage += v;
  res.coverage /= static_cast<double>(trials);
  return res;
}

}  // namespace fnk
