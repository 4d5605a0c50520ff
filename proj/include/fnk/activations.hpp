#pragma once

// ReLU, PReLU, Swish and the funnel activation with its ablation variants.
//
// The funnel activation computes f(x) = max(x, T(x)) per element, where the
// condition T(x) is a per-channel spatial window response: a depthwise
// convolution followed by a normalization layer. Variants swap the fusion
// (max vs. relu(sum)), the condition (learned window vs. max/avg pooling),
// the window geometry (k x k vs. a 1x3 and 3x1 pair) and the normalization.

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "fnk/error.hpp"
#include "fnk/nn_ops.hpp"
#include "fnk/tensor.hpp"

namespace fnk {

// ---------------------------------------------------------------------------
// Scalar activations

inline Tensor relu_forward(const Tensor& x) {
  return map(x, [](double v) { return v > 0.0 ? v : 0.0; });
}

/// Gradient passes where x > 0 and is zero elsewhere (including x == 0).
inline Tensor relu_backward(const Tensor& x, const Tensor& grad_out) {
  return zip_with(x, grad_out, "relu backward", [](double v, double g) { return v > 0.0 ? g : 0.0; });
}

namespace detail {
inline void check_channel_vector(const Tensor& x, const Tensor& per_channel, const char* op) {
  if (per_channel.shape() != Shape{1, x.shape().c, 1, 1})
    throw Error(ErrorKind::ShapeMismatch, std::string(op) + ": expected per-channel (1," +
                                              std::to_string(x.shape().c) + ",1,1) parameter, got " +
                                              per_channel.shape().to_string());
}
}  // namespace detail

/// max(x, p_c * x) with a per-channel slope p, shape (1, c, 1, 1).
inline Tensor prelu_forward(const Tensor& x, const Tensor& slope) {
  detail::check_channel_vector(x, slope, "prelu");
  const Shape s = x.shape();
  Tensor out(s);
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c) {
      const double p = slope[c];
      const auto src = x.plane(n, c);
      auto dst = out.plane(n, c);
      for (std::size_t i = 0; i < src.size(); ++i) {
        const double px = p * src[i];
        dst[i] = src[i] >= px ? src[i] : px;
      }
    }
  return out;
}

struct PreluGrads {
  Tensor grad_x;
  Tensor grad_slope;
};

inline PreluGrads prelu_backward(const Tensor& x, const Tensor& slope, const Tensor& grad_out) {
  detail::check_channel_vector(x, slope, "prelu backward");
  require_same_shape(x, grad_out, "prelu backward");
  const Shape s = x.shape();
  PreluGrads g{Tensor(s), Tensor(slope.shape())};
  // Slope gradients are summed per sample, then over samples, the same order
  // the depthwise window gradient uses, so a 1x1 funnel without norm tracks
  // PReLU bitwise.
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c) {
      const double p = slope[c];
      const auto src = x.plane(n, c);
      const auto go = grad_out.plane(n, c);
      auto gx = g.grad_x.plane(n, c);
      double part = 0.0;
      for (std::size_t i = 0; i < src.size(); ++i) {
        if (src[i] >= p * src[i]) {
          gx[i] = go[i];
        } else {
          gx[i] = p * go[i];
          part += src[i] * go[i];
        }
      }
      g.grad_slope[c] += part;
    }
  return g;
}

inline double sigmoid(double v) {
  if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

/// x * sigmoid(x); tends to x as x -> +inf and to 0 as x -> -inf.
inline Tensor swish_forward(const Tensor& x) {
  return map(x, [](double v) { return v * sigmoid(v); });
}

inline Tensor swish_backward(const Tensor& x, const Tensor& grad_out) {
  return zip_with(x, grad_out, "swish backward", [](double v, double g) {
    const double s = sigmoid(v);
    return g * s * (1.0 + v * (1.0 - s));
  });
}

// ---------------------------------------------------------------------------
// Funnel condition configuration

enum class WindowKind { Square, Pair1x3_3x1 };
enum class Fusion { Max, Sum };
enum class PairCombine { Sum, Max };
enum class ConditionKind { Parametric, MaxPool, AvgPool };

inline const char* to_string(Fusion f) { return f == Fusion::Max ? "max" : "sum"; }
inline const char* to_string(PairCombine c) { return c == PairCombine::Max ? "max" : "sum"; }
inline const char* to_string(ConditionKind c) {
  switch (c) {
    case ConditionKind::Parametric: return "param";
    case ConditionKind::MaxPool: return "maxpool";
    case ConditionKind::AvgPool: return "avgpool";
  }
  return "param";
}

struct FunnelConfig {
  WindowKind window = WindowKind::Square;
  std::size_t k = 3;  // Square only
  Fusion fusion = Fusion::Max;
  PairCombine pair_combine = PairCombine::Max;  // Pair1x3_3x1 only
  ConditionKind condition = ConditionKind::Parametric;
  NormKind norm = NormKind::BatchNorm;  // Parametric only
  std::size_t norm_groups = 1;
  bool norm_affine = true;
  bool shared_pair_norm = false;  // one norm after combining the pair instead of one per branch
  double init_std = 0.1;
  double init_mean = 0.0;

  bool operator==(const FunnelConfig&) const = default;

  void validate() const {
    if (window == WindowKind::Square && (k == 0 || k % 2 == 0))
      throw Error(ErrorKind::Config, "funnel window must be odd, got " + std::to_string(k));
    if (condition != ConditionKind::Parametric && window != WindowKind::Square)
      throw Error(ErrorKind::Config, "pooling conditions require a square window");
    if (!(init_std >= 0.0)) throw Error(ErrorKind::Config, "init_std must be >= 0");
  }

  /// Window extents of the parametric branches, in order.
  std::vector<std::pair<std::size_t, std::size_t>> branch_windows() const {
    if (window == WindowKind::Pair1x3_3x1) return {{1, 3}, {3, 1}};
    return {{k, k}};
  }

  bool has_parameters() const { return condition == ConditionKind::Parametric; }

  /// Norm applied after each branch's window (None when the pair shares one).
  NormKind branch_norm() const {
    if (condition != ConditionKind::Parametric) return NormKind::None;
    if (window == WindowKind::Pair1x3_3x1 && shared_pair_norm) return NormKind::None;
    return norm;
  }
};

struct FunnelBranch {
  DepthwiseConvParams conv;
  NormParams norm;
};

struct FunnelParams {
  std::vector<FunnelBranch> branches;  // empty for pooling conditions
  std::optional<NormParams> shared_norm;
};

/// Window weights ~ N(init_mean, init_std^2), norms at identity (gamma 1,
/// beta 0). With init_std = 0 the weights are constant and rng is not used.
inline FunnelParams make_funnel_params(const FunnelConfig& cfg, std::size_t channels, Rng& rng) {
  cfg.validate();
  FunnelParams p;
  if (!cfg.has_parameters()) return p;
  for (auto [kh, kw] : cfg.branch_windows()) {
    FunnelBranch b{make_depthwise(channels, kh, kw), make_norm(cfg.branch_norm(), channels, cfg.norm_groups,
                                                              cfg.norm_affine)};
    b.conv.weights = cfg.init_std == 0.0 ? full(b.conv.weights.shape(), cfg.init_mean)
                                         : gaussian(b.conv.weights.shape(), cfg.init_mean, cfg.init_std, rng);
    p.branches.push_back(std::move(b));
  }
  if (cfg.window == WindowKind::Pair1x3_3x1 && cfg.shared_pair_norm)
    p.shared_norm = make_norm(cfg.norm, channels, cfg.norm_groups, cfg.norm_affine);
  return p;
}

namespace detail {
inline void check_funnel(const Tensor& x, const FunnelConfig& cfg, const FunnelParams& p) {
  cfg.validate();
  const std::size_t expected = cfg.has_parameters() ? cfg.branch_windows().size() : 0;
  if (p.branches.size() != expected)
    throw Error(ErrorKind::Config, "funnel parameters have " + std::to_string(p.branches.size()) +
                                       " branches, config expects " + std::to_string(expected));
  const auto windows = cfg.branch_windows();
  for (std::size_t b = 0; b < p.branches.size(); ++b) {
    const auto& conv = p.branches[b].conv;
    if (conv.kh != windows[b].first || conv.kw != windows[b].second)
      throw Error(ErrorKind::Config, "funnel branch window does not match config");
    if (conv.channels() != x.shape().c)
      throw Error(ErrorKind::Config, "funnel parameters have " + std::to_string(conv.channels()) +
                                         " channels, input has " + std::to_string(x.shape().c));
  }
  const bool wants_shared = cfg.window == WindowKind::Pair1x3_3x1 && cfg.shared_pair_norm && cfg.has_parameters();
  if (wants_shared != p.shared_norm.has_value())
    throw Error(ErrorKind::Config, "funnel shared-norm parameters do not match config");
}
}  // namespace detail

/// Intermediates of one condition evaluation, enough for the backward pass.
struct ConditionCache {
  std::vector<Tensor> conv_out;  // per branch, pre-norm
  std::vector<Tensor> branch_out;  // per branch, post-norm
  std::optional<Tensor> combined;  // pair: combined branches before the shared norm
  Tensor condition;  // T(x)
};

struct ConditionForward {
  Tensor condition;
  ConditionCache cache;
  std::vector<std::optional<RunningStats>> branch_running;
  std::optional<RunningStats> shared_running;
};

inline ConditionForward funnel_condition_forward(const Tensor& x, const FunnelConfig& cfg, const FunnelParams& p,
                                                 Mode mode) {
  detail::check_funnel(x, cfg, p);
  ConditionForward f;
  if (cfg.condition == ConditionKind::MaxPool) {
    f.condition = window_maxpool(x, cfg.k, cfg.k);
  } else if (cfg.condition == ConditionKind::AvgPool) {
    f.condition = window_avgpool(x, cfg.k, cfg.k);
  } else {
    for (const auto& b : p.branches) {
      Tensor conv = depthwise_conv_forward(x, b.conv);
      auto nf = norm_forward(conv, b.norm, mode);
      f.cache.conv_out.push_back(std::move(conv));
      f.cache.branch_out.push_back(std::move(nf.y));
      f.branch_running.push_back(std::move(nf.running));
    }
    if (p.branches.size() == 1) {
      f.condition = f.cache.branch_out[0];
    } else {
      const Tensor& a = f.cache.branch_out[0];
      const Tensor& b = f.cache.branch_out[1];
      Tensor combined = cfg.pair_combine == PairCombine::Max ? elementwise_max(a, b) : add(a, b);
      if (p.shared_norm) {
        auto nf = norm_forward(combined, *p.shared_norm, mode);
        f.condition = std::move(nf.y);
        f.shared_running = std::move(nf.running);
      } else {
        f.condition = combined;
      }
      f.cache.combined = std::move(combined);
    }
  }
  f.cache.condition = f.condition;
  return f;
}

/// T(x) alone; the running statistics a train-mode pass would produce are dropped.
inline Tensor funnel_condition(const Tensor& x, const FunnelConfig& cfg, const FunnelParams& p,
                               Mode mode = Mode::Train) {
  return funnel_condition_forward(x, cfg, p, mode).condition;
}

struct BranchGrads {
  Tensor grad_weights;
  Tensor grad_gamma;
  Tensor grad_beta;
};

struct FunnelGrads {
  Tensor grad_x;
  std::vector<BranchGrads> branches;
  std::optional<BranchGrads> shared_norm;  // grad_weights unused
};

/// Pulls grad_condition back through the condition into (grad_x, parameter grads).
inline FunnelGrads funnel_condition_backward(const Tensor& x, const FunnelConfig& cfg, const FunnelParams& p,
                                             const ConditionCache& cache, const Tensor& grad_condition, Mode mode) {
  detail::check_funnel(x, cfg, p);
  require_same_shape(x, grad_condition, "funnel condition backward");
  FunnelGrads g;
  if (cfg.condition == ConditionKind::MaxPool) {
    g.grad_x = window_maxpool_backward(x, cfg.k, cfg.k, grad_condition);
    return g;
  }
  if (cfg.condition == ConditionKind::AvgPool) {
    g.grad_x = window_avgpool_backward(x.shape(), cfg.k, cfg.k, grad_condition);
    return g;
  }
  if (cache.conv_out.size() != p.branches.size())
    throw Error(ErrorKind::State, "funnel condition cache does not match parameters");

  std::vector<Tensor> grad_branch;
  if (p.branches.size() == 1) {
    grad_branch.push_back(grad_condition);
  } else {
    Tensor grad_combined = grad_condition;
    if (p.shared_norm) {
      auto ng = norm_backward(*cache.combined, *p.shared_norm, grad_condition, mode);
      grad_combined = std::move(ng.grad_x);
      g.shared_norm = BranchGrads{Tensor(), std::move(ng.grad_gamma), std::move(ng.grad_beta)};
    }
    if (cfg.pair_combine == PairCombine::Sum) {
      grad_branch = {grad_combined, grad_combined};
    } else {
      // Ties go to the first (1x3) branch, matching elementwise_max.
      const Tensor& a = cache.branch_out[0];
      const Tensor& b = cache.branch_out[1];
      Tensor ga(x.shape()), gb(x.shape());
      for (std::size_t i = 0; i < x.size(); ++i) (a[i] >= b[i] ? ga[i] : gb[i]) = grad_combined[i];
      grad_branch = {std::move(ga), std::move(gb)};
    }
  }

  g.grad_x = Tensor(x.shape());
  for (std::size_t b = 0; b < p.branches.size(); ++b) {
    const auto& br = p.branches[b];
    auto ng = norm_backward(cache.conv_out[b], br.norm, grad_branch[b], mode);
    auto cg = depthwise_conv_backward(x, br.conv, ng.grad_x);
    axpy_inplace(g.grad_x, 1.0, cg.grad_x);
    g.branches.push_back(BranchGrads{std::move(cg.grad_weights), std::move(ng.grad_gamma), std::move(ng.grad_beta)});
  }
  return g;
}

// ---------------------------------------------------------------------------
// Funnel activation

struct FunnelForward {
  Tensor out;
  ConditionForward condition;
};

/// Max fusion: max(x, T(x)). Sum fusion: relu(x + T(x)).
inline FunnelForward frelu_forward_cached(const Tensor& x, const FunnelConfig& cfg, const FunnelParams& p,
                                          Mode mode) {
  FunnelForward f{Tensor(), funnel_condition_forward(x, cfg, p, mode)};
  const Tensor& t = f.condition.condition;
  if (cfg.fusion == Fusion::Max) {
    f.out = elementwise_max(x, t);
  } else {
    f.out = zip_with(x, t, "frelu sum", [](double a, double b) {
      const double s = a + b;
      return s > 0.0 ? s : 0.0;
    });
  }
  return f;
}

inline Tensor frelu_forward(const Tensor& x, const FunnelConfig& cfg, const FunnelParams& p, Mode mode = Mode::Train) {
  return frelu_forward_cached(x, cfg, p, mode).out;
}

/// Max fusion sends each element's gradient to the branch it selected; on a
/// tie (x == T(x)) the identity branch takes it.
inline FunnelGrads frelu_backward(const Tensor& x, const FunnelConfig& cfg, const FunnelParams& p,
                                  const FunnelForward& fwd, const Tensor& grad_out, Mode mode) {
  require_same_shape(x, grad_out, "frelu backward");
  const Tensor& t = fwd.condition.condition;
  if (t.shape() != x.shape()) throw Error(ErrorKind::State, "frelu backward: forward cache missing or stale");
  Tensor grad_direct(x.shape()), grad_t(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (cfg.fusion == Fusion::Max) {
      (x[i] >= t[i] ? grad_direct[i] : grad_t[i]) = grad_out[i];
    } else if (x[i] + t[i] > 0.0) {
      grad_direct[i] = grad_out[i];
      grad_t[i] = grad_out[i];
    }
  }
  FunnelGrads g = funnel_condition_backward(x, cfg, p, fwd.condition.cache, grad_t, mode);
  axpy_inplace(g.grad_x, 1.0, grad_direct);
  return g;
}

/// Ablation E: relu(T(x)), the spatial condition followed by a plain ReLU.
inline FunnelForward dw_then_relu_forward_cached(const Tensor& x, const FunnelConfig& cfg, const FunnelParams& p,
                                                 Mode mode) {
  FunnelForward f{Tensor(), funnel_condition_forward(x, cfg, p, mode)};
  f.out = relu_forward(f.condition.condition);
  return f;
}

inline Tensor dw_then_relu_forward(const Tensor& x, const FunnelConfig& cfg, const FunnelParams& p,
                                   Mode mode = Mode::Train) {
  return dw_then_relu_forward_cached(x, cfg, p, mode).out;
}

inline FunnelGrads dw_then_relu_backward(const Tensor& x, const FunnelConfig& cfg, const FunnelParams& p,
                                         const FunnelForward& fwd, const Tensor& grad_out, Mode mode) {
  require_same_shape(x, grad_out, "dw-then-relu backward");
  const Tensor grad_t = relu_backward(fwd.condition.condition, grad_out);
  return funnel_condition_backward(x, cfg, p, fwd.condition.cache, grad_t, mode);
}

// ---------------------------------------------------------------------------
// Kink margins: signed quantities whose sign flips exactly where the
// activation switches branch. Gradient checks use them to skip coordinates
// whose finite-difference stencil would straddle a kink.

inline std::vector<double> relu_kink_margins(const Tensor& x) { return x.values(); }

inline std::vector<double> funnel_kink_margins(const Tensor& x, const FunnelConfig& cfg, const FunnelParams& p,
                                               Mode mode, bool dw_then_relu = false) {
  const auto f = funnel_condition_forward(x, cfg, p, mode);
  const Tensor& t = f.condition;
  std::vector<double> m;
  m.reserve(2 * x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (dw_then_relu) m.push_back(t[i]);
    else if (cfg.fusion == Fusion::Max) m.push_back(x[i] - t[i]);
    else m.push_back(x[i] + t[i]);
  }
  if (cfg.has_parameters() && cfg.window == WindowKind::Pair1x3_3x1 && cfg.pair_combine == PairCombine::Max)
    for (std::size_t i = 0; i < x.size(); ++i) m.push_back(f.cache.branch_out[0][i] - f.cache.branch_out[1][i]);
  return m;
}

// ---------------------------------------------------------------------------
// Stateful layer wrapper used by networks and the training harness.

enum class ActivationKind { ReLU, PReLU, Swish, FReLU, DWThenReLU };

inline const char* to_string(ActivationKind k) {
  switch (k) {
    case ActivationKind::ReLU: return "relu";
    case ActivationKind::PReLU: return "prelu";
    case ActivationKind::Swish: return "swish";
    case ActivationKind::FReLU: return "frelu";
    case ActivationKind::DWThenReLU: return "dwrelu";
  }
  return "relu";
}

/// Named view of a learnable tensor and its gradient accumulator.
struct ParamRef {
  std::string name;
  Tensor* value = nullptr;
  Tensor* grad = nullptr;
  bool decay = true;
};

/// Named view of a non-learned state tensor (e.g. running statistics).
struct BufferRef {
  std::string name;
  Tensor* value = nullptr;
};

class ActivationLayer {
 public:
  static constexpr double kPreluInit = 0.25;

  static ActivationLayer relu() { return ActivationLayer(ActivationKind::ReLU); }
  static ActivationLayer swish() { return ActivationLayer(ActivationKind::Swish); }

  static ActivationLayer prelu(std::size_t channels, double init = kPreluInit) {
    ActivationLayer a(ActivationKind::PReLU);
    a.slope_ = Tensor(Shape{1, channels, 1, 1}, init);
    a.slope_grad_ = Tensor(Shape{1, channels, 1, 1});
    return a;
  }

  static ActivationLayer frelu(const FunnelConfig& cfg, std::size_t channels, Rng& rng) {
    return funnel_like(ActivationKind::FReLU, cfg, channels, rng);
  }

  static ActivationLayer dw_then_relu(const FunnelConfig& cfg, std::size_t channels, Rng& rng) {
    if (!cfg.has_parameters()) throw Error(ErrorKind::Config, "dw-then-relu needs a parametric condition");
    return funnel_like(ActivationKind::DWThenReLU, cfg, channels, rng);
  }

  ActivationKind kind() const { return kind_; }
  const FunnelConfig& config() const { return cfg_; }
  const Tensor& slope() const { return slope_; }
  Tensor& slope() { return slope_; }
  const FunnelParams& funnel() const { return funnel_; }
  FunnelParams& funnel() { return funnel_; }

  /// Caches what backward needs; train mode commits updated running statistics.
  Tensor forward(const Tensor& x, Mode mode) {
    input_ = x;
    mode_ = mode;
    switch (kind_) {
      case ActivationKind::ReLU: return relu_forward(x);
      case ActivationKind::Swish: return swish_forward(x);
      case ActivationKind::PReLU: return prelu_forward(x, slope_);
      case ActivationKind::FReLU:
      case ActivationKind::DWThenReLU: {
        fwd_ = kind_ == ActivationKind::FReLU ? frelu_forward_cached(x, cfg_, funnel_, mode)
                                              : dw_then_relu_forward_cached(x, cfg_, funnel_, mode);
        commit_running(fwd_->condition);
        return fwd_->out;
      }
    }
    return x;
  }

  /// Accumulates parameter gradients and returns grad wrt the last forward input.
  Tensor backward(const Tensor& grad_out) {
    if (!input_) throw Error(ErrorKind::State, "activation backward called before forward");
    const Tensor& x = *input_;
    switch (kind_) {
      case ActivationKind::ReLU: return relu_backward(x, grad_out);
      case ActivationKind::Swish: return swish_backward(x, grad_out);
      case ActivationKind::PReLU: {
        auto g = prelu_backward(x, slope_, grad_out);
        axpy_inplace(slope_grad_, 1.0, g.grad_slope);
        return std::move(g.grad_x);
      }
      case ActivationKind::FReLU:
      case ActivationKind::DWThenReLU: {
        if (!fwd_) throw Error(ErrorKind::State, "funnel backward called before forward");
        auto g = kind_ == ActivationKind::FReLU ? frelu_backward(x, cfg_, funnel_, *fwd_, grad_out, mode_)
                                                : dw_then_relu_backward(x, cfg_, funnel_, *fwd_, grad_out, mode_);
        for (std::size_t b = 0; b < g.branches.size(); ++b) {
          axpy_inplace(grads_[b].grad_weights, 1.0, g.branches[b].grad_weights);
          if (has_affine(funnel_.branches[b].norm)) {
            axpy_inplace(grads_[b].grad_gamma, 1.0, g.branches[b].grad_gamma);
            axpy_inplace(grads_[b].grad_beta, 1.0, g.branches[b].grad_beta);
          }
        }
        if (g.shared_norm && has_affine(*funnel_.shared_norm)) {
          axpy_inplace(shared_grad_->grad_gamma, 1.0, g.shared_norm->grad_gamma);
          axpy_inplace(shared_grad_->grad_beta, 1.0, g.shared_norm->grad_beta);
        }
        return std::move(g.grad_x);
      }
    }
    return grad_out;
  }

  void clear_cache() {
    input_.reset();
    fwd_.reset();
  }

  std::vector<ParamRef> parameters(const std::string& prefix, bool decay) {
    std::vector<ParamRef> out;
    if (kind_ == ActivationKind::PReLU) out.push_back({prefix + ".slope", &slope_, &slope_grad_, decay});
    for (std::size_t b = 0; b < funnel_.branches.size(); ++b) {
      const std::string bp = prefix + ".branch" + std::to_string(b);
      auto& br = funnel_.branches[b];
      out.push_back({bp + ".window", &br.conv.weights, &grads_[b].grad_weights, decay});
      if (has_affine(br.norm)) {
        out.push_back({bp + ".norm.gamma", &br.norm.gamma, &grads_[b].grad_gamma, decay});
        out.push_back({bp + ".norm.beta", &br.norm.beta, &grads_[b].grad_beta, decay});
      }
    }
    if (funnel_.shared_norm && has_affine(*funnel_.shared_norm)) {
      out.push_back({prefix + ".shared_norm.gamma", &funnel_.shared_norm->gamma, &shared_grad_->grad_gamma, decay});
      out.push_back({prefix + ".shared_norm.beta", &funnel_.shared_norm->beta, &shared_grad_->grad_beta, decay});
    }
    return out;
  }

  std::vector<BufferRef> buffers(const std::string& prefix) {
    std::vector<BufferRef> out;
    auto add_norm = [&](const std::string& p, NormParams& n) {
      if (n.kind != NormKind::BatchNorm) return;
      out.push_back({p + ".running_mean", &n.running_mean});
      out.push_back({p + ".running_var", &n.running_var});
    };
    for (std::size_t b = 0; b < funnel_.branches.size(); ++b)
      add_norm(prefix + ".branch" + std::to_string(b) + ".norm", funnel_.branches[b].norm);
    if (funnel_.shared_norm) add_norm(prefix + ".shared_norm", *funnel_.shared_norm);
    return out;
  }

  /// Learnable element count, normalization affine included.
  std::size_t num_params() {
    std::size_t n = 0;
    for (const auto& p : parameters("", false)) n += p.value->size();
    return n;
  }

 private:
  explicit ActivationLayer(ActivationKind kind) : kind_(kind) {}

  static bool has_affine(const NormParams& n) { return n.kind != NormKind::None && n.affine; }

  static ActivationLayer funnel_like(ActivationKind kind, const FunnelConfig& cfg, std::size_t channels, Rng& rng) {
    ActivationLayer a(kind);
    a.cfg_ = cfg;
    a.funnel_ = make_funnel_params(cfg, channels, rng);
    const Shape cs{1, channels, 1, 1};
    for (const auto& b : a.funnel_.branches)
      a.grads_.push_back(BranchGrads{Tensor(b.conv.weights.shape()), Tensor(cs), Tensor(cs)});
    if (a.funnel_.shared_norm) a.shared_grad_ = BranchGrads{Tensor(), Tensor(cs), Tensor(cs)};
    return a;
  }

  void commit_running(ConditionForward& f) {
    for (std::size_t b = 0; b < f.branch_running.size(); ++b)
      if (f.branch_running[b]) {
        funnel_.branches[b].norm.running_mean = f.branch_running[b]->mean;
        funnel_.branches[b].norm.running_var = f.branch_running[b]->var;
      }
    if (f.shared_running) {
      funnel_.shared_norm->running_mean = f.shared_running->mean;
      funnel_.shared_norm->running_var = f.shared_running->var;
    }
  }

  ActivationKind kind_;
  FunnelConfig cfg_{};
  Tensor slope_;
  Tensor slope_grad_;
  FunnelParams funnel_;
  std::vector<BranchGrads> grads_;
  std::optional<BranchGrads> shared_grad_;

  std::optional<Tensor> input_;
  std::optional<FunnelForward> fwd_;
  Mode mode_ = Mode::Train;
};

}  // namespace fnk
