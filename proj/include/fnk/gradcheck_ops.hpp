#pragma once

// Ready-made gradient-check cases for every differentiable operator, shared
// by the CLI `gradcheck` subcommand and the test suites.

#include <string>
#include <vector>

#include "fnk/activations.hpp"
#include "fnk/gradcheck.hpp"
#include "fnk/nn_ops.hpp"

namespace fnk {

struct GradCheckCase {
  std::string op;
  GradCheckProblem problem;
  Tensor input;
  std::vector<Tensor> params;
};

struct GradCheckCaseOptions {
  std::size_t window = 3;
  NormKind norm = NormKind::BatchNorm;
  std::size_t groups = 2;
  Shape shape{2, 2, 5, 5};
  std::uint64_t seed = 1;
};

inline const std::vector<std::string>& gradcheck_op_names() {
  static const std::vector<std::string> names = {
      "relu", "prelu", "swish", "dwconv", "conv", "norm", "linear", "frelu", "frelu-sum", "dwrelu",
      "pair-sum", "pair-max", "maxpool-cond", "avgpool-cond"};
  return names;
}

namespace detail {

// Funnel parameters flattened as [window, gamma, beta] per branch, then the
// shared norm's [gamma, beta]; affine tensors are present only when the norm
// is not None.
inline std::vector<Tensor> flatten_funnel(const FunnelParams& p) {
  std::vector<Tensor> out;
  for (const auto& b : p.branches) {
    out.push_back(b.conv.weights);
    if (b.norm.kind != NormKind::None) {
      out.push_back(b.norm.gamma);
      out.push_back(b.norm.beta);
    }
  }
  if (p.shared_norm) {
    out.push_back(p.shared_norm->gamma);
    out.push_back(p.shared_norm->beta);
  }
  return out;
}

inline FunnelParams unflatten_funnel(FunnelParams p, const std::vector<Tensor>& flat) {
  std::size_t i = 0;
  for (auto& b : p.branches) {
    b.conv.weights = flat.at(i++);
    if (b.norm.kind != NormKind::None) {
      b.norm.gamma = flat.at(i++);
      b.norm.beta = flat.at(i++);
    }
  }
  if (p.shared_norm) {
    p.shared_norm->gamma = flat.at(i++);
    p.shared_norm->beta = flat.at(i++);
  }
  return p;
}

inline std::vector<Tensor> flatten_funnel_grads(const FunnelParams& p, FunnelGrads g) {
  std::vector<Tensor> out{std::move(g.grad_x)};
  for (std::size_t b = 0; b < p.branches.size(); ++b) {
    out.push_back(std::move(g.branches[b].grad_weights));
    if (p.branches[b].norm.kind != NormKind::None) {
      out.push_back(std::move(g.branches[b].grad_gamma));
      out.push_back(std::move(g.branches[b].grad_beta));
    }
  }
  if (p.shared_norm) {
    out.push_back(std::move(g.shared_norm->grad_gamma));
    out.push_back(std::move(g.shared_norm->grad_beta));
  }
  return out;
}

inline GradCheckCase funnel_case(const std::string& op, const FunnelConfig& cfg, bool dw_then_relu,
                                 const GradCheckCaseOptions& o, Rng& rng) {
  const Mode mode = Mode::Train;
  FunnelParams base = make_funnel_params(cfg, o.shape.c, rng);
  // Non-trivial affine parameters so their gradients are exercised.
  auto jitter = [&](NormParams& n) {
    if (n.kind == NormKind::None) return;
    n.gamma = uniform(n.gamma.shape(), 0.5, 1.5, rng);
    n.beta = uniform(n.beta.shape(), -0.5, 0.5, rng);
  };
  for (auto& b : base.branches) jitter(b.norm);
  if (base.shared_norm) jitter(*base.shared_norm);

  GradCheckCase c;
  c.op = op;
  c.input = uniform(o.shape, -1.0, 1.0, rng);
  c.params = flatten_funnel(base);
  c.problem.forward = [=](const Tensor& x, const std::vector<Tensor>& ps) {
    const auto p = unflatten_funnel(base, ps);
    return dw_then_relu ? dw_then_relu_forward(x, cfg, p, mode) : frelu_forward(x, cfg, p, mode);
  };
  c.problem.backward = [=](const Tensor& x, const std::vector<Tensor>& ps, const Tensor& g) {
    const auto p = unflatten_funnel(base, ps);
    if (dw_then_relu) {
      const auto fwd = dw_then_relu_forward_cached(x, cfg, p, mode);
      return flatten_funnel_grads(p, dw_then_relu_backward(x, cfg, p, fwd, g, mode));
    }
    const auto fwd = frelu_forward_cached(x, cfg, p, mode);
    return flatten_funnel_grads(p, frelu_backward(x, cfg, p, fwd, g, mode));
  };
  c.problem.kinks = [=](const Tensor& x, const std::vector<Tensor>& ps) {
    return funnel_kink_margins(x, cfg, unflatten_funnel(base, ps), mode, dw_then_relu);
  };
  return c;
}

}  // namespace detail

/// Builds a randomized check case; throws Config for an unknown op name.
inline GradCheckCase make_gradcheck_case(const std::string& op, const GradCheckCaseOptions& o = {}) {
  Rng rng(o.seed);
  const Shape s = o.shape;
  GradCheckCase c;
  c.op = op;

  if (op == "relu" || op == "swish") {
    c.input = uniform(s, -2.0, 2.0, rng);
    const bool is_relu = op == "relu";
    c.problem.forward = [is_relu](const Tensor& x, const std::vector<Tensor>&) {
      return is_relu ? relu_forward(x) : swish_forward(x);
    };
    c.problem.backward = [is_relu](const Tensor& x, const std::vector<Tensor>&, const Tensor& g) {
      return std::vector<Tensor>{is_relu ? relu_backward(x, g) : swish_backward(x, g)};
    };
    if (is_relu) c.problem.kinks = [](const Tensor& x, const std::vector<Tensor>&) { return relu_kink_margins(x); };
    return c;
  }
  if (op == "prelu") {
    c.input = uniform(s, -2.0, 2.0, rng);
    c.params = {uniform(Shape{1, s.c, 1, 1}, 0.05, 0.5, rng)};
    c.problem.forward = [](const Tensor& x, const std::vector<Tensor>& ps) { return prelu_forward(x, ps[0]); };
    c.problem.backward = [](const Tensor& x, const std::vector<Tensor>& ps, const Tensor& g) {
      auto r = prelu_backward(x, ps[0], g);
      return std::vector<Tensor>{std::move(r.grad_x), std::move(r.grad_slope)};
    };
    c.problem.kinks = [](const Tensor& x, const std::vector<Tensor>&) { return relu_kink_margins(x); };
    return c;
  }
  if (op == "dwconv") {
    const std::size_t k = o.window;
    c.input = uniform(s, -1.0, 1.0, rng);
    c.params = {gaussian(Shape{1, s.c, k, k}, 0.0, 0.5, rng)};
    c.problem.forward = [k](const Tensor& x, const std::vector<Tensor>& ps) {
      auto p = make_depthwise(x.shape().c, k, k);
      p.weights = ps[0];
      return depthwise_conv_forward(x, p);
    };
    c.problem.backward = [k](const Tensor& x, const std::vector<Tensor>& ps, const Tensor& g) {
      auto p = make_depthwise(x.shape().c, k, k);
      p.weights = ps[0];
      auto r = depthwise_conv_backward(x, p, g);
      return std::vector<Tensor>{std::move(r.grad_x), std::move(r.grad_weights)};
    };
    return c;
  }
  if (op == "conv") {
    const std::size_t k = o.window;
    const std::size_t c_out = s.c + 1;
    c.input = uniform(s, -1.0, 1.0, rng);
    c.params = {gaussian(Shape{c_out, s.c, k, k}, 0.0, 0.5, rng), uniform(Shape{1, c_out, 1, 1}, -0.5, 0.5, rng)};
    auto make = [k](const std::vector<Tensor>& ps) {
      return ConvParams{ps[0], ps[1], k / 2, 1};
    };
    c.problem.forward = [make](const Tensor& x, const std::vector<Tensor>& ps) { return conv_forward(x, make(ps)); };
    c.problem.backward = [make](const Tensor& x, const std::vector<Tensor>& ps, const Tensor& g) {
      auto r = conv_backward(x, make(ps), g);
      return std::vector<Tensor>{std::move(r.grad_x), std::move(r.grad_weights), std::move(*r.grad_bias)};
    };
    return c;
  }
  if (op == "norm") {
    NormParams base = make_norm(o.norm, s.c, o.groups);
    c.input = uniform(s, -1.0, 1.0, rng);
    if (o.norm == NormKind::None) {
      c.problem.forward = [base](const Tensor& x, const std::vector<Tensor>&) {
        return norm_forward(x, base, Mode::Train).y;
      };
      c.problem.backward = [base](const Tensor& x, const std::vector<Tensor>&, const Tensor& g) {
        return std::vector<Tensor>{norm_backward(x, base, g, Mode::Train).grad_x};
      };
      return c;
    }
    c.params = {uniform(base.gamma.shape(), 0.5, 1.5, rng), uniform(base.beta.shape(), -0.5, 0.5, rng)};
    auto make = [base](const std::vector<Tensor>& ps) {
      NormParams p = base;
      p.gamma = ps[0];
      p.beta = ps[1];
      return p;
    };
    c.problem.forward = [make](const Tensor& x, const std::vector<Tensor>& ps) {
      return norm_forward(x, make(ps), Mode::Train).y;
    };
    c.problem.backward = [make](const Tensor& x, const std::vector<Tensor>& ps, const Tensor& g) {
      auto r = norm_backward(x, make(ps), g, Mode::Train);
      return std::vector<Tensor>{std::move(r.grad_x), std::move(r.grad_gamma), std::move(r.grad_beta)};
    };
    return c;
  }
  if (op == "linear") {
    const std::size_t in = s.c * s.h * s.w;
    const std::size_t out = 3;
    c.input = uniform(s, -1.0, 1.0, rng);
    c.params = {gaussian(Shape{out, in, 1, 1}, 0.0, 0.3, rng), uniform(Shape{1, out, 1, 1}, -0.5, 0.5, rng)};
    c.problem.forward = [](const Tensor& x, const std::vector<Tensor>& ps) {
      return linear_forward(x, LinearParams{ps[0], ps[1]});
    };
    c.problem.backward = [](const Tensor& x, const std::vector<Tensor>& ps, const Tensor& g) {
      auto r = linear_backward(x, LinearParams{ps[0], ps[1]}, g);
      return std::vector<Tensor>{std::move(r.grad_x), std::move(r.grad_weights), std::move(r.grad_bias)};
    };
    return c;
  }

  FunnelConfig cfg;
  cfg.k = o.window;
  cfg.norm = o.norm;
  cfg.norm_groups = o.groups;
  cfg.init_std = 0.5;
  if (op == "frelu") return detail::funnel_case(op, cfg, false, o, rng);
  if (op == "frelu-sum") {
    cfg.fusion = Fusion::Sum;
    return detail::funnel_case(op, cfg, false, o, rng);
  }
  if (op == "dwrelu") return detail::funnel_case(op, cfg, true, o, rng);
  if (op == "pair-sum" || op == "pair-max") {
    cfg.window = WindowKind::Pair1x3_3x1;
    cfg.pair_combine = op == "pair-max" ? PairCombine::Max : PairCombine::Sum;
    return detail::funnel_case(op, cfg, false, o, rng);
  }
  if (op == "maxpool-cond" || op == "avgpool-cond") {
    cfg.condition = op == "maxpool-cond" ? ConditionKind::MaxPool : ConditionKind::AvgPool;
    cfg.norm = NormKind::None;
    auto fc = detail::funnel_case(op, cfg, false, o, rng);
    if (op == "maxpool-cond") {
      // A window's argmax switching is a kink too: margin_j = x_j - max(other taps),
      // positive only at the window's unique argmax.
      const long long r = static_cast<long long>(cfg.k / 2);
      fc.problem.kinks = [cfg, r](const Tensor& x, const std::vector<Tensor>&) {
        auto m = funnel_kink_margins(x, cfg, FunnelParams{}, Mode::Train);
        const Shape sh = x.shape();
        const long long H = static_cast<long long>(sh.h), W = static_cast<long long>(sh.w);
        for (std::size_t n = 0; n < sh.n; ++n)
          for (std::size_t ch = 0; ch < sh.c; ++ch) {
            const auto plane = x.plane(n, ch);
            for (long long i = 0; i < H; ++i)
              for (long long j = 0; j < W; ++j) {
                std::vector<double> taps;
                for (long long a = std::max(0LL, i - r); a <= std::min(H - 1, i + r); ++a)
                  for (long long b = std::max(0LL, j - r); b <= std::min(W - 1, j + r); ++b)
                    taps.push_back(plane[static_cast<std::size_t>(a * W + b)]);
                for (std::size_t t = 0; t < taps.size(); ++t) {
                  double other = -1e300;
                  for (std::size_t q = 0; q < taps.size(); ++q)
                    if (q != t) other = std::max(other, taps[q]);
                  m.push_back(taps[t] - other);
                }
              }
          }
        return m;
      };
    }
    return fc;
  }
  throw Error(ErrorKind::Config, "unknown gradcheck op '" + op + "'");
}

}  // namespace fnk
