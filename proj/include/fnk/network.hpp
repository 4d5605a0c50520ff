#pragma once

// Runnable networks instantiated from a validated ModelSpec, plus the
// softmax cross-entropy loss used by the training harness.

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fnk/activations.hpp"
#include "fnk/complexity.hpp"
#include "fnk/nn_ops.hpp"
#include "fnk/rng.hpp"

namespace fnk {

namespace detail {

struct Node {
  LayerSpec spec;
  std::optional<ConvParams> conv;
  std::optional<DepthwiseConvParams> dw;
  std::optional<NormParams> norm;
  std::optional<ActivationLayer> act;
  std::optional<LinearParams> linear;
  std::vector<Node> main, shortcut;  // residual scopes only
  bool residual = false;

  std::vector<Tensor> grads;  // parallel to the order of parameters()
  std::optional<Tensor> input;
  Mode mode = Mode::Train;
};

inline Tensor he_normal(Shape s, std::size_t fan_in, Rng& rng) {
  return gaussian(s, 0.0, std::sqrt(2.0 / static_cast<double>(fan_in)), rng);
}

}  // namespace detail

/// A feed-forward graph of layers with residual scopes. Parameters are
/// initialized with He-normal convolutions, unit-gain norms, zero biases and
/// the activation's own defaults. Parameter order is the layer order.
class Network {
 public:
  static Network build(const ModelSpec& m, Rng& rng) {
    require_valid(m);
    Network net;
    net.spec_ = m;
    std::size_t pos = 0;
    net.nodes_ = parse_scope(m.layers, pos, rng, false);
    return net;
  }

  const ModelSpec& spec() const { return spec_; }

  Tensor forward(const Tensor& x, Mode mode) {
    const Shape s = x.shape();
    if (s.c != spec_.input.c || s.h != spec_.input.h || s.w != spec_.input.w)
      throw Error(ErrorKind::ShapeMismatch, "network '" + spec_.name + "' expects " + spec_.input.to_string() +
                                                " inputs, got " + s.to_string());
    return forward_seq(nodes_, x, mode);
  }

  /// Accumulates parameter gradients; returns the gradient wrt the input.
  Tensor backward(const Tensor& grad_out) { return backward_seq(nodes_, grad_out); }

  /// Trainable tensors in a fixed order. Activation parameters carry
  /// decay=false unless `decay_activations` is set.
  std::vector<ParamRef> parameters(bool decay_activations = false) {
    std::vector<ParamRef> out;
    collect_params(nodes_, out, decay_activations);
    return out;
  }

  /// Non-trainable state (BatchNorm running statistics) in a fixed order.
  std::vector<BufferRef> buffers() {
    std::vector<BufferRef> out;
    collect_buffers(nodes_, out);
    return out;
  }

  void zero_grad() {
    for (auto& p : parameters()) p.grad->fill(0.0);
  }

  /// Element count over all instantiated parameter tensors.
  std::size_t num_params() {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.value->size();
    return n;
  }

  void clear_cache() { clear_seq(nodes_); }

 private:
  static std::vector<detail::Node> parse_scope(const std::vector<LayerSpec>& layers, std::size_t& pos, Rng& rng,
                                               bool in_block) {
    std::vector<detail::Node> seq;
    while (pos < layers.size()) {
      const LayerSpec& l = layers[pos];
      if (l.kind == LayerKind::Shortcut || l.kind == LayerKind::End) {
        if (!in_block) throw Error(ErrorKind::Validation, "unbalanced residual marker '" + l.name + "'");
        return seq;
      }
      ++pos;
      detail::Node n;
      n.spec = l;
      switch (l.kind) {
        case LayerKind::Conv: {
          ConvParams p;
          p.weights = detail::he_normal(Shape{l.c_out, l.c_in, l.kh, l.kw}, l.c_in * l.kh * l.kw, rng);
          if (l.bias) p.bias = Tensor(Shape{1, l.c_out, 1, 1});
          p.pad = l.pad;
          p.stride = l.stride;
          n.grads.push_back(Tensor(p.weights.shape()));
          if (p.bias) n.grads.push_back(Tensor(p.bias->shape()));
          n.conv = std::move(p);
          break;
        }
        case LayerKind::DWConv: {
          auto p = make_depthwise(l.channels, l.kh, l.kw);
          p.weights = detail::he_normal(p.weights.shape(), l.kh * l.kw, rng);
          n.grads.push_back(Tensor(p.weights.shape()));
          n.dw = std::move(p);
          break;
        }
        case LayerKind::Norm: {
          n.norm = make_norm(l.norm, l.channels, l.groups, l.affine);
          if (has_affine(*n.norm)) {
            n.grads.push_back(Tensor(n.norm->gamma.shape()));
            n.grads.push_back(Tensor(n.norm->beta.shape()));
          }
          break;
        }
        case LayerKind::Act:
          switch (l.act) {
            case ActivationKind::ReLU: n.act = ActivationLayer::relu(); break;
            case ActivationKind::Swish: n.act = ActivationLayer::swish(); break;
            case ActivationKind::PReLU: n.act = ActivationLayer::prelu(l.channels); break;
            case ActivationKind::FReLU: n.act = ActivationLayer::frelu(l.funnel, l.channels, rng); break;
            case ActivationKind::DWThenReLU: n.act = ActivationLayer::dw_then_relu(l.funnel, l.channels, rng); break;
          }
          break;
        case LayerKind::Pool: break;
        case LayerKind::Linear: {
          LinearParams p;
          p.weights = gaussian(Shape{l.c_out, l.c_in, 1, 1}, 0.0, std::sqrt(1.0 / static_cast<double>(l.c_in)), rng);
          p.bias = Tensor(Shape{1, l.c_out, 1, 1});
          n.grads.push_back(Tensor(p.weights.shape()));
          n.grads.push_back(Tensor(p.bias.shape()));
          n.linear = std::move(p);
          break;
        }
        case LayerKind::Block: {
          n.residual = true;
          n.main = parse_scope(layers, pos, rng, true);
          if (pos < layers.size() && layers[pos].kind == LayerKind::Shortcut) {
            ++pos;
            n.shortcut = parse_scope(layers, pos, rng, true);
          }
          if (pos >= layers.size() || layers[pos].kind != LayerKind::End)
            throw Error(ErrorKind::Validation, "block '" + l.name + "' is never closed");
          ++pos;
          break;
        }
        case LayerKind::Shortcut:
        case LayerKind::End: break;
      }
      seq.push_back(std::move(n));
    }
    return seq;
  }

  static bool has_affine(const NormParams& p) { return p.kind != NormKind::None && p.affine; }

  static PoolWindow window_of(const LayerSpec& l) { return PoolWindow{l.kh, l.kw, l.stride, l.pad}; }

  static Tensor forward_seq(std::vector<detail::Node>& seq, Tensor x, Mode mode) {
    for (auto& n : seq) x = forward_node(n, x, mode);
    return x;
  }

  static Tensor forward_node(detail::Node& n, const Tensor& x, Mode mode) {
    n.mode = mode;
    if (n.residual) {
      Tensor a = forward_seq(n.main, x, mode);
      const Tensor b = n.shortcut.empty() ? x : forward_seq(n.shortcut, x, mode);
      axpy_inplace(a, 1.0, b);
      return a;
    }
    const LayerSpec& l = n.spec;
    if (l.kind == LayerKind::Act) return n.act->forward(x, mode);
    n.input = x;
    switch (l.kind) {
      case LayerKind::Conv: return conv_forward(x, *n.conv);
      case LayerKind::DWConv: return depthwise_conv_forward(x, *n.dw);
      case LayerKind::Norm: {
        auto f = norm_forward(x, *n.norm, mode);
        if (f.running) {
          n.norm->running_mean = std::move(f.running->mean);
          n.norm->running_var = std::move(f.running->var);
        }
        return std::move(f.y);
      }
      case LayerKind::Pool:
        if (l.pool == PoolKind::Global) return global_avg_pool(x);
        return pool_forward(x, window_of(l), l.pool == PoolKind::Max);
      case LayerKind::Linear: return linear_forward(x, *n.linear);
      default: return x;
    }
  }

  static Tensor backward_seq(std::vector<detail::Node>& seq, Tensor g) {
    for (auto it = seq.rbegin(); it != seq.rend(); ++it) g = backward_node(*it, g);
    return g;
  }

  static Tensor backward_node(detail::Node& n, const Tensor& g) {
    if (n.residual) {
      Tensor a = backward_seq(n.main, g);
      axpy_inplace(a, 1.0, n.shortcut.empty() ? g : backward_seq(n.shortcut, g));
      return a;
    }
    const LayerSpec& l = n.spec;
    if (l.kind == LayerKind::Act) return n.act->backward(g);
    if (!n.input) throw Error(ErrorKind::State, "backward before forward in layer '" + l.name + "'");
    const Tensor& x = *n.input;
    switch (l.kind) {
      case LayerKind::Conv: {
        auto r = conv_backward(x, *n.conv, g);
        axpy_inplace(n.grads[0], 1.0, r.grad_weights);
        if (r.grad_bias) axpy_inplace(n.grads[1], 1.0, *r.grad_bias);
        return std::move(r.grad_x);
      }
      case LayerKind::DWConv: {
        auto r = depthwise_conv_backward(x, *n.dw, g);
        axpy_inplace(n.grads[0], 1.0, r.grad_weights);
        return std::move(r.grad_x);
      }
      case LayerKind::Norm: {
        auto r = norm_backward(x, *n.norm, g, n.mode);
        if (has_affine(*n.norm)) {
          axpy_inplace(n.grads[0], 1.0, r.grad_gamma);
          axpy_inplace(n.grads[1], 1.0, r.grad_beta);
        }
        return std::move(r.grad_x);
      }
      case LayerKind::Pool:
        if (l.pool == PoolKind::Global) return global_avg_pool_backward(x.shape(), g);
        return pool_backward(x, window_of(l), l.pool == PoolKind::Max, g);
      case LayerKind::Linear: {
        auto r = linear_backward(x, *n.linear, g);
        axpy_inplace(n.grads[0], 1.0, r.grad_weights);
        axpy_inplace(n.grads[1], 1.0, r.grad_bias);
        return std::move(r.grad_x);
      }
      default: return g;
    }
  }

  static void collect_params(std::vector<detail::Node>& seq, std::vector<ParamRef>& out, bool decay_act) {
    for (auto& n : seq) {
      const std::string& p = n.spec.name;
      if (n.residual) {
        collect_params(n.main, out, decay_act);
        collect_params(n.shortcut, out, decay_act);
      } else if (n.conv) {
        out.push_back({p + ".weight", &n.conv->weights, &n.grads[0], true});
        if (n.conv->bias) out.push_back({p + ".bias", &*n.conv->bias, &n.grads[1], true});
      } else if (n.dw) {
        out.push_back({p + ".weight", &n.dw->weights, &n.grads[0], true});
      } else if (n.norm && has_affine(*n.norm)) {
        out.push_back({p + ".gamma", &n.norm->gamma, &n.grads[0], true});
        out.push_back({p + ".beta", &n.norm->beta, &n.grads[1], true});
      } else if (n.act) {
        for (auto& r : n.act->parameters(p, decay_act)) out.push_back(r);
      } else if (n.linear) {
        out.push_back({p + ".weight", &n.linear->weights, &n.grads[0], true});
        out.push_back({p + ".bias", &n.linear->bias, &n.grads[1], true});
      }
    }
  }

  static void collect_buffers(std::vector<detail::Node>& seq, std::vector<BufferRef>& out) {
    for (auto& n : seq) {
      if (n.residual) {
        collect_buffers(n.main, out);
        collect_buffers(n.shortcut, out);
      } else if (n.norm && n.norm->kind == NormKind::BatchNorm) {
        out.push_back({n.spec.name + ".running_mean", &n.norm->running_mean});
        out.push_back({n.spec.name + ".running_var", &n.norm->running_var});
      } else if (n.act) {
        for (auto& b : n.act->buffers(n.spec.name)) out.push_back(b);
      }
    }
  }

  static void clear_seq(std::vector<detail::Node>& seq) {
    for (auto& n : seq) {
      n.input.reset();
      if (n.act) n.act->clear_cache();
      clear_seq(n.main);
      clear_seq(n.shortcut);
    }
  }

  ModelSpec spec_;
  std::vector<detail::Node> nodes_;
};

// ---------------------------------------------------------------------------
// Loss

struct LossResult {
  double loss = 0.0;  // mean over the batch
  Tensor grad;        // d loss / d logits
  std::size_t correct = 0;
};

/// Index of the largest logit of sample n (first on ties).
inline std::size_t argmax_class(const Tensor& logits, std::size_t n) {
  const std::size_t k = logits.shape().c;
  std::size_t best = 0;
  for (std::size_t c = 1; c < k; ++c)
    if (logits.at(n, c, 0, 0) > logits.at(n, best, 0, 0)) best = c;
  return best;
}

/// Softmax cross-entropy over logits (n, classes, 1, 1), averaged over n.
inline LossResult softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  const Shape s = logits.shape();
  if (s.h != 1 || s.w != 1 || labels.size() != s.n)
    throw Error(ErrorKind::ShapeMismatch, "cross-entropy: logits " + s.to_string() + " vs " +
                                              std::to_string(labels.size()) + " labels");
  LossResult r{0.0, Tensor(s), 0};
  const double inv_n = 1.0 / static_cast<double>(s.n);
  for (std::size_t n = 0; n < s.n; ++n) {
    const int y = labels[n];
    if (y < 0 || static_cast<std::size_t>(y) >= s.c)
      throw Error(ErrorKind::Config, "label " + std::to_string(y) + " outside [0, " + std::to_string(s.c) + ")");
    double mx = logits.at(n, 0, 0, 0);
    for (std::size_t c = 1; c < s.c; ++c) mx = std::max(mx, logits.at(n, c, 0, 0));
    double z = 0.0;
    for (std::size_t c = 0; c < s.c; ++c) z += std::exp(logits.at(n, c, 0, 0) - mx);
    const double log_z = std::log(z) + mx;
    r.loss += (log_z - logits.at(n, static_cast<std::size_t>(y), 0, 0)) * inv_n;
    for (std::size_t c = 0; c < s.c; ++c) {
      const double p = std::exp(logits.at(n, c, 0, 0) - log_z);
      r.grad.at(n, c, 0, 0) = (p - (static_cast<int>(c) == y ? 1.0 : 0.0)) * inv_n;
    }
    if (argmax_class(logits, n) == static_cast<std::size_t>(y)) ++r.correct;
  }
  return r;
}

}  // namespace fnk
