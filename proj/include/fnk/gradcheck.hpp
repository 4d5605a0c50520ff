#pragma once

// Central finite-difference oracle for every backward pass in the library.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "fnk/error.hpp"
#include "fnk/tensor.hpp"

namespace fnk {

/// (f(x + h e_i) - f(x - h e_i)) / 2h for every coordinate i.
inline Tensor numeric_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x, double h) {
  if (!(h > 0.0)) throw Error(ErrorKind::InvalidArgument, "finite-difference step must be > 0");
  Tensor probe = x;
  Tensor grad(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double up = f(probe);
    probe[i] = orig - h;
    const double down = f(probe);
    probe[i] = orig;
    if (!std::isfinite(up) || !std::isfinite(down))
      throw Error(ErrorKind::Numeric, "non-finite function value probing coordinate " + std::to_string(i));
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

/// |a - n| / max(|a|, |n|, 1e-8)
inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-8});
}

struct GradCheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t worst_index = 0;  // flat index over [input, params...] in order
  std::size_t skipped_count = 0;
  std::size_t checked_count = 0;
  bool passed = false;
};

inline std::ostream& operator<<(std::ostream& os, const GradCheckReport& r) {
  os << "passed=" << (r.passed ? "true" : "false") << "\n"
     << "max_rel_error=" << r.max_rel_error << "\n"
     << "max_abs_error=" << r.max_abs_error << "\n"
     << "worst_index=" << r.worst_index << "\n"
     << "checked=" << r.checked_count << "\n"
     << "skipped=" << r.skipped_count << "\n";
  return os;
}

/// A forward/backward pair under test. Tensors are passed as (input, params).
struct GradCheckProblem {
  std::function<Tensor(const Tensor&, const std::vector<Tensor>&)> forward;
  /// Given grad_out, returns {grad_input, grad_param_0, grad_param_1, ...}.
  std::function<std::vector<Tensor>(const Tensor&, const std::vector<Tensor>&, const Tensor&)> backward;
  /// Optional signed kink margins; a coordinate is skipped when moving it by
  /// +-kink_eps flips the sign of any margin.
  std::function<std::vector<double>(const Tensor&, const std::vector<Tensor>&)> kinks;
};

struct GradCheckOptions {
  double h = 1e-5;
  double tol = 1e-5;
  double kink_eps = 1e-4;
  std::uint64_t seed = 0;  // projection direction for the scalar loss
};

/// Compares the analytic gradient of L = <forward(x, params), u> (u a fixed
/// random projection) with central differences, for the input and for every
/// parameter tensor.
inline GradCheckReport check(const GradCheckProblem& prob, const Tensor& x, const std::vector<Tensor>& params,
                             const GradCheckOptions& opt = {}) {
  const Tensor y0 = prob.forward(x, params);
  Rng rng(opt.seed ^ 0x5eedULL);
  const Tensor u = uniform(y0.shape(), -1.0, 1.0, rng);

  const auto analytic = prob.backward(x, params, u);
  if (analytic.size() != params.size() + 1)
    throw Error(ErrorKind::InvalidArgument, "backward returned " + std::to_string(analytic.size()) +
                                                " gradients, expected " + std::to_string(params.size() + 1));

  std::vector<Tensor> tensors;
  tensors.reserve(params.size() + 1);
  tensors.push_back(x);
  for (const auto& p : params) tensors.push_back(p);

  auto eval = [&](const std::vector<Tensor>& ts) {
    std::vector<Tensor> ps(ts.begin() + 1, ts.end());
    return prob.forward(ts[0], ps);
  };
  auto signs = [&](const std::vector<Tensor>& ts) {
    std::vector<bool> s;
    if (!prob.kinks) return s;
    std::vector<Tensor> ps(ts.begin() + 1, ts.end());
    for (double m : prob.kinks(ts[0], ps)) s.push_back(m > 0.0);
    return s;
  };
  const auto base_signs = signs(tensors);

  GradCheckReport r;
  std::size_t flat = 0;
  for (std::size_t t = 0; t < tensors.size(); ++t) {
    if (analytic[t].shape() != tensors[t].shape())
      throw Error(ErrorKind::ShapeMismatch, "gradient " + std::to_string(t) + " has shape " +
                                                analytic[t].shape().to_string() + ", expected " +
                                                tensors[t].shape().to_string());
    for (std::size_t i = 0; i < tensors[t].size(); ++i, ++flat) {
      const double orig = tensors[t][i];
      if (prob.kinks) {
        tensors[t][i] = orig + opt.kink_eps;
        const bool flips_up = signs(tensors) != base_signs;
        tensors[t][i] = orig - opt.kink_eps;
        const bool flips_down = signs(tensors) != base_signs;
        tensors[t][i] = orig;
        if (flips_up || flips_down) {
          ++r.skipped_count;
          continue;
        }
      }
      tensors[t][i] = orig + opt.h;
      const Tensor up = eval(tensors);
      tensors[t][i] = orig - opt.h;
      const Tensor down = eval(tensors);
      tensors[t][i] = orig;
      if (!up.all_finite() || !down.all_finite())
        throw Error(ErrorKind::Numeric, "non-finite output while probing coordinate " + std::to_string(flat));
      // Differencing per output element before projecting avoids cancellation
      // between two nearly equal sums.
      long double diff = 0.0L;
      for (std::size_t k = 0; k < u.size(); ++k) diff += static_cast<long double>(up[k] - down[k]) * u[k];
      const double numeric = static_cast<double>(diff / (2.0L * opt.h));
      const double a = analytic[t][i];
      const double rel = relative_error(a, numeric);
      const double abs_err = std::abs(a - numeric);
      ++r.checked_count;
      if (r.checked_count == 1 || rel > r.max_rel_error) {
        r.max_rel_error = rel;
        r.worst_index = flat;
      }
      r.max_abs_error = std::max(r.max_abs_error, abs_err);
    }
  }
  r.passed = r.checked_count > 0 && r.max_rel_error <= opt.tol;
  return r;
}

}  // namespace fnk
