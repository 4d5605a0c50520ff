// Library tour: a funnel activation forward pass, a gradient check, a
// complexity count and a short training run on the synthetic layouts.

#include <iostream>

#include "fnk/analysis.hpp"
#include "fnk/gradcheck_ops.hpp"
#include "fnk/train.hpp"

using namespace fnk;

int main() {
  // max(x, BN(dw3x3(x))) on a small batch.
  Rng rng(1);
  const Tensor x = gaussian(Shape{2, 4, 8, 8}, 0.0, 1.0, rng);
  FunnelConfig cfg;  // 3x3 window, BatchNorm, max fusion
  const FunnelParams params = make_funnel_params(cfg, 4, rng);
  const Tensor y = frelu_forward(x, cfg, params, Mode::Train);
  std::cout << "frelu out " << y.shape().to_string() << " mean=" << mean(y) << "\n";

  // Analytic vs finite-difference gradients.
  const auto c = make_gradcheck_case("frelu");
  const auto report = check(c.problem, c.input, c.params);
  std::cout << "gradcheck frelu max_rel_error=" << report.max_rel_error << (report.passed ? " PASS" : " FAIL")
            << "\n";

  // Table-style counts for the builtin ResNet-50 pair.
  for (const char* name : {"resnet50-relu", "resnet50-frelu"}) {
    const auto r = complexity(*builtin_model(name));
    std::cout << name << " params=" << format_params(r.params) << " flops=" << format_flops(r.flops) << "\n";
  }
  std::cout << "activate field n=3 k=3: " << join_sizes(activate_field(3, 3).sizes) << "\n";

  // A short run; the full-size defaults live in TrainConfig.
  TrainConfig tc;
  tc.model = "toy-cnn-frelu";
  tc.train_size = 1000;
  tc.test_size = 400;
  tc.iterations = 100;
  tc.eval_every = 50;
  const auto data = load_data(tc);
  auto state = TrainState::fresh(resolve_model(tc.model), tc.seed);
  TrainHooks hooks;
  hooks.on_eval = [](const HistoryRow& r) { std::cout << "iter=" << r.iter << " acc=" << r.acc << "\n"; };
  train(state, tc, data, hooks);
}
