#pragma once

// Ablation suites over the toy model. Each suite is a list of labelled
// activation variants; a run trains every variant for seeds 1..N on one
// shared dataset.

#include <cmath>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "fnk/complexity.hpp"
#include "fnk/train.hpp"

namespace fnk {

struct AblationVariant {
  std::string id;     // row letter or short tag
  std::string label;  // activation written out, e.g. Max(x, MaxPool(x))
  ActivationChoice act;
};

inline const std::vector<std::string>& ablation_suite_names() {
  static const std::vector<std::string> names = {"condition", "fusion", "window", "norm"};
  return names;
}

inline std::vector<AblationVariant> ablation_suite(const std::string& suite) {
  auto with = [](auto&& edit) {
    ActivationChoice a = frelu_choice(3);
    edit(a.funnel);
    return a;
  };
  if (suite == "condition") {
    ActivationChoice dw = frelu_choice(3);
    dw.kind = ActivationKind::DWThenReLU;
    return {
        {"A", "Max(x, ParamPool(x))", frelu_choice(3)},
        {"B", "Max(x, MaxPool(x))", with([](FunnelConfig& f) { f.condition = ConditionKind::MaxPool; })},
        {"C", "Max(x, AvgPool(x))", with([](FunnelConfig& f) { f.condition = ConditionKind::AvgPool; })},
        {"D", "Sum(x, ParamPool(x))", with([](FunnelConfig& f) { f.fusion = Fusion::Sum; })},
        {"E", "Max(DW(x), 0)", dw},
    };
  }
  if (suite == "fusion") {
    return {
        {"Max", "Max(x, ParamPool(x))", frelu_choice(3)},
        {"Sum", "Sum(x, ParamPool(x))", with([](FunnelConfig& f) { f.fusion = Fusion::Sum; })},
    };
  }
  if (suite == "window") {
    auto pair = [&](PairCombine c) {
      return with([c](FunnelConfig& f) {
        f.window = WindowKind::Pair1x3_3x1;
        f.pair_combine = c;
      });
    };
    // The 1x1 window carries no spatial context; it is PReLU.
    return {
        {"A", "1×1", prelu_equivalent_choice()},
        {"B", "3×3", frelu_choice(3)},
        {"C", "5×5", frelu_choice(5)},
        {"D", "7×7", frelu_choice(7)},
        {"E", "Sum(1×3, 3×1)", pair(PairCombine::Sum)},
        {"F", "Max(1×3, 3×1)", pair(PairCombine::Max)},
    };
  }
  if (suite == "norm") {
    auto norm = [&](NormKind k, std::size_t groups = 1) {
      return with([=](FunnelConfig& f) {
        f.norm = k;
        f.norm_groups = groups;
      });
    };
    return {
        {"-", "-", norm(NormKind::None)},
        {"BN", "BN", norm(NormKind::BatchNorm)},
        {"LN", "LN", norm(NormKind::LayerNorm)},
        {"IN", "IN", norm(NormKind::InstanceNorm)},
        {"GN", "GN", norm(NormKind::GroupNorm, 4)},
    };
  }
  throw Error(ErrorKind::Config, "unknown ablation suite '" + suite + "'");
}

struct AblationRow {
  std::string suite;
  AblationVariant variant;
  std::uint64_t seed = 0;
  double accuracy = 0.0;
  std::uint64_t added_params = 0;  // over the ReLU toy model
  double mean = 0.0;               // over this variant's seeds
  double sd = 0.0;                 // sample standard deviation, 0 for one seed
};

inline ModelSpec ablation_model(const AblationVariant& v, const TrainConfig& cfg) {
  ToyCnnOptions o;
  o.input = InputShape{1, cfg.image_size, cfg.image_size};
  return toy_cnn("toy-cnn-" + v.id, v.act, o);
}

/// Trains each variant for seeds 1..seeds; `on_run` sees each row as it
/// finishes (mean and sd are filled in only in the returned rows).
inline std::vector<AblationRow> run_ablation(const std::string& suite, std::size_t seeds, TrainConfig cfg,
                                             const DataSplits& data,
                                             const std::function<void(const AblationRow&)>& on_run = {}) {
  if (seeds == 0) throw Error(ErrorKind::Config, "ablation needs at least one seed");
  const auto variants = ablation_suite(suite);
  ToyCnnOptions base;
  base.input = InputShape{1, cfg.image_size, cfg.image_size};
  const std::uint64_t relu_params = count_params(toy_cnn("toy-cnn-relu", {ActivationKind::ReLU, {}}, base));
  std::vector<AblationRow> rows;
  for (const auto& v : variants) {
    const ModelSpec m = ablation_model(v, cfg);
    const std::size_t first = rows.size();
    for (std::size_t s = 1; s <= seeds; ++s) {
      cfg.seed = s;
      auto state = TrainState::fresh(m, s);
      const auto history = train(state, cfg, data);
      AblationRow r{suite, v, s, history.back().acc, count_params(m) - relu_params};
      if (on_run) on_run(r);
      rows.push_back(std::move(r));
    }
    double mean = 0.0, ss = 0.0;
    for (std::size_t i = first; i < rows.size(); ++i) mean += rows[i].accuracy;
    mean /= static_cast<double>(seeds);
    for (std::size_t i = first; i < rows.size(); ++i) ss += (rows[i].accuracy - mean) * (rows[i].accuracy - mean);
    const double sd = seeds > 1 ? std::sqrt(ss / static_cast<double>(seeds - 1)) : 0.0;
    for (std::size_t i = first; i < rows.size(); ++i) {
      rows[i].mean = mean;
      rows[i].sd = sd;
    }
  }
  return rows;
}

inline std::string csv_quote(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
  return out + "\"";
}

/// One line per (variant, seed).
inline void write_ablation_csv(std::ostream& os, const std::vector<AblationRow>& rows) {
  os << "suite,id,label,seed,accuracy,mean,sd,added_params\n";
  for (const auto& r : rows)
    os << r.suite << "," << csv_quote(r.variant.id) << "," << csv_quote(r.variant.label) << "," << r.seed << ","
       << detail::format_real(r.accuracy) << "," << detail::format_real(r.mean) << ","
       << detail::format_real(r.sd) << "," << r.added_params << "\n";
}

}  // namespace fnk
