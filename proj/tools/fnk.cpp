// fnk: gradient checks, complexity counts, training and analysis for funnel
// activations.
//
// Every subcommand first writes its resolved settings to stderr as key=value
// lines, so stdout carries only results. Exit code 2 means a usage error and
// 1 means a failed check or a runtime error.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fnk/ablation.hpp"
#include "fnk/analysis.hpp"
#include "fnk/complexity.hpp"
#include "fnk/gradcheck_ops.hpp"
#include "fnk/train.hpp"

namespace {

using namespace fnk;

constexpr int kOk = 0;
constexpr int kCheckFailed = 1;
constexpr int kUsage = 2;

// Thrown for bad flag values found after parsing.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void print_settings(const std::string& command, const std::vector<std::pair<std::string, std::string>>& kv) {
  std::cerr << "command=" << command << "\n";
  for (const auto& [k, v] : kv) std::cerr << k << "=" << v << "\n";
}

void print_config(const std::string& command, const TrainConfig& cfg) {
  std::cerr << "command=" << command << "\n" << to_text(cfg);
}

// Shared training-config flags: --config file, then --set key=value pairs,
// then the dedicated flags below.
struct ConfigFlags {
  std::string path;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> iterations;
  std::optional<std::string> model;

  void add(CLI::App* cmd, bool with_model = true) {
    cmd->add_option("--config", path, "key=value config file")->check(CLI::ExistingFile);
    cmd->add_option("--set", sets, "override one config key (key=value), repeatable");
    cmd->add_option("--seed", seed, "run seed");
    cmd->add_option("--iterations", iterations, "training iterations");
    if (with_model) cmd->add_option("--model", model, "builtin model name or model file");
  }

  TrainConfig resolve() const {
    TrainConfig c;
    if (!path.empty()) c = load_config(path);
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + s + "'");
      set_config_value(c, s.substr(0, eq), s.substr(eq + 1));
    }
    if (seed) c.seed = *seed;
    if (iterations) c.iterations = *iterations;
    if (model) c.model = *model;
    c.validate();
    return c;
  }
};

NormKind norm_flag(const std::string& s) {
  try {
    return parse_norm_kind(s);
  } catch (const Error& e) {
    throw UsageError(e.what());
  }
}

// ---------------------------------------------------------------------------

int run_gradcheck(const std::string& op, std::size_t window, const std::string& norm, std::size_t groups,
                  std::uint64_t seed, double tol) {
  const auto& names = gradcheck_op_names();
  if (std::find(names.begin(), names.end(), op) == names.end()) {
    std::string all;
    for (const auto& n : names) all += (all.empty() ? "" : ", ") + n;
    throw UsageError("unknown op '" + op + "' (known: " + all + ")");
  }
  GradCheckCaseOptions o;
  o.window = window;
  o.norm = norm_flag(norm);
  o.groups = groups;
  o.seed = seed;
  print_settings("gradcheck", {{"op", op},
                               {"window", std::to_string(window)},
                               {"norm", to_string(o.norm)},
                               {"groups", std::to_string(groups)},
                               {"shape", o.shape.to_string()},
                               {"seed", std::to_string(seed)},
                               {"tol", detail::format_real(tol)}});
  const auto c = make_gradcheck_case(op, o);
  GradCheckOptions g;
  g.tol = tol;
  g.seed = seed;
  const auto r = check(c.problem, c.input, c.params, g);
  std::cout << "op=" << op << "\n" << r << (r.passed ? "PASS" : "FAIL") << "\n";
  return r.passed ? kOk : kCheckFailed;
}

int run_count(const std::string& model, const std::string& input, bool csv, int decimals) {
  ModelSpec m;
  try {
    m = resolve_model(model);
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::Config) throw UsageError(e.what());
    throw;
  }
  if (!input.empty()) m.input = parse_input_shape(input);
  if (decimals < 0 || decimals > 6) throw UsageError("--flops-decimals must be in [0, 6]");
  print_settings("count", {{"model", model},
                           {"input", m.input.to_string()},
                           {"csv", csv ? "1" : "0"},
                           {"flops_decimals", std::to_string(decimals)}});
  const auto r = complexity(m);
  if (csv) {
    write_breakdown_csv(std::cout, r);
    return kOk;
  }
  std::cout << "params=" << format_params(r.params) << " flops=" << format_flops(r.flops, decimals) << "\n"
            << "params_exact=" << r.params << "\n"
            << "norm_params=" << r.norm_params << "\n"
            << "total_params=" << r.total_params() << "\n"
            << "flops_exact=" << r.flops << "\n"
            << "aux_flops=" << r.aux_flops << "\n";
  return kOk;
}

int run_train(const ConfigFlags& flags, const std::string& history_path, const std::string& checkpoint_path,
              const std::string& resume) {
  const TrainConfig cfg = flags.resolve();
  print_config("train", cfg);
  std::cerr << "history=" << history_path << "\ncheckpoint=" << checkpoint_path << "\nresume=" << resume << "\n";
  const auto data = load_data(cfg);
  TrainState state = resume.empty() ? TrainState::fresh(resolve_model(cfg.model), cfg.seed) : load_checkpoint(resume);
  TrainHooks hooks;
  hooks.checkpoint_path = checkpoint_path;
  hooks.on_eval = [](const HistoryRow& r) {
    std::cout << "iter=" << r.iter << " loss=" << r.loss << " acc=" << r.acc << std::endl;
  };
  const auto history = train(state, cfg, data, hooks);
  if (!history_path.empty()) {
    std::ofstream os(history_path);
    if (!os) throw Error(ErrorKind::Format, "cannot write " + history_path);
    write_history_csv(os, history);
  }
  if (!history.empty()) std::cout << "final_acc=" << history.back().acc << "\n";
  return kOk;
}

int run_eval(const ConfigFlags& flags, const std::string& checkpoint, const std::string& split) {
  const TrainConfig cfg = flags.resolve();
  if (split != "train" && split != "test") throw UsageError("--split must be train or test");
  print_config("eval", cfg);
  std::cerr << "checkpoint=" << checkpoint << "\nsplit=" << split << "\n";
  auto state = load_checkpoint(checkpoint);
  const auto data = load_data(cfg);
  const auto r = evaluate(state.net, split == "train" ? data.train : data.test, cfg.eval_batch);
  std::cout << "accuracy=" << r.accuracy << "\nloss=" << r.loss << "\n";
  for (std::size_t c = 0; c < r.per_class.size(); ++c) {
    const std::string name = r.per_class.size() == 4 ? layout_class_name(static_cast<int>(c)) : std::to_string(c);
    std::cout << "class." << name << "=" << r.per_class[c] << " n=" << r.class_counts[c] << "\n";
  }
  return kOk;
}

int run_ablate(const ConfigFlags& flags, const std::string& suite, std::size_t seeds, const std::string& out) {
  const auto& names = ablation_suite_names();
  if (std::find(names.begin(), names.end(), suite) == names.end())
    throw UsageError("unknown suite '" + suite + "' (known: condition, fusion, window, norm)");
  if (seeds == 0) throw UsageError("--seeds must be >= 1");
  TrainConfig cfg = flags.resolve();
  cfg.eval_every = 0;
  print_config("ablate", cfg);
  std::cerr << "suite=" << suite << "\nseeds=" << seeds << "\nout=" << out << "\n";
  const auto data = load_data(cfg);
  const auto rows = run_ablation(suite, seeds, cfg, data, [](const AblationRow& r) {
    std::cerr << r.variant.id << " " << r.variant.label << " seed=" << r.seed << " acc=" << r.accuracy << "\n";
  });
  if (out.empty()) {
    write_ablation_csv(std::cout, rows);
  } else {
    std::ofstream os(out);
    if (!os) throw Error(ErrorKind::Format, "cannot write " + out);
    write_ablation_csv(os, rows);
  }
  return kOk;
}

int run_afield(std::size_t layers, std::size_t k, bool table) {
  if (k % 2 == 0) throw UsageError("--k must be odd");
  print_settings("afield", {{"layers", std::to_string(layers)}, {"k", std::to_string(k)}, {"table", table ? "1" : "0"}});
  if (!table) {
    std::cout << join_sizes(activate_field(layers, k).sizes) << "\n";
    return kOk;
  }
  std::cout << "n,size\n";
  for (std::size_t n = 0; n <= layers; ++n)
    for (auto s : activate_field(n, k).sizes) std::cout << n << "," << s << "\n";
  return kOk;
}

int run_rfield(std::size_t layers, const ReceptiveFieldOptions& o, std::uint64_t seed) {
  if (o.k % 2 == 0) throw UsageError("--k must be odd");
  const std::size_t size = receptive_field_image_size(layers, o);
  print_settings("rfield", {{"layers", std::to_string(layers)},
                            {"k", std::to_string(o.k)},
                            {"size", std::to_string(size)},
                            {"draws", std::to_string(o.draws)},
                            {"worst_case", o.worst_case ? "1" : "0"},
                            {"seed", std::to_string(seed)}});
  Rng rng(seed);
  const auto m = empirical_receptive_field(layers, rng, o);
  for (std::size_t i = 0; i < m.h; ++i) {
    for (std::size_t j = 0; j < m.w; ++j) std::cout << (j ? "," : "") << (m.at(i, j) ? 1 : 0);
    std::cout << "\n";
  }
  const std::size_t bound = 1 + layers * (o.k - 1);
  std::cerr << "extent_h=" << m.extent_h << "\nextent_w=" << m.extent_w << "\nbound=" << bound << "\n";
  return m.extent_h <= bound && m.extent_w <= bound ? kOk : kCheckFailed;
}

int run_export(std::size_t n, std::optional<std::size_t> test_n, std::size_t size, std::uint64_t seed,
               const std::string& out) {
  if (size < 16) throw UsageError("--size must be >= 16");
  const std::size_t nt = test_n.value_or(std::max<std::size_t>(1, n / 4));
  print_settings("export-synth", {{"n", std::to_string(n)},
                                  {"test_n", std::to_string(nt)},
                                  {"size", std::to_string(size)},
                                  {"seed", std::to_string(seed)},
                                  {"out", out}});
  std::filesystem::create_directories(out);
  const std::filesystem::path dir(out);
  Rng rng(seed);
  const Dataset train_set = synth_layouts(n, size, rng);
  const Dataset test_set = synth_layouts(nt, size, rng);
  bool same = true;
  for (const auto& [prefix, d] : {std::pair{"train", &train_set}, std::pair{"t10k", &test_set}}) {
    const auto img = (dir / (std::string(prefix) + "-images-idx3-ubyte")).string();
    const auto lab = (dir / (std::string(prefix) + "-labels-idx1-ubyte")).string();
    save_idx(*d, img, lab);
    const auto back = load_idx(img, lab);
    same = same && back.labels == d->labels && back.images.values() == d->images.values();
    std::cout << img << "\n" << lab << "\n";
  }
  std::cout << "roundtrip=" << (same ? "identical" : "mismatch") << "\n";
  return same ? kOk : kCheckFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Funnel activation kernels: gradient checks, complexity, training and analysis"};
  app.require_subcommand(1);

  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of one operator");
  std::string op;
  std::size_t window = 3, groups = 2;
  std::string norm = "bn";
  std::uint64_t seed = 1;
  double tol = 1e-5;
  gc->add_option("--op", op, "operator name")->required();
  gc->add_option("--window", window, "window size");
  gc->add_option("--norm", norm, "norm after the window: none|bn|ln|in|gn");
  gc->add_option("--groups", groups, "groups for gn");
  gc->add_option("--seed", seed, "input and projection seed");
  gc->add_option("--tol", tol, "relative error tolerance");

  auto* cnt = app.add_subcommand("count", "parameter and FLOP counts");
  std::string model, input;
  bool csv = false;
  cnt->add_option("--model", model, "builtin model name or model file")->required();
  cnt->add_option("--input", input, "input shape CxHxW (default: the model's)");
  int flops_decimals = 2;
  cnt->add_flag("--csv", csv, "per-layer breakdown as CSV");
  cnt->add_option("--flops-decimals", flops_decimals, "decimals of the G-FLOPs headline");

  auto* tr = app.add_subcommand("train", "train a model, writing history CSV and checkpoint");
  ConfigFlags train_flags;
  train_flags.add(tr);
  std::string history = "history.csv", checkpoint = "model.ckpt", resume;
  tr->add_option("--history", history, "history CSV path (iter,loss,acc)");
  tr->add_option("--checkpoint", checkpoint, "checkpoint path, rewritten at every evaluation");
  tr->add_option("--resume", resume, "continue from this checkpoint")->check(CLI::ExistingFile);

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  ConfigFlags eval_flags;
  eval_flags.add(ev, false);
  std::string eval_ckpt, split = "test";
  ev->add_option("--checkpoint", eval_ckpt, "checkpoint to evaluate")->required()->check(CLI::ExistingFile);
  ev->add_option("--split", split, "train or test");

  auto* ab = app.add_subcommand("ablate", "train an ablation suite over seeds, emit CSV");
  ConfigFlags ablate_flags;
  ablate_flags.add(ab, false);
  std::string suite, ablate_out;
  std::size_t seeds = 1;
  ab->add_option("--suite", suite, "condition|fusion|window|norm")->required();
  ab->add_option("--seeds", seeds, "seeds per variant (1..N)");
  ab->add_option("--out", ablate_out, "CSV path (default stdout)");

  auto* af = app.add_subcommand("afield", "activate-field size set after n layers");
  std::size_t layers = 1, k = 3;
  bool table = false;
  af->add_option("--layers", layers, "number of funnel layers");
  af->add_option("--k", k, "window size (odd)");
  af->add_flag("--table", table, "CSV of sizes for every depth 0..layers");

  auto* rf = app.add_subcommand("rfield", "empirical receptive field as a 0/1 CSV grid");
  ReceptiveFieldOptions ro;
  std::size_t rlayers = 1;
  std::uint64_t rseed = 1;
  rf->add_option("--layers", rlayers, "number of funnel layers");
  rf->add_option("--k", ro.k, "window size (odd)");
  rf->add_option("--size", ro.size, "image side (default 1+2*n*(k-1)+4)");
  rf->add_option("--draws", ro.draws, "random parameter/input draws");
  rf->add_flag("--worst-case", ro.worst_case, "all-positive windows and inputs");
  rf->add_option("--seed", rseed, "draw seed");

  auto* ex = app.add_subcommand("export-synth", "write the synthetic layout dataset as IDX files");
  std::size_t n = 8000, size = 32;
  std::optional<std::size_t> test_n;
  std::uint64_t data_seed = 7;
  std::string out_dir;
  ex->add_option("--n", n, "training images");
  ex->add_option("--test-n", test_n, "test images (default n/4)");
  ex->add_option("--size", size, "image side");
  ex->add_option("--seed", data_seed, "data seed");
  ex->add_option("--out", out_dir, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*gc) return run_gradcheck(op, window, norm, groups, seed, tol);
    if (*cnt) return run_count(model, input, csv, flops_decimals);
    if (*tr) return run_train(train_flags, history, checkpoint, resume);
    if (*ev) return run_eval(eval_flags, eval_ckpt, split);
    if (*ab) return run_ablate(ablate_flags, suite, seeds, ablate_out);
    if (*af) return run_afield(layers, k, table);
    if (*rf) return run_rfield(rlayers, ro, rseed);
    if (*ex) return run_export(n, test_n, size, data_seed, out_dir);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.kind() == ErrorKind::Config ? kUsage : kCheckFailed;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kCheckFailed;
  }
  return kUsage;
}
