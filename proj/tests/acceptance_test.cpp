// Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fail.
// Criteria 1 and 6 also drive the CLI binary (path from FNK_CLI).

#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "fnk/ablation.hpp"
#include "fnk/analysis.hpp"
#include "fnk/gradcheck_ops.hpp"
#include "fnk/train.hpp"

using namespace fnk;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool ok = true;
  std::vector<std::string> notes;

  void expect(bool cond, const std::string& what) {
    if (!cond) {
      ok = false;
      notes.push_back(what);
    }
  }
};

struct Command {
  int status = -1;
  std::string out;
};

Command run_cli(const std::string& args) {
  Command c;
  const std::string cmd = std::string(FNK_CLI) + " " + args + " 2>/dev/null";
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return c;
  std::array<char, 4096> buf{};
  std::size_t n = 0;
  while ((n = std::fread(buf.data(), 1, buf.size(), p)) > 0) c.out.append(buf.data(), n);
  const int raw = pclose(p);
  c.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  return c;
}

std::string first_line(const std::string& s) { return s.substr(0, s.find('\n')); }

// Splits one CSV line, honoring double quotes.
std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out(1);
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        out.back() += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        out.back() += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.emplace_back();
    } else {
      out.back() += c;
    }
  }
  return out;
}

double round_to(double v, double step) { return std::round(v / step) * step; }

// ---------------------------------------------------------------------------

Outcome complexity_reproduction() {
  Outcome o;
  const auto t0 = Clock::now();
  struct Row {
    const char* model;
    double params_m;
    double flops_g;
    double flops_step;
  };
  for (const Row& r : {Row{"resnet50-relu", 25.5, 3.86, 0.01}, Row{"resnet50-frelu", 25.5, 3.87, 0.01},
                       Row{"resnet101-relu", 44.4, 7.6, 0.1}}) {
    const auto c = complexity(*builtin_model(r.model));
    o.expect(std::abs(round_to(c.params / 1e6, 0.1) - r.params_m) < 1e-9, std::string(r.model) + " params");
    o.expect(std::abs(round_to(c.flops / 1e9, r.flops_step) - r.flops_g) < 1e-9, std::string(r.model) + " flops");
  }
  const double lib_seconds = seconds_since(t0);
  o.expect(lib_seconds < 1.0, "counting took " + std::to_string(lib_seconds) + " s");

  const auto relu = run_cli("count --model resnet50-relu --input 3x224x224");
  o.expect(relu.status == 0 && first_line(relu.out) == "params=25.5M flops=3.86G", "cli: " + first_line(relu.out));
  const auto frelu = run_cli("count --model resnet50-frelu --input 3x224x224");
  o.expect(frelu.status == 0 && first_line(frelu.out) == "params=25.5M flops=3.87G", "cli: " + first_line(frelu.out));
  const auto r101 = run_cli("count --model resnet101-relu --input 3x224x224 --flops-decimals 1");
  o.expect(r101.status == 0 && first_line(r101.out) == "params=44.4M flops=7.6G", "cli: " + first_line(r101.out));
  return o;
}

Outcome gradient_suite() {
  Outcome o;
  const auto t0 = Clock::now();
  struct Op {
    std::string name;
    NormKind norm = NormKind::BatchNorm;
    std::size_t window = 3;
  };
  const std::vector<Op> ops = {
      {"relu"},     {"prelu"},    {"swish"},    {"dwconv"},
      {"norm", NormKind::BatchNorm}, {"norm", NormKind::LayerNorm}, {"norm", NormKind::InstanceNorm},
      {"norm", NormKind::GroupNorm}, {"frelu"},  {"frelu-sum"}, {"dwrelu"}, {"pair-sum"}, {"pair-max"}};
  const std::vector<Shape> shapes = {{2, 2, 5, 5}, {3, 4, 4, 6}, {2, 6, 3, 5}};
  double worst = 0.0;
  std::size_t seed = 1;
  for (const auto& op : ops)
    for (const auto& s : shapes) {
      GradCheckCaseOptions co;
      co.norm = op.norm;
      co.window = op.window;
      co.groups = 2;
      co.shape = s;
      co.seed = seed++;
      const auto c = make_gradcheck_case(op.name, co);
      GradCheckOptions go;
      go.seed = co.seed;
      const auto r = check(c.problem, c.input, c.params, go);
      worst = std::max(worst, r.max_rel_error);
      o.expect(r.passed, op.name + "/" + to_string(op.norm) + " " + s.to_string() +
                             " rel=" + detail::format_real(r.max_rel_error));
    }
  std::ostringstream worst_note;
  worst_note << "worst_rel_error=" << worst;
  o.notes.push_back(worst_note.str());
  const double secs = seconds_since(t0);
  o.expect(secs < 120.0, "took " + std::to_string(secs) + " s");
  return o;
}

Outcome degeneracies() {
  Outcome o;
  const auto t0 = Clock::now();
  Rng rng(2024);
  const Shape s{4, 25, 10, 10};  // 10^4 values
  const Tensor x = gaussian(s, 0.0, 1.0, rng);

  FunnelConfig zero;
  zero.norm = NormKind::None;
  FunnelParams zp = make_funnel_params(zero, s.c, rng);
  zp.branches[0].conv.weights.fill(0.0);
  o.expect(frelu_forward(x, zero, zp).values() == relu_forward(x).values(), "zero-window funnel differs from relu");

  FunnelConfig one;
  one.k = 1;
  one.norm = NormKind::None;
  FunnelParams op = make_funnel_params(one, s.c, rng);
  const Tensor slope = uniform(Shape{1, s.c, 1, 1}, 0.0, 1.0, rng);
  for (std::size_t c = 0; c < s.c; ++c) op.branches[0].conv.weights.at(0, c, 0, 0) = slope[c];
  o.expect(frelu_forward(x, one, op).values() == prelu_forward(x, slope).values(), "1x1 funnel differs from prelu");
  const double secs = seconds_since(t0);
  o.expect(secs < 10.0, "took " + std::to_string(secs) + " s");
  return o;
}

// Extents reachable after n layers: every layer either keeps the interval
// (identity wins) or widens it by the window radius on both sides.
std::set<std::size_t> brute_force_field(std::size_t n, std::size_t k) {
  std::set<std::size_t> out;
  const long long half = static_cast<long long>(k / 2);
  for (std::size_t mask = 0; mask < (std::size_t{1} << n); ++mask) {
    long long lo = 0, hi = 0;
    for (std::size_t l = 0; l < n; ++l)
      if (mask >> l & 1) {
        lo -= half;
        hi += half;
      }
    out.insert(static_cast<std::size_t>(hi - lo + 1));
  }
  return out;
}

Outcome activate_field_law() {
  Outcome o;
  const auto t0 = Clock::now();
  for (std::size_t k : {1, 3, 5, 7})
    for (std::size_t n = 0; n <= 10; ++n) {
      const auto got = activate_field(n, k).sizes;
      const auto want = brute_force_field(n, k);
      o.expect(std::vector<std::size_t>(want.begin(), want.end()) == got,
               "afield n=" + std::to_string(n) + " k=" + std::to_string(k));
    }
  Rng rng(77);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng.below(4);
    ReceptiveFieldOptions ro;
    ro.draws = 1;
    ro.weight_scale = rng.uniform(0.1, 2.0);
    const auto m = empirical_receptive_field(n, rng, ro);
    o.expect(m.extent_h <= 1 + 2 * n && m.extent_w <= 1 + 2 * n, "trial " + std::to_string(trial) + " exceeds bound");
  }
  for (std::size_t n = 1; n <= 4; ++n) {
    ReceptiveFieldOptions ro;
    ro.draws = 1;
    ro.worst_case = true;
    const auto m = empirical_receptive_field(n, rng, ro);
    o.expect(m.extent_h == 1 + 2 * n && m.extent_w == 1 + 2 * n, "worst case n=" + std::to_string(n) + " not tight");
  }
  const auto cli = run_cli("afield --layers 3 --k 3");
  o.expect(cli.status == 0 && first_line(cli.out) == "1,3,5,7", "cli afield: " + first_line(cli.out));
  const double secs = seconds_since(t0);
  o.expect(secs < 60.0, "took " + std::to_string(secs) + " s");
  return o;
}

Outcome training_advantage() {
  Outcome o;
  const auto t0 = Clock::now();
  TrainConfig cfg;  // 8k/2k synthetic layouts, 32x32, 500 iterations
  cfg.eval_every = 0;
  const auto data = load_data(cfg);
  struct Arm {
    std::string name;
    ActivationChoice act;
    double mean = 0.0;
    std::vector<double> accs;
  };
  std::vector<Arm> arms = {{"relu", {ActivationKind::ReLU, {}}, 0.0, {}},
                           {"prelu", {ActivationKind::PReLU, {}}, 0.0, {}},
                           {"frelu3x3", frelu_choice(3), 0.0, {}},
                           {"window1x1", prelu_equivalent_choice(), 0.0, {}}};
  const std::size_t seeds = 5;
  for (auto& arm : arms) {
    const ModelSpec m = toy_cnn("toy-cnn-" + arm.name, arm.act);
    for (std::size_t s = 1; s <= seeds; ++s) {
      cfg.seed = s;
      auto st = TrainState::fresh(m, s);
      const auto h = train(st, cfg, data);
      arm.accs.push_back(h.back().acc);
      arm.mean += h.back().acc / static_cast<double>(seeds);
    }
    std::ostringstream note;
    note << arm.name << " mean=" << arm.mean << " runs=";
    for (double a : arm.accs) note << a << " ";
    o.notes.push_back(note.str());
  }
  const double relu = arms[0].mean, prelu = arms[1].mean, frelu = arms[2].mean, w1 = arms[3].mean;
  o.expect(frelu >= relu + 0.02, "frelu does not beat relu by 2 points");
  o.expect(frelu >= prelu, "frelu below prelu");
  o.expect(frelu > w1, "3x3 window does not beat 1x1");
  o.expect(arms[3].accs == arms[1].accs, "1x1 window runs differ from prelu runs");
  const double secs = seconds_since(t0);
  o.notes.push_back("seconds=" + std::to_string(secs));
  o.expect(secs < 1800.0, "took " + std::to_string(secs) + " s");
  return o;
}

Outcome ablation_integrity() {
  Outcome o;
  const auto cli = run_cli(
      "ablate --suite condition --seeds 1 --iterations 20 --set train_size=200 --set test_size=100 "
      "--set batch_size=8");
  o.expect(cli.status == 0, "ablate exit " + std::to_string(cli.status));
  std::istringstream is(cli.out);
  std::string line;
  std::getline(is, line);
  o.expect(line == "suite,id,label,seed,accuracy,mean,sd,added_params", "header: " + line);
  const std::vector<std::pair<std::string, std::string>> want = {{"A", "Max(x, ParamPool(x))"},
                                                                 {"B", "Max(x, MaxPool(x))"},
                                                                 {"C", "Max(x, AvgPool(x))"},
                                                                 {"D", "Sum(x, ParamPool(x))"},
                                                                 {"E", "Max(DW(x), 0)"}};
  std::size_t rows = 0;
  for (; std::getline(is, line); ++rows) {
    const auto f = split_csv(line);
    if (f.size() != 8 || rows >= want.size()) {
      o.expect(false, "bad row: " + line);
      continue;
    }
    o.expect(f[1] == want[rows].first && f[2] == want[rows].second, "row " + std::to_string(rows) + ": " + line);
    try {
      const double acc = std::stod(f[4]);
      o.expect(acc >= 0.0 && acc <= 1.0, "accuracy out of range: " + f[4]);
    } catch (const std::exception&) {
      o.expect(false, "unparseable accuracy: " + f[4]);
    }
    if (f[1] == "B" || f[1] == "C") o.expect(f[7] == "0", f[1] + " adds parameters: " + f[7]);
  }
  o.expect(rows == want.size(), "rows=" + std::to_string(rows));

  const auto relu = toy_cnn("r", {ActivationKind::ReLU, {}});
  for (const auto& v : ablation_suite("condition")) {
    if (v.id != "B" && v.id != "C") continue;
    const auto m = toy_cnn("c", v.act);
    o.expect(count_params(m) == count_params(relu), v.id + " count_params differs from relu");
    o.expect(complexity(m).total_params() == complexity(relu).total_params(), v.id + " total params differ");
  }
  return o;
}

Outcome determinism_and_persistence() {
  Outcome o;
  TrainConfig cfg;
  cfg.train_size = 400;
  cfg.test_size = 200;
  cfg.iterations = 40;
  cfg.eval_every = 10;
  cfg.batch_size = 16;
  const auto data = load_data(cfg);
  const ModelSpec m = *builtin_model("toy-cnn-frelu");
  auto snapshot = [](TrainState& s) {
    std::ostringstream os;
    write_checkpoint(os, s);
    return os.str();
  };

  auto a = TrainState::fresh(m, 11), b = TrainState::fresh(m, 11);
  const auto ha = train(a, cfg, data), hb = train(b, cfg, data);
  o.expect(ha == hb, "histories differ");
  o.expect(snapshot(a) == snapshot(b), "final states differ");

  const auto dir = std::filesystem::temp_directory_path() / "fnk_acceptance";
  std::filesystem::create_directories(dir);
  const auto ckpt = (dir / "resume.ckpt").string();
  auto c = TrainState::fresh(m, 11);
  TrainHooks hooks;
  hooks.checkpoint_path = ckpt;
  hooks.on_eval = [](const HistoryRow& r) {
    if (r.iter == 20) throw std::runtime_error("interrupt");
  };
  try {
    train(c, cfg, data, hooks);
    o.expect(false, "interrupt did not fire");
  } catch (const std::runtime_error&) {
  }
  auto resumed = load_checkpoint(ckpt);
  o.expect(resumed.iteration == 10, "checkpoint at iteration " + std::to_string(resumed.iteration));
  const auto hr = train(resumed, cfg, data);
  o.expect(snapshot(resumed) == snapshot(a), "resumed run differs from uninterrupted run");
  o.expect(!hr.empty() && hr.back() == ha.back(), "resumed history tail differs");

  Rng rng(5);
  const Dataset d = synth_layouts(300, 28, rng);
  const auto img = (dir / "images-idx3-ubyte").string(), lab = (dir / "labels-idx1-ubyte").string();
  save_idx(d, img, lab);
  const Dataset back = load_idx(img, lab);
  o.expect(back.labels == d.labels && back.images.values() == d.images.values(), "IDX round trip lossy");
  std::filesystem::remove_all(dir);
  return o;
}

}  // namespace

int main() {
  struct Criterion {
    const char* name;
    Outcome (*run)();
  };
  const Criterion criteria[] = {
      {"1 complexity reproduction", complexity_reproduction},
      {"2 gradient suite", gradient_suite},
      {"3 degeneracy equivalences", degeneracies},
      {"4 activate-field law", activate_field_law},
      {"5 desk-scale training advantage", training_advantage},
      {"6 ablation harness integrity", ablation_integrity},
      {"7 determinism and persistence", determinism_and_persistence},
  };
  bool all = true;
  for (const auto& c : criteria) {
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o.ok = false;
      o.notes.push_back(std::string("exception: ") + e.what());
    }
    all = all && o.ok;
    std::cout << (o.ok ? "PASS" : "FAIL") << " criterion " << c.name << " (" << seconds_since(t0) << " s)\n";
    for (const auto& n : o.notes) std::cout << "    " << n << "\n";
    std::cout.flush();
  }
  return all ? 0 : 1;
}
