#pragma once

// Desk-scale training: SGD with momentum and weight decay, a linear-decay
// schedule, softmax cross-entropy, checkpoints and evaluation.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "fnk/complexity.hpp"
#include "fnk/data.hpp"
#include "fnk/network.hpp"

namespace fnk {

enum class Schedule { Constant, LinearDecay };

inline const char* to_string(Schedule s) { return s == Schedule::Constant ? "constant" : "linear_decay"; }

/// Everything a run depends on. Rendered as `key=value` lines, the same
/// format the config parser reads, so a printed config can be re-run.
struct TrainConfig {
  std::string model = "toy-cnn-relu";  // builtin name or model file path
  std::string dataset = "synth";       // synth | idx
  std::string data_dir;                // idx: directory with MNIST-style file names
  std::size_t train_size = 8000;       // synth only
  std::size_t test_size = 2000;        // synth only
  std::size_t image_size = 32;         // synth only
  std::uint64_t data_seed = 7;
  double lr = 0.1;
  Schedule schedule = Schedule::LinearDecay;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  bool decay_activations = false;
  std::size_t batch_size = 32;
  std::size_t iterations = 500;
  std::uint64_t seed = 1;
  std::size_t eval_every = 100;
  std::size_t eval_batch = 250;

  bool operator==(const TrainConfig&) const = default;

  void validate() const {
    if (!(lr > 0.0)) throw Error(ErrorKind::Config, "lr must be > 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw Error(ErrorKind::Config, "momentum must be in [0, 1)");
    if (!(weight_decay >= 0.0)) throw Error(ErrorKind::Config, "weight_decay must be >= 0");
    if (batch_size == 0 || eval_batch == 0) throw Error(ErrorKind::Config, "batch sizes must be >= 1");
    if (dataset != "synth" && dataset != "idx") throw Error(ErrorKind::Config, "dataset must be synth or idx");
    if (dataset == "idx" && data_dir.empty()) throw Error(ErrorKind::Config, "dataset=idx needs data_dir");
  }
};

inline void write_config(std::ostream& os, const TrainConfig& c) {
  os << "model=" << c.model << "\n"
     << "dataset=" << c.dataset << "\n"
     << "data_dir=" << c.data_dir << "\n"
     << "train_size=" << c.train_size << "\n"
     << "test_size=" << c.test_size << "\n"
     << "image_size=" << c.image_size << "\n"
     << "data_seed=" << c.data_seed << "\n"
     << "lr=" << detail::format_real(c.lr) << "\n"
     << "schedule=" << to_string(c.schedule) << "\n"
     << "momentum=" << detail::format_real(c.momentum) << "\n"
     << "weight_decay=" << detail::format_real(c.weight_decay) << "\n"
     << "decay_activations=" << (c.decay_activations ? 1 : 0) << "\n"
     << "batch_size=" << c.batch_size << "\n"
     << "iterations=" << c.iterations << "\n"
     << "seed=" << c.seed << "\n"
     << "eval_every=" << c.eval_every << "\n"
     << "eval_batch=" << c.eval_batch << "\n";
}

inline std::string to_text(const TrainConfig& c) {
  std::ostringstream os;
  write_config(os, c);
  return os.str();
}

/// Applies one `key=value` assignment; unknown keys and bad values throw Config.
inline void set_config_value(TrainConfig& c, const std::string& key, const std::string& value) {
  auto bad = [&](const char* what) {
    return Error(ErrorKind::Config, "config key '" + key + "' expects " + what + ", got '" + value + "'");
  };
  auto count = [&]() -> std::uint64_t {
    std::uint64_t v = 0;
    const auto r = std::from_chars(value.data(), value.data() + value.size(), v);
    if (r.ec != std::errc() || r.ptr != value.data() + value.size()) throw bad("a non-negative integer");
    return v;
  };
  auto real = [&]() {
    try {
      std::size_t idx = 0;
      const double v = std::stod(value, &idx);
      if (idx == value.size()) return v;
    } catch (const std::exception&) {
    }
    throw bad("a number");
  };
  auto flag = [&]() {
    if (value == "1" || value == "true") return true;
    if (value == "0" || value == "false") return false;
    throw bad("0 or 1");
  };
  if (key == "model") c.model = value;
  else if (key == "dataset") c.dataset = value;
  else if (key == "data_dir") c.data_dir = value;
  else if (key == "train_size") c.train_size = count();
  else if (key == "test_size") c.test_size = count();
  else if (key == "image_size") c.image_size = count();
  else if (key == "data_seed") c.data_seed = count();
  else if (key == "lr") c.lr = real();
  else if (key == "schedule") {
    if (value == "constant") c.schedule = Schedule::Constant;
    else if (value == "linear_decay") c.schedule = Schedule::LinearDecay;
    else throw bad("constant or linear_decay");
  } else if (key == "momentum") c.momentum = real();
  else if (key == "weight_decay") c.weight_decay = real();
  else if (key == "decay_activations") c.decay_activations = flag();
  else if (key == "batch_size") c.batch_size = count();
  else if (key == "iterations") c.iterations = count();
  else if (key == "seed") c.seed = count();
  else if (key == "eval_every") c.eval_every = count();
  else if (key == "eval_batch") c.eval_batch = count();
  else throw Error(ErrorKind::Config, "unknown config key '" + key + "'");
}

/// Reads `key=value` lines over the defaults; `#` starts a comment.
inline TrainConfig parse_config(std::istream& is, TrainConfig c = {}) {
  std::string line;
  for (std::size_t lineno = 1; std::getline(is, line); ++lineno) {
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    const auto last = line.find_last_not_of(" \t\r");
    line = line.substr(first, last - first + 1);
    const auto eq = line.find('=');
    if (eq == std::string::npos || eq == 0)
      throw Error(ErrorKind::Config, "config line " + std::to_string(lineno) + ": expected key=value");
    set_config_value(c, line.substr(0, eq), line.substr(eq + 1));
  }
  return c;
}

inline TrainConfig parse_config(const std::string& text, TrainConfig c = {}) {
  std::istringstream is(text);
  return parse_config(is, std::move(c));
}

inline TrainConfig load_config(const std::string& path, TrainConfig c = {}) {
  std::ifstream is(path);
  if (!is) throw Error(ErrorKind::Config, "cannot open config " + path);
  return parse_config(is, std::move(c));
}

/// Builtin name, or a path to a model description file.
inline ModelSpec resolve_model(const std::string& name_or_path) {
  if (auto m = builtin_model(name_or_path)) return *m;
  std::ifstream is(name_or_path);
  if (!is) throw Error(ErrorKind::Config, "unknown model '" + name_or_path + "' (not a builtin or readable file)");
  return parse_model(is, name_or_path);
}

struct DataSplits {
  Dataset train;
  Dataset test;
};

/// Synthetic splits come from one stream seeded by data_seed; IDX splits use
/// the MNIST file names inside data_dir.
inline DataSplits load_data(const TrainConfig& c) {
  if (c.dataset == "idx") {
    const std::filesystem::path dir(c.data_dir);
    return {load_idx((dir / "train-images-idx3-ubyte").string(), (dir / "train-labels-idx1-ubyte").string()),
            load_idx((dir / "t10k-images-idx3-ubyte").string(), (dir / "t10k-labels-idx1-ubyte").string())};
  }
  Rng rng(c.data_seed);
  Dataset train = synth_layouts(c.train_size, c.image_size, rng);
  Dataset test = synth_layouts(c.test_size, c.image_size, rng);
  return {std::move(train), std::move(test)};
}

// ---------------------------------------------------------------------------
// Optimizer

inline double learning_rate(const TrainConfig& c, std::size_t iteration) {
  if (c.schedule == Schedule::Constant || c.iterations == 0) return c.lr;
  return c.lr * (1.0 - static_cast<double>(iteration) / static_cast<double>(c.iterations));
}

/// buf = momentum*buf + grad + wd*param (wd only where decay is set);
/// param -= lr*buf.
inline void sgd_step(const std::vector<ParamRef>& params, std::vector<Tensor>& bufs, double lr, double momentum,
                     double weight_decay) {
  if (bufs.size() != params.size())
    throw Error(ErrorKind::ShapeMismatch, "sgd: " + std::to_string(bufs.size()) + " momentum buffers for " +
                                              std::to_string(params.size()) + " parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i].value;
    const Tensor& g = *params[i].grad;
    Tensor& b = bufs[i];
    require_same_shape(p, g, "sgd grad");
    require_same_shape(p, b, "sgd momentum");
    const double wd = params[i].decay ? weight_decay : 0.0;
    for (std::size_t k = 0; k < p.size(); ++k) {
      b[k] = momentum * b[k] + g[k] + wd * p[k];
      p[k] -= lr * b[k];
    }
  }
}

// ---------------------------------------------------------------------------
// Training state and checkpoints

/// Model, optimizer state and the sampling stream; enough to resume bitwise.
struct TrainState {
  ModelSpec spec;
  Network net;
  std::vector<Tensor> momentum;
  std::uint64_t iteration = 0;
  Rng rng{0};

  static TrainState fresh(const ModelSpec& spec, std::uint64_t seed) {
    Rng init(seed);
    TrainState s{spec, Network::build(spec, init), {}, 0, Rng(seed ^ 0x5eed5eed5eed5eedULL)};
    for (const auto& p : s.net.parameters()) s.momentum.push_back(zeros_like(*p.value));
    return s;
  }
};

// Checkpoint layout (little-endian):
//   "FNKC" u32 version
//   string model_text  (u32 length + bytes)
//   u64 iteration
//   u64 rng[4]  u8 has_spare  f64 spare
//   u32 section_count, then per section:
//     string name, u32 tensor_count, then per tensor: string name, FNK1 tensor
// Sections: "params", "momentum", "buffers".
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_string(std::ostream& os, const std::string& s) {
  put_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& is, const char* what) {
  const std::uint32_t n = get_u32(is, what);
  if (n > (1u << 28)) throw Error(ErrorKind::Format, std::string("implausible string length in ") + what);
  std::string s(n, '\0');
  read_exact(is, reinterpret_cast<unsigned char*>(s.data()), n, what);
  return s;
}

inline void put_section(std::ostream& os, const std::string& name,
                        const std::vector<std::pair<std::string, const Tensor*>>& tensors) {
  put_string(os, name);
  put_u32(os, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [n, t] : tensors) {
    put_string(os, n);
    write_tensor(os, *t);
  }
}

}  // namespace detail

inline void write_checkpoint(std::ostream& os, TrainState& s) {
  os.write("FNKC", 4);
  detail::put_u32(os, kCheckpointVersion);
  detail::put_string(os, to_text(s.spec));
  detail::put_u64(os, s.iteration);
  const auto& st = s.rng.state();
  for (auto w : st.s) detail::put_u64(os, w);
  os.put(st.has_spare ? 1 : 0);
  detail::put_u64(os, std::bit_cast<std::uint64_t>(st.spare));
  const auto params = s.net.parameters();
  const auto buffers = s.net.buffers();
  std::vector<std::pair<std::string, const Tensor*>> p, m, b;
  for (std::size_t i = 0; i < params.size(); ++i) {
    p.emplace_back(params[i].name, params[i].value);
    m.emplace_back(params[i].name, &s.momentum[i]);
  }
  for (const auto& r : buffers) b.emplace_back(r.name, r.value);
  detail::put_u32(os, 3);
  detail::put_section(os, "params", p);
  detail::put_section(os, "momentum", m);
  detail::put_section(os, "buffers", b);
}

/// Rebuilds the network from the embedded description, then restores every
/// tensor by name and checks shapes.
inline TrainState read_checkpoint(std::istream& is) {
  unsigned char magic[4];
  detail::read_exact(is, magic, 4, "checkpoint magic");
  if (std::memcmp(magic, "FNKC", 4) != 0) throw Error(ErrorKind::Format, "bad checkpoint magic (expected FNKC)");
  const std::uint32_t version = detail::get_u32(is, "checkpoint version");
  if (version != kCheckpointVersion)
    throw Error(ErrorKind::Format, "unsupported checkpoint version " + std::to_string(version));
  const ModelSpec spec = parse_model(detail::get_string(is, "model description"));
  TrainState s = TrainState::fresh(spec, 0);
  s.iteration = detail::get_u64(is, "iteration");
  Rng::State st;
  for (auto& w : st.s) w = detail::get_u64(is, "rng state");
  unsigned char spare_flag = 0;
  detail::read_exact(is, &spare_flag, 1, "rng state");
  st.has_spare = spare_flag != 0;
  st.spare = std::bit_cast<double>(detail::get_u64(is, "rng state"));
  s.rng = Rng::from_state(st);

  std::map<std::string, Tensor*> targets[3];
  const auto params = s.net.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    targets[0][params[i].name] = params[i].value;
    targets[1][params[i].name] = &s.momentum[i];
  }
  for (const auto& b : s.net.buffers()) targets[2][b.name] = b.value;
  const char* section_names[3] = {"params", "momentum", "buffers"};

  const std::uint32_t sections = detail::get_u32(is, "section count");
  std::size_t restored[3] = {0, 0, 0};
  for (std::uint32_t k = 0; k < sections; ++k) {
    const std::string name = detail::get_string(is, "section name");
    int idx = -1;
    for (int j = 0; j < 3; ++j)
      if (name == section_names[j]) idx = j;
    if (idx < 0) throw Error(ErrorKind::Format, "unknown checkpoint section '" + name + "'");
    const std::uint32_t count = detail::get_u32(is, "tensor count");
    for (std::uint32_t t = 0; t < count; ++t) {
      const std::string tname = detail::get_string(is, "tensor name");
      Tensor value = read_tensor(is);
      auto it = targets[idx].find(tname);
      if (it == targets[idx].end())
        throw Error(ErrorKind::Format, "checkpoint tensor '" + name + "/" + tname + "' does not exist in the model");
      if (it->second->shape() != value.shape())
        throw Error(ErrorKind::Format, "checkpoint tensor '" + name + "/" + tname + "' has shape " +
                                           value.shape().to_string() + ", model expects " +
                                           it->second->shape().to_string());
      *it->second = std::move(value);
      ++restored[idx];
    }
  }
  for (int j = 0; j < 3; ++j)
    if (restored[j] != targets[j].size())
      throw Error(ErrorKind::Format, std::string("checkpoint section '") + section_names[j] + "' is incomplete");
  return s;
}

/// Writes to `<path>.tmp` and renames over `path`, so readers never see a
/// partial file.
inline void save_checkpoint(const std::string& path, TrainState& s) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw Error(ErrorKind::Format, "cannot open " + tmp + " for writing");
    write_checkpoint(os, s);
    os.flush();
    if (!os) throw Error(ErrorKind::Format, "failed writing " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline TrainState load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorKind::Format, "cannot open checkpoint " + path);
  return read_checkpoint(is);
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalResult {
  double accuracy = 0.0;
  double loss = 0.0;
  std::vector<double> per_class;  // accuracy per true class (0 if absent)
  std::vector<std::size_t> class_counts;
};

/// Eval-mode top-1 accuracy over the whole dataset.
inline EvalResult evaluate(Network& net, const Dataset& d, std::size_t batch = 250) {
  const auto& layers = net.spec().layers;
  const std::size_t outputs = layers.empty() ? 0 : layers.back().c_out;
  if (layers.empty() || layers.back().kind != LayerKind::Linear || outputs < d.num_classes)
    throw Error(ErrorKind::Config, "model has " + std::to_string(outputs) + " outputs but the dataset has " +
                                       std::to_string(d.num_classes) + " classes");
  EvalResult r;
  r.per_class.assign(d.num_classes, 0.0);
  r.class_counts.assign(d.num_classes, 0);
  std::size_t correct = 0;
  for (std::size_t start = 0; start < d.size(); start += batch) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(d.size(), start + batch); ++i) idx.push_back(i);
    const auto labels = d.batch_labels(idx);
    const Tensor logits = net.forward(d.batch(idx), Mode::Eval);
    const auto l = softmax_cross_entropy(logits, labels);
    r.loss += l.loss * static_cast<double>(idx.size());
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const auto y = static_cast<std::size_t>(labels[b]);
      ++r.class_counts[y];
      if (argmax_class(logits, b) == y) {
        ++correct;
        r.per_class[y] += 1.0;
      }
    }
  }
  net.clear_cache();
  for (std::size_t c = 0; c < d.num_classes; ++c)
    if (r.class_counts[c] > 0) r.per_class[c] /= static_cast<double>(r.class_counts[c]);
  r.accuracy = static_cast<double>(correct) / static_cast<double>(d.size());
  r.loss /= static_cast<double>(d.size());
  return r;
}

// ---------------------------------------------------------------------------
// Training loop

struct HistoryRow {
  std::size_t iter = 0;
  double loss = 0.0;  // mean training loss since the previous row (eval loss at iteration 0)
  double acc = 0.0;   // test accuracy at this iteration
  bool operator==(const HistoryRow&) const = default;
};

inline void write_history_csv(std::ostream& os, const std::vector<HistoryRow>& h) {
  os << "iter,loss,acc\n";
  for (const auto& r : h) os << r.iter << "," << detail::format_real(r.loss) << "," << detail::format_real(r.acc) << "\n";
}

struct TrainHooks {
  std::string checkpoint_path;  // written at every eval point and at the end
  std::function<void(const HistoryRow&)> on_eval;
};

/// Runs from s.iteration up to cfg.iterations. Batches are drawn uniformly
/// with replacement from s.rng, so the stream position is the only sampling
/// state. A non-finite loss throws a Numeric error naming the last good
/// checkpoint iteration.
inline std::vector<HistoryRow> train(TrainState& s, const TrainConfig& cfg, const DataSplits& data,
                                     const TrainHooks& hooks = {}) {
  cfg.validate();
  std::vector<HistoryRow> history;
  std::uint64_t last_saved = s.iteration;
  double loss_sum = 0.0;
  std::size_t loss_count = 0;
  auto eval_point = [&](std::size_t iter) {
    const auto ev = evaluate(s.net, data.test, cfg.eval_batch);
    // Before any step there is no training loss; the eval loss stands in.
    HistoryRow row{iter, loss_count ? loss_sum / static_cast<double>(loss_count) : ev.loss, ev.accuracy};
    history.push_back(row);
    loss_sum = 0.0;
    loss_count = 0;
    if (hooks.on_eval) hooks.on_eval(row);
    if (!hooks.checkpoint_path.empty()) {
      save_checkpoint(hooks.checkpoint_path, s);
      last_saved = s.iteration;
    }
  };
  if (s.iteration == 0 && cfg.eval_every > 0) eval_point(0);
  while (s.iteration < cfg.iterations) {
    std::vector<std::size_t> idx(cfg.batch_size);
    for (auto& i : idx) i = static_cast<std::size_t>(s.rng.below(data.train.size()));
    s.net.zero_grad();
    const Tensor logits = s.net.forward(data.train.batch(idx), Mode::Train);
    const auto l = softmax_cross_entropy(logits, data.train.batch_labels(idx));
    if (!std::isfinite(l.loss))
      throw Error(ErrorKind::Numeric, "training diverged at iteration " + std::to_string(s.iteration) +
                                          "; last good checkpoint is from iteration " + std::to_string(last_saved));
    s.net.backward(l.grad);
    s.net.clear_cache();
    sgd_step(s.net.parameters(cfg.decay_activations), s.momentum, learning_rate(cfg, s.iteration), cfg.momentum,
             cfg.weight_decay);
    loss_sum += l.loss;
    ++loss_count;
    ++s.iteration;
    if ((cfg.eval_every > 0 && s.iteration % cfg.eval_every == 0) || s.iteration == cfg.iterations)
      eval_point(s.iteration);
  }
  return history;
}

}  // namespace fnk
