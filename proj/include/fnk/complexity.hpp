#pragma once

// Model descriptions plus exact parameter and FLOP counters.
//
// FLOPs follow the multiply-accumulate convention: a k x k convolution from
// C_in to C_out channels producing an H x W map costs C_in*C_out*k*k*H*W.
// Headline params count convolution, window, slope and linear weights; the
// affine coefficients of normalization layers are reported separately as
// norm_params so both conventions can be read off one report.
//
// Text format, one layer per line (blank lines and `#` comments ignored):
//
//   input c=3 h=224 w=224
//   <name> conv in=<c> out=<c> k=<k> [kh= kw=] [stride=1] [pad=0] [bias=0]
//   <name> dwconv c=<c> k=<k> [kh= kw=]
//   <name> norm kind=bn|ln|in|gn|none c=<c> [groups=1] [affine=1]
//   <name> act kind=relu|prelu|swish|frelu|dwrelu c=<c> [funnel keys]
//   <name> pool kind=max|avg|global [k=3] [stride=1] [pad=0]
//   <name> linear in=<n> out=<n>
//   <name> block       opens a residual scope, remembering its input
//   <name> shortcut    layers after this act on the scope input (none: identity)
//   <name> end         adds the main and shortcut paths
//
// Funnel keys: window=<odd k>|pair fusion=max|sum combine=max|sum
// cond=param|maxpool|avgpool norm=<norm kind> groups=<g> affine=0|1
// shared_norm=0|1 init_std=<real> init_mean=<real>.

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "fnk/activations.hpp"
#include "fnk/error.hpp"

namespace fnk {

enum class LayerKind { Conv, DWConv, Norm, Act, Pool, Linear, Block, Shortcut, End };
enum class PoolKind { Max, Avg, Global };

inline const char* to_string(LayerKind k) {
  switch (k) {
    case LayerKind::Conv: return "conv";
    case LayerKind::DWConv: return "dwconv";
    case LayerKind::Norm: return "norm";
    case LayerKind::Act: return "act";
    case LayerKind::Pool: return "pool";
    case LayerKind::Linear: return "linear";
    case LayerKind::Block: return "block";
    case LayerKind::Shortcut: return "shortcut";
    case LayerKind::End: return "end";
  }
  return "conv";
}

inline const char* to_string(PoolKind k) {
  switch (k) {
    case PoolKind::Max: return "max";
    case PoolKind::Avg: return "avg";
    case PoolKind::Global: return "global";
  }
  return "max";
}

inline ActivationKind parse_activation_kind(const std::string& s) {
  for (auto k : {ActivationKind::ReLU, ActivationKind::PReLU, ActivationKind::Swish, ActivationKind::FReLU,
                 ActivationKind::DWThenReLU})
    if (s == to_string(k)) return k;
  throw Error(ErrorKind::Config, "unknown activation kind '" + s + "'");
}

struct LayerSpec {
  std::string name;
  LayerKind kind = LayerKind::Conv;
  std::size_t c_in = 0;   // conv, linear `in`
  std::size_t c_out = 0;  // conv, linear `out`
  std::size_t channels = 0;  // dwconv, norm, act
  std::size_t kh = 1, kw = 1;
  std::size_t stride = 1;
  std::size_t pad = 0;
  bool bias = false;
  NormKind norm = NormKind::None;
  std::size_t groups = 1;
  bool affine = true;
  ActivationKind act = ActivationKind::ReLU;
  FunnelConfig funnel{};
  PoolKind pool = PoolKind::Max;

  bool operator==(const LayerSpec&) const = default;

  static LayerSpec conv(std::string name, std::size_t in, std::size_t out, std::size_t k, std::size_t stride = 1,
                        std::size_t pad = 0, bool bias = false) {
    LayerSpec l{.name = std::move(name), .kind = LayerKind::Conv, .c_in = in, .c_out = out};
    l.kh = l.kw = k;
    l.stride = stride;
    l.pad = pad;
    l.bias = bias;
    return l;
  }
  static LayerSpec dwconv(std::string name, std::size_t c, std::size_t kh, std::size_t kw) {
    LayerSpec l{.name = std::move(name), .kind = LayerKind::DWConv, .channels = c};
    l.kh = kh;
    l.kw = kw;
    return l;
  }
  static LayerSpec norm_layer(std::string name, NormKind kind, std::size_t c, std::size_t groups = 1) {
    LayerSpec l{.name = std::move(name), .kind = LayerKind::Norm, .channels = c};
    l.norm = kind;
    l.groups = groups;
    return l;
  }
  static LayerSpec activation(std::string name, ActivationKind kind, std::size_t c, const FunnelConfig& cfg = {}) {
    LayerSpec l{.name = std::move(name), .kind = LayerKind::Act, .channels = c};
    l.act = kind;
    l.funnel = cfg;
    return l;
  }
  static LayerSpec pool_layer(std::string name, PoolKind kind, std::size_t k = 1, std::size_t stride = 1,
                              std::size_t pad = 0) {
    LayerSpec l{.name = std::move(name), .kind = LayerKind::Pool};
    l.pool = kind;
    l.kh = l.kw = k;
    l.stride = stride;
    l.pad = pad;
    return l;
  }
  static LayerSpec linear(std::string name, std::size_t in, std::size_t out) {
    return LayerSpec{.name = std::move(name), .kind = LayerKind::Linear, .c_in = in, .c_out = out};
  }
  static LayerSpec marker(std::string name, LayerKind kind) { return LayerSpec{.name = std::move(name), .kind = kind}; }

  bool is_funnel() const {
    return kind == LayerKind::Act && (act == ActivationKind::FReLU || act == ActivationKind::DWThenReLU);
  }
};

/// Input extent per sample.
struct InputShape {
  std::size_t c = 3, h = 224, w = 224;
  bool operator==(const InputShape&) const = default;
  std::string to_string() const {
    return std::to_string(c) + "x" + std::to_string(h) + "x" + std::to_string(w);
  }
};

struct ModelSpec {
  std::string name;
  InputShape input;
  std::vector<LayerSpec> layers;
  bool operator==(const ModelSpec&) const = default;
};

/// Parses `CxHxW`.
inline InputShape parse_input_shape(const std::string& s) {
  InputShape out;
  std::size_t* dst[3] = {&out.c, &out.h, &out.w};
  std::size_t pos = 0;
  for (int i = 0; i < 3; ++i) {
    const std::size_t end = i < 2 ? s.find('x', pos) : s.size();
    if (end == std::string::npos) throw Error(ErrorKind::Config, "input shape must look like CxHxW, got '" + s + "'");
    const auto r = std::from_chars(s.data() + pos, s.data() + end, *dst[i]);
    if (r.ec != std::errc() || r.ptr != s.data() + end || *dst[i] == 0)
      throw Error(ErrorKind::Config, "input shape must look like CxHxW, got '" + s + "'");
    pos = end + 1;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Text format

namespace detail {

class KeyValues {
 public:
  KeyValues(std::map<std::string, std::string> kv, std::string where) : kv_(std::move(kv)), where_(std::move(where)) {}

  bool has(const std::string& k) const { return kv_.count(k) != 0; }

  std::string str(const std::string& k, const std::string& fallback) {
    used_.push_back(k);
    auto it = kv_.find(k);
    return it == kv_.end() ? fallback : it->second;
  }
  std::string str(const std::string& k) {
    if (!has(k)) throw Error(ErrorKind::Format, where_ + ": missing key '" + k + "'");
    return str(k, "");
  }
  std::size_t count(const std::string& k, std::optional<std::size_t> fallback = std::nullopt) {
    if (!has(k)) {
      used_.push_back(k);
      if (!fallback) throw Error(ErrorKind::Format, where_ + ": missing key '" + k + "'");
      return *fallback;
    }
    const std::string v = str(k);
    std::size_t out = 0;
    const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
    if (r.ec != std::errc() || r.ptr != v.data() + v.size())
      throw Error(ErrorKind::Format, where_ + ": key '" + k + "' expects a non-negative integer, got '" + v + "'");
    return out;
  }
  bool flag(const std::string& k, bool fallback) {
    const std::string v = str(k, fallback ? "1" : "0");
    if (v == "1" || v == "true") return true;
    if (v == "0" || v == "false") return false;
    throw Error(ErrorKind::Format, where_ + ": key '" + k + "' expects 0 or 1, got '" + v + "'");
  }
  double real(const std::string& k, double fallback) {
    if (!has(k)) {
      used_.push_back(k);
      return fallback;
    }
    const std::string v = str(k);
    try {
      std::size_t idx = 0;
      const double d = std::stod(v, &idx);
      if (idx == v.size()) return d;
    } catch (const std::exception&) {
    }
    throw Error(ErrorKind::Format, where_ + ": key '" + k + "' expects a number, got '" + v + "'");
  }
  void reject_unused() const {
    for (const auto& [k, v] : kv_)
      if (std::find(used_.begin(), used_.end(), k) == used_.end())
        throw Error(ErrorKind::Format, where_ + ": unknown key '" + k + "'");
  }

 private:
  std::map<std::string, std::string> kv_;
  std::string where_;
  std::vector<std::string> used_;
};

inline void parse_window(KeyValues& kv, std::size_t& kh, std::size_t& kw, std::optional<std::size_t> fallback) {
  const std::size_t k = kv.count("k", fallback ? fallback : std::optional<std::size_t>(0));
  kh = kv.count("kh", k);
  kw = kv.count("kw", k);
}

inline FunnelConfig parse_funnel(KeyValues& kv) {
  FunnelConfig cfg;
  const std::string window = kv.str("window", "3");
  if (window == "pair") {
    cfg.window = WindowKind::Pair1x3_3x1;
  } else {
    cfg.window = WindowKind::Square;
    const auto r = std::from_chars(window.data(), window.data() + window.size(), cfg.k);
    if (r.ec != std::errc() || r.ptr != window.data() + window.size())
      throw Error(ErrorKind::Format, "window must be an odd integer or 'pair', got '" + window + "'");
  }
  const std::string fusion = kv.str("fusion", "max");
  if (fusion != "max" && fusion != "sum") throw Error(ErrorKind::Format, "fusion must be max or sum");
  cfg.fusion = fusion == "max" ? Fusion::Max : Fusion::Sum;
  const std::string combine = kv.str("combine", "max");
  if (combine != "max" && combine != "sum") throw Error(ErrorKind::Format, "combine must be max or sum");
  cfg.pair_combine = combine == "max" ? PairCombine::Max : PairCombine::Sum;
  const std::string cond = kv.str("cond", "param");
  if (cond == "param") cfg.condition = ConditionKind::Parametric;
  else if (cond == "maxpool") cfg.condition = ConditionKind::MaxPool;
  else if (cond == "avgpool") cfg.condition = ConditionKind::AvgPool;
  else throw Error(ErrorKind::Format, "cond must be param, maxpool or avgpool");
  cfg.norm = parse_norm_kind(kv.str("norm", "bn"));
  cfg.norm_groups = kv.count("groups", 1);
  cfg.norm_affine = kv.flag("affine", true);
  cfg.shared_pair_norm = kv.flag("shared_norm", false);
  cfg.init_std = kv.real("init_std", 0.1);
  cfg.init_mean = kv.real("init_mean", 0.0);
  return cfg;
}

inline std::string format_real(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace detail

/// Parses the text format; syntax errors throw a Format error naming the line.
inline ModelSpec parse_model(std::istream& is, std::string name = "") {
  ModelSpec m;
  m.name = std::move(name);
  bool have_input = false;
  std::string line;
  for (std::size_t lineno = 1; std::getline(is, line); ++lineno) {
    // A leading "# name" comment names an otherwise unnamed model, as to_text writes it.
    if (lineno == 1 && m.name.empty() && line.starts_with("# ")) {
      std::istringstream ns(line.substr(2));
      ns >> m.name;
    }
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    std::istringstream ls(line);
    std::vector<std::string> tokens;
    for (std::string t; ls >> t;) tokens.push_back(t);
    if (tokens.empty()) continue;
    const std::string where = "line " + std::to_string(lineno);
    std::map<std::string, std::string> kv;
    const std::size_t first_kv = tokens[0] == "input" ? 1 : 2;
    if (tokens.size() < first_kv) throw Error(ErrorKind::Format, where + ": expected '<name> <kind> key=value...'");
    for (std::size_t i = first_kv; i < tokens.size(); ++i) {
      const auto eq = tokens[i].find('=');
      if (eq == std::string::npos || eq == 0)
        throw Error(ErrorKind::Format, where + ": expected key=value, got '" + tokens[i] + "'");
      if (!kv.emplace(tokens[i].substr(0, eq), tokens[i].substr(eq + 1)).second)
        throw Error(ErrorKind::Format, where + ": duplicate key '" + tokens[i].substr(0, eq) + "'");
    }
    detail::KeyValues k(std::move(kv), where);
    if (tokens[0] == "input") {
      if (have_input || !m.layers.empty()) throw Error(ErrorKind::Format, where + ": 'input' must come first, once");
      m.input = InputShape{k.count("c"), k.count("h"), k.count("w")};
      have_input = true;
      k.reject_unused();
      continue;
    }
    LayerSpec l;
    l.name = tokens[0];
    const std::string& kind = tokens[1];
    if (kind == "conv") {
      l.kind = LayerKind::Conv;
      l.c_in = k.count("in");
      l.c_out = k.count("out");
      detail::parse_window(k, l.kh, l.kw, std::nullopt);
      l.stride = k.count("stride", 1);
      l.pad = k.count("pad", 0);
      l.bias = k.flag("bias", false);
    } else if (kind == "dwconv") {
      l.kind = LayerKind::DWConv;
      l.channels = k.count("c");
      detail::parse_window(k, l.kh, l.kw, std::nullopt);
    } else if (kind == "norm") {
      l.kind = LayerKind::Norm;
      l.norm = parse_norm_kind(k.str("kind"));
      l.channels = k.count("c");
      l.groups = k.count("groups", 1);
      l.affine = k.flag("affine", true);
    } else if (kind == "act") {
      l.kind = LayerKind::Act;
      l.act = parse_activation_kind(k.str("kind"));
      l.channels = k.count("c");
      if (l.is_funnel()) l.funnel = detail::parse_funnel(k);
    } else if (kind == "pool") {
      l.kind = LayerKind::Pool;
      const std::string pk = k.str("kind");
      if (pk == "max") l.pool = PoolKind::Max;
      else if (pk == "avg") l.pool = PoolKind::Avg;
      else if (pk == "global") l.pool = PoolKind::Global;
      else throw Error(ErrorKind::Format, where + ": pool kind must be max, avg or global");
      if (l.pool != PoolKind::Global) {
        detail::parse_window(k, l.kh, l.kw, 3);
        l.stride = k.count("stride", 1);
        l.pad = k.count("pad", 0);
      }
    } else if (kind == "linear") {
      l.kind = LayerKind::Linear;
      l.c_in = k.count("in");
      l.c_out = k.count("out");
    } else if (kind == "block") {
      l.kind = LayerKind::Block;
    } else if (kind == "shortcut") {
      l.kind = LayerKind::Shortcut;
    } else if (kind == "end") {
      l.kind = LayerKind::End;
    } else {
      throw Error(ErrorKind::Format, where + ": unknown layer kind '" + kind + "'");
    }
    k.reject_unused();
    m.layers.push_back(std::move(l));
  }
  if (!have_input && !m.layers.empty()) throw Error(ErrorKind::Format, "model is missing its 'input' line");
  return m;
}

inline ModelSpec parse_model(const std::string& text, std::string name = "") {
  std::istringstream is(text);
  return parse_model(is, std::move(name));
}

inline std::string to_text(const ModelSpec& m) {
  std::ostringstream os;
  if (!m.name.empty()) os << "# " << m.name << "\n";
  os << "input c=" << m.input.c << " h=" << m.input.h << " w=" << m.input.w << "\n";
  auto window = [&](const LayerSpec& l) {
    if (l.kh == l.kw) os << " k=" << l.kh;
    else os << " kh=" << l.kh << " kw=" << l.kw;
  };
  for (const auto& l : m.layers) {
    os << l.name << " " << to_string(l.kind);
    switch (l.kind) {
      case LayerKind::Conv:
        os << " in=" << l.c_in << " out=" << l.c_out;
        window(l);
        os << " stride=" << l.stride << " pad=" << l.pad << " bias=" << (l.bias ? 1 : 0);
        break;
      case LayerKind::DWConv:
        os << " c=" << l.channels;
        window(l);
        break;
      case LayerKind::Norm:
        os << " kind=" << to_string(l.norm) << " c=" << l.channels << " groups=" << l.groups
           << " affine=" << (l.affine ? 1 : 0);
        break;
      case LayerKind::Act:
        os << " kind=" << to_string(l.act) << " c=" << l.channels;
        if (l.is_funnel()) {
          const auto& f = l.funnel;
          os << " window=" << (f.window == WindowKind::Pair1x3_3x1 ? std::string("pair") : std::to_string(f.k))
             << " fusion=" << to_string(f.fusion) << " combine=" << to_string(f.pair_combine)
             << " cond=" << to_string(f.condition) << " norm=" << to_string(f.norm) << " groups=" << f.norm_groups
             << " affine=" << (f.norm_affine ? 1 : 0) << " shared_norm=" << (f.shared_pair_norm ? 1 : 0)
             << " init_std=" << detail::format_real(f.init_std)
             << " init_mean=" << detail::format_real(f.init_mean);
        }
        break;
      case LayerKind::Pool:
        os << " kind=" << to_string(l.pool);
        if (l.pool != PoolKind::Global) {
          window(l);
          os << " stride=" << l.stride << " pad=" << l.pad;
        }
        break;
      case LayerKind::Linear: os << " in=" << l.c_in << " out=" << l.c_out; break;
      case LayerKind::Block:
      case LayerKind::Shortcut:
      case LayerKind::End: break;
    }
    os << "\n";
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Validation and counting

/// Cost of one layer. params excludes normalization affine, which is in
/// norm_params. aux_flops counts elementwise work (norm, activation, pooling).
struct LayerCost {
  std::string name;
  std::string kind;
  InputShape out;
  std::uint64_t params = 0;
  std::uint64_t norm_params = 0;
  std::uint64_t flops = 0;
  std::uint64_t aux_flops = 0;
};

struct ComplexityReport {
  std::uint64_t params = 0;
  std::uint64_t norm_params = 0;
  std::uint64_t flops = 0;
  std::uint64_t aux_flops = 0;
  std::vector<LayerCost> layers;

  std::uint64_t total_params() const { return params + norm_params; }
};

struct ValidationResult {
  std::vector<std::string> diagnostics;
  std::vector<InputShape> output_shapes;  // one per layer when valid

  bool ok() const { return diagnostics.empty(); }
  explicit operator bool() const { return ok(); }
};

namespace detail {

inline std::uint64_t funnel_window_params(const FunnelConfig& f, std::size_t c) {
  if (!f.has_parameters()) return 0;
  std::uint64_t n = 0;
  for (auto [kh, kw] : f.branch_windows()) n += static_cast<std::uint64_t>(c) * kh * kw;
  return n;
}

inline std::uint64_t funnel_norm_params(const FunnelConfig& f, std::size_t c) {
  if (!f.has_parameters() || f.norm == NormKind::None || !f.norm_affine) return 0;
  const bool shared = f.window == WindowKind::Pair1x3_3x1 && f.shared_pair_norm;
  const std::uint64_t norms = shared ? 1 : f.branch_windows().size();
  return norms * 2 * c;
}

inline std::size_t pooled_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
  return (in + 2 * pad - k) / stride + 1;
}

struct Scope {
  std::string name;
  InputShape input;
  std::optional<InputShape> main_out;
};

}  // namespace detail

/// Propagates shapes and checks channel bookkeeping. Never throws.
inline ValidationResult validate(const ModelSpec& m) {
  ValidationResult r;
  if (m.layers.empty()) {
    r.diagnostics.push_back("empty model");
    return r;
  }
  auto fail = [&](const LayerSpec& l, const std::string& msg) {
    r.diagnostics.push_back("layer '" + l.name + "' (" + to_string(l.kind) + "): " + msg);
  };
  if (m.input.c == 0 || m.input.h == 0 || m.input.w == 0) r.diagnostics.push_back("input shape has a zero extent");
  InputShape cur = m.input;
  std::vector<detail::Scope> scopes;
  for (const auto& l : m.layers) {
    const std::size_t before = r.diagnostics.size();
    auto need_channels = [&](std::size_t declared) {
      if (declared != cur.c)
        fail(l, "declares " + std::to_string(declared) + " channels but its input has " + std::to_string(cur.c));
    };
    switch (l.kind) {
      case LayerKind::Conv: {
        need_channels(l.c_in);
        if (l.c_out == 0) fail(l, "out must be >= 1");
        if (l.kh == 0 || l.kw == 0) fail(l, "kernel extent must be >= 1");
        if (l.stride == 0) fail(l, "stride must be >= 1");
        if (cur.h + 2 * l.pad < l.kh || cur.w + 2 * l.pad < l.kw) fail(l, "kernel larger than padded input");
        if (r.diagnostics.size() == before)
          cur = InputShape{l.c_out, detail::pooled_extent(cur.h, l.kh, l.stride, l.pad),
                           detail::pooled_extent(cur.w, l.kw, l.stride, l.pad)};
        break;
      }
      case LayerKind::DWConv:
        need_channels(l.channels);
        if (l.kh % 2 == 0 || l.kw % 2 == 0) fail(l, "depthwise window must be odd in both axes");
        break;
      case LayerKind::Norm:
        need_channels(l.channels);
        if (l.norm == NormKind::GroupNorm && (l.groups == 0 || l.channels % l.groups != 0))
          fail(l, std::to_string(l.channels) + " channels not divisible by " + std::to_string(l.groups) + " groups");
        break;
      case LayerKind::Act:
        need_channels(l.channels);
        if (l.is_funnel()) {
          try {
            l.funnel.validate();
          } catch (const Error& e) {
            fail(l, e.what());
          }
          if (l.act == ActivationKind::DWThenReLU && !l.funnel.has_parameters())
            fail(l, "dwrelu needs a parametric condition");
          if (l.funnel.has_parameters() && l.funnel.norm == NormKind::GroupNorm &&
              (l.funnel.norm_groups == 0 || l.channels % l.funnel.norm_groups != 0))
            fail(l, "funnel norm groups do not divide the channel count");
        }
        break;
      case LayerKind::Pool:
        if (l.pool == PoolKind::Global) {
          cur.h = cur.w = 1;
        } else if (l.kh == 0 || l.kw == 0 || l.stride == 0) {
          fail(l, "pool window and stride must be >= 1");
        } else if (2 * l.pad >= l.kh || 2 * l.pad >= l.kw) {
          fail(l, "pool padding must be less than half the window");
        } else if (cur.h + 2 * l.pad < l.kh || cur.w + 2 * l.pad < l.kw) {
          fail(l, "pool window larger than padded input");
        } else {
          cur.h = detail::pooled_extent(cur.h, l.kh, l.stride, l.pad);
          cur.w = detail::pooled_extent(cur.w, l.kw, l.stride, l.pad);
        }
        break;
      case LayerKind::Linear: {
        const std::size_t features = cur.c * cur.h * cur.w;
        if (l.c_in != features)
          fail(l, "declares " + std::to_string(l.c_in) + " input features but receives " + std::to_string(features));
        if (l.c_out == 0) fail(l, "out must be >= 1");
        cur = InputShape{l.c_out, 1, 1};
        break;
      }
      case LayerKind::Block:
        scopes.push_back(detail::Scope{l.name, cur, std::nullopt});
        break;
      case LayerKind::Shortcut:
        if (scopes.empty() || scopes.back().main_out) {
          fail(l, "shortcut without an open block");
          break;
        }
        scopes.back().main_out = cur;
        cur = scopes.back().input;
        break;
      case LayerKind::End: {
        if (scopes.empty()) {
          fail(l, "end without an open block");
          break;
        }
        const auto sc = scopes.back();
        scopes.pop_back();
        const InputShape main = sc.main_out ? *sc.main_out : cur;
        const InputShape skip = sc.main_out ? cur : sc.input;
        if (!(main == skip))
          fail(l, "residual branches disagree: main " + main.to_string() + " vs shortcut " + skip.to_string());
        cur = main;
        break;
      }
    }
    r.output_shapes.push_back(cur);
  }
  for (const auto& sc : scopes) r.diagnostics.push_back("block '" + sc.name + "' is never closed");
  if (!r.ok()) r.output_shapes.clear();
  return r;
}

inline void require_valid(const ModelSpec& m) {
  const auto v = validate(m);
  if (!v.ok()) {
    std::string msg = "invalid model '" + m.name + "'";
    for (const auto& d : v.diagnostics) msg += "\n  " + d;
    throw Error(ErrorKind::Validation, msg);
  }
}

/// Per-layer cost breakdown. Throws a Validation error on an invalid spec.
inline ComplexityReport complexity(const ModelSpec& m) {
  const auto v = validate(m);
  require_valid(m);
  ComplexityReport rep;
  InputShape cur = m.input;
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    const auto& l = m.layers[i];
    const InputShape out = v.output_shapes[i];
    const std::uint64_t in_elems = static_cast<std::uint64_t>(cur.c) * cur.h * cur.w;
    const std::uint64_t out_elems = static_cast<std::uint64_t>(out.c) * out.h * out.w;
    const std::uint64_t plane = static_cast<std::uint64_t>(out.h) * out.w;
    LayerCost c{l.name, to_string(l.kind), out};
    switch (l.kind) {
      case LayerKind::Conv:
        c.params = static_cast<std::uint64_t>(l.c_in) * l.c_out * l.kh * l.kw + (l.bias ? l.c_out : 0);
        c.flops = static_cast<std::uint64_t>(l.c_in) * l.c_out * l.kh * l.kw * plane;
        break;
      case LayerKind::DWConv:
        c.params = static_cast<std::uint64_t>(l.channels) * l.kh * l.kw;
        c.flops = c.params * plane;
        break;
      case LayerKind::Norm:
        c.kind = std::string("norm:") + to_string(l.norm);
        c.norm_params = l.norm != NormKind::None && l.affine ? 2 * l.channels : 0;
        c.aux_flops = l.norm == NormKind::None ? 0 : 2 * out_elems;
        break;
      case LayerKind::Act:
        c.kind = std::string("act:") + to_string(l.act);
        if (l.act == ActivationKind::PReLU) c.params = l.channels;
        c.aux_flops = out_elems;
        if (l.is_funnel()) {
          c.params = detail::funnel_window_params(l.funnel, l.channels);
          c.norm_params = detail::funnel_norm_params(l.funnel, l.channels);
          c.flops = c.params * plane;
          if (!l.funnel.has_parameters()) c.aux_flops += out_elems * l.funnel.k * l.funnel.k;
          else if (l.funnel.norm != NormKind::None) c.aux_flops += 2 * out_elems * l.funnel.branch_windows().size();
        }
        break;
      case LayerKind::Pool:
        c.kind = std::string("pool:") + to_string(l.pool);
        c.aux_flops = l.pool == PoolKind::Global ? in_elems : out_elems * l.kh * l.kw;
        break;
      case LayerKind::Linear:
        c.params = static_cast<std::uint64_t>(l.c_in) * l.c_out + l.c_out;
        c.flops = static_cast<std::uint64_t>(l.c_in) * l.c_out;
        break;
      case LayerKind::End:
        c.aux_flops = out_elems;
        break;
      case LayerKind::Block:
      case LayerKind::Shortcut: break;
    }
    rep.params += c.params;
    rep.norm_params += c.norm_params;
    rep.flops += c.flops;
    rep.aux_flops += c.aux_flops;
    rep.layers.push_back(std::move(c));
    cur = out;
  }
  return rep;
}

inline std::uint64_t count_params(const ModelSpec& m) { return complexity(m).params; }
inline std::uint64_t count_flops(const ModelSpec& m) { return complexity(m).flops; }

/// Fixed-precision rendering used in tables: 25.5M, 3.86G.
inline std::string format_scaled(std::uint64_t v, double unit, int decimals, const char* suffix) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(decimals) << static_cast<double>(v) / unit << suffix;
  return os.str();
}

inline std::string format_params(std::uint64_t v) { return format_scaled(v, 1e6, 1, "M"); }
inline std::string format_flops(std::uint64_t v, int decimals = 2) { return format_scaled(v, 1e9, decimals, "G"); }

inline void write_breakdown_csv(std::ostream& os, const ComplexityReport& r) {
  os << "layer,kind,out_c,out_h,out_w,params,norm_params,flops,aux_flops\n";
  for (const auto& l : r.layers)
    os << l.name << "," << l.kind << "," << l.out.c << "," << l.out.h << "," << l.out.w << "," << l.params << ","
       << l.norm_params << "," << l.flops << "," << l.aux_flops << "\n";
}

// ---------------------------------------------------------------------------
// Builtin models

/// Activation used at a site, with the channel count filled in per site.
struct ActivationChoice {
  ActivationKind kind = ActivationKind::ReLU;
  FunnelConfig funnel{};
  bool operator==(const ActivationChoice&) const = default;
};

inline LayerSpec make_activation(const std::string& name, const ActivationChoice& a, std::size_t c) {
  return LayerSpec::activation(name, a.kind, c, a.funnel);
}

/// ResNet v1 with bottleneck blocks (stride on the first 1x1 conv of each
/// downsampling block) and a 1000-way classifier. `site` replaces the ReLU
/// after the 3x3 conv of every bottleneck in conv2_x..conv4_x; all other
/// activations stay ReLU. With `everywhere`, every activation is replaced.
inline ModelSpec resnet(std::string name, const std::vector<std::size_t>& depths, const ActivationChoice& site,
                        bool everywhere = false, std::size_t classes = 1000) {
  ModelSpec m{std::move(name), InputShape{3, 224, 224}, {}};
  auto& L = m.layers;
  const ActivationChoice relu{};
  const ActivationChoice& global = everywhere ? site : relu;
  L.push_back(LayerSpec::conv("conv1", 3, 64, 7, 2, 3));
  L.push_back(LayerSpec::norm_layer("bn1", NormKind::BatchNorm, 64));
  L.push_back(make_activation("act1", global, 64));
  L.push_back(LayerSpec::pool_layer("maxpool", PoolKind::Max, 3, 2, 1));
  std::size_t in = 64;
  for (std::size_t stage = 0; stage < depths.size(); ++stage) {
    const std::size_t width = 64u << stage;
    const std::size_t out = width * 4;
    const bool replace_site = stage < 3 || everywhere;
    for (std::size_t b = 0; b < depths[stage]; ++b) {
      const std::string p = "layer" + std::to_string(stage + 1) + "." + std::to_string(b);
      const std::size_t stride = (b == 0 && stage > 0) ? 2 : 1;
      L.push_back(LayerSpec::marker(p, LayerKind::Block));
      L.push_back(LayerSpec::conv(p + ".conv1", in, width, 1, stride, 0));
      L.push_back(LayerSpec::norm_layer(p + ".bn1", NormKind::BatchNorm, width));
      L.push_back(make_activation(p + ".act1", global, width));
      L.push_back(LayerSpec::conv(p + ".conv2", width, width, 3, 1, 1));
      L.push_back(LayerSpec::norm_layer(p + ".bn2", NormKind::BatchNorm, width));
      L.push_back(make_activation(p + ".act2", replace_site ? site : relu, width));
      L.push_back(LayerSpec::conv(p + ".conv3", width, out, 1, 1, 0));
      L.push_back(LayerSpec::norm_layer(p + ".bn3", NormKind::BatchNorm, out));
      if (b == 0) {
        L.push_back(LayerSpec::marker(p + ".shortcut", LayerKind::Shortcut));
        L.push_back(LayerSpec::conv(p + ".downsample", in, out, 1, stride, 0));
        L.push_back(LayerSpec::norm_layer(p + ".downsample.bn", NormKind::BatchNorm, out));
      }
      L.push_back(LayerSpec::marker(p, LayerKind::End));
      L.push_back(make_activation(p + ".act3", global, out));
      in = out;
    }
  }
  L.push_back(LayerSpec::pool_layer("avgpool", PoolKind::Global));
  L.push_back(LayerSpec::linear("fc", in, classes));
  return m;
}

/// Small CNN for the training harness: four conv3x3 -> norm -> activation
/// blocks, global average pooling and a linear head. Only the activations
/// differ between variants.
struct ToyCnnOptions {
  InputShape input{1, 32, 32};
  std::vector<std::size_t> channels{8, 16, 16, 32};
  std::vector<std::size_t> strides{1, 2, 2, 1};
  NormKind norm = NormKind::BatchNorm;
  std::size_t classes = 4;
  bool operator==(const ToyCnnOptions&) const = default;
};

inline ModelSpec toy_cnn(std::string name, const ActivationChoice& act, const ToyCnnOptions& o = {}) {
  ModelSpec m{std::move(name), o.input, {}};
  std::size_t in = o.input.c;
  for (std::size_t i = 0; i < o.channels.size(); ++i) {
    const std::string p = "block" + std::to_string(i + 1);
    const std::size_t c = o.channels[i];
    const std::size_t stride = i < o.strides.size() ? o.strides[i] : 1;
    m.layers.push_back(LayerSpec::conv(p + ".conv", in, c, 3, stride, 1));
    m.layers.push_back(LayerSpec::norm_layer(p + ".norm", o.norm, c));
    m.layers.push_back(make_activation(p + ".act", act, c));
    in = c;
  }
  m.layers.push_back(LayerSpec::pool_layer("gap", PoolKind::Global));
  m.layers.push_back(LayerSpec::linear("head", in, o.classes));
  return m;
}

inline ActivationChoice frelu_choice(std::size_t k = 3) {
  ActivationChoice a{ActivationKind::FReLU, {}};
  a.funnel.k = k;
  return a;
}

/// A 1x1 funnel without norm whose windows start at the PReLU slope and draw
/// nothing from the init stream: it trains exactly like PReLU.
inline ActivationChoice prelu_equivalent_choice() {
  ActivationChoice a = frelu_choice(1);
  a.funnel.norm = NormKind::None;
  a.funnel.init_std = 0.0;
  a.funnel.init_mean = ActivationLayer::kPreluInit;
  return a;
}

inline const std::map<std::string, ActivationChoice>& builtin_activation_variants() {
  static const std::map<std::string, ActivationChoice> v{
      {"relu", {ActivationKind::ReLU, {}}},
      {"prelu", {ActivationKind::PReLU, {}}},
      {"swish", {ActivationKind::Swish, {}}},
      {"frelu", frelu_choice(3)},
  };
  return v;
}

inline std::vector<std::string> builtin_model_names() {
  std::vector<std::string> names;
  for (const char* base : {"resnet50", "resnet101", "toy-cnn"})
    for (const auto& [variant, choice] : builtin_activation_variants()) names.push_back(std::string(base) + "-" + variant);
  return names;
}

/// Resolves a builtin name such as resnet50-frelu or toy-cnn-prelu.
inline std::optional<ModelSpec> builtin_model(const std::string& name) {
  const auto dash = name.rfind('-');
  if (dash == std::string::npos) return std::nullopt;
  const auto& variants = builtin_activation_variants();
  const auto it = variants.find(name.substr(dash + 1));
  if (it == variants.end()) return std::nullopt;
  const std::string base = name.substr(0, dash);
  if (base == "resnet50") return resnet(name, {3, 4, 6, 3}, it->second);
  if (base == "resnet101") return resnet(name, {3, 4, 23, 3}, it->second);
  if (base == "toy-cnn") return toy_cnn(name, it->second);
  return std::nullopt;
}

inline std::map<std::string, ModelSpec> builtin_models() {
  std::map<std::string, ModelSpec> out;
  for (const auto& n : builtin_model_names()) out.emplace(n, *builtin_model(n));
  return out;
}

}  // namespace fnk
