#pragma once

// Experiment configuration and its INI-style text form.
//
//   [dataset]   kind = sparse_linear | blobs | idx, generator sizes, seed, split fractions
//   [network]   layers = dense(20,64) relu dense(64,4) ...; loss; init_seed
//   [optimizer] variant, kappa, nu, alpha (+ decay or explicit steps), lambda, momentum, weight_decay
//   [split]     layers = all | none | i,j,...; scheme = auto | per_element | per_filter
//   [run]       epochs, batch_size, seed, monitor, monitor_lip, checkpoint_epochs, output
//
// Parsing is fail-closed: unknown sections or keys are errors.

#include <charconv>
#include <cmath>
#include <cstdint>
#include <limits>
#include <algorithm>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dslbi/network.hpp"
#include "dslbi/optimizer.hpp"

namespace dslbi {

enum class DatasetKind { sparse_linear, blobs, idx };

struct DatasetSpec {
  DatasetKind kind = DatasetKind::blobs;
  std::uint64_t seed = 0;
  double train_fraction = 0.8;
  double val_fraction = 0.2;
  // sparse_linear
  std::size_t n = 200;
  std::size_t p = 50;
  std::size_t s = 5;
  double snr = 10.0;
  double correlation = 0.0;
  // blobs (n shared)
  std::size_t classes = 4;
  std::size_t dim = 20;
  double separation = 3.0;
  // idx
  std::string images;
  std::string labels;
  std::string val_images;
  std::string val_labels;
  std::size_t subset = 0;

  friend bool operator==(const DatasetSpec&, const DatasetSpec&) = default;
};

enum class SplitMode { all, none, listed };

struct SplitSpec {
  SplitMode mode = SplitMode::all;
  std::vector<std::size_t> layers;         // for SplitMode::listed
  std::optional<GroupScheme> scheme;       // nullopt: per_filter for conv, per_element for dense
  friend bool operator==(const SplitSpec&, const SplitSpec&) = default;
};

struct ExperimentConfig {
  DatasetSpec dataset;
  std::vector<LayerKind> layers;
  LossKind loss = LossKind::softmax_cross_entropy;
  std::uint64_t init_seed = 0;
  HyperParams hp;
  SplitSpec split;
  std::size_t epochs = 10;
  std::size_t batch_size = 128;
  std::uint64_t seed = 0;
  bool monitor = false;
  double monitor_lip = 0.0;  // 0: derive (exact for linear least squares, heuristic otherwise)
  std::vector<std::size_t> checkpoint_epochs;
  std::string output;

  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

inline SplitPolicy make_split_policy(const SplitSpec& spec, const Network& net, double lambda) {
  switch (spec.mode) {
    case SplitMode::none: return SplitPolicy::none();
    case SplitMode::all: return SplitPolicy::all(net, lambda, spec.scheme);
    case SplitMode::listed: {
      SplitPolicy all = SplitPolicy::all(net, lambda, spec.scheme);
      SplitPolicy sp;
      sp.layers.resize(net.layers.size());
      for (std::size_t l : spec.layers) {
        if (l >= net.layers.size() || !all.layers[l])
          throw std::invalid_argument("split.layers: layer " + std::to_string(l) + " is not a dense/conv layer");
        sp.layers[l] = all.layers[l];
      }
      return sp;
    }
  }
  return {};
}

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

inline std::string fmt_double(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

inline double parse_double(const std::string& field, const std::string& text) {
  if (text == "inf" || text == "infinity") return std::numeric_limits<double>::infinity();
  double v = 0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size() || !std::isfinite(v))
    throw ConfigError(field + ": expected a number, got '" + text + "'");
  return v;
}

inline std::uint64_t parse_uint(const std::string& field, const std::string& text) {
  std::uint64_t v = 0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size() || text.empty())
    throw ConfigError(field + ": expected a non-negative integer, got '" + text + "'");
  return v;
}

inline bool parse_bool(const std::string& field, const std::string& text) {
  if (text == "true" || text == "1" || text == "yes") return true;
  if (text == "false" || text == "0" || text == "no") return false;
  throw ConfigError(field + ": expected true/false, got '" + text + "'");
}

inline std::vector<std::string> split_list(const std::string& text, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(text);
  while (std::getline(is, cur, sep))
    if (auto t = trim(cur); !t.empty()) out.push_back(t);
  return out;
}

inline std::vector<std::size_t> parse_uint_list(const std::string& field, const std::string& text) {
  std::vector<std::size_t> out;
  for (const auto& t : split_list(text, ',')) out.push_back(parse_uint(field, t));
  return out;
}

inline std::string join_uints(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

inline std::string layer_to_string(const LayerKind& k) {
  if (const auto* d = std::get_if<Dense>(&k))
    return "dense(" + std::to_string(d->in) + "," + std::to_string(d->out) + (d->bias ? "" : ",nobias") + ")";
  if (const auto* c = std::get_if<Conv2d>(&k))
    return "conv2d(" + std::to_string(c->c_in) + "," + std::to_string(c->c_out) + "," + std::to_string(c->size) +
           ")";
  if (const auto* a = std::get_if<Activation>(&k)) {
    switch (a->kind) {
      case ActivationKind::relu: return "relu";
      case ActivationKind::softplus: return "softplus(" + fmt_double(a->c) + ")";
      case ActivationKind::sigmoid: return "sigmoid";
      case ActivationKind::tanh: return "tanh";
    }
  }
  if (std::holds_alternative<MaxPool>(k)) return "maxpool";
  return "flatten";
}

inline LayerKind parse_layer(const std::string& tok) {
  const std::string field = "network.layers";
  const auto open = tok.find('(');
  const std::string name = tok.substr(0, open);
  std::vector<std::string> args;
  if (open != std::string::npos) {
    if (tok.back() != ')') throw ConfigError(field + ": unbalanced parentheses in '" + tok + "'");
    args = split_list(tok.substr(open + 1, tok.size() - open - 2), ',');
  }
  auto want = [&](std::size_t lo, std::size_t hi) {
    if (args.size() < lo || args.size() > hi)
      throw ConfigError(field + ": wrong number of arguments in '" + tok + "'");
  };
  if (name == "dense") {
    want(2, 3);
    Dense d{parse_uint(field, args[0]), parse_uint(field, args[1]), true};
    if (args.size() == 3) {
      if (args[2] != "nobias") throw ConfigError(field + ": unknown dense option '" + args[2] + "'");
      d.bias = false;
    }
    return d;
  }
  if (name == "conv2d") {
    want(3, 3);
    return Conv2d{parse_uint(field, args[0]), parse_uint(field, args[1]), parse_uint(field, args[2])};
  }
  if (name == "softplus") {
    want(0, 1);
    return Activation{ActivationKind::softplus, args.empty() ? 1.0 : parse_double(field, args[0])};
  }
  want(0, 0);
  if (name == "relu") return Activation{ActivationKind::relu};
  if (name == "sigmoid") return Activation{ActivationKind::sigmoid};
  if (name == "tanh") return Activation{ActivationKind::tanh};
  if (name == "maxpool") return MaxPool{};
  if (name == "flatten") return Flatten{};
  throw ConfigError(field + ": unknown layer '" + tok + "'");
}

using RawConfig = std::map<std::string, std::string>;  // "section.key" -> value

inline const std::vector<std::string>& known_keys() {
  static const std::vector<std::string> keys = {
      "dataset.kind", "dataset.seed", "dataset.train_fraction", "dataset.val_fraction", "dataset.n", "dataset.p",
      "dataset.s", "dataset.snr", "dataset.correlation", "dataset.classes", "dataset.dim", "dataset.separation",
      "dataset.images", "dataset.labels", "dataset.val_images", "dataset.val_labels", "dataset.subset",
      "network.layers", "network.loss", "network.init_seed",
      "optimizer.variant", "optimizer.kappa", "optimizer.nu", "optimizer.alpha", "optimizer.alpha_drop_every",
      "optimizer.alpha_drop_factor", "optimizer.alpha_steps", "optimizer.lambda", "optimizer.momentum",
      "optimizer.weight_decay",
      "split.layers", "split.scheme",
      "run.epochs", "run.batch_size", "run.seed", "run.monitor", "run.monitor_lip", "run.checkpoint_epochs",
      "run.output"};
  return keys;
}

inline void check_key(const std::string& key, const std::string& where) {
  const auto& keys = known_keys();
  if (std::find(keys.begin(), keys.end(), key) == keys.end())
    throw ConfigError(where + "unknown key '" + key + "'");
}

inline RawConfig parse_raw(const std::string& text) {
  RawConfig raw;
  std::istringstream is(text);
  std::string line, section;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::string where = "line " + std::to_string(lineno) + ": ";
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + "malformed section header '" + line + "'");
      section = trim(line.substr(1, line.size() - 2));
      static const std::vector<std::string> sections = {"dataset", "network", "optimizer", "split", "run"};
      if (std::find(sections.begin(), sections.end(), section) == sections.end())
        throw ConfigError(where + "unknown section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected key = value, got '" + line + "'");
    if (section.empty()) throw ConfigError(where + "key outside of any section");
    const std::string key = section + "." + trim(line.substr(0, eq));
    check_key(key, where);
    raw[key] = trim(line.substr(eq + 1));
  }
  return raw;
}

}  // namespace detail

/// Applies "section.key=value" on top of parsed text.
inline void apply_override(detail::RawConfig& raw, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not of the form section.key=value");
  const std::string key = detail::trim(assignment.substr(0, eq));
  detail::check_key(key, "override: ");
  raw[key] = detail::trim(assignment.substr(eq + 1));
}

inline ExperimentConfig config_from_raw(const detail::RawConfig& raw) {
  using namespace detail;
  ExperimentConfig c;
  auto get = [&](const std::string& k) -> const std::string* {
    auto it = raw.find(k);
    return it == raw.end() ? nullptr : &it->second;
  };
  auto num = [&](const std::string& k, double& into) {
    if (auto* v = get(k)) into = parse_double(k, *v);
  };
  auto uint = [&](const std::string& k, auto& into) {
    if (auto* v = get(k)) into = static_cast<std::remove_reference_t<decltype(into)>>(parse_uint(k, *v));
  };
  auto str = [&](const std::string& k, std::string& into) {
    if (auto* v = get(k)) into = *v;
  };

  auto& d = c.dataset;
  if (auto* v = get("dataset.kind")) {
    if (*v == "sparse_linear") d.kind = DatasetKind::sparse_linear;
    else if (*v == "blobs") d.kind = DatasetKind::blobs;
    else if (*v == "idx") d.kind = DatasetKind::idx;
    else throw ConfigError("dataset.kind: expected sparse_linear|blobs|idx, got '" + *v + "'");
  }
  uint("dataset.seed", d.seed);
  num("dataset.train_fraction", d.train_fraction);
  num("dataset.val_fraction", d.val_fraction);
  uint("dataset.n", d.n);
  uint("dataset.p", d.p);
  uint("dataset.s", d.s);
  num("dataset.snr", d.snr);
  num("dataset.correlation", d.correlation);
  uint("dataset.classes", d.classes);
  uint("dataset.dim", d.dim);
  num("dataset.separation", d.separation);
  str("dataset.images", d.images);
  str("dataset.labels", d.labels);
  str("dataset.val_images", d.val_images);
  str("dataset.val_labels", d.val_labels);
  uint("dataset.subset", d.subset);

  if (auto* v = get("network.layers"))
    for (const auto& tok : split_list(*v, ' ')) c.layers.push_back(parse_layer(tok));
  if (auto* v = get("network.loss")) {
    if (*v == "mse") c.loss = LossKind::mse;
    else if (*v == "softmax_cross_entropy") c.loss = LossKind::softmax_cross_entropy;
    else throw ConfigError("network.loss: expected mse|softmax_cross_entropy, got '" + *v + "'");
  }
  uint("network.init_seed", c.init_seed);

  auto& hp = c.hp;
  if (auto* v = get("optimizer.variant")) {
    if (*v == "naive") hp.variant = Variant::naive;
    else if (*v == "mom") hp.variant = Variant::mom;
    else if (*v == "mom_wd") hp.variant = Variant::mom_wd;
    else throw ConfigError("optimizer.variant: expected naive|mom|mom_wd, got '" + *v + "'");
  }
  num("optimizer.kappa", hp.kappa);
  num("optimizer.nu", hp.nu);
  num("optimizer.alpha", hp.alpha.initial);
  uint("optimizer.alpha_drop_every", hp.alpha.drop_every);
  num("optimizer.alpha_drop_factor", hp.alpha.drop_factor);
  if (auto* v = get("optimizer.alpha_steps")) {
    for (const auto& item : split_list(*v, ',')) {
      const auto colon = item.find(':');
      if (colon == std::string::npos)
        throw ConfigError("optimizer.alpha_steps: expected epoch:alpha pairs, got '" + item + "'");
      hp.alpha.steps.emplace_back(parse_uint("optimizer.alpha_steps", trim(item.substr(0, colon))),
                                  parse_double("optimizer.alpha_steps", trim(item.substr(colon + 1))));
    }
  }
  num("optimizer.lambda", hp.lambda);
  num("optimizer.momentum", hp.momentum);
  num("optimizer.weight_decay", hp.weight_decay);

  if (auto* v = get("split.layers")) {
    if (*v == "all") c.split.mode = SplitMode::all;
    else if (*v == "none") c.split.mode = SplitMode::none;
    else {
      c.split.mode = SplitMode::listed;
      c.split.layers = parse_uint_list("split.layers", *v);
    }
  }
  if (auto* v = get("split.scheme")) {
    if (*v == "auto") c.split.scheme.reset();
    else if (*v == "per_element") c.split.scheme = GroupScheme::per_element;
    else if (*v == "per_filter") c.split.scheme = GroupScheme::per_filter;
    else throw ConfigError("split.scheme: expected auto|per_element|per_filter, got '" + *v + "'");
  }

  uint("run.epochs", c.epochs);
  uint("run.batch_size", c.batch_size);
  uint("run.seed", c.seed);
  if (auto* v = get("run.monitor")) c.monitor = parse_bool("run.monitor", *v);
  num("run.monitor_lip", c.monitor_lip);
  if (auto* v = get("run.checkpoint_epochs")) c.checkpoint_epochs = parse_uint_list("run.checkpoint_epochs", *v);
  str("run.output", c.output);
  return c;
}

/// Range checks with the offending field named.
inline void validate(const ExperimentConfig& c) {
  const auto& d = c.dataset;
  auto fail = [](const std::string& m) { throw ConfigError(m); };
  if (!(d.train_fraction > 0 && d.train_fraction <= 1)) fail("dataset.train_fraction must be in (0, 1]");
  if (!(d.val_fraction >= 0 && d.train_fraction + d.val_fraction <= 1 + 1e-12))
    fail("dataset.val_fraction must be >= 0 with train_fraction + val_fraction <= 1");
  if (d.kind == DatasetKind::sparse_linear) {
    if (d.n == 0 || d.p == 0) fail("dataset.n and dataset.p must be positive");
    if (d.s > d.p) fail("dataset.s must not exceed dataset.p");
    if (!(d.snr > 0)) fail("dataset.snr must be > 0");
    if (!(d.correlation >= 0 && d.correlation < 1)) fail("dataset.correlation must be in [0, 1)");
  } else if (d.kind == DatasetKind::blobs) {
    if (d.n == 0) fail("dataset.n must be positive");
    if (d.classes < 2) fail("dataset.classes must be >= 2");
    if (d.dim == 0) fail("dataset.dim must be positive");
  } else if (d.images.empty() || d.labels.empty()) {
    fail("dataset.images and dataset.labels are required for kind = idx");
  }
  if (c.layers.empty()) fail("network.layers must list at least one layer");
  try {
    c.hp.validate();
  } catch (const std::invalid_argument& e) {
    fail(e.what());
  }
  if (c.batch_size == 0) fail("run.batch_size must be positive");
  if (!(c.monitor_lip >= 0)) fail("run.monitor_lip must be >= 0");
}

inline ExperimentConfig parse_config(const std::string& text, const std::vector<std::string>& overrides = {}) {
  auto raw = detail::parse_raw(text);
  for (const auto& o : overrides) apply_override(raw, o);
  ExperimentConfig c = config_from_raw(raw);
  validate(c);
  return c;
}

/// Canonical text form; parse_config(emit_config(c)) == c.
inline std::string emit_config(const ExperimentConfig& c) {
  using detail::fmt_double;
  std::ostringstream os;
  const auto& d = c.dataset;
  const char* kinds[] = {"sparse_linear", "blobs", "idx"};
  os << "[dataset]\n"
     << "kind = " << kinds[static_cast<int>(d.kind)] << '\n'
     << "seed = " << d.seed << '\n'
     << "train_fraction = " << fmt_double(d.train_fraction) << '\n'
     << "val_fraction = " << fmt_double(d.val_fraction) << '\n'
     << "n = " << d.n << '\n'
     << "p = " << d.p << '\n'
     << "s = " << d.s << '\n'
     << "snr = " << fmt_double(d.snr) << '\n'
     << "correlation = " << fmt_double(d.correlation) << '\n'
     << "classes = " << d.classes << '\n'
     << "dim = " << d.dim << '\n'
     << "separation = " << fmt_double(d.separation) << '\n';
  if (!d.images.empty()) os << "images = " << d.images << '\n';
  if (!d.labels.empty()) os << "labels = " << d.labels << '\n';
  if (!d.val_images.empty()) os << "val_images = " << d.val_images << '\n';
  if (!d.val_labels.empty()) os << "val_labels = " << d.val_labels << '\n';
  os << "subset = " << d.subset << "\n\n";

  os << "[network]\nlayers =";
  for (const auto& l : c.layers) os << ' ' << detail::layer_to_string(l);
  os << "\nloss = " << (c.loss == LossKind::mse ? "mse" : "softmax_cross_entropy") << '\n'
     << "init_seed = " << c.init_seed << "\n\n";

  const auto& hp = c.hp;
  os << "[optimizer]\n"
     << "variant = " << to_string(hp.variant) << '\n'
     << "kappa = " << fmt_double(hp.kappa) << '\n'
     << "nu = " << fmt_double(hp.nu) << '\n'
     << "alpha = " << fmt_double(hp.alpha.initial) << '\n'
     << "alpha_drop_every = " << hp.alpha.drop_every << '\n'
     << "alpha_drop_factor = " << fmt_double(hp.alpha.drop_factor) << '\n';
  if (!hp.alpha.steps.empty()) {
    os << "alpha_steps = ";
    for (std::size_t i = 0; i < hp.alpha.steps.size(); ++i)
      os << (i ? "," : "") << hp.alpha.steps[i].first << ':' << fmt_double(hp.alpha.steps[i].second);
    os << '\n';
  }
  os << "lambda = " << fmt_double(hp.lambda) << '\n'
     << "momentum = " << fmt_double(hp.momentum) << '\n'
     << "weight_decay = " << fmt_double(hp.weight_decay) << "\n\n";

  os << "[split]\nlayers = ";
  if (c.split.mode == SplitMode::all) os << "all";
  else if (c.split.mode == SplitMode::none) os << "none";
  else os << detail::join_uints(c.split.layers);
  os << "\nscheme = " << (c.split.scheme ? to_string(*c.split.scheme) : "auto") << "\n\n";

  os << "[run]\n"
     << "epochs = " << c.epochs << '\n'
     << "batch_size = " << c.batch_size << '\n'
     << "seed = " << c.seed << '\n'
     << "monitor = " << (c.monitor ? "true" : "false") << '\n'
     << "monitor_lip = " << fmt_double(c.monitor_lip) << '\n';
  if (!c.checkpoint_epochs.empty()) os << "checkpoint_epochs = " << detail::join_uints(c.checkpoint_epochs) << '\n';
  if (!c.output.empty()) os << "output = " << c.output << '\n';
  return os.str();
}

}  // namespace dslbi
