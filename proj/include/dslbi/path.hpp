#pragma once

// Inverse-scale-space bookkeeping: sparsity, support masks, projection and path export.

#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <tuple>
#include <vector>

#include "dslbi/data.hpp"
#include "dslbi/optimizer.hpp"
#include "json.hpp"

namespace dslbi {

inline constexpr int kPathSchemaVersion = 1;

/// Fraction of entries that are exactly nonzero (the prox produces hard zeros, so no epsilon).
inline double sparsity(const Tensor& gamma) {
  if (gamma.empty()) return 0.0;
  std::size_t nz = 0;
  for (double v : gamma.values()) nz += v != 0.0;
  return static_cast<double>(nz) / static_cast<double>(gamma.size());
}

/// Support of a grouped tensor, stored per group.
struct GroupMask {
  Grouping grouping;
  std::vector<std::uint8_t> active;

  std::size_t active_groups() const {
    std::size_t c = 0;
    for (auto a : active) c += a;
    return c;
  }
  bool all_inactive() const { return active_groups() == 0; }

  Tensor materialize() const {
    Tensor m(grouping.shape());
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = active[grouping.group_of(i)] ? 1.0 : 0.0;
    return m;
  }

  /// Fraction of coordinates covered by active groups.
  double density() const {
    std::size_t kept = 0;
    for (std::size_t i = 0; i < grouping.group_index().size(); ++i) kept += active[grouping.group_of(i)];
    return static_cast<double>(kept) / static_cast<double>(grouping.group_index().size());
  }

  friend bool operator==(const GroupMask&, const GroupMask&) = default;
};

/// Per-layer support masks; layers without a mask are left untouched by projection.
struct Mask {
  std::vector<std::optional<GroupMask>> layers;

  /// Keeps every group of every split layer.
  static Mask full(const OptimizerState& st) {
    Mask m;
    m.layers.resize(st.net.layers.size());
    for (const auto& ps : st.params)
      if (ps.split()) m.layers[ps.id.layer] = GroupMask{ps.penalty->grouping,
                                                        std::vector<std::uint8_t>(ps.penalty->grouping.num_groups(), 1)};
    return m;
  }

  /// Kept fraction over all masked coordinates.
  double density() const {
    double kept = 0, total = 0;
    for (const auto& l : layers)
      if (l) {
        const double n = static_cast<double>(l->grouping.group_index().size());
        kept += l->density() * n;
        total += n;
      }
    return total > 0 ? kept / total : 1.0;
  }

  friend bool operator==(const Mask&, const Mask&) = default;
};

/// Group g is active iff ||Gamma^g|| > 0.
inline GroupMask support_mask(const Tensor& gamma, const Grouping& grouping) {
  GroupMask m{grouping, {}};
  for (double n : grouping.group_norms(gamma)) m.active.push_back(n > 0 ? 1 : 0);
  return m;
}

inline Mask support_mask(const OptimizerState& st) {
  Mask m;
  m.layers.resize(st.net.layers.size());
  for (const auto& ps : st.params)
    if (ps.split()) m.layers[ps.id.layer] = support_mask(ps.gamma, ps.penalty->grouping);
  return m;
}

/// W restricted to the support: W * mask, coordinatewise.
inline Tensor project_model(const Tensor& w, const GroupMask& mask) {
  mask.grouping.require_covers(w, "project_model");
  Tensor out = w;
  for (std::size_t i = 0; i < out.size(); ++i)
    if (!mask.active[mask.grouping.group_of(i)]) out[i] = 0.0;
  return out;
}

inline Network project_model(Network net, const Mask& mask) {
  for (std::size_t l = 0; l < mask.layers.size() && l < net.layers.size(); ++l)
    if (mask.layers[l]) net.layers[l].params[0] = project_model(net.layers[l].params[0], *mask.layers[l]);
  return net;
}

struct LayerPath {
  std::size_t layer = 0;
  double sparsity = 0.0;              // nonzero fraction of Gamma
  std::vector<double> gamma_norms;    // ||Gamma^g||
  std::vector<double> weight_norms;   // ||W^g||
  friend bool operator==(const LayerPath&, const LayerPath&) = default;
};

struct PathRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double train_acc = 0.0;
  double val_loss = 0.0;
  double val_acc = 0.0;
  double projected_val_acc = 0.0;  // W projected onto the support of Gamma
  std::vector<LayerPath> layers;   // split layers only

  /// Support per split layer, derived from the recorded group magnitudes.
  std::vector<std::uint8_t> support(std::size_t i) const {
    std::vector<std::uint8_t> s;
    for (double n : layers.at(i).gamma_norms) s.push_back(n > 0 ? 1 : 0);
    return s;
  }

  /// Nonzero fraction over all split coordinates.
  double overall_sparsity(const std::vector<std::size_t>& sizes) const {
    double nz = 0, total = 0;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      nz += layers[i].sparsity * static_cast<double>(sizes[i]);
      total += static_cast<double>(sizes[i]);
    }
    return total > 0 ? nz / total : 0.0;
  }

  friend bool operator==(const PathRecord&, const PathRecord&) = default;
};

namespace detail {

inline std::pair<double, double> evaluate(const Network& net, const Dataset& ds) {
  if (ds.size() == 0) return {0.0, 0.0};
  const auto fr = forward(net, ds.x, ds.y);
  const double acc = net.loss == LossKind::softmax_cross_entropy ? accuracy(fr.outputs, ds.y) : 0.0;
  return {fr.loss, acc};
}

}  // namespace detail

/// Full-dataset losses/accuracies plus Gamma statistics for every split layer.
inline PathRecord record_epoch(const OptimizerState& st, const Dataset& train, const Dataset& val,
                               std::size_t epoch) {
  PathRecord r;
  r.epoch = epoch;
  std::tie(r.train_loss, r.train_acc) = detail::evaluate(st.net, train);
  std::tie(r.val_loss, r.val_acc) = detail::evaluate(st.net, val);
  bool any_split = false;
  for (const auto& ps : st.params) {
    if (!ps.split()) continue;
    any_split = true;
    LayerPath lp;
    lp.layer = ps.id.layer;
    lp.sparsity = sparsity(ps.gamma);
    lp.gamma_norms = ps.penalty->grouping.group_norms(ps.gamma);
    lp.weight_norms = ps.penalty->grouping.group_norms(param(st.net, ps.id));
    r.layers.push_back(std::move(lp));
  }
  if (any_split && val.size() > 0)
    r.projected_val_acc = detail::evaluate(project_model(st.net, support_mask(st)), val).second;
  else
    r.projected_val_acc = r.val_acc;
  return r;
}

struct GroupEntry {
  std::size_t layer = 0;
  std::size_t group = 0;
  std::optional<std::size_t> entry_epoch;  // nullopt: never active along the path
};

/// First recorded epoch at which each group of each split layer becomes nonzero.
inline std::vector<GroupEntry> inverse_scale_order(const std::vector<PathRecord>& records) {
  if (records.empty()) throw std::invalid_argument("inverse_scale_order: no records");
  std::vector<GroupEntry> out;
  const auto& first = records.front();
  for (std::size_t li = 0; li < first.layers.size(); ++li)
    for (std::size_t g = 0; g < first.layers[li].gamma_norms.size(); ++g) {
      GroupEntry e{first.layers[li].layer, g, std::nullopt};
      for (const auto& r : records)
        if (r.layers.at(li).gamma_norms.at(g) > 0) {
          e.entry_epoch = r.epoch;
          break;
        }
      out.push_back(e);
    }
  return out;
}

inline void write_path_csv(std::ostream& os, const std::vector<PathRecord>& records) {
  os << "epoch,train_loss,train_acc,val_loss,val_acc,projected_val_acc";
  if (!records.empty())
    for (const auto& l : records.front().layers) os << ",sparsity_L" << l.layer;
  os << '\n';
  os.precision(17);
  for (const auto& r : records) {
    os << r.epoch << ',' << r.train_loss << ',' << r.train_acc << ',' << r.val_loss << ',' << r.val_acc << ','
       << r.projected_val_acc;
    for (const auto& l : r.layers) os << ',' << l.sparsity;
    os << '\n';
  }
}

inline void write_entry_order_csv(std::ostream& os, const std::vector<GroupEntry>& order) {
  os << "layer,group,entry_epoch\n";
  for (const auto& e : order)
    os << e.layer << ',' << e.group << ',' << (e.entry_epoch ? std::to_string(*e.entry_epoch) : "never") << '\n';
}

inline nlohmann::json path_to_json(const std::vector<PathRecord>& records) {
  nlohmann::json recs = nlohmann::json::array();
  for (const auto& r : records) {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& l : r.layers)
      layers.push_back({{"layer", l.layer},
                        {"sparsity", l.sparsity},
                        {"gamma_norms", l.gamma_norms},
                        {"weight_norms", l.weight_norms}});
    recs.push_back({{"epoch", r.epoch},
                    {"train_loss", r.train_loss},
                    {"train_acc", r.train_acc},
                    {"val_loss", r.val_loss},
                    {"val_acc", r.val_acc},
                    {"projected_val_acc", r.projected_val_acc},
                    {"layers", layers}});
  }
  return {{"schema_version", kPathSchemaVersion}, {"records", recs}};
}

inline std::vector<PathRecord> path_from_json(const nlohmann::json& j) {
  if (j.at("schema_version").get<int>() != kPathSchemaVersion)
    throw std::runtime_error("path json: unsupported schema_version " + j.at("schema_version").dump());
  std::vector<PathRecord> out;
  for (const auto& jr : j.at("records")) {
    PathRecord r;
    r.epoch = jr.at("epoch").get<std::size_t>();
    r.train_loss = jr.at("train_loss").get<double>();
    r.train_acc = jr.at("train_acc").get<double>();
    r.val_loss = jr.at("val_loss").get<double>();
    r.val_acc = jr.at("val_acc").get<double>();
    r.projected_val_acc = jr.at("projected_val_acc").get<double>();
    for (const auto& jl : jr.at("layers")) {
      LayerPath l;
      l.layer = jl.at("layer").get<std::size_t>();
      l.sparsity = jl.at("sparsity").get<double>();
      l.gamma_norms = jl.at("gamma_norms").get<std::vector<double>>();
      l.weight_norms = jl.at("weight_norms").get<std::vector<double>>();
      r.layers.push_back(std::move(l));
    }
    out.push_back(std::move(r));
  }
  return out;
}

inline nlohmann::json mask_to_json(const Mask& mask) {
  nlohmann::json layers = nlohmann::json::array();
  for (std::size_t l = 0; l < mask.layers.size(); ++l) {
    if (!mask.layers[l]) continue;
    const auto& m = *mask.layers[l];
    layers.push_back({{"layer", l},
                      {"scheme", to_string(m.grouping.scheme())},
                      {"shape", m.grouping.shape()},
                      {"active", m.active}});
  }
  return {{"schema_version", kPathSchemaVersion}, {"num_layers", mask.layers.size()}, {"layers", layers}};
}

inline Mask mask_from_json(const nlohmann::json& j) {
  if (j.at("schema_version").get<int>() != kPathSchemaVersion)
    throw std::runtime_error("mask json: unsupported schema_version " + j.at("schema_version").dump());
  Mask m;
  m.layers.resize(j.at("num_layers").get<std::size_t>());
  for (const auto& jl : j.at("layers")) {
    const auto l = jl.at("layer").get<std::size_t>();
    if (l >= m.layers.size()) throw std::runtime_error("mask json: layer " + std::to_string(l) + " out of range");
    const auto scheme_name = jl.at("scheme").get<std::string>();
    if (scheme_name != "per_element" && scheme_name != "per_filter")
      throw std::runtime_error("mask json: unknown scheme '" + scheme_name + "'");
    Grouping g(scheme_name == "per_filter" ? GroupScheme::per_filter : GroupScheme::per_element,
               jl.at("shape").get<Shape>());
    auto active = jl.at("active").get<std::vector<std::uint8_t>>();
    if (active.size() != g.num_groups())
      throw std::runtime_error("mask json: layer " + std::to_string(l) + " lists " + std::to_string(active.size()) +
                               " groups, grouping has " + std::to_string(g.num_groups()));
    m.layers[l] = GroupMask{std::move(g), std::move(active)};
  }
  return m;
}

}  // namespace dslbi
