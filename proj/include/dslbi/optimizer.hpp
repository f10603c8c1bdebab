#pragma once

// Split linearized Bregman iteration over coupled (W, Gamma, V) parameters.
//
// Per split weight tensor, with augmented loss  Lbar(W, G) = L(W) + ||W - G||^2 / (2 nu):
//
//   W <- W - kappa * alpha * dLbar/dW
//   V <- V - alpha * dLbar/dG            (dLbar/dG = (G - W) / nu)
//   G <- kappa * Prox_{Omega}(V)
//
// Tensors that are not split (biases, unsplit layers) follow the same W-rule without the
// coupling term, so kappa * alpha acts as their learning rate.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dslbi/checkpoint.hpp"
#include "dslbi/error.hpp"
#include "dslbi/network.hpp"
#include "dslbi/penalty.hpp"

namespace dslbi {

enum class Variant { naive, mom, mom_wd };

inline const char* to_string(Variant v) {
  switch (v) {
    case Variant::naive: return "naive";
    case Variant::mom: return "mom";
    case Variant::mom_wd: return "mom_wd";
  }
  return "?";
}

/// Piecewise-constant step size. An explicit (epoch, alpha) list wins over the decay rule.
struct AlphaSchedule {
  double initial = 0.1;
  std::size_t drop_every = 30;  // 0 disables the decay
  double drop_factor = 0.1;
  std::vector<std::pair<std::size_t, double>> steps;
  friend bool operator==(const AlphaSchedule&, const AlphaSchedule&) = default;
};

struct HyperParams {
  double kappa = 1.0;
  double nu = 10.0;
  AlphaSchedule alpha;
  double lambda = 1.0;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  Variant variant = Variant::naive;

  void validate() const {
    if (!(kappa > 0)) throw std::invalid_argument("optimizer.kappa must be > 0");
    if (!(nu > 0)) throw std::invalid_argument("optimizer.nu must be > 0");
    if (!(alpha.initial > 0)) throw std::invalid_argument("optimizer.alpha must be > 0");
    if (!(alpha.drop_factor > 0)) throw std::invalid_argument("optimizer.alpha_drop_factor must be > 0");
    for (const auto& [epoch, a] : alpha.steps)
      if (!(a > 0)) throw std::invalid_argument("optimizer.alpha_steps: step size at epoch " +
                                                std::to_string(epoch) + " must be > 0");
    if (!(lambda >= 0)) throw std::invalid_argument("optimizer.lambda must be >= 0");
    if (!(momentum >= 0 && momentum < 1)) throw std::invalid_argument("optimizer.momentum must be in [0, 1)");
    if (!(weight_decay >= 0)) throw std::invalid_argument("optimizer.weight_decay must be >= 0");
  }
  friend bool operator==(const HyperParams&, const HyperParams&) = default;
};

inline double lr_schedule(const HyperParams& hp, std::size_t epoch) {
  const auto& s = hp.alpha;
  if (!s.steps.empty()) {
    double a = s.steps.front().second;
    for (const auto& [e, v] : s.steps)
      if (e <= epoch) a = v;
    return a;
  }
  if (s.drop_every == 0) return s.initial;
  return s.initial * std::pow(s.drop_factor, static_cast<double>(epoch / s.drop_every));
}

/// Largest constant step size admitted by the global convergence condition:
/// alpha < 2 / (kappa * (Lip + 1/nu)).
inline double stepsize_bound(double lip, const HyperParams& hp) {
  if (!(lip > 0)) throw std::invalid_argument("stepsize_bound: Lipschitz constant must be > 0");
  return 2.0 / (hp.kappa * (lip + 1.0 / hp.nu));
}

/// Per-layer choice of which weight tensors get a structural companion Gamma.
struct SplitPolicy {
  std::vector<std::optional<Penalty>> layers;  // indexed by layer; empty => nothing split

  static SplitPolicy none() { return {}; }

  /// Splits every dense/conv weight. Conv filters default to per_filter groups, dense to per_element.
  static SplitPolicy all(const Network& net, double lambda, std::optional<GroupScheme> scheme = std::nullopt) {
    SplitPolicy sp;
    sp.layers.resize(net.layers.size());
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
      const auto& layer = net.layers[l];
      if (!has_params(layer.kind)) continue;
      GroupScheme s = scheme.value_or(std::holds_alternative<Conv2d>(layer.kind) ? GroupScheme::per_filter
                                                                                  : GroupScheme::per_element);
      if (s == GroupScheme::per_filter && !std::holds_alternative<Conv2d>(layer.kind)) s = GroupScheme::per_element;
      sp.layers[l] = Penalty(Grouping(s, layer.params[0].shape()), lambda);
    }
    return sp;
  }

  const Penalty* penalty_for(std::size_t layer) const {
    return layer < layers.size() && layers[layer] ? &*layers[layer] : nullptr;
  }

  bool empty() const {
    for (const auto& p : layers)
      if (p) return false;
    return true;
  }

  void validate(const Network& net) const {
    if (layers.size() > net.layers.size()) throw std::invalid_argument("split policy names more layers than exist");
    for (std::size_t l = 0; l < layers.size(); ++l) {
      if (!layers[l]) continue;
      if (!has_params(net.layers[l].kind))
        throw std::invalid_argument("split policy: layer " + std::to_string(l) + " has no weight to split");
      layers[l]->grouping.require_covers(net.layers[l].params[0], "split policy");
    }
  }
};

/// Optimizer bookkeeping for one trainable tensor. Gamma/V/dual are empty unless split.
struct ParamState {
  ParamId id;
  std::optional<Penalty> penalty;
  Tensor gamma;
  Tensor v;
  Tensor dual;  // g = V - Gamma/kappa, a subgradient of Omega at Gamma
  Tensor velocity;
  bool split() const { return penalty.has_value(); }
};

struct OptimizerState {
  Network net;
  std::vector<ParamState> params;
  std::uint64_t step = 0;
  double alpha = 0.1;
};

inline OptimizerState make_state(Network net, const SplitPolicy& split, const HyperParams& hp) {
  hp.validate();
  split.validate(net);
  OptimizerState st;
  for (const auto& id : param_ids(net)) {
    ParamState ps;
    ps.id = id;
    const Tensor& w = param(net, id);
    ps.velocity = Tensor::zeros_like(w);
    if (id.is_weight())
      if (const Penalty* p = split.penalty_for(id.layer)) {
        ps.penalty = *p;
        ps.gamma = Tensor::zeros_like(w);
        ps.v = Tensor::zeros_like(w);
        ps.dual = Tensor::zeros_like(w);
      }
    st.params.push_back(std::move(ps));
  }
  st.net = std::move(net);
  st.alpha = lr_schedule(hp, 0);
  return st;
}

struct Batch {
  Tensor x;
  Tensor y;
};

/// Gradients of the augmented loss at the current state.
struct AugmentedGrad {
  double loss = 0.0;              // plain batch loss
  std::vector<Tensor> w;          // dLbar/dW (plain gradient on unsplit tensors)
  std::vector<Tensor> gamma;      // dLbar/dGamma, empty on unsplit tensors
};

inline AugmentedGrad grad_augmented(const OptimizerState& st, const Batch& batch, const HyperParams& hp) {
  auto lg = loss_and_gradient(st.net, batch.x, batch.y);
  if (lg.grads.size() != st.params.size()) throw std::invalid_argument("grad_augmented: state/network mismatch");
  AugmentedGrad out;
  out.loss = lg.loss;
  out.w = std::move(lg.grads);
  out.gamma.resize(st.params.size());
  const double inv_nu = 1.0 / hp.nu;
  for (std::size_t i = 0; i < st.params.size(); ++i) {
    const auto& ps = st.params[i];
    if (!ps.split()) continue;
    const Tensor& w = param(st.net, ps.id);
    require_same_shape(w, ps.gamma, "grad_augmented");
    Tensor gg(w.shape());
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double diff = w[k] - ps.gamma[k];
      out.w[i][k] += inv_nu * diff;
      gg[k] = -inv_nu * diff;
    }
    out.gamma[i] = std::move(gg);
  }
  return out;
}

/// Lbar(W, Gamma) = L(W) + sum over split tensors ||W - Gamma||^2 / (2 nu).
inline double augmented_loss(const OptimizerState& st, const Batch& batch, const HyperParams& hp) {
  double l = forward(st.net, batch.x, batch.y).loss;
  for (const auto& ps : st.params)
    if (ps.split()) l += squared_norm(param(st.net, ps.id) - ps.gamma) / (2.0 * hp.nu);
  return l;
}

namespace detail {

inline void require_finite(const Tensor& t, const char* what, std::uint64_t step) {
  if (!t.all_finite())
    throw NonFiniteError(std::string(what) + " became non-finite at step " + std::to_string(step));
}

inline void update_structure(OptimizerState& st, const AugmentedGrad& g, const HyperParams& hp) {
  for (std::size_t i = 0; i < st.params.size(); ++i) {
    auto& ps = st.params[i];
    if (!ps.split()) continue;
    axpy(-st.alpha, g.gamma[i], ps.v);
    ps.gamma = prox(ps.v, *ps.penalty, hp.kappa);
    for (std::size_t k = 0; k < ps.v.size(); ++k) ps.dual[k] = ps.v[k] - ps.gamma[k] / hp.kappa;
    require_finite(ps.v, "V", st.step);
  }
}

inline void require_variant(const HyperParams& hp, Variant v, const char* op) {
  if (hp.variant != v)
    throw std::invalid_argument(std::string(op) + " called with variant " + to_string(hp.variant));
}

}  // namespace detail

inline void step_naive(OptimizerState& st, const Batch& batch, const HyperParams& hp) {
  detail::require_variant(hp, Variant::naive, "step_naive");
  const auto g = grad_augmented(st, batch, hp);
  const double lr = hp.kappa * st.alpha;
  for (std::size_t i = 0; i < st.params.size(); ++i) {
    Tensor& w = param(st.net, st.params[i].id);
    axpy(-lr, g.w[i], w);
    detail::require_finite(w, "W", st.step);
  }
  detail::update_structure(st, g, hp);
  ++st.step;
}

namespace detail {

inline void step_with_momentum(OptimizerState& st, const Batch& batch, const HyperParams& hp, double decay) {
  const auto g = grad_augmented(st, batch, hp);
  const double lr = hp.kappa * st.alpha;
  for (std::size_t i = 0; i < st.params.size(); ++i) {
    auto& ps = st.params[i];
    Tensor& w = param(st.net, ps.id);
    for (std::size_t k = 0; k < w.size(); ++k) {
      ps.velocity[k] = hp.momentum * ps.velocity[k] + g.w[i][k];
      w[k] = w[k] - lr * ps.velocity[k] - decay * w[k];
    }
    require_finite(w, "W", st.step);
  }
  update_structure(st, g, hp);
  ++st.step;
}

}  // namespace detail

/// v <- tau v + dLbar/dW;  W <- W - kappa alpha v. Gamma/V as in the plain iteration.
inline void step_momentum(OptimizerState& st, const Batch& batch, const HyperParams& hp) {
  detail::require_variant(hp, Variant::mom, "step_momentum");
  detail::step_with_momentum(st, batch, hp, 0.0);
}

/// Momentum step with weight decay on W: W <- W - kappa alpha v - beta W (W before the step).
inline void step_momentum_wd(OptimizerState& st, const Batch& batch, const HyperParams& hp) {
  detail::require_variant(hp, Variant::mom_wd, "step_momentum_wd");
  detail::step_with_momentum(st, batch, hp, hp.weight_decay);
}

/// Equivalent iteration carried in (W, Gamma, g):
///
///   Gamma' = Prox_{kappa Omega}(Gamma + kappa (g - alpha dLbar/dGamma))
///   g'     = g - (Gamma' - Gamma + kappa alpha dLbar/dGamma) / kappa
///
/// Valid for 1-homogeneous Omega. V is kept as g + Gamma/kappa for interchangeability.
inline void step_reformulated(OptimizerState& st, const Batch& batch, const HyperParams& hp) {
  detail::require_variant(hp, Variant::naive, "step_reformulated");
  const auto g = grad_augmented(st, batch, hp);
  const double lr = hp.kappa * st.alpha;
  for (std::size_t i = 0; i < st.params.size(); ++i) {
    auto& ps = st.params[i];
    Tensor& w = param(st.net, ps.id);
    axpy(-lr, g.w[i], w);
    detail::require_finite(w, "W", st.step);
    if (!ps.split()) continue;
    const Tensor& gg = g.gamma[i];
    Tensor arg(w.shape());
    for (std::size_t k = 0; k < arg.size(); ++k) arg[k] = ps.gamma[k] + hp.kappa * (ps.dual[k] - st.alpha * gg[k]);
    const Penalty scaled(ps.penalty->grouping, hp.kappa * ps.penalty->lambda);
    Tensor next = prox(arg, scaled, 1.0);
    for (std::size_t k = 0; k < arg.size(); ++k) {
      ps.dual[k] -= (next[k] - ps.gamma[k] + lr * gg[k]) / hp.kappa;
      ps.v[k] = ps.dual[k] + next[k] / hp.kappa;
    }
    ps.gamma = std::move(next);
    detail::require_finite(ps.v, "V", st.step);
  }
  ++st.step;
}

inline void step(OptimizerState& st, const Batch& batch, const HyperParams& hp) {
  switch (hp.variant) {
    case Variant::naive: return step_naive(st, batch, hp);
    case Variant::mom: return step_momentum(st, batch, hp);
    case Variant::mom_wd: return step_momentum_wd(st, batch, hp);
  }
}

inline std::vector<Tensor> gammas(const OptimizerState& st) {
  std::vector<Tensor> out;
  for (const auto& ps : st.params) out.push_back(ps.gamma);
  return out;
}

inline bool duals_feasible(const OptimizerState& st, double tol) {
  for (const auto& ps : st.params)
    if (ps.split() && !dual_feasible(ps.dual, *ps.penalty, tol)) return false;
  return true;
}

inline double max_dual_excess(const OptimizerState& st) {
  double m = -std::numeric_limits<double>::infinity();
  for (const auto& ps : st.params)
    if (ps.split()) m = std::max(m, max_group_norm(ps.dual, *ps.penalty) - ps.penalty->lambda);
  return m;
}

/// Slots: W/b (network), Gamma/V/dual for split weights, velocity/velocity_b.
inline Checkpoint save_state(const OptimizerState& st) {
  Checkpoint ck;
  store_network(ck, st.net);
  for (const auto& ps : st.params) {
    const auto layer = static_cast<std::uint32_t>(ps.id.layer);
    ck.put(layer, ps.id.is_weight() ? "velocity" : "velocity_b", ps.velocity);
    if (!ps.split()) continue;
    ck.put(layer, "Gamma", ps.gamma);
    ck.put(layer, "V", ps.v);
    ck.put(layer, "dual", ps.dual);
  }
  ck.meta["step"] = static_cast<double>(st.step);
  ck.meta["alpha"] = st.alpha;
  return ck;
}

/// Restores into a state built with the same network template and split policy.
inline void load_state(OptimizerState& st, const Checkpoint& ck) {
  restore_network(st.net, ck);
  auto fetch = [&](std::uint32_t layer, const char* name, Tensor& into) {
    const Tensor* t = ck.find(layer, name);
    if (!t) throw std::runtime_error(std::string("checkpoint lacks ") + name + " for layer " + std::to_string(layer));
    require_same_shape(*t, into, "load_state");
    into = *t;
  };
  for (auto& ps : st.params) {
    const auto layer = static_cast<std::uint32_t>(ps.id.layer);
    fetch(layer, ps.id.is_weight() ? "velocity" : "velocity_b", ps.velocity);
    if (!ps.split()) continue;
    fetch(layer, "Gamma", ps.gamma);
    fetch(layer, "V", ps.v);
    fetch(layer, "dual", ps.dual);
  }
  if (auto it = ck.meta.find("step"); it != ck.meta.end()) st.step = static_cast<std::uint64_t>(it->second);
  if (auto it = ck.meta.find("alpha"); it != ck.meta.end()) st.alpha = it->second;
}

}  // namespace dslbi
