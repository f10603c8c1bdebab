#pragma once

// Self-contained property suites run by `dslbi_cli verify`.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "dslbi/data.hpp"
#include "dslbi/monitor.hpp"
#include "dslbi/network.hpp"
#include "dslbi/optimizer.hpp"
#include "dslbi/penalty.hpp"

namespace dslbi {

struct SuiteResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

namespace detail {

inline Tensor gaussian(const Shape& shape, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> g(0.0, sd);
  Tensor t(shape);
  for (double& v : t.values()) v = g(rng);
  return t;
}

inline Tensor class_labels(std::size_t n, std::size_t classes, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> pick(0, classes - 1);
  Tensor y(Shape{n});
  for (double& v : y.values()) v = static_cast<double>(pick(rng));
  return y;
}

inline std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3e", v);
  return buf;
}

}  // namespace detail

inline SuiteResult verify_prox(std::uint64_t seed, int trials = 300) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  double worst = 0.0;
  for (int t = 0; t < trials; ++t) {
    const double lambda = 0.05 + 3.0 * unit(rng);
    const Shape shape{3, 2, 3, 3};
    const Penalty p(Grouping(t % 2 ? GroupScheme::per_filter : GroupScheme::per_element, shape), lambda);
    Tensor v = detail::gaussian(shape, rng, lambda);
    if (t % 3 == 0) {
      const auto norms = p.grouping.group_norms(v);
      for (std::size_t i = 0; i < v.size(); ++i) v[i] *= lambda / norms[p.grouping.group_of(i)];
    }
    worst = std::max(worst, max_abs_diff(prox(v, p, 1.0), prox_oracle(v, p)));
  }
  return {"prox_oracle", worst <= 1e-8, "max deviation " + detail::sci(worst) + " over " + std::to_string(trials)};
}

inline SuiteResult verify_gradients(std::uint64_t seed) {
  using AK = ActivationKind;
  struct Case {
    std::vector<LayerKind> layers;
    LossKind loss;
    Shape x;
    std::size_t out;
  };
  const std::vector<Case> cases = {
      {{Dense{4, 5}, Activation{AK::tanh}, Dense{5, 2}}, LossKind::mse, {3, 4}, 2},
      {{Dense{4, 5}, Activation{AK::softplus, 2.0}, Dense{5, 3}}, LossKind::softmax_cross_entropy, {3, 4}, 3},
      {{Dense{4, 5}, Activation{AK::sigmoid}, Activation{AK::relu}, Dense{5, 3}}, LossKind::softmax_cross_entropy, {3, 4}, 3},
      {{Conv2d{1, 2, 3}, Activation{AK::tanh}, MaxPool{}, Flatten{}, Dense{8, 3}},
       LossKind::softmax_cross_entropy,
       {3, 1, 4, 4},
       3},
  };
  double worst = 0.0;
  for (std::uint64_t s = 0; s < 5; ++s)
    for (const auto& c : cases) {
      std::mt19937_64 rng(seed * 101 + s);
      Network net = he_init(make_network(c.layers, c.loss), seed + s);
      const Tensor x = detail::gaussian(c.x, rng);
      const Tensor y = c.loss == LossKind::mse ? detail::gaussian(Shape{c.x[0], c.out}, rng)
                                               : detail::class_labels(c.x[0], c.out, rng);
      const auto a = backward(net, x, y);
      const auto b = finite_diff_grad(net, x, y, 1e-6);
      for (std::size_t i = 0; i < a.size(); ++i) {
        const double scale = std::max({1e-8, norm(a[i]), norm(b[i])});
        worst = std::max(worst, norm(a[i] - b[i]) / scale);
      }
    }
  return {"gradient_check", worst < 1e-5, "max relative error " + detail::sci(worst)};
}

inline SuiteResult verify_formulations(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Network net = he_init(make_network({Conv2d{1, 3, 3}, Activation{ActivationKind::tanh}, Flatten{}, Dense{48, 3}},
                                     LossKind::softmax_cross_entropy),
                        seed);
  HyperParams hp;
  hp.kappa = 2.0;
  hp.nu = 5.0;
  hp.lambda = 0.05;
  hp.alpha.initial = 0.05;
  const Batch batch{detail::gaussian(Shape{12, 1, 4, 4}, rng), detail::class_labels(12, 3, rng)};
  OptimizerState a = make_state(net, SplitPolicy::all(net, hp.lambda), hp);
  OptimizerState b = a;
  double worst = 0.0;
  for (int k = 0; k < 60; ++k) {
    step_naive(a, batch, hp);
    step_reformulated(b, batch, hp);
    for (std::size_t i = 0; i < a.params.size(); ++i) {
      worst = std::max(worst, max_abs_diff(param(a.net, a.params[i].id), param(b.net, b.params[i].id)));
      if (a.params[i].split()) worst = std::max(worst, max_abs_diff(a.params[i].gamma, b.params[i].gamma));
    }
  }
  return {"formulation_equivalence", worst < 1e-10, "max divergence " + detail::sci(worst) + " over 60 steps"};
}

inline SuiteResult verify_monitor(std::uint64_t seed) {
  auto prob = gen_sparse_linear(120, 30, 4, 10.0, seed);
  const Batch batch{prob.X, prob.y};
  const double lip = lipschitz_least_squares(prob.X);
  auto run = [&](double multiple, bool& diverged) {
    HyperParams hp;
    hp.alpha.drop_every = 0;
    hp.alpha.initial = multiple * stepsize_bound(lip, hp);
    Network net = he_init(make_network({Dense{30, 1, false}}, LossKind::mse), seed);
    OptimizerState st = make_state(net, SplitPolicy::all(net, hp.lambda), hp);
    MonitorConfig mc;
    mc.lip = lip;
    mc.reject_unstable = multiple < 1.0;
    ConvergenceMonitor mon(hp, mc);
    diverged = false;
    try {
      mon.observe(st, batch);
      for (int k = 0; k < 400; ++k) {
        step_naive(st, batch, hp);
        mon.observe(st, batch);
      }
    } catch (const NonFiniteError&) {
      diverged = true;
    }
    return mon.descent_violations() + mon.relerr_violations() + mon.dual_violations() + (diverged ? 1 : 0);
  };
  bool d1 = false, d2 = false;
  const std::size_t clean = run(0.9, d1);
  const std::size_t control = run(4.0, d2);
  return {"monitor_negative_control", clean == 0 && control > 0,
          std::to_string(clean) + " violations at 0.9 x bound, " + std::to_string(control) + " at 4 x bound"};
}

inline std::vector<SuiteResult> run_verification(std::uint64_t seed = 0) {
  return {verify_prox(seed), verify_gradients(seed), verify_formulations(seed), verify_monitor(seed)};
}

}  // namespace dslbi
