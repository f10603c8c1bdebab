#pragma once

// Shared problem setups for the unit tests and the acceptance runner.

#include <cmath>
#include <random>
#include <vector>

#include "dslbi/dslbi.hpp"

namespace fixtures {

using namespace dslbi;

inline Tensor random_tensor(const Shape& shape, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> gauss(0.0, sd);
  Tensor t(shape);
  for (double& v : t.values()) v = gauss(rng);
  return t;
}

inline Tensor random_labels(std::size_t n, std::size_t classes, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> pick(0, classes - 1);
  Tensor y(Shape{n});
  for (double& v : y.values()) v = static_cast<double>(pick(rng));
  return y;
}

struct GradCase {
  const char* name;
  std::vector<LayerKind> layers;
  LossKind loss;
  Shape input;      // without the sample axis
  std::size_t out;  // output width
};

/// One network per layer/loss kind combination covered by the gradient check.
inline std::vector<GradCase> grad_cases() {
  using AK = ActivationKind;
  return {
      {"dense_mse", {Dense{5, 3}}, LossKind::mse, {5}, 3},
      {"dense_nobias_ce", {Dense{5, 4, false}}, LossKind::softmax_cross_entropy, {5}, 4},
      {"tanh_mlp_mse", {Dense{4, 6}, Activation{AK::tanh}, Dense{6, 2}}, LossKind::mse, {4}, 2},
      {"sigmoid_mlp_ce", {Dense{4, 6}, Activation{AK::sigmoid}, Dense{6, 3}}, LossKind::softmax_cross_entropy, {4}, 3},
      {"softplus_mlp_ce",
       {Dense{4, 6}, Activation{AK::softplus, 2.0}, Dense{6, 3}},
       LossKind::softmax_cross_entropy,
       {4},
       3},
      {"relu_mlp_ce", {Dense{4, 7}, Activation{AK::relu}, Dense{7, 3}}, LossKind::softmax_cross_entropy, {4}, 3},
      {"conv_flatten_mse",
       {Conv2d{2, 3, 3}, Activation{AK::tanh}, Flatten{}, Dense{3 * 4 * 4, 2}},
       LossKind::mse,
       {2, 4, 4},
       2},
      {"conv_pool_ce",
       {Conv2d{1, 2, 3}, Activation{AK::softplus, 1.0}, MaxPool{}, Flatten{}, Dense{2 * 2 * 2, 3}},
       LossKind::softmax_cross_entropy,
       {1, 4, 4},
       3},
      {"conv5_relu_ce",
       {Conv2d{1, 2, 5}, Activation{AK::relu}, Conv2d{2, 2, 3}, Flatten{}, Dense{2 * 4 * 4, 3}},
       LossKind::softmax_cross_entropy,
       {1, 4, 4},
       3},
  };
}

/// max over tensors of ||a - b||_inf / max(||a||_inf, ||b||_inf, floor).
inline double grad_relative_error(const std::vector<Tensor>& a, const std::vector<Tensor>& b, double floor = 1e-8) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double diff = 0.0, scale = floor;
    for (std::size_t k = 0; k < a[i].size(); ++k) {
      diff = std::max(diff, std::abs(a[i][k] - b[i][k]));
      scale = std::max({scale, std::abs(a[i][k]), std::abs(b[i][k])});
    }
    worst = std::max(worst, diff / scale);
  }
  return worst;
}

inline double grad_check(const GradCase& gc, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Network net = he_init(make_network(gc.layers, gc.loss), seed);
  // nonzero biases so every parameter participates
  for (const auto& id : param_ids(net))
    if (!id.is_weight()) param(net, id) = random_tensor(param(net, id).shape(), rng, 0.1);
  const std::size_t n = 3;
  Shape xs{n};
  xs.insert(xs.end(), gc.input.begin(), gc.input.end());
  const Tensor x = random_tensor(xs, rng);
  const Tensor y = gc.loss == LossKind::mse ? random_tensor(Shape{n, gc.out}, rng) : random_labels(n, gc.out, rng);
  return grad_relative_error(backward(net, x, y), finite_diff_grad(net, x, y, 1e-6));
}

/// Two parameter layers: a conv layer with per-filter groups and a dense head with per-element groups.
struct SplitNetProblem {
  Network net;
  SplitPolicy split;
  Batch batch;
};

inline SplitNetProblem split_net_problem(std::uint64_t seed, double lambda) {
  std::mt19937_64 rng(seed);
  SplitNetProblem p;
  p.net = he_init(make_network({Conv2d{1, 4, 3}, Activation{ActivationKind::softplus, 1.0}, Flatten{},
                                Dense{4 * 4 * 4, 3}},
                               LossKind::softmax_cross_entropy),
                  seed);
  p.split = SplitPolicy::all(p.net, lambda);
  p.batch = {random_tensor(Shape{16, 1, 4, 4}, rng), random_labels(16, 3, rng)};
  return p;
}

/// Full-batch least squares with a single split linear layer, for the convergence checks.
struct LeastSquaresRun {
  double lip = 0.0;
  double alpha = 0.0;
  HyperParams hp;
  OptimizerState initial;
  Batch batch;
};

inline LeastSquaresRun least_squares_setup(double bound_multiple, std::uint64_t seed = 1) {
  LeastSquaresRun r;
  auto prob = gen_sparse_linear(200, 50, 5, 10.0, seed);
  r.batch = {prob.X, prob.y};
  r.lip = lipschitz_least_squares(prob.X);
  r.hp.alpha.drop_every = 0;
  r.alpha = bound_multiple * stepsize_bound(r.lip, r.hp);
  r.hp.alpha.initial = r.alpha;
  Network net = he_init(make_network({Dense{50, 1, false}}, LossKind::mse), seed + 2);
  r.initial = make_state(net, SplitPolicy::all(net, r.hp.lambda), r.hp);
  return r;
}

struct MonitoredRun {
  std::vector<LyapunovRecord> records;
  std::size_t descent_violations = 0;
  std::size_t relerr_violations = 0;
  std::size_t dual_violations = 0;
  double max_dual_excess = -1.0;
  bool diverged = false;
};

inline MonitoredRun run_monitored(const LeastSquaresRun& setup, std::size_t steps, bool reject_unstable = true) {
  MonitorConfig mc;
  mc.lip = setup.lip;
  mc.reject_unstable = reject_unstable;
  ConvergenceMonitor mon(setup.hp, mc);
  OptimizerState st = setup.initial;
  MonitoredRun out;
  try {
    mon.observe(st, setup.batch);
    for (std::size_t k = 0; k < steps; ++k) {
      step_naive(st, setup.batch, setup.hp);
      out.max_dual_excess = std::max(out.max_dual_excess, max_dual_excess(st));
      mon.observe(st, setup.batch);
    }
  } catch (const NonFiniteError&) {
    out.diverged = true;
  }
  out.records = mon.records();
  out.descent_violations = mon.descent_violations() + (out.diverged ? 1 : 0);
  out.relerr_violations = mon.relerr_violations();
  out.dual_violations = mon.dual_violations();
  return out;
}

/// Sparse regression set up for inverse-scale-space support recovery.
inline ExperimentConfig iss_config(std::uint64_t seed) {
  ExperimentConfig c;
  c.dataset.kind = DatasetKind::sparse_linear;
  c.dataset.n = 200;
  c.dataset.p = 50;
  c.dataset.s = 5;
  c.dataset.snr = 10.0;
  c.dataset.seed = seed;
  c.dataset.train_fraction = 1.0;
  c.dataset.val_fraction = 0.0;
  c.layers = {Dense{50, 1, false}};
  c.loss = LossKind::mse;
  c.init_seed = seed;
  c.seed = seed;
  c.hp.kappa = 10.0;
  c.hp.nu = 1.0;
  c.hp.alpha.initial = 0.05;
  c.hp.alpha.drop_every = 0;
  c.epochs = 300;
  c.batch_size = 200;
  return c;
}

/// 20-64-64-4 MLP on Gaussian blobs.
inline ExperimentConfig blobs_mlp_config(std::uint64_t seed) {
  using AK = ActivationKind;
  ExperimentConfig c;
  c.dataset.kind = DatasetKind::blobs;
  c.dataset.n = 1000;
  c.dataset.classes = 4;
  c.dataset.dim = 20;
  c.dataset.separation = 3.0;
  c.dataset.seed = seed;
  c.dataset.train_fraction = 0.7;
  c.dataset.val_fraction = 0.3;
  c.layers = {Dense{20, 64}, Activation{AK::relu}, Dense{64, 64}, Activation{AK::relu}, Dense{64, 4}};
  c.loss = LossKind::softmax_cross_entropy;
  c.init_seed = seed;
  c.seed = seed;
  c.hp.alpha.drop_every = 0;
  c.batch_size = 64;
  return c;
}

inline ExperimentConfig ticket_config(std::uint64_t seed) {
  ExperimentConfig c = blobs_mlp_config(seed);
  c.hp.kappa = 2.0;
  c.hp.nu = 1.0;
  c.hp.alpha.initial = 0.05;
  c.hp.lambda = 0.15;
  c.epochs = 40;
  return c;
}

inline ExperimentConfig trend_config() {
  ExperimentConfig c = blobs_mlp_config(0);
  c.hp.kappa = 1.0;
  c.hp.alpha.initial = 0.1;
  c.hp.lambda = 0.01;
  c.epochs = 20;
  return c;
}

}  // namespace fixtures
