// Acceptance runner: one PASS/FAIL line per criterion, nonzero exit if any criterion fails.
//
// The optional MNIST check runs when DSLBI_MNIST_DIR points at a directory holding
// train-images-idx3-ubyte, train-labels-idx1-ubyte, t10k-images-idx3-ubyte, t10k-labels-idx1-ubyte.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "fixtures.hpp"

using namespace dslbi;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
  bool skipped = false;
};

int failures = 0;
double dual_excess = -1.0;  // max over all runs of max_g ||g^g|| - lambda

void note_dual(double excess) { dual_excess = std::max(dual_excess, excess); }

void note_dual(const OptimizerState& st) {
  for (const auto& ps : st.params)
    if (ps.split()) note_dual(max_group_norm(ps.dual, *ps.penalty) - ps.penalty->lambda);
}

void report(const char* name, double limit_s, const std::function<Outcome()>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (!o.skipped && limit_s > 0 && dt > limit_s) {
    o.pass = false;
    o.detail += "; runtime over " + std::to_string(limit_s) + " s";
  }
  const char* tag = o.skipped ? "SKIP" : (o.pass ? "PASS" : "FAIL");
  if (!o.skipped && !o.pass) ++failures;
  std::printf("%s %s (%.2f s): %s\n", tag, name, dt, o.detail.c_str());
  std::fflush(stdout);
}

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

Outcome prox_correctness() {
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> pick_size(1, 6);
  const double boundary[] = {0.0, 1.0, 1.0 + 1e-12, 1.0 - 1e-12};
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const double lambda = 0.01 + 5.0 * unit(rng);
    const bool conv = trial % 2 == 0;
    const Shape shape = conv ? Shape{static_cast<std::size_t>(pick_size(rng)), 2, 3, 3}
                             : Shape{static_cast<std::size_t>(pick_size(rng)), 4};
    const Penalty p(Grouping(conv ? GroupScheme::per_filter : GroupScheme::per_element, shape), lambda);
    Tensor v = fixtures::random_tensor(shape, rng, lambda);
    // force some groups onto the boundary norms 0, lambda, lambda +- 1e-12
    const auto norms = p.grouping.group_norms(v);
    for (std::size_t i = 0; i < v.size(); ++i) {
      const std::size_t g = p.grouping.group_of(i);
      const int which = static_cast<int>((g + static_cast<std::size_t>(trial)) % 6);
      if (which < 4 && norms[g] > 0) v[i] *= boundary[which] * lambda / norms[g];
    }
    worst = std::max(worst, max_abs_diff(prox(v, p, 1.0), prox_oracle(v, p)));
  }
  return {worst <= 1e-8, "max |closed form - oracle| = " + fmt("%.3e", worst) + " (limit 1e-8) over 1000 pairs"};
}

Outcome gradient_fidelity() {
  double worst = 0.0;
  std::string where;
  for (const auto& gc : fixtures::grad_cases())
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const double e = fixtures::grad_check(gc, seed);
      if (e > worst) worst = e, where = std::string(gc.name) + " seed " + std::to_string(seed);
    }
  return {worst < 1e-5, "max relative error = " + fmt("%.3e", worst) + " (limit 1e-5) at " + where + ", " +
                            std::to_string(fixtures::grad_cases().size()) + " networks x 20 seeds"};
}

Outcome formulation_equivalence() {
  auto prob = fixtures::split_net_problem(7, 0.05);
  HyperParams hp;
  hp.kappa = 2.0;
  hp.nu = 5.0;
  hp.lambda = 0.05;
  hp.alpha.initial = 0.05;
  hp.alpha.drop_every = 0;
  prob.split = SplitPolicy::all(prob.net, hp.lambda);
  OptimizerState a = make_state(prob.net, prob.split, hp);
  OptimizerState b = a;
  double worst = 0.0;
  std::size_t nonzero = 0;
  for (int k = 0; k < 100; ++k) {
    step_naive(a, prob.batch, hp);
    step_reformulated(b, prob.batch, hp);
    note_dual(a);
    note_dual(b);
    for (std::size_t i = 0; i < a.params.size(); ++i) {
      worst = std::max(worst, max_abs_diff(param(a.net, a.params[i].id), param(b.net, b.params[i].id)));
      if (!a.params[i].split()) continue;
      worst = std::max(worst, max_abs_diff(a.params[i].gamma, b.params[i].gamma));
      worst = std::max(worst, max_abs_diff(a.params[i].v, b.params[i].v));
    }
  }
  for (const auto& ps : a.params)
    if (ps.split())
      for (double g : ps.gamma.values()) nonzero += g != 0.0;
  return {worst < 1e-10 && nonzero > 0, "max |W, Gamma, V divergence| = " + fmt("%.3e", worst) +
                                            " (limit 1e-10) over 100 iterations; nonzero Gamma entries at end: " +
                                            std::to_string(nonzero)};
}

fixtures::LeastSquaresRun ls_stable;
fixtures::MonitoredRun stable_run;

Outcome monitor_descent() {
  ls_stable = fixtures::least_squares_setup(0.9);
  stable_run = fixtures::run_monitored(ls_stable, 2000);
  // same relative slack as the descent check: 1e-8 (1 + |F_k|)
  bool monotone = true;
  double rise = 0.0;
  for (std::size_t k = 1; k < stable_run.records.size(); ++k) {
    const double fk = stable_run.records[k - 1].F, fk1 = stable_run.records[k].F;
    rise = std::max(rise, fk1 - fk);
    monotone = monotone && fk1 <= fk + 1e-8 * (1.0 + std::abs(fk));
  }
  note_dual(stable_run.max_dual_excess);

  auto neg = fixtures::least_squares_setup(4.0);
  const auto bad = fixtures::run_monitored(neg, 2000, false);
  const bool ok = stable_run.records.size() == 2001 && stable_run.descent_violations == 0 &&
                  stable_run.relerr_violations == 0 && monotone && bad.descent_violations >= 1;
  return {ok, "alpha = 0.9 x bound (" + fmt("%.4g", ls_stable.alpha) + ", Lip " + fmt("%.4g", ls_stable.lip) +
                  "): descent violations " + std::to_string(stable_run.descent_violations) + ", relative-error violations " +
                  std::to_string(stable_run.relerr_violations) + ", F monotone " + (monotone ? "yes" : "no") +
                  " (largest rise " + fmt("%.2e", rise) + ")" +
                  "; alpha = 4 x bound: " + std::to_string(bad.descent_violations) + " violations" +
                  (bad.diverged ? " (run diverged)" : "")};
}

Outcome rate() {
  if (stable_run.records.size() < 1001) return {false, "stable monitored run missing"};
  const double rho = descent_rho(ls_stable.alpha, ls_stable.lip, ls_stable.hp);
  bool ok = true;
  std::string detail;
  for (std::size_t K : {10, 100, 1000}) {
    const double lhs = check_rate(stable_run.records, K);
    const double rhs = rate_bound(stable_run.records.front(), rho, K);
    ok = ok && lhs <= rhs;
    if (!detail.empty()) detail += "; ";
    detail += "K=" + std::to_string(K) + ": " + fmt("%.3e", lhs) + (lhs <= rhs ? " <= " : " > ") + fmt("%.3e", rhs);
  }
  return {ok, detail};
}

Outcome inverse_scale_space() {
  double iss = 0, lasso = 0, worst = 1;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto cfg = fixtures::iss_config(seed);
    const auto data = materialize(cfg.dataset);
    const auto res = train(cfg, data);
    note_dual(res.max_dual_excess);
    const double s = support_recovery_score(res.records, data.beta);
    iss += s / 20;
    lasso += lasso_support_score(data) / 20;
    worst = std::min(worst, s);
  }
  return {iss >= 0.95 && iss >= lasso - 0.02, "mean support AUC " + fmt("%.4f", iss) + " (limit 0.95), lasso path " +
                                                  fmt("%.4f", lasso) + ", worst seed " + fmt("%.4f", worst)};
}

Outcome winning_ticket() {
  double dense = 0, sparse = 0, density = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto cfg = fixtures::ticket_config(seed);
    const auto data = materialize(cfg.dataset);
    RetrainPlan plan;
    plan.mask_epoch = cfg.epochs / 8;
    plan.epochs = cfg.epochs;
    const auto src = source_run(cfg, data, plan);
    note_dual(src.max_dual_excess);
    const auto r = one_shot_prune_retrain(cfg, data, plan, src);
    dense += r.dense.final_record().val_acc / 5;
    sparse += r.sparse.run.final_record().val_acc / 5;
    density += r.sparse.mask.density() / 5;
  }
  return {density <= 0.30 && sparse >= dense - 0.02,
          "mask from epoch T/8 keeps " + fmt("%.3f", density) + " of weights (limit 0.30); retrained " +
              fmt("%.4f", sparse) + " vs dense " + fmt("%.4f", dense) + " (limit 0.02 below)"};
}

Outcome sparsity_trend() {
  const std::vector<double> kappas{1, 2, 5}, nus{10, 100, 1000};
  const auto cells = ablation_grid(fixtures::trend_config(), kappas, nus, {0, 1, 2, 3, 4});
  double mean[3][3] = {};
  for (const auto& c : cells) {
    note_dual(c.max_dual_excess);
    const auto ki = static_cast<std::size_t>(std::find(kappas.begin(), kappas.end(), c.kappa) - kappas.begin());
    const auto ni = static_cast<std::size_t>(std::find(nus.begin(), nus.end(), c.nu) - nus.begin());
    mean[ki][ni] += c.final_sparsity / 5;
  }
  bool ok = true;
  std::string grid;
  for (std::size_t i = 0; i < 3; ++i) {
    grid += "kappa=" + fmt("%g", kappas[i]) + ":";
    for (std::size_t j = 0; j < 3; ++j) {
      grid += " " + fmt("%.4f", mean[i][j]);
      if (i > 0) ok = ok && mean[i][j] >= mean[i - 1][j];
      if (j > 0) ok = ok && mean[i][j] >= mean[i][j - 1];
    }
    grid += "; ";
  }
  return {ok, "mean nonzero fraction of Gamma over nu = 10, 100, 1000 (kappa * alpha = 0.1): " + grid +
                  "required nondecreasing in kappa and nu"};
}

Outcome mnist() {
  const char* dir = std::getenv("DSLBI_MNIST_DIR");
  namespace fs = std::filesystem;
  if (!dir) return {true, "DSLBI_MNIST_DIR not set", true};
  const fs::path d(dir);
  for (const char* f : {"train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte",
                        "t10k-labels-idx1-ubyte"})
    if (!fs::exists(d / f)) return {true, (d / f).string() + " not found", true};
  ExperimentConfig cfg;
  cfg.dataset.kind = DatasetKind::idx;
  cfg.dataset.images = (d / "train-images-idx3-ubyte").string();
  cfg.dataset.labels = (d / "train-labels-idx1-ubyte").string();
  cfg.dataset.val_images = (d / "t10k-images-idx3-ubyte").string();
  cfg.dataset.val_labels = (d / "t10k-labels-idx1-ubyte").string();
  cfg.layers = {Dense{784, 300}, Activation{ActivationKind::relu}, Dense{300, 100}, Activation{ActivationKind::relu},
                Dense{100, 10}};
  cfg.loss = LossKind::softmax_cross_entropy;
  cfg.hp.variant = Variant::mom_wd;
  cfg.epochs = 20;
  cfg.batch_size = 128;
  const auto res = train(cfg);
  note_dual(res.max_dual_excess);
  double best = 0;
  for (const auto& r : res.records) best = std::max(best, r.val_acc);
  return {!res.diverged && best >= 0.965, "best test accuracy within " + std::to_string(res.records.size() - 1) +
                                            " epochs " + fmt("%.4f", best) + " (target 0.97, tolerance 0.005)"};
}

}  // namespace

int main() {
  report("prox_correctness", 5, prox_correctness);
  report("gradient_fidelity", 30, gradient_fidelity);
  report("formulation_equivalence", 10, formulation_equivalence);
  report("monitor_descent_and_relative_error", 20, monitor_descent);
  report("rate_one_over_K", 0, rate);
  report("inverse_scale_space_ordering", 60, inverse_scale_space);
  report("winning_ticket", 180, winning_ticket);
  report("kappa_nu_sparsity_trend", 600, sparsity_trend);
  report("mnist_mom_wd", 900, mnist);
  report("dual_feasibility", 0, [] {
    return Outcome{dual_excess <= 1e-9, "max over all runs and steps of max_g ||g^g|| - lambda = " +
                                            fmt("%.3e", dual_excess) + " (limit 1e-9)"};
  });
  std::printf("%d criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
