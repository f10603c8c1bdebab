#pragma once

// Lasso regularization path by cyclic coordinate descent, and the ranking score used to compare
// how early true features enter a path.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <vector>

#include "dslbi/tensor.hpp"

namespace dslbi {

/// Area under the ROC curve traced as features enter the model in order of entry time.
/// A true feature entering strictly before a false one scores 1, a tie 1/2 (never-entering
/// features tie with each other). All-true or all-false truth vectors score 1.
inline double support_auc(const std::vector<std::optional<double>>& entry, const std::vector<bool>& truth) {
  if (entry.size() != truth.size()) throw std::invalid_argument("support_auc: entry/truth length mismatch");
  auto t = [](const std::optional<double>& e) { return e ? *e : std::numeric_limits<double>::infinity(); };
  double score = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < entry.size(); ++i) {
    if (!truth[i]) continue;
    for (std::size_t j = 0; j < entry.size(); ++j) {
      if (truth[j]) continue;
      ++pairs;
      const double ti = t(entry[i]), tj = t(entry[j]);
      score += ti < tj ? 1.0 : (ti == tj ? 0.5 : 0.0);
    }
  }
  return pairs ? score / static_cast<double>(pairs) : 1.0;
}

struct LassoPath {
  std::vector<double> lambdas;                 // decreasing
  std::vector<std::vector<double>> coefs;      // one coefficient vector per lambda
  std::vector<std::optional<double>> entry;    // first grid index with a nonzero coefficient
};

/// Minimizes (1/2n)||y - X b||^2 + lambda ||b||_1 on a logarithmic grid from lambda_max down to
/// lambda_max * ratio, warm-starting each point, stopping when the duality gap is below gap_tol.
inline LassoPath lasso_path(const Tensor& X, const Tensor& y, std::size_t grid = 50, double ratio = 1e-3,
                            double gap_tol = 1e-8, std::size_t max_sweeps = 100000) {
  const std::size_t n = X.dim(0), p = X.dim(1);
  if (y.size() != n) throw std::invalid_argument("lasso_path: y length differs from rows of X");
  const double dn = static_cast<double>(n);
  std::vector<double> colsq(p, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < p; ++j) colsq[j] += X[i * p + j] * X[i * p + j] / dn;

  auto xtr = [&](const std::vector<double>& r) {
    std::vector<double> g(p, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < p; ++j) g[j] += X[i * p + j] * r[i];
    return g;
  };

  std::vector<double> r(y.values().begin(), y.values().end());
  double lam_max = 0.0;
  for (double v : xtr(r)) lam_max = std::max(lam_max, std::abs(v) / dn);

  LassoPath path;
  path.entry.assign(p, std::nullopt);
  std::vector<double> b(p, 0.0);
  for (std::size_t k = 0; k < grid; ++k) {
    const double frac = grid > 1 ? static_cast<double>(k) / static_cast<double>(grid - 1) : 0.0;
    const double lam = lam_max * std::pow(ratio, frac);
    for (std::size_t sweep = 0; sweep < max_sweeps; ++sweep) {
      for (std::size_t j = 0; j < p; ++j) {
        if (colsq[j] == 0) continue;
        double rho = 0.0;
        for (std::size_t i = 0; i < n; ++i) rho += X[i * p + j] * r[i];
        rho = rho / dn + colsq[j] * b[j];
        const double nb = (rho > lam ? rho - lam : (rho < -lam ? rho + lam : 0.0)) / colsq[j];
        if (nb != b[j]) {
          const double d = nb - b[j];
          for (std::size_t i = 0; i < n; ++i) r[i] -= d * X[i * p + j];
          b[j] = nb;
        }
      }
      // duality gap with the rescaled residual as dual point
      const auto g = xtr(r);
      double gmax = 0.0, rr = 0.0, ry = 0.0, l1 = 0.0;
      for (double v : g) gmax = std::max(gmax, std::abs(v));
      for (std::size_t i = 0; i < n; ++i) rr += r[i] * r[i], ry += r[i] * y[i];
      for (double v : b) l1 += std::abs(v);
      const double s = gmax > dn * lam ? dn * lam / gmax : 1.0;
      const double primal = rr / (2 * dn) + lam * l1;
      const double dual = (s * ry - 0.5 * s * s * rr) / dn;
      if (primal - dual <= gap_tol) break;
    }
    path.lambdas.push_back(lam);
    path.coefs.push_back(b);
    for (std::size_t j = 0; j < p; ++j)
      if (!path.entry[j] && b[j] != 0.0) path.entry[j] = static_cast<double>(k);
  }
  return path;
}

}  // namespace dslbi
