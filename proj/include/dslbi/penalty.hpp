#pragma once

// Group-lasso penalties, their proximal maps, and subgradient bookkeeping.
//
// Omega_lambda(G) = lambda * sum_g ||G^g||_2. With one coordinate per group this is the lasso.

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "dslbi/tensor.hpp"

namespace dslbi {

enum class GroupScheme { per_element, per_filter };

inline const char* to_string(GroupScheme s) { return s == GroupScheme::per_element ? "per_element" : "per_filter"; }

/// Partition of a tensor's coordinates into disjoint groups.
class Grouping {
 public:
  Grouping() = default;

  /// per_filter groups a [c_out, c_in, k, k] tensor by output filter (c_out groups).
  Grouping(GroupScheme scheme, const Shape& shape) : scheme_(scheme), shape_(shape) {
    const std::size_t total = shape_size(shape);
    group_index_.resize(total);
    if (scheme == GroupScheme::per_element) {
      for (std::size_t i = 0; i < total; ++i) group_index_[i] = i;
      num_groups_ = total;
    } else {
      if (shape.size() != 4)
        throw std::invalid_argument("per_filter grouping needs a [c_out, c_in, k, k] tensor, got " +
                                    shape_str(shape));
      const std::size_t per = total / shape[0];
      for (std::size_t i = 0; i < total; ++i) group_index_[i] = i / per;
      num_groups_ = shape[0];
    }
  }

  GroupScheme scheme() const { return scheme_; }
  const Shape& shape() const { return shape_; }
  std::size_t num_groups() const { return num_groups_; }
  std::size_t group_of(std::size_t coord) const { return group_index_[coord]; }
  const std::vector<std::size_t>& group_index() const { return group_index_; }

  void require_covers(const Tensor& t, const char* what) const {
    if (t.shape() != shape_)
      throw std::invalid_argument(std::string(what) + ": grouping over " + shape_str(shape_) +
                                  " does not cover tensor " + shape_str(t.shape()));
  }

  /// Euclidean norm of every group.
  std::vector<double> group_norms(const Tensor& t) const {
    require_covers(t, "group_norms");
    std::vector<double> sq(num_groups_, 0.0);
    for (std::size_t i = 0; i < t.size(); ++i) sq[group_index_[i]] += t[i] * t[i];
    for (double& v : sq) v = std::sqrt(v);
    return sq;
  }

  std::vector<double> group_dots(const Tensor& a, const Tensor& b) const {
    require_covers(a, "group_dots");
    require_covers(b, "group_dots");
    std::vector<double> d(num_groups_, 0.0);
    for (std::size_t i = 0; i < a.size(); ++i) d[group_index_[i]] += a[i] * b[i];
    return d;
  }

  friend bool operator==(const Grouping& a, const Grouping& b) {
    return a.scheme_ == b.scheme_ && a.shape_ == b.shape_;
  }

 private:
  GroupScheme scheme_ = GroupScheme::per_element;
  Shape shape_;
  std::vector<std::size_t> group_index_;
  std::size_t num_groups_ = 0;
};

struct Penalty {
  Grouping grouping;
  double lambda = 1.0;

  Penalty() = default;
  Penalty(Grouping g, double lam) : grouping(std::move(g)), lambda(lam) {
    if (!(lambda >= 0) || !std::isfinite(lambda)) throw std::invalid_argument("penalty: lambda must be >= 0");
  }
  friend bool operator==(const Penalty&, const Penalty&) = default;
};

inline double penalty_value(const Tensor& gamma, const Penalty& p) {
  double s = 0.0;
  for (double n : p.grouping.group_norms(gamma)) s += n;
  return p.lambda * s;
}

/// kappa * Prox_{Omega_lambda}(v): per group, kappa * max(0, 1 - lambda/||v^g||) * v^g.
inline Tensor prox(const Tensor& v, const Penalty& p, double kappa) {
  if (!(kappa > 0)) throw std::invalid_argument("prox: kappa must be positive");
  const auto norms = p.grouping.group_norms(v);
  std::vector<double> factor(norms.size(), 0.0);
  for (std::size_t g = 0; g < norms.size(); ++g)
    if (norms[g] > 0) factor[g] = kappa * std::max(0.0, 1.0 - p.lambda / norms[g]);
  Tensor out(v.shape());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = factor[p.grouping.group_of(i)] * v[i];
  return out;
}

/// Numeric minimizer of 0.5||G - v||^2 + Omega_lambda(G), independent of the closed form.
///
/// The minimizer of each group lies on the ray through v^g, so each group reduces to the 1-D
/// problem in the radius t >= 0 of minimizing 0.5 (t - ||v^g||)^2 + lambda t. That objective is
/// strongly convex; its minimizer is found by bisection on the sign of the derivative over
/// [0, ||v^g||] until the bracket collapses to adjacent doubles.
inline Tensor prox_oracle(const Tensor& v, const Penalty& p) {
  const auto norms = p.grouping.group_norms(v);
  std::vector<double> radius(norms.size(), 0.0);
  for (std::size_t g = 0; g < norms.size(); ++g) {
    const double r = norms[g];
    if (r == 0) continue;
    auto slope = [&](double t) { return (t - r) + p.lambda; };
    if (slope(0.0) >= 0) continue;  // minimum sits at the origin
    double lo = 0.0, hi = r;
    for (int it = 0; it < 200 && hi - lo > 0; ++it) {
      const double mid = 0.5 * (lo + hi);
      if (mid <= lo || mid >= hi) break;
      (slope(mid) < 0 ? lo : hi) = mid;
    }
    radius[g] = 0.5 * (lo + hi);
  }
  Tensor out(v.shape());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const std::size_t g = p.grouping.group_of(i);
    out[i] = norms[g] > 0 ? radius[g] / norms[g] * v[i] : 0.0;
  }
  return out;
}

inline double max_group_norm(const Tensor& g, const Penalty& p) {
  const auto norms = p.grouping.group_norms(g);
  return norms.empty() ? 0.0 : *std::max_element(norms.begin(), norms.end());
}

/// g lies in the dual ball of Omega_lambda: max_g ||g^g|| <= lambda + tol.
inline bool dual_feasible(const Tensor& g, const Penalty& p, double tol) {
  if (!(tol >= 0)) throw std::invalid_argument("dual_feasible: tol must be >= 0");
  return max_group_norm(g, p) <= p.lambda + tol;
}

/// Is g a subgradient of Omega_lambda at gamma (dual feasible, and <g^g, G^g> = lambda ||G^g|| on
/// active groups), up to tol relative to the group scale.
inline bool is_subgradient(const Tensor& g, const Tensor& gamma, const Penalty& p, double tol) {
  if (!dual_feasible(g, p, tol)) return false;
  const auto norms = p.grouping.group_norms(gamma);
  const auto dots = p.grouping.group_dots(g, gamma);
  for (std::size_t k = 0; k < norms.size(); ++k) {
    if (norms[k] == 0) continue;
    if (std::abs(dots[k] - p.lambda * norms[k]) > tol * (1.0 + p.lambda * norms[k])) return false;
  }
  return true;
}

/// Bregman divergence Omega(G) - Omega(G_ref) - <g_ref, G - G_ref>, with g_ref in dOmega(G_ref).
inline double bregman_div(const Tensor& gamma, const Tensor& gamma_ref, const Tensor& g_ref, const Penalty& p,
                          double tol = 1e-9) {
  require_same_shape(gamma, gamma_ref, "bregman_div");
  require_same_shape(gamma, g_ref, "bregman_div");
  if (!is_subgradient(g_ref, gamma_ref, p, tol))
    throw std::invalid_argument("bregman_div: reference dual is not a subgradient of the penalty at gamma_ref");
  return penalty_value(gamma, p) - penalty_value(gamma_ref, p) - dot(g_ref, gamma - gamma_ref);
}

}  // namespace dslbi
