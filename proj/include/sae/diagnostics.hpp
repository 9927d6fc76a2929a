#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sae/error.hpp"
#include "sae/frame.hpp"
#include "sae/model.hpp"
#include "sae/stats.hpp"

namespace sae {

struct OlsFit {
  Eigen::VectorXd beta;
  Eigen::VectorXd fitted;
  Eigen::VectorXd residuals;
  Eigen::VectorXd leverage;
  double s2 = 0.0;  ///< RSS/(n - p); 0 when saturated
  int p = 0;
  std::size_t n = 0;
};

/// Least squares with hat-matrix diagonal, from a pivoted QR of the
/// column-equilibrated design.
inline OlsFit ols_fit(const Eigen::MatrixXd& X, const Eigen::VectorXd& y) {
  const Eigen::Index n = X.rows(), p = X.cols();
  if (n < p) throw DataError("fewer observations than parameters");
  Eigen::VectorXd scale = X.colwise().norm().transpose();
  for (Eigen::Index j = 0; j < p; ++j)
    if (!(scale(j) > 0.0)) throw DataError("rank-deficient design: column " + std::to_string(j) + " is zero");
  const Eigen::MatrixXd A = X.array().rowwise() / scale.transpose().array();
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(A);
  qr.setThreshold(1e-10);
  if (qr.rank() < p) throw DataError("rank-deficient design matrix");
  OlsFit f;
  f.beta = qr.solve(y).array() / scale.array();
  f.fitted = X * f.beta;
  f.residuals = y - f.fitted;
  const Eigen::MatrixXd Q = qr.householderQ() * Eigen::MatrixXd::Identity(n, p);
  f.leverage = Q.rowwise().squaredNorm();
  f.p = static_cast<int>(p);
  f.n = static_cast<std::size_t>(n);
  f.s2 = n > p ? f.residuals.squaredNorm() / static_cast<double>(n - p) : 0.0;
  return f;
}

inline OlsFit ols_fit(std::span<const Unit> units, const ModelSpec& spec) {
  return ols_fit(design_matrix(units, spec.fixed), response(units));
}

struct CooksDistance {
  std::vector<double> d;
  std::vector<char> undefined;  ///< h_ii = 1 (reported as +inf)
};

/// D_i = r_i^2 h_ii / (p s^2 (1 - h_ii)^2)
inline CooksDistance cooks_distance(const OlsFit& f) {
  CooksDistance c;
  c.d.resize(f.n);
  c.undefined.assign(f.n, 0);
  for (std::size_t i = 0; i < f.n; ++i) {
    const auto k = static_cast<Eigen::Index>(i);
    const double h = f.leverage(k), r = f.residuals(k);
    if (h >= 1.0 - 1e-12) {
      c.d[i] = std::numeric_limits<double>::infinity();
      c.undefined[i] = 1;
    } else if (r == 0.0) {
      c.d[i] = 0.0;
    } else if (!(f.s2 > 0.0)) {
      c.d[i] = std::numeric_limits<double>::infinity();
      c.undefined[i] = 1;
    } else {
      c.d[i] = r * r * h / (f.p * f.s2 * (1.0 - h) * (1.0 - h));
    }
  }
  return c;
}

struct ReductionRule {
  std::optional<std::size_t> top_k;
  std::optional<double> threshold;

  void validate() const {
    if (top_k.has_value() == threshold.has_value()) throw UsageError("give exactly one of top-k or a Cook's distance threshold");
    if (threshold && !(*threshold > 0.0)) throw UsageError("Cook's distance threshold must be positive");
  }
};

struct Reduction {
  Population reduced;
  std::vector<std::string> removed_ids;  ///< in removal order
  std::vector<double> removed_cooks;
};

/// Removes the unit with the largest Cook's distance under the OLS working
/// model, refits, and repeats until k units are gone or the largest
/// distance falls below the threshold. Throws DataError instead of
/// emptying a stratum.
inline Reduction reduce_population(const Population& pop, const ModelSpec& spec, const ReductionRule& rule) {
  rule.validate();
  std::vector<std::size_t> keep(pop.size());
  for (std::size_t i = 0; i < keep.size(); ++i) keep[i] = i;
  std::map<StratumKey, std::size_t> stratum_size;
  for (const auto& s : pop.strata()) stratum_size[s.key] = s.units.size();

  Reduction out;
  const int p = fixed_effect_count(spec.fixed);
  Eigen::MatrixXd X(static_cast<Eigen::Index>(pop.size()), p);
  Eigen::VectorXd y(static_cast<Eigen::Index>(pop.size()));
  while (true) {
    if (rule.top_k && out.removed_ids.size() >= *rule.top_k) break;
    const auto m = static_cast<Eigen::Index>(keep.size());
    X.conservativeResize(m, Eigen::NoChange);
    y.conservativeResize(m);
    for (Eigen::Index k = 0; k < m; ++k) {
      const Unit& u = pop[keep[static_cast<std::size_t>(k)]];
      fill_covariates(u, spec.fixed, X.row(k));
      y(k) = u.tto;
    }
    const auto cd = cooks_distance(ols_fit(X, y));
    const auto worst = static_cast<std::size_t>(std::max_element(cd.d.begin(), cd.d.end()) - cd.d.begin());
    if (rule.threshold && !(cd.d[worst] > *rule.threshold)) break;
    const std::size_t i = keep[worst];
    const StratumKey key{pop.domain_of(i), pop[i].sc};
    if (--stratum_size[key] == 0)
      throw DataError("removing '" + pop[i].id + "' would empty stratum (" + pop[i].ind + ", sc " + std::to_string(pop[i].sc) + ")");
    out.removed_ids.push_back(pop[i].id);
    out.removed_cooks.push_back(cd.d[worst]);
    keep.erase(keep.begin() + static_cast<std::ptrdiff_t>(worst));
  }
  std::vector<Unit> units;
  units.reserve(keep.size());
  for (std::size_t i : keep) units.push_back(pop[i]);
  out.reduced = Population(std::move(units));
  return out;
}

/// (normal quantile at (i - 0.5)/n, i-th smallest residual)
inline std::vector<std::pair<double, double>> qq_data(std::span<const double> residuals) {
  if (residuals.empty()) throw DataError("qq data needs at least one residual");
  std::vector<double> r(residuals.begin(), residuals.end());
  std::sort(r.begin(), r.end());
  const double n = static_cast<double>(r.size());
  std::vector<std::pair<double, double>> out(r.size());
  for (std::size_t i = 0; i < r.size(); ++i) out[i] = {normal_quantile((static_cast<double>(i) + 0.5) / n), r[i]};
  return out;
}

}  // namespace sae
