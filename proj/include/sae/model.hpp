#pragma once

#include <Eigen/Dense>

#include <span>
#include <string>
#include <vector>

#include "sae/error.hpp"
#include "sae/frame.hpp"

namespace sae {

/// FULL: {1, tax1, sc (4 contrasts), wp, tax1*wp}; REDUCED: {1, tax1, sc (4 contrasts)}.
enum class FixedEffects { full, reduced };

/// Level-1 variance: constant, one variance per size class, or proportional to wp^4.
enum class VarianceStructure { homo, by_sc, wp2 };

enum class PredictionMode { observed_plus_predicted, all_predicted };

struct ModelSpec {
  FixedEffects fixed = FixedEffects::full;
  VarianceStructure variance = VarianceStructure::homo;
  PredictionMode prediction = PredictionMode::observed_plus_predicted;
};

inline int fixed_effect_count(FixedEffects f) { return f == FixedEffects::full ? 8 : 6; }

inline std::vector<std::string> coefficient_names(FixedEffects f) {
  std::vector<std::string> names = {"(intercept)", "tax1", "sc2", "sc3", "sc4", "sc5"};
  if (f == FixedEffects::full) {
    names.emplace_back("wp");
    names.emplace_back("tax1:wp");
  }
  return names;
}

/// Covariate row; size class enters as treatment contrasts with sc = 1 as baseline.
template <typename Row>
void fill_covariates(const Unit& u, FixedEffects f, Row&& row) {
  row(0) = 1.0;
  row(1) = u.tax1;
  for (int k = 2; k <= 5; ++k) row(k) = u.sc == k ? 1.0 : 0.0;
  if (f == FixedEffects::full) {
    row(6) = static_cast<double>(u.wp);
    row(7) = u.tax1 * static_cast<double>(u.wp);
  }
}

inline Eigen::VectorXd covariates(const Unit& u, FixedEffects f) {
  Eigen::VectorXd x(fixed_effect_count(f));
  fill_covariates(u, f, x);
  return x;
}

inline Eigen::MatrixXd design_matrix(std::span<const Unit> units, FixedEffects f) {
  Eigen::MatrixXd X(static_cast<Eigen::Index>(units.size()), fixed_effect_count(f));
  for (std::size_t i = 0; i < units.size(); ++i) fill_covariates(units[i], f, X.row(static_cast<Eigen::Index>(i)));
  return X;
}

inline Eigen::VectorXd response(std::span<const Unit> units) {
  Eigen::VectorXd y(static_cast<Eigen::Index>(units.size()));
  for (std::size_t i = 0; i < units.size(); ++i) y(static_cast<Eigen::Index>(i)) = units[i].tto;
  return y;
}

inline Eigen::VectorXd design_weights(std::span<const Unit> units) {
  Eigen::VectorXd w(static_cast<Eigen::Index>(units.size()));
  for (std::size_t i = 0; i < units.size(); ++i) w(static_cast<Eigen::Index>(i)) = units[i].d;
  return w;
}

/// Population-level auxiliary totals per domain: N_d, sum of covariates, and
/// the true total of tto.
struct DomainAux {
  FixedEffects fixed = FixedEffects::full;
  std::vector<std::size_t> count;
  std::vector<Eigen::VectorXd> x_total;
  std::vector<double> y_total;
};

inline DomainAux domain_aux(const Population& pop, FixedEffects f) {
  DomainAux a;
  a.fixed = f;
  const auto D = pop.domain_count();
  a.count.assign(D, 0);
  a.x_total.assign(D, Eigen::VectorXd::Zero(fixed_effect_count(f)));
  a.y_total.assign(D, 0.0);
  Eigen::VectorXd x(fixed_effect_count(f));
  for (std::size_t i = 0; i < pop.size(); ++i) {
    const auto d = static_cast<std::size_t>(pop.domain_of(i));
    fill_covariates(pop[i], f, x);
    a.x_total[d] += x;
    a.y_total[d] += pop[i].tto;
    ++a.count[d];
  }
  return a;
}

/// Per-domain sums over a sample: n_d, sum x, sum y.
struct SampleDomainSums {
  std::vector<std::size_t> count;
  std::vector<Eigen::VectorXd> x_sum;
  std::vector<double> y_sum;
};

inline SampleDomainSums sample_domain_sums(const Sample& s, const Eigen::MatrixXd& X) {
  SampleDomainSums out;
  const auto D = s.parent().domain_count();
  out.count.assign(D, 0);
  out.x_sum.assign(D, Eigen::VectorXd::Zero(X.cols()));
  out.y_sum.assign(D, 0.0);
  for (std::size_t k = 0; k < s.size(); ++k) {
    const auto d = static_cast<std::size_t>(s.domain_of(k));
    out.x_sum[d] += X.row(static_cast<Eigen::Index>(k)).transpose();
    out.y_sum[d] += s[k].tto;
    ++out.count[d];
  }
  return out;
}

/// Weighted least squares solution of min sum w_i (y_i - x_i'b)^2 through a
/// column-equilibrated pivoted QR. Throws DataError when the weighted design
/// is rank deficient.
inline Eigen::VectorXd weighted_least_squares(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                                              const Eigen::VectorXd& w) {
  const Eigen::VectorXd sw = w.array().sqrt();
  Eigen::MatrixXd A = X.array().colwise() * sw.array();
  Eigen::VectorXd scale = A.colwise().norm().transpose();
  for (Eigen::Index j = 0; j < scale.size(); ++j) {
    if (!(scale(j) > 0.0)) throw DataError("rank-deficient design: column " + std::to_string(j) + " is zero");
    A.col(j) /= scale(j);
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(A);
  qr.setThreshold(1e-10);
  if (qr.rank() < A.cols()) throw DataError("rank-deficient design matrix");
  Eigen::VectorXd b = qr.solve((y.array() * sw.array()).matrix());
  return b.array() / scale.array();
}

/// Same solution through the equilibrated normal equations. Much cheaper
/// than the QR route for tall designs; used inside iterative fits, which
/// fall back to the QR route if the Cholesky factorisation fails.
inline Eigen::VectorXd weighted_normal_equations(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, const Eigen::VectorXd& w) {
  const Eigen::MatrixXd WX = X.array().colwise() * w.array();
  Eigen::MatrixXd M = X.transpose() * WX;
  Eigen::VectorXd rhs = WX.transpose() * y;
  const Eigen::VectorXd d = M.diagonal().cwiseSqrt();
  for (Eigen::Index j = 0; j < d.size(); ++j)
    if (!(d(j) > 0.0)) return weighted_least_squares(X, y, w);
  M = d.cwiseInverse().asDiagonal() * M * d.cwiseInverse().asDiagonal();
  Eigen::LLT<Eigen::MatrixXd> llt(M);
  const double min_pivot = llt.info() == Eigen::Success ? llt.matrixLLT().diagonal().minCoeff() : 0.0;
  if (!(min_pivot > 1e-7)) return weighted_least_squares(X, y, w);
  return llt.solve(rhs.cwiseQuotient(d)).cwiseQuotient(d);
}

inline Eigen::VectorXd ordinary_least_squares(const Eigen::MatrixXd& X, const Eigen::VectorXd& y) {
  return weighted_least_squares(X, y, Eigen::VectorXd::Ones(X.rows()));
}

}  // namespace sae
