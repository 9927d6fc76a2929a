#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "sae/error.hpp"
#include "sae/frame.hpp"
#include "sae/model.hpp"

namespace sae {

enum class Criterion { ml, reml };

/// Fitted two-level random-intercept model y = X b + u_ind + e.
struct MixedFit {
  ModelSpec spec;
  Criterion criterion = Criterion::ml;
  Eigen::VectorXd beta;
  double sigma2_u = 0.0;
  /// homo: {sigma2_e}; by_sc: {sigma2_sc1..sigma2_sc5}; wp2: {sigma2_eps} with var(e_i) = wp_i^4 sigma2_eps
  std::vector<double> level1;
  std::vector<double> u_hat;  ///< per parent domain; 0 for domains without sampled units
  double log_likelihood = 0.0;
  double aic = 0.0;
  double bic = 0.0;
  int parameters = 0;
  std::size_t n = 0;
  bool boundary = false;
  bool converged = false;
  int iterations = 0;

  double unit_variance(const Unit& u) const {
    switch (spec.variance) {
      case VarianceStructure::homo: return level1[0];
      case VarianceStructure::by_sc: return level1[static_cast<std::size_t>(u.sc - 1)];
      case VarianceStructure::wp2: {
        const double w2 = static_cast<double>(u.wp) * static_cast<double>(u.wp);
        return w2 * w2 * level1[0];
      }
    }
    return level1[0];
  }
};

struct InformationCriteria {
  double aic = 0.0;
  double bic = 0.0;
  double log_likelihood = 0.0;
};

inline InformationCriteria information_criteria(const MixedFit& fit) {
  return {fit.aic, fit.bic, fit.log_likelihood};
}

struct LmmOptions {
  int max_iterations = 200;
  double tolerance = 1e-8;  ///< relative log-likelihood change
  /// Optional starting point: {gamma, rho_2, ..., rho_K} where gamma =
  /// sigma2_u / (level-1 scale) and rho_k are level-1 variance ratios to class 1.
  std::optional<std::vector<double>> start;
};

namespace detail {

/// Level-1 variance of unit i is sigma2 * rho_{class(i)} * base_i, with rho_0 = 1.
inline int variance_class(const Unit& u, VarianceStructure v) { return v == VarianceStructure::by_sc ? u.sc - 1 : 0; }

inline double variance_base(const Unit& u, VarianceStructure v) {
  if (v != VarianceStructure::wp2) return 1.0;
  const double w2 = static_cast<double>(u.wp) * static_cast<double>(u.wp);
  return w2 * w2;
}

inline int variance_class_count(VarianceStructure v) { return v == VarianceStructure::by_sc ? kSizeClasses : 1; }

/// Profiled Gaussian (restricted) log-likelihood of the random-intercept
/// model with sigma2 and beta concentrated out. Per-domain Woodbury
/// identities reduce each evaluation to sums over (domain, variance class)
/// sufficient statistics.
class ProfiledLikelihood {
 public:
  struct Value {
    double loglik = -std::numeric_limits<double>::infinity();
    double sigma2 = 0.0;
    Eigen::VectorXd beta;  // scaled-column parametrisation
  };

  ProfiledLikelihood(const Sample& s, const ModelSpec& spec, Criterion criterion)
      : criterion_(criterion), classes_(variance_class_count(spec.variance)) {
    const auto& units = s.units();
    n_ = units.size();
    X_ = design_matrix(units, spec.fixed);
    p_ = static_cast<int>(X_.cols());
    if (n_ <= static_cast<std::size_t>(p_) + 1) throw DataError("too few sampled units for the mixed model");
    col_scale_ = (X_.colwise().squaredNorm() / static_cast<double>(n_)).array().sqrt().transpose();
    for (int j = 0; j < p_; ++j) {
      if (!(col_scale_(j) > 0.0)) throw DataError("rank-deficient design: covariate column " + std::to_string(j) + " is zero");
      X_.col(j) /= col_scale_(j);
    }
    y_ = response(units);

    // compact group ids for the domains present in the sample
    group_of_domain_.assign(s.parent().domain_count(), -1);
    for (std::size_t k = 0; k < n_; ++k) {
      auto& g = group_of_domain_[static_cast<std::size_t>(s.domain_of(k))];
      if (g < 0) {
        g = static_cast<int>(domain_of_group_.size());
        domain_of_group_.push_back(s.domain_of(k));
      }
    }
    G_ = static_cast<int>(domain_of_group_.size());
    if (G_ < 2) throw DataError("at least two domains are needed to identify sigma2_u");

    const std::size_t cells = static_cast<std::size_t>(G_ * classes_);
    A_.assign(cells, Eigen::MatrixXd::Zero(p_, p_));
    b_.assign(cells, Eigen::VectorXd::Zero(p_));
    c_.assign(cells, Eigen::VectorXd::Zero(p_));
    yy_.assign(cells, 0.0);
    ysum_.assign(cells, 0.0);
    t_.assign(cells, 0.0);
    loga_.assign(cells, 0.0);
    cnt_.assign(cells, 0.0);
    class_count_.assign(static_cast<std::size_t>(classes_), 0);
    unit_group_.resize(n_);
    unit_class_.resize(n_);
    base_.resize(n_);
    for (std::size_t k = 0; k < n_; ++k) {
      const int g = group_of_domain_[static_cast<std::size_t>(s.domain_of(k))];
      const int cl = variance_class(units[k], spec.variance);
      const double a = variance_base(units[k], spec.variance);
      unit_group_[k] = g;
      unit_class_[k] = cl;
      base_[k] = a;
      ++class_count_[static_cast<std::size_t>(cl)];
      const std::size_t idx = cell(g, cl);
      const auto x = X_.row(static_cast<Eigen::Index>(k)).transpose();
      const double yk = y_(static_cast<Eigen::Index>(k));
      A_[idx].noalias() += x * x.transpose() / a;
      b_[idx] += x / a;
      c_[idx] += x * (yk / a);
      yy_[idx] += yk * yk / a;
      ysum_[idx] += yk / a;
      t_[idx] += 1.0 / a;
      loga_[idx] += std::log(a);
      cnt_[idx] += 1.0;
    }
    for (int cl = 0; cl < classes_; ++cl)
      if (class_count_[static_cast<std::size_t>(cl)] < 2)
        throw DataError("variance class " + std::to_string(cl + 1) + " has fewer than two sampled units");
    Eigen::MatrixXd Xw = X_;
    for (std::size_t k = 0; k < n_; ++k) Xw.row(static_cast<Eigen::Index>(k)) /= std::sqrt(base_[k]);
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(Xw);
    qr.setThreshold(1e-10);
    if (qr.rank() < p_) throw DataError("rank-deficient design matrix in mixed model");
  }

  int classes() const { return classes_; }
  int p() const { return p_; }
  std::size_t n() const { return n_; }
  int groups() const { return G_; }

  /// theta = {gamma, rho_2..rho_K} in natural units (gamma >= 0, rho > 0).
  Value evaluate(double gamma, const std::vector<double>& rho) const {
    Value v;
    Eigen::MatrixXd XtHX = Eigen::MatrixXd::Zero(p_, p_);
    Eigen::VectorXd XtHy = Eigen::VectorXd::Zero(p_);
    double ytHy = 0.0;
    double logdetH = 0.0;
    Eigen::VectorXd xw(p_);
    for (int g = 0; g < G_; ++g) {
      double td = 0.0, yw = 0.0;
      xw.setZero();
      for (int cl = 0; cl < classes_; ++cl) {
        const std::size_t idx = cell(g, cl);
        if (cnt_[idx] == 0.0) continue;
        const double inv = 1.0 / rho[static_cast<std::size_t>(cl)];
        XtHX.noalias() += A_[idx] * inv;
        XtHy.noalias() += c_[idx] * inv;
        ytHy += yy_[idx] * inv;
        xw.noalias() += b_[idx] * inv;
        yw += ysum_[idx] * inv;
        td += t_[idx] * inv;
        logdetH += loga_[idx] + cnt_[idx] * std::log(rho[static_cast<std::size_t>(cl)]);
      }
      const double tau = gamma / (1.0 + gamma * td);
      XtHX.noalias() -= tau * xw * xw.transpose();
      XtHy.noalias() -= tau * yw * xw;
      ytHy -= tau * yw * yw;
      logdetH += std::log1p(gamma * td);
    }
    Eigen::LLT<Eigen::MatrixXd> llt(XtHX);
    if (llt.info() != Eigen::Success) return v;  // numerically singular at this gamma
    v.beta = llt.solve(XtHy);
    const double rss = std::max(ytHy - XtHy.dot(v.beta), 0.0);
    const double n = static_cast<double>(n_);
    const double dof = criterion_ == Criterion::ml ? n : n - static_cast<double>(p_);
    v.sigma2 = rss / dof;
    if (!(v.sigma2 > 0.0)) return v;
    v.loglik = -0.5 * (dof * std::log(2.0 * std::numbers::pi * v.sigma2) + logdetH + dof);
    if (criterion_ == Criterion::reml) {
      const auto L = llt.matrixL();
      double logdetXHX = 0.0;
      for (int j = 0; j < p_; ++j) logdetXHX += 2.0 * std::log(L(j, j));
      // undo the column scaling so the value is in original units
      logdetXHX += 2.0 * col_scale_.array().log().sum();
      v.loglik -= 0.5 * logdetXHX;
    }
    return v;
  }

  /// Moment-style starting ratios rho_k from OLS residual variances per class.
  std::vector<double> initial_rho() const {
    std::vector<double> rho(static_cast<std::size_t>(classes_), 1.0);
    if (classes_ == 1) return rho;
    Eigen::VectorXd w(static_cast<Eigen::Index>(n_));
    for (std::size_t k = 0; k < n_; ++k) w(static_cast<Eigen::Index>(k)) = 1.0 / base_[k];
    const Eigen::VectorXd b = weighted_least_squares(X_, y_, w);
    const Eigen::VectorXd r = y_ - X_ * b;
    std::vector<double> ss(static_cast<std::size_t>(classes_), 0.0);
    for (std::size_t k = 0; k < n_; ++k)
      ss[static_cast<std::size_t>(unit_class_[k])] += r(static_cast<Eigen::Index>(k)) * r(static_cast<Eigen::Index>(k)) / base_[k];
    std::vector<double> var(static_cast<std::size_t>(classes_));
    for (int cl = 0; cl < classes_; ++cl)
      var[static_cast<std::size_t>(cl)] =
          std::max(ss[static_cast<std::size_t>(cl)] / static_cast<double>(class_count_[static_cast<std::size_t>(cl)]), 1e-300);
    for (int cl = 0; cl < classes_; ++cl) rho[static_cast<std::size_t>(cl)] = var[static_cast<std::size_t>(cl)] / var[0];
    return rho;
  }

  const Eigen::MatrixXd& X() const { return X_; }
  const Eigen::VectorXd& y() const { return y_; }
  const Eigen::VectorXd& col_scale() const { return col_scale_; }
  int unit_group(std::size_t k) const { return unit_group_[k]; }
  int unit_class(std::size_t k) const { return unit_class_[k]; }
  double base(std::size_t k) const { return base_[k]; }
  int domain_of_group(int g) const { return domain_of_group_[static_cast<std::size_t>(g)]; }

 private:
  std::size_t cell(int g, int cl) const { return static_cast<std::size_t>(g * classes_ + cl); }

  Criterion criterion_;
  int classes_;
  std::size_t n_ = 0;
  int p_ = 0;
  int G_ = 0;
  Eigen::MatrixXd X_;
  Eigen::VectorXd y_;
  Eigen::VectorXd col_scale_;
  std::vector<int> group_of_domain_;
  std::vector<int> domain_of_group_;
  std::vector<int> unit_group_;
  std::vector<int> unit_class_;
  std::vector<double> base_;
  std::vector<std::size_t> class_count_;
  std::vector<Eigen::MatrixXd> A_;
  std::vector<Eigen::VectorXd> b_, c_;
  std::vector<double> yy_, ysum_, t_, loga_, cnt_;
};

/// theta = {s, log rho_2..log rho_K}; gamma = s^2 keeps the boundary gamma = 0
/// reachable without constraints.
inline void unpack_theta(const Eigen::VectorXd& theta, double& gamma, std::vector<double>& rho) {
  gamma = theta(0) * theta(0);
  rho.assign(static_cast<std::size_t>(theta.size()), 1.0);
  for (Eigen::Index j = 1; j < theta.size(); ++j) rho[static_cast<std::size_t>(j)] = std::exp(theta(j));
}

}  // namespace detail

/// Fits the random-intercept model by maximising the profiled (restricted)
/// likelihood with damped Newton steps on finite-difference derivatives.
/// Throws DataError for fewer than two sampled domains or a rank-deficient
/// design, and ConvergenceError when the iteration limit is hit.
inline MixedFit fit_lmm(const Sample& s, const ModelSpec& spec, Criterion criterion = Criterion::ml,
                        const LmmOptions& opt = {}) {
  const detail::ProfiledLikelihood prof(s, spec, criterion);
  const int K = prof.classes();
  const auto m = static_cast<Eigen::Index>(K);

  auto f = [&](const Eigen::VectorXd& theta) {
    double gamma;
    std::vector<double> rho;
    detail::unpack_theta(theta, gamma, rho);
    return prof.evaluate(gamma, rho).loglik;
  };

  Eigen::VectorXd theta(m);
  if (opt.start) {
    const auto& st = *opt.start;
    if (st.size() != static_cast<std::size_t>(K)) throw UsageError("start vector must have one entry per variance parameter");
    theta(0) = std::sqrt(std::max(st[0], 0.0));
    for (int j = 1; j < K; ++j) {
      if (!(st[static_cast<std::size_t>(j)] > 0.0)) throw UsageError("starting variance ratios must be positive");
      theta(j) = std::log(st[static_cast<std::size_t>(j)]);
    }
  } else {
    const auto rho0 = prof.initial_rho();
    for (int j = 1; j < K; ++j) theta(j) = std::log(rho0[static_cast<std::size_t>(j)]);
    // coarse scan over log gamma, including the boundary
    double best = -std::numeric_limits<double>::infinity();
    double best_s = 0.0;
    for (int e = -16; e <= 16; ++e) {
      const double s_try = e == -16 ? 0.0 : std::pow(10.0, 0.5 * e);
      theta(0) = s_try;
      const double v = f(theta);
      if (v > best) {
        best = v;
        best_s = s_try;
      }
    }
    theta(0) = best_s;
  }

  double fcur = f(theta);
  if (!std::isfinite(fcur)) throw DataError("log-likelihood is not finite at the starting point");

  auto step_size = [](double t) { return 1e-4 * std::max(std::abs(t), 1e-2); };

  MixedFit fit;
  fit.spec = spec;
  fit.criterion = criterion;
  bool converged = false;
  int it = 0;
  for (; it < opt.max_iterations; ++it) {
    Eigen::VectorXd g(m);
    Eigen::MatrixXd H(m, m);
    std::vector<double> h(static_cast<std::size_t>(m));
    for (Eigen::Index j = 0; j < m; ++j) h[static_cast<std::size_t>(j)] = step_size(theta(j));
    for (Eigen::Index j = 0; j < m; ++j) {
      Eigen::VectorXd tp = theta, tm = theta;
      const double hj = h[static_cast<std::size_t>(j)];
      tp(j) += hj;
      tm(j) -= hj;
      const double fp = f(tp), fm = f(tm);
      g(j) = (fp - fm) / (2.0 * hj);
      H(j, j) = (fp - 2.0 * fcur + fm) / (hj * hj);
    }
    for (Eigen::Index j = 0; j < m; ++j) {
      for (Eigen::Index k = j + 1; k < m; ++k) {
        const double hj = h[static_cast<std::size_t>(j)], hk = h[static_cast<std::size_t>(k)];
        Eigen::VectorXd t1 = theta, t2 = theta, t3 = theta, t4 = theta;
        t1(j) += hj, t1(k) += hk;
        t2(j) += hj, t2(k) -= hk;
        t3(j) -= hj, t3(k) += hk;
        t4(j) -= hj, t4(k) -= hk;
        H(j, k) = H(k, j) = (f(t1) - f(t2) - f(t3) + f(t4)) / (4.0 * hj * hk);
      }
    }

    // Newton direction on -H, shifted until positive definite
    Eigen::MatrixXd negH = -H;
    Eigen::VectorXd dir;
    double shift = 0.0;
    for (int attempt = 0; attempt < 60; ++attempt) {
      Eigen::LLT<Eigen::MatrixXd> llt(negH + shift * Eigen::MatrixXd::Identity(m, m));
      if (llt.info() == Eigen::Success) {
        dir = llt.solve(g);
        break;
      }
      shift = shift == 0.0 ? 1e-8 * (1.0 + negH.diagonal().cwiseAbs().maxCoeff()) : shift * 10.0;
    }
    if (dir.size() == 0) dir = g;

    double t = 1.0;
    Eigen::VectorXd next = theta;
    double fnext = fcur;
    bool improved = false;
    for (int ls = 0; ls < 40; ++ls) {
      const Eigen::VectorXd cand = theta + t * dir;
      const double fc = f(cand);
      if (std::isfinite(fc) && fc >= fcur) {
        next = cand;
        fnext = fc;
        improved = true;
        break;
      }
      t *= 0.5;
    }
    if (!improved) {
      converged = true;  // no ascent direction left at working precision
      break;
    }
    const double df = std::abs(fnext - fcur);
    const double dtheta = (next - theta).cwiseAbs().maxCoeff();
    theta = next;
    fcur = fnext;
    if (df <= opt.tolerance * (1.0 + std::abs(fcur)) && dtheta <= 1e-6 * (1.0 + theta.cwiseAbs().maxCoeff())) {
      converged = true;
      ++it;
      break;
    }
  }
  if (!converged) throw ConvergenceError("mixed model fit did not converge in " + std::to_string(opt.max_iterations) + " iterations");

  double gamma;
  std::vector<double> rho;
  detail::unpack_theta(theta, gamma, rho);
  auto best = prof.evaluate(gamma, rho);
  if (!std::isfinite(best.loglik)) throw ConvergenceError("mixed model fit ended at a singular point");

  const Eigen::VectorXd y = prof.y();
  double var_y = (y.array() - y.mean()).square().sum() / static_cast<double>(y.size() - 1);
  // boundary: compare against the explicit gamma = 0 solution
  const auto at_zero = prof.evaluate(0.0, rho);
  if (gamma * best.sigma2 <= 1e-8 * var_y || at_zero.loglik >= best.loglik) {
    gamma = 0.0;
    best = at_zero;
    fit.boundary = true;
  }

  fit.converged = true;
  fit.iterations = it;
  fit.beta = best.beta.array() / prof.col_scale().array();
  fit.sigma2_u = gamma * best.sigma2;
  fit.level1.resize(static_cast<std::size_t>(K));
  for (int j = 0; j < K; ++j) fit.level1[static_cast<std::size_t>(j)] = best.sigma2 * rho[static_cast<std::size_t>(j)];
  fit.log_likelihood = best.loglik;
  fit.n = prof.n();
  fit.parameters = prof.p() + 1 + K;
  fit.aic = -2.0 * fit.log_likelihood + 2.0 * fit.parameters;
  fit.bic = -2.0 * fit.log_likelihood + fit.parameters * std::log(static_cast<double>(fit.n));

  // BLUP: u_d = sigma2_u 1' V_d^{-1} r_d = gamma * rw_d / (1 + gamma t_d)
  const Eigen::VectorXd r = y - prof.X() * best.beta;
  std::vector<double> rw(static_cast<std::size_t>(prof.groups()), 0.0), td(static_cast<std::size_t>(prof.groups()), 0.0);
  for (std::size_t k = 0; k < prof.n(); ++k) {
    const double D = prof.base(k) * rho[static_cast<std::size_t>(prof.unit_class(k))];
    rw[static_cast<std::size_t>(prof.unit_group(k))] += r(static_cast<Eigen::Index>(k)) / D;
    td[static_cast<std::size_t>(prof.unit_group(k))] += 1.0 / D;
  }
  fit.u_hat.assign(s.parent().domain_count(), 0.0);
  for (int g = 0; g < prof.groups(); ++g)
    fit.u_hat[static_cast<std::size_t>(prof.domain_of_group(g))] =
        gamma * rw[static_cast<std::size_t>(g)] / (1.0 + gamma * td[static_cast<std::size_t>(g)]);
  return fit;
}

/// EBLUP domain totals for every parent domain. Observed-plus-predicted adds
/// the sampled y to predictions for the non-sampled units; all-predicted
/// predicts every unit.
inline std::vector<double> eblup_totals(const MixedFit& fit, const Sample& s, const DomainAux& aux) {
  const Eigen::MatrixXd X = design_matrix(s.units(), fit.spec.fixed);
  const auto sums = sample_domain_sums(s, X);
  std::vector<double> out(aux.count.size());
  for (std::size_t d = 0; d < out.size(); ++d) {
    const double u = fit.u_hat[d];
    const double N = static_cast<double>(aux.count[d]);
    if (fit.spec.prediction == PredictionMode::all_predicted) {
      out[d] = aux.x_total[d].dot(fit.beta) + N * u;
    } else {
      const double n = static_cast<double>(sums.count[d]);
      out[d] = sums.y_sum[d] + (aux.x_total[d] - sums.x_sum[d]).dot(fit.beta) + (N - n) * u;
    }
  }
  return out;
}

inline double eblup_total(const MixedFit& fit, const Sample& s, const std::string& ind) {
  const int d = s.parent().require_domain(ind);
  return eblup_totals(fit, s, domain_aux(s.parent(), fit.spec.fixed))[static_cast<std::size_t>(d)];
}

/// Pieces of the survey-weighted pseudo-EBLUP for one domain.
struct PseudoEblupDomain {
  double weight_sum = 0.0;
  double delta = 0.0;  ///< sum of squared normalised weights
  double gamma = 0.0;  ///< shrinkage factor
  double y_w = 0.0;    ///< weighted domain mean of y
  Eigen::VectorXd x_w; ///< weighted domain mean of x
};

struct PseudoEblupFit {
  Eigen::VectorXd beta_w;
  std::vector<PseudoEblupDomain> domains;  ///< parent domain order; empty domains have weight_sum 0
};

/// Shrinkage gamma = sigma2_u / (sigma2_u + sigma2_e * delta).
inline double pseudo_eblup_gamma(double sigma2_u, double sigma2_e, double delta) {
  return sigma2_u / (sigma2_u + sigma2_e * delta);
}

/// Survey-weighted estimating equation for beta_w with variance components
/// taken from `variance_source`. For non-constant level-1 variances the
/// weighted error variance of the domain mean, sum w~^2 v_i, replaces
/// sigma2_e * delta.
inline PseudoEblupFit fit_pseudo_eblup(const Sample& s, const MixedFit& variance_source) {
  const FixedEffects fx = variance_source.spec.fixed;
  const Eigen::MatrixXd X = design_matrix(s.units(), fx);
  const auto p = X.cols();
  const std::size_t D = s.parent().domain_count();
  PseudoEblupFit out;
  out.domains.assign(D, PseudoEblupDomain{0.0, 0.0, 0.0, 0.0, Eigen::VectorXd::Zero(p)});
  std::vector<double> err_var(D, 0.0);
  for (std::size_t k = 0; k < s.size(); ++k) {
    if (!(s[k].d > 0.0)) throw DataError("zero or negative survey weight for '" + s[k].id + "'");
    auto& dom = out.domains[static_cast<std::size_t>(s.domain_of(k))];
    dom.weight_sum += s[k].d;
  }
  for (std::size_t k = 0; k < s.size(); ++k) {
    const auto d = static_cast<std::size_t>(s.domain_of(k));
    auto& dom = out.domains[d];
    const double wt = s[k].d / dom.weight_sum;
    dom.delta += wt * wt;
    dom.y_w += wt * s[k].tto;
    dom.x_w += wt * X.row(static_cast<Eigen::Index>(k)).transpose();
    err_var[d] += wt * wt * variance_source.unit_variance(s[k]);
  }
  for (std::size_t d = 0; d < D; ++d) {
    auto& dom = out.domains[d];
    if (dom.weight_sum == 0.0) continue;
    const double denom = variance_source.sigma2_u + err_var[d];
    dom.gamma = denom > 0.0 ? variance_source.sigma2_u / denom : 0.0;
  }
  Eigen::MatrixXd M = Eigen::MatrixXd::Zero(p, p);
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(p);
  for (std::size_t k = 0; k < s.size(); ++k) {
    const auto& dom = out.domains[static_cast<std::size_t>(s.domain_of(k))];
    const Eigen::VectorXd x = X.row(static_cast<Eigen::Index>(k)).transpose();
    const Eigen::VectorXd centred = x - dom.gamma * dom.x_w;
    M.noalias() += s[k].d * x * centred.transpose();
    rhs += s[k].d * centred * s[k].tto;
  }
  // column equilibration before the dense solve
  Eigen::VectorXd sc = M.colwise().norm().transpose();
  for (Eigen::Index j = 0; j < p; ++j) {
    if (!(sc(j) > 0.0)) throw DataError("pseudo-EBLUP estimating equation is singular");
    M.col(j) /= sc(j);
  }
  Eigen::FullPivLU<Eigen::MatrixXd> lu(M);
  lu.setThreshold(1e-12);
  if (!lu.isInvertible()) throw DataError("pseudo-EBLUP estimating equation is singular");
  out.beta_w = lu.solve(rhs).array() / sc.array();
  return out;
}

/// Pseudo-EBLUP domain totals: N_d [gamma y_w + (Xbar_d - gamma x_w)' beta_w].
inline std::vector<double> pseudo_eblup_totals(const PseudoEblupFit& fit, const DomainAux& aux) {
  std::vector<double> out(aux.count.size(), 0.0);
  for (std::size_t d = 0; d < out.size(); ++d) {
    const auto& dom = fit.domains[d];
    const double N = static_cast<double>(aux.count[d]);
    out[d] = dom.gamma * N * dom.y_w + (aux.x_total[d] - dom.gamma * N * dom.x_w).dot(fit.beta_w);
  }
  return out;
}

inline double pseudo_eblup_total(const Sample& s, const MixedFit& variance_source, const std::string& ind) {
  const int d = s.parent().require_domain(ind);
  if (s.domain_size(d) == 0) throw DataError("domain '" + ind + "' has no sampled units");
  const auto fit = fit_pseudo_eblup(s, variance_source);
  return pseudo_eblup_totals(fit, domain_aux(s.parent(), variance_source.spec.fixed))[static_cast<std::size_t>(d)];
}

}  // namespace sae
