#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "sae/error.hpp"
#include "sae/frame.hpp"
#include "sae/mixed.hpp"
#include "sae/model.hpp"
#include "sae/stats.hpp"

namespace sae {

struct HuberConfig {
  double b = 1.345;

  void validate() const {
    if (!(b > 0.0) || std::isnan(b)) throw UsageError("Huber tuning constant must be positive");
  }
};

/// psi(a) = a min(1, b/|a|)
inline double huber_psi(double a, double b) {
  const double m = std::abs(a);
  return m <= b ? a : std::copysign(b, a);
}

inline double huber_psi(double a, const HuberConfig& cfg) { return huber_psi(a, cfg.b); }

/// IRLS weight psi(r)/r = min(1, b/|r|), with weight 1 at r = 0.
inline double huber_weight(double r, double b) {
  const double m = std::abs(r);
  return m <= b ? 1.0 : b / m;
}

/// E[psi_b(Z)^2] for standard normal Z.
inline double huber_consistency(double b) {
  const double tail = 1.0 - normal_cdf(b);
  return (1.0 - 2.0 * tail) - 2.0 * b * normal_pdf(b) + 2.0 * b * b * tail;
}

struct IrlsOptions {
  int max_iterations = 500;
  double tolerance = 1e-8;  ///< relative coefficient change
  bool newton = true;  ///< take a safeguarded Newton step at the current scale when it lowers the objective
};

namespace detail {

inline double huber_rho(double u, double b) {
  const double a = std::abs(u);
  return a <= b ? 0.5 * u * u : b * a - 0.5 * b * b;
}

inline double asymmetric_objective(const Eigen::VectorXd& r, double s, double q, double b, const Eigen::VectorXd& base_w) {
  double f = 0.0;
  for (Eigen::Index i = 0; i < r.size(); ++i) {
    const double u = r(i) / s;
    f += base_w(i) * (u > 0.0 ? q : 1.0 - q) * huber_rho(u, b);
  }
  return f;
}

/// Chooses between the reweighted solution and a backtracked Newton step of
/// the asymmetric Huber objective at scale s, whichever is lower.
inline Eigen::VectorXd newton_candidate(const Eigen::MatrixXd& X, const Eigen::VectorXd& r, double s, double q, double b,
                                        const Eigen::VectorXd& base_w, const Eigen::VectorXd& x,
                                        const Eigen::VectorXd& reweighted) {
  const Eigen::Index n = X.rows();
  Eigen::VectorXd curv(n), grad(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double u = r(i) / s;
    const double c = base_w(i) * (u > 0.0 ? q : 1.0 - q);
    curv(i) = std::abs(u) <= b ? c : 0.0;
    grad(i) = c * huber_psi(u, b) * s;
  }
  Eigen::MatrixXd M = X.transpose() * (X.array().colwise() * curv.array()).matrix();
  const Eigen::VectorXd d = M.diagonal().cwiseSqrt();
  for (Eigen::Index j = 0; j < d.size(); ++j)
    if (!(d(j) > 0.0)) return reweighted;
  M = d.cwiseInverse().asDiagonal() * M * d.cwiseInverse().asDiagonal();
  Eigen::LLT<Eigen::MatrixXd> llt(M);
  if (llt.info() != Eigen::Success || !(llt.matrixLLT().diagonal().minCoeff() > 1e-7)) return reweighted;
  const Eigen::VectorXd step = llt.solve((X.transpose() * grad).cwiseQuotient(d)).cwiseQuotient(d);
  const Eigen::VectorXd y = r + X * x;
  const double f_rw = asymmetric_objective(y - X * reweighted, s, q, b, base_w);
  double alpha = 1.0;
  for (int k = 0; k < 4; ++k, alpha *= 0.5) {
    const Eigen::VectorXd cand = x + alpha * step;
    if (asymmetric_objective(y - X * cand, s, q, b, base_w) < f_rw) return cand;
  }
  return reweighted;
}

}  // namespace detail

/// Result of one (asymmetric) Huber IRLS fit.
struct RobustFit {
  Eigen::VectorXd beta;
  double scale = 0.0;
  double q = 0.5;
  int iterations = 0;
  bool converged = false;
  bool degenerate_scale = false;  ///< residual MAD collapsed to zero at some iteration
};

/// Solves sum psi_q((y_i - x_i'b)/s) x_i [w_i] = 0 with
/// psi_q(r) = 2 psi(r) (q 1{r>0} + (1-q) 1{r<=0}) by iteratively reweighted
/// least squares. The scale s = median|r|/0.6745 is re-estimated from the
/// current residuals on every iteration. Survey weights, when given,
/// multiply the IRLS weights. Throws ConvergenceError when the iteration
/// limit is reached.
inline RobustFit irls_huber(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, double q, double b,
                            const Eigen::VectorXd* survey_weights = nullptr, const Eigen::VectorXd* start = nullptr,
                            const IrlsOptions& opt = {}) {
  if (!(q > 0.0 && q < 1.0)) throw UsageError("quantile order must lie in (0,1)");
  if (!(b > 0.0)) throw UsageError("Huber tuning constant must be positive");
  const Eigen::Index n = X.rows();
  const Eigen::VectorXd base_w = survey_weights ? *survey_weights : Eigen::VectorXd::Ones(n);
  const double ymax = y.cwiseAbs().maxCoeff();
  const double scale_floor = 1e-12 * (1.0 + ymax);
  const double abs_floor = 1e-6 * (ymax > 0.0 ? ymax : 1.0);
  Eigen::VectorXd colscale = X.colwise().norm().transpose() / std::sqrt(static_cast<double>(std::max<Eigen::Index>(n, 1)));
  for (Eigen::Index j = 0; j < colscale.size(); ++j)
    if (!(colscale(j) > 0.0)) colscale(j) = 1.0;

  RobustFit fit;
  fit.q = q;
  Eigen::VectorXd x = start ? *start : weighted_least_squares(X, y, base_w);
  Eigen::VectorXd w(n);
  std::vector<double> res(static_cast<std::size_t>(n));
  double step = 1.0;
  Eigen::VectorXd last_move;
  for (int it = 1; it <= opt.max_iterations; ++it) {
    const Eigen::VectorXd r = y - X * x;
    for (Eigen::Index i = 0; i < n; ++i) res[static_cast<std::size_t>(i)] = r(i);
    double s = mad_about_zero(res);
    if (!(s > 0.0)) {
      fit.degenerate_scale = true;
      if (r.cwiseAbs().maxCoeff() <= 1e-14 * (1.0 + ymax)) {
        // exact fit: every estimating equation is already zero
        fit.beta = x;
        fit.scale = 0.0;
        fit.iterations = it - 1;
        fit.converged = true;
        return fit;
      }
      s = scale_floor;
    }
    fit.scale = s;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double u = r(i) / s;
      const double asym = u > 0.0 ? q : 1.0 - q;
      w(i) = base_w(i) * 2.0 * asym * huber_weight(u, b);
    }
    const Eigen::VectorXd next = weighted_normal_equations(X, y, w);
    const double change = ((next - x).array() * colscale.array()).abs().maxCoeff();
    const double size = (next.array() * colscale.array()).abs().maxCoeff();
    fit.beta = next;
    fit.iterations = it;
    if (change <= opt.tolerance * std::max(size, abs_floor)) {
      fit.converged = true;
      return fit;
    }
    const Eigen::VectorXd target = opt.newton ? detail::newton_candidate(X, r, s, q, b, base_w, x, next) : next;
    // the scale update can make the joint map flip back and forth; shorten steps when it does
    const Eigen::VectorXd move = (target - x).cwiseProduct(colscale);
    if (last_move.size() > 0 && move.dot(last_move) < 0.0 && move.norm() > 0.5 * last_move.norm())
      step = std::max(step * 0.5, 1.0 / 64.0);
    else if (last_move.size() > 0 && move.dot(last_move) > 0.0)
      step = std::min(step * 1.25, 1.0);
    last_move = move;
    x += step * (target - x);
  }
  throw ConvergenceError("IRLS did not converge at q = " + csv::fmt(q) + " after " + std::to_string(opt.max_iterations) +
                         " iterations");
}

/// Huber M-regression on the fixed part of the model (no domain terms).
inline RobustFit fit_mreg(const Sample& s, const ModelSpec& spec, const HuberConfig& cfg = {}, const IrlsOptions& opt = {}) {
  cfg.validate();
  const Eigen::MatrixXd X = design_matrix(s.units(), spec.fixed);
  const Eigen::VectorXd y = response(s.units());
  return irls_huber(X, y, 0.5, cfg.b, nullptr, nullptr, opt);
}

/// Robust synthetic totals: observed y plus x'beta for the non-sampled units.
inline std::vector<double> robust_synthetic_totals(const RobustFit& fit, const Sample& s, const DomainAux& aux) {
  const Eigen::MatrixXd X = design_matrix(s.units(), aux.fixed);
  const auto sums = sample_domain_sums(s, X);
  std::vector<double> out(aux.count.size());
  for (std::size_t d = 0; d < out.size(); ++d) out[d] = sums.y_sum[d] + (aux.x_total[d] - sums.x_sum[d]).dot(fit.beta);
  return out;
}

inline double robust_synthetic_total(const RobustFit& fit, const Sample& s, const ModelSpec& spec, const std::string& ind) {
  const int d = s.parent().require_domain(ind);
  return robust_synthetic_totals(fit, s, domain_aux(s.parent(), spec.fixed))[static_cast<std::size_t>(d)];
}

// ---------------------------------------------------------------------------
// Robust EBLUP

struct RobustMixedFit {
  ModelSpec spec;
  Eigen::VectorXd beta_psi;
  double sigma2_u_psi = 0.0;
  std::vector<double> level1;  ///< same layout as MixedFit::level1
  std::vector<double> u_hat_psi;  ///< per parent domain
  bool boundary = false;
  bool converged = false;
  int iterations = 0;

  double sigma2_e_psi() const { return level1.front(); }
};

struct ReblupOptions {
  int max_iterations = 1000;
  double tolerance = 1e-8;
  double boundary_tolerance = 1e-8;  ///< sigma2_u below this fraction of var(y) counts as zero
  std::optional<MixedFit> start;     ///< initial values; defaults to the ML fit
};

namespace detail {

/// Per-domain root of the psi-modified Fellner equation
/// sum_i psi((e_i - u)/sd_i)/sd_i - psi(u/sd_u)/sd_u = 0 (decreasing in u).
inline double fellner_root(const std::vector<double>& e, const std::vector<double>& sd, double sd_u, double b) {
  auto F = [&](double u) {
    double v = -huber_psi(u / sd_u, b) / sd_u;
    for (std::size_t i = 0; i < e.size(); ++i) v += huber_psi((e[i] - u) / sd[i], b) / sd[i];
    return v;
  };
  double span = sd_u;
  for (std::size_t i = 0; i < e.size(); ++i) span = std::max(span, std::abs(e[i]) + b * sd[i]);
  double lo = -span, hi = span;
  while (F(lo) < 0.0) lo *= 2.0;
  while (F(hi) > 0.0) hi *= 2.0;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    const double fm = F(mid);
    if (fm > 0.0) lo = mid;
    else hi = mid;
    if (hi - lo <= 1e-15 * std::max(1.0, std::abs(mid))) break;
  }
  return 0.5 * (lo + hi);
}

}  // namespace detail

/// Robust EBLUP fit: Huberised ML estimating equations for beta and the
/// variance components (fixed-point form theta = A^{-1} a with consistency
/// constant c = E[psi^2(Z)]), then robust random effects from the
/// psi-modified Fellner equations. sigma2_u is projected to zero when the
/// solution leaves the parameter space, and the boundary flag is raised.
/// Non-convergence is reported through `converged`, not thrown.
inline RobustMixedFit fit_reblup(const Sample& s, const ModelSpec& spec, const HuberConfig& cfg = {},
                                 const ReblupOptions& opt = {}) {
  cfg.validate();
  const double b = cfg.b;
  const auto& units = s.units();
  const std::size_t n = units.size();
  const Eigen::MatrixXd Xraw = design_matrix(units, spec.fixed);
  const Eigen::Index p = Xraw.cols();
  Eigen::VectorXd colscale = (Xraw.colwise().squaredNorm() / static_cast<double>(n)).array().sqrt().transpose();
  for (Eigen::Index j = 0; j < p; ++j)
    if (!(colscale(j) > 0.0)) throw DataError("rank-deficient design: covariate column " + std::to_string(j) + " is zero");
  const Eigen::MatrixXd X = Xraw.array().rowwise() / colscale.transpose().array();
  const Eigen::VectorXd y = response(units);
  const double var_y = (y.array() - y.mean()).square().sum() / static_cast<double>(n - 1);

  // groups present in the sample
  std::vector<int> group_of_domain(s.parent().domain_count(), -1);
  std::vector<int> domain_of_group;
  std::vector<int> grp(n);
  for (std::size_t k = 0; k < n; ++k) {
    auto& g = group_of_domain[static_cast<std::size_t>(s.domain_of(k))];
    if (g < 0) {
      g = static_cast<int>(domain_of_group.size());
      domain_of_group.push_back(s.domain_of(k));
    }
    grp[k] = g;
  }
  const int G = static_cast<int>(domain_of_group.size());
  if (G < 2) throw DataError("at least two domains are needed to identify sigma2_u");
  const int K = detail::variance_class_count(spec.variance);
  std::vector<int> cls(n);
  std::vector<double> base(n);
  for (std::size_t k = 0; k < n; ++k) {
    cls[k] = detail::variance_class(units[k], spec.variance);
    base[k] = detail::variance_base(units[k], spec.variance);
  }

  const MixedFit init = opt.start ? *opt.start : fit_lmm(s, spec, Criterion::ml);
  Eigen::VectorXd beta = init.beta.array() * colscale.array();
  double su = init.sigma2_u;
  std::vector<double> th = init.level1;
  if (su <= 0.0) su = 0.1 * *std::min_element(th.begin(), th.end());

  const double c = huber_consistency(b);
  const int L = 1 + K;

  std::vector<double> v(n), U(n), td(static_cast<std::size_t>(G)), tau(static_cast<std::size_t>(G));
  auto refresh = [&]() {
    std::fill(td.begin(), td.end(), 0.0);
    for (std::size_t k = 0; k < n; ++k) {
      v[k] = th[static_cast<std::size_t>(cls[k])] * base[k];
      U[k] = su + v[k];
      td[static_cast<std::size_t>(grp[k])] += 1.0 / v[k];
    }
    for (int g = 0; g < G; ++g) tau[static_cast<std::size_t>(g)] = su / (1.0 + su * td[static_cast<std::size_t>(g)]);
  };

  // beta-step: X' V^{-1} W (y - X beta) = 0 with W = diag(psi(r)/r)
  auto solve_beta = [&]() {
    for (int it = 0; it < 200; ++it) {
      const Eigen::VectorXd e = y - X * beta;
      Eigen::MatrixXd M = Eigen::MatrixXd::Zero(p, p);
      Eigen::VectorXd rhs = Eigen::VectorXd::Zero(p);
      std::vector<Eigen::VectorXd> xw(static_cast<std::size_t>(G), Eigen::VectorXd::Zero(p));
      std::vector<Eigen::VectorXd> wx(static_cast<std::size_t>(G), Eigen::VectorXd::Zero(p));
      std::vector<double> wy(static_cast<std::size_t>(G), 0.0);
      for (std::size_t k = 0; k < n; ++k) {
        const auto x = X.row(static_cast<Eigen::Index>(k)).transpose();
        const double r = e(static_cast<Eigen::Index>(k)) / std::sqrt(U[k]);
        const double W = huber_weight(r, b);
        const double yk = y(static_cast<Eigen::Index>(k));
        M.noalias() += (W / v[k]) * x * x.transpose();
        rhs.noalias() += (W * yk / v[k]) * x;
        const auto g = static_cast<std::size_t>(grp[k]);
        xw[g] += x / v[k];
        wx[g] += (W / v[k]) * x;
        wy[g] += W * yk / v[k];
      }
      for (int g = 0; g < G; ++g) {
        const auto gi = static_cast<std::size_t>(g);
        M.noalias() -= tau[gi] * xw[gi] * wx[gi].transpose();
        rhs.noalias() -= tau[gi] * wy[gi] * xw[gi];
      }
      Eigen::FullPivLU<Eigen::MatrixXd> lu(M);
      if (!lu.isInvertible()) throw DataError("rank-deficient design in robust mixed model");
      const Eigen::VectorXd next = lu.solve(rhs);
      const double change = (next - beta).cwiseAbs().maxCoeff();
      const double size = next.cwiseAbs().maxCoeff();
      beta = next;
      if (change <= 1e-12 * std::max(size, 1e-300)) break;
    }
  };

  RobustMixedFit fit;
  fit.spec = spec;
  double prev_change = std::numeric_limits<double>::infinity();
  bool converged = false;
  int it = 0;
  for (; it < opt.max_iterations; ++it) {
    refresh();
    const Eigen::VectorXd beta_old = beta;
    solve_beta();

    // variance-component fixed point
    const Eigen::VectorXd e = y - X * beta;
    std::vector<double> hsum(static_cast<std::size_t>(G), 0.0);
    std::vector<double> h(n);
    for (std::size_t k = 0; k < n; ++k) {
      const double sU = std::sqrt(U[k]);
      h[k] = sU * huber_psi(e(static_cast<Eigen::Index>(k)) / sU, b);
      hsum[static_cast<std::size_t>(grp[k])] += h[k] / v[k];
    }
    Eigen::VectorXd a = Eigen::VectorXd::Zero(L);
    Eigen::MatrixXd A = Eigen::MatrixXd::Zero(L, L);
    std::vector<double> gsum(static_cast<std::size_t>(G), 0.0);
    // per (group, class): sum a_i w_i^2 for the rank-one term
    std::vector<double> aw2(static_cast<std::size_t>(G * K), 0.0);
    for (std::size_t k = 0; k < n; ++k) {
      const auto g = static_cast<std::size_t>(grp[k]);
      const double gi = h[k] / v[k] - tau[g] * hsum[g] / v[k];
      gsum[g] += gi;
      const int l = 1 + cls[k];
      a(l) += base[k] * gi * gi;
      const double qi = (1.0 / v[k]) / (1.0 + su * td[g]);
      A(0, l) += base[k] * qi * qi;
      A(l, l) += base[k] * base[k] / (v[k] * v[k]) - 2.0 * tau[g] * base[k] * base[k] / (v[k] * v[k] * v[k]);
      aw2[g * static_cast<std::size_t>(K) + static_cast<std::size_t>(cls[k])] += base[k] / (v[k] * v[k]);
    }
    for (int g = 0; g < G; ++g) {
      const auto gi = static_cast<std::size_t>(g);
      a(0) += gsum[gi] * gsum[gi];
      const double q1 = td[gi] / (1.0 + su * td[gi]);
      A(0, 0) += q1 * q1;
      for (int k1 = 0; k1 < K; ++k1)
        for (int k2 = 0; k2 < K; ++k2)
          A(1 + k1, 1 + k2) += tau[gi] * tau[gi] * aw2[gi * static_cast<std::size_t>(K) + static_cast<std::size_t>(k1)] *
                               aw2[gi * static_cast<std::size_t>(K) + static_cast<std::size_t>(k2)];
    }
    for (int l = 1; l < L; ++l) A(l, 0) = A(0, l);
    A *= c;

    Eigen::VectorXd next = A.fullPivLu().solve(a);
    if (!(next(0) > 0.0)) {
      // project onto sigma2_u = 0 and re-solve the level-1 block
      const Eigen::MatrixXd A11 = A.bottomRightCorner(K, K);
      const Eigen::VectorXd a1 = a.tail(K);
      next(0) = 0.0;
      next.tail(K) = A11.fullPivLu().solve(a1);
    }
    for (int l = 1; l < L; ++l)
      if (!(next(l) > 0.0) || !std::isfinite(next(l))) next(l) = 0.5 * th[static_cast<std::size_t>(l - 1)];

    // relative change; sigma2_u measured against var(y) near zero
    double change = std::abs(next(0) - su) / std::max(su, opt.boundary_tolerance * var_y);
    for (int l = 1; l < L; ++l)
      change = std::max(change, std::abs(next(l) - th[static_cast<std::size_t>(l - 1)]) / th[static_cast<std::size_t>(l - 1)]);
    const double bchange = (beta - beta_old).cwiseAbs().maxCoeff() / std::max(beta.cwiseAbs().maxCoeff(), 1e-300);
    if (change > prev_change) {
      // damp on divergence
      next(0) = 0.5 * (next(0) + su);
      for (int l = 1; l < L; ++l) next(l) = 0.5 * (next(l) + th[static_cast<std::size_t>(l - 1)]);
    }
    prev_change = change;
    su = next(0);
    for (int l = 1; l < L; ++l) th[static_cast<std::size_t>(l - 1)] = next(l);
    if (change <= opt.tolerance && bchange <= opt.tolerance) {
      converged = true;
      ++it;
      break;
    }
  }

  fit.boundary = su <= opt.boundary_tolerance * var_y;
  if (fit.boundary) su = 0.0;
  refresh();
  solve_beta();
  fit.converged = converged;
  fit.iterations = it;
  fit.sigma2_u_psi = su;
  fit.level1 = th;
  fit.beta_psi = beta.array() / colscale.array();

  fit.u_hat_psi.assign(s.parent().domain_count(), 0.0);
  if (!fit.boundary) {
    const Eigen::VectorXd e = y - X * beta;
    std::vector<std::vector<double>> eg(static_cast<std::size_t>(G)), sdg(static_cast<std::size_t>(G));
    for (std::size_t k = 0; k < n; ++k) {
      eg[static_cast<std::size_t>(grp[k])].push_back(e(static_cast<Eigen::Index>(k)));
      sdg[static_cast<std::size_t>(grp[k])].push_back(std::sqrt(v[k]));
    }
    const double sd_u = std::sqrt(su);
    for (int g = 0; g < G; ++g)
      fit.u_hat_psi[static_cast<std::size_t>(domain_of_group[static_cast<std::size_t>(g)])] =
          detail::fellner_root(eg[static_cast<std::size_t>(g)], sdg[static_cast<std::size_t>(g)], sd_u, b);
  }
  return fit;
}

/// REBLUP domain totals: observed y plus x'beta_psi + u_psi for the non-sampled units.
inline std::vector<double> reblup_totals(const RobustMixedFit& fit, const Sample& s, const DomainAux& aux) {
  const Eigen::MatrixXd X = design_matrix(s.units(), aux.fixed);
  const auto sums = sample_domain_sums(s, X);
  std::vector<double> out(aux.count.size());
  for (std::size_t d = 0; d < out.size(); ++d) {
    const double nr = static_cast<double>(aux.count[d]) - static_cast<double>(sums.count[d]);
    out[d] = sums.y_sum[d] + (aux.x_total[d] - sums.x_sum[d]).dot(fit.beta_psi) + nr * fit.u_hat_psi[d];
  }
  return out;
}

inline double reblup_total(const RobustMixedFit& fit, const Sample& s, const std::string& ind) {
  const int d = s.parent().require_domain(ind);
  return reblup_totals(fit, s, domain_aux(s.parent(), fit.spec.fixed))[static_cast<std::size_t>(d)];
}

}  // namespace sae
