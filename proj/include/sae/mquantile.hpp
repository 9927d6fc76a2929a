#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "sae/error.hpp"
#include "sae/frame.hpp"
#include "sae/model.hpp"
#include "sae/robust.hpp"
#include "sae/stats.hpp"

namespace sae {

/// {0.001, 0.01, 0.02, ..., 0.99, 0.999}
inline std::vector<double> default_grid() {
  std::vector<double> g;
  g.reserve(101);
  g.push_back(0.001);
  for (int k = 1; k <= 99; ++k) g.push_back(k / 100.0);
  g.push_back(0.999);
  return g;
}

/// Parses "lo:hi:step" or a comma list of levels.
inline std::vector<double> parse_grid(const std::string& spec) {
  auto bad = [&] { return UsageError("invalid grid '" + spec + "'"); };
  std::vector<double> g;
  if (spec.find(':') != std::string::npos) {
    std::vector<double> parts;
    std::size_t pos = 0;
    while (true) {
      const auto next = spec.find(':', pos);
      double v = 0.0;
      if (!csv::parse_double(csv::trim(std::string_view(spec).substr(pos, next - pos)), v)) throw bad();
      parts.push_back(v);
      if (next == std::string::npos) break;
      pos = next + 1;
    }
    if (parts.size() != 3 || !(parts[2] > 0.0) || parts[1] < parts[0]) throw bad();
    const long long count = std::llround((parts[1] - parts[0]) / parts[2]);
    for (long long k = 0; k <= count; ++k) g.push_back(parts[0] + static_cast<double>(k) * parts[2]);
  } else {
    for (const auto& f : csv::split(spec)) {
      double v = 0.0;
      if (!csv::parse_double(csv::trim(f), v)) throw bad();
      g.push_back(v);
    }
  }
  if (g.empty()) throw bad();
  return g;
}

inline void validate_quantile_grid(std::span<const double> grid) {
  if (grid.empty()) throw UsageError("quantile grid is empty");
  for (std::size_t j = 0; j < grid.size(); ++j) {
    if (!(grid[j] > 0.0 && grid[j] < 1.0)) throw UsageError("quantile grid levels must lie in (0,1)");
    if (j > 0 && !(grid[j] > grid[j - 1])) throw UsageError("quantile grid must be strictly increasing");
  }
}

struct MQFitGrid {
  std::vector<double> grid;
  std::vector<Eigen::VectorXd> beta;
  std::vector<double> scale;
  double b_psi = 1.345;
  bool weighted = false;
  FixedEffects fixed = FixedEffects::full;
};

/// M-quantile fits at every grid level. Fits start at the level nearest
/// 0.5 and proceed outwards, each warm-started from its neighbour.
inline MQFitGrid fit_mq_grid(const Sample& s, const ModelSpec& spec, std::vector<double> grid, const HuberConfig& cfg = {},
                             bool weighted = false, const IrlsOptions& opt = {}) {
  cfg.validate();
  validate_quantile_grid(grid);
  const Eigen::MatrixXd X = design_matrix(s.units(), spec.fixed);
  const Eigen::VectorXd y = response(s.units());
  const Eigen::VectorXd w = design_weights(s.units());
  const Eigen::VectorXd* wp = weighted ? &w : nullptr;

  MQFitGrid out;
  out.grid = std::move(grid);
  out.b_psi = cfg.b;
  out.weighted = weighted;
  out.fixed = spec.fixed;
  const std::size_t J = out.grid.size();
  out.beta.resize(J);
  out.scale.resize(J);
  std::size_t mid = 0;
  for (std::size_t j = 1; j < J; ++j)
    if (std::abs(out.grid[j] - 0.5) < std::abs(out.grid[mid] - 0.5)) mid = j;
  auto fit_at = [&](std::size_t j, const Eigen::VectorXd* start) {
    const RobustFit f = irls_huber(X, y, out.grid[j], cfg.b, wp, start, opt);
    out.beta[j] = f.beta;
    out.scale[j] = f.scale;
  };
  fit_at(mid, nullptr);
  for (std::size_t j = mid + 1; j < J; ++j) fit_at(j, &out.beta[j - 1]);
  for (std::size_t j = mid; j-- > 0;) fit_at(j, &out.beta[j + 1]);
  return out;
}

struct QCoefficients {
  std::vector<double> q;             ///< per sampled unit
  std::vector<char> clipped;         ///< q set to a grid end
  std::vector<char> non_monotone;    ///< fitted values not monotone in q at this unit
  std::vector<double> q_bar;         ///< per parent domain; NaN when the domain has no sampled units
  std::vector<double> q_tilde;       ///< design-weighted domain mean
};

struct UnitQ {
  double q = 0.5;
  bool clipped = false;
  bool non_monotone = false;
};

/// Order at which the fitted values cross y, by linear interpolation
/// between grid levels; the smallest crossing wins.
inline UnitQ locate_q(std::span<const double> grid, std::span<const double> fitted, double y) {
  UnitQ r;
  const std::size_t J = grid.size();
  for (std::size_t j = 1; j < J; ++j)
    if (fitted[j] < fitted[j - 1]) r.non_monotone = true;
  if (J == 1) {
    r.q = grid[0];
    r.clipped = y != fitted[0];
    return r;
  }
  for (std::size_t j = 0; j + 1 < J; ++j) {
    const double a = fitted[j] - y, b = fitted[j + 1] - y;
    if (a == 0.0) {
      r.q = grid[j];
      return r;
    }
    if ((a < 0.0 && b >= 0.0) || (a > 0.0 && b <= 0.0)) {
      r.q = grid[j] + (y - fitted[j]) / (fitted[j + 1] - fitted[j]) * (grid[j + 1] - grid[j]);
      return r;
    }
  }
  r.clipped = true;
  r.q = y < fitted[0] ? grid.front() : grid.back();
  return r;
}

inline QCoefficients unit_q_coefficients(const Sample& s, const MQFitGrid& fit) {
  const Eigen::MatrixXd X = design_matrix(s.units(), fit.fixed);
  const std::size_t J = fit.grid.size();
  Eigen::MatrixXd B(X.cols(), static_cast<Eigen::Index>(J));
  for (std::size_t j = 0; j < J; ++j) B.col(static_cast<Eigen::Index>(j)) = fit.beta[j];
  const Eigen::MatrixXd F = X * B;
  QCoefficients qc;
  qc.q.resize(s.size());
  qc.clipped.resize(s.size());
  qc.non_monotone.resize(s.size());
  const std::size_t D = s.parent().domain_count();
  std::vector<double> sum(D, 0.0), wsum(D, 0.0), wq(D, 0.0);
  std::vector<std::size_t> cnt(D, 0);
  std::vector<double> fitted(J);
  for (std::size_t k = 0; k < s.size(); ++k) {
    for (std::size_t j = 0; j < J; ++j) fitted[j] = F(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j));
    const UnitQ u = locate_q(fit.grid, fitted, s[k].tto);
    qc.q[k] = u.q;
    qc.clipped[k] = u.clipped;
    qc.non_monotone[k] = u.non_monotone;
    const auto d = static_cast<std::size_t>(s.domain_of(k));
    sum[d] += u.q;
    ++cnt[d];
    wsum[d] += s[k].d;
    wq[d] += s[k].d * u.q;
  }
  qc.q_bar.assign(D, std::numeric_limits<double>::quiet_NaN());
  qc.q_tilde.assign(D, std::numeric_limits<double>::quiet_NaN());
  for (std::size_t d = 0; d < D; ++d) {
    if (cnt[d] == 0) continue;
    qc.q_bar[d] = sum[d] / static_cast<double>(cnt[d]);
    qc.q_tilde[d] = wq[d] / wsum[d];
  }
  return qc;
}

struct MQOptions {
  bool interpolate_coefficients = false;  ///< interpolate grid coefficients instead of refitting at the domain order
  bool weighted_qbar = false;             ///< use the design-weighted mean of q_i
  IrlsOptions irls;
};

/// Coefficients at each domain's average order; domains with no sample keep an empty vector.
struct MQDomainFits {
  std::vector<double> q;
  std::vector<Eigen::VectorXd> beta;
  bool weighted = false;
  FixedEffects fixed = FixedEffects::full;
};

inline Eigen::VectorXd interpolate_coefficients(const MQFitGrid& fit, double q) {
  const auto& g = fit.grid;
  if (q <= g.front()) return fit.beta.front();
  if (q >= g.back()) return fit.beta.back();
  const auto it = std::upper_bound(g.begin(), g.end(), q);
  const auto j = static_cast<std::size_t>(it - g.begin());
  const double t = (q - g[j - 1]) / (g[j] - g[j - 1]);
  return (1.0 - t) * fit.beta[j - 1] + t * fit.beta[j];
}

inline MQDomainFits fit_domain_orders(const Sample& s, const MQFitGrid& fit, const QCoefficients& qc,
                                      const MQOptions& opt = {}) {
  MQDomainFits out;
  out.weighted = fit.weighted;
  out.fixed = fit.fixed;
  const std::size_t D = qc.q_bar.size();
  out.q = opt.weighted_qbar ? qc.q_tilde : qc.q_bar;
  out.beta.assign(D, Eigen::VectorXd());
  Eigen::MatrixXd X;
  Eigen::VectorXd y, w;
  if (!opt.interpolate_coefficients) {
    X = design_matrix(s.units(), fit.fixed);
    y = response(s.units());
    w = design_weights(s.units());
  }
  for (std::size_t d = 0; d < D; ++d) {
    const double q = out.q[d];
    if (std::isnan(q)) continue;
    const Eigen::VectorXd start = interpolate_coefficients(fit, q);
    if (opt.interpolate_coefficients) {
      out.beta[d] = start;
    } else {
      out.beta[d] = irls_huber(X, y, q, fit.b_psi, fit.weighted ? &w : nullptr, &start, opt.irls).beta;
    }
  }
  return out;
}

struct ScaleEstimate {
  double value = 0.0;
  bool degenerate = false;
};

/// median(|r - median(r)|)/0.6745
inline ScaleEstimate robust_scale(std::span<const double> residuals) {
  if (residuals.empty()) throw DataError("robust scale needs at least one residual");
  ScaleEstimate e;
  e.value = mad_scale(residuals);
  e.degenerate = !(e.value > 0.0);
  if (e.degenerate) e.value = 0.0;
  return e;
}

enum class ScaleRule { domain, pooled };

struct BiasAdjustConfig {
  double b_phi = 1.0;
  ScaleRule scale_rule = ScaleRule::domain;  ///< domain MAD, falling back to the pooled scale when degenerate

  void validate() const {
    if (!(b_phi > 0.0) || std::isnan(b_phi)) throw UsageError("b_phi must be positive");
  }
};

/// Per-domain residuals y_i - x_i'beta_d and their sums, shared by the
/// corrected estimators.
struct MQResiduals {
  std::vector<std::vector<double>> by_domain;
  std::vector<double> sum;
  std::vector<double> y_sum, wy_sum;
  std::vector<Eigen::VectorXd> x_sum, wx_sum;
  std::vector<std::size_t> n;
};

inline MQResiduals mq_residuals(const Sample& s, const MQDomainFits& f) {
  const Eigen::MatrixXd X = design_matrix(s.units(), f.fixed);
  const std::size_t D = f.beta.size();
  MQResiduals r;
  r.by_domain.assign(D, {});
  r.sum.assign(D, 0.0);
  r.y_sum.assign(D, 0.0);
  r.wy_sum.assign(D, 0.0);
  r.x_sum.assign(D, Eigen::VectorXd::Zero(X.cols()));
  r.wx_sum.assign(D, Eigen::VectorXd::Zero(X.cols()));
  r.n.assign(D, 0);
  for (std::size_t k = 0; k < s.size(); ++k) {
    const auto d = static_cast<std::size_t>(s.domain_of(k));
    const auto x = X.row(static_cast<Eigen::Index>(k)).transpose();
    const double e = s[k].tto - x.dot(f.beta[d]);
    r.by_domain[d].push_back(e);
    r.sum[d] += e;
    r.y_sum[d] += s[k].tto;
    r.wy_sum[d] += s[k].d * s[k].tto;
    r.x_sum[d] += x;
    r.wx_sum[d] += s[k].d * x;
    ++r.n[d];
  }
  return r;
}

namespace detail {

inline void require_sampled(const MQResiduals& r, std::size_t d) {
  if (r.n[d] == 0) throw DataError("domain has no sampled units; its average q is undefined");
}

}  // namespace detail

/// sum_s y + sum_r x'beta_{q_d}; NaN for domains with no sample.
inline std::vector<double> mq_naive_totals(const MQDomainFits& f, const MQResiduals& r, const DomainAux& aux) {
  std::vector<double> out(aux.count.size(), std::numeric_limits<double>::quiet_NaN());
  for (std::size_t d = 0; d < out.size(); ++d) {
    if (r.n[d] == 0) continue;
    out[d] = r.y_sum[d] + (aux.x_total[d] - r.x_sum[d]).dot(f.beta[d]);
  }
  return out;
}

/// Unweighted: naive + (N-n)/n sum_s residuals. Weighted: sum w y + (sum_U x - sum_s w x)'beta_w.
inline std::vector<double> mq_cd_totals(const MQDomainFits& f, const MQResiduals& r, const DomainAux& aux) {
  std::vector<double> out(aux.count.size(), std::numeric_limits<double>::quiet_NaN());
  for (std::size_t d = 0; d < out.size(); ++d) {
    if (r.n[d] == 0) continue;
    if (f.weighted) {
      out[d] = r.wy_sum[d] + (aux.x_total[d] - r.wx_sum[d]).dot(f.beta[d]);
    } else {
      const double n = static_cast<double>(r.n[d]);
      const double N = static_cast<double>(aux.count[d]);
      out[d] = r.y_sum[d] + (aux.x_total[d] - r.x_sum[d]).dot(f.beta[d]) + (N - n) / n * r.sum[d];
    }
  }
  return out;
}

/// Residual scale per domain for the bias adjustment, with the fallback applied.
inline std::vector<double> mq_wr_scales(const MQResiduals& r, ScaleRule rule) {
  std::vector<double> all;
  for (const auto& v : r.by_domain) all.insert(all.end(), v.begin(), v.end());
  const double pooled = all.empty() ? 0.0 : robust_scale(all).value;
  std::vector<double> out(r.by_domain.size(), pooled);
  if (rule == ScaleRule::pooled) return out;
  for (std::size_t d = 0; d < out.size(); ++d) {
    if (r.by_domain[d].empty()) continue;
    const ScaleEstimate e = robust_scale(r.by_domain[d]);
    if (!e.degenerate) out[d] = e.value;
  }
  return out;
}

/// naive + (N-n)/n sum_s omega phi(e/omega), phi Huber with constant b_phi.
inline std::vector<double> mq_wr_totals(const MQDomainFits& f, const MQResiduals& r, const DomainAux& aux,
                                        const BiasAdjustConfig& cfg, std::span<const double> omega) {
  cfg.validate();
  std::vector<double> out = mq_naive_totals(f, r, aux);
  for (std::size_t d = 0; d < out.size(); ++d) {
    if (r.n[d] == 0 || !(omega[d] > 0.0)) continue;
    double adj = 0.0;
    for (double e : r.by_domain[d]) adj += omega[d] * huber_psi(e / omega[d], cfg.b_phi);
    const double n = static_cast<double>(r.n[d]);
    const double N = static_cast<double>(aux.count[d]);
    out[d] += (N - n) / n * adj;
  }
  return out;
}

inline std::vector<double> mq_wr_totals(const MQDomainFits& f, const MQResiduals& r, const DomainAux& aux,
                                        const BiasAdjustConfig& cfg = {}) {
  const auto omega = mq_wr_scales(r, cfg.scale_rule);
  return mq_wr_totals(f, r, aux, cfg, omega);
}

/// Everything needed for the single-domain entry points.
struct MQBundle {
  MQFitGrid grid;
  QCoefficients qc;
  MQDomainFits fits;
  MQResiduals residuals;
  DomainAux aux;
};

inline MQBundle fit_mq(const Sample& s, const ModelSpec& spec, const HuberConfig& cfg = {}, bool weighted = false,
                       const MQOptions& opt = {}, std::vector<double> grid = default_grid()) {
  MQBundle b;
  b.grid = fit_mq_grid(s, spec, std::move(grid), cfg, weighted, opt.irls);
  b.qc = unit_q_coefficients(s, b.grid);
  b.fits = fit_domain_orders(s, b.grid, b.qc, opt);
  b.residuals = mq_residuals(s, b.fits);
  b.aux = domain_aux(s.parent(), spec.fixed);
  return b;
}

inline double mq_naive_total(const MQBundle& b, const Sample& s, const std::string& ind) {
  const auto d = static_cast<std::size_t>(s.parent().require_domain(ind));
  detail::require_sampled(b.residuals, d);
  return mq_naive_totals(b.fits, b.residuals, b.aux)[d];
}

inline double mq_cd_total(const MQBundle& b, const Sample& s, const std::string& ind) {
  const auto d = static_cast<std::size_t>(s.parent().require_domain(ind));
  detail::require_sampled(b.residuals, d);
  return mq_cd_totals(b.fits, b.residuals, b.aux)[d];
}

inline double mq_wr_total(const MQBundle& b, const Sample& s, const std::string& ind, const BiasAdjustConfig& cfg = {}) {
  const auto d = static_cast<std::size_t>(s.parent().require_domain(ind));
  detail::require_sampled(b.residuals, d);
  return mq_wr_totals(b.fits, b.residuals, b.aux, cfg)[d];
}

}  // namespace sae
