#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "sae/csv.hpp"
#include "sae/design.hpp"
#include "sae/error.hpp"
#include "sae/estimators.hpp"
#include "sae/parallel.hpp"
#include "sae/stats.hpp"

namespace sae {

/// 100/(K truth) sum(est) - 100
inline double relative_bias(std::span<const double> estimates, double truth) {
  if (truth == 0.0) throw DataError("relative bias is undefined for a zero true total");
  if (estimates.empty()) throw DataError("relative bias needs at least one estimate");
  double s = 0.0;
  for (double e : estimates) s += e;
  return 100.0 * s / (static_cast<double>(estimates.size()) * truth) - 100.0;
}

/// 100/|truth| sqrt(mean (est - truth)^2)
inline double relative_rrmse(std::span<const double> estimates, double truth) {
  if (truth == 0.0) throw DataError("relative rmse is undefined for a zero true total");
  if (estimates.empty()) throw DataError("relative rmse needs at least one estimate");
  double s = 0.0;
  for (double e : estimates) s += (e - truth) * (e - truth);
  return 100.0 / std::abs(truth) * std::sqrt(s / static_cast<double>(estimates.size()));
}

struct CellStats {
  double truth = 0.0;
  double rb = std::numeric_limits<double>::quiet_NaN();
  double rrmse = std::numeric_limits<double>::quiet_NaN();
  double rmse = std::numeric_limits<double>::quiet_NaN();
  double rb_se = std::numeric_limits<double>::quiet_NaN();  ///< Monte Carlo standard error of rb
  std::size_t failures = 0;
  std::size_t boundary = 0;

  bool valid() const { return !std::isnan(rb); }
};

struct SummaryRow {
  double median_rb = std::numeric_limits<double>::quiet_NaN();
  double mean_rb = std::numeric_limits<double>::quiet_NaN();
  double mean_abs_rb = std::numeric_limits<double>::quiet_NaN();
  double median_rrmse = std::numeric_limits<double>::quiet_NaN();
  double mean_rrmse = std::numeric_limits<double>::quiet_NaN();
};

inline CellStats cell_stats(std::span<const double> stream, double truth) {
  CellStats c;
  c.truth = truth;
  std::vector<double> ok;
  for (double v : stream) {
    if (std::isnan(v)) ++c.failures;
    else ok.push_back(v);
  }
  if (ok.empty() || truth == 0.0) return c;
  c.rb = relative_bias(ok, truth);
  c.rrmse = relative_rrmse(ok, truth);
  c.rmse = c.rrmse * std::abs(truth) / 100.0;
  if (ok.size() > 1) {
    const double m = mean(ok);
    double ss = 0.0;
    for (double v : ok) ss += (v - m) * (v - m);
    const double sd = std::sqrt(ss / static_cast<double>(ok.size() - 1));
    c.rb_se = 100.0 * sd / (std::abs(truth) * std::sqrt(static_cast<double>(ok.size())));
  }
  return c;
}

inline SummaryRow summarize(std::span<const CellStats> cells) {
  std::vector<double> rb, rr;
  for (const auto& c : cells)
    if (c.valid()) {
      rb.push_back(c.rb);
      rr.push_back(c.rrmse);
    }
  SummaryRow s;
  if (rb.empty()) return s;
  s.median_rb = median(rb);
  s.mean_rb = mean(rb);
  double a = 0.0;
  for (double v : rb) a += std::abs(v);
  s.mean_abs_rb = a / static_cast<double>(rb.size());
  s.median_rrmse = median(rr);
  s.mean_rrmse = mean(rr);
  return s;
}

struct SimulationReport {
  std::vector<std::string> estimators;
  std::vector<std::string> domains;
  std::vector<double> truth;
  std::vector<std::vector<CellStats>> cells;                ///< [estimator][domain]
  std::vector<std::vector<std::vector<double>>> estimates;  ///< [estimator][domain][replicate], NaN on failure
  std::vector<std::size_t> fit_failures;                    ///< replicates where the estimator failed outright
  std::size_t K = 0;
  std::uint64_t seed = 0;

  SummaryRow summary(std::size_t e) const { return summarize(cells[e]); }

  std::size_t index_of(const std::string& label) const {
    for (std::size_t e = 0; e < estimators.size(); ++e)
      if (estimators[e] == label) return e;
    throw UsageError("estimator '" + label + "' not in report");
  }
};

struct SimulationOptions {
  std::size_t K = 500;
  std::uint64_t seed = 1;
  unsigned threads = 1;
  bool keep_estimates = true;
};

inline SimulationReport run_simulation(const PopulationContext& ctx, const DesignSpec& design,
                                       const std::vector<EstimatorSpec>& estimators, const EstimationSettings& set,
                                       const SimulationOptions& opt) {
  if (estimators.empty()) throw UsageError("estimator set is empty");
  if (opt.K == 0) throw UsageError("K must be positive");
  const Population& pop = *ctx.pop;
  const std::size_t E = estimators.size(), D = pop.domain_count();
  std::vector<std::vector<EstimateOutcome>> per_rep(opt.K);
  parallel_for(opt.K, opt.threads, [&](std::size_t k) {
    const Sample s = draw_sample(design, ctx.pop, mix_seed(opt.seed, k));
    per_rep[k] = estimate_all(s, ctx, estimators, set);
  });

  SimulationReport r;
  r.K = opt.K;
  r.seed = opt.seed;
  r.domains = pop.domains();
  r.truth = ctx.aux.y_total;
  for (const auto& e : estimators) r.estimators.push_back(e.label());
  r.estimates.assign(E, std::vector<std::vector<double>>(D, std::vector<double>(opt.K)));
  r.fit_failures.assign(E, 0);
  r.cells.assign(E, std::vector<CellStats>(D));
  std::vector<std::vector<std::size_t>> boundary(E, std::vector<std::size_t>(D, 0));
  for (std::size_t k = 0; k < opt.K; ++k)
    for (std::size_t e = 0; e < E; ++e) {
      const auto& o = per_rep[k][e];
      if (o.failed) ++r.fit_failures[e];
      for (std::size_t d = 0; d < D; ++d) {
        r.estimates[e][d][k] = o.failed ? std::numeric_limits<double>::quiet_NaN() : o.totals[d];
        if (o.boundary) ++boundary[e][d];
      }
    }
  for (std::size_t e = 0; e < E; ++e)
    for (std::size_t d = 0; d < D; ++d) {
      r.cells[e][d] = cell_stats(r.estimates[e][d], r.truth[d]);
      r.cells[e][d].boundary = boundary[e][d];
    }
  if (!opt.keep_estimates) r.estimates.clear();
  return r;
}

inline constexpr const char* kReportHeader = "estimator,domain,truth,rb_pct,rrmse_pct,failures";

namespace detail {
inline std::string num(double v) { return std::isnan(v) ? "nan" : csv::fmt(v); }
}  // namespace detail

/// One row per (estimator, domain), then five summary rows per estimator
/// whose domain field names the statistic.
inline std::string report_csv(const SimulationReport& r) {
  std::ostringstream os;
  os << kReportHeader << '\n';
  for (std::size_t e = 0; e < r.estimators.size(); ++e) {
    std::size_t total_failures = 0;
    for (std::size_t d = 0; d < r.domains.size(); ++d) {
      const auto& c = r.cells[e][d];
      total_failures += c.failures;
      os << r.estimators[e] << ',' << r.domains[d] << ',' << detail::num(c.truth) << ',' << detail::num(c.rb) << ','
         << detail::num(c.rrmse) << ',' << c.failures << '\n';
    }
    const SummaryRow s = r.summary(e);
    const std::string tag = r.estimators[e];
    os << tag << ",median(rb),," << detail::num(s.median_rb) << ",," << total_failures << '\n';
    os << tag << ",mean(rb),," << detail::num(s.mean_rb) << ",," << total_failures << '\n';
    os << tag << ",mean|rb|,," << detail::num(s.mean_abs_rb) << ",," << total_failures << '\n';
    os << tag << ",median(rrmse),,," << detail::num(s.median_rrmse) << ',' << total_failures << '\n';
    os << tag << ",mean(rrmse),,," << detail::num(s.mean_rrmse) << ',' << total_failures << '\n';
  }
  return os.str();
}

struct ReportRow {
  std::string estimator, domain;
  double truth = std::numeric_limits<double>::quiet_NaN();
  double rb = std::numeric_limits<double>::quiet_NaN();
  double rrmse = std::numeric_limits<double>::quiet_NaN();
  long long failures = 0;
};

inline std::vector<ReportRow> parse_report_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || csv::trim(line) != kReportHeader) throw DataError("not a simulation report: bad header");
  std::vector<ReportRow> rows;
  std::size_t lineno = 1;
  auto field = [&](const std::string& f) {
    if (f.empty() || f == "nan") return std::numeric_limits<double>::quiet_NaN();
    double v = 0.0;
    if (!csv::parse_double(f, v)) throw DataError("report line " + std::to_string(lineno) + ": bad number '" + f + "'");
    return v;
  };
  while (std::getline(is, line)) {
    ++lineno;
    if (csv::trim(line).empty()) continue;
    const auto f = csv::split(line);
    if (f.size() != 6) throw DataError("report line " + std::to_string(lineno) + ": expected 6 fields");
    ReportRow r;
    r.estimator = f[0];
    r.domain = f[1];
    r.truth = field(f[2]);
    r.rb = field(f[3]);
    r.rrmse = field(f[4]);
    if (!csv::parse_int(f[5], r.failures)) throw DataError("report line " + std::to_string(lineno) + ": bad failure count");
    rows.push_back(r);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// b_phi sensitivity

struct SweepResult {
  std::vector<double> b_phi;
  std::vector<std::string> domains;
  std::vector<std::vector<double>> rrmse;  ///< [b][domain]
  std::vector<double> mqcd_rrmse;          ///< per domain, same replicates
  std::vector<double> mq_rrmse;            ///< naive, same replicates
  std::size_t failures = 0;

  double mean_rrmse(std::size_t b) const { return mean(rrmse[b]); }
  double median_rrmse(std::size_t b) const { return median(rrmse[b]); }

  /// Per-domain range over the b_phi grid.
  std::vector<double> max_minus_min() const {
    std::vector<double> out(domains.size());
    for (std::size_t d = 0; d < domains.size(); ++d) {
      double lo = std::numeric_limits<double>::infinity(), hi = -lo;
      for (const auto& col : rrmse) {
        lo = std::min(lo, col[d]);
        hi = std::max(hi, col[d]);
      }
      out[d] = hi - lo;
    }
    return out;
  }
};

/// MQWR relative rmse over a b_phi grid. Every grid value is evaluated on
/// the same K samples (replicate k uses the same seed as run_simulation).
inline SweepResult sweep_bphi(const PopulationContext& ctx, const DesignSpec& design, std::vector<double> grid,
                              const EstimationSettings& set, const SimulationOptions& opt) {
  if (grid.empty()) throw UsageError("b_phi grid is empty");
  for (double b : grid)
    if (!(b > 0.0)) throw UsageError("b_phi values must be positive");
  const std::size_t B = grid.size(), D = ctx.pop->domain_count();
  // per replicate: [b][d] totals, then mqcd and mq
  std::vector<std::vector<std::vector<double>>> per_rep(opt.K);
  parallel_for(opt.K, opt.threads, [&](std::size_t k) {
    const Sample s = draw_sample(design, ctx.pop, mix_seed(opt.seed, k));
    auto& out = per_rep[k];
    try {
      const MQBundle bundle = fit_mq(s, {set.fixed, VarianceStructure::homo, set.prediction}, set.psi, false, set.mq, set.grid);
      const auto omega = mq_wr_scales(bundle.residuals, set.scale_rule);
      for (double b : grid) {
        BiasAdjustConfig cfg;
        cfg.b_phi = b;
        out.push_back(mq_wr_totals(bundle.fits, bundle.residuals, ctx.aux, cfg, omega));
      }
      out.push_back(mq_cd_totals(bundle.fits, bundle.residuals, ctx.aux));
      out.push_back(mq_naive_totals(bundle.fits, bundle.residuals, ctx.aux));
    } catch (const DataError&) {
      out.clear();
    }
  });
  SweepResult r;
  r.b_phi = std::move(grid);
  r.domains = ctx.pop->domains();
  auto column = [&](std::size_t j) {
    std::vector<double> col(D);
    for (std::size_t d = 0; d < D; ++d) {
      std::vector<double> stream;
      for (const auto& rep : per_rep)
        if (!rep.empty() && !std::isnan(rep[j][d])) stream.push_back(rep[j][d]);
      col[d] = stream.empty() ? std::numeric_limits<double>::quiet_NaN() : relative_rrmse(stream, ctx.aux.y_total[d]);
    }
    return col;
  };
  for (const auto& rep : per_rep)
    if (rep.empty()) ++r.failures;
  if (r.failures == opt.K) throw DataError("every sweep replicate failed");
  for (std::size_t b = 0; b < B; ++b) r.rrmse.push_back(column(b));
  r.mqcd_rrmse = column(B);
  r.mq_rrmse = column(B + 1);
  return r;
}

/// Rows: one per b_phi with per-domain rrmse plus median and mean, then the
/// per-domain max-min row.
inline std::string sweep_csv(const SweepResult& r) {
  std::ostringstream os;
  os << "b_phi";
  for (const auto& d : r.domains) os << ',' << d;
  os << ",median,mean\n";
  for (std::size_t b = 0; b < r.b_phi.size(); ++b) {
    os << csv::fmt(r.b_phi[b]);
    for (double v : r.rrmse[b]) os << ',' << detail::num(v);
    os << ',' << detail::num(r.median_rrmse(b)) << ',' << detail::num(r.mean_rrmse(b)) << '\n';
  }
  const auto range = r.max_minus_min();
  os << "max-min";
  for (double v : range) os << ',' << detail::num(v);
  os << ",,\n";
  return os.str();
}

}  // namespace sae
