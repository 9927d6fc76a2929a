#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "sae/design.hpp"
#include "sae/error.hpp"
#include "sae/estimators.hpp"
#include "sae/frame.hpp"
#include "sae/mquantile.hpp"
#include "sae/parallel.hpp"

namespace sae {

enum class ResidualPool { unconditional, by_domain, by_size_class };

struct BootstrapConfig {
  std::size_t B = 50;
  std::size_t L = 10;
  BiasAdjustConfig estimator;  ///< MQWR settings
  ResidualPool pool = ResidualPool::by_size_class;  ///< pooled across domains within each size class
  std::uint64_t seed = 1;
  unsigned threads = 1;

  void validate() const {
    if (B < 1 || L < 1) throw UsageError("bootstrap needs B >= 1 and L >= 1");
    estimator.validate();
  }
};

struct BootstrapMse {
  std::vector<std::string> domains;
  std::vector<double> mse;
  std::vector<double> rmse;
  std::vector<double> estimate;  ///< MQWR estimate on the original sample
  std::size_t failures = 0;      ///< bootstrap samples whose fit failed

  double rrmse(std::size_t d) const { return 100.0 * rmse[d] / std::abs(estimate[d]); }
};

/// Bootstrap mse of the MQWR estimator. Bootstrap populations attach to every
/// frame unit its domain's fitted value plus a residual drawn with
/// replacement from the centred sample residuals of its pool (all units, its
/// domain, or its size class across domains); L samples per population
/// are drawn under the original design and the squared errors against the
/// bootstrap domain totals are averaged over all B*L samples.
inline BootstrapMse bootstrap_mse(const Sample& s, const DesignSpec& design, const EstimationSettings& set,
                                  const BootstrapConfig& cfg) {
  cfg.validate();
  const auto& pop_ptr = s.parent_ptr();
  const Population& pop = *pop_ptr;
  const std::size_t D = pop.domain_count();
  const ModelSpec spec{set.fixed, VarianceStructure::homo, set.prediction};
  const MQBundle fit = fit_mq(s, spec, set.psi, false, set.mq, set.grid);

  BootstrapMse out;
  out.domains = pop.domains();
  out.estimate = mq_wr_totals(fit.fits, fit.residuals, fit.aux, cfg.estimator);

  auto pool_of = [&](int domain, int sc) -> std::size_t {
    switch (cfg.pool) {
      case ResidualPool::by_domain: return static_cast<std::size_t>(domain);
      case ResidualPool::by_size_class: return static_cast<std::size_t>(sc - 1);
      default: return 0;
    }
  };
  const std::size_t P = cfg.pool == ResidualPool::by_domain ? D : cfg.pool == ResidualPool::by_size_class ? kSizeClasses : 1;

  // fitted values on the frame; domains without sample use the median fit
  const Eigen::VectorXd beta_mid = interpolate_coefficients(fit.grid, 0.5);
  auto coef = [&](std::size_t d) -> const Eigen::VectorXd& { return fit.fits.beta[d].size() > 0 ? fit.fits.beta[d] : beta_mid; };
  std::vector<double> fitted(pop.size());
  Eigen::VectorXd x(fixed_effect_count(set.fixed));
  for (std::size_t i = 0; i < pop.size(); ++i) {
    fill_covariates(pop[i], set.fixed, x);
    fitted[i] = x.dot(coef(static_cast<std::size_t>(pop.domain_of(i))));
  }

  // centred residual pools
  std::vector<std::vector<double>> pools(P);
  std::vector<double> all;
  for (std::size_t k = 0; k < s.size(); ++k) {
    const auto d = static_cast<std::size_t>(s.domain_of(k));
    fill_covariates(s[k], set.fixed, x);
    const double e = s[k].tto - x.dot(coef(d));
    pools[pool_of(static_cast<int>(d), s[k].sc)].push_back(e);
    all.push_back(e);
  }
  if (all.empty()) throw DataError("bootstrap residual pool is empty");
  const double all_mean = mean(all);
  for (auto& v : all) v -= all_mean;
  for (auto& p : pools) {
    if (p.empty()) continue;
    const double m = mean(p);
    for (auto& v : p) v -= m;
  }

  const std::size_t total = cfg.B * cfg.L;
  std::vector<std::vector<double>> sq(total);
  parallel_for(cfg.B, cfg.threads, [&](std::size_t b) {
    std::mt19937_64 rng(mix_seed(cfg.seed, b));
    std::vector<Unit> units = pop.units();
    std::vector<double> truth(D, 0.0);
    for (std::size_t i = 0; i < units.size(); ++i) {
      const auto d = static_cast<std::size_t>(pop.domain_of(i));
      const auto& pool = pools[pool_of(static_cast<int>(d), units[i].sc)];
      const auto& use = pool.empty() ? all : pool;
      std::uniform_int_distribution<std::size_t> pick(0, use.size() - 1);
      units[i].tto = fitted[i] + use[pick(rng)];
      truth[d] += units[i].tto;
    }
    const auto boot_pop = std::make_shared<const Population>(std::move(units));
    const DomainAux aux = domain_aux(*boot_pop, set.fixed);
    for (std::size_t l = 0; l < cfg.L; ++l) {
      const Sample bs = draw_sample(design, boot_pop, mix_seed(mix_seed(cfg.seed, b), l + 1));
      try {
        const MQBundle bf = fit_mq(bs, spec, set.psi, false, set.mq, set.grid);
        const auto est = mq_wr_totals(bf.fits, bf.residuals, aux, cfg.estimator);
        std::vector<double> e(D);
        for (std::size_t d = 0; d < D; ++d) e[d] = (est[d] - truth[d]) * (est[d] - truth[d]);
        sq[b * cfg.L + l] = std::move(e);
      } catch (const DataError&) {
        sq[b * cfg.L + l].clear();
      }
    }
  });
  out.mse.assign(D, 0.0);
  std::vector<std::size_t> used(D, 0);
  for (const auto& e : sq) {
    if (e.empty()) {
      ++out.failures;
      continue;
    }
    for (std::size_t d = 0; d < D; ++d)
      if (!std::isnan(e[d])) {
        out.mse[d] += e[d];
        ++used[d];
      }
  }
  if (out.failures == total) throw DataError("every bootstrap sample failed");
  out.rmse.resize(D);
  for (std::size_t d = 0; d < D; ++d) {
    out.mse[d] = used[d] ? out.mse[d] / static_cast<double>(used[d]) : std::numeric_limits<double>::quiet_NaN();
    out.rmse[d] = std::sqrt(out.mse[d]);
  }
  return out;
}

inline std::string bootstrap_csv(const BootstrapMse& r) {
  std::ostringstream os;
  os << "domain,estimate,mse,rmse,rrmse_pct\n";
  for (std::size_t d = 0; d < r.domains.size(); ++d)
    os << r.domains[d] << ',' << csv::fmt(r.estimate[d]) << ',' << csv::fmt(r.mse[d]) << ',' << csv::fmt(r.rmse[d]) << ','
       << csv::fmt(r.rrmse(d)) << '\n';
  return os.str();
}

}  // namespace sae
