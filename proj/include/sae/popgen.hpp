#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <random>
#include <string>
#include <vector>

#include "sae/design.hpp"
#include "sae/error.hpp"
#include "sae/frame.hpp"

namespace sae {

/// Synthetic business population. Units are spread over domain x size-class
/// cells; tto follows the full working model with a domain intercept and
/// right-skewed level-1 noise whose sd grows with wp^2.
struct PopGenConfig {
  std::size_t N = 63958;
  int domains = 20;
  std::array<double, kSizeClasses> class_share = {0.55, 0.28, 0.10, 0.05, 0.02};
  double domain_size_ratio = 15.0;  ///< largest / smallest domain share, geometric in between
  double wp_decay = 1.5;            ///< P(wp = k) within a band is proportional to k^-decay
  double tax1_per_wp = 100.0;       ///< median tax1 is tax1_per_wp * wp^tax1_wp_power
  double tax1_wp_power = 2.0;
  double tax1_log_sd = 1.0;
  /// intercept, tax1, sc, wp, tax1*wp
  std::array<double, 5> beta = {20.0, 1.0, 5.0, 2.0, 0.002};
  double sigma_u = 250.0;
  double sigma_e = 20.0;   ///< sd of e is sigma_e * wp^2
  double skew_shape = 0.5; ///< log-sd of the standardised log-normal noise; 0 gives normal noise
  double contamination = 0.03;
  double kappa = 25.0;
  int gross_outliers = 5;        ///< placed in size class 5 of the smallest domains
  double gross_multiplier = 10.0; ///< noise of a gross outlier is +multiplier times its noise sd
  std::uint64_t seed = 1;

  void validate() const {
    if (domains < 1) throw UsageError("need at least one domain");
    if (!(contamination >= 0.0 && contamination < 1.0)) throw UsageError("contamination must lie in [0,1)");
    if (!(kappa >= 1.0)) throw UsageError("kappa must be at least 1");
    if (!(domain_size_ratio >= 1.0)) throw UsageError("domain size ratio must be at least 1");
    if (!(tax1_per_wp > 0.0) || !(tax1_log_sd >= 0.0) || !(sigma_e >= 0.0) || !(sigma_u >= 0.0) || !(skew_shape >= 0.0))
      throw UsageError("generator scales must be nonnegative");
    if (gross_outliers < 0 || gross_outliers > domains) throw UsageError("gross outliers must be between 0 and the domain count");
    for (double s : class_share)
      if (!(s > 0.0)) throw UsageError("size-class shares must be positive");
  }
};

inline std::string domain_label(int d) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "ind%02d", d + 1);
  return buf;
}

/// Cell counts [domain][sc-1] summing to N, by largest remainder. Throws
/// DataError if some cell would be empty.
inline std::vector<std::array<std::size_t, kSizeClasses>> cell_counts(const PopGenConfig& cfg) {
  cfg.validate();
  const int D = cfg.domains;
  std::vector<double> dshare(static_cast<std::size_t>(D));
  for (int d = 0; d < D; ++d)
    dshare[static_cast<std::size_t>(d)] = D == 1 ? 1.0 : std::pow(cfg.domain_size_ratio, static_cast<double>(d) / (D - 1));
  double dsum = 0.0, csum = 0.0;
  for (double v : dshare) dsum += v;
  for (double v : cfg.class_share) csum += v;
  struct Cell {
    std::size_t d, c;
    double exact;
  };
  std::vector<Cell> cells;
  std::size_t assigned = 0;
  std::vector<std::array<std::size_t, kSizeClasses>> out(static_cast<std::size_t>(D));
  for (std::size_t d = 0; d < out.size(); ++d)
    for (std::size_t c = 0; c < kSizeClasses; ++c) {
      const double exact = static_cast<double>(cfg.N) * dshare[d] / dsum * cfg.class_share[c] / csum;
      out[d][c] = static_cast<std::size_t>(std::floor(exact));
      assigned += out[d][c];
      cells.push_back({d, c, exact - std::floor(exact)});
    }
  std::stable_sort(cells.begin(), cells.end(), [](const Cell& a, const Cell& b) { return a.exact > b.exact; });
  for (std::size_t k = 0; assigned < cfg.N; ++k, ++assigned) ++out[cells[k % cells.size()].d][cells[k % cells.size()].c];
  for (std::size_t d = 0; d < out.size(); ++d)
    for (std::size_t c = 0; c < kSizeClasses; ++c)
      if (out[d][c] == 0)
        throw DataError("population too small: cell (" + domain_label(static_cast<int>(d)) + ", sc " + std::to_string(c + 1) +
                        ") would be empty");
  return out;
}

struct GeneratedPopulation {
  Population population;
  std::vector<std::string> gross_outliers;
  std::vector<std::string> contaminated;
};

inline constexpr std::array<std::pair<int, int>, kSizeClasses> kWpBands = {{{1, 1}, {2, 4}, {5, 9}, {10, 19}, {20, 49}}};

inline GeneratedPopulation generate_population(const PopGenConfig& cfg) {
  const auto counts = cell_counts(cfg);
  std::mt19937_64 rng(splitmix64(cfg.seed));
  std::normal_distribution<double> z(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  std::vector<std::discrete_distribution<int>> wp_dist;
  for (const auto& [lo, hi] : kWpBands) {
    std::vector<double> w;
    for (int k = lo; k <= hi; ++k) w.push_back(std::pow(static_cast<double>(k), -cfg.wp_decay));
    wp_dist.emplace_back(w.begin(), w.end());
  }
  const double s = cfg.skew_shape;
  const double ln_mean = std::exp(0.5 * s * s);
  const double ln_sd = std::sqrt((std::exp(s * s) - 1.0) * std::exp(s * s));
  auto noise = [&] {
    const double g = z(rng);
    return s > 0.0 ? (std::exp(s * g) - ln_mean) / ln_sd : g;
  };

  const int D = cfg.domains;
  std::vector<double> u(static_cast<std::size_t>(D));
  for (auto& v : u) v = cfg.sigma_u * z(rng);

  GeneratedPopulation out;
  std::vector<Unit> units;
  units.reserve(cfg.N);
  std::vector<double> noise_sd;
  std::vector<double> base;
  for (int d = 0; d < D; ++d) {
    for (int c = 0; c < kSizeClasses; ++c) {
      for (std::size_t k = 0; k < counts[static_cast<std::size_t>(d)][static_cast<std::size_t>(c)]; ++k) {
        Unit un;
        char id[24];
        std::snprintf(id, sizeof id, "u%06zu", units.size() + 1);
        un.id = id;
        un.ind = domain_label(d);
        un.sc = c + 1;
        un.wp = kWpBands[static_cast<std::size_t>(c)].first + wp_dist[static_cast<std::size_t>(c)](rng);
        const double w = static_cast<double>(un.wp);
        un.tax1 = cfg.tax1_per_wp * std::pow(w, cfg.tax1_wp_power) * std::exp(cfg.tax1_log_sd * z(rng));
        const double mean = cfg.beta[0] + cfg.beta[1] * un.tax1 + cfg.beta[2] * un.sc + cfg.beta[3] * w +
                            cfg.beta[4] * un.tax1 * w + u[static_cast<std::size_t>(d)];
        const double sd = cfg.sigma_e * w * w;
        double e = sd * noise();
        if (unif(rng) < cfg.contamination) {
          e *= cfg.kappa;
          out.contaminated.push_back(un.id);
        }
        un.tto = mean + e;
        base.push_back(mean);
        noise_sd.push_back(sd);
        units.push_back(std::move(un));
      }
    }
  }
  // gross outliers: one per smallest domain, inside size class 5
  for (int g = 0; g < cfg.gross_outliers; ++g) {
    const int d = g;
    std::vector<std::size_t> cand;
    for (std::size_t i = 0; i < units.size(); ++i)
      if (units[i].ind == domain_label(d) && units[i].sc == kSizeClasses) cand.push_back(i);
    const std::size_t pick = cand[static_cast<std::size_t>(unif(rng) * static_cast<double>(cand.size())) % cand.size()];
    units[pick].tto = base[pick] + cfg.gross_multiplier * noise_sd[pick];
    out.gross_outliers.push_back(units[pick].id);
  }
  out.population = Population(std::move(units));
  return out;
}

/// Sampling fractions per size class, a per-stratum minimum, and a
/// take-all rule for small strata.
struct AllocationConfig {
  std::array<double, kSizeClasses> fraction = {0.03, 0.05, 0.10, 0.25, 0.60};
  long long minimum = 3;
  std::size_t take_all_at_most = 30;  ///< strata with N_h at or below this are fully enumerated
};

inline Allocation default_allocation(const Population& pop, const AllocationConfig& cfg = {}) {
  Allocation a;
  for (const auto& s : pop.strata()) {
    const auto Nh = static_cast<long long>(s.units.size());
    long long n = std::llround(cfg.fraction[static_cast<std::size_t>(s.key.sc - 1)] * static_cast<double>(Nh));
    n = std::max(n, cfg.minimum);
    if (s.units.size() <= cfg.take_all_at_most || n > Nh) n = Nh;
    a[{pop.domains()[static_cast<std::size_t>(s.key.domain)], s.key.sc}] = n;
  }
  return a;
}

}  // namespace sae
