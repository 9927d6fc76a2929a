#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "sae/csv.hpp"
#include "sae/error.hpp"
#include "sae/frame.hpp"

namespace sae {

/// Requested sample size per (ind, sc) stratum.
using Allocation = std::map<std::pair<std::string, int>, long long>;

struct DesignStratum {
  StratumKey key;
  std::size_t population_size = 0;  ///< N_h
  std::size_t sample_size = 0;      ///< n_h
  bool take_all = false;

  double pi() const { return static_cast<double>(sample_size) / static_cast<double>(population_size); }
};

/// Stratified SRSWOR design bound to one population.
struct DesignSpec {
  std::vector<DesignStratum> strata;  ///< same order as Population::strata()
  std::vector<std::string> warnings;

  std::size_t total_sample_size() const {
    std::size_t n = 0;
    for (const auto& s : strata) n += s.sample_size;
    return n;
  }
};

/// Builds the design. Over-allocation is clipped to N_h (take-all) with a
/// warning. Throws DataError for non-positive entries, strata unknown to the
/// population, or population strata without an entry.
inline DesignSpec build_design(const Population& pop, const Allocation& allocation) {
  DesignSpec spec;
  for (const auto& [key, n] : allocation) {
    const auto d = pop.find_domain(key.first);
    if (!d || pop.find_stratum({*d, key.second}) == nullptr)
      throw DataError("allocation stratum (" + key.first + ", " + std::to_string(key.second) +
                      ") not present in population");
    if (n <= 0)
      throw DataError("allocation for (" + key.first + ", " + std::to_string(key.second) + ") must be positive");
  }
  for (const Stratum& s : pop.strata()) {
    const std::string& ind = pop.domains()[static_cast<std::size_t>(s.key.domain)];
    auto it = allocation.find({ind, s.key.sc});
    if (it == allocation.end())
      throw DataError("no allocation for stratum (" + ind + ", " + std::to_string(s.key.sc) + ")");
    DesignStratum ds;
    ds.key = s.key;
    ds.population_size = s.units.size();
    auto n = static_cast<std::size_t>(it->second);
    if (n > ds.population_size) {
      spec.warnings.push_back("allocation " + std::to_string(n) + " for (" + ind + ", " + std::to_string(s.key.sc) +
                              ") clipped to N_h = " + std::to_string(ds.population_size));
      n = ds.population_size;
    }
    ds.sample_size = n;
    ds.take_all = n == ds.population_size;
    spec.strata.push_back(ds);
  }
  return spec;
}

/// splitmix64 finaliser.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

/// Seed for replicate k derived from a run seed.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t k) {
  return splitmix64(seed ^ splitmix64(k + 0x632BE59BD9B4E019ull));
}

/// Draws one stratified SRSWOR sample. Pure in (design, pop, seed).
inline Sample draw_sample(const DesignSpec& design, std::shared_ptr<const Population> pop, std::uint64_t seed) {
  const auto& strata = pop->strata();
  if (strata.size() != design.strata.size()) throw DataError("design was not built for this population");
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> chosen;
  std::vector<double> pi_of(pop->size(), 0.0);
  chosen.reserve(design.total_sample_size());
  std::vector<std::size_t> pool;
  for (std::size_t h = 0; h < strata.size(); ++h) {
    const DesignStratum& ds = design.strata[h];
    if (ds.key != strata[h].key || ds.population_size != strata[h].units.size())
      throw DataError("design was not built for this population");
    pool = strata[h].units;
    const std::size_t n = ds.sample_size;
    if (!ds.take_all) {
      // partial Fisher-Yates: the first n slots become a uniform subset
      for (std::size_t j = 0; j < n; ++j) {
        std::uniform_int_distribution<std::size_t> pick(j, pool.size() - 1);
        std::swap(pool[j], pool[pick(rng)]);
      }
    }
    const double pi = ds.pi();
    for (std::size_t j = 0; j < n; ++j) {
      chosen.push_back(pool[j]);
      pi_of[pool[j]] = pi;
    }
  }
  std::sort(chosen.begin(), chosen.end());
  std::vector<double> pi;
  pi.reserve(chosen.size());
  for (std::size_t i : chosen) pi.push_back(pi_of[i]);
  return Sample(std::move(pop), std::move(chosen), std::move(pi));
}

/// Allocation CSV: ind,sc,n_h
inline Allocation load_allocation(const std::filesystem::path& path) {
  const auto lines = csv::read_lines(path);
  if (lines.empty()) throw DataError(path.string() + ": empty file");
  const auto head = csv::split(lines[0]);
  if (head.size() < 3 || csv::trim(head[0]) != "ind" || csv::trim(head[1]) != "sc" || csv::trim(head[2]) != "n_h")
    throw DataError(path.string() + ": expected header ind,sc,n_h");
  Allocation a;
  for (std::size_t r = 1; r < lines.size(); ++r) {
    const auto f = csv::split(lines[r]);
    long long sc = 0, n = 0;
    if (f.size() < 3 || !csv::parse_int(f[1], sc) || !csv::parse_int(f[2], n))
      throw DataError("bad allocation row " + std::to_string(r));
    if (!a.emplace(std::make_pair(std::string(csv::trim(f[0])), static_cast<int>(sc)), n).second)
      throw DataError("duplicate allocation stratum at row " + std::to_string(r));
  }
  return a;
}

inline std::string allocation_csv(const Allocation& a) {
  std::string out = "ind,sc,n_h\n";
  for (const auto& [key, n] : a) out += key.first + "," + std::to_string(key.second) + "," + std::to_string(n) + "\n";
  return out;
}

}  // namespace sae
