#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "sae/csv.hpp"
#include "sae/error.hpp"

namespace sae {

/// One business record.
struct Unit {
  std::string id;
  std::string ind;  ///< industry code, the estimation domain
  int sc = 1;       ///< size class 1..5
  int wp = 1;       ///< working persons
  double tax1 = 0;  ///< prior-year tax turnover (auxiliary)
  double tto = 0;   ///< target tax turnover
  double pi = 1;    ///< inclusion probability (samples only)
  double d = 1;     ///< design weight 1/pi (samples only)

  friend bool operator==(const Unit&, const Unit&) = default;
};

/// Size-class banding of working persons: 1, 2-4, 5-9, 10-19, 20-49.
/// Returns nullopt outside 1..49.
inline std::optional<int> size_class_for_wp(int wp) {
  if (wp < 1) return std::nullopt;
  if (wp == 1) return 1;
  if (wp <= 4) return 2;
  if (wp <= 9) return 3;
  if (wp <= 19) return 4;
  if (wp <= 49) return 5;
  return std::nullopt;
}

/// Size-class group used by the GREG auxiliary cells: 0 for 1-9 wp, 1 for 10-49.
inline int size_class_group(int sc) { return sc <= 3 ? 0 : 1; }

inline constexpr int kSizeClasses = 5;

enum class Variable { tto, tax1, wp };

inline double value_of(const Unit& u, Variable v) {
  switch (v) {
    case Variable::tto: return u.tto;
    case Variable::tax1: return u.tax1;
    case Variable::wp: return static_cast<double>(u.wp);
  }
  return 0.0;
}

/// Stratum = (domain index, size class).
struct StratumKey {
  int domain = 0;
  int sc = 1;
  friend auto operator<=>(const StratumKey&, const StratumKey&) = default;
};

struct Stratum {
  StratumKey key;
  std::vector<std::size_t> units;  ///< indices into Population::units()
};

/// Immutable population frame with domain and stratum indices.
class Population {
 public:
  Population() = default;

  /// Validates and indexes. Throws DataError on duplicate ids, size-class /
  /// working-persons mismatch, or non-finite values.
  explicit Population(std::vector<Unit> units) : units_(std::move(units)) {
    std::set<std::string> domain_set;
    std::unordered_map<std::string, std::size_t> seen;
    seen.reserve(units_.size());
    for (std::size_t i = 0; i < units_.size(); ++i) {
      const Unit& u = units_[i];
      if (!seen.emplace(u.id, i).second) throw DataError("duplicate id '" + u.id + "'");
      check_unit(u, i + 1);
      domain_set.insert(u.ind);
    }
    domains_.assign(domain_set.begin(), domain_set.end());
    domain_of_.resize(units_.size());
    domain_units_.resize(domains_.size());
    std::map<StratumKey, std::vector<std::size_t>> strata;
    for (std::size_t i = 0; i < units_.size(); ++i) {
      const int d = static_cast<int>(std::lower_bound(domains_.begin(), domains_.end(), units_[i].ind) - domains_.begin());
      domain_of_[i] = d;
      domain_units_[static_cast<std::size_t>(d)].push_back(i);
      strata[{d, units_[i].sc}].push_back(i);
    }
    for (auto& [key, idx] : strata) strata_.push_back({key, std::move(idx)});
  }

  std::size_t size() const { return units_.size(); }
  const std::vector<Unit>& units() const { return units_; }
  const Unit& operator[](std::size_t i) const { return units_[i]; }

  const std::vector<std::string>& domains() const { return domains_; }
  std::size_t domain_count() const { return domains_.size(); }
  int domain_of(std::size_t unit) const { return domain_of_[unit]; }
  const std::vector<std::size_t>& domain_units(int d) const { return domain_units_[static_cast<std::size_t>(d)]; }

  /// Index of a domain label; nullopt when absent.
  std::optional<int> find_domain(const std::string& ind) const {
    auto it = std::lower_bound(domains_.begin(), domains_.end(), ind);
    if (it == domains_.end() || *it != ind) return std::nullopt;
    return static_cast<int>(it - domains_.begin());
  }

  int require_domain(const std::string& ind) const {
    auto d = find_domain(ind);
    if (!d) throw DataError("unknown domain '" + ind + "'");
    return *d;
  }

  const std::vector<Stratum>& strata() const { return strata_; }

  const Stratum* find_stratum(StratumKey key) const {
    auto it = std::lower_bound(strata_.begin(), strata_.end(), key,
                               [](const Stratum& s, const StratumKey& k) { return s.key < k; });
    if (it == strata_.end() || it->key != key) return nullptr;
    return &*it;
  }

  friend bool operator==(const Population& a, const Population& b) { return a.units_ == b.units_; }

  static void check_unit(const Unit& u, std::size_t row) {
    const std::string where = " (row " + std::to_string(row) + ", id '" + u.id + "')";
    if (u.id.empty()) throw DataError("empty id" + where);
    if (u.ind.empty()) throw DataError("empty ind" + where);
    if (u.sc < 1 || u.sc > kSizeClasses) throw DataError("size class outside 1..5" + where);
    const auto band = size_class_for_wp(u.wp);
    if (!band) throw DataError("wp " + std::to_string(u.wp) + " outside 1-49" + where);
    if (*band != u.sc)
      throw DataError("wp " + std::to_string(u.wp) + " implies size class " + std::to_string(*band) + " but sc is " +
                      std::to_string(u.sc) + where);
    if (!std::isfinite(u.tax1) || u.tax1 < 0) throw DataError("tax1 must be finite and nonnegative" + where);
    if (!std::isfinite(u.tto)) throw DataError("tto must be finite" + where);
  }

 private:
  std::vector<Unit> units_;
  std::vector<std::string> domains_;
  std::vector<int> domain_of_;
  std::vector<std::vector<std::size_t>> domain_units_;
  std::vector<Stratum> strata_;
};

/// Exact sum of a variable over the units of one domain.
inline double domain_total(const Population& pop, Variable var, const std::string& ind) {
  const int d = pop.require_domain(ind);
  double s = 0.0;
  for (std::size_t i : pop.domain_units(d)) s += value_of(pop[i], var);
  return s;
}

inline double population_total(const Population& pop, Variable var) {
  double s = 0.0;
  for (const Unit& u : pop.units()) s += value_of(u, var);
  return s;
}

/// A without-replacement sample from a parent population. Units carry pi and d.
class Sample {
 public:
  Sample() = default;

  /// `parent_index[k]` is the parent row of sampled unit k; `pi[k]` its inclusion probability.
  Sample(std::shared_ptr<const Population> parent, std::vector<std::size_t> parent_index, std::vector<double> pi)
      : parent_(std::move(parent)), parent_index_(std::move(parent_index)) {
    if (!parent_) throw DataError("sample without parent population");
    if (pi.size() != parent_index_.size()) throw DataError("pi length mismatch");
    const std::size_t n = parent_index_.size();
    units_.reserve(n);
    domain_of_.resize(n);
    domain_units_.resize(parent_->domain_count());
    std::vector<char> used(parent_->size(), 0);
    for (std::size_t k = 0; k < n; ++k) {
      const std::size_t i = parent_index_[k];
      if (i >= parent_->size()) throw DataError("sample unit not in parent population");
      if (used[i]) throw DataError("unit '" + (*parent_)[i].id + "' sampled twice");
      used[i] = 1;
      if (!(pi[k] > 0.0 && pi[k] <= 1.0)) throw DataError("inclusion probability outside (0,1] for '" + (*parent_)[i].id + "'");
      Unit u = (*parent_)[i];
      u.pi = pi[k];
      u.d = 1.0 / pi[k];
      units_.push_back(std::move(u));
      domain_of_[k] = parent_->domain_of(i);
      domain_units_[static_cast<std::size_t>(domain_of_[k])].push_back(k);
      ++n_h_[{domain_of_[k], units_.back().sc}];
    }
    for (const auto& [key, n_h] : n_h_) {
      const Stratum* s = parent_->find_stratum(key);
      if (s == nullptr || static_cast<std::size_t>(n_h) > s->units.size()) throw DataError("stratum count exceeds N_h");
    }
  }

  std::size_t size() const { return units_.size(); }
  const std::vector<Unit>& units() const { return units_; }
  const Unit& operator[](std::size_t k) const { return units_[k]; }
  const Population& parent() const { return *parent_; }
  const std::shared_ptr<const Population>& parent_ptr() const { return parent_; }
  const std::vector<std::size_t>& parent_index() const { return parent_index_; }

  /// Domain index (in the parent's domain list) of sampled unit k.
  int domain_of(std::size_t k) const { return domain_of_[k]; }
  const std::vector<std::size_t>& domain_units(int d) const { return domain_units_[static_cast<std::size_t>(d)]; }
  std::size_t domain_size(int d) const { return domain_units_[static_cast<std::size_t>(d)].size(); }

  /// Achieved count per stratum.
  const std::map<StratumKey, int>& stratum_counts() const { return n_h_; }

 private:
  std::shared_ptr<const Population> parent_;
  std::vector<std::size_t> parent_index_;
  std::vector<Unit> units_;
  std::vector<int> domain_of_;
  std::vector<std::vector<std::size_t>> domain_units_;
  std::map<StratumKey, int> n_h_;
};

// ---------------------------------------------------------------------------
// CSV interchange

inline constexpr const char* kPopulationHeader = "id,ind,sc,wp,tax1,tto";
inline constexpr const char* kSampleHeader = "id,ind,sc,wp,tax1,tto,pi,d";

namespace detail {

inline Unit parse_unit_row(const std::vector<std::string>& f, std::size_t row) {
  const std::string where = " at row " + std::to_string(row);
  Unit u;
  u.id = std::string(csv::trim(f[0]));
  u.ind = std::string(csv::trim(f[1]));
  long long sc = 0, wp = 0;
  if (!csv::parse_int(f[2], sc)) throw DataError("non-numeric sc '" + f[2] + "'" + where);
  if (!csv::parse_int(f[3], wp)) throw DataError("non-numeric wp '" + f[3] + "'" + where);
  if (!csv::parse_double(f[4], u.tax1)) throw DataError("non-numeric or missing tax1 '" + f[4] + "'" + where);
  if (!csv::parse_double(f[5], u.tto)) throw DataError("non-numeric or missing tto '" + f[5] + "'" + where);
  u.sc = static_cast<int>(sc);
  u.wp = static_cast<int>(wp);
  Population::check_unit(u, row);
  return u;
}

inline void expect_header(const std::string& got, const std::vector<std::string>& want, const std::string& path) {
  const auto cols = csv::split(got);
  for (std::size_t c = 0; c < want.size(); ++c) {
    if (c >= cols.size()) throw DataError(path + ": missing column '" + want[c] + "'");
    if (csv::trim(cols[c]) != want[c])
      throw DataError(path + ": expected column '" + want[c] + "' at position " + std::to_string(c + 1) + ", found '" +
                      cols[c] + "'");
  }
}

}  // namespace detail

/// Loads a population CSV with header id,ind,sc,wp,tax1,tto.
inline Population load_population(const std::filesystem::path& path) {
  const auto lines = csv::read_lines(path);
  if (lines.empty()) throw DataError(path.string() + ": empty file");
  detail::expect_header(lines[0], csv::split(kPopulationHeader), path.string());
  std::vector<Unit> units;
  units.reserve(lines.size() - 1);
  std::unordered_map<std::string, std::size_t> seen;
  for (std::size_t r = 1; r < lines.size(); ++r) {
    const auto f = csv::split(lines[r]);
    if (f.size() < 6) throw DataError("too few fields at row " + std::to_string(r));
    Unit u = detail::parse_unit_row(f, r);
    if (!seen.emplace(u.id, r).second) throw DataError("duplicate id '" + u.id + "' at row " + std::to_string(r));
    units.push_back(std::move(u));
  }
  return Population(std::move(units));
}

inline std::string population_csv(const Population& pop) {
  std::string out = std::string(kPopulationHeader) + "\n";
  for (const Unit& u : pop.units()) {
    out += u.id + "," + u.ind + "," + std::to_string(u.sc) + "," + std::to_string(u.wp) + "," + csv::fmt(u.tax1) + "," +
           csv::fmt(u.tto) + "\n";
  }
  return out;
}

inline void write_population(const Population& pop, const std::filesystem::path& path) {
  csv::write_atomic(path, population_csv(pop));
}

inline std::string sample_csv(const Sample& s) {
  std::string out = std::string(kSampleHeader) + "\n";
  for (const Unit& u : s.units()) {
    out += u.id + "," + u.ind + "," + std::to_string(u.sc) + "," + std::to_string(u.wp) + "," + csv::fmt(u.tax1) + "," +
           csv::fmt(u.tto) + "," + csv::fmt(u.pi) + "," + csv::fmt(u.d) + "\n";
  }
  return out;
}

inline void write_sample(const Sample& s, const std::filesystem::path& path) { csv::write_atomic(path, sample_csv(s)); }

/// Loads a sample CSV and links each row to its parent unit by id. The unit
/// fields must agree with the parent and d must equal 1/pi.
inline Sample load_sample(const std::filesystem::path& path, std::shared_ptr<const Population> parent) {
  const auto lines = csv::read_lines(path);
  if (lines.empty()) throw DataError(path.string() + ": empty file");
  detail::expect_header(lines[0], csv::split(kSampleHeader), path.string());
  std::unordered_map<std::string, std::size_t> by_id;
  by_id.reserve(parent->size());
  for (std::size_t i = 0; i < parent->size(); ++i) by_id.emplace((*parent)[i].id, i);
  std::vector<std::size_t> idx;
  std::vector<double> pi;
  for (std::size_t r = 1; r < lines.size(); ++r) {
    const auto f = csv::split(lines[r]);
    if (f.size() < 8) throw DataError("too few fields at row " + std::to_string(r));
    const Unit u = detail::parse_unit_row(f, r);
    double p = 0, d = 0;
    if (!csv::parse_double(f[6], p) || !csv::parse_double(f[7], d))
      throw DataError("non-numeric pi/d at row " + std::to_string(r));
    if (!(p > 0.0 && p <= 1.0)) throw DataError("pi outside (0,1] at row " + std::to_string(r));
    if (std::abs(d * p - 1.0) > 1e-9) throw DataError("d != 1/pi at row " + std::to_string(r));
    auto it = by_id.find(u.id);
    if (it == by_id.end()) throw DataError("sample id '" + u.id + "' not in population");
    const Unit& pu = (*parent)[it->second];
    if (pu.ind != u.ind || pu.sc != u.sc || pu.wp != u.wp || pu.tax1 != u.tax1 || pu.tto != u.tto)
      throw DataError("sample row for '" + u.id + "' disagrees with population");
    idx.push_back(it->second);
    pi.push_back(p);
  }
  return Sample(std::move(parent), std::move(idx), std::move(pi));
}

}  // namespace sae
