#pragma once

#include <Eigen/Dense>

#include <string>
#include <vector>

#include "sae/error.hpp"
#include "sae/frame.hpp"

namespace sae {

struct HtEstimate {
  double total = 0.0;
  bool empty_domain = false;  ///< no sampled units; total is 0
};

/// Horvitz-Thompson domain total, sum of d_i y_i over sampled units of the domain.
inline HtEstimate ht_total(const Sample& s, const std::string& ind, Variable var = Variable::tto) {
  const int d = s.parent().require_domain(ind);
  HtEstimate e;
  for (std::size_t k : s.domain_units(d)) e.total += s[k].d * value_of(s[k], var);
  e.empty_domain = s.domain_size(d) == 0;
  return e;
}

/// Per-domain HT totals in parent domain order.
inline std::vector<double> ht_totals(const Sample& s) {
  std::vector<double> t(s.parent().domain_count(), 0.0);
  for (std::size_t k = 0; k < s.size(); ++k) t[static_cast<std::size_t>(s.domain_of(k))] += s[k].d * s[k].tto;
  return t;
}

/// GREG auxiliary cells: ind x size-class group (1-9 wp, 10-49 wp); the
/// auxiliary in each cell is tax1, with no intercepts.
struct AuxSpec {
  struct Cell {
    int domain = 0;
    int group = 0;  ///< 0: sc 1-3, 1: sc 4-5
    double tax1_total = 0.0;
    std::size_t count = 0;
  };
  std::vector<Cell> cells;
  std::vector<int> cell_index;  ///< per (domain * 2 + group); -1 if the cell is empty in the population

  int cell_of(int domain, int sc) const { return cell_index[static_cast<std::size_t>(domain * 2 + size_class_group(sc))]; }
};

inline AuxSpec make_aux_spec(const Population& pop) {
  AuxSpec a;
  const std::size_t D = pop.domain_count();
  std::vector<double> tot(D * 2, 0.0);
  std::vector<std::size_t> cnt(D * 2, 0);
  for (std::size_t i = 0; i < pop.size(); ++i) {
    const std::size_t c = static_cast<std::size_t>(pop.domain_of(i)) * 2 + static_cast<std::size_t>(size_class_group(pop[i].sc));
    tot[c] += pop[i].tax1;
    ++cnt[c];
  }
  a.cell_index.assign(D * 2, -1);
  for (std::size_t c = 0; c < D * 2; ++c) {
    if (cnt[c] == 0) continue;
    a.cell_index[c] = static_cast<int>(a.cells.size());
    a.cells.push_back({static_cast<int>(c / 2), static_cast<int>(c % 2), tot[c], cnt[c]});
  }
  return a;
}

/// Fitted GREG: regression coefficients per cell and calibrated weights.
struct GregFit {
  Eigen::VectorXd beta;           ///< one slope per cell
  Eigen::VectorXd x_ht;           ///< HT estimates of the cell tax1 totals
  Eigen::VectorXd x_pop;          ///< known population cell totals
  std::vector<double> weights;    ///< calibrated weights w_i, sample order
  std::vector<int> unit_cell;     ///< cell of each sampled unit
};

/// Design-weighted least squares of y on the cell-wise tax1 columns, and the
/// calibrated weights w_i = d_i (1 + (X - x_ht)' T^{-1} x_i), T = sum d x x'.
/// Throws DataError when a population cell has no sampled unit or the
/// weighted cross-product is singular.
inline GregFit fit_greg(const Sample& s, const AuxSpec& aux) {
  const auto C = static_cast<Eigen::Index>(aux.cells.size());
  GregFit g;
  g.x_pop.resize(C);
  for (Eigen::Index c = 0; c < C; ++c) g.x_pop(c) = aux.cells[static_cast<std::size_t>(c)].tax1_total;
  Eigen::MatrixXd T = Eigen::MatrixXd::Zero(C, C);
  Eigen::VectorXd xy = Eigen::VectorXd::Zero(C);
  g.x_ht = Eigen::VectorXd::Zero(C);
  std::vector<std::size_t> n_cell(static_cast<std::size_t>(C), 0);
  g.unit_cell.resize(s.size());
  for (std::size_t k = 0; k < s.size(); ++k) {
    const Unit& u = s[k];
    const int c = aux.cell_of(s.domain_of(k), u.sc);
    if (c < 0) throw DataError("sampled unit '" + u.id + "' falls in a cell absent from the population");
    g.unit_cell[k] = c;
    T(c, c) += u.d * u.tax1 * u.tax1;
    xy(c) += u.d * u.tax1 * u.tto;
    g.x_ht(c) += u.d * u.tax1;
    ++n_cell[static_cast<std::size_t>(c)];
  }
  for (Eigen::Index c = 0; c < C; ++c) {
    const auto& cell = aux.cells[static_cast<std::size_t>(c)];
    if (n_cell[static_cast<std::size_t>(c)] == 0)
      throw DataError("GREG cannot calibrate: cell (" + s.parent().domains()[static_cast<std::size_t>(cell.domain)] +
                      ", size group " + std::to_string(cell.group + 1) + ") has no sampled units");
  }
  Eigen::LDLT<Eigen::MatrixXd> ldlt(T);
  if (ldlt.info() != Eigen::Success || (ldlt.vectorD().array().abs() <= 0.0).any())
    throw DataError("GREG design is singular");
  g.beta = ldlt.solve(xy);
  const Eigen::VectorXd lambda = ldlt.solve(g.x_pop - g.x_ht);
  g.weights.resize(s.size());
  for (std::size_t k = 0; k < s.size(); ++k) {
    const int c = g.unit_cell[k];
    g.weights[k] = s[k].d * (1.0 + lambda(c) * s[k].tax1);
  }
  return g;
}

/// GREG domain total via calibrated weights; equals HT + beta'(X - x_ht) over the domain's cells.
inline double greg_total(const GregFit& g, const Sample& s, int domain) {
  double t = 0.0;
  for (std::size_t k : s.domain_units(domain)) t += g.weights[k] * s[k].tto;
  return t;
}

inline double greg_total(const Sample& s, const AuxSpec& aux, const std::string& ind) {
  const int d = s.parent().require_domain(ind);
  if (s.domain_size(d) == 0) throw DataError("domain '" + ind + "' has no sampled units");
  return greg_total(fit_greg(s, aux), s, d);
}

inline std::vector<double> greg_totals(const GregFit& g, const Sample& s) {
  std::vector<double> t(s.parent().domain_count(), 0.0);
  for (std::size_t k = 0; k < s.size(); ++k) t[static_cast<std::size_t>(s.domain_of(k))] += g.weights[k] * s[k].tto;
  return t;
}

/// Calibrated weighted cell totals sum_i w_i x_i, for checking against AuxSpec totals.
inline Eigen::VectorXd calibrated_cell_totals(const GregFit& g, const Sample& s) {
  Eigen::VectorXd t = Eigen::VectorXd::Zero(g.x_pop.size());
  for (std::size_t k = 0; k < s.size(); ++k) t(g.unit_cell[k]) += g.weights[k] * s[k].tax1;
  return t;
}

}  // namespace sae
