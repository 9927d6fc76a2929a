#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>
#include <span>

#include "oracles.hpp"
#include "sae/sae.hpp"

using namespace sae;
using oracle::unit;

namespace {

std::vector<Unit> toy_units(double outlier = 0.0) {
  const int sc[] = {1, 2, 3, 4, 5, 1, 2, 3, 1, 4};
  const char* dom[] = {"A", "A", "A", "A", "B", "B", "B", "C", "C", "C"};
  const double tax[] = {3.0, 5.5, 2.0, 8.0, 6.5, 4.0, 7.0, 1.5, 9.0, 5.0};
  const double noise[] = {0.4, -1.1, 0.7, 0.2, -0.5, 1.3, -0.8, 0.1, -0.3, 0.9};
  const double effect[] = {4.5, -6.0, 1.8};
  std::vector<Unit> out;
  for (int i = 0; i < 10; ++i) {
    const double y = 4.0 + 2.0 * tax[i] + 0.5 * sc[i] + effect[dom[i][0] - 'A'] + noise[i] + (i == 6 ? outlier : 0.0);
    out.push_back(unit("t" + std::to_string(i), dom[i], sc[i], oracle::band_wp(sc[i]), tax[i], y));
  }
  return out;
}

// Four domains of eight units, every size class present in each.
std::vector<Unit> grouped_units(const std::vector<double>& effect, double outlier, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> z(0.0, 1.0);
  std::vector<Unit> out;
  for (std::size_t g = 0; g < effect.size(); ++g)
    for (int j = 0; j < 8; ++j) {
      const int sc = 1 + j % 5;
      const double tax = 1.0 + 0.7 * j + 0.3 * static_cast<double>(g);
      double y = 4.0 + 2.0 * tax + 0.5 * sc + effect[g] + z(rng);
      if (g == 1 && j == 2) y += outlier;
      out.push_back(unit("g" + std::to_string(g) + "_" + std::to_string(j), std::string(1, static_cast<char>('A' + g)), sc,
                         oracle::band_wp(sc), tax, y));
    }
  return out;
}

Eigen::MatrixXd intercept_slope(std::span<const Unit> units) {
  Eigen::MatrixXd X(static_cast<Eigen::Index>(units.size()), 2);
  for (std::size_t i = 0; i < units.size(); ++i) X.row(static_cast<Eigen::Index>(i)) << 1.0, units[i].tax1;
  return X;
}

ModelSpec reduced_homo() { return {FixedEffects::reduced, VarianceStructure::homo, PredictionMode::observed_plus_predicted}; }

}  // namespace

TEST(Huber, PsiAndWeights) {
  EXPECT_EQ(huber_psi(0.5, 1.345), 0.5);
  EXPECT_EQ(huber_psi(3.0, 1.345), 1.345);
  EXPECT_EQ(huber_psi(-3.0, 1.345), -1.345);
  EXPECT_EQ(huber_psi(1.345, 1.345), 1.345);
  EXPECT_EQ(huber_weight(0.0, 1.345), 1.0);
  EXPECT_DOUBLE_EQ(huber_weight(2.69, 1.345), 0.5);
  for (double a : {-5.0, -0.3, 0.0, 0.7, 4.0}) EXPECT_EQ(huber_psi(-a, 1.0), -huber_psi(a, 1.0));
}

TEST(Huber, ConsistencyConstantMatchesQuadrature) {
  for (double b : {0.5, 1.345, 3.0}) {
    double c = 0.0;
    const int m = 200000;
    const double h = 24.0 / m;
    for (int i = 0; i < m; ++i) {
      const double z = -12.0 + (i + 0.5) * h;
      c += oracle::psi(z, b) * oracle::psi(z, b) * std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi) * h;
    }
    EXPECT_NEAR(huber_consistency(b), c, 1e-9);
  }
}

TEST(Irls, SingleOutlierBarelyMovesLocation) {
  const Eigen::MatrixXd X = Eigen::MatrixXd::Ones(4, 1);
  Eigen::VectorXd y(4);
  y << 0.0, 0.0, 0.0, 100.0;
  const RobustFit f = irls_huber(X, y, 0.5, 1.345);
  EXPECT_LT(f.beta(0), 1.0);
  EXPECT_GE(f.beta(0), 0.0);
}

TEST(Irls, MatchesPlainReweightingOracle) {
  auto t = oracle::census(toy_units(40.0));
  const auto X = intercept_slope(t.sample.units());
  const auto y = response(t.sample.units());
  for (double q : {0.2, 0.5, 0.8}) {
    const RobustFit f = irls_huber(X, y, q, 1.345);
    const auto o = oracle::m_quantile(X, y, q, 1.345);
    EXPECT_LT(oracle::rel(f.beta, o.beta), 1e-6) << "q=" << q;
    EXPECT_LT(oracle::rel(f.scale, o.scale), 1e-6);
  }
}

TEST(Irls, MRegressionMatchesOracleOnGroupedData) {
  auto t = oracle::census(grouped_units({3.0, -2.0, 1.0, 0.0}, 30.0, 4));
  const auto X = design_matrix(t.sample.units(), FixedEffects::reduced);
  const RobustFit m = fit_mreg(t.sample, reduced_homo());
  const auto o = oracle::m_quantile(X, response(t.sample.units()), 0.5, 1.345);
  EXPECT_LT(oracle::rel(m.beta, o.beta), 1e-6);
  EXPECT_LT(oracle::rel(m.scale, o.scale), 1e-6);
}

TEST(Irls, SurveyWeightedMatchesOracle) {
  auto t = oracle::census(toy_units(40.0));
  const auto X = intercept_slope(t.sample.units());
  const auto y = response(t.sample.units());
  Eigen::VectorXd w(10);
  w << 1, 2, 1, 3, 1, 2, 5, 1, 1, 2;
  const RobustFit f = irls_huber(X, y, 0.5, 1.345, &w);
  EXPECT_LT(oracle::rel(f.beta, oracle::m_quantile(X, y, 0.5, 1.345, &w).beta), 1e-6);
}

TEST(Irls, HugeTuningConstantGivesLeastSquares) {
  auto t = oracle::census(toy_units(40.0));
  const auto X = design_matrix(t.sample.units(), FixedEffects::reduced);
  const auto y = response(t.sample.units());
  const RobustFit f = irls_huber(X, y, 0.5, 1e6);
  EXPECT_LT(oracle::rel(f.beta, oracle::wls(X, y, Eigen::VectorXd::Ones(10))), 1e-9);
}

TEST(Irls, RegressionAndScaleEquivariance) {
  auto t = oracle::census(toy_units(40.0));
  const auto X = intercept_slope(t.sample.units());
  const auto y = response(t.sample.units());
  Eigen::VectorXd c(X.cols());
  c << 1.0, -2.0;
  const RobustFit a = irls_huber(X, y, 0.3, 1.345);
  const RobustFit b = irls_huber(X, 2.5 * y + X * c, 0.3, 1.345);
  EXPECT_LT(oracle::rel(b.beta, 2.5 * a.beta + c), 1e-6);
  EXPECT_LT(oracle::rel(b.scale, 2.5 * a.scale), 1e-6);
}

TEST(Irls, RejectsBadArguments) {
  const Eigen::MatrixXd X = Eigen::MatrixXd::Ones(3, 1);
  const Eigen::VectorXd y = Eigen::VectorXd::LinSpaced(3, 0, 2);
  EXPECT_THROW(irls_huber(X, y, 0.0, 1.345), UsageError);
  EXPECT_THROW(irls_huber(X, y, 0.5, 0.0), UsageError);
  HuberConfig bad;
  bad.b = -1.0;
  EXPECT_THROW(bad.validate(), UsageError);
}

TEST(RobustSynthetic, TotalsUseFixedPartOnly) {
  auto units = toy_units(40.0);
  units.push_back(unit("r", "B", 2, 3, 3.0, 0.0));
  std::vector<std::size_t> rows(10);
  for (std::size_t i = 0; i < 10; ++i) rows[i] = i;
  auto t = oracle::subsample(units, rows, std::vector<double>(10, 1.0));
  const RobustFit f = fit_mreg(t.sample, reduced_homo());
  double obs = 0.0;
  for (std::size_t i = 0; i < 10; ++i)
    if (units[i].ind == "B") obs += units[i].tto;
  EXPECT_NEAR(robust_synthetic_total(f, t.sample, reduced_homo(), "B"), obs + covariates(units[10], FixedEffects::reduced).dot(f.beta), 1e-9);
  EXPECT_NEAR(robust_synthetic_total(f, t.sample, reduced_homo(), "A"), domain_total(*t.pop, Variable::tto, "A"), 1e-9);
}

TEST(Reblup, MatchesDenseOracle) {
  auto t = oracle::census(grouped_units({3.0, -2.0, 1.0, -1.5}, 12.0, 4));
  const auto spec = reduced_homo();
  const RobustMixedFit f = fit_reblup(t.sample, spec);
  ASSERT_TRUE(f.converged);
  ASSERT_FALSE(f.boundary);
  const MixedFit ml = fit_lmm(t.sample, spec);
  const auto o = oracle::reblup(oracle::dense(t.sample, spec), 1.345, ml.sigma2_u, ml.level1[0]);
  EXPECT_LT(oracle::rel(f.beta_psi, o.beta), 1e-6);
  EXPECT_LT(oracle::rel(f.sigma2_u_psi, o.su), 1e-6);
  EXPECT_LT(oracle::rel(f.sigma2_e_psi(), o.se), 1e-6);
  for (std::size_t g = 0; g < 4; ++g) EXPECT_NEAR(f.u_hat_psi[g], o.u[g], 1e-6 * (std::abs(o.u[g]) + std::sqrt(o.su)));
}

TEST(Reblup, HugeTuningConstantGivesMaximumLikelihood) {
  auto t = oracle::census(grouped_units({3.0, -2.0, 1.0, -1.5}, 12.0, 4));
  const auto spec = reduced_homo();
  HuberConfig cfg;
  cfg.b = 1e6;
  const RobustMixedFit f = fit_reblup(t.sample, spec, cfg);
  const MixedFit ml = fit_lmm(t.sample, spec);
  EXPECT_LT(oracle::rel(f.beta_psi, ml.beta), 1e-6);
  EXPECT_LT(oracle::rel(f.sigma2_u_psi, ml.sigma2_u), 1e-6);
  EXPECT_LT(oracle::rel(f.sigma2_e_psi(), ml.level1[0]), 1e-6);
  for (std::size_t g = 0; g < 4; ++g) EXPECT_NEAR(f.u_hat_psi[g], ml.u_hat[g], 1e-6 * std::sqrt(ml.sigma2_u));
}

TEST(Reblup, BoundaryWithoutDomainEffects) {
  auto t = oracle::census(grouped_units({0.0, 0.0, 0.0, 0.0}, 0.0, 9));
  const RobustMixedFit f = fit_reblup(t.sample, reduced_homo());
  if (f.boundary) {
    EXPECT_EQ(f.sigma2_u_psi, 0.0);
    for (double u : f.u_hat_psi) EXPECT_EQ(u, 0.0);
  } else {
    EXPECT_LT(f.sigma2_u_psi, 0.1 * f.sigma2_e_psi());
  }
}

TEST(Reblup, TotalsAddPredictedNonSampledUnits) {
  auto units = toy_units(25.0);
  units.push_back(unit("r1", "A", 3, 6, 2.0, 0.0));
  units.push_back(unit("r2", "C", 1, 1, 4.0, 0.0));
  std::vector<std::size_t> rows(10);
  for (std::size_t i = 0; i < 10; ++i) rows[i] = i;
  auto t = oracle::subsample(units, rows, std::vector<double>(10, 1.0));
  const RobustMixedFit f = fit_reblup(t.sample, reduced_homo());
  const auto est = reblup_totals(f, t.sample, domain_aux(*t.pop, FixedEffects::reduced));
  double obs_a = 0.0;
  for (std::size_t i = 0; i < 10; ++i)
    if (units[i].ind == "A") obs_a += units[i].tto;
  EXPECT_NEAR(est[0], obs_a + covariates(units[10], FixedEffects::reduced).dot(f.beta_psi) + f.u_hat_psi[0], 1e-9);
  EXPECT_NEAR(est[1], domain_total(*t.pop, Variable::tto, "B"), 1e-9);
}
