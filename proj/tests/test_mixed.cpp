#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "sae/sae.hpp"

using namespace sae;
using oracle::unit;

namespace {

// Ten units in three domains with every size class present.
std::vector<Unit> toy_units(double u_scale = 1.0) {
  const int sc[] = {1, 2, 3, 4, 5, 1, 2, 3, 1, 4};
  const char* dom[] = {"A", "A", "A", "A", "B", "B", "B", "C", "C", "C"};
  const double tax[] = {3.0, 5.5, 2.0, 8.0, 6.5, 4.0, 7.0, 1.5, 9.0, 5.0};
  const double noise[] = {0.4, -1.1, 0.7, 0.2, -0.5, 1.3, -0.8, 0.1, -0.3, 0.9};
  const double effect[] = {1.5, -2.0, 0.6};
  std::vector<Unit> out;
  for (int i = 0; i < 10; ++i) {
    const int d = dom[i][0] - 'A';
    const double y = 4.0 + 2.0 * tax[i] + 0.5 * sc[i] + u_scale * effect[d] + noise[i];
    out.push_back(unit("t" + std::to_string(i), dom[i], sc[i], oracle::band_wp(sc[i]), tax[i], y));
  }
  return out;
}

// Balanced layout: every domain holds the same covariate rows.
std::vector<Unit> balanced_units(int groups, std::uint64_t seed, double su, double se) {
  const int sc[] = {1, 1, 2, 3, 4, 5, 2, 3};
  const double tax[] = {1.0, 2.5, 3.0, 4.5, 6.0, 7.5, 2.0, 5.0};
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> z(0.0, 1.0);
  std::vector<Unit> out;
  for (int g = 0; g < groups; ++g) {
    const double u = su * z(rng);
    for (int j = 0; j < 8; ++j)
      out.push_back(unit("g" + std::to_string(g) + "_" + std::to_string(j), "D" + std::to_string(g), sc[j],
                         oracle::band_wp(sc[j]), tax[j], 3.0 + tax[j] + sc[j] + u + se * z(rng)));
  }
  return out;
}

double rss(const oracle::Mat& X, const oracle::Vec& y) {
  const oracle::Vec b = oracle::wls(X, y, oracle::Vec::Ones(y.size()));
  return (y - X * b).squaredNorm();
}

ModelSpec reduced_homo() { return {FixedEffects::reduced, VarianceStructure::homo, PredictionMode::observed_plus_predicted}; }

}  // namespace

TEST(Lmm, MatchesDenseOracleMlAndReml) {
  auto t = oracle::census(toy_units(3.0));
  const auto spec = reduced_homo();
  const auto d = oracle::dense(t.sample, spec);
  for (bool reml : {false, true}) {
    const MixedFit f = fit_lmm(t.sample, spec, reml ? Criterion::reml : Criterion::ml);
    const auto o = oracle::lmm_fit(d, reml);
    ASSERT_FALSE(f.boundary);
    EXPECT_LT(oracle::rel(f.beta, o.beta), 1e-6) << "reml=" << reml;
    EXPECT_LT(oracle::rel(f.sigma2_u, o.su), 1e-6);
    EXPECT_LT(oracle::rel(f.level1[0], o.se), 1e-6);
    for (std::size_t g = 0; g < 3; ++g) EXPECT_LT(std::abs(f.u_hat[g] - o.u[g]), 1e-6 * (std::abs(o.u[g]) + std::sqrt(o.su)));
    EXPECT_LT(oracle::rel(f.log_likelihood, oracle::lmm_loglik(d, o.beta, o.su, o.se, reml)), 1e-9);
  }
}

TEST(Lmm, Wp2VarianceMatchesDenseOracle) {
  auto units = toy_units(3.0);
  for (auto& u : units) u.tto += 0.05 * std::pow(u.wp, 2.0) * (u.tax1 - 5.0);
  auto t = oracle::census(units);
  const ModelSpec spec{FixedEffects::reduced, VarianceStructure::wp2, PredictionMode::observed_plus_predicted};
  const MixedFit f = fit_lmm(t.sample, spec);
  const auto o = oracle::lmm_fit(oracle::dense(t.sample, spec), false);
  if (o.su > 0.0) {
    EXPECT_LT(oracle::rel(f.sigma2_u, o.su), 1e-6);
  } else {
    EXPECT_TRUE(f.boundary);
  }
  EXPECT_LT(oracle::rel(f.beta, o.beta), 1e-6);
  EXPECT_LT(oracle::rel(f.level1[0], o.se), 1e-6);
}

TEST(Lmm, BalancedLayoutMatchesAnovaFormulas) {
  const int G = 6, m = 8;
  auto t = oracle::census(balanced_units(G, 17, 2.0, 1.0));
  const auto spec = reduced_homo();
  const auto d = oracle::dense(t.sample, spec);
  oracle::Mat XZ(d.X.rows(), d.X.cols() + G - 1);
  XZ << d.X, d.Z.rightCols(G - 1);
  const double ssw = rss(XZ, d.y);
  const double ssb = rss(d.X, d.y) - ssw;
  const double n = static_cast<double>(d.y.size()), p = static_cast<double>(d.X.cols());
  struct Case {
    Criterion c;
    double a, b;
  };
  for (const Case& k : {Case{Criterion::ml, ssw / (n - G), ssb / G}, Case{Criterion::reml, ssw / (n - p - G + 1), ssb / (G - 1)}}) {
    ASSERT_GT(k.b, k.a);
    const MixedFit f = fit_lmm(t.sample, spec, k.c);
    EXPECT_LT(oracle::rel(f.level1[0], k.a), 1e-6);
    EXPECT_LT(oracle::rel(f.sigma2_u, (k.b - k.a) / m), 1e-6);
  }
}

TEST(Lmm, BoundaryWhenNoDomainEffect) {
  auto units = balanced_units(5, 3, 0.0, 1.0);
  // remove any accidental between-domain signal by centring each domain on the pooled fit
  auto t0 = oracle::census(units);
  const auto d = oracle::dense(t0.sample, reduced_homo());
  const oracle::Vec b = oracle::wls(d.X, d.y, oracle::Vec::Ones(d.y.size()));
  const oracle::Vec r = d.y - d.X * b;
  for (std::size_t i = 0; i < units.size(); ++i) {
    const auto g = static_cast<std::size_t>(i / 8);
    double mean_r = 0.0;
    for (std::size_t j = g * 8; j < g * 8 + 8; ++j) mean_r += r(static_cast<Eigen::Index>(j)) / 8.0;
    units[i].tto -= mean_r;
  }
  auto t = oracle::census(units);
  const MixedFit f = fit_lmm(t.sample, reduced_homo());
  EXPECT_TRUE(f.boundary);
  EXPECT_EQ(f.sigma2_u, 0.0);
  for (double u : f.u_hat) EXPECT_EQ(u, 0.0);
}

TEST(Lmm, InformationCriteriaAndNesting) {
  PopGenConfig cfg;
  cfg.N = 3000;
  cfg.domains = 6;
  const auto pop = std::make_shared<const Population>(generate_population(cfg).population);
  const Sample s = draw_sample(build_design(*pop, default_allocation(*pop)), pop, 2);
  const MixedFit full = fit_lmm(s, {FixedEffects::full, VarianceStructure::homo, PredictionMode::observed_plus_predicted});
  const MixedFit red = fit_lmm(s, {FixedEffects::reduced, VarianceStructure::homo, PredictionMode::observed_plus_predicted});
  EXPECT_GE(full.log_likelihood, red.log_likelihood - 1e-9 * std::abs(red.log_likelihood));
  const auto ic = information_criteria(full);
  EXPECT_EQ(ic.aic, -2.0 * ic.log_likelihood + 2.0 * full.parameters);
  EXPECT_NEAR(ic.bic, -2.0 * ic.log_likelihood + full.parameters * std::log(static_cast<double>(full.n)), 1e-9 * std::abs(ic.bic));
  EXPECT_EQ(full.parameters, 8 + 2);
}

TEST(Lmm, BySizeClassFitsContaminatedDataBetter) {
  PopGenConfig cfg;
  cfg.N = 6000;
  cfg.domains = 8;
  const auto pop = std::make_shared<const Population>(generate_population(cfg).population);
  const Sample s = draw_sample(build_design(*pop, default_allocation(*pop)), pop, 4);
  const MixedFit homo = fit_lmm(s, {FixedEffects::full, VarianceStructure::homo, PredictionMode::observed_plus_predicted});
  const MixedFit by_sc = fit_lmm(s, {FixedEffects::full, VarianceStructure::by_sc, PredictionMode::observed_plus_predicted});
  EXPECT_LT(by_sc.aic, homo.aic);
  EXPECT_EQ(by_sc.level1.size(), 5u);
}

TEST(Lmm, ArgmaxIndependentOfStart) {
  auto t = oracle::census(balanced_units(5, 8, 1.5, 1.0));
  const MixedFit ref = fit_lmm(t.sample, reduced_homo());
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> lg(-4.0, 4.0);
  for (int k = 0; k < 5; ++k) {
    LmmOptions opt;
    opt.start = std::vector<double>{std::exp(lg(rng))};
    const MixedFit f = fit_lmm(t.sample, reduced_homo(), Criterion::ml, opt);
    EXPECT_NEAR(f.log_likelihood, ref.log_likelihood, 1e-6);
  }
}

TEST(Lmm, ConsistentOnLargeSimulatedSample) {
  const int G = 40;
  const double su2 = 4.0, se2 = 1.0;
  auto units = balanced_units(G, 99, std::sqrt(su2), std::sqrt(se2));
  // 40 domains x 8 units = 320; replicate the layout to reach 2000 units
  std::vector<Unit> all;
  std::mt19937_64 rng(5);
  std::normal_distribution<double> z(0.0, 1.0);
  for (int g = 0; g < G; ++g) {
    const double u = std::sqrt(su2) * z(rng);
    for (int j = 0; j < 50; ++j) {
      const int sc = 1 + j % 5;
      const double tax = 1.0 + (j % 7);
      all.push_back(unit("x" + std::to_string(g) + "_" + std::to_string(j), "D" + std::to_string(g), sc, oracle::band_wp(sc), tax,
                         3.0 + 2.0 * tax + sc + u + std::sqrt(se2) * z(rng)));
    }
  }
  auto t = oracle::census(all);
  const MixedFit f = fit_lmm(t.sample, reduced_homo(), Criterion::reml);
  const double n = static_cast<double>(all.size()), m = 50.0;
  const double se_e = std::sqrt(2.0 * se2 * se2 / (n - G));
  const double se_u = std::sqrt(2.0 / (G - 1)) * (su2 + se2 / m);
  EXPECT_LE(std::abs(f.level1[0] - se2), 3.0 * se_e);
  EXPECT_LE(std::abs(f.sigma2_u - su2), 3.0 * se_u);
  EXPECT_NEAR(f.beta(1), 2.0, 0.05);
}

TEST(Eblup, DenseBlupTotals) {
  auto units = toy_units(3.0);
  // non-sampled units in every domain
  units.push_back(unit("r1", "A", 2, 3, 4.0, 0.0));
  units.push_back(unit("r2", "B", 5, 30, 2.5, 0.0));
  units.push_back(unit("r3", "C", 1, 1, 6.0, 0.0));
  std::vector<std::size_t> rows(10);
  for (std::size_t i = 0; i < 10; ++i) rows[i] = i;
  auto t = oracle::subsample(units, rows, std::vector<double>(10, 0.5));
  const auto spec = reduced_homo();
  const MixedFit f = fit_lmm(t.sample, spec);
  const auto o = oracle::lmm_fit(oracle::dense(t.sample, spec), false);
  const DomainAux aux = domain_aux(*t.pop, spec.fixed);
  const auto est = eblup_totals(f, t.sample, aux);
  const char* doms[] = {"A", "B", "C"};
  for (int g = 0; g < 3; ++g) {
    double expect = 0.0;
    for (std::size_t i = 0; i < units.size(); ++i) {
      if (units[i].ind != doms[g]) continue;
      expect += i < 10 ? units[i].tto : covariates(units[i], spec.fixed).dot(o.beta) + o.u[static_cast<std::size_t>(g)];
    }
    EXPECT_LT(oracle::rel(est[static_cast<std::size_t>(g)], expect), 1e-8);
  }
  ModelSpec all = spec;
  all.prediction = PredictionMode::all_predicted;
  MixedFit fa = f;
  fa.spec = all;
  const auto est_all = eblup_totals(fa, t.sample, aux);
  double expect_a = 0.0;
  for (const Unit& u : units)
    if (u.ind == "A") expect_a += covariates(u, spec.fixed).dot(f.beta) + f.u_hat[0];
  EXPECT_LT(oracle::rel(est_all[0], expect_a), 1e-12);
}

TEST(Eblup, EnumeratedDomainAndZeroVariance) {
  auto t = oracle::census(toy_units(3.0));
  const auto spec = reduced_homo();
  MixedFit f = fit_lmm(t.sample, spec);
  const auto aux = domain_aux(*t.pop, spec.fixed);
  const auto est = eblup_totals(f, t.sample, aux);
  for (std::size_t d = 0; d < 3; ++d) EXPECT_NEAR(est[d], aux.y_total[d], 1e-12 * std::abs(aux.y_total[d]));

  auto units = toy_units(3.0);
  units.push_back(unit("r", "B", 3, 6, 2.0, 0.0));
  std::vector<std::size_t> rows(10);
  for (std::size_t i = 0; i < 10; ++i) rows[i] = i;
  auto t2 = oracle::subsample(units, rows, std::vector<double>(10, 1.0));
  MixedFit g = fit_lmm(t2.sample, spec);
  g.sigma2_u = 0.0;
  std::fill(g.u_hat.begin(), g.u_hat.end(), 0.0);
  const auto e2 = eblup_totals(g, t2.sample, domain_aux(*t2.pop, spec.fixed));
  double obs = 0.0;
  for (std::size_t i = 0; i < 10; ++i)
    if (units[i].ind == "B") obs += units[i].tto;
  EXPECT_NEAR(e2[1], obs + covariates(units[10], spec.fixed).dot(g.beta), 1e-10);
}

TEST(Eblup, ScaleEquivariance) {
  PopGenConfig cfg;
  cfg.N = 2000;
  cfg.domains = 5;
  const auto base = generate_population(cfg).population;
  std::vector<Unit> scaled = base.units();
  for (auto& u : scaled) {
    u.tto *= 3.0;
    u.tax1 *= 3.0;
  }
  const auto p1 = std::make_shared<const Population>(base.units());
  const auto p2 = std::make_shared<const Population>(scaled);
  const auto design = build_design(*p1, default_allocation(*p1));
  const Sample s1 = draw_sample(design, p1, 6);
  const Sample s2(p2, s1.parent_index(), [&] {
    std::vector<double> pi;
    for (const Unit& u : s1.units()) pi.push_back(u.pi);
    return pi;
  }());
  const ModelSpec spec{FixedEffects::reduced, VarianceStructure::homo, PredictionMode::observed_plus_predicted};
  const auto e1 = eblup_totals(fit_lmm(s1, spec), s1, domain_aux(*p1, spec.fixed));
  const auto e2 = eblup_totals(fit_lmm(s2, spec), s2, domain_aux(*p2, spec.fixed));
  for (std::size_t d = 0; d < e1.size(); ++d) EXPECT_LT(oracle::rel(e2[d], 3.0 * e1[d]), 1e-6);
}

TEST(PseudoEblup, ShrinkageFactor) {
  EXPECT_DOUBLE_EQ(pseudo_eblup_gamma(1.0, 1.0, 0.5), 2.0 / 3.0);
  EXPECT_LT(pseudo_eblup_gamma(1.0, 1.0, 0.5), pseudo_eblup_gamma(2.0, 1.0, 0.5));
  EXPECT_GT(pseudo_eblup_gamma(1.0, 1.0, 0.5), pseudo_eblup_gamma(1.0, 2.0, 0.5));
}

TEST(PseudoEblup, EqualWeightsGiveDeltaOneOverN) {
  auto t = oracle::census(toy_units(3.0), 0.25);
  MixedFit vs = fit_lmm(t.sample, reduced_homo());
  const auto fit = fit_pseudo_eblup(t.sample, vs);
  EXPECT_NEAR(fit.domains[0].delta, 1.0 / 4.0, 1e-15);
  EXPECT_NEAR(fit.domains[1].delta, 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(fit.domains[0].gamma, vs.sigma2_u / (vs.sigma2_u + vs.level1[0] / 4.0), 1e-14);
}

TEST(PseudoEblup, HandSolvedEstimatingEquation) {
  auto units = toy_units(3.0);
  units.push_back(unit("r1", "A", 2, 3, 4.0, 0.0));
  units.push_back(unit("r2", "B", 5, 30, 2.5, 0.0));
  units.push_back(unit("r3", "C", 1, 1, 6.0, 0.0));
  std::vector<std::size_t> rows(10);
  std::vector<double> pi = {0.5, 0.25, 0.5, 1.0, 0.2, 0.5, 0.5, 0.4, 0.5, 1.0};
  for (std::size_t i = 0; i < 10; ++i) rows[i] = i;
  auto t = oracle::subsample(units, rows, pi);
  const auto spec = reduced_homo();
  MixedFit vs = fit_lmm(t.sample, spec);
  vs.sigma2_u = 2.0;
  vs.level1 = {1.5};
  const auto X = design_matrix(t.sample.units(), spec.fixed);
  const int p = static_cast<int>(X.cols());
  // sum_d sum_j w x (y - gamma ybar_w - (x - gamma xbar_w)'b) = 0
  std::vector<double> W(3, 0.0), delta(3, 0.0), gamma(3), ybar(3, 0.0);
  std::vector<oracle::Vec> xbar(3, oracle::Vec::Zero(p));
  for (std::size_t k = 0; k < 10; ++k) W[static_cast<std::size_t>(t.sample.domain_of(k))] += 1.0 / pi[k];
  for (std::size_t k = 0; k < 10; ++k) {
    const auto d = static_cast<std::size_t>(t.sample.domain_of(k));
    const double wt = (1.0 / pi[k]) / W[d];
    delta[d] += wt * wt;
    ybar[d] += wt * units[k].tto;
    xbar[d] += wt * X.row(static_cast<Eigen::Index>(k)).transpose();
  }
  for (std::size_t d = 0; d < 3; ++d) gamma[d] = 2.0 / (2.0 + 1.5 * delta[d]);
  oracle::Mat M = oracle::Mat::Zero(p, p);
  oracle::Vec rhs = oracle::Vec::Zero(p);
  for (std::size_t k = 0; k < 10; ++k) {
    const auto d = static_cast<std::size_t>(t.sample.domain_of(k));
    const oracle::Vec x = X.row(static_cast<Eigen::Index>(k)).transpose();
    M += (1.0 / pi[k]) * x * (x - gamma[d] * xbar[d]).transpose();
    rhs += (1.0 / pi[k]) * x * (units[k].tto - gamma[d] * ybar[d]);
  }
  const oracle::Vec beta = oracle::gauss_solve(M, rhs);
  const auto fit = fit_pseudo_eblup(t.sample, vs);
  EXPECT_LT(oracle::rel(fit.beta_w, beta), 1e-9);
  const DomainAux aux = domain_aux(*t.pop, spec.fixed);
  const auto est = pseudo_eblup_totals(fit, aux);
  for (std::size_t d = 0; d < 3; ++d) {
    const double N = static_cast<double>(aux.count[d]);
    const double expect = N * (gamma[d] * ybar[d] + (aux.x_total[d] / N - gamma[d] * xbar[d]).dot(beta));
    EXPECT_LT(oracle::rel(est[d], expect), 1e-9);
  }
}

TEST(PseudoEblup, RejectsUnsampledDomain) {
  auto units = toy_units(3.0);
  units.push_back(unit("z", "Z", 1, 1, 1.0, 1.0));
  std::vector<std::size_t> rows(10);
  for (std::size_t i = 0; i < 10; ++i) rows[i] = i;
  auto t = oracle::subsample(units, rows, std::vector<double>(10, 1.0));
  const MixedFit vs = fit_lmm(t.sample, reduced_homo());
  EXPECT_THROW(pseudo_eblup_total(t.sample, vs, "Z"), DataError);
}
