#pragma once

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "sae/sae.hpp"

namespace sae::cli {

enum ExitCode { ok = 0, usage = 1, data = 2 };

namespace detail {

inline VarianceStructure parse_variance(const std::string& v) {
  if (v == "homo") return VarianceStructure::homo;
  if (v == "by_sc" || v == "sc") return VarianceStructure::by_sc;
  if (v == "wp2") return VarianceStructure::wp2;
  throw UsageError("unknown variance structure '" + v + "' (homo|by_sc|wp2)");
}

inline FixedEffects parse_model(const std::string& v) {
  if (v == "full") return FixedEffects::full;
  if (v == "reduced") return FixedEffects::reduced;
  throw UsageError("unknown model '" + v + "' (full|reduced)");
}

inline Criterion parse_criterion(const std::string& v) {
  if (v == "ml") return Criterion::ml;
  if (v == "reml") return Criterion::reml;
  throw UsageError("unknown criterion '" + v + "' (ml|reml)");
}

inline PredictionMode parse_prediction(const std::string& v) {
  if (v == "observed") return PredictionMode::observed_plus_predicted;
  if (v == "all") return PredictionMode::all_predicted;
  throw UsageError("unknown prediction mode '" + v + "' (observed|all)");
}

inline ScaleRule parse_scale_rule(const std::string& v) {
  if (v == "domain") return ScaleRule::domain;
  if (v == "pooled") return ScaleRule::pooled;
  throw UsageError("unknown scale rule '" + v + "' (domain|pooled)");
}

inline ResidualPool parse_pool(const std::string& v) {
  if (v == "unconditional") return ResidualPool::unconditional;
  if (v == "domain") return ResidualPool::by_domain;
  if (v == "size-class") return ResidualPool::by_size_class;
  throw UsageError("unknown residual pool '" + v + "' (size-class|unconditional|domain)");
}

/// Options shared by the estimating subcommands.
struct ModelFlags {
  std::string model = "full";
  std::string variance = "homo";
  std::string criterion = "ml";
  std::string prediction = "observed";
  std::string scale_rule = "domain";
  double b_psi = 1.345;
  std::string grid;
  bool interpolate = false;
  bool weighted_qbar = false;

  void add(CLI::App* app) {
    app->add_option("--model", model, "fixed effects: full|reduced")->capture_default_str();
    app->add_option("--variance", variance, "level-1 variance: homo|by_sc|wp2")->capture_default_str();
    app->add_option("--criterion", criterion, "mixed model criterion: ml|reml")->capture_default_str();
    app->add_option("--prediction", prediction, "observed (observed plus predicted) or all (all predicted)")
        ->capture_default_str();
    app->add_option("--scale-rule", scale_rule, "residual scale for the bias adjustment: domain|pooled")->capture_default_str();
    app->add_option("--b-psi", b_psi, "Huber tuning constant for the fits")->capture_default_str();
    app->add_option("--grid", grid, "quantile grid, lo:hi:step or a comma list (default 0.001, 0.01..0.99, 0.999)");
    app->add_flag("--interpolate-q", interpolate, "interpolate grid coefficients instead of refitting at each domain q");
    app->add_flag("--weighted-qbar", weighted_qbar, "use the design-weighted mean of unit q coefficients");
  }

  EstimationSettings settings() const {
    EstimationSettings s;
    s.fixed = parse_model(model);
    parse_variance(variance);
    s.criterion = parse_criterion(criterion);
    s.prediction = parse_prediction(prediction);
    s.scale_rule = parse_scale_rule(scale_rule);
    s.psi.b = b_psi;
    s.psi.validate();
    if (!grid.empty()) {
      s.grid = parse_grid(grid);
      validate_quantile_grid(s.grid);
    }
    s.mq.interpolate_coefficients = interpolate;
    s.mq.weighted_qbar = weighted_qbar;
    return s;
  }
};

inline std::shared_ptr<const Population> load_pop(const std::string& path) {
  return std::make_shared<const Population>(load_population(path));
}

inline DesignSpec load_design(const Population& pop, const std::string& alloc_path, std::ostream& err) {
  const Allocation a = alloc_path.empty() ? default_allocation(pop) : load_allocation(alloc_path);
  DesignSpec d = build_design(pop, a);
  for (const auto& w : d.warnings) err << "warning: " << w << '\n';
  return d;
}

/// Applies --variance to estimator names given without a variance suffix.
inline std::vector<EstimatorSpec> estimators_with_variance(const std::string& list, double b_phi, VarianceStructure v) {
  auto out = parse_estimators(list, b_phi);
  const auto names = csv::split(list);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const std::string n(csv::trim(names[i]));
    const bool has_suffix = n.ends_with("-sc") || n.ends_with("-wp2");
    if (!has_suffix && (out[i].method == Method::eblup || out[i].method == Method::peblup || out[i].method == Method::reblup))
      out[i].variance = v;
  }
  return out;
}

inline std::string mixed_fit_csv(const MixedFit& f) {
  std::ostringstream os;
  os << "parameter,estimate\n";
  const auto names = coefficient_names(f.spec.fixed);
  for (std::size_t j = 0; j < names.size(); ++j) os << names[j] << ',' << csv::fmt(f.beta(static_cast<Eigen::Index>(j))) << '\n';
  os << "sigma2_u," << csv::fmt(f.sigma2_u) << '\n';
  if (f.spec.variance == VarianceStructure::by_sc) {
    for (std::size_t k = 0; k < f.level1.size(); ++k) os << "sigma2_e_sc" << k + 1 << ',' << csv::fmt(f.level1[k]) << '\n';
  } else {
    os << (f.spec.variance == VarianceStructure::wp2 ? "sigma2_eps," : "sigma2_e,") << csv::fmt(f.level1[0]) << '\n';
  }
  os << "loglik," << csv::fmt(f.log_likelihood) << '\n';
  os << "aic," << csv::fmt(f.aic) << '\n';
  os << "bic," << csv::fmt(f.bic) << '\n';
  os << "boundary," << (f.boundary ? 1 : 0) << '\n';
  os << "converged," << (f.converged ? 1 : 0) << '\n';
  return os.str();
}

}  // namespace detail

/// Entry point for the command-line tool. Returns 0 on success, 1 on usage
/// errors and 2 on data or convergence errors.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Small-domain estimation for skewed business survey data"};
  app.require_subcommand(1);
  app.allow_config_extras(false);
  unsigned threads = default_threads();
  std::uint64_t seed = 1;

  auto with_common = [&](CLI::App* sub) {
    sub->set_config("--config", "", "flat key = value file; command-line flags take precedence");
    sub->allow_config_extras(false);
    sub->add_option("--seed", seed, "random seed")->capture_default_str();
    sub->add_option("--threads", threads, "worker threads")->check(CLI::PositiveNumber);
  };

  // gen-pop
  auto* gen = app.add_subcommand("gen-pop", "generate a synthetic population frame");
  with_common(gen);
  PopGenConfig pg;
  std::string gen_out, gen_alloc_out;
  gen->add_option("--out", gen_out, "population CSV")->required();
  gen->add_option("--alloc-out", gen_alloc_out, "also write the default allocation CSV");
  gen->add_option("--N", pg.N, "population size")->capture_default_str();
  gen->add_option("--domains", pg.domains, "number of domains")->capture_default_str();
  gen->add_option("--sigma-u", pg.sigma_u, "domain effect sd")->capture_default_str();
  gen->add_option("--sigma-e", pg.sigma_e, "level-1 noise sd per wp^2")->capture_default_str();
  gen->add_option("--contamination", pg.contamination, "fraction of contaminated units")->capture_default_str();
  gen->add_option("--kappa", pg.kappa, "noise multiplier of contaminated units")->capture_default_str();
  gen->add_option("--gross-outliers", pg.gross_outliers, "gross outliers planted in size class 5")->capture_default_str();
  gen->add_option("--gross-multiplier", pg.gross_multiplier, "size of a gross outlier in noise sds")->capture_default_str();

  // sample
  auto* smp = app.add_subcommand("sample", "draw a stratified sample");
  with_common(smp);
  std::string smp_pop, smp_alloc, smp_out;
  smp->add_option("--pop", smp_pop, "population CSV")->required();
  smp->add_option("--alloc", smp_alloc, "allocation CSV (ind,sc,n_h); default fractions when omitted");
  smp->add_option("--out", smp_out, "sample CSV")->required();

  // estimate
  auto* est = app.add_subcommand("estimate", "domain totals from one sample");
  with_common(est);
  detail::ModelFlags est_flags;
  est_flags.add(est);
  std::string est_pop, est_sample, est_out, est_fit_out, est_method = "mqwr";
  double est_b_phi = 1.0;
  est->add_option("--pop", est_pop, "population CSV")->required();
  est->add_option("--sample", est_sample, "sample CSV")->required();
  est->add_option("--method", est_method, "estimator or comma list")->capture_default_str();
  est->add_option("--b-phi", est_b_phi, "bias-adjustment tuning constant for mqwr")->capture_default_str();
  est->add_option("--out", est_out, "estimates CSV")->required();
  est->add_option("--fit-out", est_fit_out, "mixed model fit summary CSV (eblup methods)");

  // diagnose
  auto* dia = app.add_subcommand("diagnose", "working-model residuals, leverage and Cook's distance");
  with_common(dia);
  std::string dia_pop, dia_sample, dia_out, dia_qq, dia_model = "full";
  dia->add_option("--pop", dia_pop, "population CSV")->required();
  dia->add_option("--sample", dia_sample, "diagnose this sample instead of the population");
  dia->add_option("--model", dia_model, "full|reduced")->capture_default_str();
  dia->add_option("--out", dia_out, "per-unit diagnostics CSV")->required();
  dia->add_option("--qq-out", dia_qq, "normal probability pairs CSV");

  // reduce-pop
  auto* red = app.add_subcommand("reduce-pop", "remove the most influential units");
  with_common(red);
  std::string red_pop, red_out, red_removed, red_model = "full";
  std::optional<std::size_t> red_k;
  std::optional<double> red_threshold;
  red->add_option("--pop", red_pop, "population CSV")->required();
  red->add_option("--model", red_model, "full|reduced")->capture_default_str();
  auto* top_k = red->add_option("--top-k", red_k, "remove this many units");
  auto* thr = red->add_option("--cooks-threshold", red_threshold, "remove while the largest Cook's distance exceeds this");
  top_k->excludes(thr);
  red->add_option("--out", red_out, "reduced population CSV")->required();
  red->add_option("--removed-out", red_removed, "removed ids CSV");

  // simulate
  auto* sim = app.add_subcommand("simulate", "repeated-sampling evaluation");
  with_common(sim);
  detail::ModelFlags sim_flags;
  sim_flags.add(sim);
  std::string sim_pop, sim_alloc, sim_out, sim_estimators;
  std::size_t sim_K = 500;
  sim->add_option("--pop", sim_pop, "population CSV")->required();
  sim->add_option("--alloc", sim_alloc, "allocation CSV");
  sim->add_option("--estimators", sim_estimators, "comma list (default: the standard sequence)");
  sim->add_option("-K", sim_K, "replicates")->capture_default_str()->check(CLI::PositiveNumber);
  sim->add_option("--out", sim_out, "report CSV")->required();

  // sweep
  auto* swp = app.add_subcommand("sweep", "MQWR relative rmse over a b_phi grid");
  with_common(swp);
  detail::ModelFlags swp_flags;
  swp_flags.add(swp);
  std::string swp_pop, swp_alloc, swp_out, swp_grid = "0.25:3:0.25";
  std::size_t swp_K = 500;
  swp->add_option("--pop", swp_pop, "population CSV")->required();
  swp->add_option("--alloc", swp_alloc, "allocation CSV");
  swp->add_option("--b-phi-grid", swp_grid, "b_phi values, lo:hi:step or a comma list")->capture_default_str();
  swp->add_option("-K", swp_K, "replicates")->capture_default_str()->check(CLI::PositiveNumber);
  swp->add_option("--out", swp_out, "sweep CSV")->required();

  // bootstrap-mse
  auto* bts = app.add_subcommand("bootstrap-mse", "bootstrap mse of the MQWR estimator");
  with_common(bts);
  detail::ModelFlags bts_flags;
  bts_flags.add(bts);
  std::string bts_pop, bts_sample, bts_alloc, bts_out, bts_pool = "size-class";
  std::size_t bts_B = 50, bts_L = 10;
  double bts_b_phi = 1.0;
  bts->add_option("--pop", bts_pop, "population CSV")->required();
  bts->add_option("--sample", bts_sample, "sample CSV")->required();
  bts->add_option("--alloc", bts_alloc, "allocation CSV");
  bts->add_option("-B", bts_B, "bootstrap populations")->capture_default_str()->check(CLI::PositiveNumber);
  bts->add_option("-L", bts_L, "samples per bootstrap population")->capture_default_str()->check(CLI::PositiveNumber);
  bts->add_option("--b-phi", bts_b_phi, "bias-adjustment tuning constant")->capture_default_str();
  bts->add_option("--pool", bts_pool, "residual pool: size-class|unconditional|domain")->capture_default_str();
  bts->add_option("--out", bts_out, "per-domain mse CSV")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return usage;
  }

  try {
    if (gen->parsed()) {
      pg.seed = seed;
      pg.validate();
      const auto g = generate_population(pg);
      write_population(g.population, gen_out);
      if (!gen_alloc_out.empty()) csv::write_atomic(gen_alloc_out, allocation_csv(default_allocation(g.population)));
      err << "generated " << g.population.size() << " units in " << g.population.domain_count() << " domains\n";
    } else if (smp->parsed()) {
      const auto pop = detail::load_pop(smp_pop);
      const DesignSpec design = detail::load_design(*pop, smp_alloc, err);
      write_sample(draw_sample(design, pop, seed), smp_out);
    } else if (est->parsed()) {
      const EstimationSettings set = est_flags.settings();
      const auto estimators = detail::estimators_with_variance(est_method, est_b_phi, detail::parse_variance(est_flags.variance));
      const auto pop = detail::load_pop(est_pop);
      const Sample s = load_sample(est_sample, pop);
      const PopulationContext ctx(pop, set.fixed);
      SampleFits fits(s, ctx, set);
      std::ostringstream os;
      os << "estimator,domain,estimate,n_sample,boundary,failed\n";
      for (const auto& e : estimators) {
        const EstimateOutcome o = evaluate_estimator(e, fits, s, ctx);
        if (o.failed) err << "warning: " << e.label() << " failed: " << o.error << '\n';
        for (std::size_t d = 0; d < pop->domain_count(); ++d)
          os << e.label() << ',' << pop->domains()[d] << ',' << sae::detail::num(o.totals[d]) << ','
             << s.domain_size(static_cast<int>(d)) << ',' << (o.boundary ? 1 : 0) << ',' << (o.failed ? 1 : 0) << '\n';
      }
      csv::write_atomic(est_out, os.str());
      if (!est_fit_out.empty()) {
        const auto v = detail::parse_variance(est_flags.variance);
        csv::write_atomic(est_fit_out, detail::mixed_fit_csv(fits.lmm(v)));
      }
    } else if (dia->parsed()) {
      const ModelSpec spec{detail::parse_model(dia_model), VarianceStructure::homo, PredictionMode::observed_plus_predicted};
      const auto pop = detail::load_pop(dia_pop);
      std::vector<Unit> units;
      if (dia_sample.empty()) units = pop->units();
      else units = load_sample(dia_sample, pop).units();
      const OlsFit f = ols_fit(units, spec);
      const auto cd = cooks_distance(f);
      std::ostringstream os;
      os << "id,fitted,residual,leverage,cooks_distance\n";
      for (std::size_t i = 0; i < units.size(); ++i) {
        const auto k = static_cast<Eigen::Index>(i);
        os << units[i].id << ',' << csv::fmt(f.fitted(k)) << ',' << csv::fmt(f.residuals(k)) << ',' << csv::fmt(f.leverage(k))
           << ',' << (cd.undefined[i] ? std::string("inf") : csv::fmt(cd.d[i])) << '\n';
      }
      csv::write_atomic(dia_out, os.str());
      if (!dia_qq.empty()) {
        std::vector<double> r(f.residuals.data(), f.residuals.data() + f.residuals.size());
        std::ostringstream q;
        q << "theoretical,residual\n";
        for (const auto& [t, v] : qq_data(r)) q << csv::fmt(t) << ',' << csv::fmt(v) << '\n';
        csv::write_atomic(dia_qq, q.str());
      }
    } else if (red->parsed()) {
      ReductionRule rule;
      rule.top_k = red_k;
      rule.threshold = red_threshold;
      rule.validate();
      const ModelSpec spec{detail::parse_model(red_model), VarianceStructure::homo, PredictionMode::observed_plus_predicted};
      const auto pop = detail::load_pop(red_pop);
      const Reduction r = reduce_population(*pop, spec, rule);
      write_population(r.reduced, red_out);
      if (!red_removed.empty()) {
        std::ostringstream os;
        os << "id,cooks_distance\n";
        for (std::size_t i = 0; i < r.removed_ids.size(); ++i) os << r.removed_ids[i] << ',' << csv::fmt(r.removed_cooks[i]) << '\n';
        csv::write_atomic(red_removed, os.str());
      }
      err << "removed " << r.removed_ids.size() << " units\n";
    } else if (sim->parsed()) {
      const EstimationSettings set = sim_flags.settings();
      const auto estimators = sim_estimators.empty()
                                  ? standard_estimators()
                                  : detail::estimators_with_variance(sim_estimators, 1.0, detail::parse_variance(sim_flags.variance));
      const auto pop = detail::load_pop(sim_pop);
      const DesignSpec design = detail::load_design(*pop, sim_alloc, err);
      const PopulationContext ctx(pop, set.fixed);
      SimulationOptions opt;
      opt.K = sim_K;
      opt.seed = seed;
      opt.threads = threads;
      opt.keep_estimates = false;
      const SimulationReport r = run_simulation(ctx, design, estimators, set, opt);
      for (std::size_t e = 0; e < r.estimators.size(); ++e) {
        std::size_t boundary = 0;
        for (const auto& c : r.cells[e]) boundary = std::max(boundary, c.boundary);
        if (r.fit_failures[e] == r.K) err << "warning: " << r.estimators[e] << " failed in every replicate\n";
        else if (r.fit_failures[e] > 0) err << "note: " << r.estimators[e] << " failed in " << r.fit_failures[e] << " replicates\n";
        if (boundary > 0) err << "note: " << r.estimators[e] << " hit the sigma2_u boundary in " << boundary << " replicates\n";
      }
      csv::write_atomic(sim_out, report_csv(r));
    } else if (swp->parsed()) {
      const EstimationSettings set = swp_flags.settings();
      const auto grid = parse_grid(swp_grid);
      const auto pop = detail::load_pop(swp_pop);
      const DesignSpec design = detail::load_design(*pop, swp_alloc, err);
      const PopulationContext ctx(pop, set.fixed);
      SimulationOptions opt;
      opt.K = swp_K;
      opt.seed = seed;
      opt.threads = threads;
      const SweepResult r = sweep_bphi(ctx, design, grid, set, opt);
      csv::write_atomic(swp_out, sweep_csv(r));
    } else if (bts->parsed()) {
      const EstimationSettings set = bts_flags.settings();
      BootstrapConfig cfg;
      cfg.B = bts_B;
      cfg.L = bts_L;
      cfg.estimator.b_phi = bts_b_phi;
      cfg.estimator.scale_rule = set.scale_rule;
      cfg.pool = detail::parse_pool(bts_pool);
      cfg.seed = seed;
      cfg.threads = threads;
      cfg.validate();
      const auto pop = detail::load_pop(bts_pop);
      const Sample s = load_sample(bts_sample, pop);
      const DesignSpec design = detail::load_design(*pop, bts_alloc, err);
      const BootstrapMse r = bootstrap_mse(s, design, set, cfg);
      csv::write_atomic(bts_out, bootstrap_csv(r));
    }
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return usage;
  } catch (const DataError& e) {
    err << "error: " << e.what() << '\n';
    return data;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return data;
  }
  return ok;
}

}  // namespace sae::cli
