#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "sae/direct.hpp"
#include "sae/error.hpp"
#include "sae/frame.hpp"
#include "sae/mixed.hpp"
#include "sae/model.hpp"
#include "sae/mquantile.hpp"
#include "sae/robust.hpp"

namespace sae {

enum class Method { ht, greg, eblup, peblup, msyn, reblup, mq, mqw, mqcd, mqcdw, mqwr };

/// One configured estimator. `variance` applies to eblup, peblup and
/// reblup; `b_phi` to mqwr.
struct EstimatorSpec {
  Method method = Method::ht;
  VarianceStructure variance = VarianceStructure::homo;
  double b_phi = 1.0;

  std::string label() const {
    auto var_suffix = [&]() -> std::string {
      switch (variance) {
        case VarianceStructure::homo: return "";
        case VarianceStructure::by_sc: return "-sc";
        case VarianceStructure::wp2: return "-wp2";
      }
      return "";
    };
    switch (method) {
      case Method::ht: return "ht";
      case Method::greg: return "greg";
      case Method::eblup: return "eblup" + var_suffix();
      case Method::peblup: return "peblup" + var_suffix();
      case Method::msyn: return "msyn";
      case Method::reblup: return "reblup" + var_suffix();
      case Method::mq: return "mq";
      case Method::mqw: return "mqw";
      case Method::mqcd: return "mqcd";
      case Method::mqcdw: return "mqcdw";
      case Method::mqwr: return "mqwr:" + csv::fmt(b_phi);
    }
    return "?";
  }
};

/// Parses one estimator name: ht, greg, eblup[-sc|-wp2], peblup[-sc|-wp2],
/// msyn, reblup[-sc|-wp2], mq, mqw, mqcd, mqcdw, mqwr[:b_phi].
inline EstimatorSpec parse_estimator(const std::string& raw, double default_b_phi = 1.0) {
  std::string name(csv::trim(raw));
  EstimatorSpec e;
  e.b_phi = default_b_phi;
  auto strip_variance = [&](const std::string& base) {
    if (name == base) return true;
    if (name == base + "-sc") {
      e.variance = VarianceStructure::by_sc;
      return true;
    }
    if (name == base + "-wp2") {
      e.variance = VarianceStructure::wp2;
      return true;
    }
    return false;
  };
  if (name == "ht") e.method = Method::ht;
  else if (name == "greg") e.method = Method::greg;
  else if (strip_variance("eblup")) e.method = Method::eblup;
  else if (strip_variance("peblup")) e.method = Method::peblup;
  else if (strip_variance("reblup")) e.method = Method::reblup;
  else if (name == "msyn") e.method = Method::msyn;
  else if (name == "mq") e.method = Method::mq;
  else if (name == "mqw") e.method = Method::mqw;
  else if (name == "mqcd") e.method = Method::mqcd;
  else if (name == "mqcdw") e.method = Method::mqcdw;
  else if (name == "mqwr" || name.rfind("mqwr:", 0) == 0) {
    e.method = Method::mqwr;
    if (name.size() > 4) {
      double b = 0.0;
      if (!csv::parse_double(std::string_view(name).substr(5), b) || !(b > 0.0))
        throw UsageError("invalid b_phi in estimator '" + name + "'");
      e.b_phi = b;
    }
  } else {
    throw UsageError("unknown estimator '" + name + "'");
  }
  return e;
}

inline std::vector<EstimatorSpec> parse_estimators(const std::string& list, double default_b_phi = 1.0) {
  std::vector<EstimatorSpec> out;
  for (const auto& f : csv::split(list)) out.push_back(parse_estimator(f, default_b_phi));
  if (out.empty()) throw UsageError("estimator list is empty");
  return out;
}

/// The estimator sequence compared in the main simulation tables.
inline std::vector<EstimatorSpec> standard_estimators() {
  return parse_estimators("ht,greg,eblup,eblup-sc,peblup,msyn,mq,mqcd,mqwr:1,mqwr:2,mqwr:3,mqw,mqcdw");
}

struct EstimationSettings {
  FixedEffects fixed = FixedEffects::full;
  PredictionMode prediction = PredictionMode::observed_plus_predicted;
  Criterion criterion = Criterion::ml;
  HuberConfig psi;
  MQOptions mq;
  ScaleRule scale_rule = ScaleRule::domain;
  std::vector<double> grid = default_grid();
};

/// Population-level quantities shared across samples.
struct PopulationContext {
  std::shared_ptr<const Population> pop;
  AuxSpec greg_aux;
  DomainAux aux;

  PopulationContext() = default;
  PopulationContext(std::shared_ptr<const Population> p, FixedEffects f)
      : pop(std::move(p)), greg_aux(make_aux_spec(*pop)), aux(domain_aux(*pop, f)) {}
};

struct EstimateOutcome {
  std::vector<double> totals;  ///< per parent domain; NaN where undefined
  bool failed = false;
  bool boundary = false;
  std::string error;
};

/// Fits shared by several estimators on one sample, computed on first use.
class SampleFits {
 public:
  SampleFits(const Sample& s, const PopulationContext& ctx, const EstimationSettings& set) : s_(s), ctx_(ctx), set_(set) {}

  const MixedFit& lmm(VarianceStructure v) {
    auto& slot = lmm_[static_cast<int>(v)];
    if (!slot) slot = fit_lmm(s_, spec(v), set_.criterion);
    return *slot;
  }

  const MQBundle& mq(bool weighted) {
    auto& slot = mq_[weighted ? 1 : 0];
    if (!slot) slot = fit_mq(s_, spec(VarianceStructure::homo), set_.psi, weighted, set_.mq, set_.grid);
    return *slot;
  }

  const std::vector<double>& omega() {
    if (!omega_) omega_ = mq_wr_scales(mq(false).residuals, set_.scale_rule);
    return *omega_;
  }

  const RobustFit& mreg() {
    if (!mreg_) mreg_ = fit_mreg(s_, spec(VarianceStructure::homo), set_.psi);
    return *mreg_;
  }

  const GregFit& greg() {
    if (!greg_) greg_ = fit_greg(s_, ctx_.greg_aux);
    return *greg_;
  }

  const RobustMixedFit& reblup(VarianceStructure v) {
    auto& slot = reblup_[static_cast<int>(v)];
    if (!slot) {
      ReblupOptions opt;
      try {
        opt.start = lmm(v);
      } catch (const DataError&) {
      }
      slot = fit_reblup(s_, spec(v), set_.psi, opt);
    }
    return *slot;
  }

  ModelSpec spec(VarianceStructure v) const { return {set_.fixed, v, set_.prediction}; }

 private:
  const Sample& s_;
  const PopulationContext& ctx_;
  const EstimationSettings& set_;
  std::optional<MixedFit> lmm_[3];
  std::optional<MQBundle> mq_[2];
  std::optional<std::vector<double>> omega_;
  std::optional<RobustFit> mreg_;
  std::optional<GregFit> greg_;
  std::optional<RobustMixedFit> reblup_[3];
};

inline EstimateOutcome evaluate_estimator(const EstimatorSpec& e, SampleFits& fits, const Sample& s,
                                          const PopulationContext& ctx) {
  EstimateOutcome o;
  try {
    switch (e.method) {
      case Method::ht: o.totals = ht_totals(s); break;
      case Method::greg: o.totals = greg_totals(fits.greg(), s); break;
      case Method::eblup: {
        const auto& f = fits.lmm(e.variance);
        o.boundary = f.boundary;
        o.totals = eblup_totals(f, s, ctx.aux);
        break;
      }
      case Method::peblup: {
        const auto& f = fits.lmm(e.variance);
        o.boundary = f.boundary;
        o.totals = pseudo_eblup_totals(fit_pseudo_eblup(s, f), ctx.aux);
        break;
      }
      case Method::msyn: o.totals = robust_synthetic_totals(fits.mreg(), s, ctx.aux); break;
      case Method::reblup: {
        const auto& f = fits.reblup(e.variance);
        o.boundary = f.boundary;
        if (!f.converged) throw ConvergenceError("robust mixed model did not converge");
        o.totals = reblup_totals(f, s, ctx.aux);
        break;
      }
      case Method::mq:
      case Method::mqw: {
        const auto& b = fits.mq(e.method == Method::mqw);
        o.totals = mq_naive_totals(b.fits, b.residuals, ctx.aux);
        break;
      }
      case Method::mqcd:
      case Method::mqcdw: {
        const auto& b = fits.mq(e.method == Method::mqcdw);
        o.totals = mq_cd_totals(b.fits, b.residuals, ctx.aux);
        break;
      }
      case Method::mqwr: {
        const auto& b = fits.mq(false);
        BiasAdjustConfig cfg;
        cfg.b_phi = e.b_phi;
        o.totals = mq_wr_totals(b.fits, b.residuals, ctx.aux, cfg, fits.omega());
        break;
      }
    }
  } catch (const DataError& err) {
    o.failed = true;
    o.error = err.what();
    o.totals.assign(ctx.pop->domain_count(), std::numeric_limits<double>::quiet_NaN());
  }
  return o;
}

/// Runs every configured estimator on one sample, sharing fits between them.
inline std::vector<EstimateOutcome> estimate_all(const Sample& s, const PopulationContext& ctx,
                                                 const std::vector<EstimatorSpec>& estimators,
                                                 const EstimationSettings& set) {
  SampleFits fits(s, ctx, set);
  std::vector<EstimateOutcome> out;
  out.reserve(estimators.size());
  for (const auto& e : estimators) out.push_back(evaluate_estimator(e, fits, s, ctx));
  return out;
}

}  // namespace sae
