#include "dtr/simulation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dtr/error.hpp"
#include "dtr/inference.hpp"
#include "dtr/parallel.hpp"

namespace dtr {

namespace {

constexpr double kMaxFailureRate = 0.05;
const double kNoiseSd = std::sqrt(2.0);

class Draw {
 public:
  explicit Draw(std::mt19937_64& rng) : rng_(rng) {}
  double normal(double mean, double sd) { return std::normal_distribution<double>(mean, sd)(rng_); }
  double bernoulli(double p) { return unit_(rng_) < p ? 1.0 : 0.0; }
  int three_point() { return std::uniform_int_distribution<int>(0, 2)(rng_) - 1; }

 private:
  std::mt19937_64& rng_;
  std::uniform_real_distribution<double> unit_{0.0, 1.0};
};

std::vector<std::uint8_t> validation_flags(std::size_t n, double fraction, std::mt19937_64& rng) {
  const auto m = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::shuffle(idx.begin(), idx.end(), rng);
  std::vector<std::uint8_t> flags(n, 0);
  for (std::size_t r = 0; r < std::min(m, n); ++r) flags[idx[r]] = 1;
  return flags;
}

// Shared layout for the two-stage generators.
struct TwoStage {
  std::size_t n;
  Eigen::VectorXd x[2], proxy[2], actual[2];
  Eigen::VectorXd outcome;

  explicit TwoStage(std::size_t rows) : n(rows) {
    const auto m = static_cast<Eigen::Index>(rows);
    for (int j = 0; j < 2; ++j) x[j] = proxy[j] = actual[j] = Eigen::VectorXd(m);
    outcome.resize(m);
  }

  Dataset finish(ProxyKind kind, double fraction, std::mt19937_64& rng) {
    Dataset::Columns c;
    c.stages = 2;
    c.covariate_names = {"X"};
    const auto flags = validation_flags(n, fraction, rng);
    for (int j = 0; j < 2; ++j) {
      c.covariates.push_back({x[j]});
      c.actual.push_back(actual[j]);
      if (kind == ProxyKind::Prescribed) {
        c.prescribed.push_back(proxy[j]);
        c.reported.emplace_back();
      } else {
        c.prescribed.emplace_back();
        c.reported.push_back(proxy[j]);
      }
      c.validation.push_back(flags);
    }
    c.outcome = outcome;
    return Dataset(std::move(c), kind);
  }
};

double s1_adherence_logit(double x, double proxy) { return -4.6 - 0.83 * x + 7.5 * proxy; }

// Pr(A** = 1 | A, X) in the reported-treatment scenario.
double s4_report(double a, double x) {
  return a == 1.0 ? 0.9 - 0.05 * x : 0.05 + 0.045 * x + 0.005 * x * x;
}

void check_fraction(double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw SpecError("validation fraction must lie in (0, 1]");
}

}  // namespace

std::string to_string(Scenario s) {
  switch (s) {
    case Scenario::S1: return "s1";
    case Scenario::S2: return "s2";
    case Scenario::S3: return "s3";
    case Scenario::S4: return "s4";
  }
  return "unknown";
}

std::string to_string(Estimator e) {
  switch (e) {
    case Estimator::ModifiedKnown: return "modified-known";
    case Estimator::ModifiedFitted: return "modified-fitted";
    case Estimator::NaiveProxy: return "naive-proxy";
    case Estimator::StandardActual: return "standard-actual";
  }
  return "unknown";
}

Scenario parse_scenario(std::string_view text) {
  for (auto s : {Scenario::S1, Scenario::S2, Scenario::S3, Scenario::S4})
    if (text == to_string(s)) return s;
  throw SpecError("unknown scenario '" + std::string(text) + "'");
}

Estimator parse_estimator(std::string_view text) {
  for (auto e : {Estimator::ModifiedKnown, Estimator::ModifiedFitted, Estimator::NaiveProxy, Estimator::StandardActual})
    if (text == to_string(e)) return e;
  throw SpecError("unknown estimator '" + std::string(text) + "'");
}

void validate(const ScenarioConfig& config) {
  if (config.n < 1) throw SpecError("sample size must be at least 1");
  check_fraction(config.validation_fraction);
  if (config.replications < 1) throw SpecError("replications must be at least 1");
  if (config.estimators.empty()) throw SpecError("no estimators selected");
  if (!std::isfinite(config.varied_param)) throw SpecError("varied parameter must be finite");
  if (!(config.level > 0.0 && config.level < 1.0)) throw SpecError("confidence level must lie in (0, 1)");
  if (config.jobs < 1) throw SpecError("jobs must be at least 1");
}

Dataset generate_s1(std::size_t n, double psi22, double validation_fraction, std::mt19937_64& rng) {
  check_fraction(validation_fraction);
  Draw draw(rng);
  TwoStage d(n);
  const double sd[2] = {1.0, 2.0};
  for (int j = 0; j < 2; ++j) {
    for (auto& v : d.x[j]) v = draw.normal(1.0, sd[j]);
    for (Eigen::Index i = 0; i < d.x[j].size(); ++i) d.proxy[j](i) = draw.bernoulli(expit(d.x[j](i)));
    for (Eigen::Index i = 0; i < d.x[j].size(); ++i)
      d.actual[j](i) = draw.bernoulli(expit(s1_adherence_logit(d.x[j](i), d.proxy[j](i))));
  }
  for (Eigen::Index i = 0; i < d.outcome.size(); ++i) {
    const double c1 = 1.0 + d.x[0](i);
    const double c2 = 1.0 + d.x[1](i) + psi22 * d.actual[0](i);
    d.outcome(i) = d.x[0](i) + draw.normal(0.0, kNoiseSd) - (optimal_treatment(c1) - d.actual[0](i)) * c1 -
                   (optimal_treatment(c2) - d.actual[1](i)) * c2;
  }
  return d.finish(ProxyKind::Prescribed, validation_fraction, rng);
}

Dataset generate_s3(std::size_t n, double validation_fraction, std::mt19937_64& rng, S3Indicator indicator) {
  check_fraction(validation_fraction);
  Draw draw(rng);
  TwoStage d(n);
  const double sd[2] = {1.0, 2.0};
  const double shift[2] = {0.5, -0.5};
  for (int j = 0; j < 2; ++j) {
    for (auto& v : d.x[j]) v = draw.normal(1.0, sd[j]);
    for (Eigen::Index i = 0; i < d.x[j].size(); ++i) d.proxy[j](i) = draw.bernoulli(expit(shift[j] + d.x[j](i)));
    for (Eigen::Index i = 0; i < d.x[j].size(); ++i)
      d.actual[j](i) = draw.bernoulli(expit(s1_adherence_logit(d.x[j](i), d.proxy[j](i))));
  }
  for (Eigen::Index i = 0; i < d.outcome.size(); ++i) {
    const double a1 = d.actual[0](i);
    const double c1 = 1.0 + d.x[0](i);
    const double c2 = 1.0 + d.x[1](i) - a1;
    const double eps = draw.normal(0.0, kNoiseSd);
    const double regret2 = (optimal_treatment(c2) - d.actual[1](i)) * c2;
    if (indicator == S3Indicator::Actual) {
      // 0.5 A_1 sits in the stage-2 treatment-free part; the stage-1 blip stays 1 + X_1.
      d.outcome(i) = d.x[0](i) + 0.5 * a1 + eps - (optimal_treatment(c1) - a1) * (c1 - 0.5) - regret2;
    } else {
      d.outcome(i) = d.x[0](i) + 0.5 * d.proxy[0](i) + eps - (optimal_treatment(c1) - a1) * c1 - regret2;
    }
  }
  return d.finish(ProxyKind::Prescribed, validation_fraction, rng);
}

Dataset generate_s4(std::size_t n, double psi21, double validation_fraction, std::mt19937_64& rng) {
  check_fraction(validation_fraction);
  Draw draw(rng);
  TwoStage d(n);
  for (int j = 0; j < 2; ++j) {
    for (auto& v : d.x[j]) v = draw.three_point();
    for (Eigen::Index i = 0; i < d.x[j].size(); ++i) d.actual[j](i) = draw.bernoulli(0.5 + 0.3 * d.x[j](i));
    for (Eigen::Index i = 0; i < d.x[j].size(); ++i)
      d.proxy[j](i) = draw.bernoulli(s4_report(d.actual[j](i), d.x[j](i)));
  }
  for (Eigen::Index i = 0; i < d.outcome.size(); ++i) {
    const double c1 = 1.0 + d.x[0](i);
    const double c2 = 1.0 + psi21 * d.actual[0](i);
    d.outcome(i) = d.x[0](i) + draw.normal(0.0, kNoiseSd) - (optimal_treatment(c1) - d.actual[0](i)) * c1 -
                   (optimal_treatment(c2) - d.actual[1](i)) * c2;
  }
  return d.finish(ProxyKind::Reported, validation_fraction, rng);
}

Dataset generate(const ScenarioConfig& config, std::mt19937_64& rng) {
  switch (config.scenario) {
    case Scenario::S1: return generate_s1(config.n, config.varied_param, config.validation_fraction, rng);
    case Scenario::S2: return generate_s1(config.n, 0.0, config.validation_fraction, rng);
    case Scenario::S3: return generate_s3(config.n, config.validation_fraction, rng, config.s3_treatment_free);
    case Scenario::S4: return generate_s4(config.n, config.varied_param, config.validation_fraction, rng);
  }
  throw SpecError("unknown scenario");
}

Eigen::VectorXd s1_adherence(const Dataset& data, int stage) {
  const auto& x = data.covariate("X", stage);
  const auto& proxy = data.treatment(proxy_field(data.proxy_kind()), stage);
  Eigen::VectorXd p(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) p(i) = expit(s1_adherence_logit(x(i), proxy(i)));
  return p;
}

Eigen::VectorXd s4_adherence(const Dataset& data, int stage) {
  const auto& x = data.covariate("X", stage);
  const auto& proxy = data.treatment(proxy_field(data.proxy_kind()), stage);
  Eigen::VectorXd p(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double prior = 0.5 + 0.3 * x(i);
    auto like = [&](double a) {
      const double r = s4_report(a, x(i));
      return proxy(i) == 1.0 ? r : 1.0 - r;
    };
    const double num = like(1.0) * prior;
    p(i) = num / (num + like(0.0) * (1.0 - prior));
  }
  return p;
}

EstimatorPlan plan_for(const ScenarioConfig& config, Estimator estimator) {
  EstimatorPlan plan;
  const bool s4 = config.scenario == Scenario::S4;
  const bool actual = estimator == Estimator::StandardActual;
  for (int j = 1; j <= 2; ++j) {
    const std::string x = "X[" + std::to_string(j) + "]";
    const std::string own = "Astar[" + std::to_string(j) + "]";
    std::string contrast, treatment_free, assignment, adherence;
    if (s4) {
      contrast = j == 1 ? "1 + X[1]" : "1 + A[1]";
      treatment_free = j == 1 ? "1 + X[1]" : "1 + X[1] + X[2] + A[1] + A[1]*X[1]";
      assignment = "1 + " + x + " + " + x + "*" + x;
      adherence = "1 + " + x + " + " + x + "*" + x + " + " + own + " + " + own + "*" + x + " + " + own + "*" + x + "*" + x;
    } else {
      contrast = j == 1 ? "1 + X[1]" : "1 + X[2] + A[1]";
      treatment_free = j == 1 ? "1 + X[1]" : "1 + X[1] + X[2] + A[1]";
      // Pr(A_j = 1 | X_j) is not logistic in X_j alone; conditioning on the
      // proxy gives the exact propensity for the actual treatment.
      assignment = actual ? "1 + " + x + " + " + own : "1 + " + x;
      adherence = "1 + " + x + " + " + own;
    }
    plan.specs.push_back(make_stage_spec(contrast, treatment_free, assignment, adherence));
  }
  plan.options.exact_pseudo_outcomes = config.exact_pseudo_outcomes;
  const auto modified = s4 ? EstimationMode::ModifiedReported : EstimationMode::ModifiedPrescribed;
  switch (estimator) {
    case Estimator::ModifiedKnown:
      plan.options.mode = modified;
      plan.adherence = AdherenceSource::known_function(s4 ? s4_adherence : s1_adherence);
      break;
    case Estimator::ModifiedFitted:
      plan.options.mode = modified;
      plan.adherence = AdherenceSource::fitted();
      break;
    case Estimator::NaiveProxy: plan.options.mode = EstimationMode::StandardNaiveProxy; break;
    case Estimator::StandardActual: plan.options.mode = EstimationMode::StandardActual; break;
  }
  return plan;
}

Eigen::VectorXd true_psi(const ScenarioConfig& config) {
  switch (config.scenario) {
    case Scenario::S1: return (Eigen::VectorXd(5) << 1, 1, 1, 1, config.varied_param).finished();
    case Scenario::S2: return (Eigen::VectorXd(5) << 1, 1, 1, 1, 0).finished();
    case Scenario::S3: return (Eigen::VectorXd(5) << 1, 1, 1, 1, -1).finished();
    case Scenario::S4: return (Eigen::VectorXd(4) << 1, 1, 1, config.varied_param).finished();
  }
  return {};
}

std::vector<std::string> psi_parameter_names(const ScenarioConfig& config) {
  if (config.scenario == Scenario::S4) return {"psi10", "psi11", "psi20", "psi21"};
  return {"psi10", "psi11", "psi20", "psi21", "psi22"};
}

std::vector<int> psi_parameter_stages(const ScenarioConfig& config) {
  if (config.scenario == Scenario::S4) return {1, 1, 2, 2};
  return {1, 1, 2, 2, 2};
}

EstimatorSummary summarize(const ScenarioConfig& config, Estimator estimator,
                           const std::vector<ReplicateRecord>& records) {
  EstimatorSummary out;
  out.estimator = estimator;
  const auto truth = true_psi(config);
  const auto names = psi_parameter_names(config);
  const auto stages = psi_parameter_stages(config);
  std::vector<const ReplicateRecord*> ok;
  for (const auto& r : records) {
    if (r.estimator != estimator) continue;
    if (r.failed) {
      ++out.failures;
    } else {
      ok.push_back(&r);
    }
  }
  out.successes = static_cast<int>(ok.size());
  for (Eigen::Index k = 0; k < truth.size(); ++k) {
    ParameterSummary p;
    p.name = names[static_cast<std::size_t>(k)];
    p.stage = stages[static_cast<std::size_t>(k)];
    p.truth = truth(k);
    if (!ok.empty()) {
      const auto r = static_cast<double>(ok.size());
      double sum = 0.0;
      for (const auto* rec : ok) sum += rec->estimates(k);
      p.mean = sum / r;
      double ss = 0.0, se = 0.0;
      int covered = 0;
      for (const auto* rec : ok) {
        ss += (rec->estimates(k) - p.mean) * (rec->estimates(k) - p.mean);
        se += (rec->estimates(k) - p.truth) * (rec->estimates(k) - p.truth);
        if (config.coverage && rec->lower(k) <= p.truth && p.truth <= rec->upper(k)) ++covered;
      }
      p.bias = p.mean - p.truth;
      p.variance = ss / r;
      p.mse = se / r;
      p.mse100 = 100.0 * p.mse;
      p.mc_se = std::sqrt(p.variance / r);
      if (config.coverage) p.coverage = covered / r;
    }
    out.parameters.push_back(p);
  }
  return out;
}

ReplicationSummary run_replications(const ScenarioConfig& config) {
  validate(config);
  const auto reps = static_cast<std::size_t>(config.replications);
  const auto per = config.estimators.size();
  std::vector<EstimatorPlan> plans;
  for (auto e : config.estimators) plans.push_back(plan_for(config, e));

  ReplicationSummary summary;
  summary.config = config;
  summary.records.resize(reps * per);
  parallel_for(reps, config.jobs, [&](std::size_t r) {
    auto rng = make_stream(config.seed, r);
    const Dataset data = generate(config, rng);
    for (std::size_t e = 0; e < per; ++e) {
      auto& rec = summary.records[r * per + e];
      rec.replicate = static_cast<int>(r) + 1;
      rec.estimator = config.estimators[e];
      try {
        const auto& plan = plans[e];
        const RegimeFit fit = estimate_regime(data, plan.specs, plan.adherence, plan.options);
        rec.estimates = flatten_psi(fit);
        if (config.coverage) {
          const auto sw = regime_sandwich(data, fit);
          const auto iv = wald_intervals(rec.estimates, sw.sigma_psi, config.level);
          rec.lower.resize(rec.estimates.size());
          rec.upper.resize(rec.estimates.size());
          for (std::size_t k = 0; k < iv.intervals.size(); ++k) {
            rec.lower(static_cast<Eigen::Index>(k)) = iv.intervals[k].lower;
            rec.upper(static_cast<Eigen::Index>(k)) = iv.intervals[k].upper;
          }
        }
      } catch (const Error& ex) {
        rec.failed = true;
        rec.error = ex.what();
        rec.estimates.resize(0);
      }
    }
  });

  std::string breach;
  for (auto e : config.estimators) {
    auto s = summarize(config, e, summary.records);
    if (s.failures > kMaxFailureRate * config.replications)
      breach += (breach.empty() ? "" : "; ") + to_string(e) + " failed in " + std::to_string(s.failures) + " of " +
                std::to_string(config.replications) + " replicates";
    summary.estimators.push_back(std::move(s));
  }
  if (!breach.empty()) throw ReplicationFailure("replication failure threshold exceeded: " + breach, std::move(summary));
  return summary;
}

}  // namespace dtr
