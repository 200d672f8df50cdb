#include <cmath>
#include <limits>
#include <string>

#include "dtr/error.hpp"
#include "dtr/gest.hpp"
#include "pipeline.hpp"

namespace dtr {

namespace {

constexpr double kMaxCondition = 1e12;
constexpr double kPositivity = 1e-12;

template <class F>
auto at_stage(int stage, F&& body) {
  const std::string prefix = "stage " + std::to_string(stage) + ": ";
  try {
    return body();
  } catch (const FormulaError&) {
    throw;
  } catch (const SpecError& e) {
    throw SpecError(prefix + e.what());
  } catch (const DataError& e) {
    throw DataError(prefix + e.what());
  } catch (const EstimationError& e) {
    throw EstimationError(prefix + e.what());
  }
}

bool references_expected(const FeatureSpec& spec) {
  for (const auto& term : spec.terms)
    for (const auto& f : term.factors)
      if (f.kind == Factor::Kind::Treatment && f.source == TreatmentSource::Expected) return true;
  return false;
}

double condition_number(const Eigen::MatrixXd& m) {
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
  const auto& s = svd.singularValues();
  if (s.size() == 0) return 0.0;
  const double smallest = s(s.size() - 1);
  if (!(smallest > 0.0)) return std::numeric_limits<double>::infinity();
  return s(0) / smallest;
}

Eigen::VectorXd checked_solve(const Eigen::MatrixXd& m, const Eigen::VectorXd& b, double& condition) {
  condition = condition_number(m);
  if (!(condition <= kMaxCondition))
    throw EstimationError("contrast system is singular or ill-conditioned (condition number " +
                          std::to_string(condition) + ")");
  return m.colPivHouseholderQr().solve(b);
}

void check_system(const StageSystem& s) {
  const auto n = s.contrast.rows();
  if (s.treatment.size() != n || s.propensity.size() != n || s.multiplier.size() != n || s.outcome.size() != n ||
      (s.offset.size() != 0 && s.offset.size() != n))
    throw DataError("stage system vectors do not match the contrast design rows");
  if (s.lambda && (s.lambda->rows() != n || s.lambda->cols() != s.contrast.cols()))
    throw DataError("lambda must have the same shape as the contrast design");
}

}  // namespace

std::string to_string(EstimationMode mode) {
  switch (mode) {
    case EstimationMode::StandardActual: return "standard-actual";
    case EstimationMode::StandardNaiveProxy: return "standard-naive-proxy";
    case EstimationMode::ModifiedPrescribed: return "modified-prescribed";
    case EstimationMode::ModifiedReported: return "modified-reported";
  }
  return "unknown";
}

EstimationMode parse_estimation_mode(std::string_view text) {
  for (auto m : {EstimationMode::StandardActual, EstimationMode::StandardNaiveProxy,
                 EstimationMode::ModifiedPrescribed, EstimationMode::ModifiedReported})
    if (text == to_string(m)) return m;
  throw SpecError("unknown estimation mode '" + std::string(text) + "'");
}

std::string to_string(AdherenceSource::Kind kind) {
  switch (kind) {
    case AdherenceSource::Kind::Known: return "known";
    case AdherenceSource::Kind::Fitted: return "fitted";
    case AdherenceSource::Kind::External: return "external";
    case AdherenceSource::Kind::Sensitivity: return "sensitivity";
  }
  return "unknown";
}

StageModelSpec make_stage_spec(std::string_view contrast, std::string_view treatment_free,
                               std::string_view assignment, std::string_view adherence) {
  StageModelSpec s;
  s.contrast = parse_feature_spec(contrast);
  s.treatment_free = parse_feature_spec(treatment_free);
  s.assignment = parse_feature_spec(assignment);
  if (!adherence.empty()) s.adherence = parse_feature_spec(adherence);
  return s;
}

StageSolution solve_stage(const StageSystem& s) {
  check_system(s);
  const Eigen::MatrixXd& lambda = s.lambda ? *s.lambda : s.contrast;
  const Eigen::ArrayXd resid = (s.treatment - s.propensity).array();
  const Eigen::MatrixXd m = lambda.transpose() * (resid * s.multiplier.array()).matrix().asDiagonal() * s.contrast;
  Eigen::VectorXd target = s.outcome;
  if (s.offset.size() != 0) target += s.offset;
  const Eigen::VectorXd b = lambda.transpose() * (resid * target.array()).matrix();
  StageSolution out;
  out.psi = checked_solve(m, b, out.condition);
  return out;
}

StageSolution solve_stage_joint(const StageSystem& s, const Eigen::MatrixXd& treatment_free) {
  check_system(s);
  if (treatment_free.rows() != s.contrast.rows()) throw DataError("treatment-free design row count mismatch");
  const Eigen::MatrixXd& lambda = s.lambda ? *s.lambda : s.contrast;
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(treatment_free);
  if (qr.rank() < treatment_free.cols())
    throw EstimationError("rank-deficient treatment-free design (rank " + std::to_string(qr.rank()) + " of " +
                          std::to_string(treatment_free.cols()) + ")");
  auto residualize = [&](const Eigen::MatrixXd& z) -> Eigen::MatrixXd {
    return z - treatment_free * qr.solve(z);
  };

  Eigen::VectorXd target = s.outcome;
  if (s.offset.size() != 0) target += s.offset;
  const Eigen::MatrixXd scaled = s.multiplier.asDiagonal() * s.contrast;
  const Eigen::MatrixXd weighted = (s.treatment - s.propensity).asDiagonal() * lambda;
  const Eigen::MatrixXd reduced = weighted.transpose() * residualize(scaled);
  const Eigen::VectorXd rhs = weighted.transpose() * residualize(target);

  StageSolution out;
  out.psi = checked_solve(reduced, rhs, out.condition);
  out.beta = qr.solve(Eigen::VectorXd(target - scaled * out.psi));
  return out;
}

void validate_estimation(const Dataset& data, const std::vector<StageModelSpec>& specs,
                         const AdherenceSource& adherence, const EstimationOptions& options) {
  const int k = data.stages();
  if (static_cast<int>(specs.size()) != k)
    throw SpecError("expected " + std::to_string(k) + " stage specifications, got " + std::to_string(specs.size()));
  const bool modified = is_modified(options.mode);

  if (options.mode == EstimationMode::ModifiedPrescribed && data.proxy_kind() != ProxyKind::Prescribed)
    throw SpecError("mode modified-prescribed requires prescribed treatments as the proxy");
  if (options.mode == EstimationMode::ModifiedReported && data.proxy_kind() != ProxyKind::Reported)
    throw SpecError("mode modified-reported requires reported treatments as the proxy");

  const auto field = options.mode == EstimationMode::StandardActual ? TreatmentField::Actual
                                                                     : proxy_field(data.proxy_kind());
  for (int j = 1; j <= k; ++j) {
    const auto& s = specs[static_cast<std::size_t>(j - 1)];
    at_stage(j, [&] {
      check_stage_references(s.contrast, j, ModelRole::Contrast);
      check_stage_references(s.treatment_free, j, ModelRole::TreatmentFree);
      check_stage_references(s.assignment, j, ModelRole::Assignment);
      if (modified) check_stage_references(s.adherence, j, ModelRole::Adherence);
      if (options.mode != EstimationMode::StandardActual)
        for (const auto& term : s.assignment.terms)
          for (const auto& f : term.factors)
            if (f.kind == Factor::Kind::Treatment && f.stage == j)
              throw SpecError("assignment model may not reference the proxy it predicts (" + to_string(f) + ")");
      if (!modified) {
        for (const auto* spec : {&s.contrast, &s.treatment_free, &s.assignment})
          if (references_expected(*spec)) throw SpecError("EA[] references require a modified estimation mode");
      }
      if (!data.treatment_complete(field, j))
        throw DataError(std::string(field == TreatmentField::Actual ? "actual" : "proxy") +
                        " treatment must be recorded for every row under mode " + to_string(options.mode));
      if (modified && options.exact_pseudo_outcomes && substituted_treatment_stages(s.contrast, j).size() > 1)
        throw SpecError("exact pseudo outcomes support one lagged treatment in the contrast");
    });
  }
  if (!modified) return;

  switch (adherence.kind) {
    case AdherenceSource::Kind::Known:
      if (!adherence.known) throw SpecError("known adherence source has no probability function");
      break;
    case AdherenceSource::Kind::Fitted:
      for (int j = 1; j <= k; ++j)
        if (data.validation_rows(j).empty())
          throw DataError("stage " + std::to_string(j) + ": fitted adherence requires validation rows");
      break;
    case AdherenceSource::Kind::External:
    case AdherenceSource::Kind::Sensitivity:
      if (static_cast<int>(adherence.coefficients.size()) != k)
        throw SpecError("adherence coefficients must be supplied for each of the " + std::to_string(k) + " stages");
      for (int j = 1; j <= k; ++j) {
        const auto terms = static_cast<Eigen::Index>(specs[static_cast<std::size_t>(j - 1)].adherence.size());
        if (adherence.coefficients[static_cast<std::size_t>(j - 1)].size() != terms)
          throw SpecError("stage " + std::to_string(j) + ": adherence coefficient vector has the wrong length");
        if (!adherence.coefficients[static_cast<std::size_t>(j - 1)].allFinite())
          throw SpecError("stage " + std::to_string(j) + ": adherence coefficients must be finite");
      }
      if (!adherence.covariance.empty()) {
        if (static_cast<int>(adherence.covariance.size()) != k)
          throw SpecError("adherence covariance must be supplied for every stage or none");
        for (int j = 1; j <= k; ++j) {
          const auto& c = adherence.covariance[static_cast<std::size_t>(j - 1)];
          const auto terms = adherence.coefficients[static_cast<std::size_t>(j - 1)].size();
          if (c.rows() != terms || c.cols() != terms)
            throw SpecError("stage " + std::to_string(j) + ": adherence covariance has the wrong shape");
        }
      }
      break;
  }
}

GlmFit fit_adherence(const Dataset& data, int stage, const FeatureSpec& spec, std::span<const Eigen::VectorXd> expected) {
  const auto rows = data.validation_rows(stage);
  if (rows.empty()) throw DataError("no validation rows at stage " + std::to_string(stage));
  DesignContext ctx{Substitution::UseExpected, expected, std::nullopt};
  const Eigen::MatrixXd full = build_design(spec, data, stage, ctx);
  const auto& actual = data.treatment(TreatmentField::Actual, stage);
  const auto m = static_cast<Eigen::Index>(rows.size());
  Eigen::MatrixXd x(m, full.cols());
  Eigen::VectorXd y(m);
  for (Eigen::Index r = 0; r < m; ++r) {
    x.row(r) = full.row(rows[static_cast<std::size_t>(r)]);
    y(r) = actual(rows[static_cast<std::size_t>(r)]);
  }
  GlmFit fit = fit_logistic(x, y);
  if (!fit.converged)
    throw EstimationError("adherence model at stage " + std::to_string(stage) +
                          " did not converge (separation or iteration cap)");
  return fit;
}

RegimeFit estimate_regime(const Dataset& data, const std::vector<StageModelSpec>& specs,
                          const AdherenceSource& adherence, const EstimationOptions& options) {
  validate_estimation(data, specs, adherence, options);
  const detail::Pipeline pipe(data, specs, adherence, options);
  const int k = data.stages();

  RegimeFit fit;
  fit.options = options;
  fit.specs = specs;
  fit.adherence = adherence;
  fit.proxy = data.proxy_kind();
  fit.stages.resize(static_cast<std::size_t>(k));

  std::vector<Eigen::VectorXd> expected(static_cast<std::size_t>(k));
  if (pipe.modified()) {
    for (int j = 1; j <= k; ++j) {
      auto& sf = fit.stages[static_cast<std::size_t>(j - 1)];
      at_stage(j, [&] {
        sf.validation_rows = data.validation_rows(j).size();
        if (adherence.kind == AdherenceSource::Kind::Fitted) {
          sf.adherence_fit = fit_adherence(data, j, specs[static_cast<std::size_t>(j - 1)].adherence, expected);
          sf.alpha = sf.adherence_fit->coefficients;
        } else if (adherence.kind != AdherenceSource::Kind::Known) {
          sf.alpha = adherence.coefficients[static_cast<std::size_t>(j - 1)];
        }
        expected[static_cast<std::size_t>(j - 1)] = pipe.adherence_probability(j, sf.alpha, expected);
      });
    }
  }

  Eigen::VectorXd v = data.outcome();
  fit.pseudo_outcomes.resize(static_cast<Eigen::Index>(data.size()), k + 1);
  fit.pseudo_outcomes.col(k) = v;
  for (int j = k; j >= 1; --j) {
    auto& sf = fit.stages[static_cast<std::size_t>(j - 1)];
    sf.stage = j;
    at_stage(j, [&] {
      const auto pieces = pipe.pieces(j, expected);
      sf.exact_pseudo_outcome = pieces.lag != 0;
      sf.assignment_fit = fit_logistic(pieces.assignment, pipe.treatment(j));
      if (!sf.assignment_fit.converged)
        throw EstimationError("assignment model did not converge (separation or iteration cap)");
      sf.gamma = sf.assignment_fit.coefficients;
      const Eigen::VectorXd p = predict(sf.assignment_fit, pieces.assignment);
      for (Eigen::Index i = 0; i < p.size(); ++i)
        if (!(p(i) > kPositivity && p(i) < 1.0 - kPositivity)) ++sf.positivity_warnings;
      if (sf.positivity_warnings > 0)
        fit.warnings.push_back("stage " + std::to_string(j) + ": " + std::to_string(sf.positivity_warnings) +
                               " assignment probabilities outside (1e-12, 1 - 1e-12)");

      StageSystem system{pieces.contrast, std::nullopt, pipe.treatment(j), p, pipe.multiplier(j, expected), v, {}};
      const auto solution = solve_stage_joint(system, pieces.treatment_free);
      sf.psi = solution.psi;
      sf.beta = solution.beta;
      sf.condition = solution.condition;
      v = pipe.next_pseudo(j, pieces, sf.psi, v, system.multiplier, expected);
      if (!v.allFinite()) throw EstimationError("non-finite pseudo outcome");
      fit.pseudo_outcomes.col(j - 1) = v;
    });
  }
  return fit;
}

double estimated_contrast(const RegimeFit& fit, const Trajectory& history, int stage) {
  const int k = static_cast<int>(fit.stages.size());
  if (stage < 1 || stage > k) throw SpecError("stage " + std::to_string(stage) + " out of range");
  if (static_cast<int>(history.stages.size()) < stage)
    throw DataError("history has " + std::to_string(history.stages.size()) + " stages; stage " +
                    std::to_string(stage) + " requested");
  Trajectory h = history;
  h.stages.resize(static_cast<std::size_t>(stage));
  const Dataset one({h}, {}, fit.proxy);
  const std::vector<StageModelSpec> specs(fit.specs.begin(), fit.specs.begin() + stage);

  AdherenceSource source = fit.adherence;
  if (source.kind == AdherenceSource::Kind::Fitted) {
    source.kind = AdherenceSource::Kind::Sensitivity;
    for (int j = 1; j <= stage; ++j) source.coefficients.push_back(fit.stage(j).alpha);
  }
  const detail::Pipeline pipe(one, specs, source, fit.options);
  std::vector<Eigen::VectorXd> expected(static_cast<std::size_t>(stage));
  if (pipe.modified())
    for (int j = 1; j < stage; ++j)
      expected[static_cast<std::size_t>(j - 1)] = pipe.adherence_probability(j, fit.stage(j).alpha, expected);
  const Eigen::MatrixXd row = build_design(specs.back().contrast, one, stage, pipe.context(expected));
  return (row * fit.stage(stage).psi)(0);
}

int recommend(const RegimeFit& fit, const Trajectory& history, int stage) {
  return optimal_treatment(estimated_contrast(fit, history, stage));
}

std::vector<SweepPoint> sensitivity_sweep(const Dataset& data, const std::vector<StageModelSpec>& specs,
                                          const std::vector<std::vector<Eigen::VectorXd>>& grid,
                                          const EstimationOptions& options) {
  if (grid.empty()) throw SpecError("sensitivity grid is empty");
  if (!is_modified(options.mode)) throw SpecError("sensitivity sweeps require a modified estimation mode");
  std::vector<SweepPoint> out;
  out.reserve(grid.size());
  for (const auto& point : grid) {
    SweepPoint sp;
    try {
      sp.fit = estimate_regime(data, specs, AdherenceSource::sensitivity(point), options);
    } catch (const Error& e) {
      sp.error = e.what();
    }
    out.push_back(std::move(sp));
  }
  return out;
}

}  // namespace dtr
