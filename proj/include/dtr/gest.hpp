#pragma once

#include <Eigen/Dense>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "dtr/dataset.hpp"
#include "dtr/design.hpp"
#include "dtr/formula.hpp"
#include "dtr/glm.hpp"

namespace dtr {

// Pseudo outcomes. The optimal action at a stage is I(contrast > 0); a zero
// contrast recommends no treatment.
inline int optimal_treatment(double contrast) { return contrast > 0.0 ? 1 : 0; }

double pseudo_outcome_standard(double v_next, int a, int a_opt, double contrast_value);
double pseudo_outcome_modified(double v_next, int a_opt, double pi_star, double contrast_star);
/// v_next + pi_prev I(c1 > 0) c1 + (1 - pi_prev) I(c0 > 0) c0, where c1 and c0
/// are the contrast evaluated at the lagged treatment set to 1 and 0.
double pseudo_outcome_exact(double v_next, double pi_prev, double contrast_at_1, double contrast_at_0);

enum class EstimationMode { StandardActual, StandardNaiveProxy, ModifiedPrescribed, ModifiedReported };

std::string to_string(EstimationMode mode);
/// Accepts "standard-actual", "standard-naive-proxy", "modified-prescribed",
/// "modified-reported"; throws SpecError otherwise.
EstimationMode parse_estimation_mode(std::string_view text);
inline bool is_modified(EstimationMode m) {
  return m == EstimationMode::ModifiedPrescribed || m == EstimationMode::ModifiedReported;
}

enum class LambdaChoice { Gradient };

struct StageModelSpec {
  FeatureSpec contrast;        // psi
  FeatureSpec treatment_free;  // beta
  FeatureSpec assignment;      // gamma
  FeatureSpec adherence;       // alpha; must contain Astar[stage] when used
  LambdaChoice lambda = LambdaChoice::Gradient;
};

StageModelSpec make_stage_spec(std::string_view contrast, std::string_view treatment_free,
                               std::string_view assignment, std::string_view adherence);

/// Pr(A_j = 1 | H*, A*_j) for every row of a dataset at one stage.
using AdherenceFn = std::function<Eigen::VectorXd(const Dataset&, int stage)>;

struct AdherenceSource {
  enum class Kind { Known, Fitted, External, Sensitivity };

  Kind kind = Kind::Fitted;
  AdherenceFn known;                          // Known
  std::vector<Eigen::VectorXd> coefficients;  // External, Sensitivity: one vector per stage
  std::vector<Eigen::MatrixXd> covariance;    // External, optional: one matrix per stage

  static AdherenceSource fitted() { return {}; }
  static AdherenceSource known_function(AdherenceFn fn) { return {Kind::Known, std::move(fn), {}, {}}; }
  static AdherenceSource external(std::vector<Eigen::VectorXd> coefs, std::vector<Eigen::MatrixXd> cov = {}) {
    return {Kind::External, {}, std::move(coefs), std::move(cov)};
  }
  static AdherenceSource sensitivity(std::vector<Eigen::VectorXd> coefs) {
    return {Kind::Sensitivity, {}, std::move(coefs), {}};
  }
};

std::string to_string(AdherenceSource::Kind kind);

struct EstimationOptions {
  EstimationMode mode = EstimationMode::ModifiedPrescribed;
  bool exact_pseudo_outcomes = false;
};

/// Square linear system for one stage's contrast parameters. Rows of
/// `contrast` are the contrast design; lambda defaults to it.
struct StageSystem {
  Eigen::MatrixXd contrast;
  std::optional<Eigen::MatrixXd> lambda;
  Eigen::VectorXd treatment;   // A (standard) or the proxy (modified)
  Eigen::VectorXd propensity;  // fitted Pr(treatment = 1 | history)
  Eigen::VectorXd multiplier;  // A (standard) or pi* (modified)
  Eigen::VectorXd outcome;     // next-stage pseudo outcome
  Eigen::VectorXd offset;      // theta_i = -nu_i; empty means zero
};

struct StageSolution {
  Eigen::VectorXd psi;
  Eigen::VectorXd beta;  // empty for solve_stage
  double condition = 0.0;
};

/// Solves M psi = b with the offset held fixed. Throws EstimationError when
/// the system is singular or its condition number exceeds 1e12.
StageSolution solve_stage(const StageSystem& system);

/// Solves the contrast equations jointly with least squares for the
/// treatment-free coefficients (offset = -treatment_free * beta). The
/// condition check applies to the reduced system for psi.
StageSolution solve_stage_joint(const StageSystem& system, const Eigen::MatrixXd& treatment_free);

struct StageFit {
  int stage = 0;
  Eigen::VectorXd psi;
  Eigen::VectorXd beta;
  Eigen::VectorXd gamma;
  Eigen::VectorXd alpha;  // empty when the adherence source is a known function or unused
  GlmFit assignment_fit;
  std::optional<GlmFit> adherence_fit;
  double condition = 0.0;
  int positivity_warnings = 0;
  std::size_t validation_rows = 0;
  bool exact_pseudo_outcome = false;
};

struct RegimeFit {
  EstimationOptions options;
  std::vector<StageModelSpec> specs;
  AdherenceSource adherence;
  ProxyKind proxy = ProxyKind::Prescribed;
  std::vector<StageFit> stages;  // index j - 1
  /// n x (K + 1); column j - 1 holds the stage-j pseudo outcome, column K the outcome.
  Eigen::MatrixXd pseudo_outcomes;
  std::vector<std::string> warnings;

  const StageFit& stage(int j) const { return stages.at(static_cast<std::size_t>(j - 1)); }
};

/// Checks specs, mode and data compatibility. Throws SpecError or DataError.
void validate_estimation(const Dataset& data, const std::vector<StageModelSpec>& specs,
                         const AdherenceSource& adherence, const EstimationOptions& options);

/// Logistic fit of the actual treatment on the adherence design over the
/// stage's validation rows. `expected` supplies earlier stages' adherence
/// probabilities for any EA / A references.
GlmFit fit_adherence(const Dataset& data, int stage, const FeatureSpec& spec,
                     std::span<const Eigen::VectorXd> expected = {});

/// Backward induction from stage K to 1.
RegimeFit estimate_regime(const Dataset& data, const std::vector<StageModelSpec>& specs,
                          const AdherenceSource& adherence, const EstimationOptions& options);

/// Contrast estimate for a (possibly partial) history; past treatments are
/// resolved as in the fit's mode.
double estimated_contrast(const RegimeFit& fit, const Trajectory& history, int stage);
int recommend(const RegimeFit& fit, const Trajectory& history, int stage);

struct SweepPoint {
  std::optional<RegimeFit> fit;
  std::string error;  // set when the point failed
};

/// One estimation per grid point with adherence coefficients held fixed.
/// Failures are collected per point.
std::vector<SweepPoint> sensitivity_sweep(const Dataset& data, const std::vector<StageModelSpec>& specs,
                                          const std::vector<std::vector<Eigen::VectorXd>>& grid,
                                          const EstimationOptions& options);

}  // namespace dtr
