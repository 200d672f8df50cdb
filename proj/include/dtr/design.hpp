#pragma once

#include <Eigen/Dense>
#include <optional>
#include <span>
#include <vector>

#include "dtr/dataset.hpp"
#include "dtr/formula.hpp"

namespace dtr {

/// How `A[l]` references resolve. `Astar[l]` always reads the proxy and
/// `EA[l]` always reads the adherence probability.
enum class Substitution { UseActual, UseProxy, UseExpected };

/// Forces every `A[stage]` / `EA[stage]` reference to a fixed value; used to
/// evaluate a contrast at both values of a lagged treatment.
struct TreatmentOverride {
  int stage = 0;
  double value = 0.0;
};

struct DesignContext {
  Substitution mode = Substitution::UseActual;
  /// Pr(A_l = 1 | H*, A*_l) per stage (index l - 1); an empty vector marks a
  /// stage whose adherence probabilities are unavailable.
  std::span<const Eigen::VectorXd> expected;
  std::optional<TreatmentOverride> override_treatment;
};

/// n x terms design matrix for `stage`. Throws DataError for missing
/// covariates, non-positive log arguments or missing actual treatments, and
/// SpecError when an expected treatment is requested without probabilities.
Eigen::MatrixXd build_design(const FeatureSpec& spec, const Dataset& data, int stage, const DesignContext& ctx);

struct RowContext {
  Substitution mode = Substitution::UseActual;
  ProxyKind proxy = ProxyKind::Prescribed;
  /// Adherence probability per stage (index l - 1); NaN or absent = unavailable.
  std::vector<double> expected;
  std::optional<TreatmentOverride> override_treatment;
};

/// Single-trajectory version of build_design.
Eigen::VectorXd build_design_row(const FeatureSpec& spec, const Trajectory& traj, int stage, const RowContext& ctx);

}  // namespace dtr
