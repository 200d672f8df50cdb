#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "dtr/gest.hpp"

namespace dtr {

using VectorFn = std::function<Eigen::VectorXd(const Eigen::VectorXd&)>;
/// theta -> n x p matrix of per-individual estimating-function values.
using ScoreFn = std::function<Eigen::MatrixXd(const Eigen::VectorXd&)>;

/// Central differences with h_k = step * max(1, |theta_k|). Throws
/// EstimationError on non-finite evaluations.
Eigen::MatrixXd numerical_jacobian(const VectorFn& f, const Eigen::VectorXd& theta, double step = 1e-6);

struct SandwichResult {
  Eigen::MatrixXd sigma_theta;
  Eigen::MatrixXd sigma_psi;
  double bread_condition = 0.0;
  /// Boundary directions of quasi-separated logistic fits held at their limit.
  int fixed_directions = 0;
};

/// bread = -(mean Jacobian)^-1, meat = mean outer product of the rows,
/// sigma = bread meat bread' / n. `psi` selects the principal submatrix.
/// Throws EstimationError when theta_hat leaves a mean score above 1e-6 or
/// the Jacobian condition number exceeds 1e12.
SandwichResult sandwich(const ScoreFn& scores, const Eigen::VectorXd& theta_hat,
                        std::span<const Eigen::Index> psi = {});

/// Sandwich variance for a fitted regime. When a fitted adherence or
/// assignment model is quasi-separated, directions in which its estimating function is flat
/// (eigenvalue below 1e-8 of the block's largest) are held fixed and carry
/// no variance. Fixed external adherence
/// coefficients with a covariance add the delta-method term
/// (J^-1 D) V (J^-1 D)', D the Jacobian in those coefficients.
SandwichResult regime_sandwich(const Dataset& data, const RegimeFit& fit);

enum class IntervalMethod { WaldSandwich, BootstrapPercentile };
std::string to_string(IntervalMethod method);

struct Interval {
  double lower = 0.0;
  double estimate = 0.0;
  double upper = 0.0;
};

struct IntervalSet {
  std::vector<Interval> intervals;
  double level = 0.95;
  IntervalMethod method = IntervalMethod::WaldSandwich;
  int replicates = 0;  // bootstrap only
  int failures = 0;    // bootstrap only
};

/// psi_k -/+ z_{(1+level)/2} sqrt(sigma_kk).
IntervalSet wald_intervals(const Eigen::VectorXd& psi, const Eigen::MatrixXd& sigma_psi, double level);

/// All contrast parameters concatenated by stage.
Eigen::VectorXd flatten_psi(const RegimeFit& fit);
std::vector<std::string> psi_names(const RegimeFit& fit);

struct BootstrapConfig {
  std::vector<StageModelSpec> specs;
  AdherenceSource adherence;
  EstimationOptions options;
  int replicates = 1000;
  double level = 0.95;
  std::uint64_t seed = 0;
  int jobs = 1;
};

/// Statistic evaluated on a resample given as row indices.
using ResampleStatistic = std::function<Eigen::VectorXd(std::span<const std::size_t>)>;

/// Generic percentile bootstrap over n individuals. Replicate b draws from
/// make_stream(seed, b); a throwing statistic counts as a failed replicate.
IntervalSet bootstrap_percentile(std::size_t n, const ResampleStatistic& statistic, int replicates, double level,
                                 std::uint64_t seed, int jobs = 1);

/// Percentile intervals from resampling individuals with replacement and
/// refitting the whole pipeline. Failed replicates are dropped and counted;
/// more than 5% failing throws EstimationError.
IntervalSet bootstrap(const Dataset& data, const BootstrapConfig& config);

/// Type-7 sample quantile of sorted data.
double sorted_quantile(std::span<const double> sorted, double q);

}  // namespace dtr
