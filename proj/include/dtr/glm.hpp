#pragma once

#include <Eigen/Dense>
#include <optional>

namespace dtr {

enum class Family { Logistic, Linear };

struct GlmFit {
  Eigen::VectorXd coefficients;
  bool converged = false;
  int iterations = 0;
  Family family = Family::Logistic;
  /// Model-based covariance: inverse Fisher information (logistic) or
  /// sigma^2 (X'X)^-1 (linear).
  Eigen::MatrixXd covariance;
  /// Logistic only: rows whose fitted mean is within 1e-8 of 0 or 1.
  int boundary_rows = 0;
  double max_score = 0.0;
};

/// 1 / (1 + exp(-x)), evaluated without overflow for large |x|.
double expit(double x);
Eigen::VectorXd expit(const Eigen::VectorXd& x);
double logit(double p);

/// Weighted Bernoulli maximum likelihood by IRLS. Converged when
/// max |score| < 1e-8 or the step sup-norm < 1e-10, at most 100 iterations.
/// Quasi-separated data converge to a boundary fit (see boundary_rows);
/// complete separation or hitting the cap returns converged = false.
/// Throws EstimationError for a rank-deficient design and DataError for bad input.
GlmFit fit_logistic(const Eigen::MatrixXd& design, const Eigen::VectorXd& response,
                    const std::optional<Eigen::VectorXd>& weights = std::nullopt);

/// Least squares via column-pivoted QR. Throws EstimationError on rank deficiency.
GlmFit fit_linear(const Eigen::MatrixXd& design, const Eigen::VectorXd& response);

Eigen::VectorXd predict(const GlmFit& fit, const Eigen::MatrixXd& design);

/// Row i = x_i (y_i - mu_i) w_i.
Eigen::MatrixXd score_rows(const GlmFit& fit, const Eigen::MatrixXd& design, const Eigen::VectorXd& response,
                           const std::optional<Eigen::VectorXd>& weights = std::nullopt);

}  // namespace dtr
