#include "dtr/glm.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "dtr/error.hpp"

namespace dtr {

namespace {

constexpr int kMaxIterations = 100;
constexpr double kScoreTol = 1e-8;
constexpr double kStepTol = 1e-10;
constexpr double kBoundary = 1e-8;

// log(1 + exp(x))
double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

double log_likelihood(const Eigen::VectorXd& eta, const Eigen::VectorXd& y, const Eigen::VectorXd& w) {
  double ll = 0.0;
  for (Eigen::Index i = 0; i < eta.size(); ++i) ll += w(i) * (y(i) * eta(i) - softplus(eta(i)));
  return ll;
}

void check_shapes(const Eigen::MatrixXd& x, const Eigen::VectorXd& y) {
  if (x.rows() != y.size())
    throw DataError("design has " + std::to_string(x.rows()) + " rows but response has " + std::to_string(y.size()));
  if (x.cols() == 0) throw DataError("design has no columns");
  if (x.rows() < x.cols())
    throw EstimationError("design has fewer rows (" + std::to_string(x.rows()) + ") than columns (" +
                          std::to_string(x.cols()) + ")");
  if (!x.allFinite() || !y.allFinite()) throw DataError("design and response must be finite");
}

Eigen::VectorXd resolve_weights(const std::optional<Eigen::VectorXd>& weights, Eigen::Index n) {
  if (!weights) return Eigen::VectorXd::Ones(n);
  if (weights->size() != n) throw DataError("weight vector length mismatch");
  if (!weights->allFinite() || (weights->array() < 0).any()) throw DataError("weights must be finite and nonnegative");
  return *weights;
}

}  // namespace

double expit(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Eigen::VectorXd expit(const Eigen::VectorXd& x) { return x.unaryExpr([](double v) { return expit(v); }); }

double logit(double p) { return std::log(p / (1.0 - p)); }

GlmFit fit_logistic(const Eigen::MatrixXd& design, const Eigen::VectorXd& response,
                    const std::optional<Eigen::VectorXd>& weights) {
  check_shapes(design, response);
  for (Eigen::Index i = 0; i < response.size(); ++i)
    if (response(i) != 0.0 && response(i) != 1.0) throw DataError("logistic response must be 0 or 1");
  const Eigen::VectorXd w = resolve_weights(weights, response.size());

  const Eigen::MatrixXd scaled = w.cwiseSqrt().asDiagonal() * design;
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(scaled);
  if (qr.rank() < design.cols())
    throw EstimationError("rank-deficient design in logistic fit (rank " + std::to_string(qr.rank()) + " of " +
                          std::to_string(design.cols()) + ")");

  GlmFit fit;
  fit.family = Family::Logistic;
  fit.coefficients = Eigen::VectorXd::Zero(design.cols());
  Eigen::VectorXd eta = Eigen::VectorXd::Zero(design.rows());
  double ll = log_likelihood(eta, response, w);

  for (int it = 1; it <= kMaxIterations; ++it) {
    const Eigen::VectorXd mu = expit(eta);
    const Eigen::VectorXd score = design.transpose() * (w.array() * (response - mu).array()).matrix();
    fit.max_score = score.cwiseAbs().maxCoeff();
    if (fit.max_score < kScoreTol) {
      fit.converged = true;
      break;
    }
    const Eigen::VectorXd wt = w.array() * mu.array() * (1.0 - mu.array());
    const Eigen::MatrixXd info = design.transpose() * wt.asDiagonal() * design;
    Eigen::VectorXd step = info.ldlt().solve(score);
    if (!step.allFinite()) break;

    // Halve until the likelihood does not decrease.
    Eigen::VectorXd next_eta = eta + design * step;
    double next_ll = log_likelihood(next_eta, response, w);
    for (int h = 0; h < 30 && next_ll < ll - 1e-12 * std::abs(ll); ++h) {
      step /= 2.0;
      next_eta = eta + design * step;
      next_ll = log_likelihood(next_eta, response, w);
    }
    fit.coefficients += step;
    fit.iterations = it;
    eta = next_eta;
    ll = next_ll;
    if (step.cwiseAbs().maxCoeff() < kStepTol) {
      fit.converged = true;
      break;
    }
  }

  const Eigen::VectorXd mu = expit(eta);
  fit.max_score = (design.transpose() * (w.array() * (response - mu).array()).matrix()).cwiseAbs().maxCoeff();
  double worst = 0.0;
  for (Eigen::Index i = 0; i < mu.size(); ++i) {
    if (w(i) == 0.0) continue;
    if (mu(i) < kBoundary || mu(i) > 1.0 - kBoundary) ++fit.boundary_rows;
    worst = std::max(worst, std::abs(response(i) - mu(i)));
  }
  // Complete separation: every observation fitted exactly, coefficients diverging.
  if (worst < 1e-6) fit.converged = false;
  if (!fit.coefficients.allFinite()) fit.converged = false;

  const Eigen::VectorXd wt = w.array() * mu.array() * (1.0 - mu.array());
  const Eigen::MatrixXd info = design.transpose() * wt.asDiagonal() * design;
  fit.covariance = info.ldlt().solve(Eigen::MatrixXd::Identity(design.cols(), design.cols()));
  return fit;
}

GlmFit fit_linear(const Eigen::MatrixXd& design, const Eigen::VectorXd& response) {
  check_shapes(design, response);
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(design);
  if (qr.rank() < design.cols())
    throw EstimationError("rank-deficient design in linear fit (rank " + std::to_string(qr.rank()) + " of " +
                          std::to_string(design.cols()) + ")");
  GlmFit fit;
  fit.family = Family::Linear;
  fit.coefficients = qr.solve(response);
  fit.converged = fit.coefficients.allFinite();
  fit.iterations = 1;
  const Eigen::VectorXd resid = response - design * fit.coefficients;
  const auto dof = design.rows() - design.cols();
  const double sigma2 = dof > 0 ? resid.squaredNorm() / static_cast<double>(dof) : 0.0;
  const Eigen::MatrixXd xtx = design.transpose() * design;
  fit.covariance = sigma2 * xtx.ldlt().solve(Eigen::MatrixXd::Identity(design.cols(), design.cols()));
  fit.max_score = (design.transpose() * resid).cwiseAbs().maxCoeff();
  return fit;
}

Eigen::VectorXd predict(const GlmFit& fit, const Eigen::MatrixXd& design) {
  if (design.cols() != fit.coefficients.size()) throw DataError("design width does not match coefficient count");
  const Eigen::VectorXd eta = design * fit.coefficients;
  return fit.family == Family::Logistic ? expit(eta) : eta;
}

Eigen::MatrixXd score_rows(const GlmFit& fit, const Eigen::MatrixXd& design, const Eigen::VectorXd& response,
                           const std::optional<Eigen::VectorXd>& weights) {
  if (design.rows() != response.size()) throw DataError("design and response row counts differ");
  const Eigen::VectorXd w = resolve_weights(weights, response.size());
  const Eigen::VectorXd resid = (w.array() * (response - predict(fit, design)).array()).matrix();
  return resid.asDiagonal() * design;
}

}  // namespace dtr
