#include "dtr/inference.hpp"

#include <algorithm>
#include <boost/math/distributions/normal.hpp>
#include <cmath>
#include <numeric>
#include <optional>

#include "dtr/error.hpp"
#include "dtr/parallel.hpp"
#include "dtr/stacked.hpp"

namespace dtr {

namespace {

constexpr double kMaxCondition = 1e12;
constexpr double kScoreTol = 1e-6;
constexpr double kMaxFailureRate = 0.05;
constexpr double kFlatDirection = 1e-8;

struct Bread {
  Eigen::MatrixXd jacobian;  // mean Jacobian
  Eigen::MatrixXd inverse;   // its inverse
  double condition = 0.0;
};

Eigen::VectorXd mean_rows(const Eigen::MatrixXd& u) { return u.colwise().mean().transpose(); }

Bread make_bread(Eigen::MatrixXd jacobian) {
  Bread b;
  b.jacobian = std::move(jacobian);
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(b.jacobian);
  const auto& s = svd.singularValues();
  b.condition = s(s.size() - 1) > 0.0 ? s(0) / s(s.size() - 1) : std::numeric_limits<double>::infinity();
  if (!(b.condition <= kMaxCondition))
    throw EstimationError("sandwich bread is singular or ill-conditioned (condition number " +
                          std::to_string(b.condition) + ")");
  b.inverse = b.jacobian.partialPivLu().inverse();
  return b;
}

Eigen::MatrixXd mean_jacobian(const ScoreFn& scores, const Eigen::VectorXd& theta) {
  return numerical_jacobian([&](const Eigen::VectorXd& t) { return mean_rows(scores(t)); }, theta);
}

SandwichResult assemble(const Eigen::MatrixXd& u0, const Bread& bread, std::span<const Eigen::Index> psi,
                        const Eigen::MatrixXd& extra) {
  const auto n = static_cast<double>(u0.rows());
  const Eigen::MatrixXd meat = u0.transpose() * u0 / n;
  SandwichResult r;
  r.bread_condition = bread.condition;
  // -J^-1 appears twice, so the sign cancels.
  r.sigma_theta = bread.inverse * meat * bread.inverse.transpose() / n;
  if (extra.size() != 0) r.sigma_theta += extra;
  r.sigma_theta = 0.5 * (r.sigma_theta + r.sigma_theta.transpose()).eval();
  const auto q = static_cast<Eigen::Index>(psi.size());
  r.sigma_psi.resize(q, q);
  for (Eigen::Index a = 0; a < q; ++a)
    for (Eigen::Index b = 0; b < q; ++b) r.sigma_psi(a, b) = r.sigma_theta(psi[a], psi[b]);
  return r;
}

Eigen::MatrixXd checked_scores(const ScoreFn& scores, const Eigen::VectorXd& theta) {
  Eigen::MatrixXd u0 = scores(theta);
  if (u0.rows() == 0 || u0.cols() != theta.size()) throw DataError("score matrix shape does not match parameters");
  const double worst = mean_rows(u0).cwiseAbs().maxCoeff();
  if (!(worst <= kScoreTol))
    throw EstimationError("parameters do not solve the estimating equations (max |mean score| = " +
                          std::to_string(worst) + ")");
  return u0;
}

}  // namespace

Eigen::MatrixXd numerical_jacobian(const VectorFn& f, const Eigen::VectorXd& theta, double step) {
  const Eigen::VectorXd f0 = f(theta);
  if (!f0.allFinite()) throw EstimationError("non-finite function value in numerical Jacobian");
  Eigen::MatrixXd jac(f0.size(), theta.size());
  Eigen::VectorXd t = theta;
  for (Eigen::Index k = 0; k < theta.size(); ++k) {
    const double h = step * std::max(1.0, std::abs(theta(k)));
    t(k) = theta(k) + h;
    const Eigen::VectorXd up = f(t);
    t(k) = theta(k) - h;
    const Eigen::VectorXd down = f(t);
    t(k) = theta(k);
    if (!up.allFinite() || !down.allFinite())
      throw EstimationError("non-finite function value in numerical Jacobian (parameter " + std::to_string(k) + ")");
    jac.col(k) = (up - down) / (2.0 * h);
  }
  return jac;
}

SandwichResult sandwich(const ScoreFn& scores, const Eigen::VectorXd& theta_hat, std::span<const Eigen::Index> psi) {
  const Eigen::MatrixXd u0 = checked_scores(scores, theta_hat);
  return assemble(u0, make_bread(mean_jacobian(scores, theta_hat)), psi, {});
}

SandwichResult regime_sandwich(const Dataset& data, const RegimeFit& fit) {
  const StackedEquations eq(data, fit);
  const Eigen::VectorXd theta = eq.pack(fit);
  const Eigen::VectorXd fixed = eq.fixed_alpha();
  const ScoreFn scores = [&](const Eigen::VectorXd& t) { return eq.scores(t, fixed); };
  const auto psi = eq.psi_indices();
  const Eigen::MatrixXd u0 = checked_scores(scores, theta);
  const Eigen::MatrixXd jac = mean_jacobian(scores, theta);

  // A quasi-separated logistic fit sits at a boundary: along the diverging
  // coefficient direction the estimating functions are flat and every other
  // block is unaffected. Hold those directions at the fitted limit by mapping
  // theta = theta_hat + basis * phi.
  const auto p = theta.size();
  std::vector<Eigen::VectorXd> kept;
  int dropped = 0;
  for (const auto& b : eq.blocks()) {
    const auto& sf = fit.stage(b.stage);
    const bool boundary =
        (b.kind == StackedEquations::BlockKind::Adherence && sf.adherence_fit && sf.adherence_fit->boundary_rows > 0) ||
        (b.kind == StackedEquations::BlockKind::Assignment && sf.assignment_fit.boundary_rows > 0);
    if (!boundary) {
      for (Eigen::Index t = 0; t < b.size; ++t) kept.push_back(Eigen::VectorXd::Unit(p, b.offset + t));
      continue;
    }
    const Eigen::MatrixXd block = jac.block(b.offset, b.offset, b.size, b.size);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(0.5 * (block + block.transpose()));
    const double scale = eig.eigenvalues().cwiseAbs().maxCoeff();
    for (Eigen::Index t = 0; t < b.size; ++t) {
      if (std::abs(eig.eigenvalues()(t)) <= kFlatDirection * scale) {
        ++dropped;
        continue;
      }
      Eigen::VectorXd v = Eigen::VectorXd::Zero(p);
      v.segment(b.offset, b.size) = eig.eigenvectors().col(t);
      kept.push_back(v);
    }
  }
  Eigen::MatrixXd basis(p, static_cast<Eigen::Index>(kept.size()));
  for (std::size_t c = 0; c < kept.size(); ++c) basis.col(static_cast<Eigen::Index>(c)) = kept[c];

  const Bread bread = make_bread(basis.transpose() * jac * basis);
  const Eigen::MatrixXd u_reduced = u0 * basis;

  Eigen::MatrixXd extra;
  const Eigen::MatrixXd cov = eq.fixed_alpha_covariance();
  if (cov.size() != 0) {
    const Eigen::MatrixXd d = numerical_jacobian(
        [&](const Eigen::VectorXd& a) { return mean_rows(eq.scores(theta, a)); }, fixed);
    const Eigen::MatrixXd g = bread.inverse * basis.transpose() * d;
    extra = g * cov * g.transpose();
  }

  // Contrast coordinates are unit vectors in the basis, so psi maps through directly.
  SandwichResult reduced = assemble(u_reduced, bread, {}, extra);
  SandwichResult r;
  r.bread_condition = reduced.bread_condition;
  r.fixed_directions = dropped;
  r.sigma_theta = basis * reduced.sigma_theta * basis.transpose();
  r.sigma_theta = 0.5 * (r.sigma_theta + r.sigma_theta.transpose()).eval();
  const auto q = static_cast<Eigen::Index>(psi.size());
  r.sigma_psi.resize(q, q);
  for (Eigen::Index a = 0; a < q; ++a)
    for (Eigen::Index c = 0; c < q; ++c) r.sigma_psi(a, c) = r.sigma_theta(psi[a], psi[c]);
  return r;
}

std::string to_string(IntervalMethod method) {
  return method == IntervalMethod::WaldSandwich ? "wald-sandwich" : "bootstrap-percentile";
}

IntervalSet wald_intervals(const Eigen::VectorXd& psi, const Eigen::MatrixXd& sigma_psi, double level) {
  if (!(level > 0.0 && level < 1.0)) throw SpecError("confidence level must lie in (0, 1)");
  if (sigma_psi.rows() != psi.size() || sigma_psi.cols() != psi.size())
    throw DataError("variance matrix does not match the parameter vector");
  const double z = boost::math::quantile(boost::math::normal_distribution<double>(), 0.5 * (1.0 + level));
  IntervalSet out;
  out.level = level;
  out.method = IntervalMethod::WaldSandwich;
  for (Eigen::Index k = 0; k < psi.size(); ++k) {
    const double var = sigma_psi(k, k);
    if (!(var >= 0.0)) throw EstimationError("negative variance for parameter " + std::to_string(k));
    const double half = z * std::sqrt(var);
    out.intervals.push_back({psi(k) - half, psi(k), psi(k) + half});
  }
  return out;
}

Eigen::VectorXd flatten_psi(const RegimeFit& fit) {
  Eigen::Index total = 0;
  for (const auto& s : fit.stages) total += s.psi.size();
  Eigen::VectorXd out(total);
  Eigen::Index at = 0;
  for (const auto& s : fit.stages) {
    out.segment(at, s.psi.size()) = s.psi;
    at += s.psi.size();
  }
  return out;
}

std::vector<std::string> psi_names(const RegimeFit& fit) {
  std::vector<std::string> names;
  for (const auto& s : fit.stages)
    for (Eigen::Index t = 0; t < s.psi.size(); ++t)
      names.push_back("psi" + std::to_string(s.stage) + std::to_string(t));
  return names;
}

double sorted_quantile(std::span<const double> sorted, double q) {
  if (sorted.empty()) throw DataError("quantile of empty sample");
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

IntervalSet bootstrap_percentile(std::size_t n, const ResampleStatistic& statistic, int replicates, double level,
                                 std::uint64_t seed, int jobs) {
  if (replicates < 2) throw SpecError("bootstrap needs at least 2 replicates");
  if (!(level > 0.0 && level < 1.0)) throw SpecError("confidence level must lie in (0, 1)");
  if (n == 0) throw DataError("bootstrap of an empty dataset");

  std::vector<std::size_t> identity(n);
  std::iota(identity.begin(), identity.end(), std::size_t{0});
  const Eigen::VectorXd estimate = statistic(identity);

  std::vector<std::optional<Eigen::VectorXd>> draws(static_cast<std::size_t>(replicates));
  parallel_for(draws.size(), jobs, [&](std::size_t b) {
    auto rng = make_stream(seed, b);
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    std::vector<std::size_t> rows(n);
    for (auto& r : rows) r = pick(rng);
    try {
      Eigen::VectorXd value = statistic(rows);
      if (value.size() == estimate.size() && value.allFinite()) draws[b] = std::move(value);
    } catch (const Error&) {
    }
  });

  IntervalSet out;
  out.level = level;
  out.method = IntervalMethod::BootstrapPercentile;
  out.replicates = replicates;
  for (const auto& d : draws)
    if (!d) ++out.failures;
  if (out.failures > kMaxFailureRate * replicates)
    throw EstimationError(std::to_string(out.failures) + " of " + std::to_string(replicates) +
                          " bootstrap replicates failed (limit 5%)");

  for (Eigen::Index k = 0; k < estimate.size(); ++k) {
    std::vector<double> values;
    values.reserve(draws.size());
    for (const auto& d : draws)
      if (d) values.push_back((*d)(k));
    std::sort(values.begin(), values.end());
    out.intervals.push_back({sorted_quantile(values, 0.5 * (1.0 - level)), estimate(k),
                             sorted_quantile(values, 0.5 * (1.0 + level))});
  }
  return out;
}

IntervalSet bootstrap(const Dataset& data, const BootstrapConfig& config) {
  const auto statistic = [&](std::span<const std::size_t> rows) {
    const Dataset sample = data.subset(rows);
    return flatten_psi(estimate_regime(sample, config.specs, config.adherence, config.options));
  };
  return bootstrap_percentile(data.size(), statistic, config.replicates, config.level, config.seed, config.jobs);
}

}  // namespace dtr
