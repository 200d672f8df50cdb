#include <doctest.h>

#include <cmath>
#include <random>

#include "dtr/error.hpp"
#include "dtr/gest.hpp"
#include "dtr/inference.hpp"
#include "dtr/parallel.hpp"
#include "dtr/simulation.hpp"
#include "support.hpp"

using namespace dtr;

TEST_CASE("standard pseudo outcomes") {
  CHECK(pseudo_outcome_standard(5, 1, 1, 3) == 5);
  CHECK(pseudo_outcome_standard(5, 0, 1, 3) == 8);
  CHECK(pseudo_outcome_standard(5, 1, 0, -2) == 7);
}

TEST_CASE("modified pseudo outcomes") {
  CHECK(pseudo_outcome_modified(5, 1, 0.3, 0.0) == 5);
  CHECK(pseudo_outcome_modified(5, 1, 0.9, 2.0) == doctest::Approx(5.2).epsilon(1e-15));
  CHECK(pseudo_outcome_modified(5, 1, 1.0, 2.0) == 5);
  CHECK(pseudo_outcome_modified(5, 0, 0.0, -4.0) == 5);
}

TEST_CASE("exact pseudo outcomes") {
  CHECK(pseudo_outcome_exact(0, 0.5, 2, -1) == 1.0);
  CHECK(pseudo_outcome_exact(3, 0.4, -2, 0) == 3.0);
  CHECK(pseudo_outcome_exact(3, 1.0, 2, 5) == 5.0);
  CHECK(pseudo_outcome_exact(3, 0.0, 2, 5) == 8.0);
}

TEST_CASE("property: exact pseudo outcome is the expectation over the lagged treatment") {
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> c(-3.0, 3.0), p(0.0, 1.0);
  for (int i = 0; i < 1000; ++i) {
    const double v = c(rng), pi = p(rng), c1 = c(rng), c0 = c(rng);
    double expectation = 0.0;
    for (int a = 0; a <= 1; ++a) {
      const double weight = a ? pi : 1.0 - pi;
      const double contrast = a ? c1 : c0;
      expectation += weight * optimal_treatment(contrast) * contrast;
    }
    CHECK(std::abs(pseudo_outcome_exact(v, pi, c1, c0) - (v + expectation)) <= 1e-12);
  }
}

TEST_CASE("estimation modes round-trip") {
  for (auto m : {EstimationMode::StandardActual, EstimationMode::StandardNaiveProxy, EstimationMode::ModifiedPrescribed,
                 EstimationMode::ModifiedReported})
    CHECK(parse_estimation_mode(to_string(m)) == m);
  CHECK_THROWS_AS(parse_estimation_mode("modified"), SpecError);
}

TEST_CASE("one-stage linear system matches an explicit 2x2 oracle") {
  // Six hand-built rows: contrast design (1, x), treatment, propensity, outcome.
  const double x[] = {-1.0, 0.5, 2.0, 1.5, -0.5, 0.0};
  const double a[] = {1, 0, 1, 1, 0, 0};
  const double p[] = {0.4, 0.3, 0.8, 0.6, 0.5, 0.45};
  const double v[] = {0.3, -1.2, 4.1, 2.2, 0.7, -0.4};
  const double theta[] = {0.1, -0.2, 0.0, 0.3, 0.05, -0.1};

  StageSystem sys;
  sys.contrast.resize(6, 2);
  sys.treatment.resize(6);
  sys.propensity.resize(6);
  sys.outcome.resize(6);
  sys.offset.resize(6);
  for (int i = 0; i < 6; ++i) {
    sys.contrast(i, 0) = 1.0;
    sys.contrast(i, 1) = x[i];
    sys.treatment(i) = a[i];
    sys.propensity(i) = p[i];
    sys.outcome(i) = v[i];
    sys.offset(i) = theta[i];
  }
  sys.multiplier = sys.treatment;

  double m00 = 0, m01 = 0, m10 = 0, m11 = 0, b0 = 0, b1 = 0;
  for (int i = 0; i < 6; ++i) {
    const double w = (a[i] - p[i]) * a[i];
    m00 += w;
    m01 += w * x[i];
    m10 += w * x[i];
    m11 += w * x[i] * x[i];
    b0 += (a[i] - p[i]) * (v[i] + theta[i]);
    b1 += x[i] * (a[i] - p[i]) * (v[i] + theta[i]);
  }
  const double det = m00 * m11 - m01 * m10;
  const double psi0 = (b0 * m11 - m01 * b1) / det;
  const double psi1 = (m00 * b1 - m10 * b0) / det;

  const auto sol = solve_stage(sys);
  CHECK(std::abs(sol.psi(0) - psi0) <= 1e-12);
  CHECK(std::abs(sol.psi(1) - psi1) <= 1e-12);

  // Positive rescaling of lambda leaves the root unchanged.
  for (double scale : {0.01, 3.0, 250.0}) {
    auto scaled = sys;
    scaled.lambda = Eigen::MatrixXd(scale * sys.contrast);
    CHECK((solve_stage(scaled).psi - sol.psi).cwiseAbs().maxCoeff() <= 1e-10);
  }

  auto singular = sys;
  singular.contrast.col(1) = singular.contrast.col(0);
  CHECK_THROWS_AS(solve_stage(singular), EstimationError);
}

TEST_CASE("joint solve equals alternating least squares and contrast solves") {
  std::mt19937_64 rng(37);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const int n = 400;
  StageSystem sys;
  sys.contrast.resize(n, 2);
  Eigen::MatrixXd tf(n, 3);
  sys.treatment.resize(n);
  sys.propensity.resize(n);
  sys.multiplier.resize(n);
  sys.outcome.resize(n);
  for (int i = 0; i < n; ++i) {
    const double xi = normal(rng), zi = normal(rng);
    sys.contrast.row(i) << 1.0, xi;
    tf.row(i) << 1.0, xi, zi;
    sys.propensity(i) = expit(0.3 * xi);
    sys.treatment(i) = unit(rng) < sys.propensity(i) ? 1.0 : 0.0;
    sys.multiplier(i) = sys.treatment(i) ? 0.9 : 0.1;
    sys.outcome(i) = xi + 0.4 * zi + sys.multiplier(i) * (1.0 - xi) + normal(rng);
  }
  const auto joint = solve_stage_joint(sys, tf);

  // Oracle: alternate the two estimating equations to a fixed point.
  Eigen::VectorXd psi = Eigen::VectorXd::Zero(2), beta;
  for (int it = 0; it < 500; ++it) {
    const Eigen::VectorXd target = sys.outcome - sys.multiplier.cwiseProduct(sys.contrast * psi);
    beta = tf.colPivHouseholderQr().solve(target);
    auto step = sys;
    step.offset = -(tf * beta);
    const Eigen::VectorXd next = solve_stage(step).psi;
    const double change = (next - psi).cwiseAbs().maxCoeff();
    psi = next;
    if (change < 1e-14) break;
  }
  CHECK((joint.psi - psi).cwiseAbs().maxCoeff() < 1e-9);
  CHECK((joint.beta - beta).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("property: perfect adherence reduces modified estimation to standard estimation") {
  std::mt19937_64 rng(41);
  const auto specs = test::perfect_adherence_specs();
  for (int trial = 0; trial < 15; ++trial) {
    const auto data = test::perfect_adherence(150 + 10 * trial, rng);
    const auto standard = estimate_regime(data, specs, AdherenceSource::fitted(), {EstimationMode::StandardActual});
    const auto modified = estimate_regime(data, specs, AdherenceSource::known_function(test::proxy_adherence),
                                          {EstimationMode::ModifiedPrescribed});
    for (int j = 1; j <= 2; ++j) CHECK(test::max_abs_diff(standard.stage(j).psi, modified.stage(j).psi) <= 1e-10);
    CHECK((standard.pseudo_outcomes - modified.pseudo_outcomes).cwiseAbs().maxCoeff() <= 1e-10);
    for (std::size_t i = 0; i < data.size(); i += 7)
      for (int j = 1; j <= 2; ++j)
        CHECK(recommend(standard, data.trajectory(i), j) == recommend(modified, data.trajectory(i), j));
  }
}

TEST_CASE("regime fit shapes, determinism and diagnostics") {
  auto rng = make_stream(5, 0);
  const auto data = generate_s1(1000, 0.0, 0.3, rng);
  ScenarioConfig config;
  const auto plan = plan_for(config, Estimator::ModifiedFitted);
  const auto fit = estimate_regime(data, plan.specs, plan.adherence, plan.options);
  REQUIRE(fit.stages.size() == 2);
  CHECK(fit.stage(1).psi.size() == 2);
  CHECK(fit.stage(2).psi.size() == 3);
  CHECK(fit.stage(2).beta.size() == 4);
  CHECK(fit.stage(1).alpha.size() == 3);
  CHECK(fit.stage(1).validation_rows == 300);
  CHECK(fit.pseudo_outcomes.rows() == 1000);
  CHECK(fit.pseudo_outcomes.cols() == 3);
  CHECK(fit.pseudo_outcomes.allFinite());
  CHECK(fit.pseudo_outcomes.col(2) == data.outcome());

  const auto again = estimate_regime(data, plan.specs, plan.adherence, plan.options);
  for (int j = 1; j <= 2; ++j) CHECK(again.stage(j).psi == fit.stage(j).psi);
  CHECK(again.pseudo_outcomes == fit.pseudo_outcomes);
}

TEST_CASE("adherence fit recovers the generating coefficients") {
  auto rng = make_stream(2024, 0);
  const auto data = generate_s1(1000, 1.0, 0.3, rng);
  for (int j = 1; j <= 2; ++j) {
    const auto fit = fit_adherence(data, j, parse_feature_spec("1 + X[" + std::to_string(j) + "] + Astar[" +
                                                               std::to_string(j) + "]"));
    REQUIRE(fit.converged);
    const Eigen::Vector3d truth(-4.6, -0.83, 7.5);
    for (int k = 0; k < 3; ++k) CHECK(std::abs(fit.coefficients(k) - truth(k)) < 3.0 * std::sqrt(fit.covariance(k, k)));
  }
}

TEST_CASE("adherence fit on perfectly adherent validation rows fails loudly") {
  std::mt19937_64 rng(43);
  const auto data = test::perfect_adherence(200, rng);
  CHECK_THROWS_AS(fit_adherence(data, 1, parse_feature_spec("1 + X[1] + Astar[1]")), EstimationError);
  const auto specs = test::perfect_adherence_specs();
  CHECK_THROWS_WITH_AS(estimate_regime(data, specs, AdherenceSource::fitted(), {EstimationMode::ModifiedPrescribed}),
                       doctest::Contains("did not converge"), EstimationError);
}

TEST_CASE("reported-treatment adherence fit matches the Bayes inversion") {
  auto rng = make_stream(99, 0);
  const auto data = generate_s4(6000, 0.0, 0.3, rng);
  const auto spec = parse_feature_spec("1 + X[1] + X[1]*X[1] + Astar[1] + Astar[1]*X[1] + Astar[1]*X[1]*X[1]");
  const auto fit = fit_adherence(data, 1, spec);
  REQUIRE(fit.converged);
  for (int x = -1; x <= 1; ++x)
    for (int r = 0; r <= 1; ++r) {
      // Pr(A = 1 | X = x, A** = r) from the reporting mechanism.
      const double prior = 0.5 + 0.3 * x;
      const double sens = 0.9 - 0.05 * x, fp = 0.05 + 0.045 * x + 0.005 * x * x;
      const double l1 = r ? sens : 1.0 - sens, l0 = r ? fp : 1.0 - fp;
      const double truth = l1 * prior / (l1 * prior + l0 * (1.0 - prior));
      Eigen::VectorXd row(6);
      row << 1, x, x * x, r, r * x, r * x * x;
      CHECK(std::abs(expit(row.dot(fit.coefficients)) - truth) < 0.05);
    }
}

TEST_CASE("known adherence recovers stage-2 truth at large n") {
  auto rng = make_stream(77, 0);
  const auto data = generate_s1(100000, 1.0, 0.3, rng);
  ScenarioConfig config;
  config.varied_param = 1.0;
  const auto plan = plan_for(config, Estimator::ModifiedKnown);
  const auto fit = estimate_regime(data, plan.specs, plan.adherence, plan.options);
  // The sampling SD of psi22 at this n is close to 0.04, so closeness is
  // judged in standard errors rather than by a fixed 0.02.
  const auto sw = regime_sandwich(data, fit);
  for (Eigen::Index k = 0; k < 3; ++k) {
    const double se = std::sqrt(sw.sigma_psi(2 + k, 2 + k));
    MESSAGE("psi2" << k << " = " << fit.stage(2).psi(k) << " (se " << se << ")");
    CHECK(se < 0.05);
    CHECK(std::abs(fit.stage(2).psi(k) - 1.0) < 4.0 * se);
  }
}

TEST_CASE("recommendations") {
  auto rng = make_stream(3, 0);
  const auto data = generate_s1(500, 0.0, 0.3, rng);
  ScenarioConfig config;
  const auto plan = plan_for(config, Estimator::ModifiedKnown);
  auto fit = estimate_regime(data, plan.specs, plan.adherence, plan.options);
  fit.stages[0].psi = Eigen::Vector2d(1.0, 1.0);

  Trajectory history;
  history.stages.resize(1);
  history.stages[0].covariates = {{"X", -2.0}};
  history.stages[0].prescribed = 1;
  CHECK(estimated_contrast(fit, history, 1) == -1.0);
  CHECK(recommend(fit, history, 1) == 0);
  history.stages[0].covariates["X"] = -1.0;
  CHECK(estimated_contrast(fit, history, 1) == 0.0);
  CHECK(recommend(fit, history, 1) == 0);
  history.stages[0].covariates["X"] = -0.5;
  CHECK(recommend(fit, history, 1) == 1);

  const auto base = estimate_regime(data, plan.specs, plan.adherence, plan.options);
  auto doubled = base;
  for (auto& s : doubled.stages) s.psi *= 2.0;
  for (std::size_t i = 0; i < data.size(); i += 5)
    for (int j = 1; j <= 2; ++j) CHECK(recommend(base, data.trajectory(i), j) == recommend(doubled, data.trajectory(i), j));

  Trajectory missing = history;
  missing.stages[0].covariates = {{"Z", 1.0}};
  CHECK_THROWS_AS(recommend(fit, missing, 1), DataError);
}

TEST_CASE("sensitivity sweep reductions") {
  auto rng = make_stream(8, 0);
  const auto data = generate_s1(1000, 1.0, 0.3, rng);
  ScenarioConfig config;
  config.varied_param = 1.0;
  const auto known = plan_for(config, Estimator::ModifiedKnown);
  const auto naive = plan_for(config, Estimator::NaiveProxy);
  const Eigen::Vector3d truth(-4.6, -0.83, 7.5), perfect(-60.0, 0.0, 120.0);
  std::vector<std::vector<Eigen::VectorXd>> grid{{truth, truth}, {perfect, perfect}};
  for (double coef : {5.5, 6.5, 8.5}) grid.push_back({Eigen::Vector3d(-4.6, -0.83, coef), Eigen::Vector3d(-4.6, -0.83, coef)});
  const auto points = sensitivity_sweep(data, known.specs, grid, known.options);
  REQUIRE(points.size() == grid.size());
  for (const auto& p : points) REQUIRE(p.fit);

  const auto reference = estimate_regime(data, known.specs, known.adherence, known.options);
  for (int j = 1; j <= 2; ++j) CHECK(test::max_abs_diff(points[0].fit->stage(j).psi, reference.stage(j).psi) <= 1e-12);

  const auto proxy_fit = estimate_regime(data, known.specs, AdherenceSource::fitted(), naive.options);
  for (int j = 1; j <= 2; ++j) CHECK(test::max_abs_diff(points[1].fit->stage(j).psi, proxy_fit.stage(j).psi) <= 1e-9);

  CHECK_THROWS_AS(sensitivity_sweep(data, known.specs, grid, naive.options), SpecError);
}

TEST_CASE("configuration errors") {
  auto rng = make_stream(1, 0);
  const auto s1 = generate_s1(300, 0.0, 0.3, rng);
  const auto s4 = generate_s4(300, 0.0, 0.3, rng);
  ScenarioConfig config;
  const auto plan = plan_for(config, Estimator::ModifiedFitted);

  CHECK_THROWS_AS(validate_estimation(s1, {plan.specs[0]}, plan.adherence, plan.options), SpecError);
  CHECK_THROWS_AS(validate_estimation(s1, plan.specs, plan.adherence, {EstimationMode::ModifiedReported}), SpecError);
  CHECK_THROWS_AS(validate_estimation(s4, plan.specs, plan.adherence, {EstimationMode::ModifiedPrescribed}), SpecError);

  auto ea = plan.specs;
  ea[1].contrast = parse_feature_spec("1 + X[2] + EA[1]");
  CHECK_THROWS_AS(validate_estimation(s1, ea, plan.adherence, {EstimationMode::StandardNaiveProxy}), SpecError);
  CHECK_NOTHROW(validate_estimation(s1, ea, plan.adherence, plan.options));

  auto c = test::columns_of(s1);
  for (auto& flags : c.validation) std::fill(flags.begin(), flags.end(), 0);
  const Dataset unvalidated(std::move(c), ProxyKind::Prescribed);
  CHECK_THROWS_AS(validate_estimation(unvalidated, plan.specs, plan.adherence, plan.options), DataError);

  auto partial = test::columns_of(s1);
  partial.actual[0](0) = std::nan("");
  partial.validation[0][0] = 0;
  const Dataset incomplete(std::move(partial), ProxyKind::Prescribed);
  CHECK_THROWS_AS(validate_estimation(incomplete, plan.specs, plan.adherence, {EstimationMode::StandardActual}), DataError);

  auto short_ext = AdherenceSource::external({Eigen::Vector2d(1, 2), Eigen::Vector3d(1, 2, 3)});
  CHECK_THROWS_AS(validate_estimation(s1, plan.specs, short_ext, plan.options), SpecError);

  auto lagged = plan.specs;
  lagged[1].contrast = parse_feature_spec("1 + A[1] + X[2]*A[1]");
  CHECK_NOTHROW(estimate_regime(s1, lagged, plan.adherence, {EstimationMode::ModifiedPrescribed, true}));
}
