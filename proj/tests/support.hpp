#pragma once

// Shared fixtures for the test binaries.

#include <Eigen/Dense>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "dtr/dataset.hpp"
#include "dtr/gest.hpp"
#include "dtr/glm.hpp"

namespace dtr::test {

inline Dataset::Columns columns_of(const Dataset& data) {
  Dataset::Columns c;
  c.stages = data.stages();
  c.covariate_names = data.covariate_names();
  for (int j = 1; j <= data.stages(); ++j) {
    std::vector<Eigen::VectorXd> covs;
    for (const auto& name : c.covariate_names) covs.push_back(data.covariate(name, j));
    c.covariates.push_back(std::move(covs));
    c.prescribed.push_back(data.treatment(TreatmentField::Prescribed, j));
    c.actual.push_back(data.treatment(TreatmentField::Actual, j));
    c.reported.push_back(data.treatment(TreatmentField::Reported, j));
    std::vector<std::uint8_t> flags(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) flags[i] = data.validated(i, j) ? 1 : 0;
    c.validation.push_back(std::move(flags));
  }
  c.outcome = data.outcome();
  for (std::size_t i = 0; i < data.size(); ++i) c.ids.push_back(data.id(i));
  return c;
}

/// Copy of `data` with one more covariate (one column per stage).
inline Dataset with_covariate(const Dataset& data, const std::string& name, const std::vector<Eigen::VectorXd>& values) {
  auto c = columns_of(data);
  c.covariate_names.push_back(name);
  for (int j = 0; j < data.stages(); ++j) c.covariates[static_cast<std::size_t>(j)].push_back(values[static_cast<std::size_t>(j)]);
  return Dataset(std::move(c), data.proxy_kind());
}

/// Two stages, covariate X ~ N(0.5, 1), prescribed treatment followed exactly,
/// outcome linear in the history with contrasts 1 + X_1 and 0.5 - X_2 + A_1.
inline Dataset perfect_adherence(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.5, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const auto N = static_cast<Eigen::Index>(n);
  Dataset::Columns c;
  c.stages = 2;
  c.covariate_names = {"X"};
  Eigen::VectorXd x1(N), x2(N), a1(N), a2(N), y(N);
  for (Eigen::Index i = 0; i < N; ++i) {
    x1(i) = normal(rng);
    a1(i) = unit(rng) < expit(0.4 * x1(i)) ? 1.0 : 0.0;
    x2(i) = normal(rng) + 0.3 * a1(i);
    a2(i) = unit(rng) < expit(-0.2 + 0.5 * x2(i)) ? 1.0 : 0.0;
    y(i) = x1(i) + 0.5 * x2(i) + a1(i) * (1.0 + x1(i)) + a2(i) * (0.5 - x2(i) + a1(i)) + normal(rng);
  }
  c.covariates = {{x1}, {x2}};
  c.prescribed = {a1, a2};
  c.actual = {a1, a2};
  c.reported = {Eigen::VectorXd(), Eigen::VectorXd()};
  c.validation = {std::vector<std::uint8_t>(n, 1), std::vector<std::uint8_t>(n, 1)};
  c.outcome = y;
  return Dataset(std::move(c), ProxyKind::Prescribed);
}

inline std::vector<StageModelSpec> perfect_adherence_specs() {
  return {make_stage_spec("1 + X[1]", "1 + X[1]", "1 + X[1]", "1 + Astar[1]"),
          make_stage_spec("1 + X[2] + A[1]", "1 + X[1] + X[2] + A[1]", "1 + X[2]", "1 + Astar[2]")};
}

/// Adherence "model" equal to the proxy itself.
inline Eigen::VectorXd proxy_adherence(const Dataset& data, int stage) {
  return data.treatment(proxy_field(data.proxy_kind()), stage);
}

inline double max_abs_diff(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  return (a - b).cwiseAbs().maxCoeff();
}

}  // namespace dtr::test
