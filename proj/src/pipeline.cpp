#include "pipeline.hpp"

#include <cmath>

#include "dtr/error.hpp"

namespace dtr::detail {

Pipeline::Pipeline(const Dataset& data, const std::vector<StageModelSpec>& specs, const AdherenceSource& source,
                   const EstimationOptions& options)
    : data_(data), specs_(specs), source_(source), options_(options) {
  const auto field = options.mode == EstimationMode::StandardActual ? TreatmentField::Actual
                                                                     : proxy_field(data.proxy_kind());
  for (int j = 1; j <= stages(); ++j) {
    treatment_.push_back(data.treatment(field, j));
    auto rows = modified() ? data.validation_rows(j) : std::vector<Eigen::Index>{};
    const auto& actual = data.treatment(TreatmentField::Actual, j);
    Eigen::VectorXd a(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t r = 0; r < rows.size(); ++r) a(static_cast<Eigen::Index>(r)) = actual(rows[r]);
    validation_.push_back(std::move(rows));
    validated_actual_.push_back(std::move(a));
  }
}

DesignContext Pipeline::context(std::span<const Eigen::VectorXd> expected) const {
  DesignContext ctx;
  switch (options_.mode) {
    case EstimationMode::StandardActual: ctx.mode = Substitution::UseActual; break;
    case EstimationMode::StandardNaiveProxy: ctx.mode = Substitution::UseProxy; break;
    default: ctx.mode = Substitution::UseExpected; break;
  }
  ctx.expected = expected;
  return ctx;
}

Eigen::MatrixXd Pipeline::adherence_design(int j, std::span<const Eigen::VectorXd> expected) const {
  return build_design(spec(j).adherence, data_, j, context(expected));
}

Eigen::VectorXd Pipeline::adherence_probability(int j, const Eigen::VectorXd& alpha,
                                                std::span<const Eigen::VectorXd> expected) const {
  if (source_.kind == AdherenceSource::Kind::Known) {
    Eigen::VectorXd p = source_.known(data_, j);
    if (p.size() != static_cast<Eigen::Index>(data_.size()))
      throw SpecError("known adherence function returned " + std::to_string(p.size()) + " values for stage " +
                      std::to_string(j));
    for (Eigen::Index i = 0; i < p.size(); ++i)
      if (!(p(i) >= 0.0 && p(i) <= 1.0))
        throw DataError("known adherence probability outside [0, 1] at row " + std::to_string(i + 1) + ", stage " +
                        std::to_string(j));
    return p;
  }
  return expit(adherence_design(j, expected) * alpha);
}

StagePieces Pipeline::pieces(int j, std::span<const Eigen::VectorXd> expected) const {
  const auto ctx = context(expected);
  const auto& s = spec(j);
  StagePieces p;
  p.contrast = build_design(s.contrast, data_, j, ctx);
  p.treatment_free = build_design(s.treatment_free, data_, j, ctx);
  p.assignment = build_design(s.assignment, data_, j, ctx);
  if (options_.exact_pseudo_outcomes && modified()) {
    const auto lags = substituted_treatment_stages(s.contrast, j);
    if (lags.size() > 1)
      throw SpecError("exact pseudo outcomes support one lagged treatment; the stage " + std::to_string(j) +
                      " contrast references " + std::to_string(lags.size()));
    if (lags.size() == 1) {
      p.lag = lags.front();
      auto at = ctx;
      at.override_treatment = TreatmentOverride{p.lag, 1.0};
      p.contrast_at_1 = build_design(s.contrast, data_, j, at);
      at.override_treatment = TreatmentOverride{p.lag, 0.0};
      p.contrast_at_0 = build_design(s.contrast, data_, j, at);
    }
  }
  return p;
}

Eigen::VectorXd Pipeline::multiplier(int j, std::span<const Eigen::VectorXd> expected) const {
  if (!modified()) return treatment(j);
  return expected[static_cast<std::size_t>(j - 1)];
}

Eigen::VectorXd Pipeline::next_pseudo(int j, const StagePieces& pieces, const Eigen::VectorXd& psi,
                                      const Eigen::VectorXd& v_next, const Eigen::VectorXd& multiplier,
                                      std::span<const Eigen::VectorXd> expected) const {
  const Eigen::VectorXd c = pieces.contrast * psi;
  Eigen::VectorXd v(v_next.size());
  if (!modified()) {
    const auto& a = treatment(j);
    for (Eigen::Index i = 0; i < v.size(); ++i)
      v(i) = pseudo_outcome_standard(v_next(i), static_cast<int>(a(i)), optimal_treatment(c(i)), c(i));
    return v;
  }
  if (pieces.lag == 0) {
    for (Eigen::Index i = 0; i < v.size(); ++i)
      v(i) = pseudo_outcome_modified(v_next(i), optimal_treatment(c(i)), multiplier(i), c(i));
    return v;
  }
  const Eigen::VectorXd c1 = pieces.contrast_at_1 * psi;
  const Eigen::VectorXd c0 = pieces.contrast_at_0 * psi;
  const auto& pi_prev = expected[static_cast<std::size_t>(pieces.lag - 1)];
  for (Eigen::Index i = 0; i < v.size(); ++i)
    v(i) = pseudo_outcome_exact(v_next(i) - multiplier(i) * c(i), pi_prev(i), c1(i), c0(i));
  return v;
}

}  // namespace dtr::detail
