#include "dtr/design.hpp"

#include <cmath>
#include <string>

#include "dtr/error.hpp"

namespace dtr {

namespace {

std::string where(const Factor& f, int stage) {
  return to_string(f) + " in the stage " + std::to_string(stage) + " design";
}

const Eigen::VectorXd& require_complete(const Eigen::VectorXd& column, const Factor& f, int stage, const char* what) {
  if (column.size() == 0) throw DataError(std::string(what) + " treatment not recorded for " + where(f, stage));
  for (Eigen::Index i = 0; i < column.size(); ++i)
    if (std::isnan(column(i)))
      throw DataError(std::string(what) + " treatment missing at row " + std::to_string(i + 1) + " for " +
                      where(f, stage));
  return column;
}

Eigen::VectorXd factor_values(const Factor& f, const Dataset& data, int stage, const DesignContext& ctx) {
  const auto n = static_cast<Eigen::Index>(data.size());
  switch (f.kind) {
    case Factor::Kind::Constant: return Eigen::VectorXd::Ones(n);
    case Factor::Kind::Covariate: {
      if (f.stage > data.stages()) throw SpecError(where(f, stage) + ": stage out of range");
      if (!data.has_covariate(f.name)) throw DataError("unknown covariate '" + f.name + "' (" + where(f, stage) + ")");
      const auto& col = data.covariate(f.name, f.stage);
      if (f.transform == Transform::Identity) return col;
      for (Eigen::Index i = 0; i < n; ++i)
        if (!(col(i) > 0.0))
          throw DataError("log of non-positive value at row " + std::to_string(i + 1) + " (" + where(f, stage) + ")");
      return col.array().log();
    }
    case Factor::Kind::Treatment: break;
  }

  if (f.stage > data.stages()) throw SpecError(where(f, stage) + ": stage out of range");
  if (ctx.override_treatment && ctx.override_treatment->stage == f.stage && f.source != TreatmentSource::Proxy)
    return Eigen::VectorXd::Constant(n, ctx.override_treatment->value);

  const auto proxy = proxy_field(data.proxy_kind());
  const auto expected = [&]() -> Eigen::VectorXd {
    const auto l = static_cast<std::size_t>(f.stage - 1);
    if (l >= ctx.expected.size() || ctx.expected[l].size() == 0)
      throw SpecError("adherence probabilities unavailable for " + where(f, stage));
    if (ctx.expected[l].size() != n) throw DataError("adherence probability length mismatch for " + where(f, stage));
    return ctx.expected[l];
  };

  switch (f.source) {
    case TreatmentSource::Proxy:
      return require_complete(data.treatment(proxy, f.stage), f, stage, "proxy");
    case TreatmentSource::Expected: return expected();
    case TreatmentSource::Actual:
      switch (ctx.mode) {
        case Substitution::UseActual:
          return require_complete(data.treatment(TreatmentField::Actual, f.stage), f, stage, "actual");
        case Substitution::UseProxy:
          return require_complete(data.treatment(proxy, f.stage), f, stage, "proxy");
        case Substitution::UseExpected: return expected();
      }
  }
  return {};
}

}  // namespace

Eigen::MatrixXd build_design(const FeatureSpec& spec, const Dataset& data, int stage, const DesignContext& ctx) {
  if (spec.terms.empty()) throw SpecError("empty feature specification");
  const auto n = static_cast<Eigen::Index>(data.size());
  Eigen::MatrixXd design(n, static_cast<Eigen::Index>(spec.size()));
  for (std::size_t t = 0; t < spec.size(); ++t) {
    Eigen::ArrayXd column = Eigen::ArrayXd::Ones(n);
    for (const auto& f : spec.terms[t].factors) {
      if (f.kind == Factor::Kind::Constant) continue;
      column *= factor_values(f, data, stage, ctx).array();
    }
    design.col(static_cast<Eigen::Index>(t)) = column.matrix();
  }
  return design;
}

Eigen::VectorXd build_design_row(const FeatureSpec& spec, const Trajectory& traj, int stage, const RowContext& ctx) {
  const Dataset one({traj}, {}, ctx.proxy);
  std::vector<Eigen::VectorXd> expected(ctx.expected.size());
  for (std::size_t l = 0; l < ctx.expected.size(); ++l)
    if (!std::isnan(ctx.expected[l])) expected[l] = Eigen::VectorXd::Constant(1, ctx.expected[l]);
  DesignContext dctx{ctx.mode, expected, ctx.override_treatment};
  return build_design(spec, one, stage, dctx).row(0).transpose();
}

}  // namespace dtr
