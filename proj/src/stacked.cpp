#include "dtr/stacked.hpp"

#include "dtr/error.hpp"
#include "pipeline.hpp"

namespace dtr {

std::string to_string(StackedEquations::BlockKind kind) {
  switch (kind) {
    case StackedEquations::BlockKind::Adherence: return "alpha";
    case StackedEquations::BlockKind::Assignment: return "gamma";
    case StackedEquations::BlockKind::TreatmentFree: return "beta";
    case StackedEquations::BlockKind::Contrast: return "psi";
  }
  return "theta";
}

StackedEquations::StackedEquations(Dataset data, std::vector<StageModelSpec> specs, AdherenceSource adherence,
                                   EstimationOptions options)
    : data_(std::move(data)), specs_(std::move(specs)), adherence_(std::move(adherence)), options_(options) {
  validate_estimation(data_, specs_, adherence_, options_);
  const bool fitted = is_modified(options_.mode) && adherence_.kind == AdherenceSource::Kind::Fitted;
  for (int j = 1; j <= data_.stages(); ++j) {
    const auto& s = specs_[static_cast<std::size_t>(j - 1)];
    auto add = [&](BlockKind kind, std::size_t terms) {
      blocks_.push_back({j, kind, size_, static_cast<Eigen::Index>(terms)});
      size_ += static_cast<Eigen::Index>(terms);
    };
    if (fitted) add(BlockKind::Adherence, s.adherence.size());
    add(BlockKind::Assignment, s.assignment.size());
    add(BlockKind::TreatmentFree, s.treatment_free.size());
    add(BlockKind::Contrast, s.contrast.size());
  }
}

StackedEquations::StackedEquations(Dataset data, const RegimeFit& fit)
    : StackedEquations(std::move(data), fit.specs, fit.adherence, fit.options) {}

std::vector<Eigen::Index> StackedEquations::psi_indices() const {
  std::vector<Eigen::Index> idx;
  for (const auto& b : blocks_)
    if (b.kind == BlockKind::Contrast)
      for (Eigen::Index t = 0; t < b.size; ++t) idx.push_back(b.offset + t);
  return idx;
}

std::vector<std::string> StackedEquations::parameter_names() const {
  std::vector<std::string> names;
  for (const auto& b : blocks_)
    for (Eigen::Index t = 0; t < b.size; ++t)
      names.push_back(to_string(b.kind) + std::to_string(b.stage) + std::to_string(t));
  return names;
}

Eigen::VectorXd StackedEquations::pack(const RegimeFit& fit) const {
  Eigen::VectorXd theta(size_);
  for (const auto& b : blocks_) {
    const auto& sf = fit.stage(b.stage);
    const Eigen::VectorXd* v = nullptr;
    switch (b.kind) {
      case BlockKind::Adherence: v = &sf.alpha; break;
      case BlockKind::Assignment: v = &sf.gamma; break;
      case BlockKind::TreatmentFree: v = &sf.beta; break;
      case BlockKind::Contrast: v = &sf.psi; break;
    }
    if (v->size() != b.size) throw DataError("fit does not match the stacked parameter layout");
    theta.segment(b.offset, b.size) = *v;
  }
  return theta;
}

Eigen::VectorXd StackedEquations::fixed_alpha() const {
  if (!is_modified(options_.mode) || (adherence_.kind != AdherenceSource::Kind::External &&
                                      adherence_.kind != AdherenceSource::Kind::Sensitivity))
    return {};
  Eigen::Index total = 0;
  for (const auto& c : adherence_.coefficients) total += c.size();
  Eigen::VectorXd out(total);
  Eigen::Index at = 0;
  for (const auto& c : adherence_.coefficients) {
    out.segment(at, c.size()) = c;
    at += c.size();
  }
  return out;
}

Eigen::MatrixXd StackedEquations::fixed_alpha_covariance() const {
  const auto alpha = fixed_alpha();
  if (alpha.size() == 0 || adherence_.covariance.empty()) return {};
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(alpha.size(), alpha.size());
  Eigen::Index at = 0;
  for (const auto& c : adherence_.covariance) {
    out.block(at, at, c.rows(), c.cols()) = c;
    at += c.rows();
  }
  return out;
}

Eigen::MatrixXd StackedEquations::scores(const Eigen::VectorXd& theta) const { return scores(theta, fixed_alpha()); }

Eigen::MatrixXd StackedEquations::scores(const Eigen::VectorXd& theta, const Eigen::VectorXd& fixed) const {
  if (theta.size() != size_) throw DataError("parameter vector has the wrong length");
  const detail::Pipeline pipe(data_, specs_, adherence_, options_);
  const int k = data_.stages();
  const auto n = static_cast<Eigen::Index>(data_.size());
  Eigen::MatrixXd u = Eigen::MatrixXd::Zero(n, size_);

  struct StageParams {
    Eigen::VectorXd alpha, gamma, beta, psi;
    Eigen::Index alpha_at = -1, gamma_at = 0, beta_at = 0, psi_at = 0;
  };
  std::vector<StageParams> params(static_cast<std::size_t>(k));
  for (const auto& b : blocks_) {
    auto& p = params[static_cast<std::size_t>(b.stage - 1)];
    const Eigen::VectorXd seg = theta.segment(b.offset, b.size);
    switch (b.kind) {
      case BlockKind::Adherence: p.alpha = seg; p.alpha_at = b.offset; break;
      case BlockKind::Assignment: p.gamma = seg; p.gamma_at = b.offset; break;
      case BlockKind::TreatmentFree: p.beta = seg; p.beta_at = b.offset; break;
      case BlockKind::Contrast: p.psi = seg; p.psi_at = b.offset; break;
    }
  }
  if (pipe.fixed_alpha()) {
    Eigen::Index at = 0;
    for (int j = 1; j <= k; ++j) {
      auto& p = params[static_cast<std::size_t>(j - 1)];
      const auto len = static_cast<Eigen::Index>(specs_[static_cast<std::size_t>(j - 1)].adherence.size());
      if (at + len > fixed.size()) throw DataError("fixed adherence vector has the wrong length");
      p.alpha = fixed.segment(at, len);
      at += len;
    }
  }

  std::vector<Eigen::VectorXd> expected(static_cast<std::size_t>(k));
  if (pipe.modified()) {
    for (int j = 1; j <= k; ++j) {
      auto& p = params[static_cast<std::size_t>(j - 1)];
      const auto& rows = pipe.validation(j);
      if (p.alpha_at >= 0) {
        const Eigen::MatrixXd d = pipe.adherence_design(j, expected);
        const Eigen::VectorXd pi = expit(d * p.alpha);
        const auto& a = pipe.validated_actual(j);
        for (std::size_t r = 0; r < rows.size(); ++r) {
          const auto i = rows[r];
          u.row(i).segment(p.alpha_at, d.cols()) = d.row(i) * (a(static_cast<Eigen::Index>(r)) - pi(i));
        }
        expected[static_cast<std::size_t>(j - 1)] = pi;
      } else {
        expected[static_cast<std::size_t>(j - 1)] = pipe.adherence_probability(j, p.alpha, expected);
      }
    }
  }

  Eigen::VectorXd v = data_.outcome();
  for (int j = k; j >= 1; --j) {
    const auto& p = params[static_cast<std::size_t>(j - 1)];
    const auto pieces = pipe.pieces(j, expected);
    const auto& t = pipe.treatment(j);
    const Eigen::VectorXd prop = expit(pieces.assignment * p.gamma);
    const Eigen::VectorXd m = pipe.multiplier(j, expected);
    const Eigen::VectorXd resid =
        v - pieces.treatment_free * p.beta - (m.array() * (pieces.contrast * p.psi).array()).matrix();
    const Eigen::VectorXd centered = t - prop;
    u.middleCols(p.gamma_at, p.gamma.size()) = centered.asDiagonal() * pieces.assignment;
    u.middleCols(p.beta_at, p.beta.size()) = resid.asDiagonal() * pieces.treatment_free;
    u.middleCols(p.psi_at, p.psi.size()) =
        (centered.array() * resid.array()).matrix().asDiagonal() * pieces.contrast;
    v = pipe.next_pseudo(j, pieces, p.psi, v, m, expected);
  }
  return u;
}

}  // namespace dtr
