#pragma once

// Shared evaluation engine for point estimation and the stacked estimating
// equations: every quantity that depends on parameters is computed here so
// both paths see identical arithmetic.

#include <Eigen/Dense>
#include <span>
#include <vector>

#include "dtr/gest.hpp"

namespace dtr::detail {

struct StagePieces {
  Eigen::MatrixXd contrast;
  Eigen::MatrixXd treatment_free;
  Eigen::MatrixXd assignment;
  int lag = 0;  // lagged stage for exact pseudo outcomes, 0 if unused
  Eigen::MatrixXd contrast_at_1;
  Eigen::MatrixXd contrast_at_0;
};

class Pipeline {
 public:
  Pipeline(const Dataset& data, const std::vector<StageModelSpec>& specs, const AdherenceSource& source,
           const EstimationOptions& options);

  const Dataset& data() const { return data_; }
  int stages() const { return static_cast<int>(specs_.size()); }
  const StageModelSpec& spec(int j) const { return specs_[static_cast<std::size_t>(j - 1)]; }
  bool modified() const { return is_modified(options_.mode); }
  bool fits_alpha() const { return modified() && source_.kind == AdherenceSource::Kind::Fitted; }
  bool fixed_alpha() const {
    return modified() && (source_.kind == AdherenceSource::Kind::External ||
                          source_.kind == AdherenceSource::Kind::Sensitivity);
  }
  const AdherenceSource& source() const { return source_; }

  /// Indicator entering the residual (A - p): actual for standard-actual, the proxy otherwise.
  const Eigen::VectorXd& treatment(int j) const { return treatment_[static_cast<std::size_t>(j - 1)]; }
  const std::vector<Eigen::Index>& validation(int j) const { return validation_[static_cast<std::size_t>(j - 1)]; }
  /// Actual treatment on the stage's validation rows (same order as validation(j)).
  const Eigen::VectorXd& validated_actual(int j) const { return validated_actual_[static_cast<std::size_t>(j - 1)]; }

  Eigen::MatrixXd adherence_design(int j, std::span<const Eigen::VectorXd> expected) const;
  /// pi*_j for all rows. `alpha` is ignored for a known adherence function.
  Eigen::VectorXd adherence_probability(int j, const Eigen::VectorXd& alpha,
                                        std::span<const Eigen::VectorXd> expected) const;

  StagePieces pieces(int j, std::span<const Eigen::VectorXd> expected) const;
  /// Factor multiplying the contrast in the residual: pi*_j or the treatment.
  Eigen::VectorXd multiplier(int j, std::span<const Eigen::VectorXd> expected) const;
  Eigen::VectorXd next_pseudo(int j, const StagePieces& pieces, const Eigen::VectorXd& psi,
                              const Eigen::VectorXd& v_next, const Eigen::VectorXd& multiplier,
                              std::span<const Eigen::VectorXd> expected) const;

  DesignContext context(std::span<const Eigen::VectorXd> expected) const;

 private:
  const Dataset& data_;
  std::vector<StageModelSpec> specs_;
  AdherenceSource source_;
  EstimationOptions options_;
  std::vector<Eigen::VectorXd> treatment_;
  std::vector<std::vector<Eigen::Index>> validation_;
  std::vector<Eigen::VectorXd> validated_actual_;
};

}  // namespace dtr::detail
