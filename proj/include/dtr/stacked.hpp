#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "dtr/gest.hpp"

namespace dtr {

/// Per-individual stacked estimating functions for every stage: adherence
/// (when fitted), assignment, treatment-free and contrast blocks. Parameters
/// are laid out stage by stage as [alpha, gamma, beta, psi].
class StackedEquations {
 public:
  enum class BlockKind { Adherence, Assignment, TreatmentFree, Contrast };
  struct Block {
    int stage = 0;
    BlockKind kind = BlockKind::Contrast;
    Eigen::Index offset = 0;
    Eigen::Index size = 0;
  };

  StackedEquations(Dataset data, std::vector<StageModelSpec> specs, AdherenceSource adherence,
                   EstimationOptions options);
  /// Same configuration as an existing fit.
  StackedEquations(Dataset data, const RegimeFit& fit);

  Eigen::Index size() const { return size_; }
  const std::vector<Block>& blocks() const { return blocks_; }
  std::vector<Eigen::Index> psi_indices() const;
  std::vector<std::string> parameter_names() const;

  Eigen::VectorXd pack(const RegimeFit& fit) const;

  /// n x size() score matrix at theta.
  Eigen::MatrixXd scores(const Eigen::VectorXd& theta) const;

  /// Adherence coefficients held fixed (external or sensitivity sources),
  /// concatenated over stages; empty otherwise.
  Eigen::VectorXd fixed_alpha() const;
  /// Block-diagonal covariance of fixed_alpha(); empty when none was supplied.
  Eigen::MatrixXd fixed_alpha_covariance() const;
  Eigen::MatrixXd scores(const Eigen::VectorXd& theta, const Eigen::VectorXd& fixed_alpha) const;

  const Dataset& data() const { return data_; }

 private:
  Dataset data_;
  std::vector<StageModelSpec> specs_;
  AdherenceSource adherence_;
  EstimationOptions options_;
  std::vector<Block> blocks_;
  Eigen::Index size_ = 0;
};

std::string to_string(StackedEquations::BlockKind kind);

}  // namespace dtr
