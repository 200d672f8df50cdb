#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace dtr {

/// Which error-prone indicator stands in for the treatment actually taken.
enum class ProxyKind { Prescribed, Reported };

enum class TreatmentField { Prescribed, Actual, Reported };

inline TreatmentField proxy_field(ProxyKind kind) {
  return kind == ProxyKind::Prescribed ? TreatmentField::Prescribed : TreatmentField::Reported;
}

/// One decision point: covariates measured at the stage plus the treatment
/// indicators that happen to be recorded.
struct StageRecord {
  std::map<std::string, double> covariates;
  std::optional<int> prescribed;
  std::optional<int> actual;
  std::optional<int> reported;

  std::optional<int> treatment(TreatmentField field) const {
    switch (field) {
      case TreatmentField::Prescribed: return prescribed;
      case TreatmentField::Actual: return actual;
      case TreatmentField::Reported: return reported;
    }
    return std::nullopt;
  }
};

struct Trajectory {
  std::string id;
  std::vector<StageRecord> stages;  // stage j lives at index j - 1
  double outcome = 0.0;
};

/// A validated collection of trajectories sharing the same number of stages
/// and covariate schema. Stored by column; missing treatments are NaN.
class Dataset {
 public:
  /// Column-oriented construction; used by generators and the CSV loader.
  struct Columns {
    int stages = 0;
    std::vector<std::string> covariate_names;
    std::vector<std::vector<Eigen::VectorXd>> covariates;  // [stage-1][covariate]
    std::vector<Eigen::VectorXd> prescribed;               // per stage; empty vector = not recorded
    std::vector<Eigen::VectorXd> actual;
    std::vector<Eigen::VectorXd> reported;
    std::vector<std::vector<std::uint8_t>> validation;  // per stage; empty = no validation rows
    Eigen::VectorXd outcome;
    std::vector<std::string> ids;  // optional
  };

  Dataset() = default;
  Dataset(const std::vector<Trajectory>& trajectories, const std::vector<std::vector<bool>>& validation,
          ProxyKind proxy);
  Dataset(Columns columns, ProxyKind proxy);

  std::size_t size() const { return static_cast<std::size_t>(outcome_.size()); }
  int stages() const { return stages_; }
  ProxyKind proxy_kind() const { return proxy_; }
  const std::vector<std::string>& covariate_names() const { return covariate_names_; }
  bool has_covariate(const std::string& name) const;

  /// Throws DataError for unknown names or stages.
  const Eigen::VectorXd& covariate(const std::string& name, int stage) const;
  /// Treatment column for a stage; NaN marks an unrecorded value.
  const Eigen::VectorXd& treatment(TreatmentField field, int stage) const;
  bool treatment_complete(TreatmentField field, int stage) const;
  const Eigen::VectorXd& outcome() const { return outcome_; }

  bool validated(std::size_t row, int stage) const;
  std::vector<Eigen::Index> validation_rows(int stage) const;

  std::string id(std::size_t row) const;
  Trajectory trajectory(std::size_t row) const;

  /// Rows in the given order (duplicates allowed, as in resampling).
  Dataset subset(std::span<const std::size_t> rows) const;

 private:
  void validate() const;
  void check_stage(int stage) const;

  int stages_ = 0;
  ProxyKind proxy_ = ProxyKind::Prescribed;
  std::vector<std::string> covariate_names_;
  std::vector<std::vector<Eigen::VectorXd>> covariates_;
  std::vector<Eigen::VectorXd> prescribed_, actual_, reported_;
  std::vector<std::vector<std::uint8_t>> validation_;
  Eigen::VectorXd outcome_;
  std::vector<std::string> ids_;
};

}  // namespace dtr
