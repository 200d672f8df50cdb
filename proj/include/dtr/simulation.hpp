#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "dtr/dataset.hpp"
#include "dtr/error.hpp"
#include "dtr/gest.hpp"

namespace dtr {

enum class Scenario { S1, S2, S3, S4 };
enum class Estimator { ModifiedKnown, ModifiedFitted, NaiveProxy, StandardActual };
/// Which indicator carries the 0.5 main effect in the s3 treatment-free part.
enum class S3Indicator { Actual, Prescribed };

std::string to_string(Scenario s);
std::string to_string(Estimator e);
Scenario parse_scenario(std::string_view text);    // throws SpecError("unknown scenario ...")
Estimator parse_estimator(std::string_view text);  // throws SpecError

struct ScenarioConfig {
  Scenario scenario = Scenario::S1;
  std::size_t n = 1000;
  double validation_fraction = 0.3;
  double varied_param = 0.0;  // psi22 (s1), psi21 (s4); forced to 0 for s2, unused for s3
  int replications = 1;
  std::uint64_t seed = 1;
  std::vector<Estimator> estimators{Estimator::ModifiedKnown, Estimator::ModifiedFitted, Estimator::NaiveProxy,
                                    Estimator::StandardActual};
  bool coverage = false;
  double level = 0.95;
  bool exact_pseudo_outcomes = false;
  S3Indicator s3_treatment_free = S3Indicator::Actual;
  int jobs = 1;
};

/// Throws SpecError for out-of-range settings.
void validate(const ScenarioConfig& config);

// Generators. Covariate "X" holds X_j at stage j. Actual treatments are
// recorded for every row; a simple random subset of round(fraction * n)
// individuals is flagged as validation at every stage.
Dataset generate_s1(std::size_t n, double psi22, double validation_fraction, std::mt19937_64& rng);
Dataset generate_s3(std::size_t n, double validation_fraction, std::mt19937_64& rng,
                    S3Indicator indicator = S3Indicator::Actual);
Dataset generate_s4(std::size_t n, double psi21, double validation_fraction, std::mt19937_64& rng);
Dataset generate(const ScenarioConfig& config, std::mt19937_64& rng);

/// True adherence probability Pr(A_j = 1 | X_j, proxy) of each generator.
Eigen::VectorXd s1_adherence(const Dataset& data, int stage);
Eigen::VectorXd s4_adherence(const Dataset& data, int stage);

struct EstimatorPlan {
  std::vector<StageModelSpec> specs;
  AdherenceSource adherence;
  EstimationOptions options;
};

EstimatorPlan plan_for(const ScenarioConfig& config, Estimator estimator);

/// Truth in flattened order, and names such as psi10, psi11, psi20.
Eigen::VectorXd true_psi(const ScenarioConfig& config);
std::vector<std::string> psi_parameter_names(const ScenarioConfig& config);
std::vector<int> psi_parameter_stages(const ScenarioConfig& config);

struct ParameterSummary {
  std::string name;
  int stage = 0;
  double truth = 0.0;
  double mean = 0.0;
  double bias = 0.0;
  double variance = 0.0;  // 1/R denominator
  double mse = 0.0;
  double mse100 = 0.0;
  double mc_se = 0.0;  // sqrt(variance / R)
  std::optional<double> coverage;
};

struct EstimatorSummary {
  Estimator estimator = Estimator::ModifiedFitted;
  int successes = 0;
  int failures = 0;
  std::vector<ParameterSummary> parameters;
};

struct ReplicateRecord {
  int replicate = 0;
  Estimator estimator = Estimator::ModifiedFitted;
  bool failed = false;
  std::string error;
  Eigen::VectorXd estimates;
  Eigen::VectorXd lower, upper;  // when coverage was requested
};

struct ReplicationSummary {
  ScenarioConfig config;
  std::vector<EstimatorSummary> estimators;
  std::vector<ReplicateRecord> records;  // replicate-major, estimator order as configured
};

/// Summary statistics for one estimator from its records.
EstimatorSummary summarize(const ScenarioConfig& config, Estimator estimator,
                           const std::vector<ReplicateRecord>& records);

/// Thrown by run_replications when the failure limit is breached; carries
/// the partial summary for diagnostics.
class ReplicationFailure : public EstimationError {
 public:
  ReplicationFailure(const std::string& what, ReplicationSummary summary)
      : EstimationError(what), summary_(std::move(summary)) {}
  const ReplicationSummary& summary() const { return summary_; }

 private:
  ReplicationSummary summary_;
};

/// Runs every configured estimator on each independently seeded replicate.
/// Throws ReplicationFailure when more than 5% of replicates fail for any estimator.
ReplicationSummary run_replications(const ScenarioConfig& config);

}  // namespace dtr
