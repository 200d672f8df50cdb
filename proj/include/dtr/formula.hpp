#pragma once

// Feature specifications: a small formula language describing the model
// forms used at each decision stage.
//
//   spec   := term ('+' term)*
//   term   := factor ('*' factor)*
//   factor := '1' | NAME '[' INT ']' | 'log(' NAME '[' INT ']' ')'
//           | 'A[' INT ']' | 'Astar[' INT ']' | 'EA[' INT ']'
//
// Term order defines parameter order. Stages are 1-based.

#include <string>
#include <string_view>
#include <vector>

namespace dtr {

/// Which treatment value a treatment reference reads.
///  - Actual:   `A[l]`, the treatment taken; resolved per substitution mode.
///  - Proxy:    `Astar[l]`, the recorded (prescribed or reported) indicator.
///  - Expected: `EA[l]`, Pr(A_l = 1 | observed history, proxy) from the adherence model.
enum class TreatmentSource { Actual, Proxy, Expected };

enum class Transform { Identity, Log };

struct Factor {
  enum class Kind { Constant, Covariate, Treatment };

  Kind kind = Kind::Constant;
  std::string name;  // covariate name; empty otherwise
  int stage = 0;     // 0 for constants
  Transform transform = Transform::Identity;
  TreatmentSource source = TreatmentSource::Actual;

  static Factor constant() { return {}; }
  static Factor covariate(std::string name, int stage, Transform t = Transform::Identity) {
    return {Kind::Covariate, std::move(name), stage, t, TreatmentSource::Actual};
  }
  static Factor treatment(int stage, TreatmentSource source) {
    return {Kind::Treatment, {}, stage, Transform::Identity, source};
  }

  bool operator==(const Factor&) const = default;
};

struct Term {
  std::vector<Factor> factors;
  bool operator==(const Term&) const = default;
};

struct FeatureSpec {
  std::vector<Term> terms;

  std::size_t size() const { return terms.size(); }
  bool operator==(const FeatureSpec&) const = default;
};

/// Throws FormulaError (with character position) on syntax errors.
FeatureSpec parse_feature_spec(std::string_view text);

std::string to_string(const Factor& factor);
std::string to_string(const Term& term);
std::string to_string(const FeatureSpec& spec);

/// Role a specification plays at a stage; governs which references are legal.
enum class ModelRole { Contrast, TreatmentFree, Assignment, Adherence };

/// Rejects references to stages outside [1, stage] and any reference to the
/// stage's own treatment, except `Astar[stage]` inside an adherence model
/// (which must contain it) or an assignment model for the actual treatment.
/// Throws SpecError.
void check_stage_references(const FeatureSpec& spec, int stage, ModelRole role);

/// Largest stage referenced anywhere in the spec (0 if none).
int max_stage(const FeatureSpec& spec);

/// Distinct stages l < stage referenced through `A[l]` or `EA[l]`, ascending.
std::vector<int> substituted_treatment_stages(const FeatureSpec& spec, int stage);

/// True if any factor is an `A[l]` or `EA[l]` reference.
bool references_substituted_treatment(const FeatureSpec& spec);

}  // namespace dtr
