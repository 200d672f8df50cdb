#include "dtr/formula.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <set>

#include "dtr/error.hpp"

namespace dtr {

namespace {

bool is_name_start(char c) { return std::isalpha(static_cast<unsigned char>(c)) || c == '_'; }
bool is_name_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_'; }

class Parser {
 public:
  explicit Parser(std::string_view text) : text_(text) {}

  FeatureSpec parse() {
    FeatureSpec spec;
    skip_space();
    if (at_end()) throw FormulaError("empty feature specification", pos_);
    spec.terms.push_back(term());
    while (true) {
      skip_space();
      if (at_end()) break;
      expect('+');
      spec.terms.push_back(term());
    }
    return spec;
  }

 private:
  Term term() {
    Term t;
    t.factors.push_back(factor());
    while (true) {
      skip_space();
      if (at_end() || peek() != '*') break;
      ++pos_;
      t.factors.push_back(factor());
    }
    return t;
  }

  Factor factor() {
    skip_space();
    if (at_end()) throw FormulaError("expected a factor", pos_);
    if (peek() == '1') {
      const std::size_t start = pos_++;
      if (!at_end() && std::isdigit(static_cast<unsigned char>(peek())))
        throw FormulaError("numeric constants other than 1 are not supported", start);
      return Factor::constant();
    }
    if (!is_name_start(peek())) throw FormulaError(std::string("unexpected character '") + peek() + "'", pos_);

    const std::string word = name();
    skip_space();
    if (word == "log" && !at_end() && peek() == '(') {
      ++pos_;
      skip_space();
      const std::size_t inner = pos_;
      if (at_end() || !is_name_start(peek())) throw FormulaError("expected covariate name inside log()", pos_);
      std::string cov = name();
      if (cov == "A" || cov == "Astar" || cov == "EA")
        throw FormulaError("log() applies to covariates only", inner);
      const int stage = index();
      skip_space();
      expect(')');
      return Factor::covariate(std::move(cov), stage, Transform::Log);
    }
    const int stage = index();
    if (word == "A") return Factor::treatment(stage, TreatmentSource::Actual);
    if (word == "Astar") return Factor::treatment(stage, TreatmentSource::Proxy);
    if (word == "EA") return Factor::treatment(stage, TreatmentSource::Expected);
    return Factor::covariate(word, stage);
  }

  std::string name() {
    const std::size_t start = pos_;
    while (!at_end() && is_name_char(peek())) ++pos_;
    return std::string(text_.substr(start, pos_ - start));
  }

  int index() {
    skip_space();
    expect('[');
    skip_space();
    const std::size_t start = pos_;
    while (!at_end() && std::isdigit(static_cast<unsigned char>(peek()))) ++pos_;
    if (start == pos_) throw FormulaError("expected stage index", start);
    int value = 0;
    const auto result = std::from_chars(text_.data() + start, text_.data() + pos_, value);
    if (result.ec != std::errc() || value < 1) throw FormulaError("stage index must be a positive integer", start);
    skip_space();
    expect(']');
    return value;
  }

  void expect(char c) {
    if (at_end()) throw FormulaError(std::string("expected '") + c + "' but reached end", pos_);
    if (peek() != c) throw FormulaError(std::string("expected '") + c + "' but found '" + peek() + "'", pos_);
    ++pos_;
  }

  void skip_space() {
    while (!at_end() && std::isspace(static_cast<unsigned char>(peek()))) ++pos_;
  }
  bool at_end() const { return pos_ >= text_.size(); }
  char peek() const { return text_[pos_]; }

  std::string_view text_;
  std::size_t pos_ = 0;
};

const char* role_name(ModelRole role) {
  switch (role) {
    case ModelRole::Contrast: return "contrast";
    case ModelRole::TreatmentFree: return "treatment-free";
    case ModelRole::Assignment: return "assignment";
    case ModelRole::Adherence: return "adherence";
  }
  return "model";
}

}  // namespace

FeatureSpec parse_feature_spec(std::string_view text) { return Parser(text).parse(); }

std::string to_string(const Factor& f) {
  switch (f.kind) {
    case Factor::Kind::Constant: return "1";
    case Factor::Kind::Covariate: {
      std::string s = f.name + "[" + std::to_string(f.stage) + "]";
      return f.transform == Transform::Log ? "log(" + s + ")" : s;
    }
    case Factor::Kind::Treatment: {
      const char* head = f.source == TreatmentSource::Actual  ? "A"
                         : f.source == TreatmentSource::Proxy ? "Astar"
                                                              : "EA";
      return std::string(head) + "[" + std::to_string(f.stage) + "]";
    }
  }
  return {};
}

std::string to_string(const Term& term) {
  std::string out;
  for (std::size_t i = 0; i < term.factors.size(); ++i) {
    if (i) out += "*";
    out += to_string(term.factors[i]);
  }
  return out;
}

std::string to_string(const FeatureSpec& spec) {
  std::string out;
  for (std::size_t i = 0; i < spec.terms.size(); ++i) {
    if (i) out += " + ";
    out += to_string(spec.terms[i]);
  }
  return out;
}

void check_stage_references(const FeatureSpec& spec, int stage, ModelRole role) {
  bool has_own_proxy = false;
  for (const auto& term : spec.terms) {
    for (const auto& f : term.factors) {
      if (f.kind == Factor::Kind::Constant) continue;
      if (f.stage > stage)
        throw SpecError(std::string(role_name(role)) + " model for stage " + std::to_string(stage) +
                        " references " + to_string(f) + ": stage out of range");
      if (f.kind != Factor::Kind::Treatment || f.stage != stage) continue;
      if (f.source == TreatmentSource::Proxy && role == ModelRole::Adherence) {
        has_own_proxy = true;
        continue;
      }
      if (f.source == TreatmentSource::Proxy && role == ModelRole::Assignment) continue;
      throw SpecError(std::string(role_name(role)) + " model for stage " + std::to_string(stage) +
                      " may not reference the stage's own treatment (" + to_string(f) + ")");
    }
  }
  if (role == ModelRole::Adherence && !has_own_proxy)
    throw SpecError("adherence model for stage " + std::to_string(stage) + " must include Astar[" +
                    std::to_string(stage) + "]");
}

int max_stage(const FeatureSpec& spec) {
  int m = 0;
  for (const auto& term : spec.terms)
    for (const auto& f : term.factors) m = std::max(m, f.stage);
  return m;
}

std::vector<int> substituted_treatment_stages(const FeatureSpec& spec, int stage) {
  std::set<int> stages;
  for (const auto& term : spec.terms)
    for (const auto& f : term.factors)
      if (f.kind == Factor::Kind::Treatment && f.source != TreatmentSource::Proxy && f.stage < stage)
        stages.insert(f.stage);
  return {stages.begin(), stages.end()};
}

bool references_substituted_treatment(const FeatureSpec& spec) {
  for (const auto& term : spec.terms)
    for (const auto& f : term.factors)
      if (f.kind == Factor::Kind::Treatment && f.source != TreatmentSource::Proxy) return true;
  return false;
}

}  // namespace dtr
