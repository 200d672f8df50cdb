#include "dtr/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "dtr/error.hpp"

namespace dtr {

namespace {

constexpr double kMissing = std::numeric_limits<double>::quiet_NaN();

Eigen::VectorXd gather(const Eigen::VectorXd& column, std::span<const std::size_t> rows) {
  if (column.size() == 0) return {};
  Eigen::VectorXd out(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) out(static_cast<Eigen::Index>(i)) = column(static_cast<Eigen::Index>(rows[i]));
  return out;
}

}  // namespace

Dataset::Dataset(const std::vector<Trajectory>& trajectories, const std::vector<std::vector<bool>>& validation,
                 ProxyKind proxy)
    : proxy_(proxy) {
  if (trajectories.empty()) throw DataError("dataset has no trajectories");
  const auto& first = trajectories.front();
  stages_ = static_cast<int>(first.stages.size());
  if (stages_ == 0) throw DataError("trajectory " + first.id + " has no stages");
  for (const auto& [name, value] : first.stages.front().covariates) covariate_names_.push_back(name);

  const auto n = static_cast<Eigen::Index>(trajectories.size());
  covariates_.assign(static_cast<std::size_t>(stages_),
                     std::vector<Eigen::VectorXd>(covariate_names_.size(), Eigen::VectorXd(n)));
  auto fresh = [&] { return std::vector<Eigen::VectorXd>(static_cast<std::size_t>(stages_), Eigen::VectorXd::Constant(n, kMissing)); };
  prescribed_ = fresh();
  actual_ = fresh();
  reported_ = fresh();
  outcome_.resize(n);
  ids_.reserve(trajectories.size());

  if (!validation.empty() && validation.size() != trajectories.size())
    throw DataError("validation flags must cover every trajectory");
  validation_.assign(static_cast<std::size_t>(stages_), std::vector<std::uint8_t>(trajectories.size(), 0));

  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& t = trajectories[static_cast<std::size_t>(i)];
    if (static_cast<int>(t.stages.size()) != stages_)
      throw DataError("trajectory " + t.id + " has " + std::to_string(t.stages.size()) + " stages, expected " +
                      std::to_string(stages_));
    ids_.push_back(t.id);
    outcome_(i) = t.outcome;
    for (int j = 0; j < stages_; ++j) {
      const auto& rec = t.stages[static_cast<std::size_t>(j)];
      if (rec.covariates.size() != covariate_names_.size())
        throw DataError("trajectory " + t.id + " stage " + std::to_string(j + 1) + " has a different covariate schema");
      for (std::size_t c = 0; c < covariate_names_.size(); ++c) {
        auto it = rec.covariates.find(covariate_names_[c]);
        if (it == rec.covariates.end())
          throw DataError("trajectory " + t.id + " stage " + std::to_string(j + 1) + " lacks covariate " +
                          covariate_names_[c]);
        covariates_[static_cast<std::size_t>(j)][c](i) = it->second;
      }
      const auto js = static_cast<std::size_t>(j);
      if (rec.prescribed) prescribed_[js](i) = *rec.prescribed;
      if (rec.actual) actual_[js](i) = *rec.actual;
      if (rec.reported) reported_[js](i) = *rec.reported;
      if (!validation.empty()) {
        const auto& flags = validation[static_cast<std::size_t>(i)];
        if (flags.size() != static_cast<std::size_t>(stages_))
          throw DataError("validation flags for trajectory " + t.id + " do not match the stage count");
        validation_[js][static_cast<std::size_t>(i)] = flags[js] ? 1 : 0;
      }
    }
  }
  // Drop treatment columns that are entirely unrecorded.
  for (auto* cols : {&prescribed_, &actual_, &reported_}) {
    bool any = false;
    for (const auto& c : *cols) any = any || !c.array().isNaN().all();
    if (!any) cols->assign(static_cast<std::size_t>(stages_), Eigen::VectorXd());
  }
  validate();
}

Dataset::Dataset(Columns columns, ProxyKind proxy)
    : stages_(columns.stages),
      proxy_(proxy),
      covariate_names_(std::move(columns.covariate_names)),
      covariates_(std::move(columns.covariates)),
      prescribed_(std::move(columns.prescribed)),
      actual_(std::move(columns.actual)),
      reported_(std::move(columns.reported)),
      validation_(std::move(columns.validation)),
      outcome_(std::move(columns.outcome)),
      ids_(std::move(columns.ids)) {
  const auto k = static_cast<std::size_t>(stages_);
  if (stages_ <= 0) throw DataError("dataset must have at least one stage");
  for (auto* cols : {&prescribed_, &actual_, &reported_})
    if (cols->empty()) cols->assign(k, Eigen::VectorXd());
  if (validation_.empty()) validation_.assign(k, {});
  for (auto& flags : validation_)
    if (flags.empty()) flags.assign(size(), 0);
  validate();
}

void Dataset::validate() const {
  const auto k = static_cast<std::size_t>(stages_);
  const auto n = outcome_.size();
  if (n == 0) throw DataError("dataset has no trajectories");
  if (!outcome_.allFinite()) throw DataError("outcome must be finite for every trajectory");
  if (covariates_.size() != k || prescribed_.size() != k || actual_.size() != k || reported_.size() != k ||
      validation_.size() != k)
    throw DataError("column layout does not match the stage count");
  if (!ids_.empty() && ids_.size() != size()) throw DataError("id column length mismatch");
  for (std::size_t j = 0; j < k; ++j) {
    if (covariates_[j].size() != covariate_names_.size()) throw DataError("covariate schema differs across stages");
    for (const auto& c : covariates_[j])
      if (c.size() != n) throw DataError("covariate column length mismatch");
    for (const auto* cols : {&prescribed_, &actual_, &reported_}) {
      const auto& c = (*cols)[j];
      if (c.size() == 0) continue;
      if (c.size() != n) throw DataError("treatment column length mismatch");
      for (Eigen::Index i = 0; i < n; ++i) {
        const double v = c(i);
        if (!std::isnan(v) && v != 0.0 && v != 1.0)
          throw DataError("treatment indicators must be 0 or 1 (row " + std::to_string(i + 1) + ", stage " +
                          std::to_string(j + 1) + ")");
      }
    }
    if (validation_[j].size() != size()) throw DataError("validation flag length mismatch");
    for (std::size_t i = 0; i < size(); ++i) {
      if (!validation_[j][i]) continue;
      if (actual_[j].size() == 0 || std::isnan(actual_[j](static_cast<Eigen::Index>(i))))
        throw DataError("row " + std::to_string(i + 1) + " is flagged as validation at stage " + std::to_string(j + 1) +
                        " but its actual treatment is missing");
    }
  }
}

void Dataset::check_stage(int stage) const {
  if (stage < 1 || stage > stages_)
    throw DataError("stage " + std::to_string(stage) + " out of range (dataset has " + std::to_string(stages_) +
                    " stages)");
}

bool Dataset::has_covariate(const std::string& name) const {
  return std::find(covariate_names_.begin(), covariate_names_.end(), name) != covariate_names_.end();
}

const Eigen::VectorXd& Dataset::covariate(const std::string& name, int stage) const {
  check_stage(stage);
  auto it = std::find(covariate_names_.begin(), covariate_names_.end(), name);
  if (it == covariate_names_.end()) throw DataError("unknown covariate '" + name + "'");
  return covariates_[static_cast<std::size_t>(stage - 1)][static_cast<std::size_t>(it - covariate_names_.begin())];
}

const Eigen::VectorXd& Dataset::treatment(TreatmentField field, int stage) const {
  check_stage(stage);
  const auto j = static_cast<std::size_t>(stage - 1);
  switch (field) {
    case TreatmentField::Prescribed: return prescribed_[j];
    case TreatmentField::Actual: return actual_[j];
    case TreatmentField::Reported: return reported_[j];
  }
  return actual_[j];
}

bool Dataset::treatment_complete(TreatmentField field, int stage) const {
  const auto& c = treatment(field, stage);
  return c.size() == outcome_.size() && !c.array().isNaN().any();
}

bool Dataset::validated(std::size_t row, int stage) const {
  check_stage(stage);
  return validation_[static_cast<std::size_t>(stage - 1)][row] != 0;
}

std::vector<Eigen::Index> Dataset::validation_rows(int stage) const {
  check_stage(stage);
  std::vector<Eigen::Index> rows;
  const auto& flags = validation_[static_cast<std::size_t>(stage - 1)];
  for (std::size_t i = 0; i < flags.size(); ++i)
    if (flags[i]) rows.push_back(static_cast<Eigen::Index>(i));
  return rows;
}

std::string Dataset::id(std::size_t row) const { return ids_.empty() ? std::to_string(row + 1) : ids_[row]; }

Trajectory Dataset::trajectory(std::size_t row) const {
  const auto i = static_cast<Eigen::Index>(row);
  Trajectory t;
  t.id = id(row);
  t.outcome = outcome_(i);
  t.stages.resize(static_cast<std::size_t>(stages_));
  auto read = [i](const Eigen::VectorXd& c) -> std::optional<int> {
    if (c.size() == 0 || std::isnan(c(i))) return std::nullopt;
    return static_cast<int>(c(i));
  };
  for (std::size_t j = 0; j < t.stages.size(); ++j) {
    auto& rec = t.stages[j];
    for (std::size_t c = 0; c < covariate_names_.size(); ++c) rec.covariates[covariate_names_[c]] = covariates_[j][c](i);
    rec.prescribed = read(prescribed_[j]);
    rec.actual = read(actual_[j]);
    rec.reported = read(reported_[j]);
  }
  return t;
}

Dataset Dataset::subset(std::span<const std::size_t> rows) const {
  Columns c;
  c.stages = stages_;
  c.covariate_names = covariate_names_;
  c.covariates.resize(covariates_.size());
  for (std::size_t j = 0; j < covariates_.size(); ++j)
    for (const auto& col : covariates_[j]) c.covariates[j].push_back(gather(col, rows));
  for (std::size_t j = 0; j < static_cast<std::size_t>(stages_); ++j) {
    c.prescribed.push_back(gather(prescribed_[j], rows));
    c.actual.push_back(gather(actual_[j], rows));
    c.reported.push_back(gather(reported_[j], rows));
    std::vector<std::uint8_t> flags(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) flags[i] = validation_[j][rows[i]];
    c.validation.push_back(std::move(flags));
  }
  c.outcome = gather(outcome_, rows);
  if (!ids_.empty())
    for (auto r : rows) c.ids.push_back(ids_[r]);
  return Dataset(std::move(c), proxy_);
}

}  // namespace dtr
