#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dtr/dataset.hpp"
#include "dtr/gest.hpp"
#include "dtr/inference.hpp"

namespace dtr::cli {

// ---- CSV -------------------------------------------------------------------

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  /// Throws SpecError when the column is absent.
  std::size_t column(const std::string& name) const;
};

/// RFC 4180: quoted fields may hold commas, quotes ("") and line breaks.
/// Accepts LF or CRLF. Throws DataError with the line number on ragged rows
/// or unterminated quotes.
CsvTable parse_csv(std::istream& in);
CsvTable read_csv(const std::filesystem::path& path);

/// Quotes only when needed.
std::string csv_field(const std::string& value);
void write_csv_row(std::ostream& out, const std::vector<std::string>& fields);

/// Shortest representation that reads back to the same double.
std::string format_double(double value);

/// Columns: id, then per stage <covariate>_<j>, proxy_<j>, actual_<j> and
/// valid_<j> (treatment columns only when recorded), then Y.
void write_dataset_csv(const Dataset& data, std::ostream& out);

// ---- analysis configuration ------------------------------------------------

struct StageColumns {
  std::map<std::string, std::string> covariates;  // covariate name -> CSV column
  std::string proxy;
  std::optional<std::string> actual;
  std::optional<std::string> validation;  // 0/1 column; default: actual observed
};

enum class Inference { None, Sandwich, Bootstrap };

struct AnalysisConfig {
  std::filesystem::path input;
  int stages = 0;
  std::optional<std::string> id_column;
  std::string outcome;
  std::vector<StageColumns> columns;
  std::vector<std::string> contrast, treatment_free, assignment, adherence;  // formula text per stage
  EstimationMode mode = EstimationMode::ModifiedPrescribed;
  ProxyKind proxy = ProxyKind::Prescribed;
  AdherenceSource adherence_source;
  bool exact_pseudo_outcomes = false;
  Inference inference = Inference::Sandwich;
  int replicates = 1000;
  double level = 0.95;
  std::optional<std::uint64_t> seed;
  int jobs = 1;
  std::optional<std::filesystem::path> output;
};

/// Parses the JSON configuration. Relative input paths resolve against
/// `base`. Throws SpecError.
AnalysisConfig parse_analysis_config(const std::string& json_text, const std::filesystem::path& base = {});
AnalysisConfig load_analysis_config(const std::filesystem::path& path);

std::vector<StageModelSpec> model_specs(const AnalysisConfig& config);

struct LoadedData {
  Dataset data;
  std::size_t rows_read = 0;
  std::size_t rows_dropped = 0;
};

/// Binds columns, applies complete-case filtering over the bound columns and
/// builds the dataset. Throws DataError with row/column coordinates for
/// unparsable cells.
LoadedData load_dataset(const AnalysisConfig& config, const CsvTable& table);

/// Parses a sensitivity grid whose header cells read "s<stage>:<term>" and
/// must list every adherence term of every stage. One grid point per row.
std::vector<std::vector<Eigen::VectorXd>> parse_grid(const CsvTable& table, const std::vector<StageModelSpec>& specs);

/// Fraction of (individual, stage) recommendations shared by two fits.
double recommendation_agreement(const Dataset& data, const RegimeFit& a, const RegimeFit& b);

// ---- entry point -----------------------------------------------------------

/// Runs the command line; returns the process exit status (0 ok, 2 user
/// error, 3 estimation failure). Diagnostics go to `err`.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace dtr::cli
