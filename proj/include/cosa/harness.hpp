#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cosa/eval.hpp"
#include "cosa/train_config.hpp"

namespace cosa {

extern const char* const kCodeVersion;

struct SuiteRun {
  std::string name;  // unique within the suite; also the run directory name
  TrainConfig config;
};

struct ExperimentSuite {
  std::string name;
  std::vector<SuiteRun> runs;
};

/// variants, concat_number, sampling, iterations, objectives.
const std::vector<std::string>& suite_names();

/// Systematic variations of `base`. Run i trains with seed mix_seed(base.seed, i).
/// Throws ConfigError for an unknown suite.
ExperimentSuite make_suite(const std::string& name, const TrainConfig& base);

/// Stable FNV-1a hash of the canonical config JSON, as 16 hex digits.
std::string config_hash(const TrainConfig& cfg);

/// Suite directory layout: suite.json plus one run directory per run.
/// `execute(run, dir)` trains a single run; the default trains in process.
using RunExecutor = std::function<void(const SuiteRun&, const std::filesystem::path&)>;
void write_suite_manifest(const ExperimentSuite& suite, const std::filesystem::path& dir);
void run_suite(const ExperimentSuite& suite, const std::filesystem::path& dir, bool force,
               const RunExecutor& execute = {});

struct ReportRow {
  std::string run;                   // display name
  std::filesystem::path run_dir;
  std::string mode;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::string code_version;
  int final_step = 0;
  std::map<std::string, double> metrics;  // last eval snapshot
};

struct Report {
  std::string title;
  std::vector<ReportRow> rows;
  std::vector<MetricsRecord> eval_records;  // with the row index they came from
  std::vector<std::size_t> record_rows;

  /// Metric -> index of the row with the highest value (ties: first row).
  std::map<std::string, std::size_t> best() const;

  std::string render_table() const;
  /// run,mode,seed,step,metric,value,config_hash,run_dir
  std::string render_series_csv() const;
};

/// Aggregates the metrics logs of a suite directory (suite.json) or of plain
/// run directories. Never recomputes metrics. Throws DataError naming the
/// missing path.
Report build_report(const std::vector<std::filesystem::path>& dirs);

/// Writes report.txt and series.csv into `out`.
void write_report(const Report& report, const std::filesystem::path& out);

}  // namespace cosa
