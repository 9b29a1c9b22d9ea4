#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "flsim/config.hpp"
#include "flsim/data.hpp"
#include "flsim/engine.hpp"

namespace flsim {

/// Synthetic blob task generated for a run.
struct DataSpec {
  int num_classes = 10;
  std::size_t dim = 32;
  std::size_t per_class = 2400;
  double spread = 0.6;
  double test_fraction = 0.16667;

  void validate() const;
};

struct ExperimentConfig {
  RunConfig run;
  DataSpec data;
};

/// One sweep cell before seeds are applied.
struct SweepCell {
  Method method = Method::fedavg;
  HyperParams hparams;
  PartitionSpec partition;

  std::string hparam_label() const { return hparams.label(method); }
};

struct SweepSpec {
  ExperimentConfig base;
  std::vector<Method> methods;
  /// Per method, hyperparameter name -> values. Methods without an entry
  /// run once with the base hyperparameters.
  std::vector<std::pair<Method, std::vector<std::pair<std::string, std::vector<double>>>>> grid;
  /// Top-level hyperparameters, applied to every listed method that
  /// accepts them.
  std::vector<std::pair<std::string, double>> fixed_hparams;
  std::vector<PartitionSpec> partitions;
  std::vector<std::uint64_t> seeds;

  /// Methods expanded by their grid, times partitions. Seeds not included.
  std::vector<SweepCell> cells() const;
  std::size_t job_count() const { return cells().size() * seeds.size(); }
};

/// Flat key=value text. `[section]` lines prefix the keys that follow with
/// "section."; '#' starts a comment. Any sweep.* key makes the document a
/// SweepSpec. Throws ParseError naming the key and line.
std::variant<ExperimentConfig, SweepSpec> parse_config(std::string_view text);
ExperimentConfig parse_run_config(std::string_view text);
SweepSpec parse_sweep_spec(std::string_view text);

/// Canonical text form; parse_run_config(format_config(c)) reproduces c.
std::string format_config(const ExperimentConfig& cfg);

/// Train and test sets for a run, drawn from the seed's data and split
/// channels.
TrainTestSplit make_dataset(const DataSpec& data, std::uint64_t seed);

enum class RunStatus { completed, diverged, failed };
std::string_view to_string(RunStatus s);
RunStatus parse_run_status(std::string_view text);

struct SummaryRow {
  std::string run_id;
  std::string method;
  std::string hparams = "-";
  std::string partition;
  std::uint64_t seed = 0;
  double best_top1 = 0.0;
  /// First round attaining best_top1; -1 when nothing was evaluated.
  long best_round = -1;
  double mean_time_per_round = 0.0;
  /// Deterministic stand-in for time per round.
  double grad_evals_per_round = 0.0;
  RunStatus status = RunStatus::completed;
  std::optional<std::size_t> failure_round;
  std::string message;
};

/// Best accuracy and the first round reaching it. Throws std::invalid_argument
/// when no round carries an accuracy.
std::pair<double, long> best_accuracy(const std::vector<RoundMetrics>& series);

// Metrics files: header "round,sampled,loss,top1,dt,grad_evals,upd_norm",
// one record per round, sampled ids joined by ';', top1 empty on rounds
// without evaluation.
inline constexpr std::string_view kMetricsHeader = "round,sampled,loss,top1,dt,grad_evals,upd_norm";
inline constexpr std::string_view kMetricsFile = "metrics.csv";
inline constexpr std::string_view kMetaFile = "run.meta";
inline constexpr std::string_view kConfigFile = "config.ini";
inline constexpr std::string_view kSummaryFile = "summary.csv";
inline constexpr std::string_view kSweepFile = "sweep.csv";
inline constexpr std::string_view kCurvesFile = "curves.csv";

std::string format_metrics_row(const RoundMetrics& m);
void write_metrics(std::ostream& out, const std::vector<RoundMetrics>& metrics);
std::vector<RoundMetrics> read_metrics(std::istream& in);
std::vector<RoundMetrics> read_metrics_file(const std::filesystem::path& path);

/// Generates data, trains, and writes config.ini, metrics.csv, run.meta and
/// summary.csv under `out_dir`. Divergence is recorded in the row, not thrown.
SummaryRow run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& out_dir);

struct SweepRow {
  std::string method;
  std::string hparams;
  std::string partition;
  std::size_t seeds = 0;
  double mean_best_top1 = 0.0;
  double mean_best_round = 0.0;
  double mean_time_per_round = 0.0;
  double grad_evals_per_round = 0.0;
  std::size_t diverged_seeds = 0;
  std::size_t failed_seeds = 0;

  /// "completed", "diverged" or "failed" (any failed seed wins).
  std::string status() const;
};

/// Runs every (cell, seed) job on `workers` threads under
/// out_dir/runs/<cell>/seed<k>, then writes out_dir/sweep.csv with one
/// seed-averaged row per cell ordered by method, then hyperparameter value
/// descending, then partition as listed.
std::vector<SweepRow> run_sweep(const SweepSpec& spec, const std::filesystem::path& out_dir,
                                std::size_t workers);

inline constexpr std::string_view kSweepHeader =
    "method,hparams,partition,seeds,mean_best_top1,mean_best_round,mean_time_per_round,"
    "grad_evals_per_round,diverged_seeds,failed_seeds,status";
inline constexpr std::string_view kSummaryHeader =
    "run_id,method,hparams,partition,seed,best_top1,best_round,mean_time_per_round,"
    "grad_evals_per_round,status,failure_round";

void write_sweep_table(std::ostream& out, const std::vector<SweepRow>& rows);
void write_summary_table(std::ostream& out, const std::vector<SummaryRow>& rows);

struct SummaryReport {
  std::vector<SummaryRow> rows;
  /// One message per metrics file that could not be summarized.
  std::vector<std::string> errors;
};

/// Every metrics.csv under `dir` (sorted by path); run_id is the run
/// directory relative to `dir`.
SummaryReport summarize(const std::filesystem::path& dir);

struct CurvePoint {
  std::string run_id;
  std::size_t round = 0;
  double top1 = 0.0;
};

struct CurveReport {
  std::vector<CurvePoint> points;
  std::vector<std::string> errors;
};

/// Long-format (run_id, round, top1) over every run under `dir`, sorted by
/// run_id then round. With `last`, keeps each run's final `last` rounds.
CurveReport export_curves(const std::filesystem::path& dir, std::optional<std::size_t> last = {});
void write_curves(std::ostream& out, const std::vector<CurvePoint>& points);

}  // namespace flsim
