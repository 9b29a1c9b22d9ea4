// flsim command-line front end.
//
//   flsim run <config> [--out DIR]
//   flsim sweep <spec> [--out DIR] [--workers K]
//   flsim summarize <DIR>
//   flsim export <DIR> [--last N] [--out FILE]
//
// Exit codes: 0 success, 1 I/O or other failure, 2 configuration error,
// 3 divergence (run only).

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <variant>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "flsim/errors.hpp"
#include "flsim/harness.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;
constexpr int kExitDiverged = 3;

std::string read_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw flsim::IoError("cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

int cmd_run(const std::string& config_path, const std::string& out_dir) {
  const auto cfg = flsim::parse_run_config(read_file(config_path));
  const auto row = flsim::run_experiment(cfg, out_dir);
  std::cout << fmt::format("{} {} {}: best_top1={:.4f} at round {} ({})\n", row.method, row.hparams,
                           row.partition, row.best_top1, row.best_round, to_string(row.status));
  if (row.status == flsim::RunStatus::diverged) {
    std::cerr << row.message << '\n';
    return kExitDiverged;
  }
  return kExitOk;
}

int cmd_sweep(const std::string& spec_path, const std::string& out_dir, std::size_t workers) {
  const auto spec = flsim::parse_sweep_spec(read_file(spec_path));
  std::cout << fmt::format("sweep: {} cells x {} seeds = {} runs\n", spec.cells().size(),
                           spec.seeds.size(), spec.job_count());
  const auto rows = flsim::run_sweep(spec, out_dir, workers);
  flsim::write_sweep_table(std::cout, rows);
  return kExitOk;
}

int cmd_summarize(const std::string& dir) {
  const auto report = flsim::summarize(dir);
  for (const auto& err : report.errors) std::cerr << "error: " << err << '\n';
  std::ofstream out(fs::path(dir) / flsim::kSummaryFile);
  flsim::write_summary_table(out, report.rows);
  flsim::write_summary_table(std::cout, report.rows);
  return report.errors.empty() ? kExitOk : kExitFailure;
}

int cmd_export(const std::string& dir, std::optional<std::size_t> last, std::string out_file) {
  const auto report = flsim::export_curves(dir, last);
  for (const auto& err : report.errors) std::cerr << "error: " << err << '\n';
  if (out_file.empty()) out_file = (fs::path(dir) / flsim::kCurvesFile).string();
  std::ofstream out(out_file);
  if (!out) throw flsim::IoError("cannot write " + out_file);
  flsim::write_curves(out, report.points);
  std::cout << fmt::format("wrote {} rows to {}\n", report.points.size(), out_file);
  return report.errors.empty() ? kExitOk : kExitFailure;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated learning simulation harness"};
  app.require_subcommand(1);

  std::string config_path, out_dir = "out";
  auto* run = app.add_subcommand("run", "Run one experiment");
  run->add_option("config", config_path, "Config file")->required();
  run->add_option("--out", out_dir, "Output directory");

  std::string spec_path, sweep_out = "sweep_out";
  std::size_t workers = 1;
  auto* sweep = app.add_subcommand("sweep", "Run a hyperparameter sweep");
  sweep->add_option("spec", spec_path, "Sweep spec file")->required();
  sweep->add_option("--out", sweep_out, "Output directory");
  sweep->add_option("--workers", workers, "Parallel runs")->check(CLI::PositiveNumber);

  std::string summarize_dir;
  auto* summarize = app.add_subcommand("summarize", "Best accuracy per run under a directory");
  summarize->add_option("dir", summarize_dir, "Directory with run outputs")->required();

  std::string export_dir, export_out;
  std::size_t last = 0;
  auto* exporter = app.add_subcommand("export", "Write long-format accuracy curves");
  exporter->add_option("dir", export_dir, "Directory with run outputs")->required();
  auto* last_opt = exporter->add_option("--last", last, "Keep only each run's final N rounds")
                       ->check(CLI::PositiveNumber);
  exporter->add_option("--out", export_out, "Output file (default DIR/curves.csv)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*run) return cmd_run(config_path, out_dir);
    if (*sweep) return cmd_sweep(spec_path, sweep_out, workers);
    if (*summarize) return cmd_summarize(summarize_dir);
    if (*exporter) {
      return cmd_export(export_dir, *last_opt ? std::optional<std::size_t>(last) : std::nullopt,
                        export_out);
    }
  } catch (const flsim::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitFailure;
}
