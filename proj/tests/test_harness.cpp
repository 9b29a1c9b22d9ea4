#include <doctest.h>

#include <cstdlib>
#include <sys/wait.h>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "flsim/errors.hpp"
#include "flsim/harness.hpp"

using namespace flsim;
namespace fs = std::filesystem;

namespace {

constexpr std::string_view kTinyRun = R"(
method = fedavg
n_clients = 4
sample_size = 2
rounds = 3
batch_size = 8
partition = dirichlet(0.5)
seed = 3

[model]
hidden_dim = 8

[data]
num_classes = 3
dim = 4
per_class = 20
test_fraction = 0.25
)";

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("flsim_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// Metrics text with the dt column blanked.
std::string without_dt(const std::string& text) {
  std::istringstream in(text);
  std::string line, out;
  while (std::getline(in, line)) {
    std::vector<std::string> cols;
    std::stringstream ss(line);
    for (std::string c; std::getline(ss, c, ',');) cols.push_back(c);
    if (cols.size() > 4) cols[4] = "";
    for (std::size_t i = 0; i < cols.size(); ++i) out += (i ? "," : "") + cols[i];
    out += '\n';
  }
  return out;
}

RoundMetrics record(std::size_t round, std::optional<double> top1) {
  RoundMetrics m;
  m.round = round;
  m.sampled = {0, 2};
  m.mean_train_loss = 0.5;
  m.test_top1 = top1;
  m.wall_time_seconds = 0.01;
  m.grad_evals = 4;
  return m;
}

void write_run(const fs::path& dir, const std::vector<RoundMetrics>& metrics) {
  fs::create_directories(dir);
  std::ofstream out(dir / kMetricsFile);
  write_metrics(out, metrics);
}

}  // namespace

TEST_CASE("parse_config") {
  SUBCASE("fedprox with lambda") {
    const auto cfg =
        parse_run_config("method=fedprox\nlambda=0.01\nn_clients=10\nsample_size=2\nrounds=1\n");
    CHECK(cfg.run.method == Method::fedprox);
    CHECK(cfg.run.hparams.lambda == 0.01);
    CHECK(cfg.run.hparams.label(Method::fedprox) == "lambda=0.01");
  }
  SUBCASE("rho is illegal for fedavg") {
    try {
      parse_run_config("method=fedavg\nrho=0.1\nn_clients=10\nsample_size=2\nrounds=1\n");
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      CHECK(e.key() == "rho");
      CHECK(e.line() == 2);
    }
  }
  SUBCASE("empty document lists required keys") {
    try {
      parse_config("");
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      const std::string msg = e.what();
      for (const char* key : {"method", "n_clients", "sample_size", "rounds"}) {
        CHECK(msg.find(key) != std::string::npos);
      }
    }
  }
  SUBCASE("unknown key reports its line") {
    try {
      parse_run_config("method=fedavg\nn_clients=2\nsample_size=1\nrounds=1\n\nlearning_rate=3\n");
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      CHECK(e.key() == "learning_rate");
      CHECK(e.line() == 6);
    }
  }
  SUBCASE("out of range and inconsistent values") {
    CHECK_THROWS_AS(parse_run_config("method=fedavg\nn_clients=2\nsample_size=3\nrounds=1\n"),
                    ParseError);
    CHECK_THROWS_AS(
        parse_run_config("method=fedsam\nrho=-1\nn_clients=2\nsample_size=1\nrounds=1\n"),
        ParseError);
    CHECK_THROWS_AS(
        parse_run_config("method=fedavg\nn_clients=2\nn_clients=2\nsample_size=1\nrounds=1\n"),
        ParseError);
    CHECK_THROWS_AS(parse_run_config("method=fedavg\nn_clients=x\nsample_size=1\nrounds=1\n"),
                    ParseError);
  }
  SUBCASE("sections and comments") {
    const auto cfg = parse_run_config(kTinyRun);
    CHECK(cfg.run.model.hidden_dim == 8);
    CHECK(cfg.data.per_class == 20);
    CHECK(cfg.run.partition == PartitionSpec::dirichlet(0.5));
  }
  SUBCASE("format/parse round trip") {
    auto cfg = parse_run_config(kTinyRun);
    cfg.run.method = Method::fedsmoo;
    cfg.run.hparams.set(Method::fedsmoo, "rho", 0.1);
    cfg.run.epochs_override[1] = 3;
    const auto back = parse_run_config(format_config(cfg));
    CHECK(format_config(back) == format_config(cfg));
    CHECK(back.run.hparams.rho == 0.1);
    CHECK(back.run.epochs_for(1) == 3);
  }
}

TEST_CASE("parse_sweep_spec") {
  const auto spec = parse_sweep_spec(std::string(kTinyRun) + R"(
[sweep]
methods = fedavg, fedprox, fedsam
grid.fedprox.lambda = 0.1, 0.01, 0.001
grid.fedsam.rho = 0.1, 0.01
partitions = iid, dirichlet(0)
seeds = 1, 2
)");
  CHECK(spec.methods.size() == 3);
  CHECK(spec.cells().size() == (1 + 3 + 2) * 2);
  CHECK(spec.job_count() == 24);
  CHECK_THROWS_AS(parse_sweep_spec(std::string(kTinyRun) + "[sweep]\nmethods=fedavg\ngrid.fedavg.rho=0.1\n"),
                  ParseError);
}

TEST_CASE("best_accuracy takes the first attainment") {
  auto series = [](std::vector<double> v) {
    std::vector<RoundMetrics> out;
    for (std::size_t i = 0; i < v.size(); ++i) out.push_back(record(i, v[i]));
    return out;
  };
  CHECK(best_accuracy(series({0.1, 0.2, 0.3})) == std::pair<double, long>{0.3, 2});
  CHECK(best_accuracy(series({0.5, 0.9, 0.9})) == std::pair<double, long>{0.9, 1});
  CHECK_THROWS_AS(best_accuracy({}), std::invalid_argument);
  CHECK_THROWS_AS(best_accuracy({record(0, std::nullopt)}), std::invalid_argument);
}

TEST_CASE("metrics rows round trip") {
  std::vector<RoundMetrics> metrics{record(0, std::nullopt), record(1, 0.123456789012345678)};
  metrics[1].update_norm = 1.0 / 3.0;
  std::stringstream buf;
  write_metrics(buf, metrics);
  CHECK(buf.str().substr(0, kMetricsHeader.size()) == kMetricsHeader);
  const auto back = read_metrics(buf);
  REQUIRE(back.size() == 2);
  CHECK_FALSE(back[0].test_top1.has_value());
  CHECK(back[1].test_top1 == metrics[1].test_top1);
  CHECK(back[1].update_norm == metrics[1].update_norm);
  CHECK(back[1].sampled == std::vector<std::size_t>{0, 2});
  std::stringstream bad("round,sampled\n1,2\n");
  CHECK_THROWS(read_metrics(bad));
}

TEST_CASE("summarize") {
  const auto dir = scratch("summarize");
  write_run(dir / "a", {record(0, 0.1), record(1, 0.2), record(2, 0.3)});
  write_run(dir / "b", {record(0, 0.5), record(1, 0.9), record(2, 0.9)});
  fs::create_directories(dir / "c");
  std::ofstream(dir / "c" / kMetricsFile) << "garbage\n";
  const auto report = summarize(dir);
  REQUIRE(report.rows.size() == 2);
  CHECK(report.errors.size() == 1);
  CHECK(report.rows[0].run_id == "a");
  CHECK(report.rows[0].best_top1 == 0.3);
  CHECK(report.rows[0].best_round == 2);
  CHECK(report.rows[1].best_round == 1);
  CHECK(report.rows[1].grad_evals_per_round == 4.0);

  // independent re-scan of the files
  for (const auto& row : report.rows) {
    double best = 0.0;
    for (const auto& m : read_metrics_file(dir / row.run_id / kMetricsFile)) best = std::max(best, *m.test_top1);
    CHECK(row.best_top1 == best);
  }
}

TEST_CASE("export_curves") {
  const auto dir = scratch("export");
  for (const char* run : {"r2", "r1"}) {
    std::vector<RoundMetrics> metrics;
    for (std::size_t r = 0; r < 100; ++r) metrics.push_back(record(r, 0.01 * static_cast<double>(r)));
    write_run(dir / run, metrics);
  }
  const auto all = export_curves(dir);
  CHECK(all.points.size() == 200);
  CHECK(all.errors.empty());
  CHECK(std::is_sorted(all.points.begin(), all.points.end(), [](const auto& a, const auto& b) {
    return std::tie(a.run_id, a.round) < std::tie(b.run_id, b.round);
  }));
  CHECK(all.points.front().run_id == "r1");

  const auto zoom = export_curves(dir, 20);
  CHECK(zoom.points.size() == 40);
  CHECK(zoom.points.front().round == 80);

  std::stringstream out;
  write_curves(out, zoom.points);
  std::string header;
  std::getline(out, header);
  CHECK(header == "run_id,round,top1");
}

TEST_CASE("run_experiment") {
  const auto dir = scratch("run");
  auto cfg = parse_run_config(kTinyRun);
  cfg.run.rounds = 1;
  const auto row = run_experiment(cfg, dir / "one");
  CHECK(row.status == RunStatus::completed);
  CHECK(read_metrics_file(dir / "one" / kMetricsFile).size() == 1);
  for (auto f : {kConfigFile, kMetaFile, kSummaryFile}) CHECK(fs::exists(dir / "one" / f));

  cfg.run.rounds = 3;
  run_experiment(cfg, dir / "a");
  run_experiment(cfg, dir / "b");
  const auto a = slurp(dir / "a" / kMetricsFile);
  CHECK(read_metrics_file(dir / "a" / kMetricsFile).size() == 3);
  CHECK(without_dt(a) == without_dt(slurp(dir / "b" / kMetricsFile)));
  CHECK(slurp(dir / "a" / kConfigFile) == slurp(dir / "b" / kConfigFile));
}

TEST_CASE("diverged run is recorded, not thrown") {
  const auto dir = scratch("diverge");
  auto cfg = parse_run_config(kTinyRun);
  cfg.run.client_lr = 1e306;
  const auto row = run_experiment(cfg, dir);
  CHECK(row.status == RunStatus::diverged);
  CHECK(row.failure_round.has_value());
  const auto report = summarize(dir);
  REQUIRE(report.rows.size() == 1);
  CHECK(report.rows[0].status == RunStatus::diverged);
}

TEST_CASE("run_sweep") {
  SUBCASE("one cell, one seed -> one row keyed '-'") {
    const auto dir = scratch("sweep1");
    auto spec = parse_sweep_spec(std::string(kTinyRun) + "[sweep]\nmethods=fedavg\nseeds=1\n");
    const auto rows = run_sweep(spec, dir, 1);
    REQUIRE(rows.size() == 1);
    CHECK(rows[0].hparams == "-");
    CHECK(rows[0].status() == "completed");
    std::string header;
    std::ifstream in(dir / kSweepFile);
    std::getline(in, header);
    CHECK(header == kSweepHeader);
  }
  SUBCASE("ordering, completeness, cost proxy, idempotence and worker independence") {
    const std::string text = std::string(kTinyRun) + R"(
[sweep]
methods = fedsam, fedavg, fedprox
grid.fedprox.lambda = 0.001, 0.1, 0.01
partitions = iid, dirichlet(0)
seeds = 1, 2
)";
    const auto spec = parse_sweep_spec(text);
    const auto dir = scratch("sweep2");
    const auto rows = run_sweep(spec, dir, 2);
    REQUIRE(rows.size() == (1 + 1 + 3) * 2);
    CHECK(rows[0].method == "fedavg");
    CHECK(rows[2].hparams == "lambda=0.1");
    CHECK(rows[4].hparams == "lambda=0.01");
    CHECK(rows[6].hparams == "lambda=0.001");
    CHECK(rows[0].partition == "iid");
    CHECK(rows[1].partition == "dirichlet(0)");
    CHECK(rows.back().method == "fedsam");
    for (std::size_t p = 0; p < 2; ++p) {
      CHECK(rows[8 + p].grad_evals_per_round == 2.0 * rows[p].grad_evals_per_round);
    }
    const auto first = slurp(dir / "runs" / "fedavg_-_iid" / "seed1" / kMetricsFile);
    run_sweep(spec, dir, 1);
    CHECK(without_dt(first) == without_dt(slurp(dir / "runs" / "fedavg_-_iid" / "seed1" / kMetricsFile)));
  }
}

#ifdef FLSIM_CLI_PATH
TEST_CASE("CLI exit codes") {
  const auto dir = scratch("cli");
  auto run = [&](const std::string& args) {
    const std::string cmd = std::string(FLSIM_CLI_PATH) + " " + args + " > " +
                            (dir / "log.txt").string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    return WEXITSTATUS(status);
  };
  std::ofstream(dir / "ok.ini") << kTinyRun;
  std::ofstream(dir / "bad.ini") << "method=fedavg\nrho=0.1\n";
  auto diverging = parse_run_config(kTinyRun);
  diverging.run.client_lr = 1e306;
  std::ofstream(dir / "nan.ini") << format_config(diverging);

  CHECK(run("run " + (dir / "ok.ini").string() + " --out " + (dir / "ok").string()) == 0);
  CHECK(run("run " + (dir / "bad.ini").string()) == 2);
  CHECK(run("run " + (dir / "nan.ini").string() + " --out " + (dir / "nan").string()) == 3);
  CHECK(run("run " + (dir / "missing.ini").string()) == 1);
  CHECK(run("frobnicate") == 2);
  CHECK(run("summarize " + (dir / "ok").string()) == 0);
  CHECK(run("export " + (dir / "ok").string() + " --last 2") == 0);
  CHECK(read_metrics_file(dir / "ok" / kMetricsFile).size() == 3);
  CHECK(fs::exists(dir / "ok" / kCurvesFile));
}
#endif

#ifdef FLSIM_FIXTURES_DIR
TEST_CASE("fedavg on IID blobs clears the pilot floor") {
  const fs::path fixtures = FLSIM_FIXTURES_DIR;
  const auto cfg = parse_run_config(slurp(fixtures / "fedavg_iid.ini"));
  std::istringstream floor_text(slurp(fixtures / "fedavg_iid_floor.txt"));
  std::string line;
  while (std::getline(floor_text, line) && (line.empty() || line[0] == '#')) {}
  const double floor = std::stod(line);

  const auto split = make_dataset(cfg.data, cfg.run.seed);
  RunConfig run = cfg.run;
  run.model.input_dim = cfg.data.dim;
  run.model.num_classes = static_cast<std::size_t>(cfg.data.num_classes);
  const auto metrics = run_training(run, split.train, split.test).metrics;
  REQUIRE(metrics.size() == 100);
  REQUIRE(metrics.back().test_top1.has_value());
  CHECK(*metrics.back().test_top1 >= floor);
}
#endif
