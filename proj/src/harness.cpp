#include "flsim/harness.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <tuple>

#include <fmt/format.h>

#include "flsim/errors.hpp"
#include "parallel.hpp"

namespace fs = std::filesystem;

namespace flsim {
namespace {

constexpr std::string_view kHparamKeys[] = {"lambda", "beta", "mu", "rho", "prox_weight", "sam_guard"};

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> parts;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    parts.emplace_back(trim(s.substr(start, pos == std::string_view::npos ? pos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return parts;
}

// ---- config documents ------------------------------------------------------

struct Entry {
  std::string value;
  std::size_t line = 0;
};

// Key/value pairs of a config document. Every key must be consumed before
// `finish`, otherwise it is reported as unknown.
class Document {
 public:
  explicit Document(std::string_view text) {
    std::string section;
    std::size_t line_no = 0;
    std::size_t start = 0;
    while (start <= text.size()) {
      const auto end = text.find('\n', start);
      std::string_view raw = text.substr(start, end == std::string_view::npos ? end : end - start);
      start = end == std::string_view::npos ? text.size() + 1 : end + 1;
      ++line_no;
      if (const auto hash = raw.find('#'); hash != std::string_view::npos) raw = raw.substr(0, hash);
      const auto line = trim(raw);
      if (line.empty()) continue;
      if (line.front() == '[') {
        if (line.back() != ']') throw ParseError(std::string(line), line_no, "unterminated section header");
        section = std::string(trim(line.substr(1, line.size() - 2)));
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string_view::npos) throw ParseError(std::string(line), line_no, "expected key = value");
      const auto key = trim(line.substr(0, eq));
      if (key.empty()) throw ParseError("", line_no, "empty key");
      std::string full = section.empty() ? std::string(key) : section + "." + std::string(key);
      if (entries_.contains(full)) throw ParseError(full, line_no, "duplicate key");
      entries_.emplace(std::move(full), Entry{std::string(trim(line.substr(eq + 1))), line_no});
    }
  }

  bool has(const std::string& key) const { return entries_.contains(key); }
  bool has_prefix(std::string_view prefix) const {
    return std::any_of(entries_.begin(), entries_.end(),
                       [&](const auto& kv) { return kv.first.starts_with(prefix); });
  }

  const Entry* take(const std::string& key) {
    const auto it = entries_.find(key);
    if (it == entries_.end()) return nullptr;
    used_.insert(key);
    return &it->second;
  }

  /// Keys starting with `prefix`, in sorted order, marked consumed.
  std::vector<std::pair<std::string, Entry>> take_prefix(std::string_view prefix) {
    std::vector<std::pair<std::string, Entry>> out;
    for (const auto& [k, v] : entries_) {
      if (k.starts_with(prefix)) {
        out.emplace_back(k, v);
        used_.insert(k);
      }
    }
    return out;
  }

  std::size_t line_of(const std::string& key) const {
    const auto it = entries_.find(key);
    return it == entries_.end() ? 0 : it->second.line;
  }

  void finish() const {
    for (const auto& [k, v] : entries_) {
      if (!used_.contains(k)) throw ParseError(k, v.line, "unknown key");
    }
  }

 private:
  std::map<std::string, Entry> entries_;
  std::set<std::string> used_;
};

template <class T>
T parse_number(const std::string& key, const Entry& e) {
  T value{};
  const char* begin = e.value.data();
  const char* end = begin + e.value.size();
  const auto [ptr, ec] = std::from_chars(begin, end, value);
  if (ec != std::errc() || ptr != end || e.value.empty()) {
    throw ParseError(key, e.line, "'" + e.value + "' is not a valid number");
  }
  return value;
}

double parse_real(const std::string& key, const Entry& e) {
  const double v = parse_number<double>(key, e);
  if (!std::isfinite(v)) throw ParseError(key, e.line, "value must be finite");
  return v;
}

bool parse_bool(const std::string& key, const Entry& e) {
  if (e.value == "true" || e.value == "1") return true;
  if (e.value == "false" || e.value == "0") return false;
  throw ParseError(key, e.line, "expected true or false");
}

template <class Fn>
auto with_key(const std::string& key, std::size_t line, Fn&& fn) {
  try {
    return fn();
  } catch (const ParseError&) {
    throw;
  } catch (const ConfigError& err) {
    throw ParseError(key, line, err.what());
  }
}

void read_size(Document& doc, const std::string& key, std::size_t& out) {
  if (const Entry* e = doc.take(key)) out = parse_number<std::size_t>(key, *e);
}

void read_real(Document& doc, const std::string& key, double& out) {
  if (const Entry* e = doc.take(key)) out = parse_real(key, *e);
}

// Reads everything except hyperparameters and sweep.* keys.
ExperimentConfig read_experiment(Document& doc, bool method_required) {
  std::vector<std::string> missing;
  for (const char* key : {"method", "n_clients", "sample_size", "rounds"}) {
    if (!doc.has(key) && (method_required || std::string_view(key) != "method")) {
      missing.emplace_back(key);
    }
  }
  if (!missing.empty()) {
    std::string list;
    for (const auto& k : missing) list += (list.empty() ? "" : ", ") + k;
    throw ParseError("", 0, "missing required keys: " + list);
  }

  ExperimentConfig cfg;
  RunConfig& run = cfg.run;
  // Harness defaults: the desk-scale benchmark shape.
  run.local_epochs = 2;
  run.batch_size = 32;
  run.client_lr = 0.05;
  run.partition = PartitionSpec::dirichlet(0.0);
  run.model.kind = ModelKind::mlp;
  run.model.hidden_dim = 32;

  if (const Entry* e = doc.take("method")) {
    run.method = with_key("method", e->line, [&] { return parse_method(e->value); });
  }
  read_size(doc, "n_clients", run.n_clients);
  read_size(doc, "sample_size", run.sample_size);
  read_size(doc, "rounds", run.rounds);
  read_size(doc, "local_epochs", run.local_epochs);
  read_size(doc, "batch_size", run.batch_size);
  read_real(doc, "client_lr", run.client_lr);
  if (const Entry* e = doc.take("seed")) run.seed = parse_number<std::uint64_t>("seed", *e);
  read_size(doc, "eval_every", run.eval_every);
  read_size(doc, "workers", run.workers);
  if (const Entry* e = doc.take("weighted_aggregation")) {
    run.weighted_aggregation = parse_bool("weighted_aggregation", *e);
  }
  if (const Entry* e = doc.take("partition")) {
    run.partition = with_key("partition", e->line, [&] { return PartitionSpec::parse(e->value); });
  }
  for (const auto& [key, e] : doc.take_prefix("epochs_override.")) {
    const std::string id_text = key.substr(std::string_view("epochs_override.").size());
    const auto id = parse_number<std::size_t>(key, Entry{id_text, e.line});
    run.epochs_override[id] = parse_number<std::size_t>(key, e);
  }

  if (const Entry* e = doc.take("model.kind")) {
    run.model.kind = with_key("model.kind", e->line, [&] { return parse_model_kind(e->value); });
    if (run.model.kind == ModelKind::quadratic_probe) {
      throw ParseError("model.kind", e->line, "experiments support linear or mlp models");
    }
  }
  read_size(doc, "model.hidden_dim", run.model.hidden_dim);
  if (const Entry* e = doc.take("model.activation")) {
    run.model.activation =
        with_key("model.activation", e->line, [&] { return parse_activation(e->value); });
  }

  DataSpec& data = cfg.data;
  if (const Entry* e = doc.take("data.num_classes")) data.num_classes = parse_number<int>("data.num_classes", *e);
  read_size(doc, "data.dim", data.dim);
  read_size(doc, "data.per_class", data.per_class);
  read_real(doc, "data.spread", data.spread);
  read_real(doc, "data.test_fraction", data.test_fraction);
  with_key("data", 0, [&] { data.validate(); });
  run.model.input_dim = data.dim;
  run.model.num_classes = static_cast<std::size_t>(data.num_classes);

  auto check = [&](bool ok, const std::string& key, const std::string& msg) {
    if (!ok) throw ParseError(key, doc.line_of(key), msg);
  };
  check(run.n_clients >= 1, "n_clients", "must be >= 1");
  check(run.sample_size >= 1 && run.sample_size <= run.n_clients, "sample_size",
        fmt::format("must lie in [1, n_clients={}]", run.n_clients));
  check(run.rounds >= 1, "rounds", "must be >= 1");
  check(run.local_epochs >= 1, "local_epochs", "must be >= 1");
  check(run.batch_size >= 1, "batch_size", "must be >= 1");
  check(run.client_lr > 0.0, "client_lr", "must be > 0");
  check(run.eval_every >= 1, "eval_every", "must be >= 1");
  check(run.workers >= 1, "workers", "must be >= 1");
  check(run.model.kind != ModelKind::mlp || run.model.hidden_dim >= 1, "model.hidden_dim",
        "must be >= 1");
  return cfg;
}

std::vector<std::pair<std::string, Entry>> take_hparams(Document& doc) {
  std::vector<std::pair<std::string, Entry>> out;
  for (std::string_view key : kHparamKeys) {
    if (const Entry* e = doc.take(std::string(key))) out.emplace_back(std::string(key), *e);
  }
  return out;
}

void finalize(ExperimentConfig& cfg) {
  with_key("", 0, [&] { cfg.run.validate(); });
}

}  // namespace

// ---- config parsing -------------------------------------------------------

void DataSpec::validate() const {
  if (num_classes < 2) throw ConfigError("data.num_classes must be >= 2");
  if (dim < 1) throw ConfigError("data.dim must be >= 1");
  if (per_class < 2) throw ConfigError("data.per_class must be >= 2");
  if (!(spread >= 0.0)) throw ConfigError("data.spread must be >= 0");
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
    throw ConfigError("data.test_fraction must lie strictly between 0 and 1");
  }
}

ExperimentConfig parse_run_config(std::string_view text) {
  Document doc(text);
  if (doc.has_prefix("sweep.")) throw ParseError("sweep", 0, "document is a sweep spec");
  ExperimentConfig cfg = read_experiment(doc, true);
  for (const auto& [key, e] : take_hparams(doc)) {
    const double value = parse_real(key, e);
    with_key(key, e.line, [&] { cfg.run.hparams.set(cfg.run.method, key, value); });
  }
  doc.finish();
  finalize(cfg);
  return cfg;
}

SweepSpec parse_sweep_spec(std::string_view text) {
  Document doc(text);
  SweepSpec spec;
  const Entry* methods = doc.take("sweep.methods");
  if (methods == nullptr) {
    if (!doc.has("method")) throw ParseError("sweep.methods", 0, "missing required key");
  } else {
    for (const auto& name : split(methods->value, ',')) {
      const Method m = with_key("sweep.methods", methods->line, [&] { return parse_method(name); });
      if (std::find(spec.methods.begin(), spec.methods.end(), m) != spec.methods.end()) {
        throw ParseError("sweep.methods", methods->line, "duplicate method " + name);
      }
      spec.methods.push_back(m);
    }
    if (spec.methods.empty()) throw ParseError("sweep.methods", methods->line, "empty method list");
  }

  spec.base = read_experiment(doc, spec.methods.empty());
  if (spec.methods.empty()) spec.methods.push_back(spec.base.run.method);
  if (methods != nullptr && !doc.has("method")) spec.base.run.method = spec.methods.front();

  for (const auto& [key, e] : take_hparams(doc)) {
    const double value = parse_real(key, e);
    bool legal_somewhere = false;
    for (Method m : spec.methods) {
      const auto legal = legal_hparams(m);
      if (std::find(legal.begin(), legal.end(), key) == legal.end()) continue;
      legal_somewhere = true;
      HyperParams scratch;
      with_key(key, e.line, [&] { scratch.set(m, key, value); });
    }
    if (!legal_somewhere) throw ParseError(key, e.line, "illegal for every swept method");
    spec.fixed_hparams.emplace_back(key, value);
  }

  for (const auto& [key, e] : doc.take_prefix("sweep.grid.")) {
    const auto parts = split(std::string_view(key).substr(std::string_view("sweep.grid.").size()), '.');
    if (parts.size() != 2) throw ParseError(key, e.line, "expected sweep.grid.<method>.<hparam>");
    const Method m = with_key(key, e.line, [&] { return parse_method(parts[0]); });
    if (std::find(spec.methods.begin(), spec.methods.end(), m) == spec.methods.end()) {
      throw ParseError(key, e.line, "method is not in sweep.methods");
    }
    std::vector<double> values;
    for (const auto& v : split(e.value, ',')) {
      const double value = parse_real(key, Entry{v, e.line});
      HyperParams scratch;
      with_key(key, e.line, [&] { scratch.set(m, parts[1], value); });
      values.push_back(value);
    }
    auto it = std::find_if(spec.grid.begin(), spec.grid.end(),
                           [&](const auto& g) { return g.first == m; });
    if (it == spec.grid.end()) {
      spec.grid.emplace_back(m, std::vector<std::pair<std::string, std::vector<double>>>{});
      it = std::prev(spec.grid.end());
    }
    it->second.emplace_back(parts[1], std::move(values));
  }

  if (const Entry* e = doc.take("sweep.partitions")) {
    for (const auto& p : split(e->value, ',')) {
      spec.partitions.push_back(with_key("sweep.partitions", e->line, [&] { return PartitionSpec::parse(p); }));
    }
  } else {
    spec.partitions.push_back(spec.base.run.partition);
  }
  if (const Entry* e = doc.take("sweep.seeds")) {
    for (const auto& s : split(e->value, ',')) {
      spec.seeds.push_back(parse_number<std::uint64_t>("sweep.seeds", Entry{s, e->line}));
    }
  } else {
    spec.seeds.push_back(spec.base.run.seed);
  }
  doc.finish();
  finalize(spec.base);
  return spec;
}

std::variant<ExperimentConfig, SweepSpec> parse_config(std::string_view text) {
  if (Document(text).has_prefix("sweep.")) return parse_sweep_spec(text);
  return parse_run_config(text);
}

std::vector<SweepCell> SweepSpec::cells() const {
  std::vector<SweepCell> out;
  for (Method m : methods) {
    HyperParams base_hp;
    for (const auto& [key, value] : fixed_hparams) {
      const auto legal = legal_hparams(m);
      if (std::find(legal.begin(), legal.end(), key) != legal.end()) base_hp.set(m, key, value);
    }
    std::vector<HyperParams> combos{base_hp};
    const auto it = std::find_if(grid.begin(), grid.end(), [&](const auto& g) { return g.first == m; });
    if (it != grid.end()) {
      for (const auto& [key, values] : it->second) {
        std::vector<HyperParams> next;
        for (const auto& hp : combos) {
          for (double v : values) {
            HyperParams expanded = hp;
            expanded.set(m, key, v);
            next.push_back(std::move(expanded));
          }
        }
        combos = std::move(next);
      }
    }
    for (const auto& hp : combos) {
      for (const auto& p : partitions) out.push_back(SweepCell{m, hp, p});
    }
  }
  return out;
}

std::string format_config(const ExperimentConfig& cfg) {
  const RunConfig& r = cfg.run;
  std::string out;
  auto line = [&](std::string_view key, const auto& value) {
    fmt::format_to(std::back_inserter(out), "{} = {}\n", key, value);
  };
  line("method", to_string(r.method));
  line("n_clients", r.n_clients);
  line("sample_size", r.sample_size);
  line("rounds", r.rounds);
  line("local_epochs", r.local_epochs);
  line("batch_size", r.batch_size);
  line("client_lr", r.client_lr);
  line("seed", r.seed);
  line("eval_every", r.eval_every);
  line("workers", r.workers);
  line("weighted_aggregation", r.weighted_aggregation ? "true" : "false");
  line("partition", r.partition.to_string());
  for (std::string_view key : legal_hparams(r.method)) {
    if (r.hparams.explicit_keys.contains(std::string(key))) line(key, r.hparams.get(key));
  }
  for (const auto& [id, epochs] : r.epochs_override) {
    line(fmt::format("epochs_override.{}", id), epochs);
  }
  out += "\n[model]\n";
  line("kind", to_string(r.model.kind));
  line("hidden_dim", r.model.hidden_dim);
  line("activation", to_string(r.model.activation));
  out += "\n[data]\n";
  line("num_classes", cfg.data.num_classes);
  line("dim", cfg.data.dim);
  line("per_class", cfg.data.per_class);
  line("spread", cfg.data.spread);
  line("test_fraction", cfg.data.test_fraction);
  return out;
}

TrainTestSplit make_dataset(const DataSpec& data, std::uint64_t seed) {
  data.validate();
  Stream gen = derive_stream(seed, channel::kSetupRound, channel::kData);
  const LabeledDataset all = gen_blobs(data.num_classes, data.dim, data.per_class, data.spread, gen);
  Stream split = derive_stream(seed, channel::kSetupRound, channel::kSplit);
  return split_train_test(all, data.test_fraction, split);
}

// ---- metrics files --------------------------------------------------------

std::string_view to_string(RunStatus s) {
  switch (s) {
    case RunStatus::completed: return "completed";
    case RunStatus::diverged: return "diverged";
    case RunStatus::failed: return "failed";
  }
  return "?";
}

RunStatus parse_run_status(std::string_view text) {
  if (text == "completed") return RunStatus::completed;
  if (text == "diverged") return RunStatus::diverged;
  if (text == "failed") return RunStatus::failed;
  throw IoError("unknown run status '" + std::string(text) + "'");
}

std::string format_metrics_row(const RoundMetrics& m) {
  std::string sampled;
  for (std::size_t i = 0; i < m.sampled.size(); ++i) {
    fmt::format_to(std::back_inserter(sampled), "{}{}", i ? ";" : "", m.sampled[i]);
  }
  const std::string top1 = m.test_top1 ? fmt::format("{:.17g}", *m.test_top1) : std::string();
  return fmt::format("{},{},{:.17g},{},{:.6f},{},{:.17g}", m.round, sampled, m.mean_train_loss,
                     top1, m.wall_time_seconds, m.grad_evals, m.update_norm);
}

void write_metrics(std::ostream& out, const std::vector<RoundMetrics>& metrics) {
  out << kMetricsHeader << '\n';
  for (const auto& m : metrics) out << format_metrics_row(m) << '\n';
}

std::vector<RoundMetrics> read_metrics(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || trim(line) != kMetricsHeader) {
    throw IoError("metrics: missing or wrong header");
  }
  std::vector<RoundMetrics> out;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto fields = split(line, ',');
    if (fields.size() != 7) {
      throw IoError(fmt::format("metrics line {}: expected 7 fields, got {}", line_no, fields.size()));
    }
    try {
      RoundMetrics m;
      m.round = std::stoul(fields[0]);
      if (!fields[1].empty()) {
        for (const auto& id : split(fields[1], ';')) m.sampled.push_back(std::stoul(id));
      }
      m.mean_train_loss = std::stod(fields[2]);
      if (!fields[3].empty()) m.test_top1 = std::stod(fields[3]);
      m.wall_time_seconds = std::stod(fields[4]);
      m.grad_evals = std::stoull(fields[5]);
      m.update_norm = std::stod(fields[6]);
      out.push_back(std::move(m));
    } catch (const std::logic_error&) {
      throw IoError(fmt::format("metrics line {}: malformed value", line_no));
    }
  }
  return out;
}

std::vector<RoundMetrics> read_metrics_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return read_metrics(in);
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

std::pair<double, long> best_accuracy(const std::vector<RoundMetrics>& series) {
  std::optional<double> best;
  long round = -1;
  for (const auto& m : series) {
    if (m.test_top1 && (!best || *m.test_top1 > *best)) {
      best = m.test_top1;
      round = static_cast<long>(m.round);
    }
  }
  if (!best) throw std::invalid_argument("metrics series has no evaluated round");
  return {*best, round};
}

namespace {

using Meta = std::map<std::string, std::string>;

void write_meta(const fs::path& path, const SummaryRow& row) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "method=" << row.method << '\n'
      << "hparams=" << row.hparams << '\n'
      << "partition=" << row.partition << '\n'
      << "seed=" << row.seed << '\n'
      << "status=" << to_string(row.status) << '\n'
      << "failure_round=" << (row.failure_round ? std::to_string(*row.failure_round) : "") << '\n'
      << "message=" << row.message << '\n';
}

Meta read_meta(const fs::path& path) {
  Meta meta;
  std::ifstream in(path);
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq != std::string::npos) meta[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return meta;
}

std::string optional_round(const std::optional<std::size_t>& r) {
  return r ? std::to_string(*r) : std::string();
}

void fill_from_metrics(SummaryRow& row, const std::vector<RoundMetrics>& metrics) {
  if (metrics.empty()) {
    row.best_top1 = 0.0;
    row.best_round = -1;
    return;
  }
  double wall = 0.0, evals = 0.0;
  for (const auto& m : metrics) {
    wall += m.wall_time_seconds;
    evals += static_cast<double>(m.grad_evals);
  }
  row.mean_time_per_round = wall / static_cast<double>(metrics.size());
  row.grad_evals_per_round = evals / static_cast<double>(metrics.size());
  try {
    std::tie(row.best_top1, row.best_round) = best_accuracy(metrics);
  } catch (const std::invalid_argument&) {
    if (row.status == RunStatus::completed) throw;
    row.best_top1 = 0.0;
    row.best_round = -1;
  }
}

std::string run_id_for(const fs::path& root, const fs::path& run_dir) {
  const std::string id = fs::relative(run_dir, root).generic_string();
  return id.empty() ? "." : id;
}

std::vector<fs::path> find_metrics_files(const fs::path& dir) {
  std::vector<fs::path> files;
  if (!fs::is_directory(dir)) throw IoError(dir.string() + " is not a directory");
  for (const auto& entry : fs::recursive_directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().filename() == kMetricsFile) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  return files;
}

std::string sanitize(std::string_view text) {
  std::string out;
  for (char c : text) {
    const bool keep = std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '=' || c == '-' || c == '_';
    out += keep ? c : '_';
  }
  return out;
}

}  // namespace

SummaryRow run_experiment(const ExperimentConfig& cfg, const fs::path& out_dir) {
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());

  {
    std::ofstream config(out_dir / kConfigFile);
    if (!config) throw IoError("cannot write " + (out_dir / kConfigFile).string());
    config << format_config(cfg);
  }

  SummaryRow row;
  row.run_id = ".";
  row.method = std::string(to_string(cfg.run.method));
  row.hparams = cfg.run.hparams.label(cfg.run.method);
  row.partition = cfg.run.partition.to_string();
  row.seed = cfg.run.seed;

  const TrainTestSplit split = make_dataset(cfg.data, cfg.run.seed);
  RunConfig run = cfg.run;
  run.model.input_dim = cfg.data.dim;
  run.model.num_classes = static_cast<std::size_t>(cfg.data.num_classes);

  std::ofstream metrics_out(out_dir / kMetricsFile);
  if (!metrics_out) throw IoError("cannot write " + (out_dir / kMetricsFile).string());
  metrics_out << kMetricsHeader << '\n';
  const auto observer = [&](const RoundMetrics& m) {
    metrics_out << format_metrics_row(m) << '\n';
    metrics_out.flush();
  };

  std::vector<RoundMetrics> metrics;
  try {
    metrics = run_training(run, split.train, split.test, observer).metrics;
  } catch (const DivergenceError& e) {
    row.status = RunStatus::diverged;
    row.failure_round = e.round();
    row.message = e.what();
    metrics = e.completed();
  }
  metrics_out.close();
  if (!metrics_out) throw IoError("failed writing " + (out_dir / kMetricsFile).string());
  fill_from_metrics(row, metrics);

  write_meta(out_dir / kMetaFile, row);
  std::ofstream summary(out_dir / kSummaryFile);
  if (!summary) throw IoError("cannot write " + (out_dir / kSummaryFile).string());
  write_summary_table(summary, {row});
  return row;
}

std::string SweepRow::status() const {
  if (failed_seeds > 0) return "failed";
  if (diverged_seeds > 0) return "diverged";
  return "completed";
}

std::vector<SweepRow> run_sweep(const SweepSpec& spec, const fs::path& out_dir, std::size_t workers) {
  if (workers < 1) throw ConfigError("workers must be >= 1");
  if (spec.seeds.empty()) throw ConfigError("sweep needs at least one seed");
  const auto cells = spec.cells();

  struct Job {
    std::size_t cell;
    std::uint64_t seed;
    fs::path dir;
  };
  std::vector<Job> jobs;
  for (std::size_t c = 0; c < cells.size(); ++c) {
    const auto& cell = cells[c];
    const std::string name = sanitize(fmt::format("{}_{}_{}", to_string(cell.method),
                                                  cell.hparam_label(), cell.partition.to_string()));
    for (std::uint64_t seed : spec.seeds) {
      jobs.push_back(Job{c, seed, out_dir / "runs" / name / fmt::format("seed{}", seed)});
    }
  }

  std::vector<SummaryRow> results(jobs.size());
  detail::parallel_for(jobs.size(), workers, [&](std::size_t j) {
    const Job& job = jobs[j];
    const SweepCell& cell = cells[job.cell];
    ExperimentConfig cfg = spec.base;
    cfg.run.method = cell.method;
    cfg.run.hparams = cell.hparams;
    cfg.run.partition = cell.partition;
    cfg.run.seed = job.seed;
    cfg.run.workers = 1;
    try {
      results[j] = run_experiment(cfg, job.dir);
    } catch (const std::exception& e) {
      SummaryRow failed;
      failed.method = std::string(to_string(cell.method));
      failed.hparams = cell.hparam_label();
      failed.partition = cell.partition.to_string();
      failed.seed = job.seed;
      failed.status = RunStatus::failed;
      failed.message = e.what();
      results[j] = std::move(failed);
    }
  });

  std::vector<SweepRow> rows(cells.size());
  std::vector<std::size_t> counted(cells.size(), 0);
  for (std::size_t j = 0; j < jobs.size(); ++j) {
    const auto& cell = cells[jobs[j].cell];
    SweepRow& row = rows[jobs[j].cell];
    row.method = std::string(to_string(cell.method));
    row.hparams = cell.hparam_label();
    row.partition = cell.partition.to_string();
    ++row.seeds;
    const SummaryRow& r = results[j];
    if (r.status == RunStatus::failed) {
      ++row.failed_seeds;
      continue;
    }
    if (r.status == RunStatus::diverged) ++row.diverged_seeds;
    ++counted[jobs[j].cell];
    row.mean_best_top1 += r.best_top1;
    row.mean_best_round += static_cast<double>(r.best_round);
    row.mean_time_per_round += r.mean_time_per_round;
    row.grad_evals_per_round += r.grad_evals_per_round;
  }
  for (std::size_t c = 0; c < rows.size(); ++c) {
    if (counted[c] == 0) continue;
    const auto n = static_cast<double>(counted[c]);
    rows[c].mean_best_top1 /= n;
    rows[c].mean_best_round /= n;
    rows[c].mean_time_per_round /= n;
    rows[c].grad_evals_per_round /= n;
  }

  // method order, then hyperparameter values descending, then partition order
  std::vector<std::size_t> order(cells.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  auto hparam_values = [&](const SweepCell& cell) {
    std::vector<double> values;
    for (std::string_view key : legal_hparams(cell.method)) {
      if (cell.hparams.explicit_keys.contains(std::string(key))) values.push_back(cell.hparams.get(key));
    }
    return values;
  };
  auto partition_rank = [&](const PartitionSpec& p) {
    return std::find(spec.partitions.begin(), spec.partitions.end(), p) - spec.partitions.begin();
  };
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto& ca = cells[a];
    const auto& cb = cells[b];
    if (ca.method != cb.method) return ca.method < cb.method;
    const auto va = hparam_values(ca);
    const auto vb = hparam_values(cb);
    if (va != vb) return va > vb;
    return partition_rank(ca.partition) < partition_rank(cb.partition);
  });
  std::vector<SweepRow> sorted;
  sorted.reserve(rows.size());
  for (std::size_t i : order) sorted.push_back(rows[i]);

  std::error_code ec;
  fs::create_directories(out_dir, ec);
  std::ofstream table(out_dir / kSweepFile);
  if (!table) throw IoError("cannot write " + (out_dir / kSweepFile).string());
  write_sweep_table(table, sorted);
  return sorted;
}

void write_sweep_table(std::ostream& out, const std::vector<SweepRow>& rows) {
  out << kSweepHeader << '\n';
  for (const auto& r : rows) {
    out << fmt::format("{},{},{},{},{:.17g},{:.17g},{:.6f},{:.17g},{},{},{}\n", r.method, r.hparams,
                       r.partition, r.seeds, r.mean_best_top1, r.mean_best_round,
                       r.mean_time_per_round, r.grad_evals_per_round, r.diverged_seeds,
                       r.failed_seeds, r.status());
  }
}

void write_summary_table(std::ostream& out, const std::vector<SummaryRow>& rows) {
  out << kSummaryHeader << '\n';
  for (const auto& r : rows) {
    out << fmt::format("{},{},{},{},{},{:.17g},{},{:.6f},{:.17g},{},{}\n", r.run_id, r.method,
                       r.hparams, r.partition, r.seed, r.best_top1, r.best_round,
                       r.mean_time_per_round, r.grad_evals_per_round, to_string(r.status),
                       optional_round(r.failure_round));
  }
}

SummaryReport summarize(const fs::path& dir) {
  SummaryReport report;
  for (const auto& file : find_metrics_files(dir)) {
    const fs::path run_dir = file.parent_path();
    try {
      SummaryRow row;
      row.run_id = run_id_for(dir, run_dir);
      if (fs::exists(run_dir / kMetaFile)) {
        Meta meta = read_meta(run_dir / kMetaFile);
        row.method = meta["method"];
        row.hparams = meta["hparams"].empty() ? "-" : meta["hparams"];
        row.partition = meta["partition"];
        if (!meta["seed"].empty()) row.seed = std::stoull(meta["seed"]);
        if (!meta["status"].empty()) row.status = parse_run_status(meta["status"]);
        if (!meta["failure_round"].empty()) row.failure_round = std::stoul(meta["failure_round"]);
        row.message = meta["message"];
      }
      const auto metrics = read_metrics_file(file);
      if (metrics.empty() && row.status == RunStatus::completed) {
        throw IoError("empty metrics series");
      }
      fill_from_metrics(row, metrics);
      report.rows.push_back(std::move(row));
    } catch (const std::exception& e) {
      report.errors.push_back(file.string() + ": " + e.what());
    }
  }
  return report;
}

CurveReport export_curves(const fs::path& dir, std::optional<std::size_t> last) {
  CurveReport report;
  for (const auto& file : find_metrics_files(dir)) {
    try {
      const auto metrics = read_metrics_file(file);
      if (metrics.empty()) throw IoError("empty metrics series");
      const std::string run_id = run_id_for(dir, file.parent_path());
      std::size_t final_round = 0;
      for (const auto& m : metrics) final_round = std::max(final_round, m.round);
      for (const auto& m : metrics) {
        if (!m.test_top1) continue;
        if (last && m.round + *last <= final_round) continue;
        report.points.push_back(CurvePoint{run_id, m.round, *m.test_top1});
      }
    } catch (const std::exception& e) {
      report.errors.push_back(file.string() + ": " + e.what());
    }
  }
  std::stable_sort(report.points.begin(), report.points.end(), [](const auto& a, const auto& b) {
    return std::tie(a.run_id, a.round) < std::tie(b.run_id, b.round);
  });
  return report;
}

void write_curves(std::ostream& out, const std::vector<CurvePoint>& points) {
  out << "run_id,round,top1\n";
  for (const auto& p : points) out << fmt::format("{},{},{:.17g}\n", p.run_id, p.round, p.top1);
}

}  // namespace flsim
