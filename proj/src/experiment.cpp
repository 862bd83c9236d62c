#include "kdlab/experiment.hpp"

#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "kdlab/checkpoint.hpp"
#include "kdlab/stats.hpp"

namespace kdlab {

namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

Network load_or_train_teacher(const ExperimentConfig& config, const Dataset& dataset, const fs::path& root) {
  const fs::path dir = root / "teachers";
  const fs::path path = dir / ("teacher-" + config.teacher_hash() + ".ckpt");
  if (fs::exists(path)) {
    std::mt19937_64 rng(0);
    Network net = build_network(config.teacher.net, dataset, rng);
    net.load_state(load_checkpoint(path));
    return net;
  }
  TeacherResult result = train_teacher(config, dataset);
  fs::create_directories(dir);
  const fs::path tmp = path.string() + ".tmp";
  save_checkpoint(tmp, result.model.state());
  fs::rename(tmp, path);
  return std::move(result.model);
}

ExperimentConfig matching_pad_config(const ExperimentConfig& config) {
  ExperimentConfig pad = config;
  pad.pad.enabled = true;
  pad.weighting = WeightingConfig{};
  pad.name = config.name + "-pad";
  return pad;
}

std::map<SampleId, Scalar> final_gaps_from_csv(const csv::Table& table) {
  const auto epoch_col = table.column("epoch");
  const auto id_col = table.column("sample_id");
  const auto gap_col = table.column("gap");
  long last = -1;
  for (const auto& row : table.rows) last = std::max(last, std::stol(row.at(epoch_col)));
  std::map<SampleId, Scalar> gaps;
  for (const auto& row : table.rows) {
    if (std::stol(row.at(epoch_col)) != last) continue;
    gaps[std::stoll(row.at(id_col))] = csv::parse_number(row.at(gap_col));
  }
  return gaps;
}

csv::Table variance_gap_summary_csv(const VarianceGapReport& report) {
  return csv::Table{{"samples", "spearman"}, {{std::to_string(report.samples), csv::format_number(report.spearman)}}};
}

}  // namespace

fs::path default_output_root() {
  if (const char* env = std::getenv("KDLAB_OUTPUT_ROOT"); env != nullptr && *env != '\0') return fs::path(env);
  return fs::path("kdlab-out");
}

std::string RunManifest::to_text() const {
  std::string out;
  out += "config_path " + config_path + "\n";
  out += "config_hash " + config_hash + "\n";
  out += "output_dir " + output_dir.filename().string() + "\n";
  out += "metric " + metric_name + " " + csv::format_number(final_metric) + "\n";
  for (const auto& [name, hash] : artifacts) out += "artifact " + name + " " + hash + "\n";
  return out;
}

RunManifest RunManifest::parse(std::string_view text, const fs::path& output_dir) {
  RunManifest m;
  m.output_dir = output_dir;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag == "config_path") {
      std::getline(ls >> std::ws, m.config_path);
    } else if (tag == "config_hash") {
      ls >> m.config_hash;
    } else if (tag == "metric") {
      std::string value;
      ls >> m.metric_name >> value;
      m.final_metric = csv::parse_number(value);
    } else if (tag == "artifact") {
      std::string name, hash;
      ls >> name >> hash;
      m.artifacts.emplace_back(name, hash);
    } else if (!tag.empty() && tag != "output_dir") {
      throw FormatError("manifest: unknown line '" + line + "'");
    }
  }
  return m;
}

RunManifest run_experiment(const ExperimentConfig& config, const fs::path& root, const std::string& config_path) {
  config.validate();
  const std::string hash = config.hash();
  const fs::path dir = root / ("run-" + hash);
  if (fs::exists(dir / "manifest.txt")) {
    RunManifest m = RunManifest::parse(slurp(dir / "manifest.txt"), dir);
    m.reused = true;
    return m;
  }

  // Work happens in a scratch directory renamed into place once complete.
  const fs::path work = root / ("run-" + hash + ".partial");
  fs::remove_all(work);
  fs::create_directories(work);
  RunManifest manifest;
  manifest.config_path = config_path;
  manifest.config_hash = hash;
  manifest.output_dir = dir;
  write_text(work / "config.txt", config.canonical_text());
  write_text(work / "manifest.txt", "config_hash " + hash + "\n");

  const Dataset dataset = make_dataset(config);
  const Network teacher = load_or_train_teacher(config, dataset, root);

  std::shared_ptr<const VarianceTable> frozen;
  if (!config.pad.enabled && config.scheme_kind() == WeightingScheme::Kind::frozen_pad &&
      config.weighting.variance_table == "from_pad") {
    const RunManifest pad_run = run_experiment(matching_pad_config(config), root);
    frozen = std::make_shared<VarianceTable>(csv::read_variance_table(pad_run.output_dir / "variance_table.csv"));
  }

  DistillResult result = distill_student(config, dataset, teacher, frozen);
  const TrainReport& report = result.report;
  manifest.metric_name = report.final_metric_name;
  manifest.final_metric = report.final_metric;

  std::vector<std::pair<std::string, std::string>> files;
  files.emplace_back("config.txt", config.canonical_text());
  files.emplace_back("student.ckpt", encode_checkpoint(result.student.state()));
  files.emplace_back("report.csv", csv::emit(report.metrics_csv()));
  files.emplace_back("sample_gaps.csv", csv::emit(report.gaps_csv()));
  if (report.variances) {
    files.emplace_back("variance_table.csv", csv::emit(csv::variance_table_to_csv(*report.variances)));
    const VarianceGapReport gap_report = variance_gap_report(*report.variances, report.final_gaps(), 10);
    files.emplace_back("variance_gap.csv", csv::emit(variance_gap_csv(gap_report)));
    files.emplace_back("variance_gap_summary.csv", csv::emit(variance_gap_summary_csv(gap_report)));
  }
  for (const auto& [name, bytes] : files) {
    write_text(work / name, bytes);
    manifest.artifacts.emplace_back(name, fnv1a_hex(bytes));
  }
  write_text(work / "manifest.txt", manifest.to_text());
  fs::rename(work, dir);
  return manifest;
}

// ---------------------------------------------------------------------------

csv::Table SweepResult::to_csv() const {
  csv::Table t;
  t.header = param_names;
  for (const char* col : {"seed", "baseline", "metric_name", "value", "better_than_baseline", "run"}) t.header.push_back(col);
  for (const SweepRow& r : rows) {
    std::vector<std::string> row;
    for (const auto& name : param_names) {
      const auto it = r.params.find(name);
      row.push_back(it == r.params.end() ? "" : it->second);
    }
    row.push_back(std::to_string(r.seed));
    row.push_back(r.baseline ? "true" : "false");
    row.push_back(metric_name);
    row.push_back(csv::format_number(r.metric));
    row.push_back(r.better_than_baseline ? "true" : "false");
    row.push_back(r.run_dir);
    t.rows.push_back(std::move(row));
  }
  return t;
}

std::pair<std::string, std::vector<std::string>> parse_grid_axis(std::string_view text) {
  const auto eq = text.find('=');
  if (eq == std::string_view::npos || eq == 0) throw ConfigError("grid axis must read key=v1,v2,...");
  std::string key(text.substr(0, eq));
  std::vector<std::string> values;
  std::string_view rest = text.substr(eq + 1);
  while (!rest.empty()) {
    const auto comma = rest.find(',');
    const std::string_view v = rest.substr(0, comma);
    if (!v.empty()) values.emplace_back(v);
    if (comma == std::string_view::npos) break;
    rest.remove_prefix(comma + 1);
  }
  if (values.empty()) throw ConfigError("grid axis '" + key + "' has no values");
  return {std::move(key), std::move(values)};
}

SweepResult run_sweep(const ExperimentConfig& base,
                      const std::vector<std::pair<std::string, std::vector<std::string>>>& grid,
                      const fs::path& root) {
  if (grid.empty()) throw ConfigError("sweep: empty grid");
  SweepResult result;
  for (const auto& [key, values] : grid) {
    if (values.empty()) throw ConfigError("sweep: grid axis '" + key + "' is empty");
    base.get(key);  // rejects keys outside the schema
    result.param_names.push_back(key);
  }

  std::vector<std::size_t> index(grid.size(), 0);
  std::vector<SweepRow> runs;
  std::set<std::uint64_t> seeds;
  while (true) {
    ExperimentConfig cfg = base;
    SweepRow row;
    for (std::size_t a = 0; a < grid.size(); ++a) {
      cfg.set(grid[a].first, grid[a].second[index[a]]);
      row.params[grid[a].first] = grid[a].second[index[a]];
    }
    cfg.validate();
    const RunManifest m = run_experiment(cfg, root);
    result.metric_name = m.metric_name;
    row.seed = cfg.seed;
    row.metric = m.final_metric;
    row.run_dir = m.output_dir.filename().string();
    seeds.insert(cfg.seed);
    runs.push_back(std::move(row));

    // Odometer increment, last axis fastest.
    std::size_t a = grid.size();
    while (a > 0 && ++index[a - 1] == grid[a - 1].second.size()) {
      index[a - 1] = 0;
      --a;
    }
    if (a == 0) break;
  }

  std::map<std::uint64_t, Scalar> baseline;
  for (std::uint64_t seed : seeds) {
    ExperimentConfig cfg = base;
    cfg.seed = seed;
    cfg.pad.enabled = false;
    cfg.weighting.scheme = "equal";
    cfg.distill.warmup_epochs = 0;
    const RunManifest m = run_experiment(cfg, root);
    baseline[seed] = m.final_metric;
    SweepRow row;
    row.seed = seed;
    row.baseline = true;
    row.metric = m.final_metric;
    row.run_dir = m.output_dir.filename().string();
    result.rows.push_back(std::move(row));
  }
  for (SweepRow& r : runs) {
    r.better_than_baseline = r.metric > baseline.at(r.seed);
    result.rows.push_back(std::move(r));
  }
  std::stable_partition(result.rows.begin(), result.rows.end(), [](const SweepRow& r) { return !r.baseline; });
  return result;
}

// ---------------------------------------------------------------------------

bool is_protocol_free_key(std::string_view key) {
  return key.starts_with("weighting.") || key.starts_with("pad.") || key == "distill.warmup_epochs" ||
         key == "seed" || key == "name";
}

csv::Table ComparisonResult::to_csv() const {
  csv::Table t{{"label", "scheme", "seed", "metric_name", "value"}, {}};
  for (const ComparisonRow& r : rows) {
    for (std::size_t i = 0; i < r.seeds.size(); ++i) {
      t.rows.push_back({r.label, r.scheme, std::to_string(r.seeds[i]), metric_name, csv::format_number(r.metrics[i])});
    }
    t.rows.push_back({r.label, r.scheme, "median", metric_name, csv::format_number(r.median)});
  }
  return t;
}

ComparisonResult compare_schemes(const std::vector<std::pair<std::string, ExperimentConfig>>& configs, Index seeds,
                                 const fs::path& root) {
  if (configs.empty()) throw ConfigError("compare: no configs");
  if (seeds < 1) throw ConfigError("compare: need at least one seed");
  const auto& [first_label, first] = configs.front();
  for (const auto& [label, cfg] : configs) {
    for (const std::string& key : ExperimentConfig::keys()) {
      if (is_protocol_free_key(key)) continue;
      if (cfg.get(key) != first.get(key)) {
        throw ConfigError("compare: protocol mismatch on '" + key + "' between " + first_label + " (" +
                          first.get(key) + ") and " + label + " (" + cfg.get(key) + ")");
      }
    }
  }
  ComparisonResult result;
  for (const auto& [label, cfg] : configs) {
    ComparisonRow row;
    row.label = label;
    row.scheme = cfg.pad.enabled ? "pad" : cfg.scheme_name();
    if (cfg.distill.warmup_epochs > 0) row.scheme += "+warmup";
    for (Index s = 1; s <= seeds; ++s) {
      ExperimentConfig run = cfg;
      run.seed = static_cast<std::uint64_t>(s);
      const RunManifest m = run_experiment(run, root);
      result.metric_name = m.metric_name;
      row.seeds.push_back(run.seed);
      row.metrics.push_back(m.final_metric);
    }
    row.median = stats::median(row.metrics);
    result.rows.push_back(std::move(row));
  }
  return result;
}

// ---------------------------------------------------------------------------

VarianceGapReport run_variance_gap(const fs::path& run_dir, Index bins) {
  const fs::path table = run_dir / "variance_table.csv";
  if (!fs::exists(table)) throw std::runtime_error(run_dir.string() + " holds no variance table (not a PAD run)");
  const VarianceTable variances = csv::read_variance_table(table);
  const auto gaps = final_gaps_from_csv(csv::read_file(run_dir / "sample_gaps.csv"));
  return variance_gap_report(variances, gaps, bins);
}

csv::Table variance_gap_csv(const VarianceGapReport& report) {
  csv::Table t{{"bin", "sigma_sq_low", "sigma_sq_high", "count", "proportion", "mean_gap", "mean_effect"}, {}};
  for (std::size_t b = 0; b < report.bins.size(); ++b) {
    const VarianceGapBin& bin = report.bins[b];
    t.rows.push_back({std::to_string(b), csv::format_number(bin.low), csv::format_number(bin.high),
                      std::to_string(bin.count), csv::format_number(bin.proportion), csv::format_number(bin.mean_gap),
                      csv::format_number(bin.mean_effect)});
  }
  return t;
}

}  // namespace kdlab
