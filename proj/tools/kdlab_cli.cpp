// kdlab: run, sweep and compare distillation experiments; emit report CSVs.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>

#include "kdlab/experiment.hpp"

namespace fs = std::filesystem;
using namespace kdlab;

namespace {

void write_table(const fs::path& path, const csv::Table& table) {
  fs::create_directories(path.parent_path());
  csv::write_file(path, table);
  std::cout << csv::emit(table);
  std::cerr << "wrote " << path.string() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Knowledge-distillation lab: sample weighting and prime-aware distillation"};
  app.require_subcommand(1);
  std::string output_root;
  app.add_option("--output-root", output_root, "Artifact root (default: $KDLAB_OUTPUT_ROOT or ./kdlab-out)");

  std::string run_config;
  auto* run = app.add_subcommand("run", "Train teacher (cached) and student for one config");
  run->add_option("config", run_config, "Config file")->required()->check(CLI::ExistingFile);

  std::string sweep_config;
  std::vector<std::string> grid_axes;
  auto* sweep = app.add_subcommand("sweep", "Cartesian-product sweep with per-seed equal-weighting baselines");
  sweep->add_option("config", sweep_config, "Base config file")->required()->check(CLI::ExistingFile);
  sweep->add_option("--grid", grid_axes, "key=v1,v2,... (repeatable)")->required();

  std::vector<std::string> compare_configs;
  Index seeds = 5;
  auto* compare = app.add_subcommand("compare", "Per-seed and median metrics of several schemes");
  compare->add_option("configs", compare_configs, "Config files sharing one protocol")
      ->required()
      ->check(CLI::ExistingFile);
  compare->add_option("--seeds", seeds, "Seeds 1..n")->check(CLI::PositiveNumber);

  auto* report = app.add_subcommand("report", "Analysis artifacts of finished runs");
  report->require_subcommand(1);
  std::string run_dir;
  Index bins = 10;
  auto* gap = report->add_subcommand("variance-gap", "sigma^2 bins vs. gap of a PAD run");
  gap->add_option("run-dir", run_dir, "Run directory")->required()->check(CLI::ExistingDirectory);
  gap->add_option("--bins", bins, "Number of equal-width sigma^2 bins")->check(CLI::Range(2, 1000));

  CLI11_PARSE(app, argc, argv);
  const fs::path root = output_root.empty() ? default_output_root() : fs::path(output_root);

  try {
    if (*run) {
      const ExperimentConfig cfg = ExperimentConfig::load(run_config);
      const RunManifest m = run_experiment(cfg, root, run_config);
      std::cout << m.to_text();
      std::cerr << (m.reused ? "reused " : "wrote ") << m.output_dir.string() << "\n";
    } else if (*sweep) {
      const ExperimentConfig cfg = ExperimentConfig::load(sweep_config);
      std::vector<std::pair<std::string, std::vector<std::string>>> grid;
      std::string tag = cfg.hash();
      for (const auto& axis : grid_axes) {
        grid.push_back(parse_grid_axis(axis));
        tag += axis;
      }
      const SweepResult result = run_sweep(cfg, grid, root);
      write_table(root / "sweeps" / ("sweep-" + fnv1a_hex(tag) + ".csv"), result.to_csv());
    } else if (*compare) {
      std::vector<std::pair<std::string, ExperimentConfig>> configs;
      std::string tag = std::to_string(seeds);
      for (const auto& path : compare_configs) {
        configs.emplace_back(fs::path(path).stem().string(), ExperimentConfig::load(path));
        tag += configs.back().second.hash();
      }
      const ComparisonResult result = compare_schemes(configs, seeds, root);
      write_table(root / "comparisons" / ("compare-" + fnv1a_hex(tag) + ".csv"), result.to_csv());
    } else if (*gap) {
      const VarianceGapReport r = run_variance_gap(run_dir, bins);
      std::cout << csv::emit(variance_gap_csv(r));
      std::cerr << "samples " << r.samples << ", spearman " << r.spearman << "\n";
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
