#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "kdlab/config.hpp"
#include "kdlab/csv.hpp"
#include "kdlab/pad.hpp"
#include "kdlab/train.hpp"

namespace kdlab {

/// Output root from KDLAB_OUTPUT_ROOT, else ./kdlab-out.
std::filesystem::path default_output_root();

struct RunManifest {
  std::string config_path;
  std::string config_hash;
  std::filesystem::path output_dir;
  std::string metric_name;
  Scalar final_metric = 0.0;
  /// Artifact file names relative to output_dir, with their FNV-1a hashes.
  std::vector<std::pair<std::string, std::string>> artifacts;
  /// Loaded from an earlier identical run instead of training.
  bool reused = false;

  std::string to_text() const;
  static RunManifest parse(std::string_view text, const std::filesystem::path& output_dir);
};

/// Trains (or loads the cached) teacher and the student of `config` and
/// writes every artifact to <root>/run-<hash>/. An existing complete run
/// directory with the same hash is reused, never overwritten.
RunManifest run_experiment(const ExperimentConfig& config, const std::filesystem::path& root,
                           const std::string& config_path = "");

struct SweepRow {
  std::map<std::string, std::string> params;
  std::uint64_t seed = 0;
  bool baseline = false;
  Scalar metric = 0.0;
  bool better_than_baseline = false;
  std::string run_dir;
};

struct SweepResult {
  std::vector<std::string> param_names;
  std::string metric_name;
  std::vector<SweepRow> rows;

  csv::Table to_csv() const;
};

/// `name=v1,v2,...` into an ordered grid axis.
std::pair<std::string, std::vector<std::string>> parse_grid_axis(std::string_view text);

/// Cartesian product of the grid over `base`; every distinct seed also gets
/// an equal-weighting baseline run (PAD off).
SweepResult run_sweep(const ExperimentConfig& base,
                      const std::vector<std::pair<std::string, std::vector<std::string>>>& grid,
                      const std::filesystem::path& root);

struct ComparisonRow {
  std::string label;
  std::string scheme;
  std::vector<std::uint64_t> seeds;
  std::vector<Scalar> metrics;
  Scalar median = 0.0;
};

struct ComparisonResult {
  std::string metric_name;
  std::vector<ComparisonRow> rows;

  /// Long form: label,scheme,seed,metric with a `median` seed row per label.
  csv::Table to_csv() const;
};

/// Keys ignored when checking that compared configs share a protocol.
bool is_protocol_free_key(std::string_view key);

/// Runs every config for seeds 1..seeds. Configs must agree on every key
/// outside weighting.*, pad.*, distill.warmup_epochs, seed and name.
ComparisonResult compare_schemes(const std::vector<std::pair<std::string, ExperimentConfig>>& configs, Index seeds,
                                 const std::filesystem::path& root);

/// Reads sample_gaps.csv and variance_table.csv from a run directory.
VarianceGapReport run_variance_gap(const std::filesystem::path& run_dir, Index bins);
csv::Table variance_gap_csv(const VarianceGapReport& report);

}  // namespace kdlab
