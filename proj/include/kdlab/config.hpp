#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "kdlab/data.hpp"
#include "kdlab/losses.hpp"
#include "kdlab/pad.hpp"
#include "kdlab/weighting.hpp"

namespace kdlab {

enum class Task { classification, metric };

std::string_view to_string(Task task);
Task parse_task(std::string_view name);

struct DatasetConfig {
  DatasetKind kind = DatasetKind::synthetic_blobs;
  Index classes = 4;
  Index dim = 4;
  Index train_per_class = 250;
  Index test_per_class = 500;
  Scalar spread = 1.0;
  Scalar center_range = 4.0;
  Scalar label_noise = 0.1;
  Scalar spiral_noise = 0.1;
  Scalar spiral_turns = 1.5;
  std::string train_images, train_labels, test_images, test_labels;
  Index limit = 0;
  std::uint64_t seed = 1;
};

struct NetConfig {
  std::string arch = "mlp";  // mlp | convnet
  Index width = 64;          // mlp hidden width, convnet base channels
  Index depth = 4;
  Index embedding_dim = 32;
};

struct TeacherConfig {
  NetConfig net{"mlp", 256, 4, 32};
  Index epochs = 30;
  Scalar lr = 0.01;
  std::uint64_t seed = 7;
};

struct DistillConfig {
  TargetKind target = TargetKind::embedding;
  std::string tap = "block2";  // feature_map and attention_map
  Scalar lambda = 1.0;
  Index warmup_epochs = 0;
  Scalar temperature = 4.0;  // logits (HKD)
};

struct WeightingConfig {
  /// Unset means "equal" when PAD is off.
  std::optional<std::string> scheme;
  Scalar temperature = 1.0;
  Scalar alpha = 1.0;
  Index discard = 0;
  /// CSV path, or "from_pad" for the table of the matching PAD run.
  std::string variance_table;
};

struct PadConfig {
  bool enabled = false;
  VarianceMode variance_mode = VarianceMode::per_dimension;
  Scalar head_weight_std = 0.01;
  Scalar head_gamma_init = 0.1;
};

struct OptimConfig {
  Scalar lr = 0.01;
  Scalar momentum = 0.9;
  Scalar weight_decay = 0.0;
};

struct TrainConfig {
  Index epochs = 50;
  Index batch_size = 64;
  /// Per-sample gaps are logged every this many epochs and after the last.
  Index gap_log_every = 10;
};

/// Everything one run depends on. Text form: `key = value` lines, `#`
/// comments, dotted section names; unknown keys are rejected.
struct ExperimentConfig {
  std::string name = "experiment";
  std::uint64_t seed = 1;
  Task task = Task::classification;
  DatasetConfig dataset;
  TeacherConfig teacher;
  NetConfig student;
  DistillConfig distill;
  WeightingConfig weighting;
  PadConfig pad;
  OptimConfig optim;
  TrainConfig train;

  /// Resolved scheme name: "none" with PAD on, "equal" when unset.
  std::string scheme_name() const;
  WeightingScheme::Kind scheme_kind() const;

  static ExperimentConfig parse(std::string_view text, const std::filesystem::path& base_dir = {});
  static ExperimentConfig load(const std::filesystem::path& path);

  void set(std::string_view key, std::string_view value);
  std::string get(std::string_view key) const;
  static const std::vector<std::string>& keys();

  /// Throws ConfigError naming the violated rule.
  void validate() const;

  /// Every key in schema order, `name` included.
  std::string canonical_text() const;
  /// FNV-1a 64 of the canonical text without `name`, as 16 hex digits.
  std::string hash() const;
  /// Hash of the keys the teacher depends on.
  std::string teacher_hash() const;
};

std::string fnv1a_hex(std::string_view text);

}  // namespace kdlab
