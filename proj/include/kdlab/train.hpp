#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kdlab/config.hpp"
#include "kdlab/csv.hpp"
#include "kdlab/data.hpp"
#include "kdlab/model.hpp"

namespace kdlab {

enum class Metric { top1_accuracy, recall_at_1, mean_average_precision };

std::string_view to_string(Metric metric);
Metric parse_metric(std::string_view name);

Scalar top1_accuracy(const RowMatrix& logits, std::span<const int> labels);
/// Fraction of queries whose nearest other embedding (L2) shares the label.
/// Equidistant neighbours are resolved by a permutation drawn from `tie_seed`.
Scalar recall_at_1(const RowMatrix& embeddings, std::span<const int> labels, std::uint64_t tie_seed = 0);
/// Mean over queries with at least one positive of the average precision of
/// the gallery of all other samples ranked by L2 distance.
Scalar mean_average_precision(const RowMatrix& embeddings, std::span<const int> labels, std::uint64_t tie_seed = 0);
/// Runs `model` in evaluation mode over `split`.
Scalar evaluate(Network& model, const Dataset& dataset, const Split& split, Metric metric,
                std::uint64_t tie_seed = 0);

/// Logits and embeddings of a whole split, evaluation mode, in chunks.
ForwardResult forward_all(Network& model, const Dataset& dataset, const Split& split, Index chunk = 512);

Dataset make_dataset(const ExperimentConfig& config);
Network build_network(const NetConfig& net, const Dataset& dataset, std::mt19937_64& rng);
Metric primary_metric(Task task);

/// A loss or activation became non-finite during training.
class TrainingDiverged : public DomainError {
 public:
  using DomainError::DomainError;
};

struct TeacherResult {
  Network model;
  Scalar test_metric = 0.0;
};

/// Trains the teacher with its own seed, cross-entropy or batch-hard triplet
/// loss, and momentum 0.9.
TeacherResult train_teacher(const ExperimentConfig& config, const Dataset& dataset);

struct MetricRow {
  Index epoch = 0;
  std::string split;
  std::string metric;
  Scalar value = 0.0;

  bool operator==(const MetricRow&) const = default;
};

struct GapSnapshot {
  Index epoch = 0;
  std::map<SampleId, Scalar> gaps;

  bool operator==(const GapSnapshot&) const = default;
};

struct TrainReport {
  std::vector<MetricRow> rows;
  std::string final_metric_name;
  Scalar final_metric = 0.0;
  /// Training-set gaps recomputed in evaluation mode on logged epochs.
  std::vector<GapSnapshot> gaps;
  /// Per-sample sigma^2 of PAD runs.
  std::optional<VarianceTable> variances;
  bool head_untrained = false;
  double wall_seconds = 0.0;

  /// Gaps after the last epoch (before training when epochs == 0).
  const std::map<SampleId, Scalar>& final_gaps() const;
  Scalar metric(Index epoch, std::string_view split, std::string_view name) const;

  /// `epoch,split,metric_name,value`; wall-clock is left out so identical
  /// runs give identical files.
  csv::Table metrics_csv() const;
  /// `epoch,sample_id,gap`
  csv::Table gaps_csv() const;
};

struct DistillResult {
  Network student;
  TrainReport report;
};

/// Trains a student against a frozen copy of `teacher`. `frozen_table`
/// supplies the frozen_pad weights; when null the config path is read.
DistillResult distill_student(const ExperimentConfig& config, const Dataset& dataset, const Network& teacher,
                              std::shared_ptr<const VarianceTable> frozen_table = nullptr);

}  // namespace kdlab
