#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string_view>
#include <vector>

#include "kdlab/tensor.hpp"
#include "kdlab/weighting.hpp"

namespace kdlab {

enum class DatasetKind { synthetic_blobs, two_spirals, idx_images };

std::string_view to_string(DatasetKind kind);
DatasetKind parse_dataset_kind(std::string_view name);

/// One partition: row i of `inputs` is the flattened sample with `labels[i]`
/// and stable id `ids[i]`.
struct Split {
  RowMatrix inputs;
  std::vector<int> labels;
  std::vector<SampleId> ids;

  Index size() const { return inputs.rows(); }
};

struct Dataset {
  DatasetKind kind = DatasetKind::synthetic_blobs;
  Shape sample_shape;
  Index num_classes = 0;
  Split train;
  Split test;
  /// Training ids whose label was replaced by label noise.
  std::vector<SampleId> noisy_ids;

  /// [rows.size()] + sample_shape batch tensor (no gradient).
  Tensor batch(const Split& split, std::span<const Index> rows) const;
  /// Entire split as one tensor.
  Tensor all(const Split& split) const;
};

struct BlobsSpec {
  Index num_classes = 4;
  Index dim = 2;
  Index train_per_class = 250;
  Index test_per_class = 250;
  /// Standard deviation of every cluster.
  Scalar spread = 1.0;
  /// Cluster centres are drawn uniformly from [-center_range, center_range]^dim.
  Scalar center_range = 4.0;
  /// Fraction of training labels replaced by a different, random class.
  Scalar label_noise = 0.1;
};

/// Isotropic Gaussian clusters; test labels are always clean.
Dataset make_blobs(const BlobsSpec& spec, std::uint64_t seed);

struct SpiralsSpec {
  Index train_per_class = 200;
  Index test_per_class = 200;
  Scalar noise = 0.1;
  Scalar turns = 1.5;
  Scalar label_noise = 0.0;
};

/// Two interleaved 2-D spirals.
Dataset make_two_spirals(const SpiralsSpec& spec, std::uint64_t seed);

/// Images scaled to [0, 1]; `limit` > 0 keeps the first `limit` samples of
/// each split.
Dataset load_idx_dataset(const std::filesystem::path& train_images, const std::filesystem::path& train_labels,
                         const std::filesystem::path& test_images, const std::filesystem::path& test_labels,
                         Index limit = 0);

}  // namespace kdlab
