#include "kdlab/data.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>
#include <string>

#include "kdlab/idx.hpp"

namespace kdlab {

std::string_view to_string(DatasetKind kind) {
  switch (kind) {
    case DatasetKind::synthetic_blobs: return "synthetic_blobs";
    case DatasetKind::two_spirals: return "two_spirals";
    case DatasetKind::idx_images: return "idx_images";
  }
  return "?";
}

DatasetKind parse_dataset_kind(std::string_view name) {
  for (DatasetKind k : {DatasetKind::synthetic_blobs, DatasetKind::two_spirals, DatasetKind::idx_images}) {
    if (to_string(k) == name) return k;
  }
  throw ConfigError("unknown dataset kind '" + std::string(name) + "'");
}

Tensor Dataset::batch(const Split& split, std::span<const Index> rows) const {
  const Index width = split.inputs.cols();
  Array values(static_cast<Index>(rows.size()) * width);
  MatrixMap out(values.data(), static_cast<Index>(rows.size()), width);
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Index>(i)) = split.inputs.row(rows[i]);
  Shape shape{static_cast<Index>(rows.size())};
  shape.insert(shape.end(), sample_shape.begin(), sample_shape.end());
  return Tensor(std::move(shape), std::move(values));
}

Tensor Dataset::all(const Split& split) const {
  std::vector<Index> rows(static_cast<std::size_t>(split.size()));
  std::iota(rows.begin(), rows.end(), Index{0});
  return batch(split, rows);
}

namespace {

/// Replaces a `rate` fraction of labels by a different class; returns the
/// affected ids.
std::vector<SampleId> corrupt_labels(Split& split, Index num_classes, Scalar rate, std::mt19937_64& rng) {
  std::vector<SampleId> noisy;
  if (rate <= 0.0 || num_classes < 2) return noisy;
  const auto n = static_cast<std::size_t>(split.size());
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  const auto flips = static_cast<std::size_t>(std::llround(rate * static_cast<Scalar>(n)));
  std::uniform_int_distribution<int> other(1, static_cast<int>(num_classes) - 1);
  for (std::size_t k = 0; k < flips && k < n; ++k) {
    const std::size_t i = order[k];
    split.labels[i] = (split.labels[i] + other(rng)) % static_cast<int>(num_classes);
    noisy.push_back(split.ids[i]);
  }
  std::sort(noisy.begin(), noisy.end());
  return noisy;
}

std::mt19937_64 substream(std::uint64_t seed, std::uint32_t tag) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), tag};
  return std::mt19937_64(seq);
}

void assign_ids(Dataset& ds) {
  SampleId next = 0;
  for (Split* s : {&ds.train, &ds.test}) {
    s->ids.resize(static_cast<std::size_t>(s->size()));
    for (auto& id : s->ids) id = next++;
  }
}

}  // namespace

Dataset make_blobs(const BlobsSpec& spec, std::uint64_t seed) {
  if (spec.num_classes < 2 || spec.dim < 1 || spec.train_per_class < 1 || spec.test_per_class < 1) {
    throw ConfigError("blobs: need >= 2 classes and positive extents");
  }
  if (spec.label_noise < 0.0 || spec.label_noise >= 1.0) throw ConfigError("blobs: label noise must lie in [0, 1)");
  // Separate streams keep the training split fixed when the test size changes.
  auto rng = substream(seed, 0);
  auto test_rng = substream(seed, 1);
  auto noise_rng = substream(seed, 2);
  std::uniform_real_distribution<Scalar> center(-spec.center_range, spec.center_range);
  std::normal_distribution<Scalar> noise(0.0, spec.spread);

  RowMatrix centers(spec.num_classes, spec.dim);
  for (Index c = 0; c < spec.num_classes; ++c)
    for (Index j = 0; j < spec.dim; ++j) centers(c, j) = center(rng);

  Dataset ds;
  ds.kind = DatasetKind::synthetic_blobs;
  ds.sample_shape = {spec.dim};
  ds.num_classes = spec.num_classes;
  auto fill = [&](Split& split, Index per_class, std::mt19937_64& gen) {
    split.inputs.resize(per_class * spec.num_classes, spec.dim);
    split.labels.clear();
    // Interleave classes so any prefix is roughly balanced.
    for (Index i = 0; i < per_class; ++i)
      for (Index c = 0; c < spec.num_classes; ++c) {
        const Index row = i * spec.num_classes + c;
        for (Index j = 0; j < spec.dim; ++j) split.inputs(row, j) = centers(c, j) + noise(gen);
        split.labels.push_back(static_cast<int>(c));
      }
  };
  fill(ds.train, spec.train_per_class, rng);
  fill(ds.test, spec.test_per_class, test_rng);
  assign_ids(ds);
  ds.noisy_ids = corrupt_labels(ds.train, spec.num_classes, spec.label_noise, noise_rng);
  return ds;
}

Dataset make_two_spirals(const SpiralsSpec& spec, std::uint64_t seed) {
  if (spec.train_per_class < 1 || spec.test_per_class < 1) throw ConfigError("spirals: extents must be positive");
  auto rng = substream(seed, 0);
  auto test_rng = substream(seed, 1);
  auto noise_rng = substream(seed, 2);
  std::uniform_real_distribution<Scalar> unit(0.0, 1.0);
  std::normal_distribution<Scalar> noise(0.0, spec.noise);
  Dataset ds;
  ds.kind = DatasetKind::two_spirals;
  ds.sample_shape = {2};
  ds.num_classes = 2;
  auto fill = [&](Split& split, Index per_class, std::mt19937_64& gen) {
    split.inputs.resize(2 * per_class, 2);
    split.labels.clear();
    for (Index i = 0; i < per_class; ++i)
      for (int c = 0; c < 2; ++c) {
        const Scalar t = std::sqrt(unit(gen)) * spec.turns * 2.0 * std::numbers::pi;
        const Scalar sign = c == 0 ? 1.0 : -1.0;
        const Index row = 2 * i + c;
        split.inputs(row, 0) = sign * t * std::cos(t) / (spec.turns * 2.0) + noise(gen);
        split.inputs(row, 1) = sign * t * std::sin(t) / (spec.turns * 2.0) + noise(gen);
        split.labels.push_back(c);
      }
  };
  fill(ds.train, spec.train_per_class, rng);
  fill(ds.test, spec.test_per_class, test_rng);
  assign_ids(ds);
  ds.noisy_ids = corrupt_labels(ds.train, 2, spec.label_noise, noise_rng);
  return ds;
}

Dataset load_idx_dataset(const std::filesystem::path& train_images, const std::filesystem::path& train_labels,
                         const std::filesystem::path& test_images, const std::filesystem::path& test_labels,
                         Index limit) {
  Dataset ds;
  ds.kind = DatasetKind::idx_images;
  int max_label = 0;
  auto load = [&](Split& split, const std::filesystem::path& img_path, const std::filesystem::path& lbl_path) {
    const idx::Images img = idx::read_images(img_path);
    const idx::Labels lbl = idx::read_labels(lbl_path);
    if (lbl.values.size() != img.count) {
      throw FormatError("IDX: " + std::to_string(img.count) + " images but " + std::to_string(lbl.values.size()) +
                        " labels");
    }
    const Shape shape{1, static_cast<Index>(img.rows), static_cast<Index>(img.cols)};
    if (!ds.sample_shape.empty() && ds.sample_shape != shape) throw FormatError("IDX: train/test image extents differ");
    ds.sample_shape = shape;
    Index n = img.count;
    if (limit > 0) n = std::min(n, limit);
    const Index pixels = static_cast<Index>(img.rows) * img.cols;
    split.inputs.resize(n, pixels);
    for (Index i = 0; i < n; ++i)
      for (Index p = 0; p < pixels; ++p) split.inputs(i, p) = img.pixels[static_cast<std::size_t>(i * pixels + p)] / 255.0;
    split.labels.assign(lbl.values.begin(), lbl.values.begin() + n);
    for (int l : split.labels) max_label = std::max(max_label, l);
  };
  load(ds.train, train_images, train_labels);
  load(ds.test, test_images, test_labels);
  ds.num_classes = max_label + 1;
  assign_ids(ds);
  return ds;
}

}  // namespace kdlab
