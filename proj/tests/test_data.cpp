#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "kdlab/csv.hpp"
#include "kdlab/data.hpp"
#include "kdlab/idx.hpp"
#include "kdlab/stats.hpp"

namespace kdlab {
namespace {

namespace fs = std::filesystem;

idx::Images three_images() {
  idx::Images img;
  img.count = 3;
  img.rows = 2;
  img.cols = 2;
  img.pixels = {0, 255, 1, 2, 10, 20, 30, 40, 7, 7, 7, 7};
  return img;
}

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("kdlab-test-" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void write_bytes(const fs::path& path, const std::string& bytes) {
  std::ofstream(path, std::ios::binary) << bytes;
}

TEST(IdxTest, HandBuiltImagesRoundTrip) {
  const idx::Images img = three_images();
  const std::string bytes = idx::encode_images(img);
  ASSERT_EQ(bytes.size(), 16u + 12u);
  EXPECT_EQ(static_cast<unsigned char>(bytes[2]), 0x08);
  EXPECT_EQ(static_cast<unsigned char>(bytes[3]), 0x03);
  EXPECT_EQ(static_cast<unsigned char>(bytes[7]), 3);
  EXPECT_EQ(idx::parse_images(bytes), img);
  const idx::Labels lbl{{0, 1, 9}};
  EXPECT_EQ(idx::parse_labels(idx::encode_labels(lbl)), lbl);
}

TEST(IdxTest, WrongMagicIsNamed) {
  std::string bytes = idx::encode_images(three_images());
  bytes[3] = 0x01;
  try {
    idx::parse_images(bytes);
    FAIL() << "expected BadMagicError";
  } catch (const idx::BadMagicError& e) {
    EXPECT_EQ(e.found(), idx::kLabelMagic);
    EXPECT_EQ(e.expected(), idx::kImageMagic);
  }
  EXPECT_THROW(idx::parse_labels(idx::encode_images(three_images())), idx::BadMagicError);
}

TEST(IdxTest, TruncatedAndOversizedPayloadsRejected) {
  const std::string bytes = idx::encode_images(three_images());
  EXPECT_THROW(idx::parse_images(bytes.substr(0, 10)), FormatError);
  EXPECT_THROW(idx::parse_images(bytes.substr(0, bytes.size() - 1)), FormatError);
  EXPECT_THROW(idx::parse_images(bytes + "z"), FormatError);
}

TEST(IdxTest, LoadsDatasetScaledToUnitRange) {
  const fs::path dir = temp_dir("idx");
  write_bytes(dir / "ti", idx::encode_images(three_images()));
  write_bytes(dir / "tl", idx::encode_labels({{0, 1, 2}}));
  const Dataset ds = load_idx_dataset(dir / "ti", dir / "tl", dir / "ti", dir / "tl", 2);
  EXPECT_EQ(ds.sample_shape, (Shape{1, 2, 2}));
  EXPECT_EQ(ds.train.size(), 2);
  EXPECT_EQ(ds.num_classes, 2);
  EXPECT_EQ(ds.train.inputs(0, 1), 1.0);
  EXPECT_NEAR(ds.train.inputs(1, 0), 10.0 / 255.0, 1e-15);
  EXPECT_EQ(ds.batch(ds.train, std::vector<Index>{1}).shape(), (Shape{1, 1, 2, 2}));
  write_bytes(dir / "short", idx::encode_labels({{0}}));
  EXPECT_THROW(load_idx_dataset(dir / "ti", dir / "short", dir / "ti", dir / "tl"), FormatError);
  fs::remove_all(dir);
}

TEST(BlobsTest, NoiseFlipsExactFractionToOtherClasses) {
  BlobsSpec spec;
  spec.train_per_class = 50;
  const Dataset noisy = make_blobs(spec, 3);
  spec.label_noise = 0.0;
  const Dataset clean = make_blobs(spec, 3);
  ASSERT_EQ(noisy.train.inputs, clean.train.inputs);
  ASSERT_EQ(noisy.noisy_ids.size(), 20u);
  EXPECT_TRUE(std::is_sorted(noisy.noisy_ids.begin(), noisy.noisy_ids.end()));
  const std::set<SampleId> flipped(noisy.noisy_ids.begin(), noisy.noisy_ids.end());
  for (Index i = 0; i < noisy.train.size(); ++i) {
    const auto k = static_cast<std::size_t>(i);
    EXPECT_EQ(noisy.train.labels[k] != clean.train.labels[k], flipped.count(noisy.train.ids[k]) == 1);
  }
  EXPECT_EQ(noisy.test.labels, clean.test.labels);
  EXPECT_TRUE(clean.noisy_ids.empty());
}

TEST(BlobsTest, IdsUniqueAndSeedDeterministic) {
  const Dataset a = make_blobs(BlobsSpec{}, 5);
  const Dataset b = make_blobs(BlobsSpec{}, 5);
  EXPECT_EQ(a.train.inputs, b.train.inputs);
  EXPECT_EQ(a.noisy_ids, b.noisy_ids);
  std::set<SampleId> ids(a.train.ids.begin(), a.train.ids.end());
  ids.insert(a.test.ids.begin(), a.test.ids.end());
  EXPECT_EQ(static_cast<Index>(ids.size()), a.train.size() + a.test.size());
  EXPECT_NE(make_blobs(BlobsSpec{}, 6).train.inputs, a.train.inputs);
}

TEST(BlobsTest, TestSizeDoesNotChangeTrainingSplit) {
  BlobsSpec spec;
  const Dataset a = make_blobs(spec, 9);
  spec.test_per_class = 17;
  const Dataset b = make_blobs(spec, 9);
  EXPECT_EQ(a.train.inputs, b.train.inputs);
  EXPECT_EQ(a.train.labels, b.train.labels);
}

TEST(SpiralsTest, ShapesAndBalance) {
  const Dataset ds = make_two_spirals(SpiralsSpec{}, 1);
  EXPECT_EQ(ds.num_classes, 2);
  EXPECT_EQ(ds.train.size(), 400);
  EXPECT_EQ(std::count(ds.train.labels.begin(), ds.train.labels.end(), 1), 200);
}

TEST(StatsTest, RanksMedianAndCorrelation) {
  const std::vector<Scalar> v{3, 1, 3, 2};
  const Array r = stats::average_ranks(v);
  EXPECT_EQ(r[0], 3.5);
  EXPECT_EQ(r[1], 1.0);
  EXPECT_EQ(r[3], 2.0);
  EXPECT_EQ(stats::median({5, 1, 3}), 3.0);
  EXPECT_EQ(stats::median({4, 1, 3, 2}), 2.5);
  const std::vector<Scalar> x{1, 2, 3, 4}, y{1, 4, 9, 16}, z{4, 3, 2, 1};
  EXPECT_NEAR(stats::spearman(x, y), 1.0, 1e-15);
  EXPECT_NEAR(stats::spearman(x, z), -1.0, 1e-15);
  EXPECT_THROW(stats::median({}), std::invalid_argument);
}

/// Median against a sorting oracle on random samples of both parities.
TEST(StatsTest, MedianMatchesOrderStatistics) {
  std::mt19937_64 rng(2);
  std::normal_distribution<Scalar> g;
  for (int n = 1; n < 40; ++n) {
    std::vector<Scalar> v(static_cast<std::size_t>(n));
    for (auto& x : v) x = g(rng);
    std::vector<Scalar> s = v;
    std::sort(s.begin(), s.end());
    const std::size_t h = s.size() / 2;
    const Scalar oracle = n % 2 ? s[h] : (s[h - 1] + s[h]) / 2.0;
    ASSERT_EQ(stats::median(v), oracle);
  }
}

TEST(CsvTest, QuotingAndNumbersRoundTrip) {
  csv::Table t{{"a", "b"}, {{"x,y", "say \"hi\""}, {"line\nbreak", csv::format_number(0.1 + 0.2)}}};
  const csv::Table back = csv::parse(csv::emit(t));
  EXPECT_EQ(back, t);
  EXPECT_EQ(csv::parse_number(back.rows[1][1]), 0.1 + 0.2);
  EXPECT_EQ(t.column("b"), 1u);
  EXPECT_THROW(t.column("c"), FormatError);
  EXPECT_THROW(csv::parse("a,b\n1\n"), FormatError);
  EXPECT_THROW(csv::parse_number("1.5x"), FormatError);
}

TEST(CsvTest, VarianceTableRoundTrip) {
  const VarianceTable table{{3, 0.25}, {7, 1.0 / 3.0}, {11, std::exp(10.0)}};
  const fs::path dir = temp_dir("csv");
  csv::write_variance_table(dir / "v.csv", table);
  EXPECT_EQ(csv::read_variance_table(dir / "v.csv"), table);
  EXPECT_EQ(csv::variance_table_from_csv(csv::Table{{"3", "0.25"}, {{"7", "0.5"}}}),
            (VarianceTable{{3, 0.25}, {7, 0.5}}));
  EXPECT_THROW(csv::variance_table_from_csv(csv::Table{{"sample_id", "sigma_squared"}, {{"1", "0"}}}), FormatError);
  fs::remove_all(dir);
}

}  // namespace
}  // namespace kdlab
