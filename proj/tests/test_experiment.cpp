#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "kdlab/experiment.hpp"

namespace kdlab {
namespace {

namespace fs = std::filesystem;

ExperimentConfig tiny() {
  ExperimentConfig c;
  c.dataset.train_per_class = 20;
  c.dataset.test_per_class = 20;
  c.teacher.net = {"mlp", 16, 2, 4};
  c.teacher.epochs = 2;
  c.student = {"mlp", 8, 2, 4};
  c.train.epochs = 2;
  c.train.batch_size = 16;
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class ExperimentTest : public ::testing::Test {
 protected:
  void SetUp() override {
    root = fs::temp_directory_path() /
           ("kdlab-test-exp-" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(root);
  }
  void TearDown() override { fs::remove_all(root); }

  fs::path root;
};

TEST_F(ExperimentTest, RunWritesArtifactsAndIsReused) {
  const RunManifest a = run_experiment(tiny(), root, "tiny.cfg");
  EXPECT_FALSE(a.reused);
  EXPECT_EQ(a.output_dir, root / ("run-" + tiny().hash()));
  std::vector<std::string> names;
  for (const auto& [name, hash] : a.artifacts) {
    names.push_back(name);
    EXPECT_EQ(fnv1a_hex(slurp(a.output_dir / name)), hash) << name;
  }
  EXPECT_EQ(names, (std::vector<std::string>{"config.txt", "student.ckpt", "report.csv", "sample_gaps.csv"}));
  EXPECT_TRUE(fs::exists(root / "teachers" / ("teacher-" + tiny().teacher_hash() + ".ckpt")));
  EXPECT_FALSE(fs::exists(root / ("run-" + tiny().hash() + ".partial")));

  const RunManifest b = run_experiment(tiny(), root);
  EXPECT_TRUE(b.reused);
  EXPECT_EQ(b.artifacts, a.artifacts);
  EXPECT_EQ(b.final_metric, a.final_metric);
  EXPECT_EQ(RunManifest::parse(a.to_text(), a.output_dir).artifacts, a.artifacts);
}

TEST_F(ExperimentTest, IdenticalConfigsGiveIdenticalHashesAcrossRoots) {
  const RunManifest a = run_experiment(tiny(), root / "one");
  const RunManifest b = run_experiment(tiny(), root / "two");
  EXPECT_EQ(a.artifacts, b.artifacts);
}

TEST_F(ExperimentTest, PadRunWritesVarianceArtifactsAndFeedsFrozenPad) {
  ExperimentConfig pad = tiny();
  pad.pad.enabled = true;
  const RunManifest m = run_experiment(pad, root);
  for (const char* f : {"variance_table.csv", "variance_gap.csv", "variance_gap_summary.csv"})
    EXPECT_TRUE(fs::exists(m.output_dir / f)) << f;
  const VarianceGapReport r = run_variance_gap(m.output_dir, 5);
  EXPECT_EQ(r.bins.size(), 5u);
  EXPECT_EQ(r.samples, 80);

  ExperimentConfig frozen = tiny();
  frozen.weighting.scheme = "frozen_pad";
  frozen.weighting.variance_table = "from_pad";
  EXPECT_NO_THROW(run_experiment(frozen, root));
  EXPECT_THROW(run_variance_gap(run_experiment(tiny(), root).output_dir, 5), std::runtime_error);
}

TEST_F(ExperimentTest, SweepCountsRowsAndFlagsStrictImprovement) {
  ExperimentConfig base = tiny();
  base.weighting.scheme = "soft_exp";
  const SweepResult r = run_sweep(base,
                                  {{"weighting.T", {"0.1", "0.5", "1", "2", "5", "10"}}, {"seed", {"1", "2", "3"}}},
                                  root);
  ASSERT_EQ(r.rows.size(), 21u);
  std::map<std::uint64_t, Scalar> baseline;
  for (const SweepRow& row : r.rows)
    if (row.baseline) baseline[row.seed] = row.metric;
  ASSERT_EQ(baseline.size(), 3u);
  for (std::size_t i = 0; i < 18; ++i) {
    EXPECT_FALSE(r.rows[i].baseline);
    EXPECT_EQ(r.rows[i].better_than_baseline, r.rows[i].metric > baseline.at(r.rows[i].seed));
  }
  EXPECT_EQ(r.rows[0].params.at("weighting.T"), "0.1");
  EXPECT_EQ(r.rows[1].params.at("seed"), "2");
  const csv::Table t = r.to_csv();
  EXPECT_EQ(t.rows.size(), 21u);
  EXPECT_EQ(t.header.front(), "weighting.T");
}

TEST_F(ExperimentTest, SingletonSweepEqualsRun) {
  const SweepResult r = run_sweep(tiny(), {{"weighting.scheme", {"soft_poly"}}}, root);
  ExperimentConfig cfg = tiny();
  cfg.weighting.scheme = "soft_poly";
  const RunManifest m = run_experiment(cfg, root);
  ASSERT_EQ(r.rows.size(), 2u);
  EXPECT_EQ(r.rows[0].metric, m.final_metric);
  EXPECT_EQ(r.rows[0].run_dir, m.output_dir.filename().string());
  EXPECT_THROW(run_sweep(tiny(), {}, root), ConfigError);
  EXPECT_THROW(run_sweep(tiny(), {{"no.such.key", {"1"}}}, root), ConfigError);
  EXPECT_THROW(parse_grid_axis("weighting.T="), ConfigError);
  EXPECT_EQ(parse_grid_axis("weighting.T=1,2").second, (std::vector<std::string>{"1", "2"}));
}

TEST_F(ExperimentTest, CompareIsDeterministicAndChecksProtocol) {
  ExperimentConfig soft = tiny();
  soft.weighting.scheme = "soft_exp";
  ExperimentConfig warm = tiny();
  warm.distill.warmup_epochs = 1;
  const ComparisonResult r = compare_schemes({{"a", soft}, {"b", soft}, {"w", warm}}, 3, root);
  ASSERT_EQ(r.rows.size(), 3u);
  EXPECT_EQ(r.rows[0].metrics, r.rows[1].metrics);
  EXPECT_EQ(r.rows[0].scheme, "soft_exp");
  EXPECT_EQ(r.rows[2].scheme, "equal+warmup");
  EXPECT_EQ(r.rows[0].seeds, (std::vector<std::uint64_t>{1, 2, 3}));
  EXPECT_EQ(r.to_csv().rows.size(), 12u);

  ExperimentConfig other = tiny();
  other.student.width = 9;
  EXPECT_THROW(compare_schemes({{"a", soft}, {"b", other}}, 1, root), ConfigError);
}

}  // namespace
}  // namespace kdlab
