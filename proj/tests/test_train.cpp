#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "kdlab/checkpoint.hpp"
#include "kdlab/train.hpp"

namespace kdlab {
namespace {

ExperimentConfig small_config() {
  ExperimentConfig c;
  c.dataset.train_per_class = 40;
  c.dataset.test_per_class = 40;
  c.teacher.net = {"mlp", 32, 3, 8};
  c.teacher.epochs = 3;
  c.student = {"mlp", 16, 3, 8};
  c.train.epochs = 3;
  c.train.batch_size = 32;
  c.train.gap_log_every = 2;
  return c;
}

class TrainTest : public ::testing::Test {
 protected:
  ExperimentConfig cfg = small_config();
  Dataset ds = make_dataset(cfg);
  TeacherResult teacher = train_teacher(cfg, ds);
};

TEST(MetricTest, PerfectClassifierAndSeparatedClusters) {
  RowMatrix logits(3, 2);
  logits << 2, 0, 0, 1, 5, -1;
  const std::vector<int> labels{0, 1, 0};
  EXPECT_EQ(top1_accuracy(logits, labels), 1.0);
  RowMatrix e(4, 2);
  e << 0, 0, 0.1, 0, 10, 10, 10, 10.1;
  const std::vector<int> cl{0, 0, 1, 1};
  EXPECT_EQ(recall_at_1(e, cl), 1.0);
  EXPECT_EQ(mean_average_precision(e, cl), 1.0);
  EXPECT_THROW(recall_at_1(RowMatrix::Zero(1, 2), std::vector<int>{0}), std::invalid_argument);
}

/// Identical embeddings: every other sample is a tied nearest neighbour, so
/// the expected recall for 20 samples in two balanced classes is 9/19.
TEST(MetricTest, TiedRecallAveragesToChance) {
  const RowMatrix e = RowMatrix::Zero(20, 3);
  std::vector<int> labels(20);
  for (int i = 0; i < 20; ++i) labels[static_cast<std::size_t>(i)] = i % 2;
  Scalar total = 0.0;
  const int seeds = 2000;
  for (int s = 0; s < seeds; ++s) total += recall_at_1(e, labels, static_cast<std::uint64_t>(s));
  // Standard error of the mean is about 0.112 / sqrt(2000) = 0.0025.
  EXPECT_NEAR(total / seeds, 9.0 / 19.0, 0.0125);
  EXPECT_EQ(recall_at_1(e, labels, 4), recall_at_1(e, labels, 4));
}

/// Softmax regression by full-batch gradient descent; the data are treated
/// as separable when it reaches the same bound.
Scalar logistic_oracle(const Dataset& ds) {
  const Index d = ds.train.inputs.cols(), c = ds.num_classes;
  RowMatrix w = RowMatrix::Zero(d + 1, c);
  RowMatrix x(ds.train.size(), d + 1);
  x << ds.train.inputs, RowMatrix::Ones(ds.train.size(), 1);
  for (int it = 0; it < 500; ++it) {
    RowMatrix p = x * w;
    for (Index i = 0; i < p.rows(); ++i) {
      p.row(i).array() -= p.row(i).maxCoeff();
      p.row(i) = p.row(i).array().exp().matrix();
      p.row(i) /= p.row(i).sum();
      p(i, ds.train.labels[static_cast<std::size_t>(i)]) -= 1.0;
    }
    w -= 0.5 * x.transpose() * p / static_cast<Scalar>(x.rows());
  }
  RowMatrix xt(ds.test.size(), d + 1);
  xt << ds.test.inputs, RowMatrix::Ones(ds.test.size(), 1);
  return top1_accuracy(xt * w, ds.test.labels);
}

TEST(TeacherTest, SeparableBlobsAreLearned) {
  ExperimentConfig cfg = small_config();
  cfg.dataset.label_noise = 0.0;
  cfg.dataset.center_range = 8.0;
  cfg.dataset.spread = 0.5;
  cfg.dataset.train_per_class = 100;
  cfg.dataset.test_per_class = 100;
  cfg.teacher.epochs = 10;
  const Dataset ds = make_dataset(cfg);
  ASSERT_GT(logistic_oracle(ds), 0.99);
  EXPECT_GT(train_teacher(cfg, ds).test_metric, 0.99);
}

TEST(TeacherTest, DivergenceIsReportedWithContext) {
  ExperimentConfig cfg = small_config();
  cfg.teacher.lr = 1e8;
  const Dataset ds = make_dataset(cfg);
  try {
    train_teacher(cfg, ds);
    FAIL() << "expected TrainingDiverged";
  } catch (const TrainingDiverged& e) {
    EXPECT_NE(std::string(e.what()).find("epoch"), std::string::npos) << e.what();
  }
}

TEST_F(TrainTest, DeterministicReports) {
  const DistillResult a = distill_student(cfg, ds, teacher.model);
  const DistillResult b = distill_student(cfg, ds, teacher.model);
  EXPECT_EQ(a.report.rows, b.report.rows);
  EXPECT_EQ(a.report.gaps, b.report.gaps);
  EXPECT_EQ(csv::emit(a.report.metrics_csv()), csv::emit(b.report.metrics_csv()));
  EXPECT_EQ(encode_checkpoint(a.student.state()), encode_checkpoint(b.student.state()));
  ExperimentConfig other = cfg;
  other.seed = 2;
  EXPECT_NE(distill_student(other, ds, teacher.model).report.rows, a.report.rows);
}

TEST_F(TrainTest, ReportLayout) {
  const DistillResult r = distill_student(cfg, ds, teacher.model);
  EXPECT_EQ(r.report.final_metric_name, "top1_accuracy");
  EXPECT_EQ(r.report.final_metric, r.report.metric(3, "test", "top1_accuracy"));
  ASSERT_EQ(r.report.gaps.size(), 2u);
  EXPECT_EQ(r.report.gaps[0].epoch, 2);
  EXPECT_EQ(r.report.gaps[1].epoch, 3);
  EXPECT_EQ(static_cast<Index>(r.report.final_gaps().size()), ds.train.size());
  EXPECT_EQ(r.report.metrics_csv().header, (std::vector<std::string>{"epoch", "split", "metric_name", "value"}));
  EXPECT_EQ(r.report.gaps_csv().header, (std::vector<std::string>{"epoch", "sample_id", "gap"}));
  EXPECT_FALSE(r.report.variances.has_value());
}

TEST_F(TrainTest, ZeroLambdaIgnoresWeightingScheme) {
  cfg.distill.lambda = 0.0;
  const std::string reference = encode_checkpoint(distill_student(cfg, ds, teacher.model).student.state());
  for (const char* scheme : {"soft_exp", "hard_mining", "soft_poly", "hard_discard"}) {
    ExperimentConfig c = cfg;
    c.weighting.scheme = scheme;
    c.weighting.discard = 3;
    EXPECT_EQ(encode_checkpoint(distill_student(c, ds, teacher.model).student.state()), reference) << scheme;
  }
  ExperimentConfig pad = cfg;
  pad.pad.enabled = true;
  EXPECT_EQ(encode_checkpoint(distill_student(pad, ds, teacher.model).student.state()), reference);
}

TEST_F(TrainTest, TeacherIsNotModified) {
  const std::string before = encode_checkpoint(teacher.model.state());
  ExperimentConfig c = cfg;
  c.pad.enabled = true;
  distill_student(c, ds, teacher.model);
  distill_student(cfg, ds, teacher.model);
  EXPECT_EQ(encode_checkpoint(teacher.model.state()), before);
}

TEST_F(TrainTest, ZeroEpochsKeepsInitialisation) {
  cfg.train.epochs = 0;
  const DistillResult r = distill_student(cfg, ds, teacher.model);
  ASSERT_EQ(r.report.gaps.size(), 1u);
  EXPECT_EQ(r.report.gaps[0].epoch, 0);
  // Four classes: an untrained model sits near 1/4 up to sampling noise.
  EXPECT_LT(std::abs(r.report.final_metric - 0.25), 0.2);
  ExperimentConfig again = cfg;
  EXPECT_EQ(encode_checkpoint(distill_student(again, ds, teacher.model).student.state()),
            encode_checkpoint(r.student.state()));
}

TEST_F(TrainTest, PadTableFeedsFrozenPad) {
  ExperimentConfig pad = cfg;
  pad.pad.enabled = true;
  const DistillResult r = distill_student(pad, ds, teacher.model);
  ASSERT_TRUE(r.report.variances.has_value());
  EXPECT_EQ(static_cast<Index>(r.report.variances->size()), ds.train.size());
  EXPECT_FALSE(r.report.head_untrained);
  ExperimentConfig frozen = cfg;
  frozen.weighting.scheme = "frozen_pad";
  frozen.weighting.variance_table = "from_pad";
  const auto table = std::make_shared<const VarianceTable>(*r.report.variances);
  EXPECT_NO_THROW(distill_student(frozen, ds, teacher.model, table));
}

TEST_F(TrainTest, WarmupRampsLambda) {
  cfg.distill.warmup_epochs = 2;
  cfg.distill.lambda = 2.0;
  const DistillResult r = distill_student(cfg, ds, teacher.model);
  EXPECT_EQ(r.report.metric(1, "train", "lambda"), 0.0);
  EXPECT_EQ(r.report.metric(2, "train", "lambda"), 1.0);
  EXPECT_EQ(r.report.metric(3, "train", "lambda"), 2.0);
}

/// Self-distillation with a dominant distillation term: the training-set
/// gap shrinks every epoch at the start of training. The learning rate is
/// divided by lambda so the distillation step keeps its usual size.
TEST(SelfDistillTest, GapsDecreaseOverFirstEpochs) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    ExperimentConfig cfg = small_config();
    cfg.student = cfg.teacher.net;
    cfg.distill.lambda = 20.0;
    cfg.optim.lr = 0.01 / 20.0;
    cfg.train.epochs = 4;
    cfg.seed = seed;
    const Dataset ds = make_dataset(cfg);
    const TeacherResult t = train_teacher(cfg, ds);
    const DistillResult r = distill_student(cfg, ds, t.model);
    for (Index e = 1; e <= cfg.train.epochs; ++e)
      EXPECT_LT(r.report.metric(e, "train", "mean_gap"), r.report.metric(e - 1, "train", "mean_gap"))
          << "seed " << seed << " epoch " << e;
  }
}

TEST(MetricTaskTest, TripletStudentReportsRetrieval) {
  ExperimentConfig cfg = small_config();
  cfg.task = Task::metric;
  const Dataset ds = make_dataset(cfg);
  const TeacherResult t = train_teacher(cfg, ds);
  const DistillResult r = distill_student(cfg, ds, t.model);
  EXPECT_EQ(r.report.final_metric_name, "recall_at_1");
  EXPECT_GE(r.report.metric(3, "test", "mAP"), 0.0);
  EXPECT_LE(r.report.metric(3, "test", "mAP"), 1.0);
}

TEST(ProjectorTest, FeatureTargetsOfDifferentWidthAreProjected) {
  ExperimentConfig cfg = small_config();
  cfg.distill.target = TargetKind::feature_map;
  cfg.distill.tap = "block2";
  const Dataset ds = make_dataset(cfg);
  const TeacherResult t = train_teacher(cfg, ds);
  EXPECT_NO_THROW(distill_student(cfg, ds, t.model));
  cfg.distill.target = TargetKind::logits;
  EXPECT_NO_THROW(distill_student(cfg, ds, t.model));
}

}  // namespace
}  // namespace kdlab
