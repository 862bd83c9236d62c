#include "kdlab/train.hpp"

#include <algorithm>
#include <chrono>
#include <numeric>
#include <random>

#include "kdlab/losses.hpp"
#include "kdlab/pad.hpp"
#include "kdlab/weighting.hpp"

namespace kdlab {

std::string_view to_string(Metric metric) {
  switch (metric) {
    case Metric::top1_accuracy: return "top1_accuracy";
    case Metric::recall_at_1: return "recall_at_1";
    case Metric::mean_average_precision: return "mAP";
  }
  return "?";
}

Metric parse_metric(std::string_view name) {
  for (Metric m : {Metric::top1_accuracy, Metric::recall_at_1, Metric::mean_average_precision}) {
    if (to_string(m) == name) return m;
  }
  throw ConfigError("unknown metric '" + std::string(name) + "'");
}

Metric primary_metric(Task task) { return task == Task::classification ? Metric::top1_accuracy : Metric::recall_at_1; }

namespace {

std::mt19937_64 stream(std::uint64_t seed, std::uint32_t tag) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), tag};
  return std::mt19937_64(seq);
}

enum StreamTag : std::uint32_t { kInit = 1, kShuffle = 2, kAux = 3 };

Scalar squared_distance(const RowMatrix& x, Index a, Index b) { return (x.row(a) - x.row(b)).squaredNorm(); }

/// Position of every index in a seeded permutation; smaller wins ties.
std::vector<Index> tie_ranks(Index n, std::uint64_t seed) {
  std::vector<Index> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), Index{0});
  auto rng = stream(seed, 0x7e);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<Index> rank(perm.size());
  for (std::size_t p = 0; p < perm.size(); ++p) rank[static_cast<std::size_t>(perm[p])] = static_cast<Index>(p);
  return rank;
}

void check_retrieval(const RowMatrix& embeddings, std::span<const int> labels) {
  if (embeddings.rows() != static_cast<Index>(labels.size())) {
    throw ShapeError("retrieval: " + std::to_string(embeddings.rows()) + " embeddings for " +
                     std::to_string(labels.size()) + " labels");
  }
  if (embeddings.rows() < 2) throw std::invalid_argument("retrieval needs a gallery of at least two samples");
}

Tensor to_input(const Tensor& batch, const Network& net) {
  Shape shape{batch.dim(0)};
  shape.insert(shape.end(), net.sample_shape().begin(), net.sample_shape().end());
  return batch.shape() == shape ? batch : reshape(batch, std::move(shape));
}

std::vector<int> gather_labels(const Split& split, std::span<const Index> rows) {
  std::vector<int> out;
  out.reserve(rows.size());
  for (Index r : rows) out.push_back(split.labels[static_cast<std::size_t>(r)]);
  return out;
}

Tensor task_loss(Task task, const ForwardResult& fwd, std::span<const int> labels) {
  return task == Task::classification ? cross_entropy(fwd.logits, labels) : triplet_loss(fwd.embedding, labels);
}

/// Shuffled mini-batches; a trailing batch of one sample is dropped.
std::vector<std::vector<Index>> epoch_batches(Index n, Index batch_size, std::mt19937_64& rng) {
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<Index>> out;
  for (Index start = 0; start < n; start += batch_size) {
    const Index end = std::min(n, start + batch_size);
    if (end - start < 2) break;
    out.emplace_back(order.begin() + start, order.begin() + end);
  }
  return out;
}

std::vector<Tensor> concat(std::vector<Tensor> a, const std::vector<Tensor>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

/// Per-sample knowledge taken from a forward pass.
Tensor select_target(const ForwardResult& fwd, TargetKind kind, const std::string& tap) {
  switch (kind) {
    case TargetKind::embedding: return fwd.embedding;
    case TargetKind::logits: return fwd.logits;
    case TargetKind::feature_map: return fwd.taps.at(tap);
    case TargetKind::attention_map: return attention_map(fwd.taps.at(tap));
  }
  return fwd.embedding;
}

Shape per_sample(const Tensor& x) { return Shape(x.shape().begin() + 1, x.shape().end()); }

Tensor rows_as_tensor(const RowMatrix& m, std::span<const Index> rows, const Shape& sample_shape) {
  Array values(static_cast<Index>(rows.size()) * m.cols());
  MatrixMap out(values.data(), static_cast<Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Index>(i)) = m.row(rows[i]);
  Shape shape{static_cast<Index>(rows.size())};
  shape.insert(shape.end(), sample_shape.begin(), sample_shape.end());
  return Tensor(std::move(shape), std::move(values));
}

/// The classifier sees no loss in the metric task and stays at its
/// initial values.
std::vector<Tensor> trained_parameters(const Network& net, Task task) {
  std::vector<Tensor> params = net.parameters();
  if (task == Task::metric) params.resize(params.size() - 2);
  return params;
}

std::vector<Index> iota_rows(Index begin, Index end) {
  std::vector<Index> rows(static_cast<std::size_t>(end - begin));
  std::iota(rows.begin(), rows.end(), begin);
  return rows;
}

}  // namespace

Scalar top1_accuracy(const RowMatrix& logits, std::span<const int> labels) {
  if (logits.rows() != static_cast<Index>(labels.size()) || logits.rows() == 0) {
    throw ShapeError("top1_accuracy: " + std::to_string(logits.rows()) + " rows for " + std::to_string(labels.size()) +
                     " labels");
  }
  Index correct = 0;
  for (Index i = 0; i < logits.rows(); ++i) {
    Index best = 0;
    logits.row(i).maxCoeff(&best);
    correct += best == labels[static_cast<std::size_t>(i)];
  }
  return static_cast<Scalar>(correct) / static_cast<Scalar>(logits.rows());
}

Scalar recall_at_1(const RowMatrix& embeddings, std::span<const int> labels, std::uint64_t tie_seed) {
  check_retrieval(embeddings, labels);
  const Index n = embeddings.rows();
  const auto rank = tie_ranks(n, tie_seed);
  Index hits = 0;
  for (Index i = 0; i < n; ++i) {
    Index best = -1;
    Scalar best_d = 0.0;
    for (Index j = 0; j < n; ++j) {
      if (j == i) continue;
      const Scalar d = squared_distance(embeddings, i, j);
      if (best < 0 || d < best_d ||
          (d == best_d && rank[static_cast<std::size_t>(j)] < rank[static_cast<std::size_t>(best)])) {
        best = j;
        best_d = d;
      }
    }
    hits += labels[static_cast<std::size_t>(best)] == labels[static_cast<std::size_t>(i)];
  }
  return static_cast<Scalar>(hits) / static_cast<Scalar>(n);
}

Scalar mean_average_precision(const RowMatrix& embeddings, std::span<const int> labels, std::uint64_t tie_seed) {
  check_retrieval(embeddings, labels);
  const Index n = embeddings.rows();
  const auto rank = tie_ranks(n, tie_seed);
  Scalar total = 0.0;
  Index queries = 0;
  std::vector<std::pair<Scalar, Index>> gallery;
  for (Index i = 0; i < n; ++i) {
    gallery.clear();
    for (Index j = 0; j < n; ++j)
      if (j != i) gallery.emplace_back(squared_distance(embeddings, i, j), j);
    std::sort(gallery.begin(), gallery.end(), [&](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first < b.first;
      return rank[static_cast<std::size_t>(a.second)] < rank[static_cast<std::size_t>(b.second)];
    });
    Index found = 0;
    Scalar precision_sum = 0.0;
    for (std::size_t k = 0; k < gallery.size(); ++k) {
      if (labels[static_cast<std::size_t>(gallery[k].second)] == labels[static_cast<std::size_t>(i)]) {
        ++found;
        precision_sum += static_cast<Scalar>(found) / static_cast<Scalar>(k + 1);
      }
    }
    if (found == 0) continue;
    total += precision_sum / static_cast<Scalar>(found);
    ++queries;
  }
  return queries == 0 ? 0.0 : total / static_cast<Scalar>(queries);
}

ForwardResult forward_all(Network& model, const Dataset& dataset, const Split& split, Index chunk) {
  const Index n = split.size();
  RowMatrix logits(n, model.num_classes());
  RowMatrix embedding(n, model.embedding_dim());
  for (Index start = 0; start < n; start += chunk) {
    const Index end = std::min(n, start + chunk);
    const auto rows = iota_rows(start, end);
    const ForwardResult fwd = model.forward(to_input(dataset.batch(split, rows), model), Mode::eval);
    logits.middleRows(start, end - start) = fwd.logits.matrix();
    embedding.middleRows(start, end - start) = fwd.embedding.matrix();
  }
  return ForwardResult{Tensor::from_matrix(logits), Tensor::from_matrix(embedding), {}};
}

Scalar evaluate(Network& model, const Dataset& dataset, const Split& split, Metric metric, std::uint64_t tie_seed) {
  const ForwardResult fwd = forward_all(model, dataset, split);
  switch (metric) {
    case Metric::top1_accuracy: return top1_accuracy(RowMatrix(fwd.logits.matrix()), split.labels);
    case Metric::recall_at_1: return recall_at_1(RowMatrix(fwd.embedding.matrix()), split.labels, tie_seed);
    case Metric::mean_average_precision:
      return mean_average_precision(RowMatrix(fwd.embedding.matrix()), split.labels, tie_seed);
  }
  return 0.0;
}

Dataset make_dataset(const ExperimentConfig& config) {
  const DatasetConfig& d = config.dataset;
  switch (d.kind) {
    case DatasetKind::synthetic_blobs:
      return make_blobs(BlobsSpec{d.classes, d.dim, d.train_per_class, d.test_per_class, d.spread, d.center_range,
                                  d.label_noise},
                        d.seed);
    case DatasetKind::two_spirals:
      return make_two_spirals(
          SpiralsSpec{d.train_per_class, d.test_per_class, d.spiral_noise, d.spiral_turns, d.label_noise}, d.seed);
    case DatasetKind::idx_images:
      return load_idx_dataset(d.train_images, d.train_labels, d.test_images, d.test_labels, d.limit);
  }
  throw ConfigError("unknown dataset kind");
}

Network build_network(const NetConfig& net, const Dataset& dataset, std::mt19937_64& rng) {
  if (net.arch == "convnet") {
    if (dataset.sample_shape.size() != 3) throw ConfigError("convnet needs [C, H, W] samples");
    return make_convnet(ConvNetSpec{dataset.sample_shape[0], dataset.sample_shape[1], dataset.sample_shape[2],
                                    net.width, net.embedding_dim, dataset.num_classes},
                        rng);
  }
  return make_mlp(MlpSpec{numel(dataset.sample_shape), net.width, net.depth, net.embedding_dim, dataset.num_classes},
                  rng);
}

TeacherResult train_teacher(const ExperimentConfig& config, const Dataset& dataset) {
  auto init = stream(config.teacher.seed, kInit);
  auto shuffle = stream(config.teacher.seed, kShuffle);
  Network net = build_network(config.teacher.net, dataset, init);
  const auto params = trained_parameters(net, config.task);
  for (Index epoch = 1; epoch <= config.teacher.epochs; ++epoch) {
    Index b = 0;
    for (const auto& rows : epoch_batches(dataset.train.size(), config.train.batch_size, shuffle)) {
      try {
        const ForwardResult fwd = net.forward(to_input(dataset.batch(dataset.train, rows), net), Mode::train);
        const auto labels = gather_labels(dataset.train, rows);
        backward(task_loss(config.task, fwd, labels));
      } catch (const DomainError& e) {
        throw TrainingDiverged("teacher diverged at epoch " + std::to_string(epoch) + ", batch " + std::to_string(b) +
                               ": " + e.what());
      }
      sgd_step(params, config.teacher.lr, 0.9);
      zero_grads(params);
      ++b;
    }
  }
  const Scalar metric = evaluate(net, dataset, dataset.test, primary_metric(config.task), config.teacher.seed);
  return TeacherResult{std::move(net), metric};
}

const std::map<SampleId, Scalar>& TrainReport::final_gaps() const {
  if (gaps.empty()) throw std::logic_error("report holds no gap snapshot");
  return gaps.back().gaps;
}

Scalar TrainReport::metric(Index epoch, std::string_view split, std::string_view name) const {
  for (const MetricRow& r : rows)
    if (r.epoch == epoch && r.split == split && r.metric == name) return r.value;
  throw std::out_of_range("report has no " + std::string(split) + "/" + std::string(name) + " at epoch " +
                          std::to_string(epoch));
}

csv::Table TrainReport::metrics_csv() const {
  csv::Table t{{"epoch", "split", "metric_name", "value"}, {}};
  for (const MetricRow& r : rows) t.rows.push_back({std::to_string(r.epoch), r.split, r.metric, csv::format_number(r.value)});
  return t;
}

csv::Table TrainReport::gaps_csv() const {
  csv::Table t{{"epoch", "sample_id", "gap"}, {}};
  for (const GapSnapshot& s : gaps)
    for (const auto& [id, g] : s.gaps) t.rows.push_back({std::to_string(s.epoch), std::to_string(id), csv::format_number(g)});
  return t;
}

DistillResult distill_student(const ExperimentConfig& config, const Dataset& dataset, const Network& teacher,
                              std::shared_ptr<const VarianceTable> frozen_table) {
  config.validate();
  const auto started = std::chrono::steady_clock::now();
  const DistillConfig& dc = config.distill;
  const Split& train = dataset.train;
  const Index n = train.size();

  // Teacher knowledge is fixed: computed once, evaluation mode, on a copy.
  Network frozen = teacher.clone();
  for (Tensor p : frozen.parameters()) p.set_requires_grad(false);
  RowMatrix targets;
  Shape target_shape;
  for (Index start = 0; start < n; start += 512) {
    const auto rows = iota_rows(start, std::min(n, start + 512));
    const Tensor t = select_target(frozen.forward(to_input(dataset.batch(train, rows), frozen), Mode::eval),
                                   dc.target, dc.tap)
                         .detach();
    if (targets.size() == 0) {
      target_shape = per_sample(t);
      targets.resize(n, numel(target_shape));
    }
    targets.middleRows(start, static_cast<Index>(rows.size())) = t.matrix();
  }

  auto init = stream(config.seed, kInit);
  auto aux = stream(config.seed, kAux);
  auto shuffle = stream(config.seed, kShuffle);
  Network student = build_network(config.student, dataset, init);

  // Probe the student's target extent to decide whether a projector is needed.
  Shape student_shape;
  {
    const std::vector<Index> probe{0, std::min<Index>(1, n - 1)};
    const Tensor s = select_target(student.forward(to_input(dataset.batch(train, probe), student), Mode::eval),
                                   dc.target, dc.tap);
    student_shape = per_sample(s);
  }
  std::optional<Projector> projector;
  if (student_shape != target_shape) {
    if (dc.target == TargetKind::logits || dc.target == TargetKind::attention_map) {
      throw ShapeError("student " + to_string(student_shape) + " and teacher " + to_string(target_shape) +
                       " targets differ and cannot be projected");
    }
    projector.emplace(student_shape, target_shape, aux);
  }
  auto student_target = [&](const ForwardResult& fwd) {
    const Tensor s = select_target(fwd, dc.target, dc.tap);
    return projector ? (*projector)(s) : s;
  };

  std::optional<VarianceHead> head;
  if (config.pad.enabled) {
    const Index vdim = config.pad.variance_mode == VarianceMode::per_dimension ? numel(target_shape) : 1;
    head.emplace(student.embedding_dim(), vdim, aux, config.pad.head_weight_std, config.pad.head_gamma_init);
  }

  WeightingScheme scheme;
  if (!config.pad.enabled) {
    scheme.kind = config.scheme_kind();
    scheme.temperature = config.weighting.temperature;
    scheme.alpha = config.weighting.alpha;
    scheme.discard = config.weighting.discard;
    if (scheme.kind == WeightingScheme::Kind::frozen_pad) {
      if (frozen_table) {
        scheme.table = std::move(frozen_table);
      } else if (config.weighting.variance_table == "from_pad") {
        throw ConfigError("weighting.variance_table = from_pad must be resolved by the runner");
      } else {
        scheme.table = std::make_shared<VarianceTable>(csv::read_variance_table(config.weighting.variance_table));
      }
    }
  }

  std::vector<Tensor> params = trained_parameters(student, config.task);
  if (projector) params = concat(std::move(params), projector->parameters());
  if (head) params = concat(std::move(params), head->parameters());

  TrainReport report;
  const Metric metric = primary_metric(config.task);
  report.final_metric_name = std::string(to_string(metric));

  auto eval_gaps = [&]() {
    Array gaps(n);
    for (Index start = 0; start < n; start += 512) {
      const auto rows = iota_rows(start, std::min(n, start + 512));
      const Tensor s = student_target(student.forward(to_input(dataset.batch(train, rows), student), Mode::eval));
      const Tensor t = rows_as_tensor(targets, rows, target_shape);
      gaps.segment(start, static_cast<Index>(rows.size())) = gap(DistillTarget(dc.target, t, s)).values();
    }
    return gaps;
  };
  auto snapshot = [&](Index epoch, const Array& gaps) {
    GapSnapshot snap{epoch, {}};
    for (Index i = 0; i < n; ++i) snap.gaps.emplace(train.ids[static_cast<std::size_t>(i)], gaps[i]);
    report.gaps.push_back(std::move(snap));
  };
  auto log_eval = [&](Index epoch, const Array& gaps) {
    report.rows.push_back({epoch, "train", "mean_gap", gaps.mean()});
    report.rows.push_back({epoch, "test", std::string(to_string(metric)),
                           evaluate(student, dataset, dataset.test, metric, config.seed)});
    if (config.task == Task::metric) {
      report.rows.push_back({epoch, "test", "mAP",
                             evaluate(student, dataset, dataset.test, Metric::mean_average_precision, config.seed)});
    }
  };

  {
    const Array gaps = eval_gaps();
    log_eval(0, gaps);
    if (config.train.epochs == 0) snapshot(0, gaps);
  }

  const WarmupSchedule schedule{dc.warmup_epochs, dc.lambda};
  for (Index epoch = 1; epoch <= config.train.epochs; ++epoch) {
    const Scalar lambda = lambda_at(schedule, epoch - 1);
    Scalar task_sum = 0.0, distill_sum = 0.0;
    Index batches = 0;
    for (const auto& rows : epoch_batches(n, config.train.batch_size, shuffle)) {
      try {
        const ForwardResult fwd = student.forward(to_input(dataset.batch(train, rows), student), Mode::train);
        const auto labels = gather_labels(train, rows);
        const Tensor task = task_loss(config.task, fwd, labels);
        const Tensor s = student_target(fwd);
        const Tensor t = rows_as_tensor(targets, rows, target_shape);
        Tensor distill;
        if (dc.target == TargetKind::logits) {
          distill = hkd_loss(s, t, dc.temperature);
        } else if (head) {
          const VariancePrediction var{predict_log_variance(*head, fwd.embedding, Mode::train)};
          distill = pad_loss(s, t, var).total;
        } else {
          const Tensor d = gap(DistillTarget(dc.target, t, s));
          std::vector<SampleId> ids;
          for (Index r : rows) ids.push_back(train.ids[static_cast<std::size_t>(r)]);
          distill = weighted_distill_loss(d, batch_weights(scheme, d.values(), ids));
        }
        task_sum += task.item();
        distill_sum += distill.item();
        backward(total_loss(task, distill, lambda));
      } catch (const DomainError& e) {
        throw TrainingDiverged("student diverged at epoch " + std::to_string(epoch) + ", batch " +
                               std::to_string(batches) + ": " + e.what());
      }
      sgd_step(params, config.optim.lr, config.optim.momentum, config.optim.weight_decay);
      zero_grads(params);
      ++batches;
    }
    const auto per_batch = static_cast<Scalar>(std::max<Index>(batches, 1));
    report.rows.push_back({epoch, "train", "task_loss", task_sum / per_batch});
    report.rows.push_back({epoch, "train", "distill_loss", distill_sum / per_batch});
    report.rows.push_back({epoch, "train", "lambda", lambda});
    const Array gaps = eval_gaps();
    log_eval(epoch, gaps);
    if (epoch % config.train.gap_log_every == 0 || epoch == config.train.epochs) snapshot(epoch, gaps);
  }

  report.final_metric = report.rows.back().metric == report.final_metric_name
                            ? report.rows.back().value
                            : report.metric(config.train.epochs, "test", report.final_metric_name);
  if (head) {
    auto result = extract_variance_table(student, *head, to_input(dataset.all(train), student), train.ids);
    report.variances = std::move(result.table);
    report.head_untrained = result.head_untrained;
  }
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return DistillResult{std::move(student), std::move(report)};
}

}  // namespace kdlab
