#include "kdlab/config.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include "kdlab/csv.hpp"

namespace kdlab {

std::string_view to_string(Task task) { return task == Task::classification ? "classification" : "metric"; }

Task parse_task(std::string_view name) {
  if (name == "classification") return Task::classification;
  if (name == "metric") return Task::metric;
  throw ConfigError("unknown task '" + std::string(name) + "'");
}

namespace {

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

Scalar to_scalar(std::string_view key, std::string_view v) {
  try {
    return csv::parse_number(v);
  } catch (const std::exception&) {
    throw ConfigError("'" + std::string(key) + "' expects a number, got '" + std::string(v) + "'");
  }
}

template <typename Int>
Int to_int(std::string_view key, std::string_view v) {
  Int out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || ptr != v.data() + v.size()) {
    throw ConfigError("'" + std::string(key) + "' expects an integer, got '" + std::string(v) + "'");
  }
  return out;
}

bool to_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("'" + std::string(key) + "' expects true or false, got '" + std::string(v) + "'");
}

struct Field {
  std::string key;
  std::function<void(ExperimentConfig&, std::string_view)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

#define KD_SCALAR(KEY, MEMBER)                                                               \
  Field {                                                                                    \
    KEY, [](ExperimentConfig& c, std::string_view v) { c.MEMBER = to_scalar(KEY, v); },      \
        [](const ExperimentConfig& c) { return csv::format_number(c.MEMBER); }               \
  }
#define KD_INT(KEY, MEMBER, TYPE)                                                            \
  Field {                                                                                    \
    KEY, [](ExperimentConfig& c, std::string_view v) { c.MEMBER = to_int<TYPE>(KEY, v); },   \
        [](const ExperimentConfig& c) { return std::to_string(c.MEMBER); }                   \
  }
#define KD_STRING(KEY, MEMBER)                                                               \
  Field {                                                                                    \
    KEY, [](ExperimentConfig& c, std::string_view v) { c.MEMBER = std::string(v); },         \
        [](const ExperimentConfig& c) { return c.MEMBER; }                                   \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> all = {
      KD_STRING("name", name),
      KD_INT("seed", seed, std::uint64_t),
      Field{"task", [](ExperimentConfig& c, std::string_view v) { c.task = parse_task(v); },
            [](const ExperimentConfig& c) { return std::string(to_string(c.task)); }},
      Field{"dataset.kind", [](ExperimentConfig& c, std::string_view v) { c.dataset.kind = parse_dataset_kind(v); },
            [](const ExperimentConfig& c) { return std::string(to_string(c.dataset.kind)); }},
      KD_INT("dataset.classes", dataset.classes, Index),
      KD_INT("dataset.dim", dataset.dim, Index),
      KD_INT("dataset.train_per_class", dataset.train_per_class, Index),
      KD_INT("dataset.test_per_class", dataset.test_per_class, Index),
      KD_SCALAR("dataset.spread", dataset.spread),
      KD_SCALAR("dataset.center_range", dataset.center_range),
      KD_SCALAR("dataset.label_noise", dataset.label_noise),
      KD_SCALAR("dataset.spiral_noise", dataset.spiral_noise),
      KD_SCALAR("dataset.spiral_turns", dataset.spiral_turns),
      KD_STRING("dataset.train_images", dataset.train_images),
      KD_STRING("dataset.train_labels", dataset.train_labels),
      KD_STRING("dataset.test_images", dataset.test_images),
      KD_STRING("dataset.test_labels", dataset.test_labels),
      KD_INT("dataset.limit", dataset.limit, Index),
      KD_INT("dataset.seed", dataset.seed, std::uint64_t),
      KD_STRING("teacher.arch", teacher.net.arch),
      KD_INT("teacher.width", teacher.net.width, Index),
      KD_INT("teacher.depth", teacher.net.depth, Index),
      KD_INT("teacher.embedding_dim", teacher.net.embedding_dim, Index),
      KD_INT("teacher.epochs", teacher.epochs, Index),
      KD_SCALAR("teacher.lr", teacher.lr),
      KD_INT("teacher.seed", teacher.seed, std::uint64_t),
      KD_STRING("student.arch", student.arch),
      KD_INT("student.width", student.width, Index),
      KD_INT("student.depth", student.depth, Index),
      KD_INT("student.embedding_dim", student.embedding_dim, Index),
      Field{"distill.target", [](ExperimentConfig& c, std::string_view v) { c.distill.target = parse_target_kind(v); },
            [](const ExperimentConfig& c) { return std::string(to_string(c.distill.target)); }},
      KD_STRING("distill.tap", distill.tap),
      KD_SCALAR("distill.lambda", distill.lambda),
      KD_INT("distill.warmup_epochs", distill.warmup_epochs, Index),
      KD_SCALAR("distill.temperature", distill.temperature),
      Field{"weighting.scheme",
            [](ExperimentConfig& c, std::string_view v) {
              if (v != "none") parse_scheme_kind(v);
              c.weighting.scheme = std::string(v);
            },
            [](const ExperimentConfig& c) { return c.scheme_name(); }},
      KD_SCALAR("weighting.T", weighting.temperature),
      KD_SCALAR("weighting.alpha", weighting.alpha),
      KD_INT("weighting.k", weighting.discard, Index),
      KD_STRING("weighting.variance_table", weighting.variance_table),
      Field{"pad.enabled", [](ExperimentConfig& c, std::string_view v) { c.pad.enabled = to_bool("pad.enabled", v); },
            [](const ExperimentConfig& c) { return std::string(c.pad.enabled ? "true" : "false"); }},
      Field{"pad.variance_mode",
            [](ExperimentConfig& c, std::string_view v) { c.pad.variance_mode = parse_variance_mode(v); },
            [](const ExperimentConfig& c) { return std::string(to_string(c.pad.variance_mode)); }},
      KD_SCALAR("pad.head_weight_std", pad.head_weight_std),
      KD_SCALAR("pad.head_gamma_init", pad.head_gamma_init),
      KD_SCALAR("optim.lr", optim.lr),
      KD_SCALAR("optim.momentum", optim.momentum),
      KD_SCALAR("optim.weight_decay", optim.weight_decay),
      KD_INT("train.epochs", train.epochs, Index),
      KD_INT("train.batch_size", train.batch_size, Index),
      KD_INT("train.gap_log_every", train.gap_log_every, Index),
  };
  return all;
}

#undef KD_SCALAR
#undef KD_INT
#undef KD_STRING

const Field& field(std::string_view key) {
  for (const Field& f : fields())
    if (f.key == key) return f;
  throw ConfigError("unknown config key '" + std::string(key) + "'");
}

bool is_path_key(std::string_view key) {
  return key == "dataset.train_images" || key == "dataset.train_labels" || key == "dataset.test_images" ||
         key == "dataset.test_labels" || key == "weighting.variance_table";
}

void require(bool ok, const std::string& message) {
  if (!ok) throw ConfigError(message);
}

std::vector<std::string> tap_names(const NetConfig& net) {
  if (net.arch == "convnet") return {"block1", "block2", "embedding"};
  std::vector<std::string> out;
  for (Index b = 1; b < net.depth; ++b) out.push_back("block" + std::to_string(b));
  out.push_back("embedding");
  return out;
}

void validate_net(const NetConfig& net, std::string_view who) {
  const std::string w(who);
  require(net.arch == "mlp" || net.arch == "convnet", w + ".arch must be mlp or convnet");
  require(net.width >= 1 && net.depth >= 1 && net.embedding_dim >= 1, w + " extents must be positive");
}

}  // namespace

std::string ExperimentConfig::scheme_name() const {
  if (weighting.scheme) return *weighting.scheme;
  return pad.enabled ? "none" : "equal";
}

WeightingScheme::Kind ExperimentConfig::scheme_kind() const { return parse_scheme_kind(scheme_name()); }

void ExperimentConfig::set(std::string_view key, std::string_view value) { field(key).set(*this, trim(value)); }

std::string ExperimentConfig::get(std::string_view key) const { return field(key).get(*this); }

const std::vector<std::string>& ExperimentConfig::keys() {
  static const std::vector<std::string> all = [] {
    std::vector<std::string> k;
    for (const Field& f : fields()) k.push_back(f.key);
    return k;
  }();
  return all;
}

ExperimentConfig ExperimentConfig::parse(std::string_view text, const std::filesystem::path& base_dir) {
  ExperimentConfig cfg;
  std::set<std::string> seen;
  std::istringstream in{std::string(text)};
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const std::string line = trim(raw.substr(0, raw.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(line_no) + ": expected 'key = value'");
    }
    const std::string key = trim(std::string_view(line).substr(0, eq));
    std::string value = trim(std::string_view(line).substr(eq + 1));
    if (!seen.insert(key).second) throw ConfigError("line " + std::to_string(line_no) + ": duplicate key '" + key + "'");
    if (is_path_key(key) && !value.empty() && value != "from_pad" && !base_dir.empty() &&
        std::filesystem::path(value).is_relative()) {
      value = (base_dir / value).lexically_normal().string();
    }
    try {
      cfg.set(key, value);
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), std::filesystem::absolute(path).parent_path());
}

void ExperimentConfig::validate() const {
  using K = WeightingScheme::Kind;
  if (pad.enabled && weighting.scheme && *weighting.scheme != "none") {
    throw ConfigError("XOR rule: weighting.scheme = " + *weighting.scheme +
                      " and pad.enabled = true; exactly one weighting mechanism may be active");
  }
  if (!pad.enabled && weighting.scheme && *weighting.scheme == "none") {
    throw ConfigError("XOR rule: weighting.scheme = none needs pad.enabled = true");
  }
  std::optional<K> kind;
  if (!pad.enabled) kind = scheme_kind();

  require(dataset.classes >= 2 && dataset.dim >= 1, "dataset needs >= 2 classes and dim >= 1");
  require(dataset.train_per_class >= 1 && dataset.test_per_class >= 1, "dataset split sizes must be positive");
  require(dataset.label_noise >= 0.0 && dataset.label_noise < 1.0, "dataset.label_noise must lie in [0, 1)");
  require(dataset.spread > 0.0, "dataset.spread must be positive");
  require(dataset.limit >= 0, "dataset.limit must be >= 0");
  if (dataset.kind == DatasetKind::idx_images) {
    require(!dataset.train_images.empty() && !dataset.train_labels.empty() && !dataset.test_images.empty() &&
                !dataset.test_labels.empty(),
            "idx_images needs dataset.{train,test}_{images,labels}");
  }
  validate_net(teacher.net, "teacher");
  validate_net(student, "student");
  const bool images = dataset.kind == DatasetKind::idx_images;
  require(images || (teacher.net.arch == "mlp" && student.arch == "mlp"), "convnet needs idx_images data");
  require(teacher.epochs >= 0 && teacher.lr > 0.0, "teacher.epochs >= 0 and teacher.lr > 0 required");

  require(distill.lambda >= 0.0, "distill.lambda must be >= 0");
  require(distill.warmup_epochs >= 0, "distill.warmup_epochs must be >= 0");
  require(distill.temperature > 0.0, "distill.temperature must be positive");
  if (distill.target == TargetKind::logits) {
    require(!pad.enabled && kind == K::equal,
            "logits target uses HKD and accepts only weighting.scheme = equal without PAD");
    require(task == Task::classification, "logits target needs task = classification");
  }
  if (distill.target == TargetKind::feature_map || distill.target == TargetKind::attention_map) {
    for (const NetConfig* net : {&teacher.net, &student}) {
      const auto taps = tap_names(*net);
      require(std::find(taps.begin(), taps.end(), distill.tap) != taps.end(),
              "distill.tap '" + distill.tap + "' is not a tap of the " + net->arch);
    }
  }
  if (distill.target == TargetKind::attention_map) {
    require(teacher.net.arch == "convnet" && student.arch == "convnet" && distill.tap != "embedding",
            "attention_map needs convolutional taps");
  }

  if (kind == K::soft_exp || kind == K::hard_mining) require(weighting.temperature > 0.0, "weighting.T must be positive");
  if (kind == K::soft_poly) require(weighting.alpha > 0.0, "weighting.alpha must be positive");
  if (kind == K::hard_discard) require(weighting.discard >= 0, "weighting.k must be >= 0");
  if (kind == K::frozen_pad) require(!weighting.variance_table.empty(), "frozen_pad needs weighting.variance_table");

  require(pad.head_weight_std >= 0.0, "pad.head_weight_std must be >= 0");
  require(optim.lr > 0.0, "optim.lr must be positive");
  require(optim.momentum >= 0.0 && optim.momentum < 1.0, "optim.momentum must lie in [0, 1)");
  require(optim.weight_decay >= 0.0, "optim.weight_decay must be >= 0");
  require(train.epochs >= 0, "train.epochs must be >= 0");
  require(train.batch_size >= 2, "train.batch_size must be >= 2");
  require(train.gap_log_every >= 1, "train.gap_log_every must be >= 1");
}

std::string ExperimentConfig::canonical_text() const {
  std::string out;
  for (const Field& f : fields()) out += f.key + " = " + f.get(*this) + "\n";
  return out;
}

std::string ExperimentConfig::hash() const {
  std::string text;
  for (const Field& f : fields())
    if (f.key != "name") text += f.key + " = " + f.get(*this) + "\n";
  return fnv1a_hex(text);
}

std::string ExperimentConfig::teacher_hash() const {
  std::string text;
  for (const Field& f : fields()) {
    if (f.key.starts_with("dataset.") || f.key.starts_with("teacher.") || f.key == "task" ||
        f.key == "train.batch_size") {
      text += f.key + " = " + f.get(*this) + "\n";
    }
  }
  return fnv1a_hex(text);
}

std::string fnv1a_hex(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace kdlab
