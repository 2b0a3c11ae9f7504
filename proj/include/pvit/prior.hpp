#pragma once

// Prior logits: a small in-repo classifier or an external logits table.

#include <cmath>
#include <fstream>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

#include "json.hpp"
#include "pvit/data.hpp"
#include "pvit/errors.hpp"
#include "pvit/optim.hpp"
#include "pvit/rng.hpp"
#include "pvit/tensor.hpp"

namespace pvit {

struct MlpConfig {
  std::size_t input_dim = 784;
  std::size_t hidden_dim = 64;
  std::size_t num_classes = 4;

  bool operator==(const MlpConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const MlpConfig& c) {
  j = nlohmann::json{{"input_dim", c.input_dim}, {"hidden_dim", c.hidden_dim},
                     {"num_classes", c.num_classes}};
}

inline void from_json(const nlohmann::json& j, MlpConfig& c) {
  j.at("input_dim").get_to(c.input_dim);
  j.at("hidden_dim").get_to(c.hidden_dim);
  j.at("num_classes").get_to(c.num_classes);
}

/// Two-layer GELU MLP over flattened pixels.
class PriorMlp {
 public:
  explicit PriorMlp(MlpConfig config, std::uint64_t seed = 0) : config_(config) {
    if (config_.input_dim == 0 || config_.hidden_dim == 0 || config_.num_classes == 0) {
      throw ConfigError("prior MLP dimensions must be positive");
    }
    hidden_weight = Tensor({config_.input_dim, config_.hidden_dim});
    hidden_bias = Tensor({1, config_.hidden_dim});
    out_weight = Tensor({config_.hidden_dim, config_.num_classes});
    out_bias = Tensor({1, config_.num_classes});
    CounterRng rng(seed, /*stream=*/0x4d4c50);
    // Scaled so hidden pre-activations start near unit variance.
    const double s1 = 1.0 / std::sqrt(static_cast<double>(config_.input_dim));
    const double s2 = 1.0 / std::sqrt(static_cast<double>(config_.hidden_dim));
    for (auto& v : hidden_weight.data) v = rng.truncated_normal(s1);
    for (auto& v : out_weight.data) v = rng.truncated_normal(s2);
    for (auto& [name, t] : parameters()) t->requires_grad = true;
  }

  const MlpConfig& config() const { return config_; }

  ParamList parameters() {
    return {{"fc1.weight", &hidden_weight}, {"fc1.bias", &hidden_bias},
            {"fc2.weight", &out_weight}, {"fc2.bias", &out_bias}};
  }
  std::vector<std::pair<std::string, const Tensor*>> parameters() const {
    return {{"fc1.weight", &hidden_weight}, {"fc1.bias", &hidden_bias},
            {"fc2.weight", &out_weight}, {"fc2.bias", &out_bias}};
  }

  Tensor hidden_weight, hidden_bias, out_weight, out_bias;

 private:
  MlpConfig config_;
};

/// Flattened pixels of the selected images: [B, H*W*C].
inline Tensor flatten_images(const Dataset& d, std::span<const std::size_t> idx) {
  if (idx.empty()) throw ShapeError("flatten_images: empty selection");
  const std::size_t dim = d.images.at(idx[0]).pixels.size();
  Tensor out({idx.size(), dim});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto& px = d.images.at(idx[i]).pixels;
    if (px.size() != dim) throw ShapeError("flatten_images: images differ in size");
    std::copy(px.begin(), px.end(), out.data.begin() + static_cast<std::ptrdiff_t>(i * dim));
  }
  return out;
}

template <typename Leaf, typename Model>
Var mlp_logits(Leaf&& leaf, const Var& x, Model& m) {
  Var h = gelu(add_rows(matmul(x, leaf(m.hidden_weight)), leaf(m.hidden_bias)));
  return add_rows(matmul(h, leaf(m.out_weight)), leaf(m.out_bias));
}

/// Raw logits [B, K] of the prior MLP.
inline Tensor mlp_predict(const PriorMlp& m, const Tensor& flat) {
  if (flat.rank() != 2 || flat.cols() != m.config().input_dim) {
    throw ShapeError("prior MLP expects inputs of width " + std::to_string(m.config().input_dim) +
                     ", got " + shape_string(flat.shape));
  }
  Tape tape(Tape::Mode::inference);
  auto leaf = [&](const Tensor& t) { return tape.constant(Tensor(t.shape, t.data)); };
  return mlp_logits(leaf, tape.constant(flat), m).value();
}

// ---------------------------------------------------------------------------
// Logits tables

struct LogitsRecord {
  std::string id;
  std::optional<std::size_t> label;
  std::vector<double> logits;

  bool operator==(const LogitsRecord&) const = default;
};

class LogitsTable {
 public:
  LogitsTable() = default;
  LogitsTable(std::size_t k, std::string dataset, std::string model)
      : k_(k), dataset_(std::move(dataset)), model_(std::move(model)) {}

  std::size_t num_classes() const { return k_; }
  const std::string& dataset() const { return dataset_; }
  const std::string& model() const { return model_; }
  const std::vector<LogitsRecord>& records() const { return records_; }
  std::size_t size() const { return records_.size(); }

  void add(LogitsRecord r) {
    if (r.logits.size() != k_) {
      throw FormatError("record '" + r.id + "' has " + std::to_string(r.logits.size()) +
                        " logits, table expects " + std::to_string(k_));
    }
    if (index_.contains(r.id)) throw FormatError("duplicate id '" + r.id + "'");
    index_.emplace(r.id, records_.size());
    records_.push_back(std::move(r));
  }

  const LogitsRecord* find(const std::string& id) const {
    auto it = index_.find(id);
    return it == index_.end() ? nullptr : &records_[it->second];
  }

  /// Appends every record of `other` (same K, disjoint ids).
  void merge(const LogitsTable& other) {
    if (records_.empty() && k_ == 0) k_ = other.k_;
    if (other.k_ != k_) {
      throw FormatError("cannot merge logits tables with K=" + std::to_string(k_) + " and K=" +
                        std::to_string(other.k_));
    }
    for (const auto& r : other.records_) add(r);
  }

 private:
  std::size_t k_ = 0;
  std::string dataset_;
  std::string model_;
  std::vector<LogitsRecord> records_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Either a trained prior model (looked up by pixels) or a logits table
/// (looked up by sample id). Immutable and cheap to copy.
class PriorSource {
 public:
  static PriorSource from_model(PriorMlp model) {
    PriorSource s;
    s.impl_ = std::make_shared<const PriorMlp>(std::move(model));
    return s;
  }
  static PriorSource from_table(LogitsTable table) {
    PriorSource s;
    s.impl_ = std::make_shared<const LogitsTable>(std::move(table));
    return s;
  }

  bool is_model() const { return std::holds_alternative<ModelPtr>(impl_); }
  const PriorMlp& model() const { return *std::get<ModelPtr>(impl_); }
  const LogitsTable& table() const { return *std::get<TablePtr>(impl_); }

  std::size_t num_classes() const {
    return is_model() ? model().config().num_classes : table().num_classes();
  }

  /// Raw prior logits of the selected samples, [B, K].
  Tensor logits(const Dataset& d, std::span<const std::size_t> idx) const {
    if (is_model()) return mlp_predict(model(), flatten_images(d, idx));
    const std::size_t k = table().num_classes();
    Tensor out({idx.size(), k});
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const auto& id = d.ids.at(idx[i]);
      const LogitsRecord* r = table().find(id);
      if (!r) throw MissingPriorError("no prior logits for sample '" + id + "'");
      std::copy(r->logits.begin(), r->logits.end(), out.data.begin() + static_cast<std::ptrdiff_t>(i * k));
    }
    return out;
  }

  /// Prior logits for every sample of `d`, in order.
  Tensor logits(const Dataset& d) const {
    std::vector<std::size_t> idx(d.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (!is_model()) return logits(d, idx);
    // Chunked to keep inference tapes small.
    const std::size_t k = num_classes();
    Tensor out({d.size(), k});
    for (std::size_t b = 0; b < d.size(); b += 256) {
      const std::size_t e = std::min(d.size(), b + 256);
      Tensor part = logits(d, std::span<const std::size_t>(idx.data() + b, e - b));
      std::copy(part.data.begin(), part.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(b * k));
    }
    return out;
  }

 private:
  using ModelPtr = std::shared_ptr<const PriorMlp>;
  using TablePtr = std::shared_ptr<const LogitsTable>;
  std::variant<ModelPtr, TablePtr> impl_;
};

/// Raw prior logits of sample `index` in `d`.
inline std::vector<double> prior_logits(const PriorSource& source, const Dataset& d, std::size_t index) {
  const std::size_t idx[1] = {index};
  return source.logits(d, idx).data;
}

// ---------------------------------------------------------------------------
// Logits files (JSON Lines)

/// Header {"k","dataset","model"} then one {"id","label","logits"} per line.
inline void write_logits(const LogitsTable& table, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write '" + path + "'");
  out << nlohmann::json{{"k", table.num_classes()}, {"dataset", table.dataset()}, {"model", table.model()}}
             .dump()
      << '\n';
  for (const auto& r : table.records()) {
    for (double v : r.logits) {
      if (!std::isfinite(v)) throw FormatError("non-finite logit for '" + r.id + "'");
    }
    nlohmann::json j;
    j["id"] = r.id;
    j["label"] = r.label ? nlohmann::json(*r.label) : nlohmann::json(nullptr);
    j["logits"] = r.logits;
    out << j.dump() << '\n';
  }
}

inline LogitsTable load_logits(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw FormatError("'" + path + "': missing header line");
  LogitsTable table;
  try {
    const auto h = nlohmann::json::parse(line);
    table = LogitsTable(h.at("k").get<std::size_t>(), h.at("dataset").get<std::string>(),
                        h.at("model").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("'" + path + "' line 1: malformed header: " + e.what());
  }
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const std::string where = "'" + path + "' line " + std::to_string(lineno);
    LogitsRecord r;
    try {
      const auto j = nlohmann::json::parse(line);
      r.id = j.at("id").get<std::string>();
      const auto& lab = j.at("label");
      if (!lab.is_null()) r.label = lab.get<std::size_t>();
      r.logits = j.at("logits").get<std::vector<double>>();
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(where + ": malformed record: " + e.what());
    }
    if (r.logits.size() != table.num_classes()) {
      throw FormatError(where + ": expected " + std::to_string(table.num_classes()) + " logits, got " +
                        std::to_string(r.logits.size()));
    }
    double mx = -INFINITY;
    for (double v : r.logits) {
      if (!std::isfinite(v)) throw FormatError(where + ": non-finite logit");
      mx = std::max(mx, v);
    }
    double total = 0.0;
    for (double v : r.logits) total += std::exp(v - mx);
    double mass = 0.0;
    for (double v : r.logits) mass += std::exp(v - mx) / total;
    if (std::abs(mass - 1.0) > 1e-12) throw FormatError(where + ": softmax does not normalize");
    if (table.find(r.id)) throw FormatError(where + ": duplicate id '" + r.id + "'");
    table.add(std::move(r));
  }
  return table;
}

/// Logits of `source` for every sample of `d` as a table tagged with the
/// dataset name.
inline LogitsTable collect_logits(const PriorSource& source, const Dataset& d, const std::string& model_name) {
  LogitsTable table(source.num_classes(), d.name, model_name);
  if (d.size() == 0) return table;
  const Tensor all = source.logits(d);
  const std::size_t k = source.num_classes();
  for (std::size_t i = 0; i < d.size(); ++i) {
    LogitsRecord r;
    r.id = d.ids[i];
    if (d.labels) r.label = (*d.labels)[i];
    r.logits.assign(all.data.begin() + static_cast<std::ptrdiff_t>(i * k),
                    all.data.begin() + static_cast<std::ptrdiff_t>((i + 1) * k));
    table.add(std::move(r));
  }
  return table;
}

inline void export_logits(const PriorSource& source, const Dataset& d, const std::string& path,
                          const std::string& model_name = "prior-mlp") {
  write_logits(collect_logits(source, d, model_name), path);
}

inline PriorSource load_prior_logits(const std::string& path) { return PriorSource::from_table(load_logits(path)); }

// ---------------------------------------------------------------------------
// Training

/// Rows of `logits` whose argmax (lowest index on ties) equals the label.
inline std::size_t count_correct(const Tensor& logits, std::span<const std::size_t> labels) {
  std::size_t correct = 0;
  const std::size_t k = logits.cols();
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double* z = logits.data.data() + i * k;
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j)
      if (z[j] > z[best]) best = j;
    correct += best == labels[i];
  }
  return correct;
}

inline double accuracy(const Tensor& logits, std::span<const std::size_t> labels) {
  if (labels.empty()) return 0.0;
  return static_cast<double>(count_correct(logits, labels)) / static_cast<double>(labels.size());
}

struct PriorTraining {
  PriorSource source;
  TrainHistory history;
  double train_accuracy = 0.0;
};

/// Trains a PriorMlp on a labeled dataset and wraps it as a source.
inline PriorTraining train_prior_model(const Dataset& train, std::size_t hidden_dim,
                                       const TrainConfig& cfg) {
  if (train.size() == 0) throw ConfigError("cannot train a prior model on an empty dataset");
  if (!train.labels) throw ConfigError("prior training needs a labeled dataset");
  PriorMlp mlp({train.images.front().pixels.size(), hidden_dim, train.num_classes}, cfg.seed);
  OptimizerState state;
  const auto& labels = *train.labels;
  auto params = mlp.parameters();
  TrainHistory history;
  if (cfg.epochs > 0) {
    history = fit(params, train.size(), cfg, state, [&](Tape& tape, std::span<const std::size_t> idx) {
      auto leaf = [&](Tensor& t) { return tape.param(t); };
      Var logits = mlp_logits(leaf, tape.constant(flatten_images(train, idx)), mlp);
      std::vector<std::size_t> targets(idx.size());
      for (std::size_t i = 0; i < idx.size(); ++i) targets[i] = labels[idx[i]];
      BatchResult r;
      r.correct = count_correct(logits.value(), targets);
      r.loss = cross_entropy(logits, targets);
      return r;
    });
  }
  PriorTraining out{PriorSource::from_model(std::move(mlp)), std::move(history), 0.0};
  out.train_accuracy = accuracy(out.source.logits(train), labels);
  return out;
}

}  // namespace pvit
