#pragma once

// Run configuration: UTF-8 text, one `key = value` per line, `#` starts a
// comment. Every key must appear in the schema below.

#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "pvit/errors.hpp"

namespace pvit {

enum class ValueKind { string, integer, u64, real, list, path };

struct ConfigKey {
  std::string_view name;
  ValueKind kind;
  std::string_view fallback;
  std::string_view help;
};

// Empty fallbacks for paths resolve relative to the output directory.
inline const std::vector<ConfigKey>& config_schema() {
  static const std::vector<ConfigKey> keys{
      {"seed", ValueKind::u64, "0", "seed for model init, shuffling and prior training"},
      {"out", ValueKind::path, "run", "output directory"},

      {"data.source", ValueKind::string, "synth", "synth | idx"},
      {"data.train_images", ValueKind::path, "", "IDX images for ID-train (data.source = idx)"},
      {"data.train_labels", ValueKind::path, "", "IDX labels for ID-train"},
      {"data.test_images", ValueKind::path, "", "IDX images for ID-test"},
      {"data.test_labels", ValueKind::path, "", "IDX labels for ID-test"},
      {"data.classes", ValueKind::integer, "4", "number of ID classes"},
      {"data.train_per_class", ValueKind::integer, "500", "synthetic ID-train samples per class"},
      {"data.test_per_class", ValueKind::integer, "100", "synthetic ID-test samples per class"},
      {"data.family", ValueKind::string, "stripes", "stripes | rings"},
      {"data.noise", ValueKind::real, "0.25", "Gaussian pixel noise sigma"},
      {"data.seed", ValueKind::u64, "7", "synthetic data seed"},
      {"data.image_size", ValueKind::integer, "28", "synthetic image side"},
      {"data.mean", ValueKind::real, "0.5", "normalization mean"},
      {"data.std", ValueKind::real, "0.5", "normalization std"},

      {"ood.sets", ValueKind::list, "uniform-noise,pattern-shift",
       "OOD sets: uniform-noise | pattern-shift | inverted | idx:<images path>"},
      {"ood.n", ValueKind::integer, "400", "samples per generated OOD set"},
      {"ood.seed", ValueKind::u64, "11", "OOD generator seed"},

      {"prior.source", ValueKind::string, "model", "model | logits"},
      {"prior.checkpoint", ValueKind::path, "", "prior checkpoint (default <out>/prior.ckpt)"},
      {"prior.logits_dir", ValueKind::path, "", "prior logits directory (default <out>/logits)"},
      {"prior.hidden", ValueKind::integer, "64", "prior MLP hidden width"},
      {"prior.epochs", ValueKind::integer, "10", ""},
      {"prior.batch_size", ValueKind::integer, "32", ""},
      {"prior.lr", ValueKind::real, "0.001", ""},
      {"prior.warmup_epochs", ValueKind::integer, "1", ""},
      {"prior.weight_decay", ValueKind::real, "0.001", ""},

      {"model.image_size", ValueKind::integer, "28", ""},
      {"model.channels", ValueKind::integer, "1", ""},
      {"model.patch", ValueKind::integer, "7", ""},
      {"model.dim", ValueKind::integer, "64", ""},
      {"model.depth", ValueKind::integer, "4", ""},
      {"model.heads", ValueKind::integer, "4", ""},
      {"model.mlp_dim", ValueKind::integer, "128", ""},
      {"model.alpha", ValueKind::real, "0.1", "prior token scale"},
      {"model.prior_broadcast", ValueKind::string, "sample", "sample | batch (training only)"},
      {"model.checkpoint", ValueKind::path, "", "PViT checkpoint (default <out>/pvit.ckpt)"},

      {"train.epochs", ValueKind::integer, "10", ""},
      {"train.batch_size", ValueKind::integer, "32", ""},
      {"train.lr", ValueKind::real, "0.0003", ""},
      {"train.warmup_epochs", ValueKind::integer, "1", ""},
      {"train.beta1", ValueKind::real, "0.9", ""},
      {"train.beta2", ValueKind::real, "0.999", ""},
      {"train.weight_decay", ValueKind::real, "0.001", ""},
      {"train.resume", ValueKind::path, "", "continue from this PViT checkpoint"},

      {"score.guidance", ValueKind::list, "ce", "ce | kl | ed (comma list)"},
      {"score.source", ValueKind::string, "model", "model | logits (predicted logits from files)"},
      {"score.predicted_logits_dir", ValueKind::path, "", "predicted logits directory for score.source = logits"},

      {"eval.fields", ValueKind::list, "pge", "score fields: pge base guidance msp max_logit energy"},
      {"eval.orientation", ValueKind::string, "auto", "auto | as-is | negated"},
      {"eval.bins", ValueKind::integer, "30", "histogram bins"},

      {"attention.split", ValueKind::string, "id-test", "dataset to dump"},
      {"attention.samples", ValueKind::integer, "8", "first n samples of the split"},
      {"attention.layer", ValueKind::integer, "-1", "-1 = last layer"},
      {"attention.head", ValueKind::integer, "0", ""},
      {"attention.alphas", ValueKind::list, "", "alphas to compare (default: model alpha)"},

      {"export.model", ValueKind::string, "prior", "prior | pvit"},
      {"export.dir", ValueKind::path, "", "export directory (default <out>/exported/<model>)"},
  };
  return keys;
}

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline const ConfigKey* find_key(std::string_view name) {
  for (const auto& k : config_schema()) {
    if (k.name == name) return &k;
  }
  return nullptr;
}

template <typename T>
bool parse_number(const std::string& s, T& out) {
  const auto* end = s.data() + s.size();
  auto res = std::from_chars(s.data(), end, out);
  return res.ec == std::errc() && res.ptr == end;
}

inline void check_value(const ConfigKey& key, const std::string& v, const std::string& where) {
  auto bad = [&](const char* what) {
    throw ConfigError(where + "key '" + std::string(key.name) + "' expects " + what + ", got '" + v + "'");
  };
  switch (key.kind) {
    case ValueKind::integer: {
      long long x;
      if (!parse_number(v, x)) bad("an integer");
      break;
    }
    case ValueKind::u64: {
      std::uint64_t x;
      if (!parse_number(v, x)) bad("an unsigned integer");
      break;
    }
    case ValueKind::real: {
      double x;
      if (!parse_number(v, x)) bad("a number");
      break;
    }
    default: break;
  }
}

}  // namespace detail

class RunConfig {
 public:
  RunConfig() = default;

  static RunConfig parse(std::istream& in, const std::string& origin = "<config>") {
    RunConfig c;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const std::string where = origin + ":" + std::to_string(lineno) + ": ";
      if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
      const std::string body = detail::trim(line);
      if (body.empty()) continue;
      const auto eq = body.find('=');
      if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value'");
      const std::string key = detail::trim(std::string_view(body).substr(0, eq));
      const std::string value = detail::trim(std::string_view(body).substr(eq + 1));
      if (c.values_.contains(key)) throw ConfigError(where + "duplicate key '" + key + "'");
      c.set(key, value, where);
    }
    return c;
  }

  static RunConfig parse_string(const std::string& text) {
    std::istringstream in(text);
    return parse(in);
  }

  static RunConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config '" + path + "'");
    return parse(in, path);
  }

  void set(const std::string& key, const std::string& value, const std::string& where = "") {
    const ConfigKey* k = detail::find_key(key);
    if (!k) throw ConfigError(where + "unknown key '" + key + "'");
    detail::check_value(*k, value, where);
    values_[key] = value;
  }

  bool has(const std::string& key) const { return values_.contains(key); }

  std::string str(const std::string& key) const { return raw(key); }

  long long integer(const std::string& key) const {
    long long v = 0;
    detail::parse_number(raw(key), v);
    return v;
  }

  std::size_t count(const std::string& key) const {
    const long long v = integer(key);
    if (v < 0) throw ConfigError("key '" + key + "' must be nonnegative");
    return static_cast<std::size_t>(v);
  }

  std::uint64_t u64(const std::string& key) const {
    std::uint64_t v = 0;
    detail::parse_number(raw(key), v);
    return v;
  }

  double real(const std::string& key) const {
    double v = 0;
    detail::parse_number(raw(key), v);
    return v;
  }

  std::vector<std::string> list(const std::string& key) const {
    std::vector<std::string> out;
    std::stringstream ss(raw(key));
    std::string item;
    while (std::getline(ss, item, ',')) {
      item = detail::trim(item);
      if (!item.empty()) out.push_back(item);
    }
    return out;
  }

  /// A required path: empty values fail with a message naming the key.
  std::string require(const std::string& key) const {
    std::string v = raw(key);
    if (v.empty()) throw ConfigError("missing required key '" + key + "'");
    return v;
  }

  /// Every schema key with its effective value, in schema order.
  std::string resolved() const {
    std::string out;
    for (const auto& k : config_schema()) {
      out += std::string(k.name) + " = " + raw(std::string(k.name)) + "\n";
    }
    return out;
  }

  void write_resolved(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot write '" + path + "'");
    out << resolved();
  }

 private:
  std::string raw(const std::string& key) const {
    const ConfigKey* k = detail::find_key(key);
    if (!k) throw ConfigError("unknown key '" + key + "'");
    auto it = values_.find(key);
    return it != values_.end() ? it->second : std::string(k->fallback);
  }

  std::map<std::string, std::string> values_;
};

}  // namespace pvit
