#pragma once

// Confidence scores. Every score here is oriented so that higher means
// "more in-distribution" unless a DecisionRule says otherwise.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "pvit/data.hpp"
#include "pvit/errors.hpp"
#include "pvit/model.hpp"
#include "pvit/prior.hpp"
#include "pvit/trainer.hpp"

namespace pvit {

/// Floor applied to probabilities before taking logs.
inline constexpr double kProbabilityFloor = 1e-12;

enum class GuidanceKind { ce, kl, ed };

inline std::string to_string(GuidanceKind g) {
  switch (g) {
    case GuidanceKind::ce: return "ce";
    case GuidanceKind::kl: return "kl";
    case GuidanceKind::ed: return "ed";
  }
  return "unknown";
}

inline GuidanceKind parse_guidance(const std::string& s) {
  if (s == "ce") return GuidanceKind::ce;
  if (s == "kl") return GuidanceKind::kl;
  if (s == "ed") return GuidanceKind::ed;
  throw ConfigError("unknown guidance '" + s + "' (ce | kl | ed)");
}

namespace detail {

inline void require_finite(std::span<const double> z, const char* what) {
  if (z.empty()) throw ShapeError(std::string(what) + ": empty logits");
  for (double v : z) {
    if (!std::isfinite(v)) throw std::invalid_argument(std::string(what) + ": non-finite logit");
  }
}

inline double lse(std::span<const double> z) {
  const double mx = *std::max_element(z.begin(), z.end());
  double total = 0.0;
  for (double v : z) total += std::exp(v - mx);
  return mx + std::log(total);
}

inline std::vector<double> probabilities(std::span<const double> z) {
  const double l = lse(z);
  std::vector<double> p(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) p[i] = std::exp(z[i] - l);
  return p;
}

inline void require_same_k(std::span<const double> a, std::span<const double> b, const char* what) {
  if (a.size() != b.size()) {
    throw ShapeError(std::string(what) + ": K mismatch (" + std::to_string(a.size()) + " vs " +
                     std::to_string(b.size()) + ")");
  }
}

}  // namespace detail

/// E = -logsumexp(logits).
inline double energy(std::span<const double> logits) {
  detail::require_finite(logits, "energy");
  return -detail::lse(logits);
}

/// Negative energy.
inline double base_score(std::span<const double> logits) { return -energy(logits); }

inline double msp(std::span<const double> logits) {
  detail::require_finite(logits, "msp");
  const double mx = *std::max_element(logits.begin(), logits.end());
  return std::exp(mx - detail::lse(logits));
}

inline double max_logit(std::span<const double> logits) {
  detail::require_finite(logits, "max_logit");
  return *std::max_element(logits.begin(), logits.end());
}

/// Cross-entropy of the predicted class under the prior distribution:
/// -log max(softmax(prior)[k], floor).
inline double guidance_ce(std::span<const double> prior_logits, std::size_t predicted_class) {
  detail::require_finite(prior_logits, "guidance_ce");
  if (predicted_class >= prior_logits.size()) {
    throw ShapeError("guidance_ce: class " + std::to_string(predicted_class) + " out of range for K=" +
                     std::to_string(prior_logits.size()));
  }
  const double q = std::exp(prior_logits[predicted_class] - detail::lse(prior_logits));
  return -std::log(std::max(q, kProbabilityFloor));
}

/// KL(prior || predicted) between the softmaxed logit vectors, both floored.
inline double guidance_kl(std::span<const double> prior_logits, std::span<const double> predicted_logits) {
  detail::require_same_k(prior_logits, predicted_logits, "guidance_kl");
  detail::require_finite(prior_logits, "guidance_kl");
  detail::require_finite(predicted_logits, "guidance_kl");
  const auto p = detail::probabilities(prior_logits);
  const auto q = detail::probabilities(predicted_logits);
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double pi = std::max(p[i], kProbabilityFloor);
    const double qi = std::max(q[i], kProbabilityFloor);
    kl += pi * std::log(pi / qi);
  }
  // Rounding can leave -1e-17 when the distributions coincide.
  return std::max(kl, 0.0);
}

/// Euclidean distance between raw logit vectors.
inline double guidance_ed(std::span<const double> prior_logits, std::span<const double> predicted_logits) {
  detail::require_same_k(prior_logits, predicted_logits, "guidance_ed");
  detail::require_finite(prior_logits, "guidance_ed");
  detail::require_finite(predicted_logits, "guidance_ed");
  double s = 0.0;
  for (std::size_t i = 0; i < prior_logits.size(); ++i) {
    const double d = prior_logits[i] - predicted_logits[i];
    s += d * d;
  }
  return std::sqrt(s);
}

inline double pge(double base, double guidance) { return base * guidance; }

struct CefeTerms {
  double factored;  // (-z_k + LSE) * LSE
  double expanded;  // -z_k * LSE + LSE^2
};

inline CefeTerms cefe_expand(std::span<const double> z, std::size_t k) {
  detail::require_finite(z, "cefe_expand");
  if (k >= z.size()) {
    throw ShapeError("cefe_expand: index " + std::to_string(k) + " out of range for K=" + std::to_string(z.size()));
  }
  const double l = detail::lse(z);
  return {(-z[k] + l) * l, -z[k] * l + l * l};
}

enum class Orientation { as_is, negated };

inline std::string to_string(Orientation o) { return o == Orientation::negated ? "negated" : "as-is"; }

struct DecisionRule {
  double threshold = 0.0;
  Orientation orientation = Orientation::as_is;
};

enum class Decision { id, ood };

inline Decision decide(double score, const DecisionRule& rule) {
  const double s = rule.orientation == Orientation::negated ? -score : score;
  return s >= rule.threshold ? Decision::id : Decision::ood;
}

struct ScoreRecord {
  std::string id;
  double base = 0.0;
  double guidance = 0.0;
  double pge = 0.0;
  std::size_t predicted_class = 0;
  std::map<std::string, double> baselines;  // msp, max_logit, energy (negated)

  bool operator==(const ScoreRecord&) const = default;
};

inline ScoreRecord score_sample(std::string id, std::span<const double> predicted_logits,
                                std::span<const double> prior_logits, GuidanceKind kind) {
  detail::require_same_k(prior_logits, predicted_logits, "score_sample");
  ScoreRecord r;
  r.id = std::move(id);
  r.predicted_class = predicted_class(predicted_logits);
  r.base = base_score(predicted_logits);
  switch (kind) {
    case GuidanceKind::ce: r.guidance = guidance_ce(prior_logits, r.predicted_class); break;
    case GuidanceKind::kl: r.guidance = guidance_kl(prior_logits, predicted_logits); break;
    case GuidanceKind::ed: r.guidance = guidance_ed(prior_logits, predicted_logits); break;
  }
  r.pge = pge(r.base, r.guidance);
  r.baselines["msp"] = msp(predicted_logits);
  r.baselines["max_logit"] = max_logit(predicted_logits);
  r.baselines["energy"] = r.base;
  return r;
}

namespace detail {

inline std::vector<ScoreRecord> score_rows(const Dataset& d, const Tensor& predicted, const Tensor& priors,
                                           GuidanceKind kind) {
  std::vector<ScoreRecord> out;
  out.reserve(d.size());
  const std::size_t k = predicted.cols();
  for (std::size_t i = 0; i < d.size(); ++i) {
    out.push_back(score_sample(d.ids[i], std::span<const double>(predicted.data.data() + i * k, k),
                               std::span<const double>(priors.data.data() + i * k, k), kind));
  }
  return out;
}

}  // namespace detail

/// PViT forward with prior tokens for every sample, then base/guidance/PGE
/// and logit baselines. Records follow dataset order.
inline std::vector<ScoreRecord> score_dataset(const PViTModel& model, const PriorSource& prior, const Dataset& d,
                                              GuidanceKind kind) {
  if (d.size() == 0) return {};
  const Tensor priors = prior.logits(d);
  const Tensor predicted = predict_dataset(model, d, priors, model.config().alpha);
  return detail::score_rows(d, predicted, priors, kind);
}

/// Same scores with the predicted logits taken from a second source instead
/// of a PViT model (the no-prior-token ablation).
inline std::vector<ScoreRecord> score_dataset(const PriorSource& predicted, const PriorSource& prior,
                                              const Dataset& d, GuidanceKind kind) {
  if (d.size() == 0) return {};
  if (predicted.num_classes() != prior.num_classes()) {
    throw FormatError("predicted and prior logits disagree on K");
  }
  return detail::score_rows(d, predicted.logits(d), prior.logits(d), kind);
}

/// Scores straight from two logits tables, paired by id, in the order of
/// `predicted`.
inline std::vector<ScoreRecord> score_tables(const LogitsTable& predicted, const LogitsTable& prior,
                                             GuidanceKind kind) {
  if (predicted.num_classes() != prior.num_classes()) {
    throw FormatError("predicted logits have K=" + std::to_string(predicted.num_classes()) +
                      ", prior logits have K=" + std::to_string(prior.num_classes()));
  }
  std::vector<ScoreRecord> out;
  out.reserve(predicted.size());
  for (const auto& r : predicted.records()) {
    const LogitsRecord* p = prior.find(r.id);
    if (!p) throw MissingPriorError("no prior logits for sample '" + r.id + "'");
    out.push_back(score_sample(r.id, r.logits, p->logits, kind));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Score files (JSON Lines)

struct ScoreFileHeader {
  std::string dataset;
  GuidanceKind guidance = GuidanceKind::ce;
  std::optional<double> alpha;
  std::string checkpoint;  // content hash of the model checkpoint, or a source tag

  bool operator==(const ScoreFileHeader&) const = default;
};

inline nlohmann::json to_json(const ScoreRecord& r) {
  return nlohmann::json{{"id", r.id},     {"base", r.base},
                        {"guidance", r.guidance}, {"pge", r.pge},
                        {"predicted_class", r.predicted_class}, {"baselines", r.baselines}};
}

inline void write_scores(const std::string& path, const ScoreFileHeader& h, const std::vector<ScoreRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write '" + path + "'");
  nlohmann::json hj{{"dataset", h.dataset},
                    {"guidance", to_string(h.guidance)},
                    {"alpha", h.alpha ? nlohmann::json(*h.alpha) : nlohmann::json(nullptr)},
                    {"checkpoint", h.checkpoint}};
  out << hj.dump() << '\n';
  for (const auto& r : records) out << to_json(r).dump() << '\n';
}

struct ScoreFile {
  ScoreFileHeader header;
  std::vector<ScoreRecord> records;
};

inline ScoreFile read_scores(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path + "'");
  ScoreFile f;
  std::string line;
  std::size_t lineno = 0;
  try {
    if (!std::getline(in, line)) throw FormatError("'" + path + "': missing header line");
    ++lineno;
    const auto h = nlohmann::json::parse(line);
    f.header.dataset = h.at("dataset").get<std::string>();
    f.header.guidance = parse_guidance(h.at("guidance").get<std::string>());
    if (!h.at("alpha").is_null()) f.header.alpha = h.at("alpha").get<double>();
    f.header.checkpoint = h.at("checkpoint").get<std::string>();
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      ScoreRecord r;
      r.id = j.at("id").get<std::string>();
      r.base = j.at("base").get<double>();
      r.guidance = j.at("guidance").get<double>();
      r.pge = j.at("pge").get<double>();
      r.predicted_class = j.at("predicted_class").get<std::size_t>();
      r.baselines = j.at("baselines").get<std::map<std::string, double>>();
      f.records.push_back(std::move(r));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("'" + path + "' line " + std::to_string(lineno) + ": " + e.what());
  }
  return f;
}

}  // namespace pvit
