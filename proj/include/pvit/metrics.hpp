#pragma once

// OOD evaluation with ID as the positive class and higher score => ID.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "pvit/errors.hpp"
#include "pvit/optim.hpp"
#include "pvit/scoring.hpp"

namespace pvit {

namespace detail {

inline void require_scores(std::span<const double> s, const char* side) {
  if (s.empty()) throw std::invalid_argument(std::string(side) + " score list is empty");
  for (double v : s) {
    if (!std::isfinite(v)) throw std::invalid_argument(std::string(side) + " scores must be finite");
  }
}

}  // namespace detail

/// Mann-Whitney AUROC: fraction of (id, ood) pairs with id > ood, ties
/// counted as one half.
inline double auroc(std::span<const double> id_scores, std::span<const double> ood_scores) {
  detail::require_scores(id_scores, "ID");
  detail::require_scores(ood_scores, "OOD");
  struct Item {
    double score;
    bool is_id;
  };
  std::vector<Item> all;
  all.reserve(id_scores.size() + ood_scores.size());
  for (double s : id_scores) all.push_back({s, true});
  for (double s : ood_scores) all.push_back({s, false});
  std::sort(all.begin(), all.end(), [](const Item& a, const Item& b) { return a.score < b.score; });
  // Count, for each ID score, OOD scores strictly below plus half the ties.
  double wins = 0.0;
  std::size_t ood_below = 0;
  for (std::size_t i = 0; i < all.size();) {
    std::size_t j = i;
    std::size_t id_here = 0, ood_here = 0;
    while (j < all.size() && all[j].score == all[i].score) {
      (all[j].is_id ? id_here : ood_here) += 1;
      ++j;
    }
    wins += static_cast<double>(id_here) * (static_cast<double>(ood_below) + 0.5 * static_cast<double>(ood_here));
    ood_below += ood_here;
    i = j;
  }
  return wins / (static_cast<double>(id_scores.size()) * static_cast<double>(ood_scores.size()));
}

struct FprAtTpr {
  double fpr;
  double threshold;
};

/// Largest threshold keeping |{id >= t}| / n_id >= tpr_target, and the
/// fraction of OOD scores at or above it.
inline FprAtTpr fpr_at_tpr(std::span<const double> id_scores, std::span<const double> ood_scores,
                           double tpr_target = 0.95) {
  detail::require_scores(id_scores, "ID");
  detail::require_scores(ood_scores, "OOD");
  if (!(tpr_target > 0.0 && tpr_target <= 1.0)) throw std::invalid_argument("tpr_target must lie in (0,1]");
  std::vector<double> id(id_scores.begin(), id_scores.end());
  std::sort(id.begin(), id.end());
  const std::size_t n = id.size();
  const double nd = static_cast<double>(n);
  // Smallest count c with c / n >= target, evaluated exactly as the
  // criterion is stated.
  auto c = static_cast<std::size_t>(std::ceil(tpr_target * nd));
  c = std::clamp<std::size_t>(c, 1, n);
  while (c > 1 && static_cast<double>(c - 1) / nd >= tpr_target) --c;
  while (c < n && static_cast<double>(c) / nd < tpr_target) ++c;
  const double threshold = id[n - c];
  std::size_t fp = 0;
  for (double s : ood_scores) fp += s >= threshold;
  return {static_cast<double>(fp) / static_cast<double>(ood_scores.size()), threshold};
}

enum class OrientationPolicy { as_is, negated, automatic };

inline OrientationPolicy parse_orientation_policy(const std::string& s) {
  if (s == "as-is") return OrientationPolicy::as_is;
  if (s == "negated") return OrientationPolicy::negated;
  if (s == "auto") return OrientationPolicy::automatic;
  throw ConfigError("unknown orientation policy '" + s + "' (as-is | negated | auto)");
}

inline std::string to_string(OrientationPolicy p) {
  switch (p) {
    case OrientationPolicy::as_is: return "as-is";
    case OrientationPolicy::negated: return "negated";
    case OrientationPolicy::automatic: return "auto";
  }
  return "unknown";
}

struct OODMetrics {
  std::string ood_dataset;
  std::string score;
  double auroc = 0.0;
  double fpr95 = 0.0;
  double threshold = 0.0;  // in oriented score space
  std::size_t n_id = 0;
  std::size_t n_ood = 0;
  Orientation orientation = Orientation::as_is;
  double auroc_as_is = 0.0;
  double auroc_negated = 0.0;

  DecisionRule rule() const { return {threshold, orientation}; }
};

inline const std::vector<std::string>& score_fields() {
  static const std::vector<std::string> fields{"pge", "base", "guidance", "msp", "max_logit", "energy"};
  return fields;
}

inline double field_value(const ScoreRecord& r, const std::string& field) {
  if (field == "pge") return r.pge;
  if (field == "base") return r.base;
  if (field == "guidance") return r.guidance;
  auto it = r.baselines.find(field);
  if (it != r.baselines.end()) return it->second;
  throw ConfigError("unknown score field '" + field + "'");
}

inline std::vector<double> field_values(const std::vector<ScoreRecord>& records, const std::string& field) {
  std::vector<double> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(field_value(r, field));
  return out;
}

inline OODMetrics evaluate(std::span<const double> id_scores, std::span<const double> ood_scores,
                           OrientationPolicy policy) {
  OODMetrics m;
  m.n_id = id_scores.size();
  m.n_ood = ood_scores.size();
  std::vector<double> id_neg(id_scores.begin(), id_scores.end());
  std::vector<double> ood_neg(ood_scores.begin(), ood_scores.end());
  for (auto& v : id_neg) v = -v;
  for (auto& v : ood_neg) v = -v;
  m.auroc_as_is = auroc(id_scores, ood_scores);
  m.auroc_negated = auroc(id_neg, ood_neg);
  switch (policy) {
    case OrientationPolicy::as_is: m.orientation = Orientation::as_is; break;
    case OrientationPolicy::negated: m.orientation = Orientation::negated; break;
    case OrientationPolicy::automatic:
      m.orientation = m.auroc_as_is >= 0.5 ? Orientation::as_is : Orientation::negated;
      break;
  }
  const bool neg = m.orientation == Orientation::negated;
  m.auroc = neg ? m.auroc_negated : m.auroc_as_is;
  const auto f = neg ? fpr_at_tpr(id_neg, ood_neg) : fpr_at_tpr(id_scores, ood_scores);
  m.fpr95 = f.fpr;
  m.threshold = f.threshold;
  return m;
}

inline OODMetrics evaluate(const std::vector<ScoreRecord>& id_records, const std::vector<ScoreRecord>& ood_records,
                           const std::string& field, OrientationPolicy policy) {
  const auto id = field_values(id_records, field);
  const auto ood = field_values(ood_records, field);
  OODMetrics m = evaluate(id, ood, policy);
  m.score = field;
  return m;
}

inline nlohmann::json to_json(const OODMetrics& m) {
  return nlohmann::json{{"ood_dataset", m.ood_dataset},
                        {"score", m.score},
                        {"auroc", m.auroc},
                        {"fpr95", m.fpr95},
                        {"threshold", m.threshold},
                        {"n_id", m.n_id},
                        {"n_ood", m.n_ood},
                        {"orientation", to_string(m.orientation)},
                        {"auroc_as_is", m.auroc_as_is},
                        {"auroc_negated", m.auroc_negated}};
}

struct Histogram {
  std::vector<double> edges;  // bins + 1
  std::vector<std::size_t> id_counts;
  std::vector<std::size_t> ood_counts;
};

/// Equal-width bins over [min, max] of both score sets; the last bin is
/// closed on the right.
inline Histogram histogram(std::span<const double> id_scores, std::span<const double> ood_scores, std::size_t bins) {
  if (bins < 2) throw std::invalid_argument("histogram needs at least 2 bins");
  detail::require_scores(id_scores, "ID");
  detail::require_scores(ood_scores, "OOD");
  double lo = id_scores[0], hi = id_scores[0];
  for (auto s : {id_scores, ood_scores}) {
    for (double v : s) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }
  Histogram h;
  h.edges.resize(bins + 1);
  const double width = (hi - lo) / static_cast<double>(bins);
  for (std::size_t i = 0; i <= bins; ++i) h.edges[i] = i == bins ? hi : lo + width * static_cast<double>(i);
  h.id_counts.assign(bins, 0);
  h.ood_counts.assign(bins, 0);
  auto bin_of = [&](double v) -> std::size_t {
    if (width <= 0.0) return 0;
    const auto b = static_cast<std::size_t>((v - lo) / width);
    return std::min(b, bins - 1);
  };
  for (double v : id_scores) h.id_counts[bin_of(v)]++;
  for (double v : ood_scores) h.ood_counts[bin_of(v)]++;
  return h;
}

/// CSV: bin_lo,bin_hi,id_count,ood_count
inline void histogram_export(std::span<const double> id_scores, std::span<const double> ood_scores, std::size_t bins,
                             const std::string& path) {
  const Histogram h = histogram(id_scores, ood_scores, bins);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write '" + path + "'");
  out << "bin_lo,bin_hi,id_count,ood_count\n";
  for (std::size_t i = 0; i < bins; ++i) {
    out << format_double(h.edges[i]) << ',' << format_double(h.edges[i + 1]) << ',' << h.id_counts[i] << ','
        << h.ood_counts[i] << '\n';
  }
}

}  // namespace pvit
