#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "pvit/data.hpp"
#include "pvit/errors.hpp"
#include "pvit/model.hpp"
#include "pvit/optim.hpp"
#include "pvit/prior.hpp"

namespace pvit {

namespace detail {

inline Tensor gather_row_blocks(const Tensor& src, std::size_t block_rows, std::span<const std::size_t> idx) {
  const std::size_t width = block_rows * src.cols();
  Tensor out({idx.size() * block_rows, src.cols()});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    std::copy_n(src.data.begin() + static_cast<std::ptrdiff_t>(idx[i] * width), width,
                out.data.begin() + static_cast<std::ptrdiff_t>(i * width));
  }
  return out;
}

inline std::vector<const Image*> image_ptrs(const Dataset& d) {
  std::vector<const Image*> out;
  out.reserve(d.size());
  for (const auto& img : d.images) out.push_back(&img);
  return out;
}

}  // namespace detail

/// Logits [n, K] of `model` over the whole dataset, given its prior
/// logits [n, K]. Runs in fixed-size chunks.
inline Tensor predict_dataset(const PViTModel& model, const Dataset& d, const Tensor& priors, double alpha,
                              std::size_t chunk = 128) {
  const std::size_t k = model.config().num_classes;
  if (priors.rank() != 2 || priors.rows() != d.size() || priors.cols() != k) {
    throw ShapeError("predict_dataset: prior logits " + shape_string(priors.shape) + " do not match " +
                     std::to_string(d.size()) + " samples x " + std::to_string(k) + " classes");
  }
  const auto ptrs = detail::image_ptrs(d);
  Tensor out({std::max<std::size_t>(d.size(), 1), k});
  for (std::size_t b = 0; b < d.size(); b += chunk) {
    const std::size_t e = std::min(d.size(), b + chunk);
    std::vector<std::size_t> idx(e - b);
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = b + i;
    Tensor p = detail::gather_row_blocks(priors, 1, idx);
    Tensor logits = predict_batch(model, std::span<const Image* const>(ptrs.data() + b, e - b), p, alpha);
    std::copy(logits.data.begin(), logits.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(b * k));
  }
  return out;
}

inline double evaluate_accuracy(const PViTModel& model, const Dataset& d, const PriorSource& prior) {
  if (!d.labels) throw ConfigError(d.name + ": accuracy needs labels");
  if (d.size() == 0) return 0.0;
  return accuracy(predict_dataset(model, d, prior.logits(d), model.config().alpha), *d.labels);
}

/// Trains `model` with per-sample (or batch-broadcast) prior tokens and
/// cross-entropy. Optimizer state carries the global step across calls.
inline TrainHistory train(PViTModel& model, const Dataset& data, const PriorSource& prior,
                          const TrainConfig& cfg, OptimizerState& state) {
  if (!data.labels) throw ConfigError(data.name + ": training needs labels");
  if (data.size() == 0) throw ConfigError("cannot train on an empty dataset");
  const auto& mc = model.config();
  if (prior.num_classes() != mc.num_classes) {
    throw FormatError("prior source has K=" + std::to_string(prior.num_classes()) + ", model has K=" +
                      std::to_string(mc.num_classes));
  }
  const auto ptrs = detail::image_ptrs(data);
  const Tensor patches = patchify_batch(ptrs, mc);
  const Tensor priors = prior.logits(data);
  const auto& labels = *data.labels;
  auto params = model.parameters();
  return fit(params, data.size(), cfg, state, [&](Tape& tape, std::span<const std::size_t> idx) {
    PViTVars vars = bind(tape, model);
    Var x = tape.constant(detail::gather_row_blocks(patches, mc.num_patches(), idx));
    Var p = tape.constant(detail::gather_row_blocks(priors, 1, idx));
    BatchForward fwd = forward_batch(vars, mc, x, p, mc.alpha, mc.prior_broadcast);
    std::vector<std::size_t> targets(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) targets[i] = labels[idx[i]];
    BatchResult r;
    r.correct = count_correct(fwd.logits.value(), targets);
    r.loss = cross_entropy(fwd.logits, targets);
    return r;
  });
}

inline TrainHistory train(PViTModel& model, const Dataset& data, const PriorSource& prior,
                          const TrainConfig& cfg) {
  OptimizerState state;
  return train(model, data, prior, cfg, state);
}

}  // namespace pvit
