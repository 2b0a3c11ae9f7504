#pragma once

// Adam with decoupled weight decay, warmup + linear-decay schedule, and the
// shared seeded minibatch loop used for both the prior model and PViT.

#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pvit/errors.hpp"
#include "pvit/rng.hpp"
#include "pvit/tensor.hpp"

namespace pvit {

using ParamList = std::vector<std::pair<std::string, Tensor*>>;

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  double base_lr = 3e-4;
  std::size_t warmup_epochs = 1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 1e-3;
  double eps = 1e-8;
  std::uint64_t seed = 0;

  void validate() const {
    if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
    if (warmup_epochs > epochs) throw ConfigError("warmup_epochs exceeds epochs");
    if (!(base_lr > 0.0)) throw ConfigError("learning rate must be positive");
    if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0)) {
      throw ConfigError("beta1 and beta2 must lie in (0,1)");
    }
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be nonnegative");
  }
};

struct OptimizerState {
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
  std::uint64_t step = 0;          // global step, continues across resumes
  std::uint64_t moment_steps = 0;  // updates folded into the moments (bias correction)
};

/// One bias-corrected Adam step over `params`, reading each tensor's grad
/// (absent grad counts as zero). Weight decay shrinks parameters by
/// (1 - lr * weight_decay) before the moment update is applied.
inline void adam_step(const ParamList& params, OptimizerState& state, double lr,
                      const TrainConfig& cfg) {
  if (!(lr > 0.0)) throw ConfigError("adam_step: learning rate must be positive");
  if (state.first_moment.empty()) {
    for (const auto& [name, t] : params) {
      state.first_moment.emplace_back(t->size(), 0.0);
      state.second_moment.emplace_back(t->size(), 0.0);
    }
  }
  if (state.first_moment.size() != params.size()) {
    throw ShapeError("adam_step: optimizer state tracks " + std::to_string(state.first_moment.size()) +
                     " tensors, got " + std::to_string(params.size()));
  }
  for (std::size_t p = 0; p < params.size(); ++p) {
    const auto& [name, t] = params[p];
    if (state.first_moment[p].size() != t->size() ||
        (t->grad && t->grad->size() != t->size())) {
      throw ShapeError("adam_step: shape mismatch for '" + name + "'");
    }
    if (t->grad) {
      for (double g : *t->grad) {
        if (!std::isfinite(g)) throw DivergenceError("non-finite gradient in '" + name + "'");
      }
    }
  }
  state.step += 1;
  state.moment_steps += 1;
  const double t_step = static_cast<double>(state.moment_steps);
  const double c1 = 1.0 - std::pow(cfg.beta1, t_step);
  const double c2 = 1.0 - std::pow(cfg.beta2, t_step);
  const double shrink = 1.0 - lr * cfg.weight_decay;
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor& t = *params[p].second;
    auto& m = state.first_moment[p];
    auto& v = state.second_moment[p];
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double g = t.grad ? (*t.grad)[i] : 0.0;
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      t.data[i] = t.data[i] * shrink - lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

/// Linear warmup 0 -> base_lr over `warmup_steps`, then linear decay to 0 at
/// `total_steps`.
inline double lr_at(std::uint64_t step, std::uint64_t total_steps, std::uint64_t warmup_steps,
                    double base_lr) {
  if (step > total_steps) step = total_steps;
  if (step < warmup_steps) {
    return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  }
  if (total_steps == warmup_steps) return base_lr;
  return base_lr * static_cast<double>(total_steps - step) /
         static_cast<double>(total_steps - warmup_steps);
}

struct StepRecord {
  std::uint64_t step;
  std::size_t epoch;
  double lr;
  double loss;
  double accuracy;  // running accuracy within the epoch
};

struct TrainHistory {
  std::vector<StepRecord> steps;
  std::vector<double> epoch_accuracy;
};

/// Result of one minibatch forward pass.
struct BatchResult {
  Var loss;
  std::size_t correct = 0;
};

inline std::size_t steps_per_epoch(std::size_t n, std::size_t batch_size) {
  return (n + batch_size - 1) / batch_size;
}

/// Seeded minibatch loop. `batch_fn(Tape&, std::span<const std::size_t>)`
/// builds the loss for the given sample indices. Each epoch's order is a
/// Fisher-Yates permutation keyed by (seed, epoch). Steps in the history
/// continue from `state.step`; the schedule spans this call's steps only.
template <typename BatchFn>
TrainHistory fit(const ParamList& params, std::size_t n, const TrainConfig& cfg,
                 OptimizerState& state, BatchFn&& batch_fn) {
  cfg.validate();
  if (n == 0) throw ConfigError("cannot train on an empty dataset");
  const std::size_t spe = steps_per_epoch(n, cfg.batch_size);
  const std::uint64_t total = static_cast<std::uint64_t>(spe) * cfg.epochs;
  const std::uint64_t warmup = static_cast<std::uint64_t>(spe) * cfg.warmup_epochs;
  TrainHistory history;
  std::uint64_t local = 0;
  std::vector<std::size_t> order(n);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    CounterRng rng(cfg.seed, /*stream=*/0x45500000ULL + epoch);
    shuffle(std::span<std::size_t>(order), rng);
    std::size_t seen = 0, correct = 0;
    for (std::size_t s = 0; s < spe; ++s) {
      const std::size_t begin = s * cfg.batch_size;
      const std::size_t end = std::min(n, begin + cfg.batch_size);
      std::span<const std::size_t> idx(order.data() + begin, end - begin);
      for (auto& [name, t] : params) t->zero_grad();
      Tape tape;
      BatchResult r = batch_fn(tape, idx);
      const double loss = r.loss.value().item();
      if (!std::isfinite(loss)) {
        throw DivergenceError("non-finite loss at step " + std::to_string(state.step + 1));
      }
      tape.backward(r.loss);
      ++local;
      const double lr = lr_at(local, total, warmup, cfg.base_lr);
      // The final scheduled step has lr == 0 and leaves weights unchanged.
      if (lr > 0.0) {
        adam_step(params, state, lr, cfg);
      } else {
        state.step += 1;
      }
      seen += idx.size();
      correct += r.correct;
      history.steps.push_back({state.step, epoch, lr, loss,
                               static_cast<double>(correct) / static_cast<double>(seen)});
    }
    history.epoch_accuracy.push_back(static_cast<double>(correct) / static_cast<double>(n));
  }
  for (auto& [name, t] : params) t->zero_grad();
  return history;
}

/// Shortest round-trip decimal form of a double.
inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

/// step,epoch,lr,loss,accuracy
inline void write_loss_csv(const TrainHistory& h, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write '" + path + "'");
  out << "step,epoch,lr,loss,accuracy\n";
  for (const auto& s : h.steps) {
    out << s.step << ',' << s.epoch << ',' << format_double(s.lr) << ',' << format_double(s.loss)
        << ',' << format_double(s.accuracy) << '\n';
  }
}

}  // namespace pvit
