#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "oracles.hpp"
#include "pvit/trainer.hpp"

using namespace pvit;

namespace {

TrainConfig adam_cfg(double wd = 0.0) {
  TrainConfig c;
  c.weight_decay = wd;
  return c;
}

struct Toy {
  PViTModel model;
  Dataset data;
  PriorSource prior;
};

/// 8x8 images, 4x4 patches, two classes; prior logits come from a table.
Toy make_toy(std::size_t per_class = 4, std::uint64_t seed = 3) {
  PViTConfig c;
  c.image_h = c.image_w = 8;
  c.patch_size = 4;
  c.embed_dim = 16;
  c.depth = 2;
  c.heads = 2;
  c.mlp_dim = 16;
  c.num_classes = 2;
  SynthSpec s;
  s.classes = 2;
  s.per_class = per_class;
  s.image_size = 8;
  Dataset d = synth_dataset(s, "toy");
  LogitsTable t(2, "toy", "fixed");
  CounterRng rng(seed, 1);
  for (std::size_t i = 0; i < d.size(); ++i) t.add({d.ids[i], (*d.labels)[i], {rng.normal(), rng.normal()}});
  return {PViTModel(c, seed), std::move(d), PriorSource::from_table(std::move(t))};
}

std::vector<double> flat_weights(const PViTModel& m) {
  std::vector<double> out;
  for (const auto& [n, t] : m.parameters()) out.insert(out.end(), t->data.begin(), t->data.end());
  return out;
}

}  // namespace

TEST(Adam, ThreeStepTrajectoryMatchesRecurrence) {
  Tensor x({1}, 1.0);
  x.requires_grad = true;
  TrainConfig cfg = adam_cfg();
  OptimizerState state;
  oracle::ScalarAdam ref{0.1};
  double rx = 1.0;
  for (int t = 0; t < 3; ++t) {
    x.grad = std::vector<double>{2.0 * x.data[0]};  // d/dx x^2
    adam_step({{"x", &x}}, state, 0.1, cfg);
    rx = ref.step(rx, 2.0 * rx);
    EXPECT_NEAR(x.data[0], rx, 1e-12) << "step " << t + 1;
  }
  EXPECT_EQ(state.step, 3u);
}

TEST(Adam, WeightDecayMatchesRecurrence) {
  Tensor x({1}, 0.7);
  TrainConfig cfg = adam_cfg(0.05);
  OptimizerState state;
  oracle::ScalarAdam ref{0.01, 0.9, 0.999, 1e-8, 0.05};
  double rx = 0.7;
  for (int t = 0; t < 5; ++t) {
    x.grad = std::vector<double>{std::sin(x.data[0])};
    adam_step({{"x", &x}}, state, 0.01, cfg);
    rx = ref.step(rx, std::sin(rx));
    EXPECT_NEAR(x.data[0], rx, 1e-12);
  }
}

TEST(Adam, FirstStepIsSignUpdate) {
  for (double g : {3.0, -0.002, 1e4}) {
    Tensor x({1}, 0.0);
    x.grad = std::vector<double>{g};
    OptimizerState state;
    adam_step({{"x", &x}}, state, 0.01, adam_cfg());
    EXPECT_NEAR(x.data[0], -0.01 * (g > 0 ? 1 : -1), 1e-7);
  }
}

TEST(Adam, ZeroGradientLeavesParameterUpToDecay) {
  Tensor x({2}, std::vector<double>{1.5, -2.0});
  OptimizerState state;
  adam_step({{"x", &x}}, state, 0.1, adam_cfg());
  EXPECT_EQ(x.data, (std::vector<double>{1.5, -2.0}));
  adam_step({{"x", &x}}, state, 0.1, adam_cfg(0.01));
  EXPECT_DOUBLE_EQ(x.data[0], 1.5 * (1 - 0.1 * 0.01));
}

TEST(Adam, StateMirrorsShapesAndStepsByOne) {
  Tensor a({2, 3}), b({4});
  OptimizerState state;
  for (int i = 1; i <= 4; ++i) {
    adam_step({{"a", &a}, {"b", &b}}, state, 0.1, adam_cfg());
    EXPECT_EQ(state.step, static_cast<std::uint64_t>(i));
  }
  ASSERT_EQ(state.first_moment.size(), 2u);
  EXPECT_EQ(state.first_moment[0].size(), 6u);
  EXPECT_EQ(state.second_moment[1].size(), 4u);
}

TEST(Adam, RejectsBadInputs) {
  Tensor x({2}, 1.0);
  x.grad = std::vector<double>{1.0, NAN};
  OptimizerState state;
  EXPECT_THROW(adam_step({{"x", &x}}, state, 0.1, adam_cfg()), DivergenceError);
  x.grad = std::vector<double>{1.0};
  EXPECT_THROW(adam_step({{"x", &x}}, state, 0.1, adam_cfg()), ShapeError);
  x.grad.reset();
  EXPECT_THROW(adam_step({{"x", &x}}, state, 0.0, adam_cfg()), ConfigError);
  Tensor y({3});
  OptimizerState s2;
  adam_step({{"x", &x}}, s2, 0.1, adam_cfg());
  EXPECT_THROW(adam_step({{"x", &x}, {"y", &y}}, s2, 0.1, adam_cfg()), ShapeError);
}

TEST(Schedule, Examples) {
  EXPECT_EQ(lr_at(10, 100, 10, 0.3), 0.3);
  EXPECT_EQ(lr_at(100, 100, 10, 0.3), 0.0);
  EXPECT_DOUBLE_EQ(lr_at(55, 100, 10, 0.3), 0.15);
  EXPECT_DOUBLE_EQ(lr_at(5, 100, 10, 0.3), 0.15);
  EXPECT_EQ(lr_at(0, 100, 10, 0.3), 0.0);
  EXPECT_EQ(lr_at(0, 100, 0, 0.3), 0.3);
}

TEST(Schedule, ContinuousPiecewiseLinearWithExactMax) {
  for (auto [total, warm] : {std::pair<std::uint64_t, std::uint64_t>{100, 10}, {37, 0}, {64, 64}, {9, 3}}) {
    double mx = 0, prev = lr_at(0, total, warm, 3e-4);
    for (std::uint64_t s = 0; s <= total; ++s) {
      const double lr = lr_at(s, total, warm, 3e-4);
      mx = std::max(mx, lr);
      EXPECT_LE(std::abs(lr - prev), 3e-4 / static_cast<double>(std::max<std::uint64_t>(1, std::min(warm, total - warm))) + 1e-18);
      EXPECT_GE(lr, 0.0);
      prev = lr;
    }
    EXPECT_EQ(mx, 3e-4);
  }
}

TEST(TrainConfigValidation, Rejects) {
  TrainConfig c;
  c.warmup_epochs = c.epochs + 1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.beta2 = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.weight_decay = -1;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Train, SeedFixedIsBitIdentical) {
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 3;
  cfg.base_lr = 1e-3;
  cfg.seed = 5;
  Toy a = make_toy(), b = make_toy();
  const auto ha = train(a.model, a.data, a.prior, cfg);
  const auto hb = train(b.model, b.data, b.prior, cfg);
  ASSERT_EQ(ha.steps.size(), hb.steps.size());
  for (std::size_t i = 0; i < ha.steps.size(); ++i) EXPECT_EQ(ha.steps[i].loss, hb.steps[i].loss);
  EXPECT_EQ(flat_weights(a.model), flat_weights(b.model));
  EXPECT_EQ(ha.steps.size(), 2u * 3u);  // ceil(8 / 3) per epoch
  EXPECT_EQ(ha.epoch_accuracy.size(), 2u);
  cfg.seed = 6;
  Toy c = make_toy();
  train(c.model, c.data, c.prior, cfg);
  EXPECT_NE(flat_weights(a.model), flat_weights(c.model));
}

TEST(Train, SingleSampleLossDecreases) {
  Toy t = make_toy(1);
  t.data.images.resize(1);
  t.data.labels->resize(1);
  t.data.ids.resize(1);
  TrainConfig cfg;
  cfg.epochs = 50;
  cfg.batch_size = 1;
  cfg.warmup_epochs = 0;
  cfg.base_lr = 1e-4;
  const auto h = train(t.model, t.data, t.prior, cfg);
  ASSERT_EQ(h.steps.size(), 50u);
  for (std::size_t s = 5; s + 1 < h.steps.size(); ++s) EXPECT_LT(h.steps[s + 1].loss, h.steps[s].loss) << s;
}

TEST(Train, SingleSampleOverfitsOnDeskConfig) {
  PViTModel model(PViTConfig{}, 1);  // 28x28, P=7, D=64, L=4, 4 heads
  SynthSpec s;
  s.per_class = 1;
  Dataset d = synth_dataset(s, "one");
  // Keep the class-1 sample so the target is not label 0.
  d.images.erase(d.images.begin());
  d.labels->erase(d.labels->begin());
  d.ids.erase(d.ids.begin());
  d.images.resize(1);
  d.labels->resize(1);
  d.ids.resize(1);
  LogitsTable t(4, "one", "fixed");
  t.add({d.ids[0], std::nullopt, {0.3, -0.2, 0.1, 0.0}});
  TrainConfig cfg;
  cfg.epochs = 500;
  cfg.batch_size = 1;
  cfg.warmup_epochs = 0;
  cfg.base_lr = 1e-3;
  const auto h = train(model, d, PriorSource::from_table(t), cfg);
  double best = INFINITY;
  for (const auto& r : h.steps) best = std::min(best, r.loss);
  EXPECT_LT(best, 0.01);
}

TEST(Train, ZeroAlphaLeavesProjectionUnchanged) {
  Toy t = make_toy();
  t.model.set_alpha(0.0);
  const Tensor before = t.model.prior_projection;
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 4;
  cfg.weight_decay = 0.0;
  train(t.model, t.data, t.prior, cfg);
  EXPECT_EQ(t.model.prior_projection.data, before.data);
  EXPECT_NE(t.model.head_weight.data, make_toy().model.head_weight.data);
}

TEST(Train, NanLossAborts) {
  Toy t = make_toy();
  t.model.head_bias.data[0] = NAN;
  TrainConfig cfg;
  cfg.epochs = 1;
  EXPECT_THROW(train(t.model, t.data, t.prior, cfg), DivergenceError);
}

TEST(Train, MissingPriorOrLabelsRejected) {
  Toy t = make_toy();
  LogitsTable partial(2, "toy", "x");
  partial.add({t.data.ids[0], std::nullopt, {0.0, 0.0}});
  EXPECT_THROW(train(t.model, t.data, PriorSource::from_table(partial), TrainConfig{}), MissingPriorError);
  Dataset unlabeled = t.data;
  unlabeled.labels.reset();
  EXPECT_THROW(train(t.model, unlabeled, t.prior, TrainConfig{}), ConfigError);
}

TEST(Train, ResumeContinuesStepCounter) {
  Toy a = make_toy();
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 4;
  OptimizerState state;
  const auto first = train(a.model, a.data, a.prior, cfg, state);
  const auto second = train(a.model, a.data, a.prior, cfg, state);
  EXPECT_EQ(first.steps.back().step, 2u);
  EXPECT_EQ(second.steps.front().step, 3u);
  EXPECT_EQ(state.step, 4u);
}

TEST(Train, LossCsvFormat) {
  Toy t = make_toy();
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 4;
  const auto h = train(t.model, t.data, t.prior, cfg);
  const auto path = (std::filesystem::temp_directory_path() / "pvit_loss.csv").string();
  write_loss_csv(h, path);
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "step,epoch,lr,loss,accuracy");
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    ++rows;
    EXPECT_EQ(std::count(line.begin(), line.end(), ','), 4);
  }
  EXPECT_EQ(rows, h.steps.size());
  std::filesystem::remove(path);
}
