#pragma once

// Gradient-check cases shared by the unit tests and the acceptance runner:
// one builder per differentiable op, plus the full PViT training loss on a
// toy configuration (D=16, 8x8 images with 4x4 patches so N=4, L=2, K=3).

#include <string>
#include <vector>

#include "oracles.hpp"
#include "pvit/model.hpp"

namespace grad_cases {

using pvit::CounterRng;
using pvit::Shape;
using pvit::Tape;
using pvit::Tensor;
using pvit::Var;

struct OpCase {
  std::string name;
  oracle::Builder f;
  std::vector<Tensor> inputs;
};

/// sum(out * R) for a fixed random R so every output element gets a
/// distinct upstream gradient.
inline Var project(Tape& tape, const Var& out, std::uint64_t seed) {
  CounterRng rng(seed, 99);
  return pvit::sum(pvit::mul(out, tape.constant(oracle::random_tensor(out.shape(), rng))));
}

inline std::vector<OpCase> op_cases(std::uint64_t seed) {
  using namespace pvit;
  CounterRng rng(seed, 1);
  auto r = [&](Shape s, double lo = -1, double hi = 1) { return oracle::random_tensor(std::move(s), rng, lo, hi); };
  static const std::size_t tgt[] = {2, 0, 1};
  return {
      {"matmul", [=](Tape& t, const auto& x) { return project(t, matmul(x[0], x[1]), seed); },
       {r({3, 4}), r({4, 2})}},
      {"add", [=](Tape& t, const auto& x) { return project(t, add(x[0], x[1]), seed); }, {r({2, 3}), r({2, 3})}},
      {"add_rows", [=](Tape& t, const auto& x) { return project(t, add_rows(x[0], x[1]), seed); },
       {r({6, 3}), r({2, 3})}},
      {"mul", [=](Tape& t, const auto& x) { return project(t, mul(x[0], x[1]), seed); }, {r({2, 3}), r({2, 3})}},
      {"scale", [=](Tape& t, const auto& x) { return project(t, scale(x[0], -1.7), seed); }, {r({2, 3})}},
      {"sum", [](Tape&, const auto& x) { return sum(x[0]); }, {r({2, 3})}},
      {"softmax_last", [=](Tape& t, const auto& x) { return project(t, softmax(x[0]), seed); }, {r({3, 5}, -3, 3)}},
      {"softmax_axis0", [=](Tape& t, const auto& x) { return project(t, softmax(x[0], 0), seed); },
       {r({3, 5}, -3, 3)}},
      {"logsumexp_axis1", [=](Tape& t, const auto& x) { return project(t, logsumexp(x[0], 1), seed); },
       {r({3, 5}, -3, 3)}},
      {"logsumexp_axis0", [=](Tape& t, const auto& x) { return project(t, logsumexp(x[0], 0), seed); },
       {r({3, 5}, -3, 3)}},
      {"layer_norm", [=](Tape& t, const auto& x) { return project(t, layer_norm(x[0], x[1], x[2]), seed); },
       {r({3, 6}, -2, 2), r({6}, 0.5, 1.5), r({6})}},
      {"gelu", [=](Tape& t, const auto& x) { return project(t, gelu(x[0]), seed); }, {r({4, 4}, -3, 3)}},
      {"cross_entropy", [](Tape&, const auto& x) { return cross_entropy(x[0], tgt); }, {r({3, 4}, -2, 2)}},
      {"slice_rows", [=](Tape& t, const auto& x) { return project(t, slice_rows(x[0], 1, 3), seed); }, {r({4, 3})}},
      {"concat_rows",
       [=](Tape& t, const auto& x) {
         const Var parts[] = {x[0], x[1], x[0]};
         return project(t, concat_rows(parts), seed);
       },
       {r({2, 3}), r({1, 3})}},
      {"gather_rows", [=](Tape& t, const auto& x) { return project(t, gather_rows(x[0], {2, 0, 2, 1}), seed); },
       {r({3, 3})}},
      {"attention", [=](Tape& t, const auto& x) { return project(t, attention(x[0], x[1], x[2], 2, 2), seed); },
       {r({6, 4}), r({6, 4}), r({6, 4})}},
  };
}

inline pvit::PViTConfig toy_config() {
  pvit::PViTConfig c;
  c.image_h = c.image_w = 8;
  c.patch_size = 4;
  c.embed_dim = 16;
  c.depth = 2;
  c.heads = 2;
  c.mlp_dim = 32;
  c.num_classes = 3;
  c.alpha = 0.5;
  return c;
}

inline pvit::Image random_image(const pvit::PViTConfig& c, CounterRng& rng) {
  pvit::Image img(c.image_h, c.image_w, c.channels);
  for (auto& v : img.pixels) v = rng.uniform() * 2 - 1;
  return img;
}

/// Cross-entropy of the toy model on two random samples, checked against
/// central differences on up to `per_tensor` elements of every parameter.
inline oracle::GradCheck model_loss_check(std::uint64_t seed, std::size_t per_tensor = 24) {
  using namespace pvit;
  const PViTConfig c = toy_config();
  PViTModel m(c, seed);
  CounterRng rng(seed, 77);
  // Larger weights than the 0.02 init so every path carries signal.
  for (auto& [name, t] : m.parameters())
    for (auto& v : t->data) v += 0.3 * (rng.uniform() * 2 - 1);
  std::vector<Image> imgs{random_image(c, rng), random_image(c, rng)};
  std::vector<const Image*> ptrs{&imgs[0], &imgs[1]};
  const Tensor patches = patchify_batch(ptrs, c);
  Tensor priors({2, 3});
  for (auto& v : priors.data) v = rng.uniform() * 4 - 2;
  const std::size_t targets[] = {seed % 3, (seed + 1) % 3};
  auto loss = [&](Tape& tape) {
    PViTVars vars = bind(tape, m);
    BatchForward f = forward_batch(vars, c, tape.constant(patches), tape.constant(priors), c.alpha);
    return cross_entropy(f.logits, targets);
  };
  auto params = m.parameters();
  return oracle::check_param_gradients(loss, params, per_tensor, rng);
}

}  // namespace grad_cases
