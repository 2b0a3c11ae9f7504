#pragma once

// Prior-augmented vision transformer.
//
// Input sequence per image (N = number of patches):
//   row 0        class token + positional row 0
//   rows 1..N    patch embeddings + positional rows 1..N
//   row N+1      prior token alpha * softmax(prior_logits) . W_proj (no position)
// followed by pre-LN encoder blocks and a linear head on the final class row.

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "pvit/errors.hpp"
#include "pvit/image.hpp"
#include "pvit/rng.hpp"
#include "pvit/tensor.hpp"

namespace pvit {

/// How prior tokens are formed for a training batch.
enum class PriorBroadcast {
  per_sample,  // each image gets the token built from its own prior logits
  batch,       // one token from the batch-mean prior distribution, shared by all
};

inline std::string to_string(PriorBroadcast b) {
  return b == PriorBroadcast::batch ? "batch" : "sample";
}

inline PriorBroadcast parse_prior_broadcast(const std::string& s) {
  if (s == "sample" || s == "per_sample") return PriorBroadcast::per_sample;
  if (s == "batch") return PriorBroadcast::batch;
  throw ConfigError("prior_broadcast must be 'sample' or 'batch', got '" + s + "'");
}

struct PViTConfig {
  std::size_t image_h = 28;
  std::size_t image_w = 28;
  std::size_t channels = 1;
  std::size_t patch_size = 7;
  std::size_t embed_dim = 64;
  std::size_t depth = 4;
  std::size_t heads = 4;
  std::size_t mlp_dim = 128;
  std::size_t num_classes = 4;
  double alpha = 0.1;
  PriorBroadcast prior_broadcast = PriorBroadcast::per_sample;

  std::size_t num_patches() const {
    return (image_h / patch_size) * (image_w / patch_size);
  }
  std::size_t patch_dim() const { return patch_size * patch_size * channels; }
  /// Class token + patches + prior token.
  std::size_t seq_len() const { return num_patches() + 2; }

  void validate() const {
    if (patch_size == 0 || image_h == 0 || image_w == 0 || channels == 0) {
      throw ConfigError("image dimensions and patch size must be positive");
    }
    if (image_h % patch_size != 0 || image_w % patch_size != 0) {
      throw ConfigError("image " + std::to_string(image_h) + "x" + std::to_string(image_w) +
                        " is not divisible by patch size " + std::to_string(patch_size));
    }
    if (embed_dim == 0 || heads == 0 || embed_dim % heads != 0) {
      throw ConfigError("embed_dim " + std::to_string(embed_dim) + " is not divisible by heads " +
                        std::to_string(heads));
    }
    if (mlp_dim == 0 || num_classes == 0) throw ConfigError("mlp_dim and num_classes must be positive");
    if (!(alpha >= 0.0)) throw ConfigError("alpha must be nonnegative");
  }

  bool operator==(const PViTConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const PViTConfig& c) {
  j = nlohmann::json{{"image_h", c.image_h},         {"image_w", c.image_w},
                     {"channels", c.channels},       {"patch_size", c.patch_size},
                     {"embed_dim", c.embed_dim},     {"depth", c.depth},
                     {"heads", c.heads},             {"mlp_dim", c.mlp_dim},
                     {"num_classes", c.num_classes}, {"alpha", c.alpha},
                     {"prior_broadcast", to_string(c.prior_broadcast)}};
}

inline void from_json(const nlohmann::json& j, PViTConfig& c) {
  j.at("image_h").get_to(c.image_h);
  j.at("image_w").get_to(c.image_w);
  j.at("channels").get_to(c.channels);
  j.at("patch_size").get_to(c.patch_size);
  j.at("embed_dim").get_to(c.embed_dim);
  j.at("depth").get_to(c.depth);
  j.at("heads").get_to(c.heads);
  j.at("mlp_dim").get_to(c.mlp_dim);
  j.at("num_classes").get_to(c.num_classes);
  j.at("alpha").get_to(c.alpha);
  c.prior_broadcast = parse_prior_broadcast(j.value("prior_broadcast", std::string("sample")));
}

struct EncoderBlock {
  Tensor norm1_gain, norm1_bias;
  Tensor query_weight, query_bias;
  Tensor key_weight, key_bias;
  Tensor value_weight, value_bias;
  Tensor out_weight, out_bias;
  Tensor norm2_gain, norm2_bias;
  Tensor mlp_in_weight, mlp_in_bias;
  Tensor mlp_out_weight, mlp_out_bias;
};

/// Parameter set. Linear maps are stored input-major: y = x . W + b.
class PViTModel {
 public:
  explicit PViTModel(PViTConfig config, std::uint64_t seed = 0) : config_(std::move(config)) {
    config_.validate();
    const std::size_t d = config_.embed_dim;
    const std::size_t m = config_.mlp_dim;
    const std::size_t k = config_.num_classes;
    patch_weight = Tensor({config_.patch_dim(), d});
    patch_bias = Tensor({1, d});
    cls_token = Tensor({1, d});
    pos_embedding = Tensor({config_.num_patches() + 1, d});
    prior_projection = Tensor({k, d});
    blocks.resize(config_.depth);
    for (auto& b : blocks) {
      b.norm1_gain = Tensor({d}, 1.0);
      b.norm1_bias = Tensor({d});
      b.query_weight = Tensor({d, d});
      b.query_bias = Tensor({1, d});
      b.key_weight = Tensor({d, d});
      b.key_bias = Tensor({1, d});
      b.value_weight = Tensor({d, d});
      b.value_bias = Tensor({1, d});
      b.out_weight = Tensor({d, d});
      b.out_bias = Tensor({1, d});
      b.norm2_gain = Tensor({d}, 1.0);
      b.norm2_bias = Tensor({d});
      b.mlp_in_weight = Tensor({d, m});
      b.mlp_in_bias = Tensor({1, m});
      b.mlp_out_weight = Tensor({m, d});
      b.mlp_out_bias = Tensor({1, d});
    }
    final_norm_gain = Tensor({d}, 1.0);
    final_norm_bias = Tensor({d});
    head_weight = Tensor({d, k});
    head_bias = Tensor({1, k});

    // Truncated normal (0.02) for matrices and tokens; biases and norms keep
    // their zero/one fills.
    CounterRng rng(seed, /*stream=*/0x5057);
    for (auto& [name, t] : parameters()) {
      t->requires_grad = true;
      if (is_random_init(name)) {
        for (auto& v : t->data) v = rng.truncated_normal(0.02);
      }
    }
  }

  const PViTConfig& config() const { return config_; }

  /// Overrides the prior-token scale used by default at inference.
  void set_alpha(double alpha) {
    if (!(alpha >= 0.0)) throw ConfigError("alpha must be nonnegative");
    config_.alpha = alpha;
  }

  /// All trainable tensors in their fixed declared (checkpoint) order.
  std::vector<std::pair<std::string, Tensor*>> parameters() { return collect<Tensor*>(*this); }
  std::vector<std::pair<std::string, const Tensor*>> parameters() const {
    return collect<const Tensor*>(*this);
  }

  Tensor patch_weight, patch_bias;
  Tensor cls_token;
  Tensor pos_embedding;
  Tensor prior_projection;
  std::vector<EncoderBlock> blocks;
  Tensor final_norm_gain, final_norm_bias;
  Tensor head_weight, head_bias;

 private:
  static bool is_random_init(const std::string& name) {
    const bool bias = name.ends_with(".bias");
    const bool norm = name.find("norm") != std::string::npos;
    return !bias && !norm;
  }

  template <typename Ptr, typename Self>
  static std::vector<std::pair<std::string, Ptr>> collect(Self& self) {
    std::vector<std::pair<std::string, Ptr>> out;
    out.emplace_back("patch_embed.weight", &self.patch_weight);
    out.emplace_back("patch_embed.bias", &self.patch_bias);
    out.emplace_back("cls_token", &self.cls_token);
    out.emplace_back("pos_embedding", &self.pos_embedding);
    out.emplace_back("prior_proj.weight", &self.prior_projection);
    for (std::size_t i = 0; i < self.blocks.size(); ++i) {
      auto& b = self.blocks[i];
      const std::string p = "blocks." + std::to_string(i) + ".";
      out.emplace_back(p + "norm1.gain", &b.norm1_gain);
      out.emplace_back(p + "norm1.bias", &b.norm1_bias);
      out.emplace_back(p + "attn.query.weight", &b.query_weight);
      out.emplace_back(p + "attn.query.bias", &b.query_bias);
      out.emplace_back(p + "attn.key.weight", &b.key_weight);
      out.emplace_back(p + "attn.key.bias", &b.key_bias);
      out.emplace_back(p + "attn.value.weight", &b.value_weight);
      out.emplace_back(p + "attn.value.bias", &b.value_bias);
      out.emplace_back(p + "attn.out.weight", &b.out_weight);
      out.emplace_back(p + "attn.out.bias", &b.out_bias);
      out.emplace_back(p + "norm2.gain", &b.norm2_gain);
      out.emplace_back(p + "norm2.bias", &b.norm2_bias);
      out.emplace_back(p + "mlp.in.weight", &b.mlp_in_weight);
      out.emplace_back(p + "mlp.in.bias", &b.mlp_in_bias);
      out.emplace_back(p + "mlp.out.weight", &b.mlp_out_weight);
      out.emplace_back(p + "mlp.out.bias", &b.mlp_out_bias);
    }
    out.emplace_back("norm.gain", &self.final_norm_gain);
    out.emplace_back("norm.bias", &self.final_norm_bias);
    out.emplace_back("head.weight", &self.head_weight);
    out.emplace_back("head.bias", &self.head_bias);
    return out;
  }

  PViTConfig config_;
};

/// Tape handles for every model parameter.
struct PViTVars {
  struct Block {
    Var norm1_gain, norm1_bias, query_weight, query_bias, key_weight, key_bias, value_weight,
        value_bias, out_weight, out_bias, norm2_gain, norm2_bias, mlp_in_weight, mlp_in_bias,
        mlp_out_weight, mlp_out_bias;
  };
  Var patch_weight, patch_bias, cls_token, pos_embedding, prior_projection;
  std::vector<Block> blocks;
  Var final_norm_gain, final_norm_bias, head_weight, head_bias;
};

namespace detail {

template <typename Model, typename Leaf>
PViTVars bind_impl(Model& m, Leaf&& leaf) {
  PViTVars v;
  v.patch_weight = leaf(m.patch_weight);
  v.patch_bias = leaf(m.patch_bias);
  v.cls_token = leaf(m.cls_token);
  v.pos_embedding = leaf(m.pos_embedding);
  v.prior_projection = leaf(m.prior_projection);
  for (auto& b : m.blocks) {
    v.blocks.push_back({leaf(b.norm1_gain), leaf(b.norm1_bias), leaf(b.query_weight),
                        leaf(b.query_bias), leaf(b.key_weight), leaf(b.key_bias),
                        leaf(b.value_weight), leaf(b.value_bias), leaf(b.out_weight),
                        leaf(b.out_bias), leaf(b.norm2_gain), leaf(b.norm2_bias),
                        leaf(b.mlp_in_weight), leaf(b.mlp_in_bias), leaf(b.mlp_out_weight),
                        leaf(b.mlp_out_bias)});
  }
  v.final_norm_gain = leaf(m.final_norm_gain);
  v.final_norm_bias = leaf(m.final_norm_bias);
  v.head_weight = leaf(m.head_weight);
  v.head_bias = leaf(m.head_bias);
  return v;
}

inline Var linear(const Var& x, const Var& w, const Var& b) { return add_rows(matmul(x, w), b); }

}  // namespace detail

/// Binds parameters for training: gradients flow back into the model.
inline PViTVars bind(Tape& tape, PViTModel& model) {
  return detail::bind_impl(model, [&](Tensor& t) { return tape.param(t); });
}

/// Binds parameters as constants (inference).
inline PViTVars bind(Tape& tape, const PViTModel& model) {
  return detail::bind_impl(model, [&](const Tensor& t) { return tape.constant(Tensor(t.shape, t.data)); });
}

// ---------------------------------------------------------------------------
// Patches and tokens

/// Splits an image into raster-ordered P x P patches; row i is the
/// row-major (y, x, channel) flattening of patch i.
inline Tensor patchify(const Image& image, std::size_t patch) {
  if (patch == 0 || image.height % patch != 0 || image.width % patch != 0) {
    throw ShapeError("patchify: image " + std::to_string(image.height) + "x" +
                     std::to_string(image.width) + " not divisible by patch size " +
                     std::to_string(patch));
  }
  if (image.pixels.size() != image.height * image.width * image.channels) {
    throw ShapeError("patchify: pixel buffer does not match image dimensions");
  }
  const std::size_t gh = image.height / patch, gw = image.width / patch;
  const std::size_t c = image.channels;
  Tensor out({gh * gw, patch * patch * c});
  std::size_t k = 0;
  for (std::size_t py = 0; py < gh; ++py)
    for (std::size_t px = 0; px < gw; ++px)
      for (std::size_t dy = 0; dy < patch; ++dy)
        for (std::size_t dx = 0; dx < patch; ++dx)
          for (std::size_t ch = 0; ch < c; ++ch)
            out.data[k++] = image.at(py * patch + dy, px * patch + dx, ch);
  return out;
}

/// Stacked patches of several images: [B * N, P*P*C].
inline Tensor patchify_batch(std::span<const Image* const> images, const PViTConfig& cfg) {
  const std::size_t n = cfg.num_patches(), pd = cfg.patch_dim();
  Tensor out({images.size() * n, pd});
  for (std::size_t b = 0; b < images.size(); ++b) {
    const Image& img = *images[b];
    if (img.height != cfg.image_h || img.width != cfg.image_w || img.channels != cfg.channels) {
      throw ShapeError("image " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                       "x" + std::to_string(img.channels) + " does not match model input " +
                       std::to_string(cfg.image_h) + "x" + std::to_string(cfg.image_w) + "x" +
                       std::to_string(cfg.channels));
    }
    Tensor p = patchify(img, cfg.patch_size);
    std::copy(p.data.begin(), p.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(b * n * pd));
  }
  return out;
}

/// alpha * softmax(prior_logits) . W_proj for each row of `prior_logits`
/// ([B, K] -> [B, D]). In batch-broadcast mode every row receives the token
/// of the batch-mean prior distribution.
inline Var prior_tokens(const Var& prior_logits, const Var& projection, double alpha,
                        PriorBroadcast broadcast = PriorBroadcast::per_sample) {
  const Tensor& p = prior_logits.value();
  if (p.rank() != 2 || p.cols() != projection.value().rows()) {
    throw ShapeError("prior logits " + shape_string(p.shape) + " do not match projection " +
                     shape_string(projection.shape()));
  }
  for (double v : p.data) {
    if (!std::isfinite(v)) throw ShapeError("prior logits must be finite");
  }
  Var probs = softmax(prior_logits, 1);
  if (broadcast == PriorBroadcast::batch && p.rows() > 1) {
    const std::size_t b = p.rows();
    Var mean = prior_logits.tape().constant(Tensor({b, b}, 1.0 / static_cast<double>(b)));
    probs = matmul(mean, probs);
  }
  return scale(matmul(probs, projection), alpha);
}

/// Builds the [B * (N+2), D] encoder input from patch embeddings
/// ([B * N, D]) and prior tokens ([B, D]).
inline Var assemble_sequence(const PViTVars& vars, const Var& patch_emb, const Var& tokens,
                             std::size_t batch) {
  const std::size_t positions = vars.pos_embedding.value().rows();
  const std::size_t n = positions - 1;
  const std::size_t d = vars.pos_embedding.value().cols();
  if (patch_emb.value().rank() != 2 || patch_emb.value().rows() != batch * n ||
      patch_emb.value().cols() != d || tokens.value().rank() != 2 ||
      tokens.value().rows() != batch || tokens.value().cols() != d) {
    throw ShapeError("assemble_sequence: patches " + shape_string(patch_emb.shape()) +
                     " / prior tokens " + shape_string(tokens.shape()) + " do not fit " +
                     std::to_string(batch) + " sequences of " + std::to_string(n) +
                     " patches, dim " + std::to_string(d));
  }
  Var cls = add(vars.cls_token, slice_rows(vars.pos_embedding, 0, 1));
  Var patches = add_rows(patch_emb, slice_rows(vars.pos_embedding, 1, positions));
  std::vector<Var> parts;
  parts.reserve(3 * batch);
  for (std::size_t b = 0; b < batch; ++b) {
    parts.push_back(cls);
    parts.push_back(batch == 1 ? patches : slice_rows(patches, b * n, (b + 1) * n));
    parts.push_back(batch == 1 ? tokens : slice_rows(tokens, b, b + 1));
  }
  return concat_rows(parts);
}

struct EncoderOutput {
  Var representation;           // [B, D], final-norm class rows
  std::vector<Var> attention;   // per layer; probabilities in tape.saved()
};

/// Pre-LN encoder stack over `batch` stacked sequences.
inline EncoderOutput encode(const PViTVars& vars, const Var& seq, std::size_t batch,
                            std::size_t heads) {
  const std::size_t rows = seq.value().rows();
  if (batch == 0 || rows % batch != 0) throw ShapeError("encode: sequence rows not divisible by batch");
  const std::size_t len = rows / batch;
  EncoderOutput out;
  Var z = seq;
  for (const auto& blk : vars.blocks) {
    Var h = layer_norm(z, blk.norm1_gain, blk.norm1_bias);
    Var q = detail::linear(h, blk.query_weight, blk.query_bias);
    Var k = detail::linear(h, blk.key_weight, blk.key_bias);
    Var v = detail::linear(h, blk.value_weight, blk.value_bias);
    Var a = attention(q, k, v, batch, heads);
    out.attention.push_back(a);
    z = add(z, detail::linear(a, blk.out_weight, blk.out_bias));
    Var h2 = layer_norm(z, blk.norm2_gain, blk.norm2_bias);
    Var m = gelu(detail::linear(h2, blk.mlp_in_weight, blk.mlp_in_bias));
    z = add(z, detail::linear(m, blk.mlp_out_weight, blk.mlp_out_bias));
  }
  std::vector<std::size_t> cls_rows(batch);
  for (std::size_t b = 0; b < batch; ++b) cls_rows[b] = b * len;
  out.representation =
      layer_norm(gather_rows(z, std::move(cls_rows)), vars.final_norm_gain, vars.final_norm_bias);
  return out;
}

struct BatchForward {
  Var logits;      // [B, K]
  Var sequence;    // encoder input
  EncoderOutput encoder;
};

/// Full forward pass on a tape. `patches` is [B * N, P*P*C], `prior_logits`
/// is [B, K]. Inference always uses per-sample tokens; training passes the
/// configured broadcast mode.
inline BatchForward forward_batch(const PViTVars& vars, const PViTConfig& cfg, const Var& patches,
                                  const Var& prior_logits, double alpha,
                                  PriorBroadcast broadcast = PriorBroadcast::per_sample) {
  const std::size_t batch = prior_logits.value().rows();
  Var emb = detail::linear(patches, vars.patch_weight, vars.patch_bias);
  Var tokens = prior_tokens(prior_logits, vars.prior_projection, alpha, broadcast);
  BatchForward out;
  out.sequence = assemble_sequence(vars, emb, tokens, batch);
  out.encoder = encode(vars, out.sequence, batch, cfg.heads);
  out.logits = detail::linear(out.encoder.representation, vars.head_weight, vars.head_bias);
  return out;
}

// ---------------------------------------------------------------------------
// Single-sample value API

struct ForwardTrace {
  std::vector<std::vector<Tensor>> attention;  // [layer][head] -> (N+2) x (N+2)
  std::vector<double> representation;          // Y, length D
  std::vector<double> logits;                  // length K, empty until classified
};

struct AttentionView {
  Tensor matrix;       // (N+2) x (N+2), rows sum to 1
  double prior_mass;   // class-token row's weight on the prior token
};

inline Tensor make_prior_token(std::span<const double> prior_logits, const PViTModel& model,
                               double alpha) {
  const std::size_t k = model.config().num_classes;
  if (prior_logits.size() != k) {
    throw ShapeError("prior logits have length " + std::to_string(prior_logits.size()) +
                     ", model expects " + std::to_string(k));
  }
  Tape tape(Tape::Mode::inference);
  Var p = tape.constant(Tensor({1, k}, std::vector<double>(prior_logits.begin(), prior_logits.end())));
  Var w = tape.constant(Tensor(model.prior_projection.shape, model.prior_projection.data));
  Tensor out = prior_tokens(p, w, alpha).value();
  return out;
}

inline Tensor embed_patches(const Tensor& patches, const PViTModel& model) {
  Tape tape(Tape::Mode::inference);
  Var x = tape.constant(patches);
  Var w = tape.constant(Tensor(model.patch_weight.shape, model.patch_weight.data));
  Var b = tape.constant(Tensor(model.patch_bias.shape, model.patch_bias.data));
  return detail::linear(x, w, b).value();
}

inline Tensor assemble_sequence(const Tensor& patch_emb, const PViTModel& model,
                                const Tensor& prior_token) {
  Tape tape(Tape::Mode::inference);
  PViTVars vars = bind(tape, model);
  return assemble_sequence(vars, tape.constant(patch_emb), tape.constant(prior_token), 1).value();
}

namespace detail {

inline ForwardTrace trace_from(const Tape& tape, const EncoderOutput& enc, std::size_t heads,
                               std::size_t seq, std::size_t sample) {
  ForwardTrace trace;
  for (const Var& a : enc.attention) {
    const auto& probs = tape.saved(a);
    std::vector<Tensor> per_head;
    for (std::size_t h = 0; h < heads; ++h) {
      const auto* src = probs.data() + (sample * heads + h) * seq * seq;
      per_head.emplace_back(Shape{seq, seq}, std::vector<double>(src, src + seq * seq));
    }
    trace.attention.push_back(std::move(per_head));
  }
  const auto y = enc.representation.value().row(sample);
  trace.representation.assign(y.begin(), y.end());
  return trace;
}

}  // namespace detail

/// Runs the encoder stack on one assembled (N+2) x D sequence.
inline ForwardTrace encoder_forward(const Tensor& seq, const PViTModel& model) {
  const auto& cfg = model.config();
  if (seq.rank() != 2 || seq.rows() != cfg.seq_len() || seq.cols() != cfg.embed_dim) {
    throw ShapeError("encoder_forward: sequence " + shape_string(seq.shape) + ", expected [" +
                     std::to_string(cfg.seq_len()) + "," + std::to_string(cfg.embed_dim) + "]");
  }
  Tape tape(Tape::Mode::inference);
  PViTVars vars = bind(tape, model);
  EncoderOutput enc = encode(vars, tape.constant(seq), 1, cfg.heads);
  return detail::trace_from(tape, enc, cfg.heads, cfg.seq_len(), 0);
}

/// head . Y + bias.
inline std::vector<double> classify(const ForwardTrace& trace, const PViTModel& model) {
  const std::size_t d = model.config().embed_dim, k = model.config().num_classes;
  if (trace.representation.size() != d) throw ShapeError("classify: trace has no representation");
  std::vector<double> logits(model.head_bias.data.begin(), model.head_bias.data.end());
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < k; ++j) logits[j] += trace.representation[i] * model.head_weight(i, j);
  return logits;
}

/// Argmax with ties broken toward the lowest index.
inline std::size_t predicted_class(std::span<const double> logits) {
  if (logits.empty()) throw ShapeError("predicted_class: empty logits");
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i)
    if (logits[i] > logits[best]) best = i;
  return best;
}

inline AttentionView extract_attention(const ForwardTrace& trace, std::size_t layer,
                                       std::size_t head) {
  if (layer >= trace.attention.size()) {
    throw ShapeError("extract_attention: layer " + std::to_string(layer) + " out of range (0.." +
                     std::to_string(trace.attention.size()) + ")");
  }
  if (head >= trace.attention[layer].size()) {
    throw ShapeError("extract_attention: head " + std::to_string(head) + " out of range (0.." +
                     std::to_string(trace.attention[layer].size()) + ")");
  }
  const Tensor& m = trace.attention[layer][head];
  return {m, m(0, m.cols() - 1)};
}

/// Complete single-image forward pass with its trace and logits.
inline ForwardTrace forward(const PViTModel& model, const Image& image,
                            std::span<const double> prior_logits, double alpha) {
  const auto& cfg = model.config();
  if (prior_logits.size() != cfg.num_classes) {
    throw ShapeError("prior logits have length " + std::to_string(prior_logits.size()) +
                     ", model expects " + std::to_string(cfg.num_classes));
  }
  Tape tape(Tape::Mode::inference);
  PViTVars vars = bind(tape, model);
  const Image* img = &image;
  Var patches = tape.constant(patchify_batch(std::span<const Image* const>(&img, 1), cfg));
  Var priors = tape.constant(
      Tensor({1, cfg.num_classes}, std::vector<double>(prior_logits.begin(), prior_logits.end())));
  BatchForward fwd = forward_batch(vars, cfg, patches, priors, alpha);
  ForwardTrace trace = detail::trace_from(tape, fwd.encoder, cfg.heads, cfg.seq_len(), 0);
  trace.logits = fwd.logits.value().data;
  return trace;
}

inline ForwardTrace forward(const PViTModel& model, const Image& image,
                            std::span<const double> prior_logits) {
  return forward(model, image, prior_logits, model.config().alpha);
}

/// Logits [B, K] for a batch of images with their prior logits [B, K].
inline Tensor predict_batch(const PViTModel& model, std::span<const Image* const> images,
                            const Tensor& prior_logits, double alpha) {
  const auto& cfg = model.config();
  if (prior_logits.rank() != 2 || prior_logits.rows() != images.size() ||
      prior_logits.cols() != cfg.num_classes) {
    throw ShapeError("predict_batch: prior logits " + shape_string(prior_logits.shape) +
                     " do not match " + std::to_string(images.size()) + " images x " +
                     std::to_string(cfg.num_classes) + " classes");
  }
  Tape tape(Tape::Mode::inference);
  PViTVars vars = bind(tape, model);
  Var patches = tape.constant(patchify_batch(images, cfg));
  Var priors = tape.constant(prior_logits);
  return forward_batch(vars, cfg, patches, priors, alpha).logits.value();
}

}  // namespace pvit
