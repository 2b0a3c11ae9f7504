#pragma once

// Subcommands behind the pvit CLI. Each takes a RunConfig, writes its
// artifacts under `out`, and reports to `log`.
//
//   <out>/prior.ckpt, prior_loss.csv, logits/<split>.jsonl   train-prior
//   <out>/pvit.ckpt, loss.csv, pvit.json                     train-pvit
//   <out>/scores/<guidance>/<split>.jsonl                    score
//   <out>/metrics/<guidance>/<ood>__<field>.json, summary.tsv eval
//   <out>/histograms/<guidance>/<ood>__<field>.csv           eval
//   <out>/attention/...                                      attention-dump
//   <out>/exported/<model>/<split>.jsonl                     export-logits

#include <openssl/evp.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "pvit/checkpoint.hpp"
#include "pvit/config.hpp"
#include "pvit/data.hpp"
#include "pvit/errors.hpp"
#include "pvit/metrics.hpp"
#include "pvit/model.hpp"
#include "pvit/optim.hpp"
#include "pvit/prior.hpp"
#include "pvit/scoring.hpp"
#include "pvit/trainer.hpp"

namespace pvit::cli {

namespace fs = std::filesystem;

inline fs::path out_dir(const RunConfig& c) { return fs::path(c.str("out")); }

/// Value of a path key, or `fallback` under the output directory when unset.
inline fs::path path_or(const RunConfig& c, const std::string& key, const fs::path& fallback) {
  const std::string v = c.str(key);
  return v.empty() ? out_dir(c) / fallback : fs::path(v);
}

inline void prepare_out(const RunConfig& c, const std::string& command) {
  fs::create_directories(out_dir(c));
  c.write_resolved((out_dir(c) / (command + ".resolved.cfg")).string());
}

inline void write_json(const fs::path& path, const nlohmann::json& j) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write '" + path.string() + "'");
  out << j.dump(2) << '\n';
}

inline std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path.string() + "'");
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr);
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), md, &len);
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << int{md[i]};
  return "sha256:" + hex.str();
}

// ---------------------------------------------------------------------------
// Datasets

struct Splits {
  Dataset train;
  Dataset test;
  std::vector<Dataset> ood;

  std::vector<const Dataset*> all() const {
    std::vector<const Dataset*> out{&train, &test};
    for (const auto& d : ood) out.push_back(&d);
    return out;
  }
  /// ID-test followed by the OOD sets.
  std::vector<const Dataset*> evaluation() const {
    std::vector<const Dataset*> out{&test};
    for (const auto& d : ood) out.push_back(&d);
    return out;
  }
  const Dataset& by_name(const std::string& name) const {
    for (const Dataset* d : all()) {
      if (d->name == name) return *d;
    }
    throw ConfigError("no dataset named '" + name + "'");
  }
};

inline SynthSpec synth_spec(const RunConfig& c) {
  SynthSpec s;
  s.classes = c.count("data.classes");
  s.family = parse_pattern_family(c.str("data.family"));
  s.noise = c.real("data.noise");
  s.seed = c.u64("data.seed");
  s.image_size = c.count("data.image_size");
  return s;
}

/// Dataset names of the configured OOD sets, without generating them.
inline std::vector<std::string> ood_names(const RunConfig& c) {
  std::vector<std::string> names;
  for (const auto& entry : c.list("ood.sets")) {
    if (entry.rfind("idx:", 0) == 0) {
      names.push_back("ood-" + fs::path(entry.substr(4)).stem().string());
    } else {
      names.push_back("ood-" + to_string(parse_ood_kind(entry)));
    }
  }
  return names;
}

inline void check_labels(const Dataset& d, std::size_t k) {
  if (!d.labels) return;
  for (std::size_t y : *d.labels) {
    if (y >= k) {
      throw FormatError(d.name + ": label " + std::to_string(y) + " outside [0," + std::to_string(k) + ")");
    }
  }
}

/// ID-train, ID-test and every OOD set, normalized with data.mean/data.std.
inline Splits load_splits(const RunConfig& c) {
  const std::string source = c.str("data.source");
  const SynthSpec spec = synth_spec(c);
  Splits s;
  if (source == "synth") {
    IdSplits id = make_id_splits(spec, c.count("data.train_per_class"), c.count("data.test_per_class"));
    s.train = std::move(id.train);
    s.test = std::move(id.test);
  } else if (source == "idx") {
    const std::string ti = c.require("data.train_images");
    const std::string tl = c.require("data.train_labels");
    const std::string vi = c.require("data.test_images");
    const std::string vl = c.require("data.test_labels");
    s.train = load_idx(ti, tl, "id-train", DatasetRole::id_train);
    s.test = load_idx(vi, vl, "id-test", DatasetRole::id_test);
    s.train.num_classes = s.test.num_classes = spec.classes;
    check_labels(s.train, spec.classes);
    check_labels(s.test, spec.classes);
  } else {
    throw ConfigError("data.source must be 'synth' or 'idx', got '" + source + "'");
  }
  const auto names = ood_names(c);
  const auto entries = c.list("ood.sets");
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (entries[i].rfind("idx:", 0) == 0) {
      s.ood.push_back(load_idx(entries[i].substr(4), std::nullopt, names[i], DatasetRole::ood_test));
    } else {
      OodSpec o{parse_ood_kind(entries[i]), c.u64("ood.seed"), c.count("ood.n")};
      s.ood.push_back(make_ood(o, spec, &s.test));
    }
  }
  const double mean = c.real("data.mean"), stddev = c.real("data.std");
  s.train = normalize(std::move(s.train), mean, stddev);
  s.test = normalize(std::move(s.test), mean, stddev);
  for (auto& d : s.ood) d = normalize(std::move(d), mean, stddev);
  return s;
}

// ---------------------------------------------------------------------------
// Priors and models

inline LogitsTable load_logits_dir(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw FormatError("logits directory '" + dir.string() + "' does not exist");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.path().extension() == ".jsonl") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw FormatError("no .jsonl logits files in '" + dir.string() + "'");
  LogitsTable all;
  for (const auto& f : files) all.merge(load_logits(f.string()));
  return all;
}

inline PriorSource open_prior(const RunConfig& c) {
  const std::string source = c.str("prior.source");
  if (source == "model") return PriorSource::from_model(load_prior(path_or(c, "prior.checkpoint", "prior.ckpt").string()));
  if (source == "logits") return PriorSource::from_table(load_logits_dir(path_or(c, "prior.logits_dir", "logits")));
  throw ConfigError("prior.source must be 'model' or 'logits', got '" + source + "'");
}

inline PViTConfig model_config(const RunConfig& c) {
  PViTConfig m;
  m.image_h = m.image_w = c.count("model.image_size");
  m.channels = c.count("model.channels");
  m.patch_size = c.count("model.patch");
  m.embed_dim = c.count("model.dim");
  m.depth = c.count("model.depth");
  m.heads = c.count("model.heads");
  m.mlp_dim = c.count("model.mlp_dim");
  m.num_classes = c.count("data.classes");
  m.alpha = c.real("model.alpha");
  m.prior_broadcast = parse_prior_broadcast(c.str("model.prior_broadcast"));
  m.validate();
  return m;
}

inline TrainConfig train_config(const RunConfig& c, const std::string& prefix) {
  TrainConfig t;
  t.epochs = c.count(prefix + ".epochs");
  t.batch_size = c.count(prefix + ".batch_size");
  t.base_lr = c.real(prefix + ".lr");
  t.warmup_epochs = c.count(prefix + ".warmup_epochs");
  t.weight_decay = c.real(prefix + ".weight_decay");
  if (prefix == "train") {
    t.beta1 = c.real("train.beta1");
    t.beta2 = c.real("train.beta2");
  }
  t.seed = c.u64("seed");
  t.validate();
  return t;
}

inline fs::path pvit_checkpoint(const RunConfig& c) { return path_or(c, "model.checkpoint", "pvit.ckpt"); }

// ---------------------------------------------------------------------------
// Commands

inline void train_prior(const RunConfig& c, std::ostream& log) {
  const TrainConfig tc = train_config(c, "prior");
  Splits s = load_splits(c);
  prepare_out(c, "train-prior");
  PriorTraining r = train_prior_model(s.train, c.count("prior.hidden"), tc);
  const fs::path ckpt = path_or(c, "prior.checkpoint", "prior.ckpt");
  fs::create_directories(ckpt.parent_path());
  save_prior(ckpt.string(), r.source.model());
  write_loss_csv(r.history, (out_dir(c) / "prior_loss.csv").string());
  const double test_acc = accuracy(r.source.logits(s.test), *s.test.labels);
  const fs::path dir = path_or(c, "prior.logits_dir", "logits");
  fs::create_directories(dir);
  for (const Dataset* d : s.all()) export_logits(r.source, *d, (dir / (d->name + ".jsonl")).string(), "prior-mlp");
  write_json(out_dir(c) / "prior.json", {{"train_accuracy", r.train_accuracy}, {"test_accuracy", test_acc}});
  log << "prior: train accuracy " << format_double(r.train_accuracy) << ", test accuracy "
      << format_double(test_acc) << "\n";
}

inline void train_pvit(const RunConfig& c, std::ostream& log) {
  const TrainConfig tc = train_config(c, "train");
  const PViTConfig mc = model_config(c);
  Splits s = load_splits(c);
  const PriorSource prior = open_prior(c);
  prepare_out(c, "train-pvit");
  OptimizerState state;
  PViTModel model(mc, c.u64("seed"));
  if (const std::string resume = c.str("train.resume"); !resume.empty()) {
    LoadedPViT loaded = load_pvit(resume);
    PViTConfig ck = loaded.model.config();
    ck.alpha = mc.alpha;
    ck.prior_broadcast = mc.prior_broadcast;
    if (!(ck == mc)) throw ConfigError("train.resume: checkpoint architecture differs from model.* keys");
    model = std::move(loaded.model);
    model.set_alpha(mc.alpha);
    state.step = loaded.trained_steps;
    log << "pvit: resuming from '" << resume << "' at step " << state.step << "\n";
  }
  TrainHistory h = train(model, s.train, prior, tc, state);
  const fs::path ckpt = pvit_checkpoint(c);
  fs::create_directories(ckpt.parent_path());
  save_pvit(ckpt.string(), model, state.step);
  write_loss_csv(h, (out_dir(c) / "loss.csv").string());
  const double acc = evaluate_accuracy(model, s.test, prior);
  write_json(out_dir(c) / "pvit.json",
             {{"test_accuracy", acc}, {"alpha", model.config().alpha}, {"trained_steps", state.step}});
  log << "pvit: alpha " << format_double(model.config().alpha) << ", steps " << state.step
      << ", test accuracy " << format_double(acc) << "\n";
}

inline std::vector<GuidanceKind> guidances(const RunConfig& c) {
  std::vector<GuidanceKind> out;
  for (const auto& g : c.list("score.guidance")) out.push_back(parse_guidance(g));
  if (out.empty()) throw ConfigError("score.guidance lists no guidance kind");
  return out;
}

inline fs::path score_path(const RunConfig& c, GuidanceKind g, const std::string& split) {
  return out_dir(c) / "scores" / to_string(g) / (split + ".jsonl");
}

inline void score(const RunConfig& c, std::ostream& log) {
  const auto kinds = guidances(c);
  const std::string source = c.str("score.source");
  if (source != "model" && source != "logits") {
    throw ConfigError("score.source must be 'model' or 'logits', got '" + source + "'");
  }
  prepare_out(c, "score");
  std::vector<std::string> splits{"id-test"};
  for (const auto& n : ood_names(c)) splits.push_back(n);

  if (source == "logits") {
    // Predicted and prior logits both come from files; no PViT involved.
    const fs::path pred_dir = fs::path(c.require("score.predicted_logits_dir"));
    std::optional<Splits> data;
    std::optional<PriorSource> model_prior;
    if (c.str("prior.source") == "model") {
      data = load_splits(c);
      model_prior = open_prior(c);
    }
    const fs::path prior_dir = path_or(c, "prior.logits_dir", "logits");
    for (const auto& split : splits) {
      const LogitsTable predicted = load_logits((pred_dir / (split + ".jsonl")).string());
      const LogitsTable prior = model_prior ? collect_logits(*model_prior, data->by_name(split), "prior-mlp")
                                            : load_logits((prior_dir / (split + ".jsonl")).string());
      for (GuidanceKind g : kinds) {
        const fs::path p = score_path(c, g, split);
        fs::create_directories(p.parent_path());
        write_scores(p.string(), {split, g, std::nullopt, "logits:" + predicted.model()},
                     score_tables(predicted, prior, g));
      }
      log << "score: " << split << " (" << predicted.size() << " samples, from logits)\n";
    }
    return;
  }

  const fs::path ckpt = pvit_checkpoint(c);
  const LoadedPViT loaded = load_pvit(ckpt.string());
  const std::string hash = sha256_file(ckpt);
  const Splits s = load_splits(c);
  const PriorSource prior = open_prior(c);
  for (const auto& split : splits) {
    const Dataset& d = s.by_name(split);
    const Tensor priors = prior.logits(d);
    const Tensor predicted = predict_dataset(loaded.model, d, priors, loaded.model.config().alpha);
    for (GuidanceKind g : kinds) {
      const fs::path p = score_path(c, g, split);
      fs::create_directories(p.parent_path());
      write_scores(p.string(), {split, g, loaded.model.config().alpha, hash},
                   detail::score_rows(d, predicted, priors, g));
    }
    log << "score: " << split << " (" << d.size() << " samples)\n";
  }
}

inline void eval(const RunConfig& c, std::ostream& log) {
  const auto kinds = guidances(c);
  const auto fields = c.list("eval.fields");
  if (fields.empty()) throw ConfigError("eval.fields lists no score field");
  for (const auto& f : fields) {
    if (std::find(score_fields().begin(), score_fields().end(), f) == score_fields().end()) {
      throw ConfigError("unknown score field '" + f + "'");
    }
  }
  const OrientationPolicy policy = parse_orientation_policy(c.str("eval.orientation"));
  const std::size_t bins = c.count("eval.bins");
  if (bins < 2) throw ConfigError("eval.bins must be at least 2");
  prepare_out(c, "eval");
  for (GuidanceKind g : kinds) {
    const auto id = read_scores(score_path(c, g, "id-test").string());
    const fs::path mdir = out_dir(c) / "metrics" / to_string(g);
    const fs::path hdir = out_dir(c) / "histograms" / to_string(g);
    fs::create_directories(mdir);
    fs::create_directories(hdir);
    std::ofstream summary(mdir / "summary.tsv", std::ios::binary);
    summary << "ood\tfield\torientation\tauroc\tfpr95\tthreshold\tauroc_as_is\tauroc_negated\n";
    for (const auto& name : ood_names(c)) {
      const auto ood = read_scores(score_path(c, g, name).string());
      for (const auto& f : fields) {
        OODMetrics m = evaluate(id.records, ood.records, f, policy);
        m.ood_dataset = name;
        write_json(mdir / (name + "__" + f + ".json"), to_json(m));
        histogram_export(field_values(id.records, f), field_values(ood.records, f), bins,
                         (hdir / (name + "__" + f + ".csv")).string());
        summary << name << '\t' << f << '\t' << to_string(m.orientation) << '\t' << format_double(m.auroc) << '\t'
                << format_double(m.fpr95) << '\t' << format_double(m.threshold) << '\t'
                << format_double(m.auroc_as_is) << '\t' << format_double(m.auroc_negated) << '\n';
        log << "eval[" << to_string(g) << "] " << name << " " << f << ": auroc " << format_double(m.auroc)
            << " (" << to_string(m.orientation) << "), fpr95 " << format_double(m.fpr95) << "\n";
      }
    }
  }
}

inline void attention_dump(const RunConfig& c, std::ostream& log) {
  const LoadedPViT loaded = load_pvit(pvit_checkpoint(c).string());
  const PViTModel& model = loaded.model;
  const auto& mc = model.config();
  const long long layer_cfg = c.integer("attention.layer");
  const std::size_t layer = layer_cfg < 0 ? mc.depth - 1 : static_cast<std::size_t>(layer_cfg);
  const std::size_t head = c.count("attention.head");
  if (layer >= mc.depth) throw ConfigError("attention.layer " + std::to_string(layer) + " out of range");
  if (head >= mc.heads) throw ConfigError("attention.head " + std::to_string(head) + " out of range");
  std::vector<double> alphas;
  for (const auto& a : c.list("attention.alphas")) {
    double v = 0;
    if (!detail::parse_number(a, v) || !(v >= 0.0)) throw ConfigError("attention.alphas: bad value '" + a + "'");
    alphas.push_back(v);
  }
  if (alphas.empty()) alphas.push_back(mc.alpha);
  const Splits s = load_splits(c);
  const PriorSource prior = open_prior(c);
  const Dataset& d = s.by_name(c.str("attention.split"));
  const std::size_t n = std::min(c.count("attention.samples"), d.size());
  prepare_out(c, "attention-dump");
  const fs::path dir = out_dir(c) / "attention";
  fs::create_directories(dir);
  std::ofstream mass(dir / "prior_mass.csv", std::ios::binary);
  mass << "alpha,id,layer,head,prior_mass,max_row_sum_error\n";
  for (double alpha : alphas) {
    const fs::path adir = dir / ("alpha_" + format_double(alpha));
    fs::create_directories(adir);
    double mean_mass = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const auto pl = prior_logits(prior, d, i);
      const ForwardTrace tr = forward(model, d.images[i], pl, alpha);
      const AttentionView v = extract_attention(tr, layer, head);
      std::ofstream out(adir / (d.ids[i] + ".csv"), std::ios::binary);
      double worst = 0.0;
      for (std::size_t r = 0; r < v.matrix.rows(); ++r) {
        double sum = 0.0;
        for (std::size_t col = 0; col < v.matrix.cols(); ++col) {
          if (col) out << ',';
          out << format_double(v.matrix(r, col));
          sum += v.matrix(r, col);
        }
        out << '\n';
        worst = std::max(worst, std::abs(sum - 1.0));
      }
      mass << format_double(alpha) << ',' << d.ids[i] << ',' << layer << ',' << head << ','
           << format_double(v.prior_mass) << ',' << format_double(worst) << '\n';
      mean_mass += v.prior_mass;
    }
    log << "attention: alpha " << format_double(alpha) << ", mean prior-token mass "
        << format_double(n ? mean_mass / static_cast<double>(n) : 0.0) << "\n";
  }
}

inline void export_logits_cmd(const RunConfig& c, std::ostream& log) {
  const std::string which = c.str("export.model");
  if (which != "prior" && which != "pvit") throw ConfigError("export.model must be 'prior' or 'pvit'");
  const Splits s = load_splits(c);
  const PriorSource prior = open_prior(c);
  prepare_out(c, "export-logits");
  const fs::path dir = path_or(c, "export.dir", fs::path("exported") / which);
  fs::create_directories(dir);
  std::optional<LoadedPViT> loaded;
  if (which == "pvit") loaded = load_pvit(pvit_checkpoint(c).string());
  for (const Dataset* d : s.all()) {
    const fs::path p = dir / (d->name + ".jsonl");
    if (!loaded) {
      export_logits(prior, *d, p.string(), "prior");
    } else {
      const Tensor logits = predict_dataset(loaded->model, *d, prior.logits(*d), loaded->model.config().alpha);
      LogitsTable t(logits.cols(), d->name, "pvit");
      for (std::size_t i = 0; i < d->size(); ++i) {
        const auto row = logits.row(i);
        LogitsRecord r{d->ids[i], std::nullopt, std::vector<double>(row.begin(), row.end())};
        if (d->labels) r.label = (*d->labels)[i];
        t.add(std::move(r));
      }
      write_logits(t, p.string());
    }
    log << "export: " << p.string() << "\n";
  }
}

}  // namespace pvit::cli
