// Runs the pvit_cli binary end to end on a tiny configuration.

#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "pvit/checkpoint.hpp"
#include "pvit/scoring.hpp"

namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const char* kTiny =
    "data.classes = 3\n"
    "data.train_per_class = 12\n"
    "data.test_per_class = 6\n"
    "data.image_size = 12\n"
    "model.image_size = 12\n"
    "model.patch = 4\n"
    "model.dim = 16\n"
    "model.depth = 2\n"
    "model.heads = 2\n"
    "model.mlp_dim = 16\n"
    "ood.n = 10\n"
    "prior.hidden = 8\n"
    "prior.epochs = 2\n"
    "train.epochs = 2\n"
    "train.batch_size = 8\n"
    "attention.samples = 3\n";

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root = fs::temp_directory_path() / "pvit_cli_test";
    fs::remove_all(root);
    fs::create_directories(root);
    std::ofstream(root / "tiny.cfg") << kTiny;
  }
  static void TearDownTestSuite() { fs::remove_all(root); }

  /// Runs `pvit_cli <args>` with stdout/stderr captured to files.
  static Outcome cli(const std::string& args) {
    const fs::path o = root / "stdout.txt", e = root / "stderr.txt";
    const std::string cmd = std::string("\"") + PVIT_CLI_PATH + "\" " + args + " > \"" + o.string() + "\" 2> \"" +
                            e.string() + "\"";
    const int status = std::system(cmd.c_str());
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(o), slurp(e)};
  }
  static std::string tiny(const fs::path& out) {
    return "--config \"" + (root / "tiny.cfg").string() + "\" --out \"" + out.string() + "\"";
  }
  /// train-prior + train-pvit into `out`; fails the test on a nonzero exit.
  static void pipeline(const fs::path& out, const std::string& extra = "") {
    for (const char* cmd : {"train-prior", "train-pvit"}) {
      const Outcome r = cli(std::string(cmd) + " " + tiny(out) + " " + extra);
      ASSERT_EQ(r.code, 0) << cmd << ": " << r.err;
    }
  }

  static inline fs::path root;
};

}  // namespace

TEST_F(Cli, UsageErrorsExitOne) {
  EXPECT_EQ(cli("").code, 1);
  EXPECT_EQ(cli("frobnicate").code, 1);
  EXPECT_EQ(cli("--help").code, 0);
  EXPECT_EQ(cli("score --set bogus.key=1").code, 1);
  EXPECT_EQ(cli("score --config /nonexistent/file.cfg").code, 1);
}

TEST_F(Cli, MissingDatasetPathNamesKey) {
  const Outcome r = cli("train-prior --out \"" + (root / "missing").string() + "\" --set data.source=idx");
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.err.find("data.train_images"), std::string::npos) << r.err;
}

TEST_F(Cli, TrainPriorWritesLogitsPerSplitReproducibly) {
  const fs::path a = root / "prior_a", b = root / "prior_b";
  ASSERT_EQ(cli("train-prior " + tiny(a)).code, 0);
  ASSERT_EQ(cli("train-prior " + tiny(b)).code, 0);
  for (const char* split : {"id-train", "id-test", "ood-uniform-noise", "ood-pattern-shift"}) {
    const fs::path f = fs::path("logits") / (std::string(split) + ".jsonl");
    ASSERT_TRUE(fs::exists(a / f)) << f;
    EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  }
  EXPECT_TRUE(fs::exists(a / "prior.ckpt"));
  EXPECT_TRUE(fs::exists(a / "train-prior.resolved.cfg"));
  EXPECT_EQ(slurp(a / "prior.ckpt"), slurp(b / "prior.ckpt"));
}

TEST_F(Cli, FullPipeline) {
  const fs::path out = root / "full";
  pipeline(out);

  // alpha reaches the model verbatim.
  EXPECT_EQ(pvit::load_pvit((out / "pvit.ckpt").string()).model.config().alpha, 0.1);
  const auto info = nlohmann::json::parse(slurp(out / "pvit.json"));
  EXPECT_EQ(info.at("alpha").get<double>(), 0.1);
  EXPECT_EQ(info.at("trained_steps").get<std::uint64_t>(), 10u);  // 2 epochs x ceil(36 / 8)

  ASSERT_EQ(cli("score " + tiny(out) + " --set score.guidance=ce,ed").code, 0);
  const auto ce = pvit::read_scores((out / "scores/ce/ood-uniform-noise.jsonl").string());
  const auto ed = pvit::read_scores((out / "scores/ed/ood-uniform-noise.jsonl").string());
  ASSERT_EQ(ce.records.size(), 10u);
  bool guidance_differs = false;
  for (std::size_t i = 0; i < ce.records.size(); ++i) {
    EXPECT_EQ(ce.records[i].base, ed.records[i].base);
    guidance_differs |= ce.records[i].guidance != ed.records[i].guidance;
    EXPECT_NE(ce.records[i].pge, ed.records[i].pge);
  }
  EXPECT_TRUE(guidance_differs);
  EXPECT_EQ(ce.header.alpha, 0.1);
  EXPECT_EQ(ce.header.checkpoint.rfind("sha256:", 0), 0u);

  // Two OOD sets, one field: two metric JSONs plus one summary.
  ASSERT_EQ(cli("eval " + tiny(out) + " --set score.guidance=ce,ed").code, 0);
  std::size_t jsons = 0, others = 0;
  for (const auto& e : fs::directory_iterator(out / "metrics/ce")) {
    (e.path().extension() == ".json" ? jsons : others) += 1;
  }
  EXPECT_EQ(jsons, 2u);
  EXPECT_EQ(others, 1u);
  EXPECT_TRUE(fs::exists(out / "metrics/ce/summary.tsv"));
  EXPECT_TRUE(fs::exists(out / "histograms/ed/ood-pattern-shift__pge.csv"));
  const auto m = nlohmann::json::parse(slurp(out / "metrics/ce/ood-uniform-noise__pge.json"));
  EXPECT_GE(m.at("auroc").get<double>(), 0.5);

  EXPECT_EQ(cli("eval " + tiny(out) + " --set eval.fields=mahalanobis").code, 1);

  ASSERT_EQ(cli("attention-dump " + tiny(out) + " --set attention.alphas=0.1,1,10").code, 0);
  std::ifstream mass(out / "attention/prior_mass.csv");
  std::string line;
  std::getline(mass, line);
  EXPECT_EQ(line, "alpha,id,layer,head,prior_mass,max_row_sum_error");
  std::size_t rows = 0;
  while (std::getline(mass, line)) {
    ++rows;
    EXPECT_LE(std::stod(line.substr(line.rfind(',') + 1)), 1e-9) << line;
  }
  EXPECT_EQ(rows, 9u);
  for (const auto& e : fs::directory_iterator(out / "attention/alpha_10")) {
    std::ifstream in(e.path());
    std::size_t n = 0;
    while (std::getline(in, line)) {
      double sum = 0;
      std::stringstream ss(line);
      std::string cell;
      while (std::getline(ss, cell, ',')) sum += std::stod(cell);
      EXPECT_NEAR(sum, 1.0, 1e-9);
      ++n;
    }
    EXPECT_EQ(n, 11u);  // 9 patches + class + prior tokens
  }

  ASSERT_EQ(cli("export-logits " + tiny(out) + " --set export.model=pvit").code, 0);
  EXPECT_TRUE(fs::exists(out / "exported/pvit/id-test.jsonl"));
}

TEST_F(Cli, ResumeContinuesStepCounter) {
  const fs::path out = root / "resume";
  pipeline(out);
  fs::copy_file(out / "pvit.ckpt", out / "first.ckpt");
  const Outcome r = cli("train-pvit " + tiny(out) + " --set train.resume=\"" + (out / "first.ckpt").string() + "\"");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(pvit::load_pvit((out / "pvit.ckpt").string()).trained_steps, 20u);
  std::ifstream csv(out / "loss.csv");
  std::string line;
  std::getline(csv, line);
  std::getline(csv, line);
  EXPECT_EQ(line.substr(0, line.find(',')), "11");
}

TEST_F(Cli, CorruptedCheckpointNamesFile) {
  const fs::path out = root / "corrupt";
  pipeline(out);
  {
    std::fstream f(out / "pvit.ckpt", std::ios::in | std::ios::out | std::ios::binary);
    f.write("NOPE", 4);
  }
  const Outcome r = cli("score " + tiny(out));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("pvit.ckpt"), std::string::npos) << r.err;
  const Outcome resume = cli("train-pvit " + tiny(out) + " --set train.resume=\"" + (out / "pvit.ckpt").string() + "\"");
  EXPECT_EQ(resume.code, 2);
}

TEST_F(Cli, LogitsOnlyScoringWithoutModel) {
  const fs::path out = root / "logits_only";
  ASSERT_EQ(cli("train-prior " + tiny(out)).code, 0);
  // A second prior with another seed stands in for an external classifier.
  const fs::path other = root / "logits_other";
  ASSERT_EQ(cli("train-prior " + tiny(other) + " --seed 5").code, 0);
  const std::string args = tiny(out) + " --set score.source=logits --set prior.source=logits --set score.guidance=ce,kl,ed" +
                           " --set score.predicted_logits_dir=\"" + (other / "logits").string() + "\"";
  ASSERT_EQ(cli("score " + args).code, 0);
  ASSERT_EQ(cli("eval " + args).code, 0);
  for (const char* g : {"ce", "kl", "ed"}) {
    EXPECT_TRUE(fs::exists(out / "metrics" / g / "ood-uniform-noise__pge.json")) << g;
  }
  EXPECT_FALSE(fs::exists(out / "pvit.ckpt"));
}
