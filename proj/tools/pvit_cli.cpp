// pvit: train priors and PViT models, score, evaluate, dump attention.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "pvit/commands.hpp"

namespace {

using Command = void (*)(const pvit::RunConfig&, std::ostream&);

int run(int argc, char** argv) {
  CLI::App app{"Prior-guided vision transformer toolkit"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::uint64_t seed = 0;
  std::string out;
  std::vector<std::string> overrides;
  auto* seed_opt = app.add_option("--seed", seed, "Seed (overrides the config)");
  app.add_option("--config", config_path, "Run config (key = value lines)")->check(CLI::ExistingFile);
  auto* out_opt = app.add_option("--out", out, "Output directory (overrides the config)");
  app.add_option("--set", overrides, "Extra key=value setting, applied after the config");

  const std::vector<std::pair<std::string, Command>> commands{
      {"train-prior", pvit::cli::train_prior},       {"train-pvit", pvit::cli::train_pvit},
      {"score", pvit::cli::score},                   {"eval", pvit::cli::eval},
      {"attention-dump", pvit::cli::attention_dump}, {"export-logits", pvit::cli::export_logits_cmd},
  };
  const std::vector<std::string> help{
      "Train the prior classifier and export its logits for every split",
      "Train PViT with per-sample prior tokens",
      "Write PGE and baseline scores for ID-test and every OOD set",
      "Compute AUROC/FPR95 and score histograms from score files",
      "Write attention matrices and prior-token attention mass",
      "Export prior or PViT logits for every split",
  };
  for (std::size_t i = 0; i < commands.size(); ++i) app.add_subcommand(commands[i].first, help[i]);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    pvit::RunConfig cfg = config_path.empty() ? pvit::RunConfig() : pvit::RunConfig::load(config_path);
    for (const auto& kv : overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw pvit::ConfigError("--set expects key=value, got '" + kv + "'");
      cfg.set(pvit::detail::trim(kv.substr(0, eq)), pvit::detail::trim(kv.substr(eq + 1)), "--set: ");
    }
    if (*seed_opt) cfg.set("seed", std::to_string(seed));
    if (*out_opt) cfg.set("out", out);
    for (const auto& [name, fn] : commands) {
      if (app.got_subcommand(name)) fn(cfg, std::cout);
    }
    return 0;
  } catch (const pvit::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace

int main(int argc, char** argv) { return run(argc, argv); }
