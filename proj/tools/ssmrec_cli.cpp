// Command-line front end: gen, train, eval, gradcheck, sweep.
#include <CLI11.hpp>

#include <malloc.h>

#include <fstream>
#include <iostream>

#include "ssmrec/run.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;

struct CommonFlags {
  std::string config;
  std::string preset;
  std::string out;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::vector<std::string> ablate;
};

void add_common(CLI::App* app, CommonFlags& f) {
  app->add_option("--config", f.config, "JSON run config");
  app->add_option("--preset", f.preset, "Hyperparameter preset")->check(CLI::IsMember({"main", "appendix"}));
  app->add_option("--out", f.out, "Output directory");
  app->add_option("--seed", f.seed, "Seed for training and data generation");
  app->add_option("--ablate", f.ablate,
                  "Disable losses: time, state, both, with optional -train or -test suffix");
}

ssmrec::RunConfig resolve(const CommonFlags& f, const CLI::App* app) {
  nlohmann::json j = nlohmann::json::object();
  if (!f.config.empty()) {
    std::ifstream in(f.config);
    if (!in) throw ssmrec::ConfigError({"cannot read config " + f.config});
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ssmrec::ConfigError({"config " + f.config + " is not valid JSON: " + e.what()});
    }
  }
  if (!f.preset.empty()) j["preset"] = f.preset;
  ssmrec::RunConfig cfg = ssmrec::config_from_json(j);
  if (!f.out.empty()) cfg.out_dir = f.out;
  if (app->count("--seed") > 0) {
    cfg.seed = f.seed;
    cfg.data.generator_seed = f.seed;
  }
  for (const auto& a : f.ablate) ssmrec::apply_ablation(cfg, a);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  // Graphs allocate and free the same large buffers every step; keep them
  // in the heap instead of round-tripping through mmap.
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);
  CLI::App app{"Selective state-space sequential recommender with test-time alignment"};
  app.require_subcommand(1);

  CommonFlags gen_f, train_f, eval_f, grad_f, sweep_f;
  auto* gen = app.add_subcommand("gen", "Generate the synthetic interest-shift dataset");
  add_common(gen, gen_f);
  auto* train = app.add_subcommand("train", "Train a model and write the best checkpoint");
  add_common(train, train_f);
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on the test split");
  add_common(eval, eval_f);
  std::string checkpoint;
  std::string ttt = "on";
  eval->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  eval->add_option("--ttt", ttt, "Test-time adaptation")->check(CLI::IsMember({"on", "off"}));
  auto* grad = app.add_subcommand("gradcheck", "Finite-difference check of every loss");
  add_common(grad, grad_f);
  auto* sweep = app.add_subcommand("sweep", "Grid over the training loss weights");
  add_common(sweep, sweep_f);
  std::vector<double> grid{0.01, 0.1, 1.0, 10.0};
  sweep->add_option("--grid", grid, "Values tried for both weights");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*gen) {
      ssmrec::cmd_gen(resolve(gen_f, gen));
    } else if (*train) {
      ssmrec::cmd_train(resolve(train_f, train));
    } else if (*eval) {
      ssmrec::cmd_eval(resolve(eval_f, eval), checkpoint, ttt == "on");
    } else if (*grad) {
      if (!ssmrec::cmd_gradcheck(resolve(grad_f, grad))) {
        std::cerr << "gradient check failed\n";
        return kExitNumeric;
      }
    } else if (*sweep) {
      ssmrec::cmd_sweep(resolve(sweep_f, sweep), grid);
    }
  } catch (const ssmrec::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const std::domain_error& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const ssmrec::ConfigError& e) {
    std::cerr << e.what() << '\n';
    return kExitConfig;
  } catch (const ssmrec::DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
