// Command-line front end: train / evaluate / oracle / archstudy /
// amortize-compare over a JSON experiment config.
// Exit codes: 0 success, 1 config error, 2 numeric failure, 3 missing
// checkpoint.

#include <cstdio>
#include <filesystem>
#include <string>

#include <CLI11.hpp>

#include "boed/harness.hpp"

using namespace boed;

int main(int argc, char** argv) {
  CLI::App app{"expected-information-gain estimation for GLM experimental designs"};
  app.require_subcommand(1);

  std::string config_path, checkpoint, out_dir;
  std::uint64_t seed = 0;
  bool desk = false, no_train = false, retrain = false;
  std::size_t workers = 1;

  auto add_common = [&](CLI::App* sub, bool eval_flags) {
    sub->add_option("--config", config_path, "JSON experiment config")->required();
    sub->add_option("--seed", seed, "override the config seed");
    sub->add_option("--checkpoint", checkpoint, "checkpoint path (load or save)");
    sub->add_option("--out", out_dir, "output directory (overrides config)");
    sub->add_flag("--desk-scale", desk, "use the small CPU training/evaluation budgets");
    sub->add_option("--workers", workers, "evaluation worker threads; never affects results");
    if (eval_flags) {
      sub->add_flag("--no-train", no_train, "load the checkpoint instead of training");
      sub->add_flag("--retrain-per-run", retrain, "retrain the posterior for every run");
    }
  };

  CLI::App* cmd_train = app.add_subcommand("train", "train the amortized posterior");
  add_common(cmd_train, false);
  CLI::App* cmd_eval = app.add_subcommand("evaluate", "run the estimator comparison");
  add_common(cmd_eval, true);
  CLI::App* cmd_oracle = app.add_subcommand("oracle", "ground-truth EIG for the eval designs");
  add_common(cmd_oracle, false);
  CLI::App* cmd_arch = app.add_subcommand("archstudy", "encoder/flow architecture grid");
  add_common(cmd_arch, false);
  CLI::App* cmd_amort =
      app.add_subcommand("amortize-compare", "amortized posterior vs per-design baseline");
  add_common(cmd_amort, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    ExperimentConfig cfg = load_config_file(config_path);
    CLI::App* sub = app.get_subcommands().front();
    if (sub->get_option("--seed")->count()) {
      cfg.seed = seed;
      cfg.train.seed = seed;
    }
    if (!out_dir.empty()) cfg.out_dir = out_dir;
    if (!checkpoint.empty()) cfg.checkpoint_path = checkpoint;
    if (desk) apply_desk_scale(cfg);
    if (no_train) cfg.no_train = true;
    if (retrain) cfg.retrain_per_run = true;
    if (sub->get_option("--workers")->count()) cfg.workers = workers;

    if (app.got_subcommand(cmd_train)) {
      std::filesystem::create_directories(cfg.out_dir);
      GlmModel model = make_model(cfg);
      TrainConfig tc = cfg.train;
      tc.seed = cfg.seed;
      LossTrace trace;
      FlowParams params = train(model, cfg.encoder, cfg.flow, tc, &trace);
      const std::string ckpt =
          cfg.checkpoint_path.empty() ? cfg.out_dir + "/checkpoint.bin" : cfg.checkpoint_path;
      save_checkpoint(ckpt, params, cfg.encoder, cfg.flow, tc.seed);
      write_loss_trace(cfg.out_dir + "/loss_trace.csv", trace);
      std::printf("trained %zu steps; checkpoint at %s\n", tc.steps, ckpt.c_str());
    } else if (app.got_subcommand(cmd_eval)) {
      run_model_experiment(cfg);
      std::printf("results in %s\n", cfg.out_dir.c_str());
    } else if (app.got_subcommand(cmd_oracle)) {
      run_oracle_check(cfg);
      std::printf("oracle values in %s/oracle.csv\n", cfg.out_dir.c_str());
    } else if (app.got_subcommand(cmd_arch)) {
      auto summary = run_archstudy(cfg);
      for (const auto& [label, loss] : summary)
        std::printf("%-32s final-50-step mean loss %.6f\n", label.c_str(), loss);
    } else {
      run_amortization_experiment(cfg);
      std::printf("comparison in %s\n", cfg.out_dir.c_str());
    }
    return 0;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 1;
  } catch (const CheckpointError& e) {
    std::fprintf(stderr, "checkpoint error: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
}
