#pragma once
// Config-driven experiment harness: builds models from a strict JSON config,
// trains or loads the amortized posterior, evaluates the five estimators
// across designs and runs, and writes the CSV / SVG / timing artifacts.

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "boed/amortized.hpp"
#include "boed/models.hpp"
#include "boed/trainer.hpp"

namespace boed {

// Exit-code mapping in the CLI: ConfigError -> 1, numeric failures -> 2,
// CheckpointError -> 3.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct EvalBudgets {
  // defaults are the full-scale profile; apply_desk_scale shrinks them
  std::size_t posterior_N = 5000;
  std::size_t vnmc_N = 1000;
  std::size_t vnmc_M = 31;
  std::size_t nmc_N = 30000;
  std::size_t nmc_M = 173;
  std::size_t oracle_N = 5000;  // Monte Carlo draws for the conjugate ground truth
};

struct ExperimentConfig {
  enum class Kind { amortization, model, archstudy, oracle_check };
  Kind kind = Kind::model;

  Family family = Family::normal;
  std::size_t n_predictors = 1;
  double prior_var = 1.0;
  GlmOptions glm;

  std::size_t eval_units = 5;  // rows per evaluation design
  std::size_t n_eval_designs = 50;
  std::size_t n_runs = 20;
  EvalBudgets budgets;

  EncoderConfig encoder;
  FlowConfig flow;
  TrainConfig train;

  std::uint64_t seed = 0;
  std::string out_dir = ".";
  bool no_train = false;
  bool retrain_per_run = false;
  std::string checkpoint_path;  // load source under no_train, save target otherwise
  std::size_t workers = 1;      // evaluation fan-out; never affects results
};

GlmModel make_model(const ExperimentConfig& cfg);

// Strict parse: unknown keys anywhere raise ConfigError.
ExperimentConfig parse_config(const std::string& json_text);
ExperimentConfig load_config_file(const std::string& path);

// Small CPU profile: steps 500, batch 10, N 25; posterior N 1000,
// VNMC (200, 15), NMC (5000, 70).
void apply_desk_scale(ExperimentConfig& cfg);

struct ResultRow {
  std::size_t design = 0;
  std::string estimator;
  std::size_t run = 0;
  double value = 0.0;
  double std_err = 0.0;
  std::size_t N = 0;
  std::size_t M = 0;
  double seconds = 0.0;  // measured; reported in timing.txt, zeroed in the CSV
};

struct ResultTable {
  std::vector<ResultRow> rows;
};

// 17-significant-digit CSV with the mandatory header
// design,estimator,run,value,std_err,N,M,seconds. The seconds column is
// written as 0 so the file is a pure function of config and seed; measured
// wall time goes to timing.txt instead.
void write_results_csv(const std::string& path, const ResultTable& table);

// Line chart (one series per estimator, +-1 std-dev band across runs,
// designs sorted by oracle value when present, else by mean nmc-upper).
// A pure function of the CSV text: re-invoking on the same file yields a
// byte-identical SVG.
void emit_chart(const std::string& csv_path, const std::string& svg_path);

// Loss-trace chart for the architecture study; pure function of the CSV
// (columns variant,step,loss).
void emit_loss_chart(const std::string& csv_path, const std::string& svg_path);

// Experiment drivers. Each writes its artifacts under cfg.out_dir and also
// returns the table for programmatic checks.
ResultTable run_model_experiment(const ExperimentConfig& cfg);
ResultTable run_amortization_experiment(const ExperimentConfig& cfg);
// Trains the {attention, residual} x {affine-coupling x {4,8},
// rq-spline x {4,8}, none} grid (10 runs) and writes arch_loss.csv,
// arch_summary.csv and arch_loss.svg. Returns the final-50-step mean loss
// per variant, in grid order, as (variant, mean) pairs.
std::vector<std::pair<std::string, double>> run_archstudy(const ExperimentConfig& cfg);
ResultTable run_oracle_check(const ExperimentConfig& cfg);

}  // namespace boed
