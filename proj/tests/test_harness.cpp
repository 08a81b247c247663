#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include "boed/harness.hpp"
#include "boed/oracle.hpp"

using namespace boed;
namespace fs = std::filesystem;

namespace {

std::string tiny_config(const std::string& out_dir, const std::string& kind = "model") {
  return R"({
  "experiment": ")" + kind + R"(",
  "seed": 3,
  "output_dir": ")" + out_dir + R"(",
  "model": {"family": "normal", "n_predictors": 1, "prior_var": 1.0},
  "encoder": {"embed_blocks": 1, "embed_width": 8, "token_width": 8, "attn_layers": 1,
              "attn_heads": 2, "head_dim": 4, "post_attn_projection": 6,
              "emitter_blocks": 1, "emitter_width": 8,
              "residual_blocks": 1, "residual_width": 8},
  "flow": {"kind": "affine-coupling", "n_transforms": 2, "coupling_net_blocks": 1,
           "coupling_net_width": 8, "base_net_blocks": 1, "base_net_width": 8,
           "spline_bins": 5},
  "train": {"steps": 12, "designs_per_step": 3, "mc_N": 8, "design_units": 4},
  "evaluation": {"eval_units": 4, "n_eval_designs": 4, "n_runs": 3,
                 "posterior_N": 40, "vnmc_N": 30, "vnmc_M": 5, "nmc_N": 150, "nmc_M": 8,
                 "oracle_N": 50}
})";
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::path("harness_test") / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string str() const { return path.string(); }
};

int run_cli(const std::string& args) {
  const int rc = std::system(("./boed " + args + " >/dev/null 2>&1").c_str());
  return rc < 0 ? rc : (rc >> 8);
}

}  // namespace

TEST_CASE("config parsing: defaults carry the full-scale budgets") {
  ExperimentConfig cfg = parse_config(R"({"experiment": "model"})");
  CHECK(cfg.budgets.posterior_N == 5000);
  CHECK(cfg.budgets.vnmc_N == 1000);
  CHECK(cfg.budgets.vnmc_M == 31);
  CHECK(cfg.budgets.nmc_N == 30000);
  CHECK(cfg.budgets.nmc_M == 173);
  CHECK(cfg.train.steps == 5000);
  CHECK(cfg.train.designs_per_step == 50);
  CHECK(cfg.n_eval_designs == 50);
  CHECK(cfg.n_runs == 20);
  apply_desk_scale(cfg);
  CHECK(cfg.train.steps == 500);
  CHECK(cfg.train.designs_per_step == 10);
  CHECK(cfg.train.mc_N == 25);
  CHECK(cfg.budgets.posterior_N == 1000);
  CHECK(cfg.budgets.vnmc_N == 200);
  CHECK(cfg.budgets.vnmc_M == 15);
  CHECK(cfg.budgets.nmc_N == 5000);
  CHECK(cfg.budgets.nmc_M == 70);
}

TEST_CASE("config parsing rejects malformed input") {
  CHECK_THROWS_AS(parse_config("not json"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"seed": 1})"), ConfigError);  // missing experiment
  CHECK_THROWS_AS(parse_config(R"({"experiment": "bogus"})"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"experiment": "model", "typo_key": 1})"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"experiment": "model", "model": {"famly": "normal"}})"),
                  ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"experiment": "model", "model": {"family": "gaussianish"}})"),
                  ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"experiment": "model", "model": {"prior_var": -1}})"),
                  ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"experiment": "model", "train": {"steps": "many"}})"),
                  ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"experiment": "model", "evaluation": {"nmc_N": 0}})"),
                  ConfigError);
  CHECK_THROWS_AS(
      parse_config(R"({"experiment": "model", "encoder": {"attn_heads": 5, "head_dim": 7}})"),
      ConfigError);
}

TEST_CASE("model experiment: row schema, counts, and finiteness") {
  TempDir dir("model_rows");
  ExperimentConfig cfg = parse_config(tiny_config(dir.str()));
  ResultTable t = run_model_experiment(cfg);
  // 4 designs x 5 estimators x 3 runs + 4 oracle rows
  REQUIRE(t.rows.size() == 4 * 5 * 3 + 4);
  std::set<std::string> tags;
  std::size_t oracle_rows = 0;
  for (const auto& r : t.rows) {
    tags.insert(r.estimator);
    CHECK(std::isfinite(r.value));
    CHECK(std::isfinite(r.std_err));
    CHECK(r.design < 4);
    if (r.estimator == "oracle") {
      ++oracle_rows;
    } else {
      CHECK(r.run < 3);
    }
    if (r.estimator == "nmc-upper" || r.estimator == "nmc-lower") {
      CHECK(r.N == 150);
      CHECK(r.M == 8);
    }
    if (r.estimator == "vnmc-upper" || r.estimator == "cvnmc-lower") {
      CHECK(r.N == 30);
      CHECK(r.M == 5);
    }
    if (r.estimator == "posterior") CHECK(r.N == 40);
  }
  CHECK(oracle_rows == 4);
  CHECK(tags == std::set<std::string>{"nmc-upper", "nmc-lower", "posterior", "vnmc-upper",
                                      "cvnmc-lower", "oracle"});
  CHECK(fs::exists(dir.path / "results.csv"));
  CHECK(fs::exists(dir.path / "chart.svg"));
  CHECK(fs::exists(dir.path / "timing.txt"));
  CHECK(fs::exists(dir.path / "loss_trace.csv"));
  CHECK(fs::exists(dir.path / "checkpoint.bin"));
}

TEST_CASE("byte determinism of results.csv and chart.svg") {
  TempDir a("det_a"), b("det_b");
  ExperimentConfig ca = parse_config(tiny_config(a.str()));
  ExperimentConfig cb = parse_config(tiny_config(b.str()));
  run_model_experiment(ca);
  run_model_experiment(cb);
  CHECK(slurp(a.str() + "/results.csv") == slurp(b.str() + "/results.csv"));
  CHECK(slurp(a.str() + "/chart.svg") == slurp(b.str() + "/chart.svg"));

  // chart regeneration from the same CSV is byte-identical
  emit_chart(a.str() + "/results.csv", a.str() + "/chart2.svg");
  CHECK(slurp(a.str() + "/chart.svg") == slurp(a.str() + "/chart2.svg"));
}

TEST_CASE("re-evaluating from the saved checkpoint reproduces the rows bit-exactly") {
  TempDir a("ckpt_a"), b("ckpt_b");
  ExperimentConfig ca = parse_config(tiny_config(a.str()));
  run_model_experiment(ca);

  ExperimentConfig cb = parse_config(tiny_config(b.str()));
  cb.no_train = true;
  cb.checkpoint_path = a.str() + "/checkpoint.bin";
  run_model_experiment(cb);
  CHECK(slurp(a.str() + "/results.csv") == slurp(b.str() + "/results.csv"));
}

TEST_CASE("missing checkpoint under no_train is a CheckpointError") {
  TempDir dir("ckpt_missing");
  ExperimentConfig cfg = parse_config(tiny_config(dir.str()));
  cfg.no_train = true;
  cfg.checkpoint_path = dir.str() + "/does_not_exist.bin";
  CHECK_THROWS_AS(run_model_experiment(cfg), CheckpointError);
}

TEST_CASE("worker count never affects results") {
  TempDir a("w1"), b("w4");
  ExperimentConfig ca = parse_config(tiny_config(a.str()));
  ca.workers = 1;
  ExperimentConfig cb = parse_config(tiny_config(b.str()));
  cb.workers = 4;
  run_model_experiment(ca);
  run_model_experiment(cb);
  CHECK(slurp(a.str() + "/results.csv") == slurp(b.str() + "/results.csv"));
}

TEST_CASE("oracle-check emits the exact closed-form values") {
  TempDir dir("oracle");
  ExperimentConfig cfg = parse_config(tiny_config(dir.str(), "oracle-check"));
  ResultTable t = run_oracle_check(cfg);
  REQUIRE(t.rows.size() == cfg.n_eval_designs);
  GlmModel model = make_model(cfg);
  RngStream rng = RngStream(cfg.seed).fork(0xD51);
  auto designs = sample_designs(cfg.n_eval_designs, cfg.eval_units, 1, rng);
  for (std::size_t i = 0; i < designs.size(); ++i) {
    CHECK(t.rows[i].estimator == "oracle");
    CHECK(t.rows[i].value ==
          linear_gaussian_eig(designs[i], model.prior_cov(), model.options().sigma));
  }
  CHECK(fs::exists(dir.path / "oracle.csv"));
}

TEST_CASE("chart includes every series and the legend") {
  TempDir dir("chart");
  ExperimentConfig cfg = parse_config(tiny_config(dir.str()));
  run_model_experiment(cfg);
  const std::string svg = slurp(dir.str() + "/chart.svg");
  for (const char* name :
       {"nmc-upper", "nmc-lower", "posterior", "vnmc-upper", "cvnmc-lower", "oracle"})
    CHECK(svg.find(name) != std::string::npos);
  CHECK(svg.find("<polyline") != std::string::npos);
  CHECK(svg.find("<polygon") != std::string::npos);  // the +-1 sd band
}

TEST_CASE("amortization comparison artifacts and structure") {
  TempDir dir("amort");
  ExperimentConfig cfg = parse_config(tiny_config(dir.str(), "amortization"));
  cfg.n_eval_designs = 3;
  cfg.train.steps = 8;
  ResultTable t = run_amortization_experiment(cfg);
  // 3 designs x 3 runs for each of {posterior, baseline} + 3 oracle rows
  REQUIRE(t.rows.size() == 3 * 3 * 2 + 3);
  std::set<std::string> tags;
  for (const auto& r : t.rows) tags.insert(r.estimator);
  CHECK(tags == std::set<std::string>{"posterior", "baseline", "oracle"});
  const std::string timing = slurp(dir.str() + "/timing.txt");
  CHECK(timing.find("293 s") != std::string::npos);
  CHECK(timing.find("920 s") != std::string::npos);
  CHECK(timing.find("baseline_train_total") != std::string::npos);
}

TEST_CASE("cli exit codes") {
  if (!fs::exists("./boed")) return;  // only meaningful next to the built binary
  TempDir dir("cli");
  CHECK(run_cli("evaluate --config " + dir.str() + "/missing.json") == 1);
  {
    std::ofstream bad(dir.str() + "/bad.json");
    bad << R"({"experiment": "model", "oops": 1})";
  }
  CHECK(run_cli("evaluate --config " + dir.str() + "/bad.json") == 1);
  {
    std::ofstream ok(dir.str() + "/ok.json");
    ok << tiny_config(dir.str() + "/out");
  }
  CHECK(run_cli("evaluate --config " + dir.str() + "/ok.json --no-train --checkpoint " +
                dir.str() + "/none.bin") == 3);
  CHECK(run_cli("evaluate --config " + dir.str() + "/ok.json") == 0);
  CHECK(fs::exists(dir.str() + "/out/results.csv"));
}
