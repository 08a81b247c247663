// End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
// the process exits nonzero if any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "boed/amortized.hpp"
#include "boed/estimators.hpp"
#include "boed/harness.hpp"
#include "boed/models.hpp"
#include "boed/oracle.hpp"
#include "boed/posterior.hpp"
#include "boed/tensor.hpp"
#include "boed/trainer.hpp"

using namespace boed;
namespace fs = std::filesystem;
using clock_type = std::chrono::steady_clock;

namespace {

int failures = 0;

double now_seconds(clock_type::time_point t0) {
  return std::chrono::duration<double>(clock_type::now() - t0).count();
}

void report(int criterion, bool pass, const std::string& detail) {
  std::printf("[%s] criterion %d: %s\n", pass ? "PASS" : "FAIL", criterion, detail.c_str());
  std::fflush(stdout);
  if (!pass) ++failures;
}

Tensor randt(std::vector<std::size_t> shape, std::uint64_t seed, double scale = 1.0,
             double offset = 0.0) {
  std::size_t n = 1;
  for (auto s : shape) n *= s;
  RngStream r(seed);
  std::vector<double> v(n);
  for (auto& x : v) x = r.normal() * scale + offset;
  return Tensor(std::move(shape), std::move(v));
}

EncoderConfig tiny_encoder(EncoderConfig::Kind kind = EncoderConfig::Kind::attention) {
  EncoderConfig e;
  e.kind = kind;
  e.embed_blocks = 1;
  e.embed_width = 8;
  e.token_width = 8;
  e.attn_layers = 1;
  e.attn_heads = 2;
  e.head_dim = 4;
  e.post_attn_projection = 6;
  e.emitter_blocks = 1;
  e.emitter_width = 8;
  e.residual_blocks = 1;
  e.residual_width = 8;
  return e;
}

FlowConfig tiny_flow(FlowConfig::Kind kind = FlowConfig::Kind::affine_coupling) {
  FlowConfig f;
  f.kind = kind;
  f.n_transforms = 2;
  f.coupling_net_blocks = 1;
  f.coupling_net_width = 8;
  f.base_net_blocks = 1;
  f.base_net_width = 8;
  f.spline_bins = 5;
  return f;
}

void perturb(FlowParams& ps, double scale, std::uint64_t seed) {
  RngStream r(seed);
  for (const auto& name : ps.names)
    for (std::size_t i = 0; i < ps.at(name).size(); ++i) ps.at(name).at(i) += r.normal() * scale;
}

TrainConfig desk_train(std::uint64_t seed) {
  TrainConfig tc;
  tc.steps = 500;
  tc.designs_per_step = 10;
  tc.mc_N = 25;
  tc.design_units = 5;
  tc.seed = seed;
  return tc;
}

struct TrainedModel {
  std::unique_ptr<GlmModel> model;
  std::unique_ptr<AmortizedPosterior> q;
  std::vector<Design> designs;
  std::vector<double> oracle;
  double train_seconds = 0.0;
};

TrainedModel train_linear_setup(std::size_t n_predictors, double prior_var, std::uint64_t seed) {
  TrainedModel out;
  out.model = std::make_unique<GlmModel>(GlmModel::make(Family::normal, n_predictors, prior_var));
  EncoderConfig enc;
  FlowConfig fl;
  TrainConfig tc = desk_train(seed);
  const auto t0 = clock_type::now();
  FlowParams params = train(*out.model, enc, fl, tc, nullptr);
  out.train_seconds = now_seconds(t0);
  out.q = std::make_unique<AmortizedPosterior>(*out.model, enc, fl, std::move(params));
  RngStream drng = RngStream(seed).fork(0xD51);
  out.designs = sample_designs(50, 5, n_predictors, drng);
  for (const Design& d : out.designs)
    out.oracle.push_back(linear_gaussian_eig(d, out.model->prior_cov(), 1.0));
  return out;
}

double mean_of(const std::vector<double>& v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / double(v.size());
}

}  // namespace

// 1. Oracle sandwich on the linear model after desk-scale amortized training.
static void criterion1(TrainedModel& s) {
  const auto t0 = clock_type::now();
  std::size_t covered = 0;
  double abs_gap = 0.0;
  for (std::size_t i = 0; i < s.designs.size(); ++i) {
    RngStream ru = RngStream(1100).fork(i), rl = RngStream(1101).fork(i);
    EigEstimate up = vnmc_upper(*s.model, s.designs[i], *s.q, 200, 15, ru);
    EigEstimate lo = cvnmc_lower(*s.model, s.designs[i], *s.q, 200, 15, rl);
    if (lo.value - 3.0 * lo.std_err <= s.oracle[i] && s.oracle[i] <= up.value + 3.0 * up.std_err)
      ++covered;
    abs_gap += std::abs(up.value - s.oracle[i]) / double(s.designs.size());
  }
  const double total = s.train_seconds + now_seconds(t0);
  char buf[256];
  std::snprintf(buf, sizeof(buf),
                "oracle sandwich: covered %zu/50 (need >= 45), mean |vnmc-upper - oracle| = %.4f "
                "(need <= 0.1), runtime %.0f s (need <= 600)",
                covered, abs_gap, total);
  report(1, covered >= 45 && abs_gap <= 0.1 && total <= 600.0, buf);
}

// 2. Bound ordering across 20 evaluation runs on linear and logistic models.
static void criterion2(TrainedModel& s) {
  bool ok = true;
  std::string detail = "bound ordering over 20 runs:";

  auto check_design = [&](const GlmModel& m, const Design& d, const PosteriorApprox& q,
                          const double* oracle, const std::string& label) {
    std::vector<double> nu, nl, vu, cl, po;
    for (std::size_t r = 0; r < 20; ++r) {
      RngStream rng = RngStream(2200).fork(r * 131 + std::hash<std::string>{}(label) % 1000);
      // upper/lower pairs share a stream so the comparison is paired; the
      // two variants consume draws identically (criterion 4 relies on this)
      RngStream r0 = rng.fork(0), r1 = rng.fork(0), r2 = rng.fork(2), r3 = rng.fork(2),
                r4 = rng.fork(4);
      nu.push_back(nmc(m, d, 400, 20, true, r0).value);
      nl.push_back(nmc(m, d, 400, 20, false, r1).value);
      vu.push_back(vnmc_upper(m, d, q, 150, 12, r2).value);
      cl.push_back(cvnmc_lower(m, d, q, 150, 12, r3).value);
      po.push_back(posterior_bound(m, d, q, 400, r4).value);
    }
    bool here = mean_of(nl) <= mean_of(nu) && mean_of(cl) <= mean_of(vu);
    if (oracle) {
      double pm = mean_of(po), sd = 0.0;
      for (double x : po) sd += (x - pm) * (x - pm);
      sd = std::sqrt(sd / 19.0) / std::sqrt(20.0);
      here = here && pm <= *oracle + 3.0 * sd;
    }
    if (!here) detail += " " + label + " VIOLATED;";
    ok = ok && here;
  };

  for (std::size_t i : {std::size_t{0}, std::size_t{17}, std::size_t{42}})
    check_design(*s.model, s.designs[i], *s.q, &s.oracle[i], "linear-" + std::to_string(i));

  GlmModel logit = GlmModel::make(Family::logistic, 1, 1.0);
  PriorApprox prior_q(logit);
  RngStream drng = RngStream(22).fork(5);
  auto ds = sample_designs(2, 5, 1, drng);
  for (std::size_t i = 0; i < ds.size(); ++i)
    check_design(logit, ds[i], prior_q, nullptr, "logistic-" + std::to_string(i));

  report(2, ok, ok ? "bound ordering holds on all 5 tested (model, design) pairs" : detail);
}

// 3. VNMC tighter than NMC with strictly fewer samples.
static void criterion3() {
  TrainedModel s = train_linear_setup(2, 5.0, 303);
  double vn_gap = 0.0, nm_gap = 0.0;
  for (std::size_t i = 0; i < s.designs.size(); ++i) {
    RngStream rng = RngStream(3300).fork(i);
    RngStream r0 = rng.fork(0), r1 = rng.fork(1), r2 = rng.fork(2), r3 = rng.fork(3);
    double vu = vnmc_upper(*s.model, s.designs[i], *s.q, 200, 15, r0).value;
    double cl = cvnmc_lower(*s.model, s.designs[i], *s.q, 200, 15, r1).value;
    double nu = nmc(*s.model, s.designs[i], 5000, 70, true, r2).value;
    double nl = nmc(*s.model, s.designs[i], 5000, 70, false, r3).value;
    vn_gap += (vu - cl) / 50.0;
    nm_gap += (nu - nl) / 50.0;
  }
  const std::size_t vb = sample_budget_report(200, 15, EstimatorTag::vnmc_upper);
  const std::size_t nb = sample_budget_report(5000, 70, EstimatorTag::nmc_upper);
  char buf[200];
  std::snprintf(buf, sizeof(buf),
                "VNMC gap %.4f vs NMC gap %.4f (Sigma_p = 5I, N_p = 2) with budgets %zu < %zu",
                vn_gap, nm_gap, vb, nb);
  report(3, vn_gap < nm_gap && vb < nb, buf);
}

// 4. With q = prior and shared seeds, VNMC reduces to NMC bit-exactly.
static void criterion4() {
  const Family fams[6] = {Family::normal,   Family::normal_unknown, Family::logistic,
                          Family::binomial, Family::categorical,    Family::multinomial};
  bool ok = true;
  for (std::size_t pair = 0; pair < 10; ++pair) {
    GlmModel m = GlmModel::make(fams[pair % 6], 1 + pair % 2, 1.0 + double(pair % 3));
    RngStream drng = RngStream(4400 + pair).fork(1);
    Design d = sample_designs(1, 4, m.n_predictors(), drng)[0];
    PriorApprox q(m);
    RngStream r1(4500 + pair), r2(4500 + pair), r3(4600 + pair), r4(4600 + pair);
    EigEstimate vu = vnmc_upper(m, d, q, 120, 8, r1);
    EigEstimate nu = nmc(m, d, 120, 8, true, r2);
    EigEstimate cl = cvnmc_lower(m, d, q, 120, 8, r3);
    EigEstimate nl = nmc(m, d, 120, 8, false, r4);
    ok = ok && vu.value == nu.value && vu.std_err == nu.std_err && cl.value == nl.value &&
         cl.std_err == nl.std_err;
  }
  report(4, ok,
         "q = prior reduction: vnmc/cvnmc bit-identical to nmc on 10 (model, design) pairs "
         "across all six families");
}

// 5. Sample-budget bookkeeping reproduces the published 167x ratio.
static void criterion5() {
  const std::size_t nmc_b = sample_budget_report(30000, 173, EstimatorTag::nmc_upper);
  const std::size_t vnmc_b = sample_budget_report(1000, 31, EstimatorTag::vnmc_upper);
  const std::size_t post_b = sample_budget_report(5000, 0, EstimatorTag::posterior);
  const double ratio = double(nmc_b) / double(vnmc_b);
  char buf[160];
  std::snprintf(buf, sizeof(buf), "budgets %zu / %zu = %.1fx (need 5190000 / 31000 = 167.4)",
                nmc_b, vnmc_b, ratio);
  report(5, nmc_b == 5190000 && vnmc_b == 31000 && post_b == 5000 &&
                std::abs(ratio - 167.4) < 0.05,
         buf);
}

// 6. NMC RMSE decreases monotonically along (N, M) with M ~ sqrt(N).
static void criterion6() {
  GlmModel m = GlmModel::make(Family::normal, 1, 1.0);
  Design d;
  d.n_units = 1;
  d.n_cols = 2;
  d.m = {1.0, 0.0};
  const double truth = 0.5 * std::log(2.0);
  const std::size_t Ns[3] = {100, 400, 1600}, Ms[3] = {10, 20, 40};
  double rmse[3];
  for (int k = 0; k < 3; ++k) {
    double se = 0.0;
    for (std::size_t rep = 0; rep < 50; ++rep) {
      RngStream rng = RngStream(6600).fork(k * 100 + rep);
      const double e = nmc(m, d, Ns[k], Ms[k], true, rng).value - truth;
      se += e * e / 50.0;
    }
    rmse[k] = std::sqrt(se);
  }
  char buf[160];
  std::snprintf(buf, sizeof(buf), "NMC RMSE vs 0.5*log(2): %.4f > %.4f > %.4f", rmse[0], rmse[1],
                rmse[2]);
  report(6, rmse[0] > rmse[1] && rmse[1] > rmse[2], buf);
}

// 7. Amortized argmax matches the oracle; baseline comparison structure.
static void criterion7(TrainedModel& s) {
  std::size_t oracle_argmax =
      std::max_element(s.oracle.begin(), s.oracle.end()) - s.oracle.begin();
  // common random numbers across designs: the same stream drives every
  // design's joint draws, so cross-design differences are dominated by the
  // bound itself rather than Monte Carlo noise
  std::vector<double> post(s.designs.size());
  for (std::size_t i = 0; i < s.designs.size(); ++i) {
    RngStream rng(7700);
    post[i] = posterior_bound(*s.model, s.designs[i], *s.q, 5000, rng).value;
  }
  std::size_t amortized_argmax = std::max_element(post.begin(), post.end()) - post.begin();

  // per-design baseline fits on the first 20 designs
  double baseline_total = 0.0;
  bool baseline_completed = true;
  for (std::size_t i = 0; i < 20; ++i) {
    TrainConfig tc = desk_train(7000 + i);
    tc.learning_rate = 1e-3;
    const auto t0 = clock_type::now();
    LinearBaselineApprox b = train_baseline(*s.model, s.designs[i], tc, nullptr);
    baseline_total += now_seconds(t0);
    RngStream rng = RngStream(7800).fork(i);
    baseline_completed =
        baseline_completed && std::isfinite(posterior_bound(*s.model, s.designs[i], b, 200, rng).value);
  }
  char buf[320];
  std::snprintf(buf, sizeof(buf),
                "amortized argmax %zu vs oracle argmax %zu; baseline fits completed: %s; "
                "baseline 20-design training total %.2f s vs amortized one-time %.2f s "
                "(claim: baseline exceeds amortized)",
                amortized_argmax, oracle_argmax, baseline_completed ? "yes" : "no",
                baseline_total, s.train_seconds);
  report(7, amortized_argmax == oracle_argmax && baseline_completed &&
                baseline_total > s.train_seconds,
         buf);
}

// 8. Architecture ranking on the linear-unknown model.
static void criterion8() {
  ExperimentConfig cfg;
  cfg.kind = ExperimentConfig::Kind::archstudy;
  cfg.family = Family::normal_unknown;
  cfg.n_predictors = 2;
  cfg.prior_var = 5.0;
  cfg.seed = 808;
  cfg.out_dir = "acceptance_archstudy";
  cfg.train = desk_train(808);
  auto summary = run_archstudy(cfg);
  fs::remove_all(cfg.out_dir);

  double attn_worst = -1e300, res_best = 1e300;
  std::vector<std::pair<std::string, double>> spline, none;
  for (const auto& [label, loss] : summary) {
    const bool attention = label.rfind("attention/", 0) == 0;
    if (attention)
      attn_worst = std::max(attn_worst, loss);
    else
      res_best = std::min(res_best, loss);
    if (label.find("/rq-spline") != std::string::npos) spline.push_back({label, loss});
    if (label.find("/none") != std::string::npos) none.push_back({label, loss});
  }
  double spline_dev = 0.0;
  for (const auto& [label, loss] : spline) {
    const std::string enc = label.substr(0, label.find('/'));
    for (const auto& [nl, nloss] : none)
      if (nl.rfind(enc, 0) == 0) spline_dev = std::max(spline_dev, std::abs(loss - nloss));
  }
  char buf[240];
  std::snprintf(buf, sizeof(buf),
                "archstudy: worst attention final-50 loss %.4f vs best residual %.4f; max "
                "|rq-spline - none| = %.4f (need < 0.1)",
                attn_worst, res_best, spline_dev);
  report(8, attn_worst < res_best && spline_dev <= 0.1, buf);
}

// 9. Property suite, bounded at two minutes.
static void criterion9() {
  const auto t0 = clock_type::now();
  bool ok = true;
  std::string detail;
  auto fail = [&](const std::string& what) {
    ok = false;
    detail += " " + what + ";";
  };

  // gradchecks for every primitive
  for (const auto& tag : gradcheck_primitives()) {
    std::vector<Tensor> point;
    if (tag == "matmul")
      point = {randt({3, 4}, 1), randt({4, 2}, 2)};
    else if (tag == "bmm")
      point = {randt({2, 3, 4}, 3), randt({2, 4, 2}, 4)};
    else if (tag == "attention")
      point = {randt({2, 3, 4}, 5, 0.5), randt({2, 3, 4}, 6, 0.5), randt({2, 3, 4}, 7, 0.5)};
    else if (tag == "add" || tag == "subtract" || tag == "multiply" || tag == "concatenate")
      point = {randt({3, 4}, 8), randt({3, 4}, 9)};
    else if (tag == "divide")
      point = {randt({3, 4}, 10), randt({3, 4}, 11, 0.2, 2.0)};
    else if (tag == "log" || tag == "sqrt")
      point = {randt({3, 4}, 12, 0.2, 2.0)};
    else if (tag == "relu")
      point = {randt({3, 4}, 13, 1.0, 3.0)};
    else if (tag == "transpose" || tag == "sum_axis0" || tag == "softmax")
      point = {randt({3, 4}, 14)};
    else
      point = {randt({8}, 15)};
    if (gradcheck(tag, point, 1e-5) >= 1e-4) fail("gradcheck " + tag);
  }

  // flow invertibility and forward/inverse log-det consistency
  {
    GlmModel m = GlmModel::make(Family::normal_unknown, 1, 1.0);
    EncoderConfig enc = tiny_encoder();
    Design d;
    d.n_units = 4;
    d.n_cols = 2;
    d.m = {1.0, 0.2, -0.4, 0.8, 0.1, -1.0, 0.6, 0.5};
    Outcome y{4, 1, {0.9, -0.1, 0.3, 1.4}};
    for (FlowConfig::Kind kind :
         {FlowConfig::Kind::affine_coupling, FlowConfig::Kind::rq_spline}) {
      FlowConfig fc = tiny_flow(kind);
      FlowParams ps = init_flow_params(m, enc, fc, 41);
      perturb(ps, 0.05, 43);
      ParamFn p = [&](const std::string& n) { return ps.at(n); };
      std::vector<std::vector<double>> xs, base_xs;
      std::vector<double> lq, base_lq;
      RngStream r1(77), r2(77);
      flow_sample(ps, enc, fc, m, d, y, 32, r1, xs, lq);
      FlowConfig none = fc;
      none.kind = FlowConfig::Kind::none;
      flow_sample(ps, enc, none, m, d, y, 32, r2, base_xs, base_lq);
      Graph g;
      Tensor ctx1 = encode_batch(g, p, enc, m, d, {y}, false, nullptr);
      std::vector<double> rep(32 * ctx1.size());
      for (std::size_t b = 0; b < 32; ++b)
        std::copy(ctx1.values().begin(), ctx1.values().end(), rep.begin() + b * ctx1.size());
      Tensor ctx({std::size_t{32}, ctx1.size()}, std::move(rep));
      Tensor logdet;
      Tensor u = flow_invert_batch(g, p, fc, ps.perms, ctx, xs, &logdet);
      Tensor lq_t = flow_log_prob_batch(g, p, fc, ps.perms, ctx, xs);
      for (std::size_t b = 0; b < 32; ++b) {
        for (std::size_t i = 0; i < 3; ++i)
          if (std::abs(u[b * 3 + i] - base_xs[b][i]) >= 1e-6) fail("flow invertibility");
        if (std::abs((base_lq[b] - logdet[b]) - lq[b]) >= 1e-8) fail("log-det consistency");
        if (std::abs(lq_t[b] - lq[b]) >= 1e-8) fail("density consistency");
      }
    }
  }

  // flow normalization by quadrature in 1-d and 2-d
  {
    EncoderConfig enc = tiny_encoder();
    FlowConfig fc = tiny_flow();

    // 1-d: intercept-only model (latent dim 1)
    {
      GlmModel m = GlmModel::make(Family::normal, 0, 1.0);
      FlowParams ps = init_flow_params(m, enc, fc, 5);
      perturb(ps, 0.05, 9);
      ParamFn p = [&](const std::string& n) { return ps.at(n); };
      Design d;
      d.n_units = 3;
      d.n_cols = 1;
      d.m = {1.0, 1.0, 1.0};
      Outcome y{3, 1, {0.2, 0.4, -1.0}};
      Graph g;
      Tensor ctx1 = encode_batch(g, p, enc, m, d, {y}, false, nullptr);
      std::vector<std::vector<double>> pts;
      for (double t = -8.0; t <= 8.0; t += 0.01) pts.push_back({t});
      std::vector<double> rep(pts.size() * ctx1.size());
      for (std::size_t b = 0; b < pts.size(); ++b)
        std::copy(ctx1.values().begin(), ctx1.values().end(), rep.begin() + b * ctx1.size());
      Tensor lq =
          flow_log_prob_batch(g, p, fc, ps.perms, Tensor({pts.size(), ctx1.size()}, rep), pts);
      double mass = 0.0;
      for (std::size_t b = 0; b < pts.size(); ++b) mass += std::exp(lq[b]) * 0.01;
      if (std::abs(mass - 1.0) >= 1e-3) fail("flow normalization 1-d");
    }

    // 2-d: one-predictor model (latent dim 2)
    {
      GlmModel m = GlmModel::make(Family::normal, 1, 1.0);
      FlowParams ps = init_flow_params(m, enc, fc, 6);
      perturb(ps, 0.05, 10);
      ParamFn p = [&](const std::string& n) { return ps.at(n); };
      Design d;
      d.n_units = 2;
      d.n_cols = 2;
      d.m = {1.0, 0.3, -0.2, 0.8};
      Outcome y{2, 1, {0.4, -0.9}};
      Graph g0;
      Tensor ctx1 = encode_batch(g0, p, enc, m, d, {y}, false, nullptr);
      const double lo = -8.0, hi = 8.0, step = 0.05;
      std::vector<std::vector<double>> pts;
      double mass = 0.0;
      auto flush = [&] {
        if (pts.empty()) return;
        Graph g;
        std::vector<double> rep(pts.size() * ctx1.size());
        for (std::size_t b = 0; b < pts.size(); ++b)
          std::copy(ctx1.values().begin(), ctx1.values().end(), rep.begin() + b * ctx1.size());
        Tensor ctx({pts.size(), ctx1.size()}, std::move(rep));
        Tensor lq = flow_log_prob_batch(g, p, fc, ps.perms, ctx, pts);
        for (std::size_t b = 0; b < pts.size(); ++b) mass += std::exp(lq[b]) * step * step;
        pts.clear();
      };
      for (double a = lo; a <= hi; a += step)
        for (double b = lo; b <= hi; b += step) {
          pts.push_back({a, b});
          if (pts.size() == 8192) flush();
        }
      flush();
      if (std::abs(mass - 1.0) >= 1e-3) fail("flow normalization 2-d");
    }
  }

  // encoder permutation invariance over all 120 orderings at S = 5
  {
    GlmModel m = GlmModel::make(Family::normal, 1, 1.0);
    EncoderConfig enc = tiny_encoder();
    FlowConfig fc = tiny_flow();
    FlowParams ps = init_flow_params(m, enc, fc, 15);
    perturb(ps, 0.05, 16);
    ParamFn p = [&](const std::string& n) { return ps.at(n); };
    Design d;
    d.n_units = 5;
    d.n_cols = 2;
    d.m = {1.0, 0.2, -0.3, 0.7, 0.4, -1.1, 0.9, 0.05, -0.6, 1.3};
    Outcome y{5, 1, {0.3, -0.8, 1.1, 0.0, 0.5}};
    Graph g0;
    Tensor ref = encode_batch(g0, p, enc, m, d, {y}, false, nullptr);
    std::vector<std::size_t> perm{0, 1, 2, 3, 4};
    do {
      Design dp = d;
      Outcome yp = y;
      for (std::size_t i = 0; i < 5; ++i) {
        dp.m[i * 2] = d.m[perm[i] * 2];
        dp.m[i * 2 + 1] = d.m[perm[i] * 2 + 1];
        yp.y[i] = y.y[perm[i]];
      }
      Graph g;
      Tensor c = encode_batch(g, p, enc, m, dp, {yp}, false, nullptr);
      for (std::size_t k = 0; k < c.size(); ++k)
        if (std::abs(c[k] - ref[k]) / std::max(1.0, std::abs(ref[k])) >= 1e-9) {
          fail("encoder permutation invariance");
          break;
        }
    } while (std::next_permutation(perm.begin(), perm.end()));
  }

  // likelihood normalization for every family
  {
    RngStream rng(91);
    for (Family f : {Family::normal, Family::normal_unknown, Family::logistic, Family::binomial,
                     Family::categorical, Family::multinomial}) {
      GlmModel m = GlmModel::make(f, 1, 1.0);
      Design d;
      d.n_units = 1;
      d.n_cols = 2;
      d.m = {0.7, -0.4};
      LatentSample lat = m.sample_prior(1, rng)[0];
      double total = 0.0;
      if (f == Family::normal || f == Family::normal_unknown) {
        const double sg = f == Family::normal ? m.options().sigma : lat.aux;
        const double eta = m.linear_predictor(d, lat)[0];
        const double step = sg / 500.0;
        for (double yv = eta - 10.0 * sg; yv <= eta + 10.0 * sg; yv += step) {
          Outcome o{1, 1, {yv + 0.5 * step}};
          total += std::exp(m.log_likelihood(d, lat, o)) * step;
        }
      } else if (f == Family::logistic) {
        for (double yv : {0.0, 1.0}) {
          Outcome o{1, 1, {yv}};
          total += std::exp(m.log_likelihood(d, lat, o));
        }
      } else if (f == Family::binomial) {
        for (std::size_t k = 0; k <= m.options().n_trials; ++k) {
          Outcome o{1, 1, {double(k)}};
          total += std::exp(m.log_likelihood(d, lat, o));
        }
      } else if (f == Family::categorical) {
        for (std::size_t k = 0; k < m.options().n_classes; ++k) {
          Outcome o{1, 1, {double(k)}};
          total += std::exp(m.log_likelihood(d, lat, o));
        }
      } else {
        const std::size_t n = m.options().n_trials;
        for (std::size_t a = 0; a <= n; ++a)
          for (std::size_t b = 0; a + b <= n; ++b) {
            Outcome o{1, 3, {double(a), double(b), double(n - a - b)}};
            total += std::exp(m.log_likelihood(d, lat, o));
          }
      }
      if (std::abs(total - 1.0) >= 1e-6) fail("likelihood normalization " + family_to_string(f));
    }
  }

  // NIG update vs brute-force grid quadrature
  {
    Design d;
    d.n_units = 3;
    d.n_cols = 1;
    d.m = {1.0, 0.5, -0.8};
    std::vector<double> y = {1.2, 0.3, -0.9};
    NigPosterior post = nig_posterior(d, y, {0.0}, {1.0}, 3.5, 3.5);
    double num = 0.0, den = 0.0;
    for (double th = -10.0; th <= 10.0; th += 0.005)
      for (double sg = 0.005; sg <= 10.0; sg += 0.005) {
        const double s2 = sg * sg;
        double lp = nig_log_density({th}, s2, {0.0}, {1.0}, 3.5, 3.5) + std::log(2.0 * sg);
        double ll = 0.0;
        for (std::size_t i = 0; i < 3; ++i) {
          const double r = y[i] - d(i, 0) * th;
          ll += -0.5 * std::log(2.0 * M_PI * s2) - 0.5 * r * r / s2;
        }
        const double w = std::exp(lp + ll);
        num += w * th;
        den += w;
      }
    if (std::abs(num / den - post.mean[0]) >= 1e-2) fail("NIG grid agreement");
  }

  // bit-exact determinism of train and evaluate
  {
    GlmModel m = GlmModel::make(Family::normal, 1, 1.0);
    EncoderConfig enc = tiny_encoder();
    FlowConfig fc = tiny_flow();
    TrainConfig tc;
    tc.steps = 4;
    tc.designs_per_step = 2;
    tc.mc_N = 5;
    tc.design_units = 3;
    tc.seed = 99;
    FlowParams a = train(m, enc, fc, tc, nullptr);
    FlowParams b = train(m, enc, fc, tc, nullptr);
    for (const auto& name : a.names)
      for (std::size_t i = 0; i < a.at(name).size(); ++i)
        if (a.at(name)[i] != b.at(name)[i]) {
          fail("train determinism");
          break;
        }
    AmortizedPosterior qa(m, enc, fc, std::move(a));
    RngStream drng = RngStream(9).fork(2);
    Design d = sample_designs(1, 4, 1, drng)[0];
    RngStream e1(31), e2(31);
    if (vnmc_upper(m, d, qa, 40, 6, e1).value != vnmc_upper(m, d, qa, 40, 6, e2).value)
      fail("evaluate determinism");
  }

  const double secs = now_seconds(t0);
  char buf[256];
  std::snprintf(buf, sizeof(buf), "property suite %s in %.1f s (need < 120)%s",
                ok ? "clean" : "has violations:", secs, detail.c_str());
  report(9, ok && secs < 120.0, buf);
}

int main() {
  const auto t0 = clock_type::now();
  TrainedModel s1 = train_linear_setup(1, 1.0, 101);
  criterion1(s1);
  criterion2(s1);
  criterion3();
  criterion4();
  criterion5();
  criterion6();
  criterion7(s1);
  criterion8();
  criterion9();
  std::printf("%d/9 criteria passed (total %.0f s)\n", 9 - failures, now_seconds(t0));
  return failures == 0 ? 0 : 1;
}
