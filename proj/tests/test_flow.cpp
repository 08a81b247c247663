#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "boed/amortized.hpp"
#include "boed/estimators.hpp"
#include "boed/models.hpp"
#include "boed/posterior.hpp"

using namespace boed;

namespace {
constexpr double kLog2Pi = 1.8378770664093454835606594728112;

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

FlowConfig tiny_flow(FlowConfig::Kind kind, std::size_t transforms = 2) {
  FlowConfig f;
  f.kind = kind;
  f.n_transforms = transforms;
  f.coupling_net_blocks = 1;
  f.coupling_net_width = 8;
  f.base_net_blocks = 1;
  f.base_net_width = 8;
  f.spline_bins = 5;
  return f;
}

Design random_design(std::size_t units, std::size_t cols, std::uint64_t seed) {
  RngStream r(seed);
  Design d;
  d.n_units = units;
  d.n_cols = cols;
  d.m.resize(units * cols);
  for (auto& v : d.m) v = r.normal();
  return d;
}

void perturb(FlowParams& ps, double scale, std::uint64_t seed) {
  RngStream r(seed);
  for (const auto& name : ps.names)
    for (std::size_t i = 0; i < ps.at(name).size(); ++i) ps.at(name).at(i) += r.normal() * scale;
}

double quad_mass_2d(const GlmModel& m, const FlowParams& ps, const EncoderConfig& enc,
                    const FlowConfig& fc, const Design& d, const Outcome& y) {
  // one context, reused as a constant for every quadrature batch
  Graph g0;
  ParamFn p = [&](const std::string& n) { return ps.at(n); };
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
  return mass;
}
}  // namespace

TEST_CASE("identity flow: initial state is the standard normal") {
  GlmModel m = GlmModel::make(Family::normal, 1, 1.0);  // latent dim 2
  EncoderConfig enc = tiny_encoder();
  for (FlowConfig::Kind kind :
       {FlowConfig::Kind::none, FlowConfig::Kind::affine_coupling, FlowConfig::Kind::rq_spline}) {
    FlowConfig fc = tiny_flow(kind);
    FlowParams ps = init_flow_params(m, enc, fc, 1);
    Design d = random_design(3, 2, 5);
    Outcome y{3, 1, {0.1, -0.4, 1.2}};
    Graph g;
    ParamFn p = [&](const std::string& n) { return ps.at(n); };
    Tensor ctx = encode_batch(g, p, enc, m, d, {y}, false, nullptr);
    Tensor lq = flow_log_prob_batch(g, p, fc, ps.perms, ctx, {{0.0, 0.0}});
    // zero-initialized base and conditioners: q = N(0, I) exactly, except the
    // rq-spline, whose uniform-knot identity holds to rounding
    CHECK(lq[0] == doctest::Approx(-kLog2Pi).epsilon(1e-9));
  }
}

TEST_CASE("encoder: permutation invariance over all 120 unit orders") {
  GlmModel m = GlmModel::make(Family::normal_unknown, 1, 1.0);
  EncoderConfig enc = tiny_encoder();
  FlowConfig fc = tiny_flow(FlowConfig::Kind::affine_coupling);
  FlowParams ps = init_flow_params(m, enc, fc, 7);
  perturb(ps, 0.1, 99);
  ParamFn p = [&](const std::string& n) { return ps.at(n); };

  Design d = random_design(5, 2, 11);
  Outcome y{5, 1, {0.3, -1.1, 0.7, 2.0, -0.2}};
  Graph g0;
  Tensor ref = encode_batch(g0, p, enc, m, d, {y}, false, nullptr);

  std::vector<std::size_t> order = {0, 1, 2, 3, 4};
  do {
    Design dp = d;
    Outcome yp = y;
    for (std::size_t i = 0; i < 5; ++i) {
      for (std::size_t j = 0; j < 2; ++j) dp(i, j) = d(order[i], j);
      yp.y[i] = y.y[order[i]];
    }
    Graph g;
    Tensor c = encode_batch(g, p, enc, m, dp, {yp}, false, nullptr);
    for (std::size_t i = 0; i < c.size(); ++i) {
      double denom = std::max(1.0, std::abs(ref[i]));
      CHECK(std::abs(c[i] - ref[i]) / denom < 1e-9);
    }
  } while (std::next_permutation(order.begin(), order.end()));
}

TEST_CASE("encoder: context dimension is independent of the unit count") {
  GlmModel m = GlmModel::make(Family::normal, 1, 1.0);
  EncoderConfig enc = tiny_encoder(EncoderConfig::Kind::residual);
  FlowParams ps = init_flow_params(m, enc, tiny_flow(FlowConfig::Kind::none), 3);
  ParamFn p = [&](const std::string& n) { return ps.at(n); };
  Graph g;
  Tensor c5 = encode_batch(g, p, enc, m, random_design(5, 2, 1), {Outcome{5, 1, {1, 2, 3, 4, 5}}},
                           false, nullptr);
  Tensor c3 =
      encode_batch(g, p, enc, m, random_design(3, 2, 2), {Outcome{3, 1, {1, 2, 3}}}, false, nullptr);
  CHECK(c5.shape == std::vector<std::size_t>{1, enc.emitter_width});
  CHECK(c3.shape == std::vector<std::size_t>{1, enc.emitter_width});
}

TEST_CASE("flow normalizes after random perturbation (2-d, both transform kinds)") {
  GlmModel m = GlmModel::make(Family::normal, 1, 1.0);
  EncoderConfig enc = tiny_encoder();
  Design d = random_design(3, 2, 21);
  Outcome y{3, 1, {0.5, -0.5, 1.0}};
  for (FlowConfig::Kind kind : {FlowConfig::Kind::affine_coupling, FlowConfig::Kind::rq_spline}) {
    FlowConfig fc = tiny_flow(kind);
    FlowParams ps = init_flow_params(m, enc, fc, 13);
    perturb(ps, 0.05, 17);
    double mass = quad_mass_2d(m, ps, enc, fc, d, y);
    INFO("kind ", flow_kind_to_string(kind));
    CHECK(mass == doctest::Approx(1.0).epsilon(1e-3));
  }
}

TEST_CASE("flow normalizes in 1-d") {
  GlmModel m = GlmModel::make(Family::normal, 0, 1.0);  // latent dim 1
  EncoderConfig enc = tiny_encoder();
  FlowConfig fc = tiny_flow(FlowConfig::Kind::affine_coupling);
  FlowParams ps = init_flow_params(m, enc, fc, 2);
  perturb(ps, 0.05, 4);
  ParamFn p = [&](const std::string& n) { return ps.at(n); };
  Design d = random_design(3, 1, 6);
  Outcome y{3, 1, {0.2, 0.4, -1.0}};
  Graph g;
  Tensor ctx1 = encode_batch(g, p, enc, m, d, {y}, false, nullptr);
  double mass = 0;
  std::vector<std::vector<double>> pts;
  for (double t = -8.0; t <= 8.0; t += 0.01) pts.push_back({t});
  std::vector<double> rep(pts.size() * ctx1.size());
  for (std::size_t b = 0; b < pts.size(); ++b)
    std::copy(ctx1.values().begin(), ctx1.values().end(), rep.begin() + b * ctx1.size());
  Tensor lq = flow_log_prob_batch(g, p, fc, ps.perms, Tensor({pts.size(), ctx1.size()}, rep), pts);
  for (std::size_t b = 0; b < pts.size(); ++b) mass += std::exp(lq[b]) * 0.01;
  CHECK(mass == doctest::Approx(1.0).epsilon(1e-3));
}

TEST_CASE("sampling round trip, invertibility, and log-det consistency") {
  GlmModel m = GlmModel::make(Family::normal_unknown, 1, 1.0);  // latent dim 3
  EncoderConfig enc = tiny_encoder();
  Design d = random_design(4, 2, 31);
  Outcome y{4, 1, {0.9, -0.1, 0.3, 1.4}};
  for (FlowConfig::Kind kind : {FlowConfig::Kind::affine_coupling, FlowConfig::Kind::rq_spline}) {
    FlowConfig fc = tiny_flow(kind);
    FlowParams ps = init_flow_params(m, enc, fc, 41);
    perturb(ps, 0.05, 43);
    ParamFn p = [&](const std::string& n) { return ps.at(n); };

    std::vector<std::vector<double>> xs, base_xs;
    std::vector<double> lq, base_lq;
    RngStream r1(77), r2(77);
    flow_sample(ps, enc, fc, m, d, y, 32, r1, xs, lq);
    // the no-transform flow with the same seed yields the raw base draws
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
        CHECK(std::abs(u[b * 3 + i] - base_xs[b][i]) < 1e-6);  // T^{ -1}(T(u)) = u
      CHECK(std::abs((base_lq[b] - logdet[b]) - lq[b]) < 1e-8);  // forward vs inverse log-det
      CHECK(std::abs(lq_t[b] - lq[b]) < 1e-8);                   // density matches sampled log q
    }
  }
}

TEST_CASE("identity flow sampling has the base moments") {
  GlmModel m = GlmModel::make(Family::normal, 1, 1.0);
  EncoderConfig enc = tiny_encoder();
  FlowConfig fc = tiny_flow(FlowConfig::Kind::none);
  FlowParams ps = init_flow_params(m, enc, fc, 3);  // zero-init base: N(0, I)
  Design d = random_design(2, 2, 8);
  Outcome y{2, 1, {0.0, 1.0}};
  std::vector<std::vector<double>> xs;
  std::vector<double> lq;
  RngStream rng(123);
  flow_sample(ps, enc, fc, m, d, y, 100000, rng, xs, lq);
  for (std::size_t i = 0; i < 2; ++i) {
    double mean = 0;
    for (const auto& x : xs) mean += x[i];
    mean /= double(xs.size());
    CHECK(std::abs(mean) < 4.0 / std::sqrt(double(xs.size())));
  }
}

TEST_CASE("rq-spline tails pass through untouched") {
  GlmModel m = GlmModel::make(Family::normal, 1, 1.0);
  EncoderConfig enc = tiny_encoder();
  FlowConfig spline = tiny_flow(FlowConfig::Kind::rq_spline);
  FlowConfig none = spline;
  none.kind = FlowConfig::Kind::none;
  FlowParams ps = init_flow_params(m, enc, spline, 51);
  perturb(ps, 0.05, 53);
  ParamFn p = [&](const std::string& n) { return ps.at(n); };
  Design d = random_design(3, 2, 55);
  Outcome y{3, 1, {1.0, 0.0, -1.0}};
  Graph g;
  Tensor ctx = encode_batch(g, p, enc, m, d, {y}, false, nullptr);
  // both coordinates far outside (0, 1): the spline contributes nothing
  std::vector<std::vector<double>> pts = {{-4.0, 6.0}};
  Tensor with = flow_log_prob_batch(g, p, spline, ps.perms, ctx, pts);
  Tensor without = flow_log_prob_batch(g, p, none, ps.perms, ctx, pts);
  CHECK(with[0] == doctest::Approx(without[0]).epsilon(1e-12));
}

TEST_CASE("gradients flow into every parameter array") {
  GlmModel m = GlmModel::make(Family::normal, 1, 1.0);
  EncoderConfig enc = tiny_encoder();
  enc.embed_width = 6;
  enc.token_width = 6;
  enc.attn_heads = 2;
  enc.head_dim = 3;
  enc.post_attn_projection = 4;
  enc.emitter_width = 6;
  Design d = random_design(2, 2, 61);
  Outcome y1{2, 1, {0.4, -0.7}}, y2{2, 1, {1.1, 0.2}};
  for (FlowConfig::Kind kind : {FlowConfig::Kind::affine_coupling, FlowConfig::Kind::rq_spline}) {
    FlowConfig fc = tiny_flow(kind, 1);
    fc.coupling_net_width = 6;
    fc.base_net_width = 6;
    FlowParams ps = init_flow_params(m, enc, fc, 71);
    perturb(ps, 0.05, 73);

    std::vector<Tensor> point;
    for (const auto& n : ps.names) point.push_back(ps.at(n));
    auto build = [&](Graph& g, std::vector<Tensor>& leaves) {
      std::map<std::string, Tensor> lm;
      for (std::size_t i = 0; i < ps.names.size(); ++i) lm.emplace(ps.names[i], leaves[i]);
      ParamFn pf = [&lm](const std::string& n) { return lm.at(n); };
      Tensor ctx = encode_batch(g, pf, enc, m, d, {y1, y2}, false, nullptr);
      return flow_log_prob_batch(g, pf, fc, ps.perms, ctx, {{0.4, 0.6}, {-0.2, 0.3}});
    };
    INFO("kind ", flow_kind_to_string(kind));
    CHECK(gradcheck_fn(build, point, 1e-5) < 1e-4);
  }
}

TEST_CASE("amortized posterior: log_prob agrees with sampled log q") {
  GlmModel m = GlmModel::make(Family::normal_unknown, 1, 1.0);
  EncoderConfig enc = tiny_encoder();
  FlowConfig fc = tiny_flow(FlowConfig::Kind::affine_coupling);
  FlowParams ps = init_flow_params(m, enc, fc, 81);
  perturb(ps, 0.05, 83);
  AmortizedPosterior q(m, enc, fc, std::move(ps));
  Design d = random_design(3, 2, 85);
  Outcome y{3, 1, {0.1, 0.5, -0.3}};
  RngStream rng(9);
  std::vector<LatentSample> s;
  std::vector<double> lq;
  q.sample(d, y, 16, rng, s, lq);
  for (std::size_t i = 0; i < s.size(); ++i) {
    CHECK(s[i].has_aux);
    CHECK(s[i].aux > 0.0);
    CHECK(q.log_prob(s[i], y, d) == doctest::Approx(lq[i]).epsilon(1e-8));
  }
}

TEST_CASE("linear baseline: hand-computed densities") {
  // A = 0, Sigma = I, dim 2: density of N(0, I) regardless of y
  {
    LinearBaselineApprox q(std::vector<double>(2 * 3, 0.0), std::vector<double>(3, 0.0), 2, 3);
    Outcome y{3, 1, {5.0, -2.0, 0.5}};
    Design d = random_design(3, 2, 91);
    CHECK(q.log_prob(LatentSample{{0.0, 0.0}, 0.0, false}, y, d) ==
          doctest::Approx(-kLog2Pi).epsilon(1e-12));
  }
  // A = [1], y = [2], Sigma = [4], theta = 2 -> -0.5 log(8 pi)
  {
    // invert the diagonal map to get precision factor 1/2 (variance 4)
    double lo = -30, hi = 30;
    for (int it = 0; it < 200; ++it) {
      double mid = 0.5 * (lo + hi);
      (LinearBaselineApprox::diag_map(mid) < 0.5 ? lo : hi) = mid;
    }
    LinearBaselineApprox q({1.0}, {0.5 * (lo + hi)}, 1, 1);
    Outcome y{1, 1, {2.0}};
    Design d = random_design(1, 1, 92);
    CHECK(q.log_prob(LatentSample{{2.0}, 0.0, false}, y, d) ==
          doctest::Approx(-0.5 * std::log(8.0 * M_PI)).epsilon(1e-9));
  }
}

TEST_CASE("linear baseline matched to the prior gives a zero bound on D = 0") {
  GlmModel m = GlmModel::make(Family::normal, 1, 1.0);
  Design d;
  d.n_units = 3;
  d.n_cols = 2;
  d.m.assign(6, 0.0);
  LinearBaselineApprox q(std::vector<double>(2 * 3, 0.0), std::vector<double>(3, 0.0), 2, 3);
  RngStream rng(14);
  EigEstimate e = posterior_bound(m, d, q, 500, rng);
  CHECK(std::abs(e.value) < 1e-12);
}
