#include "boed/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace boed {

namespace {

const double kLog2Pi = std::log(8.0 * std::atan(1.0));
// shift chosen so a zero raw entry maps to a unit precision diagonal,
// matching LinearBaselineApprox::diag_map
const double kDiagShift = std::log(std::expm1(1.0 - 1e-4));

// Caches one leaf per parameter name on the graph so repeated ParamFn
// lookups hit the same node.
struct LeafCache {
  Graph& g;
  const FlowParams& params;
  std::map<std::string, Tensor> leaves;

  Tensor operator()(const std::string& name) {
    auto it = leaves.find(name);
    if (it != leaves.end()) return it->second;
    Tensor t = g.leaf(params.at(name));
    leaves.emplace(name, t);
    return t;
  }
};

}  // namespace

double posterior_loss(const FlowParams& params, const EncoderConfig& enc, const FlowConfig& flow,
                      const GlmModel& model, const std::vector<Design>& batch, std::size_t N,
                      RngStream& rng, GradMap* grads) {
  if (batch.empty()) throw std::invalid_argument("posterior_loss: empty design batch");
  if (N == 0) throw std::invalid_argument("posterior_loss: N must be >= 1");

  double total = 0.0;
  for (std::size_t j = 0; j < batch.size(); ++j) {
    const Design& d = batch[j];
    RngStream rj = rng.fork(j);
    RngStream prior_rng = rj.fork(0);
    RngStream sim_rng = rj.fork(1);
    RngStream drop_rng = rj.fork(2);

    std::vector<LatentSample> latents = model.sample_prior(N, prior_rng);
    std::vector<Outcome> ys(N);
    std::vector<std::vector<double>> xs(N);
    double jac_mean = 0.0;
    for (std::size_t n = 0; n < N; ++n) {
      ys[n] = model.simulate(d, latents[n], sim_rng);
      xs[n] = model.to_unconstrained(latents[n]);
      jac_mean += model.unconstrained_log_jacobian(xs[n]) / double(N);
    }

    Graph g;
    LeafCache cache{g, params, {}};
    ParamFn p = [&cache](const std::string& name) { return cache(name); };
    Tensor ctx = encode_batch(g, p, enc, model, d, ys, /*train=*/true, &drop_rng);
    Tensor lq = flow_log_prob_batch(g, p, flow, params.perms, ctx, xs);
    for (std::size_t n = 0; n < N; ++n) {
      if (!std::isfinite(lq[n])) {
        char msg[96];
        std::snprintf(msg, sizeof(msg), "posterior_loss: non-finite log q (design %zu, sample %zu)",
                      j, n);
        throw std::runtime_error(msg);
      }
    }
    Tensor loss_t = g.neg(g.mean_all(lq));
    // shift by the (parameter-free) change-of-variables term so the loss is
    // the cross-entropy in the latent domain
    total += loss_t[0] + jac_mean;

    if (grads) {
      g.backward(loss_t);
      for (const auto& [name, leaf] : cache.leaves) {
        const std::vector<double>& gv = g.grad(leaf);
        std::vector<double>& acc = (*grads)[name];
        if (acc.empty()) acc.assign(gv.size(), 0.0);
        for (std::size_t i = 0; i < gv.size(); ++i) acc[i] += gv[i];
      }
    }
  }

  const double inv_b = 1.0 / double(batch.size());
  if (grads)
    for (auto& [name, acc] : *grads)
      for (double& v : acc) v *= inv_b;
  return total * inv_b;
}

void adamw_step(std::map<std::string, Tensor>& params, const GradMap& grads, AdamWState& state,
                double lr, double beta1, double beta2, double weight_decay, double eps) {
  state.t += 1;
  const double bc1 = 1.0 - std::pow(beta1, double(state.t));
  const double bc2 = 1.0 - std::pow(beta2, double(state.t));
  for (const auto& [name, g] : grads) {
    auto it = params.find(name);
    if (it == params.end()) throw std::invalid_argument("adamw_step: unknown parameter " + name);
    std::vector<double>& w = *it->second.data;
    if (w.size() != g.size()) throw std::invalid_argument("adamw_step: gradient shape mismatch");
    std::vector<double>& m = state.m[name];
    std::vector<double>& v = state.v[name];
    if (m.empty()) m.assign(w.size(), 0.0);
    if (v.empty()) v.assign(w.size(), 0.0);
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
      v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      w[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * w[i]);
    }
  }
}

double clip_global_norm(GradMap& grads, double cap) {
  double sq = 0.0;
  for (const auto& [name, g] : grads)
    for (double v : g) sq += v * v;
  const double norm = std::sqrt(sq);
  if (norm > cap && norm > 0.0) {
    const double s = cap / norm;
    for (auto& [name, g] : grads)
      for (double& v : g) v *= s;
  }
  return norm;
}

FlowParams train(const GlmModel& model, const EncoderConfig& enc, const FlowConfig& flow,
                 const TrainConfig& cfg, LossTrace* trace) {
  if (cfg.steps == 0 || cfg.designs_per_step == 0 || cfg.mc_N == 0 || cfg.design_units == 0)
    throw std::invalid_argument("train: all counts must be >= 1");
  if (cfg.learning_rate <= 0.0) throw std::invalid_argument("train: learning rate must be > 0");

  FlowParams params = init_flow_params(model, enc, flow, cfg.seed);
  AdamWState state;
  RngStream root(cfg.seed);
  for (std::size_t s = 0; s < cfg.steps; ++s) {
    const auto t0 = std::chrono::steady_clock::now();
    RngStream step_rng = root.fork(s + 1);
    RngStream design_rng = step_rng.fork(0);
    RngStream loss_rng = step_rng.fork(1);
    std::vector<Design> batch =
        sample_designs(cfg.designs_per_step, cfg.design_units, model.n_predictors(), design_rng);
    GradMap grads;
    const double loss = posterior_loss(params, enc, flow, model, batch, cfg.mc_N, loss_rng, &grads);
    clip_global_norm(grads, cfg.clip_norm);
    adamw_step(params.arrays, grads, state, cfg.learning_rate, cfg.beta1, cfg.beta2,
               cfg.weight_decay, cfg.eps);
    const auto t1 = std::chrono::steady_clock::now();
    if (trace) {
      trace->loss.push_back(loss);
      trace->seconds.push_back(std::chrono::duration<double>(t1 - t0).count());
    }
    if (cfg.checkpoint_every > 0 && !cfg.checkpoint_path.empty() &&
        (s + 1) % cfg.checkpoint_every == 0)
      save_checkpoint(cfg.checkpoint_path, params, enc, flow, cfg.seed);
  }
  return params;
}

LinearBaselineApprox train_baseline(const GlmModel& model, const Design& design,
                                    const TrainConfig& cfg, LossTrace* trace) {
  if (model.y_cols() != 1)
    throw std::invalid_argument("train_baseline: scalar-response families only");
  const std::size_t dim = model.param_dim();
  const std::size_t nu = design.n_units;
  const std::size_t T = dim * (dim + 1) / 2;

  Tensor A({dim, nu}, std::vector<double>(dim * nu, 0.0));
  Tensor raw({T}, std::vector<double>(T, 0.0));

  // index plumbing for assembling the dense lower-triangular precision
  // factor P from [mapped diagonal ; raw lower triangle ; one zero]
  std::vector<std::size_t> diag_idx(dim);
  for (std::size_t i = 0; i < dim; ++i) diag_idx[i] = i * (i + 1) / 2 + i;
  std::vector<std::size_t> p_idx(dim * dim);
  for (std::size_t i = 0; i < dim; ++i)
    for (std::size_t j = 0; j < dim; ++j) {
      if (i == j)
        p_idx[i * dim + j] = j;
      else if (j < i)
        p_idx[i * dim + j] = dim + i * (i + 1) / 2 + j;
      else
        p_idx[i * dim + j] = dim + T;
    }
  Tensor ones_col({dim, 1}, std::vector<double>(dim, 1.0));
  Tensor zero_slot({1, 1}, std::vector<double>(1, 0.0));

  AdamWState state;
  RngStream root(cfg.seed);
  for (std::size_t s = 0; s < cfg.steps; ++s) {
    const auto t0 = std::chrono::steady_clock::now();
    RngStream step_rng = root.fork(s + 1);
    RngStream prior_rng = step_rng.fork(0);
    RngStream sim_rng = step_rng.fork(1);
    const std::size_t N = cfg.mc_N;
    std::vector<LatentSample> latents = model.sample_prior(N, prior_rng);
    std::vector<double> th(N * dim), yv(N * nu);
    for (std::size_t n = 0; n < N; ++n) {
      Outcome y = model.simulate(design, latents[n], sim_rng);
      std::copy(y.y.begin(), y.y.end(), yv.begin() + n * nu);
      std::copy(latents[n].theta.begin(), latents[n].theta.end(), th.begin() + n * dim);
    }

    Graph g;
    Tensor Al = g.leaf(A);
    Tensor rl = g.leaf(raw);
    Tensor Y({N, nu}, std::move(yv));
    Tensor Th({N, dim}, std::move(th));
    Tensor mean = g.matmul(Y, g.transpose(Al));  // rows A y
    Tensor R = g.sub(Th, mean);

    Tensor diag = g.add_scalar(
        g.softplus(g.add_scalar(g.gather(rl, diag_idx, {1, dim}), kDiagShift)), 1e-4);
    Tensor parts = g.concat_last(g.concat_last(diag, g.reshape(rl, {1, T})), zero_slot);
    Tensor P = g.gather(parts, p_idx, {dim, dim});
    Tensor Z = g.matmul(R, P);  // row n holds P^T (theta_n - A y_n)
    Tensor quad = g.matmul(g.mul(Z, Z), ones_col);
    Tensor loss_t =
        g.add_scalar(g.sub(g.mul_scalar(g.mean_all(quad), 0.5), g.sum_all(g.log(diag))),
                     0.5 * double(dim) * kLog2Pi);
    g.backward(loss_t);

    GradMap grads;
    grads["A"] = g.grad(Al);
    grads["raw"] = g.grad(rl);
    clip_global_norm(grads, cfg.clip_norm);
    std::map<std::string, Tensor> ps{{"A", A}, {"raw", raw}};
    adamw_step(ps, grads, state, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.weight_decay,
               cfg.eps);
    const auto t1 = std::chrono::steady_clock::now();
    if (trace) {
      trace->loss.push_back(loss_t[0]);
      trace->seconds.push_back(std::chrono::duration<double>(t1 - t0).count());
    }
  }
  return LinearBaselineApprox(A.values(), raw.values(), dim, nu);
}

namespace {

using nlohmann::json;

json encoder_to_json(const EncoderConfig& e) {
  return json{{"kind", encoder_kind_to_string(e.kind)},
              {"embed_blocks", e.embed_blocks},
              {"embed_width", e.embed_width},
              {"token_width", e.token_width},
              {"attn_layers", e.attn_layers},
              {"attn_heads", e.attn_heads},
              {"head_dim", e.head_dim},
              {"post_attn_projection", e.post_attn_projection},
              {"dropout_p", e.dropout_p},
              {"emitter_blocks", e.emitter_blocks},
              {"emitter_width", e.emitter_width},
              {"residual_blocks", e.residual_blocks},
              {"residual_width", e.residual_width}};
}

EncoderConfig encoder_from_json(const json& j) {
  EncoderConfig e;
  e.kind = encoder_kind_from_string(j.at("kind").get<std::string>());
  e.embed_blocks = j.at("embed_blocks").get<std::size_t>();
  e.embed_width = j.at("embed_width").get<std::size_t>();
  e.token_width = j.at("token_width").get<std::size_t>();
  e.attn_layers = j.at("attn_layers").get<std::size_t>();
  e.attn_heads = j.at("attn_heads").get<std::size_t>();
  e.head_dim = j.at("head_dim").get<std::size_t>();
  e.post_attn_projection = j.at("post_attn_projection").get<std::size_t>();
  e.dropout_p = j.at("dropout_p").get<double>();
  e.emitter_blocks = j.at("emitter_blocks").get<std::size_t>();
  e.emitter_width = j.at("emitter_width").get<std::size_t>();
  e.residual_blocks = j.at("residual_blocks").get<std::size_t>();
  e.residual_width = j.at("residual_width").get<std::size_t>();
  return e;
}

json flow_to_json(const FlowConfig& f) {
  return json{{"kind", flow_kind_to_string(f.kind)},
              {"n_transforms", f.n_transforms},
              {"coupling_net_blocks", f.coupling_net_blocks},
              {"coupling_net_width", f.coupling_net_width},
              {"base_net_blocks", f.base_net_blocks},
              {"base_net_width", f.base_net_width},
              {"spline_bins", f.spline_bins}};
}

FlowConfig flow_from_json(const json& j) {
  FlowConfig f;
  f.kind = flow_kind_from_string(j.at("kind").get<std::string>());
  f.n_transforms = j.at("n_transforms").get<std::size_t>();
  f.coupling_net_blocks = j.at("coupling_net_blocks").get<std::size_t>();
  f.coupling_net_width = j.at("coupling_net_width").get<std::size_t>();
  f.base_net_blocks = j.at("base_net_blocks").get<std::size_t>();
  f.base_net_width = j.at("base_net_width").get<std::size_t>();
  f.spline_bins = j.at("spline_bins").get<std::size_t>();
  return f;
}

constexpr char kMagic[8] = {'B', 'O', 'E', 'D', 'C', 'K', 'P', 'T'};

}  // namespace

void save_checkpoint(const std::string& path, const FlowParams& params, const EncoderConfig& enc,
                     const FlowConfig& flow, std::uint64_t seed) {
  json manifest;
  manifest["seed"] = seed;
  manifest["latent_dim"] = params.latent_dim;
  manifest["ctx_dim"] = params.ctx_dim;
  manifest["encoder"] = encoder_to_json(enc);
  manifest["flow"] = flow_to_json(flow);
  manifest["perms"] = params.perms;
  json plist = json::array();
  std::uint64_t offset = 0;
  for (const auto& name : params.names) {
    const Tensor& t = params.arrays.at(name);
    plist.push_back(json{{"name", name}, {"shape", t.shape}, {"offset", offset}});
    offset += t.size();
  }
  manifest["params"] = plist;
  const std::string js = manifest.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
  out.write(kMagic, 8);
  const std::uint64_t len = js.size();
  out.write(reinterpret_cast<const char*>(&len), 8);
  out.write(js.data(), std::streamsize(js.size()));
  for (const auto& name : params.names) {
    const Tensor& t = params.arrays.at(name);
    out.write(reinterpret_cast<const char*>(t.values().data()),
              std::streamsize(t.size() * sizeof(double)));
  }
  if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

FlowParams load_checkpoint(const std::string& path, EncoderConfig* enc, FlowConfig* flow,
                           std::uint64_t* seed) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0)
    throw std::runtime_error("load_checkpoint: bad magic in " + path);
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), 8);
  std::string js(len, '\0');
  in.read(js.data(), std::streamsize(len));
  if (!in) throw std::runtime_error("load_checkpoint: truncated manifest in " + path);
  json manifest = json::parse(js);

  if (seed) *seed = manifest.at("seed").get<std::uint64_t>();
  if (enc) *enc = encoder_from_json(manifest.at("encoder"));
  if (flow) *flow = flow_from_json(manifest.at("flow"));

  FlowParams params;
  params.latent_dim = manifest.at("latent_dim").get<std::size_t>();
  params.ctx_dim = manifest.at("ctx_dim").get<std::size_t>();
  params.perms = manifest.at("perms").get<std::vector<std::vector<std::size_t>>>();
  for (const auto& entry : manifest.at("params")) {
    const std::string name = entry.at("name").get<std::string>();
    const auto shape = entry.at("shape").get<std::vector<std::size_t>>();
    std::size_t sz = 1;
    for (std::size_t s : shape) sz *= s;
    std::vector<double> vals(sz);
    in.read(reinterpret_cast<char*>(vals.data()), std::streamsize(sz * sizeof(double)));
    if (!in) throw std::runtime_error("load_checkpoint: truncated payload in " + path);
    params.names.push_back(name);
    params.arrays.emplace(name, Tensor(shape, std::move(vals)));
  }
  return params;
}

void write_loss_trace(const std::string& path, const LossTrace& trace) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_loss_trace: cannot open " + path);
  out << "step,loss,seconds\n";
  char buf[96];
  for (std::size_t i = 0; i < trace.loss.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g\n", i, trace.loss[i],
                  i < trace.seconds.size() ? trace.seconds[i] : 0.0);
    out << buf;
  }
}

}  // namespace boed
