#include "boed/amortized.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace boed {

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;
// softplus(kDiagShift) + 1e-4 == 1, so zero-initialized base/baseline nets
// start with a unit-diagonal precision factor.
const double kDiagShift = std::log(std::expm1(1.0 - 1e-4));
// floors keep saturated conditioner outputs from collapsing spline bins;
// softplus(kDerivShift) + kSplineFloor == 1 preserves the zero-init identity
const double kSplineFloor = 1e-4;
const double kDerivShift = std::log(std::expm1(1.0 - kSplineFloor));

std::size_t id_split(std::size_t latent_dim) { return (latent_dim + 1) / 2; }

std::size_t conditioner_out_dim(const FlowConfig& cfg, std::size_t n_tr) {
  if (cfg.kind == FlowConfig::Kind::affine_coupling) return 2 * n_tr;
  return n_tr * (3 * cfg.spline_bins - 1);
}

Tensor lin(Graph& g, const ParamFn& p, const std::string& name, const Tensor& x) {
  return g.add(g.matmul(x, p(name + ".w")), p(name + ".b"));
}

Tensor res_blocks(Graph& g, const ParamFn& p, const std::string& prefix, Tensor h,
                  std::size_t blocks) {
  for (std::size_t i = 0; i < blocks; ++i) {
    std::string b = prefix + ".block" + std::to_string(i);
    h = g.add(h, lin(g, p, b + ".l2", g.relu(lin(g, p, b + ".l1", h))));
  }
  return h;
}

// columns [lo, hi) of a [rows, cols] tensor
Tensor col_slice(Graph& g, const Tensor& t, std::size_t rows, std::size_t cols, std::size_t lo,
                 std::size_t hi) {
  std::vector<std::size_t> idx;
  idx.reserve(rows * (hi - lo));
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = lo; c < hi; ++c) idx.push_back(r * cols + c);
  return g.gather(t, idx, {rows, hi - lo});
}

// [rows, cols] -> [rows] row sums, via a ones column
Tensor row_sum(Graph& g, const Tensor& t, std::size_t rows, std::size_t cols) {
  Tensor ones({cols, 1}, std::vector<double>(cols, 1.0));
  return g.reshape(g.matmul(t, ones), {rows});
}

struct NetEval {
  // in -> width, relu, blocks, out (linear)
  static Tensor run(Graph& g, const ParamFn& p, const std::string& prefix, const Tensor& in,
                    std::size_t blocks) {
    Tensor h = g.relu(lin(g, p, prefix + ".in", in));
    h = res_blocks(g, p, prefix, h, blocks);
    return lin(g, p, prefix + ".out", h);
  }
};

}  // namespace

std::string encoder_kind_to_string(EncoderConfig::Kind k) {
  return k == EncoderConfig::Kind::attention ? "attention" : "residual";
}
EncoderConfig::Kind encoder_kind_from_string(const std::string& s) {
  if (s == "attention") return EncoderConfig::Kind::attention;
  if (s == "residual") return EncoderConfig::Kind::residual;
  throw std::invalid_argument("unknown encoder kind '" + s + "'");
}
std::string flow_kind_to_string(FlowConfig::Kind k) {
  switch (k) {
    case FlowConfig::Kind::affine_coupling: return "affine-coupling";
    case FlowConfig::Kind::rq_spline: return "rq-spline";
    default: return "none";
  }
}
FlowConfig::Kind flow_kind_from_string(const std::string& s) {
  if (s == "affine-coupling") return FlowConfig::Kind::affine_coupling;
  if (s == "rq-spline") return FlowConfig::Kind::rq_spline;
  if (s == "none") return FlowConfig::Kind::none;
  throw std::invalid_argument("unknown flow kind '" + s + "'");
}

Tensor& FlowParams::at(const std::string& name) {
  auto it = arrays.find(name);
  if (it == arrays.end()) throw std::invalid_argument("unknown parameter '" + name + "'");
  return it->second;
}
const Tensor& FlowParams::at(const std::string& name) const {
  auto it = arrays.find(name);
  if (it == arrays.end()) throw std::invalid_argument("unknown parameter '" + name + "'");
  return it->second;
}

FlowParams init_flow_params(const GlmModel& model, const EncoderConfig& enc, const FlowConfig& flow,
                            std::uint64_t seed) {
  if (enc.kind == EncoderConfig::Kind::attention &&
      enc.attn_heads * enc.head_dim != enc.token_width)
    throw std::invalid_argument("init_flow_params: attn_heads * head_dim must equal token_width");

  FlowParams ps;
  ps.latent_dim = model.flow_dim();
  ps.ctx_dim = enc.emitter_width;
  RngStream rng(seed);

  // Variance-preserving initialization: He gain for weights feeding a relu,
  // Xavier for linear-position layers, and the residual branch's closing
  // layer scaled down by the block count so a stack of blocks keeps
  // activations O(1). Zero for the output layers that make the flow start
  // as the identity. sd == 0 still draws nothing, keeping the rng sequence
  // independent of which layers are zero-initialized.
  auto add = [&](const std::string& name, std::size_t in_dim, std::size_t out_dim, double sd) {
    std::vector<double> w(in_dim * out_dim, 0.0);
    if (sd > 0.0)
      for (auto& v : w) v = rng.normal() * sd;
    ps.names.push_back(name + ".w");
    ps.arrays.emplace(name + ".w", Tensor({in_dim, out_dim}, std::move(w)));
    ps.names.push_back(name + ".b");
    ps.arrays.emplace(name + ".b", Tensor({out_dim}, std::vector<double>(out_dim, 0.0)));
  };
  auto he = [](std::size_t in_dim) { return std::sqrt(2.0 / double(in_dim)); };
  auto xavier = [](std::size_t in_dim) { return std::sqrt(1.0 / double(in_dim)); };
  auto add_net = [&](const std::string& prefix, std::size_t in_dim, std::size_t width,
                     std::size_t blocks, std::size_t out_dim, bool zero_out) {
    add(prefix + ".in", in_dim, width, he(in_dim));
    for (std::size_t i = 0; i < blocks; ++i) {
      add(prefix + ".block" + std::to_string(i) + ".l1", width, width, he(width));
      add(prefix + ".block" + std::to_string(i) + ".l2", width, width,
          xavier(width) / std::sqrt(2.0 * double(blocks)));
    }
    if (out_dim) add(prefix + ".out", width, out_dim, zero_out ? 0.0 : xavier(width));
  };

  const std::size_t in_cols = model.design_cols() + model.y_encoding_cols();
  add_net("embed", in_cols, enc.embed_width, enc.embed_blocks, enc.token_width, false);

  if (enc.kind == EncoderConfig::Kind::attention) {
    for (std::size_t l = 0; l < enc.attn_layers; ++l) {
      std::string a = "attn" + std::to_string(l);
      if (l > 0) add(a + ".reembed", enc.post_attn_projection, enc.token_width,
                     xavier(enc.post_attn_projection));
      add(a + ".q", enc.token_width, enc.token_width, xavier(enc.token_width));
      add(a + ".k", enc.token_width, enc.token_width, xavier(enc.token_width));
      add(a + ".v", enc.token_width, enc.token_width, xavier(enc.token_width));
      add(a + ".proj", enc.token_width, enc.post_attn_projection, xavier(enc.token_width));
    }
  } else {
    add_net("res", enc.token_width, enc.residual_width, enc.residual_blocks,
            enc.post_attn_projection, false);
  }

  // emitter has no out layer; the context is the last block's activation
  add("emit.in", enc.post_attn_projection, enc.emitter_width, he(enc.post_attn_projection));
  for (std::size_t i = 0; i < enc.emitter_blocks; ++i) {
    add("emit.block" + std::to_string(i) + ".l1", enc.emitter_width, enc.emitter_width,
        he(enc.emitter_width));
    add("emit.block" + std::to_string(i) + ".l2", enc.emitter_width, enc.emitter_width,
        xavier(enc.emitter_width) / std::sqrt(2.0 * double(enc.emitter_blocks)));
  }

  const std::size_t L = ps.latent_dim;
  const std::size_t E = L * (L + 1) / 2;
  add_net("base", ps.ctx_dim, flow.base_net_width, flow.base_net_blocks, L + E, true);

  if (flow.kind != FlowConfig::Kind::none) {
    const std::size_t n_id = id_split(L);
    const std::size_t n_tr = L - n_id;
    for (std::size_t k = 0; k < flow.n_transforms; ++k) {
      if (n_tr > 0)
        add_net("flow" + std::to_string(k), n_id + ps.ctx_dim, flow.coupling_net_width,
                flow.coupling_net_blocks, conditioner_out_dim(flow, n_tr), true);
      std::vector<std::size_t> perm(L);
      std::iota(perm.begin(), perm.end(), std::size_t{0});
      // Fisher-Yates off the init stream; stored with the parameters
      for (std::size_t i = L; i > 1; --i) {
        std::size_t j = std::size_t(rng.uniform() * double(i));
        if (j >= i) j = i - 1;
        std::swap(perm[i - 1], perm[j]);
      }
      ps.perms.push_back(std::move(perm));
    }
  }
  return ps;
}

Tensor encode_batch(Graph& g, const ParamFn& p, const EncoderConfig& cfg, const GlmModel& model,
                    const Design& d, const std::vector<Outcome>& ys, bool train,
                    RngStream* drop_rng) {
  const std::size_t B = ys.size();
  const std::size_t S = d.n_units;
  if (S == 0) throw std::invalid_argument("encode_batch: design has no units");
  if (B == 0) throw std::invalid_argument("encode_batch: empty outcome batch");
  if (train && !drop_rng) throw std::invalid_argument("encode_batch: train mode needs an rng");

  const std::size_t dc = model.design_cols();
  const std::size_t yc = model.y_encoding_cols();
  const std::size_t C = dc + yc;
  std::vector<double> rows(B * S * C);
  for (std::size_t b = 0; b < B; ++b) {
    if (ys[b].n_units != S) throw std::invalid_argument("encode_batch: outcome unit mismatch");
    std::vector<double> enc = model.encode_outcome(ys[b]);
    for (std::size_t s = 0; s < S; ++s) {
      double* r = &rows[(b * S + s) * C];
      for (std::size_t j = 0; j < dc; ++j) r[j] = d(s, j);
      for (std::size_t j = 0; j < yc; ++j) r[dc + j] = enc[s * yc + j];
    }
  }
  Tensor x({B * S, C}, std::move(rows));

  Tensor h = g.relu(lin(g, p, "embed.in", x));
  h = res_blocks(g, p, "embed", h, cfg.embed_blocks);
  Tensor tokens = lin(g, p, "embed.out", h);  // [B*S, token_width]

  Tensor units;  // [B*S, post_attn_projection]
  if (cfg.kind == EncoderConfig::Kind::attention) {
    const std::size_t W = cfg.token_width, H = cfg.attn_heads, dh = cfg.head_dim;
    std::vector<std::size_t> split_idx(B * H * S * dh), merge_idx(B * S * W);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t hh = 0; hh < H; ++hh)
        for (std::size_t s = 0; s < S; ++s)
          for (std::size_t t = 0; t < dh; ++t) {
            std::size_t flat2d = (b * S + s) * W + hh * dh + t;
            std::size_t flat3d = ((b * H + hh) * S + s) * dh + t;
            split_idx[flat3d] = flat2d;
            merge_idx[flat2d] = flat3d;
          }
    Tensor cur = tokens;
    for (std::size_t l = 0; l < cfg.attn_layers; ++l) {
      std::string a = "attn" + std::to_string(l);
      if (l > 0) cur = lin(g, p, a + ".reembed", cur);
      Tensor q = g.gather(lin(g, p, a + ".q", cur), split_idx, {B * H, S, dh});
      Tensor k = g.gather(lin(g, p, a + ".k", cur), split_idx, {B * H, S, dh});
      Tensor v = g.gather(lin(g, p, a + ".v", cur), split_idx, {B * H, S, dh});
      RngStream dummy(0);
      RngStream& dr = train ? *drop_rng : dummy;
      Tensor o = g.gather(g.attention(q, k, v), merge_idx, {B * S, W});
      o = g.dropout(o, cfg.dropout_p, dr, train);
      cur = g.dropout(lin(g, p, a + ".proj", o), cfg.dropout_p, dr, train);
    }
    units = cur;
  } else {
    units = NetEval::run(g, p, "res", tokens, cfg.residual_blocks);
  }

  // permutation-invariant aggregation: sum over the S units
  const std::size_t P = cfg.post_attn_projection;
  Tensor ones({B, 1, S}, std::vector<double>(B * S, 1.0));
  Tensor summed = g.reshape(g.bmm(ones, g.reshape(units, {B, S, P})), {B, P});

  Tensor c = g.relu(lin(g, p, "emit.in", summed));
  return res_blocks(g, p, "emit", c, cfg.emitter_blocks);
}

namespace {

// Base-density pieces for contexts [B, ctx]: mean [B, L], mapped diagonal
// [B, L], and the transposed precision factor rows [B, L, L].
struct BaseOut {
  Tensor mu, diag, pt;
};

BaseOut base_forward(Graph& g, const ParamFn& p, const FlowConfig& cfg, const Tensor& ctx,
                     std::size_t B, std::size_t L) {
  const std::size_t E = L * (L + 1) / 2;
  Tensor out = NetEval::run(g, p, "base", ctx, cfg.base_net_blocks);  // [B, L+E]
  BaseOut r;
  r.mu = col_slice(g, out, B, L + E, 0, L);
  Tensor diag_raw = col_slice(g, out, B, L + E, L, 2 * L);
  r.diag = g.add_scalar(g.softplus(g.add_scalar(diag_raw, kDiagShift)), 1e-4);
  Tensor entries;  // [B, E+1]: mapped diagonal, raw off-diagonal, zero slot
  if (E > L) {
    Tensor off = col_slice(g, out, B, L + E, 2 * L, L + E);
    entries = g.concat_last(g.concat_last(r.diag, off), Tensor({B, 1}, std::vector<double>(B, 0.0)));
  } else {
    entries = g.concat_last(r.diag, Tensor({B, 1}, std::vector<double>(B, 0.0)));
  }
  // P is lower triangular; P^T(i,j) = P(j,i), nonzero for j >= i.
  std::vector<std::size_t> idx(B * L * L);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < L; ++i)
      for (std::size_t j = 0; j < L; ++j) {
        std::size_t src;
        if (j < i) src = E;                              // zero slot
        else if (j == i) src = j;                        // mapped diagonal
        else src = L + j * (j - 1) / 2 + i;              // raw lower triangle
        idx[(b * L + i) * L + j] = b * (E + 1) + src;
      }
  r.pt = g.gather(entries, idx, {B, L, L});
  return r;
}

Tensor affine_scale(Graph& g, const Tensor& pre) {
  // exp of a tanh-bounded pre-scale; zero input -> scale 1
  return g.exp(g.mul_scalar(g.tanh(g.mul_scalar(pre, 1.0 / 5.0)), 5.0));
}

// Spline quantities selected per (row, coordinate): flat [B*n_tr] tensors.
struct SplineSel {
  Tensor w, h, xk, yk, d0, d1;  // bin width/height, left knots, edge derivs
};

// widths/heights/derivs from conditioner output [B, n_tr*(3K-1)];
// bin indices are chosen numerically from `pos` (by x-knots when by_x).
SplineSel spline_select(Graph& g, const Tensor& cond, std::size_t B, std::size_t n_tr,
                        std::size_t K, const std::vector<double>& pos, bool by_x) {
  const std::size_t stride = 3 * K - 1;
  auto part = [&](std::size_t lo, std::size_t n) {
    std::vector<std::size_t> idx(B * n_tr * n);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t j = 0; j < n_tr; ++j)
        for (std::size_t t = 0; t < n; ++t)
          idx[(b * n_tr + j) * n + t] = b * (n_tr * stride) + j * stride + lo + t;
    return g.gather(cond, idx, {B * n_tr, n});
  };
  const double scale = 1.0 - double(K) * kSplineFloor;
  Tensor widths = g.add_scalar(g.mul_scalar(g.softmax_last(part(0, K)), scale), kSplineFloor);
  Tensor heights = g.add_scalar(g.mul_scalar(g.softmax_last(part(K, K)), scale), kSplineFloor);
  Tensor derivs =
      g.add_scalar(g.softplus(g.add_scalar(part(2 * K, K - 1), kDerivShift)), kSplineFloor);

  // left knots via cumulative sums: CS[:, k] = sum of bins before k
  std::vector<double> ut(K * K, 0.0);
  for (std::size_t i = 0; i < K; ++i)
    for (std::size_t j = i + 1; j < K; ++j) ut[i * K + j] = 1.0;
  Tensor U({K, K}, ut);
  Tensor xknots = g.matmul(widths, U);
  Tensor yknots = g.matmul(heights, U);

  // pick the bin per entry (numeric; gradient through the choice is zero a.e.)
  const std::size_t n = B * n_tr;
  std::vector<std::size_t> bin(n, 0);
  const std::vector<double>& kn = by_x ? xknots.values() : yknots.values();
  // bins are selected for out-of-range entries too (at the safe stand-in
  // position) so masked lanes never see an out-of-bin inverse
  for (std::size_t e = 0; e < n; ++e) {
    std::size_t k = 0;
    while (k + 1 < K && kn[e * K + k + 1] <= pos[e]) ++k;
    bin[e] = k;
  }
  auto pick = [&](const Tensor& t, std::size_t cols, bool next) {
    std::vector<std::size_t> idx(n);
    for (std::size_t e = 0; e < n; ++e) idx[e] = e * cols + bin[e] + (next ? 1 : 0);
    return g.gather(t, idx, {n});
  };
  // boundary derivatives are fixed at 1: pad derivs to [., K+1]
  Tensor one_col({n, 1}, std::vector<double>(n, 1.0));
  Tensor dpad = g.concat_last(g.concat_last(one_col, derivs), one_col);  // [n, K+1]
  SplineSel s;
  s.w = pick(widths, K, false);
  s.h = pick(heights, K, false);
  s.xk = pick(xknots, K, false);
  s.yk = pick(yknots, K, false);
  s.d0 = pick(dpad, K + 1, false);
  s.d1 = pick(dpad, K + 1, true);
  return s;
}

// log of the forward spline derivative at inner coordinate xi
Tensor spline_log_deriv(Graph& g, const SplineSel& s, const Tensor& xi) {
  Tensor one_m = g.add_scalar(g.neg(xi), 1.0);
  Tensor x1x = g.mul(xi, one_m);
  Tensor sl = g.div(s.h, s.w);
  Tensor t2 = g.sub(g.add(s.d1, s.d0), g.mul_scalar(sl, 2.0));
  Tensor num = g.add(g.add(g.mul(s.d1, g.mul(xi, xi)), g.mul_scalar(g.mul(sl, x1x), 2.0)),
                     g.mul(s.d0, g.mul(one_m, one_m)));
  Tensor den = g.add(sl, g.mul(t2, x1x));
  return g.sub(g.add(g.mul_scalar(g.log(sl), 2.0), g.log(num)), g.mul_scalar(g.log(den), 2.0));
}

}  // namespace

Tensor flow_invert_batch(Graph& g, const ParamFn& p, const FlowConfig& cfg,
                         const std::vector<std::vector<std::size_t>>& perms, const Tensor& ctx,
                         const std::vector<std::vector<double>>& xs, Tensor* logdet_out) {
  const std::size_t B = xs.size();
  if (B == 0) throw std::invalid_argument("flow_invert_batch: empty batch");
  const std::size_t L = xs[0].size();
  std::vector<double> flat(B * L);
  for (std::size_t b = 0; b < B; ++b) {
    if (xs[b].size() != L) throw std::invalid_argument("flow_log_prob_batch: ragged batch");
    std::copy(xs[b].begin(), xs[b].end(), flat.begin() + b * L);
  }
  Tensor cur({B, L}, std::move(flat));

  const std::size_t n_id = id_split(L);
  const std::size_t n_tr = L - n_id;
  Tensor logdet;  // accumulated forward log-determinants, [B]
  bool have_logdet = false;

  const std::size_t K = (cfg.kind == FlowConfig::Kind::none || n_tr == 0) ? 0 : cfg.n_transforms;
  for (std::size_t k = K; k-- > 0;) {
    // invert the fixed permutation (forward: out[i] = v[perm[i]])
    const auto& perm = perms.at(k);
    std::vector<std::size_t> inv(L);
    for (std::size_t i = 0; i < L; ++i) inv[perm[i]] = i;
    std::vector<std::size_t> idx(B * L);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < L; ++i) idx[b * L + i] = b * L + inv[i];
    cur = g.gather(cur, idx, {B, L});

    Tensor xa = col_slice(g, cur, B, L, 0, n_id);
    Tensor xb = col_slice(g, cur, B, L, n_id, L);
    Tensor cond = NetEval::run(g, p, "flow" + std::to_string(k), g.concat_last(xa, ctx),
                               cfg.coupling_net_blocks);
    Tensor ub, ld;
    if (cfg.kind == FlowConfig::Kind::affine_coupling) {
      Tensor shift = col_slice(g, cond, B, 2 * n_tr, 0, n_tr);
      Tensor scale = affine_scale(g, col_slice(g, cond, B, 2 * n_tr, n_tr, 2 * n_tr));
      ub = g.div(g.sub(xb, shift), scale);
      ld = row_sum(g, g.log(scale), B, n_tr);
    } else {
      const std::size_t nK = cfg.spline_bins;
      const std::size_t n = B * n_tr;
      const auto& xv = xb.values();
      std::vector<bool> inside(n);
      std::vector<double> mask(n), invmask(n), pos(n);
      for (std::size_t e = 0; e < n; ++e) {
        inside[e] = xv[e] > 0.0 && xv[e] < 1.0;
        mask[e] = inside[e] ? 1.0 : 0.0;
        invmask[e] = 1.0 - mask[e];
        pos[e] = inside[e] ? xv[e] : 0.5;  // safe stand-in outside the interval
      }
      Tensor mk({n}, mask), im({n}, invmask);
      Tensor xf = g.reshape(xb, {n});
      Tensor xs_safe = g.add(g.mul(xf, mk), Tensor({n}, [&] {
                               std::vector<double> v(n);
                               for (std::size_t e = 0; e < n; ++e) v[e] = invmask[e] * 0.5;
                               return v;
                             }()));
      SplineSel sel = spline_select(g, cond, B, n_tr, nK, pos, /*by_x=*/false);
      Tensor yr = g.sub(xs_safe, sel.yk);
      Tensor sl = g.div(sel.h, sel.w);
      Tensor t2 = g.sub(g.add(sel.d1, sel.d0), g.mul_scalar(sl, 2.0));
      Tensor a = g.add(g.mul(sel.h, g.sub(sl, sel.d0)), g.mul(yr, t2));
      Tensor bb = g.sub(g.mul(sel.h, sel.d0), g.mul(yr, t2));
      Tensor c = g.neg(g.mul(sl, yr));
      Tensor disc = g.sub(g.mul(bb, bb), g.mul_scalar(g.mul(a, c), 4.0));
      Tensor xi = g.div(g.mul_scalar(c, 2.0), g.sub(g.neg(bb), g.sqrt(disc)));
      Tensor u_in = g.add(sel.xk, g.mul(xi, sel.w));
      ub = g.reshape(g.add(g.mul(u_in, mk), g.mul(xf, im)), {B, n_tr});
      ld = row_sum(g, g.reshape(g.mul(spline_log_deriv(g, sel, xi), mk), {B, n_tr}), B, n_tr);
    }
    cur = g.concat_last(xa, ub);
    logdet = have_logdet ? g.add(logdet, ld) : ld;
    have_logdet = true;
  }
  if (logdet_out) *logdet_out = have_logdet ? logdet : Tensor({B}, std::vector<double>(B, 0.0));
  return cur;
}

Tensor flow_log_prob_batch(Graph& g, const ParamFn& p, const FlowConfig& cfg,
                           const std::vector<std::vector<std::size_t>>& perms, const Tensor& ctx,
                           const std::vector<std::vector<double>>& xs) {
  const std::size_t B = xs.size();
  const std::size_t L = xs.empty() ? 0 : xs[0].size();
  Tensor logdet;
  Tensor cur = flow_invert_batch(g, p, cfg, perms, ctx, xs, &logdet);

  BaseOut base = base_forward(g, p, cfg, ctx, B, L);
  Tensor r = g.reshape(g.sub(cur, base.mu), {B, L, 1});
  Tensor z = g.reshape(g.bmm(base.pt, r), {B, L});
  Tensor quad = row_sum(g, g.mul(z, z), B, L);
  Tensor logq = g.add_scalar(g.sub(row_sum(g, g.log(base.diag), B, L), g.mul_scalar(quad, 0.5)),
                             -0.5 * double(L) * kLog2Pi);
  return g.sub(logq, logdet);
}

namespace {

// numeric rational-quadratic spline forward for one coordinate
void spline_forward_scalar(double u, const double* w, const double* h, const double* d,
                           std::size_t K, double& x, double& logdet) {
  if (u <= 0.0 || u >= 1.0) {
    x = u;
    return;  // identity tail, zero log-derivative
  }
  std::size_t k = 0;
  double xk = 0.0, yk = 0.0;
  while (k + 1 < K && xk + w[k] <= u) {
    xk += w[k];
    yk += h[k];
    ++k;
  }
  double s = h[k] / w[k];
  double xi = (u - xk) / w[k];
  double d0 = d[k], d1 = d[k + 1];
  double t2 = d1 + d0 - 2.0 * s;
  double x1x = xi * (1.0 - xi);
  double den = s + t2 * x1x;
  x = yk + h[k] * (s * xi * xi + d0 * x1x) / den;
  double num = s * s * (d1 * xi * xi + 2.0 * s * x1x + d0 * (1.0 - xi) * (1.0 - xi));
  logdet += std::log(num) - 2.0 * std::log(den);
}

void softmax_inplace(double* v, std::size_t n) {
  double mx = v[0];
  for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, v[i]);
  double s = 0;
  for (std::size_t i = 0; i < n; ++i) s += (v[i] = std::exp(v[i] - mx));
  for (std::size_t i = 0; i < n; ++i) v[i] /= s;
}

}  // namespace

void flow_sample(const FlowParams& params, const EncoderConfig& enc, const FlowConfig& cfg,
                 const GlmModel& model, const Design& d, const Outcome& y, std::size_t n,
                 RngStream& rng, std::vector<std::vector<double>>& xs, std::vector<double>& log_q) {
  if (n == 0) throw std::invalid_argument("flow_sample: n must be >= 1");
  const std::size_t L = params.latent_dim;
  const std::size_t E = L * (L + 1) / 2;
  Graph g;
  ParamFn p = [&](const std::string& name) { return params.at(name); };
  Tensor ctx = encode_batch(g, p, enc, model, d, {y}, false, nullptr);
  BaseOut base = base_forward(g, p, cfg, ctx, 1, L);
  const auto& mu = base.mu.values();
  const auto& pt = base.pt.values();  // P^T, row-major [L, L]
  const auto& diag = base.diag.values();
  double half_logdet = 0.0;
  for (std::size_t i = 0; i < L; ++i) half_logdet += std::log(diag[i]);

  xs.assign(n, std::vector<double>(L));
  log_q.assign(n, 0.0);
  std::vector<double> z(L);
  for (std::size_t s = 0; s < n; ++s) {
    double quad = 0;
    for (auto& v : z) {
      v = rng.normal();
      quad += v * v;
    }
    // u = mu + P^{-T} z: back substitution on the upper-triangular P^T
    std::vector<double> t(L);
    for (std::size_t i = L; i-- > 0;) {
      double acc = z[i];
      for (std::size_t j = i + 1; j < L; ++j) acc -= pt[i * L + j] * t[j];
      t[i] = acc / pt[i * L + i];
    }
    for (std::size_t i = 0; i < L; ++i) xs[s][i] = mu[i] + t[i];
    log_q[s] = -0.5 * double(L) * kLog2Pi + half_logdet - 0.5 * quad;
  }

  const std::size_t n_id = id_split(L);
  const std::size_t n_tr = L - n_id;
  if (cfg.kind == FlowConfig::Kind::none || n_tr == 0) return;

  const std::size_t K = cfg.spline_bins;
  const std::size_t stride = 3 * K - 1;
  const auto& cv = ctx.values();
  for (std::size_t k = 0; k < cfg.n_transforms; ++k) {
    // conditioner on the identity half of every draw, batched
    std::vector<double> cin(n * (n_id + params.ctx_dim));
    for (std::size_t s = 0; s < n; ++s) {
      for (std::size_t i = 0; i < n_id; ++i) cin[s * (n_id + params.ctx_dim) + i] = xs[s][i];
      for (std::size_t i = 0; i < params.ctx_dim; ++i)
        cin[s * (n_id + params.ctx_dim) + n_id + i] = cv[i];
    }
    Tensor cond = NetEval::run(g, p, "flow" + std::to_string(k),
                               Tensor({n, n_id + params.ctx_dim}, std::move(cin)),
                               cfg.coupling_net_blocks);
    const auto& co = cond.values();
    for (std::size_t s = 0; s < n; ++s) {
      if (cfg.kind == FlowConfig::Kind::affine_coupling) {
        for (std::size_t j = 0; j < n_tr; ++j) {
          double shift = co[s * 2 * n_tr + j];
          double scale = std::exp(5.0 * std::tanh(co[s * 2 * n_tr + n_tr + j] / 5.0));
          xs[s][n_id + j] = xs[s][n_id + j] * scale + shift;
          log_q[s] -= std::log(scale);
        }
      } else {
        std::vector<double> w(K), h(K), dv(K + 1);
        for (std::size_t j = 0; j < n_tr; ++j) {
          const double* raw = &co[s * n_tr * stride + j * stride];
          std::copy(raw, raw + K, w.begin());
          std::copy(raw + K, raw + 2 * K, h.begin());
          softmax_inplace(w.data(), K);
          softmax_inplace(h.data(), K);
          const double scale = 1.0 - double(K) * kSplineFloor;
          for (std::size_t t = 0; t < K; ++t) {
            w[t] = w[t] * scale + kSplineFloor;
            h[t] = h[t] * scale + kSplineFloor;
          }
          dv[0] = dv[K] = 1.0;
          for (std::size_t t = 0; t + 1 < K; ++t) {
            double r = raw[2 * K + t] + kDerivShift;
            dv[t + 1] = (r > 30.0 ? r : std::log1p(std::exp(r))) + kSplineFloor;
          }
          double out, ld = 0.0;
          spline_forward_scalar(xs[s][n_id + j], w.data(), h.data(), dv.data(), K, out, ld);
          xs[s][n_id + j] = out;
          log_q[s] -= ld;
        }
      }
      // fixed permutation after the coupling step
      const auto& perm = params.perms.at(k);
      std::vector<double> v = xs[s];
      for (std::size_t i = 0; i < L; ++i) xs[s][i] = v[perm[i]];
    }
  }
}

AmortizedPosterior::AmortizedPosterior(const GlmModel& model, EncoderConfig enc, FlowConfig flow,
                                       FlowParams params)
    : model_(&model), enc_(enc), flow_(flow), params_(std::move(params)) {}

void AmortizedPosterior::sample(const Design& d, const Outcome& y, std::size_t m, RngStream& rng,
                                std::vector<LatentSample>& samples,
                                std::vector<double>& log_q) const {
  std::vector<std::vector<double>> xs;
  flow_sample(params_, enc_, flow_, *model_, d, y, m, rng, xs, log_q);
  samples.resize(m);
  for (std::size_t i = 0; i < m; ++i) {
    samples[i] = model_->from_unconstrained(xs[i]);
    log_q[i] -= model_->unconstrained_log_jacobian(xs[i]);
  }
}

double AmortizedPosterior::log_prob(const LatentSample& latent, const Outcome& y,
                                    const Design& d) const {
  Graph g;
  ParamFn p = [&](const std::string& name) { return params_.at(name); };
  Tensor ctx = encode_batch(g, p, enc_, *model_, d, {y}, false, nullptr);
  std::vector<double> x = model_->to_unconstrained(latent);
  Tensor lq = flow_log_prob_batch(g, p, flow_, params_.perms, ctx, {x});
  return lq[0] - model_->unconstrained_log_jacobian(x);
}

}  // namespace boed
