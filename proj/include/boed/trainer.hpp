#pragma once
// AdamW training of the amortized posterior on the negative mean posterior
// log-density over batches of random designs, the per-design linear baseline
// fit, and binary checkpointing of parameter arrays.

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "boed/amortized.hpp"
#include "boed/models.hpp"
#include "boed/posterior.hpp"
#include "boed/rng.hpp"

namespace boed {

struct TrainConfig {
  std::size_t steps = 5000;
  std::size_t designs_per_step = 50;
  std::size_t mc_N = 50;          // joint (theta, y) draws per design
  std::size_t design_units = 5;   // rows per sampled training design
  double learning_rate = 5e-4;    // the baseline comparison uses 1e-3
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 0.01;
  double eps = 1e-8;
  double clip_norm = 10.0;        // global gradient-norm cap
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 0;  // 0 disables periodic checkpoints
  std::string checkpoint_path;
};

struct LossTrace {
  std::vector<double> loss;     // nats, one entry per completed step
  std::vector<double> seconds;  // wall time per step
};

using GradMap = std::map<std::string, std::vector<double>>;

// Average over the design batch of -mean_n log q(theta_n | y_n, d), with the
// density taken in the latent domain and dropout active. When grads is
// non-null it receives the batch-averaged parameter gradients.
double posterior_loss(const FlowParams& params, const EncoderConfig& enc, const FlowConfig& flow,
                      const GlmModel& model, const std::vector<Design>& batch, std::size_t N,
                      RngStream& rng, GradMap* grads);

struct AdamWState {
  std::size_t t = 0;  // completed update count
  GradMap m, v;       // first/second moment accumulators per parameter
};

// Bias-corrected Adam update with decoupled weight decay, applied in place.
void adamw_step(std::map<std::string, Tensor>& params, const GradMap& grads, AdamWState& state,
                double lr, double beta1, double beta2, double weight_decay, double eps);

// Scales grads so their combined l2 norm is at most cap; returns the
// pre-clip norm.
double clip_global_norm(GradMap& grads, double cap);

// Full training loop: per step, sample designs_per_step random designs,
// take one clipped AdamW step on posterior_loss. Deterministic given
// cfg.seed. Writes periodic checkpoints when configured.
FlowParams train(const GlmModel& model, const EncoderConfig& enc, const FlowConfig& flow,
                 const TrainConfig& cfg, LossTrace* trace);

// Fits the non-amortized baseline q = N(Ay, Sigma) on one fixed design
// (the baseline cannot share parameters across designs). Scalar-response
// families only.
LinearBaselineApprox train_baseline(const GlmModel& model, const Design& design,
                                    const TrainConfig& cfg, LossTrace* trace);

// Checkpoint layout: 8-byte magic "BOEDCKPT", u64 little-endian manifest
// length, JSON manifest (configs, seed, permutations, parameter
// name/shape/offset list), then all parameter values as little-endian f64.
void save_checkpoint(const std::string& path, const FlowParams& params, const EncoderConfig& enc,
                     const FlowConfig& flow, std::uint64_t seed);
FlowParams load_checkpoint(const std::string& path, EncoderConfig* enc, FlowConfig* flow,
                           std::uint64_t* seed);

// CSV with header "step,loss,seconds".
void write_loss_trace(const std::string& path, const LossTrace& trace);

}  // namespace boed
