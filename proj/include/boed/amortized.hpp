#pragma once
// Design-amortized variational posterior: a set-invariant encoder over
// (design-row, outcome) pairs feeding a conditional normalizing flow with a
// full-rank Gaussian base. The flow operates on unconstrained latent
// coordinates; see GlmModel::to_unconstrained.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "boed/models.hpp"
#include "boed/posterior.hpp"
#include "boed/rng.hpp"
#include "boed/tensor.hpp"

namespace boed {

struct EncoderConfig {
  enum class Kind { attention, residual };
  Kind kind = Kind::attention;
  std::size_t embed_blocks = 2;
  std::size_t embed_width = 64;
  std::size_t token_width = 120;
  std::size_t attn_layers = 2;
  std::size_t attn_heads = 12;
  std::size_t head_dim = 10;  // attn_heads * head_dim == token_width
  std::size_t post_attn_projection = 32;
  double dropout_p = 0.1;
  std::size_t emitter_blocks = 2;
  std::size_t emitter_width = 128;
  // residual kind: per-unit stack replacing attention
  std::size_t residual_blocks = 4;
  std::size_t residual_width = 64;
};

struct FlowConfig {
  enum class Kind { affine_coupling, rq_spline, none };
  Kind kind = Kind::affine_coupling;
  std::size_t n_transforms = 4;
  std::size_t coupling_net_blocks = 2;
  std::size_t coupling_net_width = 128;
  std::size_t base_net_blocks = 2;
  std::size_t base_net_width = 64;
  std::size_t spline_bins = 20;
};

std::string encoder_kind_to_string(EncoderConfig::Kind k);
EncoderConfig::Kind encoder_kind_from_string(const std::string& s);
std::string flow_kind_to_string(FlowConfig::Kind k);
FlowConfig::Kind flow_kind_from_string(const std::string& s);

// Named parameter arrays in a fixed creation order, plus the fixed
// per-transform permutations of the latent coordinates.
struct FlowParams {
  std::vector<std::string> names;
  std::map<std::string, Tensor> arrays;
  std::vector<std::vector<std::size_t>> perms;
  std::size_t latent_dim = 0;
  std::size_t ctx_dim = 0;

  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
};

// He-initialized weights, zero biases; the final base-network and
// conditioner layers start at zero so the flow begins as the identity with
// an N(mu=0, I) base.
FlowParams init_flow_params(const GlmModel& model, const EncoderConfig& enc, const FlowConfig& flow,
                            std::uint64_t seed);

// Supplies parameter tensors (leaves or constants) by name during graph
// construction.
using ParamFn = std::function<Tensor(const std::string&)>;

// Context vectors [B, ctx_dim] for B outcomes observed under one design.
// train enables dropout, drawing masks from drop_rng.
Tensor encode_batch(Graph& g, const ParamFn& p, const EncoderConfig& cfg, const GlmModel& model,
                    const Design& d, const std::vector<Outcome>& ys, bool train,
                    RngStream* drop_rng);

// Pulls unconstrained points xs ([B][latent_dim]) back through the inverse
// transforms, conditioned on the per-row contexts [B, ctx_dim]. Returns the
// base-space points [B, latent_dim]; *logdet (if non-null) receives the
// accumulated forward log-determinants as a [B] tensor.
Tensor flow_invert_batch(Graph& g, const ParamFn& p, const FlowConfig& cfg,
                         const std::vector<std::vector<std::size_t>>& perms, const Tensor& ctx,
                         const std::vector<std::vector<double>>& xs, Tensor* logdet);

// log q(x | context) for unconstrained points xs ([B][latent_dim]) under the
// per-row contexts [B, ctx_dim]; returns a [B] tensor on the graph.
Tensor flow_log_prob_batch(Graph& g, const ParamFn& p, const FlowConfig& cfg,
                           const std::vector<std::vector<std::size_t>>& perms, const Tensor& ctx,
                           const std::vector<std::vector<double>>& xs);

// n draws from q(. | context) for a single context row, with exact log q.
// No gradients; the graph is used eagerly.
void flow_sample(const FlowParams& params, const EncoderConfig& enc, const FlowConfig& cfg,
                 const GlmModel& model, const Design& d, const Outcome& y, std::size_t n,
                 RngStream& rng, std::vector<std::vector<double>>& xs, std::vector<double>& log_q);

// Eval-mode PosteriorApprox over the latent domain (densities include the
// unconstrained-coordinate Jacobian).
class AmortizedPosterior final : public PosteriorApprox {
 public:
  AmortizedPosterior(const GlmModel& model, EncoderConfig enc, FlowConfig flow, FlowParams params);

  void sample(const Design& d, const Outcome& y, std::size_t m, RngStream& rng,
              std::vector<LatentSample>& samples, std::vector<double>& log_q) const override;
  double log_prob(const LatentSample& latent, const Outcome& y, const Design& d) const override;

  const FlowParams& params() const { return params_; }
  const EncoderConfig& encoder_config() const { return enc_; }
  const FlowConfig& flow_config() const { return flow_; }

 private:
  const GlmModel* model_;
  EncoderConfig enc_;
  FlowConfig flow_;
  FlowParams params_;
};

}  // namespace boed
