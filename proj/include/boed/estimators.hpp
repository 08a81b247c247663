#pragma once
// The five expected-information-gain estimators: nested Monte Carlo upper
// and contrastive lower bounds, the posterior (Barber-Agakov) lower bound,
// and the variational nested Monte Carlo upper / contrastive lower bounds.

#include <cstddef>
#include <string>

#include "boed/models.hpp"
#include "boed/posterior.hpp"
#include "boed/rng.hpp"

namespace boed {

enum class EstimatorTag { nmc_upper, nmc_lower, posterior, vnmc_upper, cvnmc_lower };

std::string estimator_tag_name(EstimatorTag tag);

struct EigEstimate {
  EstimatorTag tag;
  double value = 0.0;    // nats
  double std_err = 0.0;  // over outer samples
  std::size_t N = 0;     // outer count
  std::size_t M = 0;     // inner count (0 for posterior)
};

// Nested Monte Carlo (Eq.-(3)-style double loop). The lower variant includes
// the outer draw in the marginal-likelihood average (divide by M+1).
EigEstimate nmc(const GlmModel& model, const Design& design, std::size_t N, std::size_t M,
                bool upper, RngStream& rng);

// Barber-Agakov lower bound: mean of log q(theta|y,d) - log p(theta) over
// joint draws.
EigEstimate posterior_bound(const GlmModel& model, const Design& design, const PosteriorApprox& q,
                            std::size_t N, RngStream& rng);

// VNMC upper bound: q serves as an importance sampler for the marginal
// likelihood. With q = prior and shared seeds this is bit-identical to nmc.
EigEstimate vnmc_upper(const GlmModel& model, const Design& design, const PosteriorApprox& q,
                       std::size_t N, std::size_t M, RngStream& rng);

// Contrastive VNMC lower bound: the outer prior draw joins the importance
// average (divide by M+1).
EigEstimate cvnmc_lower(const GlmModel& model, const Design& design, const PosteriorApprox& q,
                        std::size_t N, std::size_t M, RngStream& rng);

// Total samples drawn: N*M for nested estimators, N for the posterior bound.
std::size_t sample_budget_report(std::size_t N, std::size_t M, EstimatorTag tag);

}  // namespace boed
