#pragma once
// Ground truth for the linear model (closed form) and the linear model with
// unknown observation noise (conditional conjugacy plus one-dimensional
// quadrature over the noise scale), plus the exact conjugate posterior used
// as a reference PosteriorApprox and the Normal-Inverse-Gamma update.

#include <cstddef>
#include <vector>

#include "boed/estimators.hpp"
#include "boed/models.hpp"
#include "boed/posterior.hpp"

namespace boed {

// Exact EIG of the linear-Gaussian model:
//   0.5 * (log det Sigma_p - log det Sigma_post),
//   Sigma_post = (Sigma_p^{-1} + D^T D / sigma^2)^{-1}.
double linear_gaussian_eig(const Design& design, const std::vector<double>& prior_cov,
                           double sigma);

// Exact posterior N(mu_post, Sigma_post) of the linear model, usable as a
// PosteriorApprox; moments recomputed per (y, d).
class ConjugateLinearPosterior final : public PosteriorApprox {
 public:
  ConjugateLinearPosterior(std::vector<double> prior_mean, std::vector<double> prior_cov,
                           double sigma);

  void sample(const Design& d, const Outcome& y, std::size_t m, RngStream& rng,
              std::vector<LatentSample>& samples, std::vector<double>& log_q) const override;
  double log_prob(const LatentSample& latent, const Outcome& y, const Design& d) const override;

  // Posterior mean and covariance for a given (d, y).
  void moments(const Design& d, const Outcome& y, std::vector<double>& mean,
               std::vector<double>& cov) const;

 private:
  // Posterior precision Cholesky factor and mean.
  void update(const Design& d, const Outcome& y, std::vector<double>& prec_chol,
              std::vector<double>& mean) const;

  std::vector<double> prior_mean_;
  std::vector<double> prior_cov_;
  std::vector<double> prior_prec_;  // Sigma_p^{-1}
  double sigma_;
  std::size_t dim_;
};

// Normal-Inverse-Gamma conjugate update for the model
//   sigma^2 ~ InverseGamma(a, b),  theta | sigma^2 ~ N(mu, sigma^2 V),
//   y | theta, sigma^2 ~ N(D theta, sigma^2 I).
struct NigPosterior {
  std::vector<double> mean;       // mu_n
  std::vector<double> cov_scale;  // V_n (posterior covariance is sigma^2 V_n)
  double a_post = 0.0;
  double b_post = 0.0;
  std::size_t dim = 0;
};

NigPosterior nig_posterior(const Design& design, const std::vector<double>& y,
                           const std::vector<double>& mu_p, const std::vector<double>& V_p,
                           double a_p, double b_p);

// Joint log-density of (theta, sigma2) under a NIG law.
double nig_log_density(const std::vector<double>& theta, double sigma2,
                       const std::vector<double>& mu, const std::vector<double>& V,
                       double a, double b);

// Monte Carlo ground truth for the normal-unknown GLM (independent prior
// theta ~ N(mu_p, Sigma_p), sd sigma ~ InverseGamma(a_p, b_p)): averages
// log p(theta, sigma | y, d) - log p(theta, sigma) over joint draws, with
// p(theta | sigma, y, d) exact by conjugacy and p(sigma | y, d) computed by
// quadrature over log sigma.
EigEstimate linear_unknown_eig_mc(const GlmModel& model, const Design& design, std::size_t N,
                                  RngStream& rng);

}  // namespace boed
