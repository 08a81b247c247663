#pragma once
// Abstract conditional posterior approximation q(theta | y, d) and the two
// non-neural implementations: the prior itself and the per-design linear
// baseline q = N(Ay, Sigma).

#include <vector>

#include "boed/models.hpp"
#include "boed/rng.hpp"

namespace boed {

class PosteriorApprox {
 public:
  virtual ~PosteriorApprox() = default;

  // Draw m samples from q(. | y, d) together with their log-densities.
  virtual void sample(const Design& d, const Outcome& y, std::size_t m, RngStream& rng,
                      std::vector<LatentSample>& samples, std::vector<double>& log_q) const = 0;
  virtual double log_prob(const LatentSample& latent, const Outcome& y, const Design& d) const = 0;
};

// q(theta | y, d) = p(theta): draws and densities delegate to the model's
// prior, consuming the rng stream exactly like the nested Monte Carlo
// estimator's inner loop.
class PriorApprox final : public PosteriorApprox {
 public:
  explicit PriorApprox(const GlmModel& model) : model_(&model) {}

  void sample(const Design& d, const Outcome& y, std::size_t m, RngStream& rng,
              std::vector<LatentSample>& samples, std::vector<double>& log_q) const override;
  double log_prob(const LatentSample& latent, const Outcome& y, const Design& d) const override;

 private:
  const GlmModel* model_;
};

// The non-amortized baseline q = N(Ay, Sigma) for scalar-response families.
// A maps the outcome vector (length N_E) to the latent mean; Sigma is
// parameterized through an unconstrained lower-triangular precision factor
// P with Sigma^{-1} = P P^T, so the log-density needs no solves.
class LinearBaselineApprox final : public PosteriorApprox {
 public:
  // prec_raw holds dim*(dim+1)/2 unconstrained entries, row-major lower
  // triangle; diagonal entries pass through softplus(x + shift) + 1e-4.
  LinearBaselineApprox(std::vector<double> A, std::vector<double> prec_raw,
                       std::size_t dim, std::size_t n_units);

  void sample(const Design& d, const Outcome& y, std::size_t m, RngStream& rng,
              std::vector<LatentSample>& samples, std::vector<double>& log_q) const override;
  double log_prob(const LatentSample& latent, const Outcome& y, const Design& d) const override;

  std::vector<double> mean(const Outcome& y) const;  // A y
  // Dense covariance (P P^T)^{-1}, for reporting.
  std::vector<double> covariance() const;

  static double diag_map(double raw);

  const std::vector<double>& A() const { return A_; }

 private:
  std::vector<double> precision_factor() const;  // dense lower-triangular P

  std::vector<double> A_;         // dim x n_units
  std::vector<double> prec_raw_;  // packed lower triangle
  std::size_t dim_;
  std::size_t n_units_;
};

}  // namespace boed
