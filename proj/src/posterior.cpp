#include "boed/posterior.hpp"

#include <cmath>
#include <stdexcept>

#include "boed/linalg.hpp"

namespace boed {

void PriorApprox::sample(const Design&, const Outcome&, std::size_t m, RngStream& rng,
                         std::vector<LatentSample>& samples, std::vector<double>& log_q) const {
  samples = model_->sample_prior(m, rng);
  log_q.resize(m);
  for (std::size_t i = 0; i < m; ++i) log_q[i] = model_->log_prior(samples[i]);
}

double PriorApprox::log_prob(const LatentSample& latent, const Outcome&, const Design&) const {
  return model_->log_prior(latent);
}

namespace {
// shift chosen so a zero raw entry maps to a unit diagonal
const double kDiagShift = std::log(std::expm1(1.0 - 1e-4));
}  // namespace

double LinearBaselineApprox::diag_map(double raw) {
  double x = raw + kDiagShift;
  double sp = x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
  return sp + 1e-4;
}

LinearBaselineApprox::LinearBaselineApprox(std::vector<double> A, std::vector<double> prec_raw,
                                           std::size_t dim, std::size_t n_units)
    : A_(std::move(A)), prec_raw_(std::move(prec_raw)), dim_(dim), n_units_(n_units) {
  if (A_.size() != dim_ * n_units_)
    throw std::invalid_argument("LinearBaselineApprox: A must be dim x n_units");
  if (prec_raw_.size() != dim_ * (dim_ + 1) / 2)
    throw std::invalid_argument("LinearBaselineApprox: wrong precision factor length");
}

std::vector<double> LinearBaselineApprox::precision_factor() const {
  std::vector<double> P(dim_ * dim_, 0.0);
  std::size_t k = 0;
  for (std::size_t i = 0; i < dim_; ++i)
    for (std::size_t j = 0; j <= i; ++j, ++k)
      P[i * dim_ + j] = (i == j) ? diag_map(prec_raw_[k]) : prec_raw_[k];
  return P;
}

std::vector<double> LinearBaselineApprox::mean(const Outcome& y) const {
  if (y.n_units != n_units_ || y.y_cols != 1)
    throw std::invalid_argument("LinearBaselineApprox: outcome must be scalar per unit with " +
                                std::to_string(n_units_) + " units");
  return linalg::matvec(A_, y.y, dim_, n_units_);
}

double LinearBaselineApprox::log_prob(const LatentSample& latent, const Outcome& y,
                                      const Design&) const {
  if (latent.theta.size() != dim_)
    throw std::invalid_argument("LinearBaselineApprox: latent dimension mismatch");
  std::vector<double> mu = mean(y);
  std::vector<double> P = precision_factor();
  // log N(theta; mu, (PP^T)^{-1}) = -d/2 log(2pi) + sum log diag(P) - |P^T r|^2 / 2
  double logdiag = 0;
  for (std::size_t i = 0; i < dim_; ++i) logdiag += std::log(P[i * dim_ + i]);
  std::vector<double> r(dim_);
  for (std::size_t i = 0; i < dim_; ++i) r[i] = latent.theta[i] - mu[i];
  double quad = 0;
  for (std::size_t j = 0; j < dim_; ++j) {
    double v = 0;
    for (std::size_t i = j; i < dim_; ++i) v += P[i * dim_ + j] * r[i];
    quad += v * v;
  }
  constexpr double log2pi = 1.8378770664093454835606594728112;
  return -0.5 * static_cast<double>(dim_) * log2pi + logdiag - 0.5 * quad;
}

void LinearBaselineApprox::sample(const Design& d, const Outcome& y, std::size_t m, RngStream& rng,
                                  std::vector<LatentSample>& samples,
                                  std::vector<double>& log_q) const {
  std::vector<double> mu = mean(y);
  std::vector<double> P = precision_factor();
  samples.assign(m, {});
  log_q.resize(m);
  std::vector<double> z(dim_);
  for (std::size_t s = 0; s < m; ++s) {
    for (auto& v : z) v = rng.normal();
    // theta = mu + P^{-T} z  (back substitution on the upper factor P^T)
    std::vector<double> x(dim_);
    for (std::size_t ii = dim_; ii-- > 0;) {
      double acc = z[ii];
      for (std::size_t j = ii + 1; j < dim_; ++j) acc -= P[j * dim_ + ii] * x[j];
      x[ii] = acc / P[ii * dim_ + ii];
    }
    samples[s].theta.resize(dim_);
    for (std::size_t i = 0; i < dim_; ++i) samples[s].theta[i] = mu[i] + x[i];
    samples[s].has_aux = false;
    double logdiag = 0, quad = 0;
    for (std::size_t i = 0; i < dim_; ++i) logdiag += std::log(P[i * dim_ + i]);
    for (double v : z) quad += v * v;
    constexpr double log2pi = 1.8378770664093454835606594728112;
    log_q[s] = -0.5 * static_cast<double>(dim_) * log2pi + logdiag - 0.5 * quad;
    (void)d;
  }
}

std::vector<double> LinearBaselineApprox::covariance() const {
  // Sigma = (P P^T)^{-1}: solve P P^T X = I column by column.
  std::vector<double> P = precision_factor();
  std::vector<double> cov(dim_ * dim_);
  for (std::size_t c = 0; c < dim_; ++c) {
    std::vector<double> e(dim_, 0.0);
    e[c] = 1.0;
    std::vector<double> u = linalg::solve_lower(P, e, dim_);
    std::vector<double> x = linalg::solve_upper_t(P, u, dim_);
    for (std::size_t i = 0; i < dim_; ++i) cov[i * dim_ + c] = x[i];
  }
  return cov;
}

}  // namespace boed
