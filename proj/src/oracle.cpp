#include "boed/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "boed/linalg.hpp"

namespace boed {

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;

// D^T D with per-entry contributions summed in sorted order, so the result
// is invariant under row permutations of D.
std::vector<double> gram_canonical(const Design& d) {
  const std::size_t p = d.n_cols;
  std::vector<double> g(p * p, 0.0);
  std::vector<double> terms(d.n_units);
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j <= i; ++j) {
      for (std::size_t s = 0; s < d.n_units; ++s) terms[s] = d(s, i) * d(s, j);
      std::sort(terms.begin(), terms.end());
      double acc = 0;
      for (double t : terms) acc += t;
      g[i * p + j] = g[j * p + i] = acc;
    }
  return g;
}

std::vector<double> inverse_spd(const std::vector<double>& a, std::size_t n) {
  std::vector<double> L = linalg::cholesky(a, n);
  std::vector<double> inv(n * n);
  for (std::size_t c = 0; c < n; ++c) {
    std::vector<double> e(n, 0.0);
    e[c] = 1.0;
    auto u = linalg::solve_lower(L, e, n);
    auto x = linalg::solve_upper_t(L, u, n);
    for (std::size_t i = 0; i < n; ++i) inv[i * n + c] = x[i];
  }
  return inv;
}

}  // namespace

double linear_gaussian_eig(const Design& design, const std::vector<double>& prior_cov,
                           double sigma) {
  if (sigma <= 0.0) throw std::invalid_argument("linear_gaussian_eig: sigma must be > 0");
  const std::size_t p = design.n_cols;
  if (prior_cov.size() != p * p)
    throw std::invalid_argument("linear_gaussian_eig: prior covariance dimension mismatch");
  // 0.5 * log det(I + L^T (D^T D / sigma^2) L), Sigma_p = L L^T; equals
  // 0.5 * (log det Sigma_p - log det Sigma_post) and is exactly 0 at D = 0.
  std::vector<double> L = linalg::cholesky(prior_cov, p);
  std::vector<double> g = gram_canonical(design);
  const double inv_s2 = 1.0 / (sigma * sigma);
  // M = I + L^T G L / sigma^2
  std::vector<double> gl(p * p, 0.0);
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < p; ++j) {
      double s = 0;
      for (std::size_t k = j; k < p; ++k) s += g[i * p + k] * L[k * p + j];
      gl[i * p + j] = s;
    }
  std::vector<double> m(p * p, 0.0);
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < p; ++j) {
      double s = (i == j) ? 1.0 : 0.0;
      for (std::size_t k = i; k < p; ++k) s += L[k * p + i] * gl[k * p + j] * inv_s2;
      m[i * p + j] = s;
    }
  std::vector<double> Lm = linalg::cholesky(m, p);
  return 0.5 * linalg::log_det_from_cholesky(Lm, p);
}

// ---------------------------------------------------------------------------
// Conjugate linear posterior

ConjugateLinearPosterior::ConjugateLinearPosterior(std::vector<double> prior_mean,
                                                   std::vector<double> prior_cov, double sigma)
    : prior_mean_(std::move(prior_mean)), prior_cov_(std::move(prior_cov)), sigma_(sigma) {
  if (sigma_ <= 0.0) throw std::invalid_argument("ConjugateLinearPosterior: sigma must be > 0");
  dim_ = prior_mean_.size();
  if (prior_cov_.size() != dim_ * dim_)
    throw std::invalid_argument("ConjugateLinearPosterior: covariance dimension mismatch");
  prior_prec_ = inverse_spd(prior_cov_, dim_);
}

void ConjugateLinearPosterior::update(const Design& d, const Outcome& y,
                                      std::vector<double>& prec_chol,
                                      std::vector<double>& mean) const {
  if (d.n_cols != dim_) throw std::invalid_argument("ConjugateLinearPosterior: design dimension mismatch");
  const double inv_s2 = 1.0 / (sigma_ * sigma_);
  std::vector<double> prec = prior_prec_;
  for (std::size_t i = 0; i < dim_; ++i)
    for (std::size_t j = 0; j < dim_; ++j) {
      double s = 0;
      for (std::size_t u = 0; u < d.n_units; ++u) s += d(u, i) * d(u, j);
      prec[i * dim_ + j] += s * inv_s2;
    }
  std::vector<double> rhs = linalg::matvec(prior_prec_, prior_mean_, dim_, dim_);
  for (std::size_t i = 0; i < dim_; ++i) {
    double s = 0;
    for (std::size_t u = 0; u < d.n_units; ++u) s += d(u, i) * y.y[u];
    rhs[i] += s * inv_s2;
  }
  prec_chol = linalg::cholesky(prec, dim_);
  auto u = linalg::solve_lower(prec_chol, rhs, dim_);
  mean = linalg::solve_upper_t(prec_chol, u, dim_);
}

double ConjugateLinearPosterior::log_prob(const LatentSample& latent, const Outcome& y,
                                          const Design& d) const {
  std::vector<double> L, mu;
  update(d, y, L, mu);
  // log N(theta; mu, Prec^{-1}) with Prec = L L^T
  std::vector<double> r(dim_);
  for (std::size_t i = 0; i < dim_; ++i) r[i] = latent.theta[i] - mu[i];
  double quad = 0;
  for (std::size_t j = 0; j < dim_; ++j) {
    double v = 0;
    for (std::size_t i = j; i < dim_; ++i) v += L[i * dim_ + j] * r[i];
    quad += v * v;
  }
  return -0.5 * static_cast<double>(dim_) * kLog2Pi + 0.5 * linalg::log_det_from_cholesky(L, dim_) -
         0.5 * quad;
}

void ConjugateLinearPosterior::sample(const Design& d, const Outcome& y, std::size_t m,
                                      RngStream& rng, std::vector<LatentSample>& samples,
                                      std::vector<double>& log_q) const {
  std::vector<double> L, mu;
  update(d, y, L, mu);
  const double half_logdet = 0.5 * linalg::log_det_from_cholesky(L, dim_);
  samples.assign(m, {});
  log_q.resize(m);
  std::vector<double> z(dim_), x(dim_);
  for (std::size_t s = 0; s < m; ++s) {
    for (auto& v : z) v = rng.normal();
    // theta = mu + L^{-T} z
    for (std::size_t ii = dim_; ii-- > 0;) {
      double acc = z[ii];
      for (std::size_t j = ii + 1; j < dim_; ++j) acc -= L[j * dim_ + ii] * x[j];
      x[ii] = acc / L[ii * dim_ + ii];
    }
    samples[s].theta.resize(dim_);
    for (std::size_t i = 0; i < dim_; ++i) samples[s].theta[i] = mu[i] + x[i];
    double quad = 0;
    for (double v : z) quad += v * v;
    log_q[s] = -0.5 * static_cast<double>(dim_) * kLog2Pi + half_logdet - 0.5 * quad;
  }
}

void ConjugateLinearPosterior::moments(const Design& d, const Outcome& y, std::vector<double>& mean,
                                       std::vector<double>& cov) const {
  std::vector<double> L;
  update(d, y, L, mean);
  cov.assign(dim_ * dim_, 0.0);
  for (std::size_t c = 0; c < dim_; ++c) {
    std::vector<double> e(dim_, 0.0);
    e[c] = 1.0;
    auto u = linalg::solve_lower(L, e, dim_);
    auto x = linalg::solve_upper_t(L, u, dim_);
    for (std::size_t i = 0; i < dim_; ++i) cov[i * dim_ + c] = x[i];
  }
}

// ---------------------------------------------------------------------------
// Normal-Inverse-Gamma update

NigPosterior nig_posterior(const Design& design, const std::vector<double>& y,
                           const std::vector<double>& mu_p, const std::vector<double>& V_p,
                           double a_p, double b_p) {
  if (a_p <= 0.0 || b_p <= 0.0) throw std::invalid_argument("nig_posterior: invalid prior");
  const std::size_t p = design.n_cols;
  if (mu_p.size() != p || V_p.size() != p * p)
    throw std::invalid_argument("nig_posterior: prior dimension mismatch");
  if (y.size() != design.n_units) throw std::invalid_argument("nig_posterior: outcome length mismatch");

  std::vector<double> v_inv = inverse_spd(V_p, p);
  std::vector<double> prec = v_inv;  // V_n^{-1} = V_p^{-1} + D^T D
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < p; ++j) {
      double s = 0;
      for (std::size_t u = 0; u < design.n_units; ++u) s += design(u, i) * design(u, j);
      prec[i * p + j] += s;
    }
  std::vector<double> rhs = linalg::matvec(v_inv, mu_p, p, p);
  for (std::size_t i = 0; i < p; ++i) {
    double s = 0;
    for (std::size_t u = 0; u < design.n_units; ++u) s += design(u, i) * y[u];
    rhs[i] += s;
  }
  std::vector<double> L = linalg::cholesky(prec, p);
  auto u = linalg::solve_lower(L, rhs, p);
  NigPosterior post;
  post.dim = p;
  post.mean = linalg::solve_upper_t(L, u, p);
  post.cov_scale.assign(p * p, 0.0);
  for (std::size_t c = 0; c < p; ++c) {
    std::vector<double> e(p, 0.0);
    e[c] = 1.0;
    auto w = linalg::solve_lower(L, e, p);
    auto x = linalg::solve_upper_t(L, w, p);
    for (std::size_t i = 0; i < p; ++i) post.cov_scale[i * p + c] = x[i];
  }
  post.a_post = a_p + 0.5 * static_cast<double>(design.n_units);
  double yy = 0;
  for (double v : y) yy += v * v;
  double mvm_p = 0, mvm_n = 0;
  auto vp = linalg::matvec(v_inv, mu_p, p, p);
  for (std::size_t i = 0; i < p; ++i) mvm_p += mu_p[i] * vp[i];
  auto vn = linalg::matvec(prec, post.mean, p, p);
  for (std::size_t i = 0; i < p; ++i) mvm_n += post.mean[i] * vn[i];
  post.b_post = b_p + 0.5 * (yy + mvm_p - mvm_n);
  return post;
}

double nig_log_density(const std::vector<double>& theta, double sigma2,
                       const std::vector<double>& mu, const std::vector<double>& V,
                       double a, double b) {
  if (sigma2 <= 0.0) throw std::invalid_argument("nig_log_density: sigma2 must be > 0");
  const std::size_t p = mu.size();
  std::vector<double> L = linalg::cholesky(V, p);
  std::vector<double> r(p);
  for (std::size_t i = 0; i < p; ++i) r[i] = theta[i] - mu[i];
  auto z = linalg::solve_lower(L, r, p);
  double quad = 0;
  for (double v : z) quad += v * v;
  double lg = -0.5 * static_cast<double>(p) * (kLog2Pi + std::log(sigma2)) -
              0.5 * linalg::log_det_from_cholesky(L, p) - 0.5 * quad / sigma2;
  double lig = a * std::log(b) - std::lgamma(a) - (a + 1.0) * std::log(sigma2) - b / sigma2;
  return lg + lig;
}

// ---------------------------------------------------------------------------
// Linear-unknown ground truth

namespace {

// log N(y; mean_y, B + sigma^2 I) for the precomputed B = D Sigma_p D^T.
double marginal_loglik_given_sigma(const std::vector<double>& y, const std::vector<double>& mean_y,
                                   const std::vector<double>& B, std::size_t n, double sigma) {
  std::vector<double> cov = B;
  for (std::size_t i = 0; i < n; ++i) cov[i * n + i] += sigma * sigma;
  std::vector<double> L = linalg::cholesky(cov, n);
  return linalg::mvn_log_density(y, mean_y, L, n);
}

}  // namespace

EigEstimate linear_unknown_eig_mc(const GlmModel& model, const Design& design, std::size_t N,
                                  RngStream& rng) {
  if (model.family() != Family::normal_unknown)
    throw std::invalid_argument("linear_unknown_eig_mc: model must be normal-unknown");
  if (N < 1) throw std::invalid_argument("linear_unknown_eig_mc: N must be >= 1");
  const std::size_t p = design.n_cols;
  const std::size_t ne = design.n_units;
  const auto& mu_p = model.prior_mean();
  const auto& cov_p = model.prior_cov();
  const double a_p = model.options().a_p, b_p = model.options().b_p;

  // Precompute D mu_p and B = D Sigma_p D^T.
  std::vector<double> mean_y(ne, 0.0);
  for (std::size_t u = 0; u < ne; ++u)
    for (std::size_t j = 0; j < p; ++j) mean_y[u] += design(u, j) * mu_p[j];
  std::vector<double> B(ne * ne, 0.0);
  std::vector<double> tmp(ne * p, 0.0);  // D Sigma_p
  for (std::size_t u = 0; u < ne; ++u)
    for (std::size_t j = 0; j < p; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < p; ++k) s += design(u, k) * cov_p[k * p + j];
      tmp[u * p + j] = s;
    }
  for (std::size_t u = 0; u < ne; ++u)
    for (std::size_t v = 0; v < ne; ++v) {
      double s = 0;
      for (std::size_t j = 0; j < p; ++j) s += tmp[u * p + j] * design(v, j);
      B[u * ne + v] = s;
    }

  // Quadrature grid over u = log sigma (Simpson), fixed across outer draws.
  const std::size_t n_grid = 1200;
  const double lo = -8.0, hi = 5.0;
  const double h = (hi - lo) / static_cast<double>(n_grid);
  std::vector<double> grid_u(n_grid + 1), grid_logw(n_grid + 1), grid_logprior(n_grid + 1);
  for (std::size_t i = 0; i <= n_grid; ++i) {
    grid_u[i] = lo + h * static_cast<double>(i);
    double simpson = (i == 0 || i == n_grid) ? 1.0 : (i % 2 == 1 ? 4.0 : 2.0);
    grid_logw[i] = std::log(simpson * h / 3.0);
    double sigma = std::exp(grid_u[i]);
    // prior density of sigma times the d sigma / d u jacobian
    grid_logprior[i] = linalg::inverse_gamma_log_density(sigma, a_p, b_p) + grid_u[i];
  }

  std::vector<double> terms(N);
  std::vector<double> loglik_grid(n_grid + 1);
  for (std::size_t n = 0; n < N; ++n) {
    RngStream sn = rng.fork(n);
    LatentSample latent = model.sample_prior(1, sn)[0];
    Outcome y = model.simulate(design, latent, sn);

    // p(theta | sigma, y, d): exact Gaussian conjugate update at sigma = aux.
    ConjugateLinearPosterior cond(mu_p, cov_p, latent.aux);
    double log_post_theta = cond.log_prob(latent, y, design);

    // p(sigma | y, d) = p(y | sigma, d) p(sigma) / p(y | d).
    double loglik_at_aux = marginal_loglik_given_sigma(y.y, mean_y, B, ne, latent.aux);
    for (std::size_t i = 0; i <= n_grid; ++i)
      loglik_grid[i] = marginal_loglik_given_sigma(y.y, mean_y, B, ne, std::exp(grid_u[i])) +
                       grid_logprior[i] + grid_logw[i];
    double mx = loglik_grid[0];
    for (double v : loglik_grid) mx = std::max(mx, v);
    double s = 0;
    for (double v : loglik_grid) s += std::exp(v - mx);
    double log_evidence = mx + std::log(s);
    double log_post_sigma =
        loglik_at_aux + linalg::inverse_gamma_log_density(latent.aux, a_p, b_p) - log_evidence;

    double log_prior = model.log_prior(latent);
    terms[n] = log_post_theta + log_post_sigma - log_prior;
  }
  double mean = 0;
  for (double t : terms) mean += t;
  mean /= static_cast<double>(N);
  double var = 0;
  for (double t : terms) var += (t - mean) * (t - mean);
  double se = N > 1 ? std::sqrt(var / double(N - 1) / double(N)) : 0.0;
  return EigEstimate{EstimatorTag::posterior, mean, se, N, 0};
}

}  // namespace boed
