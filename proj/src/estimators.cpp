#include "boed/estimators.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

namespace boed {

namespace {

// term = (l0 - max_w) - log(sum exp(w - max_w)) + log(count). Written this
// way so that a likelihood independent of theta gives exactly 0.
double nested_term(double l0, const std::vector<double>& w, std::size_t n_index) {
  double mx = w[0];
  for (double v : w) mx = std::max(mx, v);
  if (!std::isfinite(mx))
    throw std::runtime_error("nested estimator: importance weights are all non-finite at outer sample " +
                             std::to_string(n_index));
  double s = 0;
  for (double v : w) s += std::exp(v - mx);
  return (l0 - mx) - std::log(s) + std::log(static_cast<double>(w.size()));
}

EigEstimate summarize(EstimatorTag tag, const std::vector<double>& terms, std::size_t N, std::size_t M) {
  double mean = 0;
  for (double t : terms) mean += t;
  mean /= static_cast<double>(terms.size());
  double var = 0;
  for (double t : terms) var += (t - mean) * (t - mean);
  double se = terms.size() > 1
                  ? std::sqrt(var / static_cast<double>(terms.size() - 1) /
                              static_cast<double>(terms.size()))
                  : 0.0;
  return EigEstimate{tag, mean, se, N, M};
}

void check_finite(double v, const char* what, std::size_t n) {
  if (!std::isfinite(v))
    throw std::runtime_error(std::string(what) + " is non-finite at outer sample " + std::to_string(n));
}

}  // namespace

std::string estimator_tag_name(EstimatorTag tag) {
  switch (tag) {
    case EstimatorTag::nmc_upper: return "nmc-upper";
    case EstimatorTag::nmc_lower: return "nmc-lower";
    case EstimatorTag::posterior: return "posterior";
    case EstimatorTag::vnmc_upper: return "vnmc-upper";
    case EstimatorTag::cvnmc_lower: return "cvnmc-lower";
  }
  return "?";
}

EigEstimate nmc(const GlmModel& model, const Design& design, std::size_t N, std::size_t M,
                bool upper, RngStream& rng) {
  if (N < 1 || M < 1) throw std::invalid_argument("nmc: N and M must be >= 1");
  std::vector<double> terms(N);
  for (std::size_t n = 0; n < N; ++n) {
    RngStream sn = rng.fork(n);
    LatentSample theta0 = model.sample_prior(1, sn)[0];
    Outcome y = model.simulate(design, theta0, sn);
    double l0 = model.log_likelihood(design, theta0, y);
    check_finite(l0, "nmc: outer log-likelihood", n);
    std::vector<LatentSample> inner = model.sample_prior(M, sn);
    std::vector<double> w;
    w.reserve(M + 1);
    if (!upper) w.push_back(l0);
    for (const auto& th : inner) w.push_back(model.log_likelihood(design, th, y));
    terms[n] = nested_term(l0, w, n);
  }
  return summarize(upper ? EstimatorTag::nmc_upper : EstimatorTag::nmc_lower, terms, N, M);
}

EigEstimate posterior_bound(const GlmModel& model, const Design& design, const PosteriorApprox& q,
                            std::size_t N, RngStream& rng) {
  if (N < 1) throw std::invalid_argument("posterior_bound: N must be >= 1");
  std::vector<double> terms(N);
  for (std::size_t n = 0; n < N; ++n) {
    RngStream sn = rng.fork(n);
    LatentSample theta = model.sample_prior(1, sn)[0];
    Outcome y = model.simulate(design, theta, sn);
    double lq = q.log_prob(theta, y, design);
    check_finite(lq, "posterior_bound: log q", n);
    terms[n] = lq - model.log_prior(theta);
  }
  return summarize(EstimatorTag::posterior, terms, N, 0);
}

namespace {

EigEstimate vnmc_impl(const GlmModel& model, const Design& design, const PosteriorApprox& q,
                      std::size_t N, std::size_t M, bool upper, RngStream& rng) {
  if (N < 1 || M < 1) throw std::invalid_argument("vnmc: N and M must be >= 1");
  std::vector<double> terms(N);
  std::vector<LatentSample> inner;
  std::vector<double> log_q;
  for (std::size_t n = 0; n < N; ++n) {
    RngStream sn = rng.fork(n);
    LatentSample theta0 = model.sample_prior(1, sn)[0];
    Outcome y = model.simulate(design, theta0, sn);
    double l0 = model.log_likelihood(design, theta0, y);
    check_finite(l0, "vnmc: outer log-likelihood", n);
    q.sample(design, y, M, sn, inner, log_q);
    std::vector<double> w;
    w.reserve(M + 1);
    if (!upper) {
      double lq0 = q.log_prob(theta0, y, design);
      if (lq0 == -std::numeric_limits<double>::infinity())
        throw std::runtime_error("cvnmc: q assigns zero density to the outer draw at sample " +
                                 std::to_string(n));
      w.push_back(l0 + (model.log_prior(theta0) - lq0));
    }
    for (std::size_t m = 0; m < M; ++m) {
      if (log_q[m] == -std::numeric_limits<double>::infinity())
        throw std::runtime_error("vnmc: q assigns zero density to its own draw at sample " +
                                 std::to_string(n));
      double ll = model.log_likelihood(design, inner[m], y);
      w.push_back(ll + (model.log_prior(inner[m]) - log_q[m]));
    }
    terms[n] = nested_term(l0, w, n);
  }
  return summarize(upper ? EstimatorTag::vnmc_upper : EstimatorTag::cvnmc_lower, terms, N, M);
}

}  // namespace

EigEstimate vnmc_upper(const GlmModel& model, const Design& design, const PosteriorApprox& q,
                       std::size_t N, std::size_t M, RngStream& rng) {
  return vnmc_impl(model, design, q, N, M, true, rng);
}

EigEstimate cvnmc_lower(const GlmModel& model, const Design& design, const PosteriorApprox& q,
                        std::size_t N, std::size_t M, RngStream& rng) {
  return vnmc_impl(model, design, q, N, M, false, rng);
}

std::size_t sample_budget_report(std::size_t N, std::size_t M, EstimatorTag tag) {
  return tag == EstimatorTag::posterior ? N : N * M;
}

}  // namespace boed
