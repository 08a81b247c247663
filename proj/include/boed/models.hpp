#pragma once
// The six generalized linear models used throughout: prior sampling,
// outcome simulation, exact log-densities, and the random-design generator.

#include <cstddef>
#include <string>
#include <vector>

#include "boed/rng.hpp"

namespace boed {

enum class Family { normal, normal_unknown, logistic, binomial, categorical, multinomial };

Family family_from_string(const std::string& s);
std::string family_to_string(Family f);

struct Design {
  std::size_t n_units = 0;
  std::size_t n_cols = 0;  // N_p + 1
  std::vector<double> m;   // row-major, n_units x n_cols

  double operator()(std::size_t i, std::size_t j) const { return m[i * n_cols + j]; }
  double& operator()(std::size_t i, std::size_t j) { return m[i * n_cols + j]; }
};

struct LatentSample {
  std::vector<double> theta;
  double aux = 0.0;      // observation noise sd, normal_unknown only
  bool has_aux = false;
};

struct Outcome {
  std::size_t n_units = 0;
  std::size_t y_cols = 1;  // K for multinomial, 1 otherwise
  std::vector<double> y;   // row-major, n_units x y_cols
};

struct GlmOptions {
  double sigma = 1.0;        // normal
  double a_p = 3.5;          // normal_unknown noise prior shape
  double b_p = 3.5;          // normal_unknown noise prior scale
  std::size_t n_trials = 10; // binomial / multinomial
  std::size_t n_classes = 3; // categorical / multinomial
};

class GlmModel {
 public:
  // prior_cov is the full (param_dim x param_dim) covariance, row-major.
  GlmModel(Family family, std::size_t n_predictors, std::vector<double> prior_mean,
           std::vector<double> prior_cov, GlmOptions opts = {});

  // Zero mean, var * I prior.
  static GlmModel make(Family family, std::size_t n_predictors, double prior_var,
                       GlmOptions opts = {});

  Family family() const { return family_; }
  std::size_t n_predictors() const { return n_predictors_; }
  std::size_t design_cols() const { return n_predictors_ + 1; }
  // Dimension of theta: (N_p+1), or (N_p+1)*K for class-valued families.
  std::size_t param_dim() const { return param_dim_; }
  // Dimension the flow operates on (adds log sigma for normal_unknown).
  std::size_t flow_dim() const { return param_dim_ + (family_ == Family::normal_unknown ? 1 : 0); }
  // Stored outcome columns per unit.
  std::size_t y_cols() const { return family_ == Family::multinomial ? opts_.n_classes : 1; }
  // Encoded outcome columns per unit (categorical becomes one-hot).
  std::size_t y_encoding_cols() const {
    return (family_ == Family::categorical || family_ == Family::multinomial) ? opts_.n_classes : 1;
  }
  const GlmOptions& options() const { return opts_; }
  const std::vector<double>& prior_mean() const { return prior_mean_; }
  const std::vector<double>& prior_cov() const { return prior_cov_; }
  const std::vector<double>& prior_chol() const { return prior_chol_; }

  std::vector<LatentSample> sample_prior(std::size_t n, RngStream& rng) const;
  Outcome simulate(const Design& d, const LatentSample& latent, RngStream& rng) const;
  double log_likelihood(const Design& d, const LatentSample& latent, const Outcome& y) const;
  double log_prior(const LatentSample& latent) const;

  // Unconstrained coordinates the flow operates on: [theta ; log sigma].
  std::vector<double> to_unconstrained(const LatentSample& latent) const;
  LatentSample from_unconstrained(const std::vector<double>& x) const;
  // log |d latent / d unconstrained| at the given unconstrained point
  // (log sigma for normal_unknown, 0 otherwise).
  double unconstrained_log_jacobian(const std::vector<double>& x) const;

  // Flat per-unit encoding for the set encoder: n_units x y_encoding_cols.
  std::vector<double> encode_outcome(const Outcome& y) const;

  // Per-unit linear predictors (n_units x n_classes for class families,
  // n_units otherwise).
  std::vector<double> linear_predictor(const Design& d, const LatentSample& latent) const;

 private:
  Family family_;
  std::size_t n_predictors_;
  std::size_t param_dim_;
  std::vector<double> prior_mean_;
  std::vector<double> prior_cov_;
  std::vector<double> prior_chol_;
  GlmOptions opts_;
};

// n_designs random designs with i.i.d. standard normal entries, including
// the intercept column. Shape n_units x (n_predictors + 1).
std::vector<Design> sample_designs(std::size_t n_designs, std::size_t n_units,
                                   std::size_t n_predictors, RngStream& rng);

}  // namespace boed
