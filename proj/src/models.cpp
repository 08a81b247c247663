#include "boed/models.hpp"

#include <cmath>
#include <stdexcept>

#include "boed/linalg.hpp"

namespace boed {

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;

double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

// log-sum-exp over a contiguous range with max subtraction
double logsumexp(const double* x, std::size_t n) {
  double mx = x[0];
  for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, x[i]);
  double s = 0;
  for (std::size_t i = 0; i < n; ++i) s += std::exp(x[i] - mx);
  return mx + std::log(s);
}

double log_binomial_coeff(std::size_t n, std::size_t k) {
  return std::lgamma(double(n) + 1.0) - std::lgamma(double(k) + 1.0) - std::lgamma(double(n - k) + 1.0);
}

}  // namespace

Family family_from_string(const std::string& s) {
  if (s == "normal") return Family::normal;
  if (s == "normal-unknown" || s == "normal_unknown") return Family::normal_unknown;
  if (s == "logistic") return Family::logistic;
  if (s == "binomial") return Family::binomial;
  if (s == "categorical") return Family::categorical;
  if (s == "multinomial") return Family::multinomial;
  throw std::invalid_argument("unknown GLM family '" + s + "'");
}

std::string family_to_string(Family f) {
  switch (f) {
    case Family::normal: return "normal";
    case Family::normal_unknown: return "normal-unknown";
    case Family::logistic: return "logistic";
    case Family::binomial: return "binomial";
    case Family::categorical: return "categorical";
    case Family::multinomial: return "multinomial";
  }
  return "?";
}

GlmModel::GlmModel(Family family, std::size_t n_predictors, std::vector<double> prior_mean,
                   std::vector<double> prior_cov, GlmOptions opts)
    : family_(family), n_predictors_(n_predictors), opts_(opts) {
  bool class_family = family == Family::categorical || family == Family::multinomial;
  if (class_family && opts_.n_classes < 2)
    throw std::invalid_argument("GlmModel: n_classes must be >= 2");
  param_dim_ = (n_predictors + 1) * (class_family ? opts_.n_classes : 1);
  if (prior_mean.size() != param_dim_)
    throw std::invalid_argument("GlmModel: prior mean has wrong dimension");
  if (prior_cov.size() != param_dim_ * param_dim_)
    throw std::invalid_argument("GlmModel: prior covariance has wrong dimension");
  if (family == Family::normal && opts_.sigma <= 0.0)
    throw std::invalid_argument("GlmModel: sigma must be > 0");
  if (family == Family::normal_unknown && (opts_.a_p <= 0.0 || opts_.b_p <= 0.0))
    throw std::invalid_argument("GlmModel: noise prior parameters must be > 0");
  prior_mean_ = std::move(prior_mean);
  prior_cov_ = std::move(prior_cov);
  prior_chol_ = linalg::cholesky(prior_cov_, param_dim_);  // rejects non-PD covariance
}

GlmModel GlmModel::make(Family family, std::size_t n_predictors, double prior_var, GlmOptions opts) {
  bool class_family = family == Family::categorical || family == Family::multinomial;
  std::size_t dim = (n_predictors + 1) * (class_family ? opts.n_classes : 1);
  std::vector<double> mu(dim, 0.0), cov(dim * dim, 0.0);
  for (std::size_t i = 0; i < dim; ++i) cov[i * dim + i] = prior_var;
  return GlmModel(family, n_predictors, std::move(mu), std::move(cov), opts);
}

std::vector<LatentSample> GlmModel::sample_prior(std::size_t n, RngStream& rng) const {
  if (n < 1) throw std::invalid_argument("sample_prior: n must be >= 1");
  std::vector<LatentSample> out(n);
  std::vector<double> z(param_dim_);
  for (auto& s : out) {
    for (auto& v : z) v = rng.normal();
    s.theta.assign(param_dim_, 0.0);
    for (std::size_t i = 0; i < param_dim_; ++i) {
      double acc = prior_mean_[i];
      for (std::size_t j = 0; j <= i; ++j) acc += prior_chol_[i * param_dim_ + j] * z[j];
      s.theta[i] = acc;
    }
    if (family_ == Family::normal_unknown) {
      s.aux = rng.inverse_gamma(opts_.a_p, opts_.b_p);
      s.has_aux = true;
    }
  }
  return out;
}

std::vector<double> GlmModel::linear_predictor(const Design& d, const LatentSample& latent) const {
  if (d.n_cols != design_cols())
    throw std::invalid_argument("linear_predictor: design has " + std::to_string(d.n_cols) +
                                " columns, model expects " + std::to_string(design_cols()));
  if (latent.theta.size() != param_dim_)
    throw std::invalid_argument("linear_predictor: latent dimension mismatch");
  bool class_family = family_ == Family::categorical || family_ == Family::multinomial;
  std::size_t k = class_family ? opts_.n_classes : 1;
  std::vector<double> eta(d.n_units * k, 0.0);
  for (std::size_t s = 0; s < d.n_units; ++s)
    for (std::size_t j = 0; j < d.n_cols; ++j) {
      double dj = d(s, j);
      for (std::size_t c = 0; c < k; ++c) eta[s * k + c] += dj * latent.theta[j * k + c];
    }
  for (std::size_t i = 0; i < eta.size(); ++i)
    if (!std::isfinite(eta[i]))
      throw std::runtime_error("linear predictor is non-finite at unit " + std::to_string(i / k));
  return eta;
}

Outcome GlmModel::simulate(const Design& d, const LatentSample& latent, RngStream& rng) const {
  std::vector<double> eta = linear_predictor(d, latent);
  Outcome out;
  out.n_units = d.n_units;
  out.y_cols = y_cols();
  out.y.assign(out.n_units * out.y_cols, 0.0);
  switch (family_) {
    case Family::normal:
      for (std::size_t s = 0; s < d.n_units; ++s) out.y[s] = eta[s] + opts_.sigma * rng.normal();
      break;
    case Family::normal_unknown: {
      if (!latent.has_aux) throw std::invalid_argument("simulate: latent is missing the noise sd");
      for (std::size_t s = 0; s < d.n_units; ++s) out.y[s] = eta[s] + latent.aux * rng.normal();
      break;
    }
    case Family::logistic:
      for (std::size_t s = 0; s < d.n_units; ++s) {
        // P(y=1) = sigmoid(eta), drawn in log space
        double logp = -softplus(-eta[s]);
        out.y[s] = std::log(rng.uniform()) < logp ? 1.0 : 0.0;
      }
      break;
    case Family::binomial:
      for (std::size_t s = 0; s < d.n_units; ++s) {
        double logp = -softplus(-eta[s]);
        std::size_t c = 0;
        for (std::size_t t = 0; t < opts_.n_trials; ++t)
          if (std::log(rng.uniform()) < logp) ++c;
        out.y[s] = static_cast<double>(c);
      }
      break;
    case Family::categorical:
    case Family::multinomial: {
      std::size_t k = opts_.n_classes;
      for (std::size_t s = 0; s < d.n_units; ++s) {
        const double* row = eta.data() + s * k;
        double lse = logsumexp(row, k);
        std::vector<double> p(k);
        for (std::size_t c = 0; c < k; ++c) p[c] = std::exp(row[c] - lse);
        auto draw = [&]() {
          double u = rng.uniform(), acc = 0;
          for (std::size_t c = 0; c < k; ++c) {
            acc += p[c];
            if (u <= acc) return c;
          }
          return k - 1;
        };
        if (family_ == Family::categorical) {
          out.y[s] = static_cast<double>(draw());
        } else {
          for (std::size_t t = 0; t < opts_.n_trials; ++t) out.y[s * k + draw()] += 1.0;
        }
      }
      break;
    }
  }
  return out;
}

double GlmModel::log_likelihood(const Design& d, const LatentSample& latent, const Outcome& y) const {
  if (y.n_units != d.n_units || y.y_cols != y_cols())
    throw std::invalid_argument("log_likelihood: outcome shape mismatch");
  std::vector<double> eta = linear_predictor(d, latent);
  double ll = 0.0;
  switch (family_) {
    case Family::normal:
    case Family::normal_unknown: {
      double sd = family_ == Family::normal ? opts_.sigma : latent.aux;
      if (family_ == Family::normal_unknown && (!latent.has_aux || latent.aux <= 0.0))
        throw std::invalid_argument("log_likelihood: invalid noise sd in latent");
      for (std::size_t s = 0; s < d.n_units; ++s) {
        double r = (y.y[s] - eta[s]) / sd;
        ll += -0.5 * kLog2Pi - std::log(sd) - 0.5 * r * r;
      }
      break;
    }
    case Family::logistic:
      for (std::size_t s = 0; s < d.n_units; ++s) {
        if (y.y[s] != 0.0 && y.y[s] != 1.0)
          throw std::invalid_argument("log_likelihood: logistic outcome must be 0 or 1");
        ll += y.y[s] == 1.0 ? -softplus(-eta[s]) : -softplus(eta[s]);
      }
      break;
    case Family::binomial: {
      double n = static_cast<double>(opts_.n_trials);
      for (std::size_t s = 0; s < d.n_units; ++s) {
        double c = y.y[s];
        if (c < 0 || c > n || c != std::floor(c))
          throw std::invalid_argument("log_likelihood: binomial count outside [0, n_trials]");
        ll += log_binomial_coeff(opts_.n_trials, static_cast<std::size_t>(c)) -
              c * softplus(-eta[s]) - (n - c) * softplus(eta[s]);
      }
      break;
    }
    case Family::categorical: {
      std::size_t k = opts_.n_classes;
      for (std::size_t s = 0; s < d.n_units; ++s) {
        double c = y.y[s];
        if (c < 0 || c >= static_cast<double>(k) || c != std::floor(c))
          throw std::invalid_argument("log_likelihood: class index outside [0, K)");
        const double* row = eta.data() + s * k;
        ll += row[static_cast<std::size_t>(c)] - logsumexp(row, k);
      }
      break;
    }
    case Family::multinomial: {
      std::size_t k = opts_.n_classes;
      double n = static_cast<double>(opts_.n_trials);
      for (std::size_t s = 0; s < d.n_units; ++s) {
        const double* row = eta.data() + s * k;
        const double* cnt = y.y.data() + s * k;
        double total = 0, coeff = std::lgamma(n + 1.0);
        double lse = logsumexp(row, k);
        for (std::size_t c = 0; c < k; ++c) {
          if (cnt[c] < 0 || cnt[c] != std::floor(cnt[c]))
            throw std::invalid_argument("log_likelihood: multinomial counts must be non-negative integers");
          total += cnt[c];
          coeff -= std::lgamma(cnt[c] + 1.0);
          ll += cnt[c] * (row[c] - lse);
        }
        if (total != n)
          throw std::invalid_argument("log_likelihood: multinomial counts must sum to n_trials");
        ll += coeff;
      }
      break;
    }
  }
  return ll;
}

double GlmModel::log_prior(const LatentSample& latent) const {
  if (latent.theta.size() != param_dim_)
    throw std::invalid_argument("log_prior: latent dimension mismatch");
  double lp = linalg::mvn_log_density(latent.theta, prior_mean_, prior_chol_, param_dim_);
  if (family_ == Family::normal_unknown) {
    if (!latent.has_aux || latent.aux <= 0.0)
      throw std::invalid_argument("log_prior: noise sd must be present and > 0");
    lp += linalg::inverse_gamma_log_density(latent.aux, opts_.a_p, opts_.b_p);
  }
  return lp;
}

std::vector<double> GlmModel::to_unconstrained(const LatentSample& latent) const {
  std::vector<double> x = latent.theta;
  if (family_ == Family::normal_unknown) {
    if (!latent.has_aux || latent.aux <= 0.0)
      throw std::invalid_argument("to_unconstrained: noise sd must be present and > 0");
    x.push_back(std::log(latent.aux));
  }
  return x;
}

LatentSample GlmModel::from_unconstrained(const std::vector<double>& x) const {
  if (x.size() != flow_dim()) throw std::invalid_argument("from_unconstrained: dimension mismatch");
  LatentSample s;
  if (family_ == Family::normal_unknown) {
    s.theta.assign(x.begin(), x.end() - 1);
    s.aux = std::exp(x.back());
    s.has_aux = true;
  } else {
    s.theta = x;
  }
  return s;
}

double GlmModel::unconstrained_log_jacobian(const std::vector<double>& x) const {
  return family_ == Family::normal_unknown ? x.back() : 0.0;
}

std::vector<double> GlmModel::encode_outcome(const Outcome& y) const {
  std::size_t cols = y_encoding_cols();
  std::vector<double> enc(y.n_units * cols, 0.0);
  if (family_ == Family::categorical) {
    for (std::size_t s = 0; s < y.n_units; ++s)
      enc[s * cols + static_cast<std::size_t>(y.y[s])] = 1.0;
  } else {
    enc = y.y;
  }
  return enc;
}

std::vector<Design> sample_designs(std::size_t n_designs, std::size_t n_units,
                                   std::size_t n_predictors, RngStream& rng) {
  if (n_designs < 1 || n_units < 1) throw std::invalid_argument("sample_designs: counts must be >= 1");
  std::vector<Design> out(n_designs);
  for (auto& d : out) {
    d.n_units = n_units;
    d.n_cols = n_predictors + 1;
    d.m.resize(n_units * d.n_cols);
    for (auto& v : d.m) v = rng.normal();
  }
  return out;
}

}  // namespace boed
