#pragma once
// Small dense helpers: Cholesky factorization, triangular solves and the
// multivariate normal log-density. Row-major storage throughout; failure on
// a non-positive pivot throws.

#include <cmath>
#include <stdexcept>
#include <vector>

namespace boed::linalg {

// Lower Cholesky factor of a symmetric positive-definite matrix (n x n).
inline std::vector<double> cholesky(const std::vector<double>& a, std::size_t n) {
  std::vector<double> L(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      double s = a[i * n + j];
      for (std::size_t k = 0; k < j; ++k) s -= L[i * n + k] * L[j * n + k];
      if (i == j) {
        if (s <= 0.0) throw std::runtime_error("cholesky: matrix not positive definite");
        L[i * n + i] = std::sqrt(s);
      } else {
        L[i * n + j] = s / L[j * n + j];
      }
    }
  }
  return L;
}

// Solve L x = b (lower triangular).
inline std::vector<double> solve_lower(const std::vector<double>& L, const std::vector<double>& b,
                                       std::size_t n) {
  std::vector<double> x(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = b[i];
    for (std::size_t j = 0; j < i; ++j) s -= L[i * n + j] * x[j];
    x[i] = s / L[i * n + i];
  }
  return x;
}

// Solve L^T x = b.
inline std::vector<double> solve_upper_t(const std::vector<double>& L, const std::vector<double>& b,
                                         std::size_t n) {
  std::vector<double> x(n);
  for (std::size_t ii = n; ii-- > 0;) {
    double s = b[ii];
    for (std::size_t j = ii + 1; j < n; ++j) s -= L[j * n + ii] * x[j];
    x[ii] = s / L[ii * n + ii];
  }
  return x;
}

inline double log_det_from_cholesky(const std::vector<double>& L, std::size_t n) {
  double s = 0;
  for (std::size_t i = 0; i < n; ++i) s += std::log(L[i * n + i]);
  return 2.0 * s;
}

// log N(x; mu, Sigma) given the lower Cholesky factor of Sigma.
inline double mvn_log_density(const std::vector<double>& x, const std::vector<double>& mu,
                              const std::vector<double>& L, std::size_t n) {
  std::vector<double> r(n);
  for (std::size_t i = 0; i < n; ++i) r[i] = x[i] - mu[i];
  std::vector<double> z = solve_lower(L, r, n);
  double quad = 0;
  for (double v : z) quad += v * v;
  constexpr double log2pi = 1.8378770664093454835606594728112;
  return -0.5 * (static_cast<double>(n) * log2pi + log_det_from_cholesky(L, n) + quad);
}

// y = A x for row-major A (m x n).
inline std::vector<double> matvec(const std::vector<double>& A, const std::vector<double>& x,
                                  std::size_t m, std::size_t n) {
  std::vector<double> y(m, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) y[i] += A[i * n + j] * x[j];
  return y;
}

inline double log_gamma(double x) { return std::lgamma(x); }

// log InverseGamma(x; shape a, scale b), mean b/(a-1).
inline double inverse_gamma_log_density(double x, double a, double b) {
  if (x <= 0.0) throw std::invalid_argument("inverse_gamma_log_density: x must be > 0");
  return a * std::log(b) - log_gamma(a) - (a + 1.0) * std::log(x) - b / x;
}

}  // namespace boed::linalg
