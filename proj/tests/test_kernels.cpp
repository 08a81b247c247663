#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <string>
#include <vector>

#include "boed/kernels.hpp"
#include "boed/rng.hpp"

using namespace boed;

namespace {
std::vector<double> randvec(std::size_t n, std::uint64_t seed) {
  RngStream r(seed);
  std::vector<double> v(n);
  for (auto& x : v) x = r.normal();
  return v;
}
}  // namespace

TEST_CASE("dispatch picks a backend") {
  std::string b = kernels::active_backend();
  CHECK((b == "avx2" || b == "scalar"));
}

TEST_CASE("elementwise kernels match scalar reference bit-exactly") {
  for (std::size_t n : {std::size_t{1}, std::size_t{3}, std::size_t{4}, std::size_t{17},
                        std::size_t{64}, std::size_t{1001}}) {
    auto a = randvec(n, 11 + n), b = randvec(n, 23 + n);
    for (auto& x : b) x += 3.0;  // keep divisors away from 0
    std::vector<double> got(n), want(n);

    kernels::add(a.data(), b.data(), got.data(), n);
    kernels::scalar::add(a.data(), b.data(), want.data(), n);
    CHECK(got == want);
    kernels::sub(a.data(), b.data(), got.data(), n);
    kernels::scalar::sub(a.data(), b.data(), want.data(), n);
    CHECK(got == want);
    kernels::mul(a.data(), b.data(), got.data(), n);
    kernels::scalar::mul(a.data(), b.data(), want.data(), n);
    CHECK(got == want);
    kernels::div(a.data(), b.data(), got.data(), n);
    kernels::scalar::div(a.data(), b.data(), want.data(), n);
    CHECK(got == want);
    kernels::relu(a.data(), got.data(), n);
    kernels::scalar::relu(a.data(), want.data(), n);
    CHECK(got == want);

    got = a;
    want = a;
    kernels::axpy(got.data(), b.data(), 0.37, n);
    kernels::scalar::axpy(want.data(), b.data(), 0.37, n);
    CHECK(got == want);

    CHECK(kernels::sum(a.data(), n) == kernels::scalar::sum(a.data(), n));
  }
}

#if defined(BOED_HAVE_AVX2_BACKEND)
TEST_CASE("avx2 backend is bit-identical to scalar when available") {
  if (std::string(kernels::active_backend()) != "avx2") return;
  for (std::size_t n : {std::size_t{5}, std::size_t{8}, std::size_t{130}}) {
    auto a = randvec(n, 7 + n), b = randvec(n, 9 + n);
    std::vector<double> got(n), want(n);
    kernels::avx2::add(a.data(), b.data(), got.data(), n);
    kernels::scalar::add(a.data(), b.data(), want.data(), n);
    CHECK(got == want);
    kernels::avx2::mul(a.data(), b.data(), got.data(), n);
    kernels::scalar::mul(a.data(), b.data(), want.data(), n);
    CHECK(got == want);
    CHECK(kernels::avx2::sum(a.data(), n) == kernels::scalar::sum(a.data(), n));
  }
}
#endif

TEST_CASE("matmul_acc matches a naive triple loop and the scalar reference") {
  for (auto [m, k, n] : {std::tuple<std::size_t, std::size_t, std::size_t>{3, 5, 7},
                         {1, 1, 1},
                         {8, 16, 4},
                         {13, 9, 11}}) {
    auto A = randvec(m * k, 100 + m), B = randvec(k * n, 200 + n);
    std::vector<double> got(m * n, 0.0), want(m * n, 0.0), naive(m * n, 0.0);
    kernels::matmul_acc(A.data(), B.data(), got.data(), m, k, n);
    kernels::scalar::matmul_acc(A.data(), B.data(), want.data(), m, k, n);
    CHECK(got == want);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0;
        for (std::size_t kk = 0; kk < k; ++kk) s += A[i * k + kk] * B[kk * n + j];
        naive[i * n + j] = s;
      }
    for (std::size_t i = 0; i < m * n; ++i)
      CHECK(got[i] == doctest::Approx(naive[i]).epsilon(1e-12));
  }
}

TEST_CASE("sum matches extended-precision reference") {
  auto a = randvec(4097, 77);
  long double ref = 0;
  for (double x : a) ref += x;
  CHECK(kernels::sum(a.data(), a.size()) == doctest::Approx(double(ref)).epsilon(1e-12));
}
