#pragma once
// Data-parallel inner loops used by the tensor engine.
//
// Each kernel has a scalar reference implementation and, on x86-64 with
// AVX2, a vectorized variant selected once at startup. The vector variants
// are written to be bit-identical to the scalar reference: no FMA, and
// reductions use the same four-accumulator order in both backends.

#include <cstddef>

namespace boed::kernels {

// Name of the backend picked at load time ("avx2" or "scalar").
const char* active_backend();

void add(const double* a, const double* b, double* out, std::size_t n);
void sub(const double* a, const double* b, double* out, std::size_t n);
void mul(const double* a, const double* b, double* out, std::size_t n);
void div(const double* a, const double* b, double* out, std::size_t n);

// y[i] += alpha * x[i]
void axpy(double* y, const double* x, double alpha, std::size_t n);
// out[i] = max(a[i], 0)
void relu(const double* a, double* out, std::size_t n);
// Four-accumulator sum; identical association in both backends.
double sum(const double* a, std::size_t n);

// C += A * B with row-major A (m x k), B (k x n), C (m x n).
// Accumulation over k is in index order for every C entry.
void matmul_acc(const double* A, const double* B, double* C,
                std::size_t m, std::size_t k, std::size_t n);

// Reference implementations, exposed for equivalence tests.
namespace scalar {
void add(const double* a, const double* b, double* out, std::size_t n);
void sub(const double* a, const double* b, double* out, std::size_t n);
void mul(const double* a, const double* b, double* out, std::size_t n);
void div(const double* a, const double* b, double* out, std::size_t n);
void axpy(double* y, const double* x, double alpha, std::size_t n);
void relu(const double* a, double* out, std::size_t n);
double sum(const double* a, std::size_t n);
void matmul_acc(const double* A, const double* B, double* C,
                std::size_t m, std::size_t k, std::size_t n);
}  // namespace scalar

#if defined(__x86_64__) || defined(_M_X64)
#define BOED_HAVE_AVX2_BACKEND 1
namespace avx2 {
void add(const double* a, const double* b, double* out, std::size_t n);
void sub(const double* a, const double* b, double* out, std::size_t n);
void mul(const double* a, const double* b, double* out, std::size_t n);
void div(const double* a, const double* b, double* out, std::size_t n);
void axpy(double* y, const double* x, double alpha, std::size_t n);
void relu(const double* a, double* out, std::size_t n);
double sum(const double* a, std::size_t n);
void matmul_acc(const double* A, const double* B, double* C,
                std::size_t m, std::size_t k, std::size_t n);
}  // namespace avx2
#endif

}  // namespace boed::kernels
