#include "boed/kernels.hpp"

namespace boed::kernels {
namespace {

using BinFn = void (*)(const double*, const double*, double*, std::size_t);
using AxpyFn = void (*)(double*, const double*, double, std::size_t);
using UnFn = void (*)(const double*, double*, std::size_t);
using SumFn = double (*)(const double*, std::size_t);
using MmFn = void (*)(const double*, const double*, double*, std::size_t, std::size_t, std::size_t);

struct Dispatch {
  const char* name;
  BinFn add, sub, mul, div;
  AxpyFn axpy;
  UnFn relu;
  SumFn sum;
  MmFn matmul_acc;
};

Dispatch pick() {
#if defined(BOED_HAVE_AVX2_BACKEND)
  if (__builtin_cpu_supports("avx2")) {
    return {"avx2", avx2::add, avx2::sub, avx2::mul, avx2::div,
            avx2::axpy, avx2::relu, avx2::sum, avx2::matmul_acc};
  }
#endif
  return {"scalar", scalar::add, scalar::sub, scalar::mul, scalar::div,
          scalar::axpy, scalar::relu, scalar::sum, scalar::matmul_acc};
}

const Dispatch& table() {
  static const Dispatch d = pick();
  return d;
}

}  // namespace

const char* active_backend() { return table().name; }

void add(const double* a, const double* b, double* out, std::size_t n) { table().add(a, b, out, n); }
void sub(const double* a, const double* b, double* out, std::size_t n) { table().sub(a, b, out, n); }
void mul(const double* a, const double* b, double* out, std::size_t n) { table().mul(a, b, out, n); }
void div(const double* a, const double* b, double* out, std::size_t n) { table().div(a, b, out, n); }
void axpy(double* y, const double* x, double alpha, std::size_t n) { table().axpy(y, x, alpha, n); }
void relu(const double* a, double* out, std::size_t n) { table().relu(a, out, n); }
double sum(const double* a, std::size_t n) { return table().sum(a, n); }
void matmul_acc(const double* A, const double* B, double* C,
                std::size_t m, std::size_t k, std::size_t n) {
  table().matmul_acc(A, B, C, m, k, n);
}

}  // namespace boed::kernels
