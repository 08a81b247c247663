#include "boed/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "boed/kernels.hpp"

namespace boed {

namespace {

std::size_t prod(const std::vector<std::size_t>& s) {
  std::size_t p = 1;
  for (auto v : s) p *= v;
  return p;
}

[[noreturn]] void shape_error(const char* op, const std::vector<std::size_t>& a,
                              const std::vector<std::size_t>& b) {
  throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a) +
                              " vs " + shape_str(b));
}

double sigmoid(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

// C[m x n] += A[m x k] * B[n x k]^T
void matmul_nt(const double* A, const double* B, double* C,
               std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0;
      const double* ar = A + i * k;
      const double* br = B + j * k;
      for (std::size_t p = 0; p < k; ++p) s += ar[p] * br[p];
      C[i * n + j] += s;
    }
}

// C[k x n] += A[m x k]^T * B[m x n]
void matmul_tn(const double* A, const double* B, double* C,
               std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ar = A + i * k;
    const double* br = B + i * n;
    for (std::size_t p = 0; p < k; ++p) kernels::axpy(C + p * n, br, ar[p], n);
  }
}

enum class Bcast { same, row, scalar };

Bcast classify(const char* op, const Tensor& a, const Tensor& b) {
  if (b.shape == a.shape) return Bcast::same;
  if (b.size() == 1) return Bcast::scalar;
  if (b.rank() == 1 && !a.shape.empty() && b.shape[0] == a.shape.back()) return Bcast::row;
  shape_error(op, a.shape, b.shape);
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> s, std::vector<double> d)
    : shape(std::move(s)), data(std::make_shared<std::vector<double>>(std::move(d))) {
  if (prod(shape) != data->size())
    throw std::invalid_argument("Tensor: shape " + shape_str(shape) + " does not match data length " +
                                std::to_string(data->size()));
}

Tensor Tensor::zeros(std::vector<std::size_t> s) {
  std::size_t n = prod(s);
  return Tensor(std::move(s), std::vector<double>(n, 0.0));
}

Tensor Tensor::scalar(double v) { return Tensor({1}, {v}); }

std::string shape_str(const std::vector<std::size_t>& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

int Graph::push(const char* op, std::size_t out_size, std::function<void(Graph&)> back) {
  nodes_.push_back(Node{op, std::move(back), out_size});
  return static_cast<int>(nodes_.size()) - 1;
}

Tensor Graph::out(const char* op, std::vector<std::size_t> shape, std::function<void(Graph&)> back) {
  Tensor t = Tensor::zeros(shape);
  t.node = push(op, t.size(), std::move(back));
  return t;
}

std::vector<double>& Graph::buf(int node, std::size_t size) {
  if (grads_.size() < nodes_.size()) grads_.resize(nodes_.size());
  auto& g = grads_[static_cast<std::size_t>(node)];
  if (g.empty()) g.assign(size, 0.0);
  return g;
}

const std::vector<double>* Graph::gout(int node) const {
  if (node < 0 || static_cast<std::size_t>(node) >= grads_.size()) return nullptr;
  const auto& g = grads_[static_cast<std::size_t>(node)];
  return g.empty() ? nullptr : &g;
}

void Graph::accum(int node, std::size_t size, const double* g) {
  if (node < 0) return;  // constant input
  auto& dst = buf(node, size);
  kernels::add(dst.data(), g, dst.data(), size);
}

Tensor Graph::leaf(const Tensor& t) {
  Tensor r = t;
  r.node = push("leaf", t.size(), nullptr);
  return r;
}

// ---------------------------------------------------------------------------
// Elementwise binary ops

Tensor Graph::add(const Tensor& a, const Tensor& b) {
  Bcast mode = classify("add", a, b);
  Tensor r = out("add", a.shape, nullptr);
  const std::size_t n = a.size();
  if (mode == Bcast::same) {
    kernels::add(a.data->data(), b.data->data(), r.data->data(), n);
  } else if (mode == Bcast::scalar) {
    double c = (*b.data)[0];
    for (std::size_t i = 0; i < n; ++i) (*r.data)[i] = (*a.data)[i] + c;
  } else {
    std::size_t cols = b.size();
    for (std::size_t i = 0; i < n; ++i) (*r.data)[i] = (*a.data)[i] + (*b.data)[i % cols];
  }
  int rn = r.node, an = a.node, bn = b.node;
  nodes_[rn].back = [rn, an, bn, n, mode, bs = b.size()](Graph& g) {
    const auto* go = g.gout(rn);
    g.accum(an, n, go->data());
    if (bn < 0) return;
    if (mode == Bcast::same) {
      g.accum(bn, n, go->data());
    } else if (mode == Bcast::scalar) {
      double s = kernels::sum(go->data(), n);
      g.accum(bn, 1, &s);
    } else {
      std::vector<double> gb(bs, 0.0);
      for (std::size_t i = 0; i < n; ++i) gb[i % bs] += (*go)[i];
      g.accum(bn, bs, gb.data());
    }
  };
  return r;
}

Tensor Graph::sub(const Tensor& a, const Tensor& b) {
  Bcast mode = classify("subtract", a, b);
  Tensor r = out("subtract", a.shape, nullptr);
  const std::size_t n = a.size();
  if (mode == Bcast::same) {
    kernels::sub(a.data->data(), b.data->data(), r.data->data(), n);
  } else if (mode == Bcast::scalar) {
    double c = (*b.data)[0];
    for (std::size_t i = 0; i < n; ++i) (*r.data)[i] = (*a.data)[i] - c;
  } else {
    std::size_t cols = b.size();
    for (std::size_t i = 0; i < n; ++i) (*r.data)[i] = (*a.data)[i] - (*b.data)[i % cols];
  }
  int rn = r.node, an = a.node, bn = b.node;
  nodes_[rn].back = [rn, an, bn, n, mode, bs = b.size()](Graph& g) {
    const auto* go = g.gout(rn);
    g.accum(an, n, go->data());
    if (bn < 0) return;
    if (mode == Bcast::same) {
      std::vector<double> gb(n);
      for (std::size_t i = 0; i < n; ++i) gb[i] = -(*go)[i];
      g.accum(bn, n, gb.data());
    } else if (mode == Bcast::scalar) {
      double s = -kernels::sum(go->data(), n);
      g.accum(bn, 1, &s);
    } else {
      std::vector<double> gb(bs, 0.0);
      for (std::size_t i = 0; i < n; ++i) gb[i % bs] -= (*go)[i];
      g.accum(bn, bs, gb.data());
    }
  };
  return r;
}

Tensor Graph::mul(const Tensor& a, const Tensor& b) {
  Bcast mode = classify("multiply", a, b);
  Tensor r = out("multiply", a.shape, nullptr);
  const std::size_t n = a.size();
  if (mode == Bcast::same) {
    kernels::mul(a.data->data(), b.data->data(), r.data->data(), n);
  } else if (mode == Bcast::scalar) {
    double c = (*b.data)[0];
    for (std::size_t i = 0; i < n; ++i) (*r.data)[i] = (*a.data)[i] * c;
  } else {
    std::size_t cols = b.size();
    for (std::size_t i = 0; i < n; ++i) (*r.data)[i] = (*a.data)[i] * (*b.data)[i % cols];
  }
  int rn = r.node, an = a.node, bn = b.node;
  nodes_[rn].back = [rn, an, bn, n, mode, av = a.data, bv = b.data](Graph& g) {
    const auto* go = g.gout(rn);
    const std::size_t bs = bv->size();
    if (an >= 0) {
      std::vector<double> ga(n);
      if (mode == Bcast::same) {
        kernels::mul(go->data(), bv->data(), ga.data(), n);
      } else if (mode == Bcast::scalar) {
        for (std::size_t i = 0; i < n; ++i) ga[i] = (*go)[i] * (*bv)[0];
      } else {
        for (std::size_t i = 0; i < n; ++i) ga[i] = (*go)[i] * (*bv)[i % bs];
      }
      g.accum(an, n, ga.data());
    }
    if (bn >= 0) {
      if (mode == Bcast::same) {
        std::vector<double> gb(n);
        kernels::mul(go->data(), av->data(), gb.data(), n);
        g.accum(bn, n, gb.data());
      } else if (mode == Bcast::scalar) {
        double s = 0;
        for (std::size_t i = 0; i < n; ++i) s += (*go)[i] * (*av)[i];
        g.accum(bn, 1, &s);
      } else {
        std::vector<double> gb(bs, 0.0);
        for (std::size_t i = 0; i < n; ++i) gb[i % bs] += (*go)[i] * (*av)[i];
        g.accum(bn, bs, gb.data());
      }
    }
  };
  return r;
}

Tensor Graph::div(const Tensor& a, const Tensor& b) {
  Bcast mode = classify("divide", a, b);
  Tensor r = out("divide", a.shape, nullptr);
  const std::size_t n = a.size();
  const std::size_t bs = b.size();
  for (std::size_t i = 0; i < n; ++i) {
    double bi = mode == Bcast::same ? (*b.data)[i] : mode == Bcast::scalar ? (*b.data)[0] : (*b.data)[i % bs];
    (*r.data)[i] = (*a.data)[i] / bi;
  }
  int rn = r.node, an = a.node, bn = b.node;
  nodes_[rn].back = [rn, an, bn, n, mode, av = a.data, bv = b.data](Graph& g) {
    const auto* go = g.gout(rn);
    const std::size_t bs = bv->size();
    auto bat = [&](std::size_t i) {
      return mode == Bcast::same ? (*bv)[i] : mode == Bcast::scalar ? (*bv)[0] : (*bv)[i % bs];
    };
    if (an >= 0) {
      std::vector<double> ga(n);
      for (std::size_t i = 0; i < n; ++i) ga[i] = (*go)[i] / bat(i);
      g.accum(an, n, ga.data());
    }
    if (bn >= 0) {
      std::vector<double> gb(bs, 0.0);
      for (std::size_t i = 0; i < n; ++i) {
        double bi = bat(i);
        double contrib = -(*go)[i] * (*av)[i] / (bi * bi);
        gb[mode == Bcast::same ? i : mode == Bcast::scalar ? 0 : i % bs] += contrib;
      }
      g.accum(bn, bs, gb.data());
    }
  };
  return r;
}

Tensor Graph::add_scalar(const Tensor& a, double c) { return add(a, Tensor::scalar(c)); }
Tensor Graph::mul_scalar(const Tensor& a, double c) { return mul(a, Tensor::scalar(c)); }

// ---------------------------------------------------------------------------
// Elementwise unary ops

Tensor Graph::neg(const Tensor& a) {
  Tensor r = out("negate", a.shape, nullptr);
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) (*r.data)[i] = -(*a.data)[i];
  int rn = r.node, an = a.node;
  nodes_[rn].back = [rn, an, n](Graph& g) {
    const auto* go = g.gout(rn);
    std::vector<double> ga(n);
    for (std::size_t i = 0; i < n; ++i) ga[i] = -(*go)[i];
    g.accum(an, n, ga.data());
  };
  return r;
}

Tensor Graph::exp(const Tensor& a) {
  Tensor r = out("exp", a.shape, nullptr);
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) (*r.data)[i] = std::exp((*a.data)[i]);
  int rn = r.node, an = a.node;
  nodes_[rn].back = [rn, an, n, rv = r.data](Graph& g) {
    const auto* go = g.gout(rn);
    std::vector<double> ga(n);
    kernels::mul(go->data(), rv->data(), ga.data(), n);
    g.accum(an, n, ga.data());
  };
  return r;
}

Tensor Graph::log(const Tensor& a) {
  Tensor r = out("log", a.shape, nullptr);
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) (*r.data)[i] = std::log((*a.data)[i]);
  int rn = r.node, an = a.node;
  nodes_[rn].back = [rn, an, n, av = a.data](Graph& g) {
    const auto* go = g.gout(rn);
    std::vector<double> ga(n);
    kernels::div(go->data(), av->data(), ga.data(), n);
    g.accum(an, n, ga.data());
  };
  return r;
}

Tensor Graph::sqrt(const Tensor& a) {
  Tensor r = out("sqrt", a.shape, nullptr);
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) (*r.data)[i] = std::sqrt((*a.data)[i]);
  int rn = r.node, an = a.node;
  nodes_[rn].back = [rn, an, n, rv = r.data](Graph& g) {
    const auto* go = g.gout(rn);
    std::vector<double> ga(n);
    for (std::size_t i = 0; i < n; ++i) ga[i] = 0.5 * (*go)[i] / (*rv)[i];
    g.accum(an, n, ga.data());
  };
  return r;
}

Tensor Graph::tanh(const Tensor& a) {
  Tensor r = out("tanh", a.shape, nullptr);
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) (*r.data)[i] = std::tanh((*a.data)[i]);
  int rn = r.node, an = a.node;
  nodes_[rn].back = [rn, an, n, rv = r.data](Graph& g) {
    const auto* go = g.gout(rn);
    std::vector<double> ga(n);
    for (std::size_t i = 0; i < n; ++i) ga[i] = (*go)[i] * (1.0 - (*rv)[i] * (*rv)[i]);
    g.accum(an, n, ga.data());
  };
  return r;
}

Tensor Graph::relu(const Tensor& a) {
  Tensor r = out("relu", a.shape, nullptr);
  const std::size_t n = a.size();
  kernels::relu(a.data->data(), r.data->data(), n);
  int rn = r.node, an = a.node;
  nodes_[rn].back = [rn, an, n, av = a.data](Graph& g) {
    const auto* go = g.gout(rn);
    std::vector<double> ga(n);
    // subgradient 0 at the kink
    for (std::size_t i = 0; i < n; ++i) ga[i] = (*av)[i] > 0.0 ? (*go)[i] : 0.0;
    g.accum(an, n, ga.data());
  };
  return r;
}

Tensor Graph::softplus(const Tensor& a) {
  Tensor r = out("softplus", a.shape, nullptr);
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) {
    double x = (*a.data)[i];
    (*r.data)[i] = x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
  }
  int rn = r.node, an = a.node;
  nodes_[rn].back = [rn, an, n, av = a.data](Graph& g) {
    const auto* go = g.gout(rn);
    std::vector<double> ga(n);
    for (std::size_t i = 0; i < n; ++i) ga[i] = (*go)[i] * sigmoid((*av)[i]);
    g.accum(an, n, ga.data());
  };
  return r;
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor Graph::matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0]) shape_error("matmul", a.shape, b.shape);
  const std::size_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
  Tensor r = out("matmul", {m, n}, nullptr);
  kernels::matmul_acc(a.data->data(), b.data->data(), r.data->data(), m, k, n);
  int rn = r.node, an = a.node, bn = b.node;
  nodes_[rn].back = [rn, an, bn, m, k, n, av = a.data, bv = b.data](Graph& g) {
    const auto* go = g.gout(rn);
    if (an >= 0) {
      std::vector<double> ga(m * k, 0.0);
      matmul_nt(go->data(), bv->data(), ga.data(), m, n, k);  // dA = G * B^T
      g.accum(an, m * k, ga.data());
    }
    if (bn >= 0) {
      std::vector<double> gb(k * n, 0.0);
      matmul_tn(av->data(), go->data(), gb.data(), m, k, n);  // dB = A^T * G
      g.accum(bn, k * n, gb.data());
    }
  };
  return r;
}

Tensor Graph::bmm(const Tensor& a, const Tensor& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.shape[0] != b.shape[0] || a.shape[2] != b.shape[1])
    shape_error("bmm", a.shape, b.shape);
  const std::size_t B = a.shape[0], m = a.shape[1], k = a.shape[2], n = b.shape[2];
  Tensor r = out("bmm", {B, m, n}, nullptr);
  for (std::size_t q = 0; q < B; ++q)
    kernels::matmul_acc(a.data->data() + q * m * k, b.data->data() + q * k * n,
                        r.data->data() + q * m * n, m, k, n);
  int rn = r.node, an = a.node, bn = b.node;
  nodes_[rn].back = [rn, an, bn, B, m, k, n, av = a.data, bv = b.data](Graph& g) {
    const auto* go = g.gout(rn);
    if (an >= 0) {
      std::vector<double> ga(B * m * k, 0.0);
      for (std::size_t q = 0; q < B; ++q)
        matmul_nt(go->data() + q * m * n, bv->data() + q * k * n, ga.data() + q * m * k, m, n, k);
      g.accum(an, ga.size(), ga.data());
    }
    if (bn >= 0) {
      std::vector<double> gb(B * k * n, 0.0);
      for (std::size_t q = 0; q < B; ++q)
        matmul_tn(av->data() + q * m * k, go->data() + q * m * n, gb.data() + q * k * n, m, k, n);
      g.accum(bn, gb.size(), gb.data());
    }
  };
  return r;
}

Tensor Graph::transpose(const Tensor& a) {
  if (a.rank() != 2) throw std::invalid_argument("transpose: rank-2 tensor required, got " + shape_str(a.shape));
  const std::size_t m = a.shape[0], n = a.shape[1];
  Tensor r = out("transpose", {n, m}, nullptr);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) (*r.data)[j * m + i] = (*a.data)[i * n + j];
  int rn = r.node, an = a.node;
  nodes_[rn].back = [rn, an, m, n](Graph& g) {
    const auto* go = g.gout(rn);
    std::vector<double> ga(m * n);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] = (*go)[j * m + i];
    g.accum(an, m * n, ga.data());
  };
  return r;
}

// ---------------------------------------------------------------------------
// Reductions and softmax

Tensor Graph::sum_all(const Tensor& a) {
  Tensor r = out("sum", {1}, nullptr);
  (*r.data)[0] = kernels::sum(a.data->data(), a.size());
  int rn = r.node, an = a.node;
  nodes_[rn].back = [rn, an, n = a.size()](Graph& g) {
    const auto* go = g.gout(rn);
    std::vector<double> ga(n, (*go)[0]);
    g.accum(an, n, ga.data());
  };
  return r;
}

Tensor Graph::mean_all(const Tensor& a) { return mul_scalar(sum_all(a), 1.0 / static_cast<double>(a.size())); }

Tensor Graph::sum_axis(const Tensor& a, std::size_t axis) {
  if (axis >= a.rank()) throw std::invalid_argument("sum_axis: axis out of range for " + shape_str(a.shape));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= a.shape[i];
  for (std::size_t i = axis + 1; i < a.rank(); ++i) inner *= a.shape[i];
  const std::size_t len = a.shape[axis];
  std::vector<std::size_t> os;
  for (std::size_t i = 0; i < a.rank(); ++i)
    if (i != axis) os.push_back(a.shape[i]);
  if (os.empty()) os.push_back(1);
  Tensor r = out("sum", os, nullptr);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t j = 0; j < len; ++j)
      kernels::axpy(r.data->data() + o * inner, a.data->data() + (o * len + j) * inner, 1.0, inner);
  int rn = r.node, an = a.node;
  nodes_[rn].back = [rn, an, outer, inner, len](Graph& g) {
    const auto* go = g.gout(rn);
    std::vector<double> ga(outer * len * inner);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t j = 0; j < len; ++j)
        std::memcpy(ga.data() + (o * len + j) * inner, go->data() + o * inner, inner * sizeof(double));
    g.accum(an, ga.size(), ga.data());
  };
  return r;
}

Tensor Graph::softmax_last(const Tensor& a) {
  if (a.rank() == 0) throw std::invalid_argument("softmax: scalar input");
  const std::size_t cols = a.shape.back();
  const std::size_t rows = a.size() / cols;
  Tensor r = out("softmax", a.shape, nullptr);
  for (std::size_t i = 0; i < rows; ++i) {
    const double* x = a.data->data() + i * cols;
    double* y = r.data->data() + i * cols;
    double mx = x[0];
    for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
    double s = 0;
    for (std::size_t j = 0; j < cols; ++j) s += (y[j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < cols; ++j) y[j] /= s;
  }
  int rn = r.node, an = a.node;
  nodes_[rn].back = [rn, an, rows, cols, rv = r.data](Graph& g) {
    const auto* go = g.gout(rn);
    std::vector<double> ga(rows * cols);
    for (std::size_t i = 0; i < rows; ++i) {
      const double* y = rv->data() + i * cols;
      const double* gr = go->data() + i * cols;
      double dot = 0;
      for (std::size_t j = 0; j < cols; ++j) dot += gr[j] * y[j];
      for (std::size_t j = 0; j < cols; ++j) ga[i * cols + j] = y[j] * (gr[j] - dot);
    }
    g.accum(an, ga.size(), ga.data());
  };
  return r;
}

// ---------------------------------------------------------------------------
// Structural ops

Tensor Graph::concat_last(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape[0] != b.shape[0]) shape_error("concatenate", a.shape, b.shape);
  const std::size_t m = a.shape[0], na = a.shape[1], nb = b.shape[1];
  Tensor r = out("concatenate", {m, na + nb}, nullptr);
  for (std::size_t i = 0; i < m; ++i) {
    std::memcpy(r.data->data() + i * (na + nb), a.data->data() + i * na, na * sizeof(double));
    std::memcpy(r.data->data() + i * (na + nb) + na, b.data->data() + i * nb, nb * sizeof(double));
  }
  int rn = r.node, an = a.node, bn = b.node;
  nodes_[rn].back = [rn, an, bn, m, na, nb](Graph& g) {
    const auto* go = g.gout(rn);
    if (an >= 0) {
      std::vector<double> ga(m * na);
      for (std::size_t i = 0; i < m; ++i)
        std::memcpy(ga.data() + i * na, go->data() + i * (na + nb), na * sizeof(double));
      g.accum(an, ga.size(), ga.data());
    }
    if (bn >= 0) {
      std::vector<double> gb(m * nb);
      for (std::size_t i = 0; i < m; ++i)
        std::memcpy(gb.data() + i * nb, go->data() + i * (na + nb) + na, nb * sizeof(double));
      g.accum(bn, gb.size(), gb.data());
    }
  };
  return r;
}

Tensor Graph::reshape(const Tensor& a, std::vector<std::size_t> s) {
  if (prod(s) != a.size()) shape_error("reshape", a.shape, s);
  Tensor r;
  r.shape = std::move(s);
  r.data = a.data;  // view
  int an = a.node;
  r.node = push("reshape", a.size(), nullptr);
  int rn = r.node;
  nodes_[rn].back = [rn, an, n = a.size()](Graph& g) {
    const auto* go = g.gout(rn);
    g.accum(an, n, go->data());
  };
  return r;
}

Tensor Graph::gather(const Tensor& a, std::vector<std::size_t> idx, std::vector<std::size_t> out_shape) {
  if (prod(out_shape) != idx.size())
    throw std::invalid_argument("gather: index list length " + std::to_string(idx.size()) +
                                " does not match output shape " + shape_str(out_shape));
  for (auto i : idx)
    if (i >= a.size()) throw std::invalid_argument("gather: index out of range");
  Tensor r = out("gather", out_shape, nullptr);
  for (std::size_t i = 0; i < idx.size(); ++i) (*r.data)[i] = (*a.data)[idx[i]];
  int rn = r.node, an = a.node;
  nodes_[rn].back = [rn, an, ix = std::move(idx), n = a.size()](Graph& g) {
    const auto* go = g.gout(rn);
    std::vector<double> ga(n, 0.0);
    for (std::size_t i = 0; i < ix.size(); ++i) ga[ix[i]] += (*go)[i];
    g.accum(an, n, ga.data());
  };
  return r;
}

// ---------------------------------------------------------------------------
// Attention and dropout

Tensor Graph::attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  if (q.rank() != 3 || q.shape != k.shape || q.shape != v.shape) shape_error("attention", q.shape, k.shape);
  const std::size_t B = q.shape[0], S = q.shape[1], D = q.shape[2];
  const double scale = 1.0 / std::sqrt(static_cast<double>(D));
  Tensor r = out("attention", q.shape, nullptr);
  auto probs = std::make_shared<std::vector<double>>(B * S * S);
  for (std::size_t b = 0; b < B; ++b) {
    const double* Q = q.data->data() + b * S * D;
    const double* K = k.data->data() + b * S * D;
    const double* V = v.data->data() + b * S * D;
    double* A = probs->data() + b * S * S;
    double* O = r.data->data() + b * S * D;
    for (std::size_t i = 0; i < S; ++i) {
      double mx = -1e300;
      for (std::size_t j = 0; j < S; ++j) {
        double s = 0;
        for (std::size_t p = 0; p < D; ++p) s += Q[i * D + p] * K[j * D + p];
        A[i * S + j] = s * scale;
        mx = std::max(mx, A[i * S + j]);
      }
      double z = 0;
      for (std::size_t j = 0; j < S; ++j) z += (A[i * S + j] = std::exp(A[i * S + j] - mx));
      for (std::size_t j = 0; j < S; ++j) A[i * S + j] /= z;
    }
    kernels::matmul_acc(A, V, O, S, S, D);
  }
  int rn = r.node, qn = q.node, kn = k.node, vn = v.node;
  nodes_[rn].back = [rn, qn, kn, vn, B, S, D, scale, probs,
                     qv = q.data, kv = k.data, vv = v.data](Graph& g) {
    const auto* go = g.gout(rn);
    std::vector<double> gq(B * S * D, 0.0), gk(B * S * D, 0.0), gv(B * S * D, 0.0);
    std::vector<double> dA(S * S), dS(S * S);
    for (std::size_t b = 0; b < B; ++b) {
      const double* A = probs->data() + b * S * S;
      const double* GO = go->data() + b * S * D;
      const double* Q = qv->data() + b * S * D;
      const double* K = kv->data() + b * S * D;
      const double* V = vv->data() + b * S * D;
      // dV = A^T GO
      matmul_tn(A, GO, gv.data() + b * S * D, S, S, D);
      // dA = GO V^T
      std::fill(dA.begin(), dA.end(), 0.0);
      matmul_nt(GO, V, dA.data(), S, D, S);
      // softmax backward per row
      for (std::size_t i = 0; i < S; ++i) {
        double dot = 0;
        for (std::size_t j = 0; j < S; ++j) dot += dA[i * S + j] * A[i * S + j];
        for (std::size_t j = 0; j < S; ++j)
          dS[i * S + j] = A[i * S + j] * (dA[i * S + j] - dot) * scale;
      }
      // dQ = dS K ; dK = dS^T Q
      kernels::matmul_acc(dS.data(), K, gq.data() + b * S * D, S, S, D);
      matmul_tn(dS.data(), Q, gk.data() + b * S * D, S, S, D);
    }
    g.accum(qn, gq.size(), gq.data());
    g.accum(kn, gk.size(), gk.data());
    g.accum(vn, gv.size(), gv.data());
  };
  return r;
}

Tensor Graph::dropout(const Tensor& a, double p, RngStream& rng, bool train) {
  if (p < 0.0 || p >= 1.0) throw std::invalid_argument("dropout: p must be in [0, 1)");
  if (!train) return a;  // eval mode is the identity
  const std::size_t n = a.size();
  const double keep = 1.0 - p;
  auto mask = std::make_shared<std::vector<double>>(n);
  for (std::size_t i = 0; i < n; ++i) (*mask)[i] = rng.uniform() < keep ? 1.0 / keep : 0.0;
  Tensor r = out("dropout", a.shape, nullptr);
  kernels::mul(a.data->data(), mask->data(), r.data->data(), n);
  int rn = r.node, an = a.node;
  nodes_[rn].back = [rn, an, n, mask](Graph& g) {
    const auto* go = g.gout(rn);
    std::vector<double> ga(n);
    kernels::mul(go->data(), mask->data(), ga.data(), n);
    g.accum(an, n, ga.data());
  };
  return r;
}

// ---------------------------------------------------------------------------
// Backward pass

void Graph::backward(const Tensor& loss) {
  if (loss.size() != 1) throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(loss.shape));
  if (loss.node < 0) throw std::invalid_argument("backward: loss is not on the graph");
  grads_.assign(nodes_.size(), {});
  buf(loss.node, 1)[0] = 1.0;
  for (int i = loss.node; i >= 0; --i) {
    if (grads_[static_cast<std::size_t>(i)].empty()) continue;
    if (nodes_[static_cast<std::size_t>(i)].back) nodes_[static_cast<std::size_t>(i)].back(*this);
  }
}

const std::vector<double>& Graph::grad(const Tensor& t) const {
  static const std::vector<double> kEmpty;
  if (t.node < 0) throw std::invalid_argument("grad: tensor is not on the graph");
  if (static_cast<std::size_t>(t.node) >= grads_.size()) return kEmpty;
  const auto& g = grads_[static_cast<std::size_t>(t.node)];
  if (g.empty()) {
    // Unreachable from the loss: gradient is identically zero.
    auto& mut = const_cast<std::vector<double>&>(g);
    mut.assign(nodes_[static_cast<std::size_t>(t.node)].out_size, 0.0);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Gradient checking

double gradcheck_fn(const std::function<Tensor(Graph&, std::vector<Tensor>&)>& build,
                    std::vector<Tensor> point, double step) {
  if (step <= 0.0) throw std::invalid_argument("gradcheck: step must be > 0");
  // Fixed pseudo-random weights to scalarize the output.
  auto weigh = [](const Tensor& t) {
    RngStream w(0x5eedULL);
    double s = 0;
    for (std::size_t i = 0; i < t.size(); ++i) s += (w.uniform() - 0.5) * (*t.data)[i];
    return s;
  };
  auto eval = [&](std::vector<Tensor>& pt) {
    Graph g;
    std::vector<Tensor> leaves;
    leaves.reserve(pt.size());
    for (auto& t : pt) leaves.push_back(g.leaf(t));
    Tensor o = build(g, leaves);
    double v = weigh(o);
    if (!std::isfinite(v)) throw std::runtime_error("gradcheck: non-finite output");
    return v;
  };

  // Analytic gradients.
  Graph g;
  std::vector<Tensor> leaves;
  for (auto& t : point) leaves.push_back(g.leaf(t));
  Tensor o = build(g, leaves);
  RngStream w(0x5eedULL);
  std::vector<double> wt(o.size());
  for (auto& x : wt) x = w.uniform() - 0.5;
  Tensor loss = g.sum_all(g.mul(g.reshape(o, {o.size()}), Tensor({o.size()}, wt)));
  for (double v : loss.values())
    if (!std::isfinite(v)) throw std::runtime_error("gradcheck: non-finite output");
  g.backward(loss);

  double max_err = 0.0;
  for (std::size_t t = 0; t < point.size(); ++t) {
    const auto& ga = g.grad(leaves[t]);
    for (std::size_t i = 0; i < point[t].size(); ++i) {
      double orig = (*point[t].data)[i];
      (*point[t].data)[i] = orig + step;
      double fp = eval(point);
      (*point[t].data)[i] = orig - step;
      double fm = eval(point);
      (*point[t].data)[i] = orig;
      double fd = (fp - fm) / (2.0 * step);
      double err = std::abs(ga[i] - fd) / std::max(1.0, std::abs(ga[i]));
      max_err = std::max(max_err, err);
    }
  }
  return max_err;
}

namespace {

// gather output shape used by the "slice" and "gather" tags
std::vector<std::size_t> half_idx(std::size_t n) {
  std::vector<std::size_t> ix;
  for (std::size_t i = 0; i < n; i += 2) ix.push_back(i);
  return ix;
}

using Builder = std::function<Tensor(Graph&, std::vector<Tensor>&)>;

const std::map<std::string, Builder>& builders() {
  static const std::map<std::string, Builder> m = {
      {"matmul", [](Graph& g, std::vector<Tensor>& in) { return g.matmul(in.at(0), in.at(1)); }},
      {"bmm", [](Graph& g, std::vector<Tensor>& in) { return g.bmm(in.at(0), in.at(1)); }},
      {"add", [](Graph& g, std::vector<Tensor>& in) { return g.add(in.at(0), in.at(1)); }},
      {"subtract", [](Graph& g, std::vector<Tensor>& in) { return g.sub(in.at(0), in.at(1)); }},
      {"multiply", [](Graph& g, std::vector<Tensor>& in) { return g.mul(in.at(0), in.at(1)); }},
      {"divide", [](Graph& g, std::vector<Tensor>& in) { return g.div(in.at(0), in.at(1)); }},
      {"negate", [](Graph& g, std::vector<Tensor>& in) { return g.neg(in.at(0)); }},
      {"exp", [](Graph& g, std::vector<Tensor>& in) { return g.exp(in.at(0)); }},
      {"log", [](Graph& g, std::vector<Tensor>& in) { return g.log(in.at(0)); }},
      {"sqrt", [](Graph& g, std::vector<Tensor>& in) { return g.sqrt(in.at(0)); }},
      {"tanh", [](Graph& g, std::vector<Tensor>& in) { return g.tanh(in.at(0)); }},
      {"relu", [](Graph& g, std::vector<Tensor>& in) { return g.relu(in.at(0)); }},
      {"softplus", [](Graph& g, std::vector<Tensor>& in) { return g.softplus(in.at(0)); }},
      {"sum", [](Graph& g, std::vector<Tensor>& in) { return g.sum_all(in.at(0)); }},
      {"mean", [](Graph& g, std::vector<Tensor>& in) { return g.mean_all(in.at(0)); }},
      {"sum_axis0", [](Graph& g, std::vector<Tensor>& in) { return g.sum_axis(in.at(0), 0); }},
      {"softmax", [](Graph& g, std::vector<Tensor>& in) { return g.softmax_last(in.at(0)); }},
      {"concatenate", [](Graph& g, std::vector<Tensor>& in) { return g.concat_last(in.at(0), in.at(1)); }},
      {"transpose", [](Graph& g, std::vector<Tensor>& in) { return g.transpose(in.at(0)); }},
      {"slice",
       [](Graph& g, std::vector<Tensor>& in) {
         auto ix = half_idx(in.at(0).size());
         return g.gather(in.at(0), ix, {ix.size()});
       }},
      {"gather",
       [](Graph& g, std::vector<Tensor>& in) {
         auto ix = half_idx(in.at(0).size());
         return g.gather(in.at(0), ix, {ix.size()});
       }},
      {"identity",
       [](Graph& g, std::vector<Tensor>& in) {
         std::vector<std::size_t> ix(in.at(0).size());
         std::iota(ix.begin(), ix.end(), std::size_t{0});
         return g.gather(in.at(0), ix, in.at(0).shape);
       }},
      {"attention",
       [](Graph& g, std::vector<Tensor>& in) { return g.attention(in.at(0), in.at(1), in.at(2)); }},
      {"dropout",
       [](Graph& g, std::vector<Tensor>& in) {
         RngStream r(42);  // fixed mask so the check is deterministic
         return g.dropout(in.at(0), 0.1, r, true);
       }},
  };
  return m;
}

}  // namespace

double gradcheck(const std::string& op_tag, std::vector<Tensor> point, double step) {
  auto it = builders().find(op_tag);
  if (it == builders().end()) throw std::invalid_argument("gradcheck: unknown primitive '" + op_tag + "'");
  return gradcheck_fn(it->second, std::move(point), step);
}

const std::vector<std::string>& gradcheck_primitives() {
  static const std::vector<std::string> tags = [] {
    std::vector<std::string> v;
    for (const auto& [k, _] : builders()) v.push_back(k);
    return v;
  }();
  return tags;
}

}  // namespace boed
