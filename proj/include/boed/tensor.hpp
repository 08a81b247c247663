#pragma once
// Dense double-precision tensors on a tape-based reverse-mode autodiff
// graph. The graph is append-only and rebuilt per training step; tensors
// without a node id are constants and safe to share across threads.

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "boed/rng.hpp"

namespace boed {

struct Tensor {
  std::vector<std::size_t> shape;
  std::shared_ptr<std::vector<double>> data;
  int node = -1;  // -1: constant (not on any graph)

  Tensor() = default;
  Tensor(std::vector<std::size_t> s, std::vector<double> d);

  static Tensor zeros(std::vector<std::size_t> s);
  static Tensor scalar(double v);

  std::size_t size() const { return data ? data->size() : 0; }
  std::size_t rank() const { return shape.size(); }
  double operator[](std::size_t i) const { return (*data)[i]; }
  double& at(std::size_t i) { return (*data)[i]; }
  const std::vector<double>& values() const { return *data; }
};

std::string shape_str(const std::vector<std::size_t>& s);

class Graph {
 public:
  // Registers a tensor as a differentiable leaf (shares the data buffer).
  Tensor leaf(const Tensor& t);

  // Elementwise binary ops. b may match a's shape, be a rank-1 vector of
  // a's last-axis length (row broadcast), or be a scalar.
  Tensor add(const Tensor& a, const Tensor& b);
  Tensor sub(const Tensor& a, const Tensor& b);
  Tensor mul(const Tensor& a, const Tensor& b);
  Tensor div(const Tensor& a, const Tensor& b);
  Tensor add_scalar(const Tensor& a, double c);
  Tensor mul_scalar(const Tensor& a, double c);

  Tensor neg(const Tensor& a);
  Tensor exp(const Tensor& a);
  Tensor log(const Tensor& a);
  Tensor sqrt(const Tensor& a);
  Tensor tanh(const Tensor& a);
  Tensor relu(const Tensor& a);
  Tensor softplus(const Tensor& a);

  Tensor matmul(const Tensor& a, const Tensor& b);  // [m,k] x [k,n]
  Tensor bmm(const Tensor& a, const Tensor& b);     // [B,m,k] x [B,k,n]
  Tensor transpose(const Tensor& a);                // 2-d

  Tensor sum_all(const Tensor& a);
  Tensor mean_all(const Tensor& a);
  Tensor sum_axis(const Tensor& a, std::size_t axis);
  Tensor softmax_last(const Tensor& a);

  Tensor concat_last(const Tensor& a, const Tensor& b);  // 2-d, same rows
  Tensor reshape(const Tensor& a, std::vector<std::size_t> s);
  // out[i] = a.flat[idx[i]]; gradient scatter-adds. Covers slice and
  // permutation by fixed index list.
  Tensor gather(const Tensor& a, std::vector<std::size_t> idx,
                std::vector<std::size_t> out_shape);

  // Fused batched scaled-dot-product attention: q,k,v are [B,S,D];
  // softmax rows are max-subtracted internally.
  Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v);

  // Inverted dropout; identity when train == false.
  Tensor dropout(const Tensor& a, double p, RngStream& rng, bool train);

  void backward(const Tensor& loss);
  // Gradient of the last backward() w.r.t. a leaf or intermediate node.
  const std::vector<double>& grad(const Tensor& t) const;

  std::size_t n_nodes() const { return nodes_.size(); }

 private:
  struct Node {
    const char* op;
    std::function<void(Graph&)> back;  // empty for leaves
    std::size_t out_size;
  };

  int push(const char* op, std::size_t out_size, std::function<void(Graph&)> back);
  Tensor out(const char* op, std::vector<std::size_t> shape, std::function<void(Graph&)> back);
  std::vector<double>& buf(int node, std::size_t size);
  const std::vector<double>* gout(int node) const;
  void accum(int node, std::size_t size, const double* g);

  std::vector<Node> nodes_;
  std::vector<std::vector<double>> grads_;
};

// Finite-difference check of one primitive's analytic gradient.
// Returns max over input entries of |analytic - central| / max(1, |analytic|).
double gradcheck(const std::string& op_tag, std::vector<Tensor> point, double step);

// Generic version: builder maps leaf tensors to an output tensor; the
// output is scalarized by a fixed pseudo-random weighting.
double gradcheck_fn(
    const std::function<Tensor(Graph&, std::vector<Tensor>&)>& build,
    std::vector<Tensor> point, double step);

// Primitive tags accepted by gradcheck().
const std::vector<std::string>& gradcheck_primitives();

}  // namespace boed
