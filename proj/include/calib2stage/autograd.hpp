#pragma once

// Define-by-run reverse-mode differentiation. A Tape is rebuilt for every
// forward pass; ops append nodes whose parents always precede them, so the
// reverse of insertion order is a valid topological order for backward.

#include <cstddef>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "calib2stage/tensor.hpp"

namespace calib2stage {

class Tape;

// Handle to a node recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  std::size_t id() const { return id_; }
  Tape& tape() const { return *tape_; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Parameter name -> gradient of identical shape.
using GradientMap = std::map<std::string, Tensor>;

class Tape {
 public:
  // Accumulates the node's output gradient into its parents' gradients.
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Leaf that never receives a gradient.
  Var constant(Tensor value);
  // Leaf whose gradient is reported under `name` by backward().
  Var parameter(Tensor value, std::string name);
  // Leaf that receives a gradient but is not reported (e.g. an input under test).
  Var variable(Tensor value);

  // Appends an op node. `fn` is kept only when some parent requires a gradient.
  Var record(Tensor value, std::initializer_list<Var> parents, BackwardFn fn);

  // Reverse sweep from a scalar loss. Every node on the tape is visited once.
  GradientMap backward(const Var& loss);

  // Gradient of a non-parameter leaf after backward(); zeros if unreached.
  Tensor gradient_of(const Var& v) const;

  std::size_t size() const { return nodes_.size(); }
  std::size_t last_backward_visits() const { return visits_; }

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  // Gradient buffer of a node, allocated as zeros on first access.
  Tensor& grad(std::size_t id);

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> parents;
    BackwardFn backward;
    bool requires_grad = false;
    std::string param_name;
  };

  Var push(Node node);

  std::vector<Node> nodes_;
  std::size_t visits_ = 0;
};

// ---- differentiable ops --------------------------------------------------

Var matmul(const Var& a, const Var& b);             // [m x k] * [k x n]
Var add_bias(const Var& x, const Var& bias);        // [b x n] + [n] per row
Var add(const Var& a, const Var& b);                // same shape
Var sub(const Var& a, const Var& b);                // same shape
Var mul(const Var& a, const Var& b);                // elementwise, same shape
Var scale(const Var& x, double factor);
Var add_scalar(const Var& x, double offset);
Var square(const Var& x);
Var exp(const Var& x);
Var relu(const Var& x);                             // subgradient 0 at 0
Var log_sigmoid(const Var& x);                      // -log(1 + e^{-x}), stable
Var log_softmax(const Var& logits);                 // row-wise over [b x K]
Var sum(const Var& x);                              // -> scalar
Var mean(const Var& x);                             // -> scalar
Var row_sum(const Var& x);                          // [b x n] -> [b]
Var pick(const Var& x, std::span<const int> cols);  // [b x K] -> [b], x[r, cols[r]]
Var reshape(const Var& x, Shape shape);

// Valid cross-correlation, stride 1: [b,c,h,w] (*) [o,c,k,k] + bias[o] -> [b,o,h-k+1,w-k+1].
Var conv2d(const Var& x, const Var& kernel, const Var& bias);
// Non-overlapping 2x2 max pool over [b,c,h,w]; h and w must be even.
// Gradient routes to the first maximal element in row-major window order.
Var maxpool2d(const Var& x);

// ---- plain tensor helpers (no tape) ---------------------------------------

// Row-wise softmax of [b x K] logits, logsumexp-stabilized.
Tensor softmax_rows(const Tensor& logits);
Tensor log_softmax_rows(const Tensor& logits);

}  // namespace calib2stage
