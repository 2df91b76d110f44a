#pragma once

// Reverse-mode gradient computation over a fixed set of layer primitives.
//
// A Tape records every primitive applied during one forward pass. Each
// recorded node keeps its value, the ids of its inputs and a closure that
// maps the node's adjoint to its inputs' adjoints. Tape::backward replays the
// nodes in reverse recording order, visiting each exactly once, then clears
// the tape.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "w2d/tensor.hpp"

namespace w2d {

class Tape;

class AutodiffError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Handle to a node on a specific tape. Handles die with the tape recording
// that produced them: any use after Tape::clear() or backward() is an error.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;
  std::uint64_t generation = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

enum class GradMode {
  overwrite,   // zero the parameter buffers touched by this tape first
  accumulate,  // add into whatever the buffers hold
};

// Adjoints of non-parameter leaves requested with Tape::input(..., true).
class LeafGradients {
 public:
  const Tensor& at(const Var& leaf) const;

 private:
  friend class Tape;
  std::vector<std::pair<std::size_t, Tensor>> grads_;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // A data leaf. With requires_grad the leaf's adjoint is returned by backward().
  Var input(Tensor value, bool requires_grad = false);

  // A parameter leaf bound to `params[name]`; backward() writes its gradient
  // buffer. With track = false the parameter enters as a constant.
  Var parameter(ParamSet& params, const std::string& name, bool track = true);

  LeafGradients backward(const Var& loss, GradMode mode = GradMode::overwrite);

  void clear();
  std::size_t size() const { return nodes_.size(); }

  // Used by primitive implementations.
  using Backprop = std::function<void(Tape&, const std::vector<double>& out_grad)>;
  Var record(Tensor value, std::vector<std::size_t> inputs, std::string op, Backprop backprop);
  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  // Adjoint buffer of node `id`, allocated (zeroed) on first use.
  std::vector<double>& grad_buffer(std::size_t id);
  void check(const Var& v) const;

 private:
  struct Node {
    Tensor value;
    std::vector<std::size_t> inputs;
    std::string op;
    Backprop backprop;
    bool requires_grad = false;
    bool wants_leaf_grad = false;
    Parameter* param = nullptr;
    std::string param_name;
    std::vector<double> grad;
  };

  std::vector<Node> nodes_;
  std::uint64_t generation_ = 1;
};

// ---- primitives -----------------------------------------------------------

// y[n, o] = sum_i x[n, i] * w[o, i] + b[o];  x: [N x I], w: [O x I], b: [O]
Var dense(const Var& x, const Var& w, const Var& b);

// x: [N x C x H x W], w: [O x C x K x K], b: [O]
Var conv2d(const Var& x, const Var& w, const Var& b, std::size_t stride, std::size_t padding);

// Subgradient at 0 is 0.
Var relu(const Var& x);

// Square windows; ties resolve to the first maximum in row-major scan order.
Var max_pool2d(const Var& x, std::size_t kernel, std::size_t stride);
Var avg_pool2d(const Var& x, std::size_t kernel, std::size_t stride);

// [N x ...] -> [N x prod(...)]
Var flatten(const Var& x);

// Elementwise product with a constant tensor of the same shape.
Var mul_constant(const Var& x, const Tensor& factor);

// sum_n weights[n] * (-log softmax(logits[n])[labels[n]]). Scalar output.
Var softmax_cross_entropy(const Var& logits, std::span<const std::size_t> labels, std::span<const double> weights);

// Mean over the batch; shorthand for uniform weights 1/N.
Var mean_cross_entropy(const Var& logits, std::span<const std::size_t> labels);

// sum_n weights[n] * (pred[n, 0] - target[n])^2. Scalar output.
Var squared_error(const Var& pred, std::span<const double> targets, std::span<const double> weights);

// sum_n x[n, labels[n]]. Scalar output.
Var pick_sum(const Var& x, std::span<const std::size_t> labels);

Var sum(const Var& x);
Var square(const Var& x);

// Per-sample cross-entropy values, no taping.
std::vector<double> per_sample_cross_entropy(const Tensor& logits, std::span<const std::size_t> labels);

// ---- finite-difference checking ---------------------------------------------

struct GradCheckEntry {
  std::string parameter;
  double max_relative_error = 0.0;
  bool passed = false;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  bool inconclusive = false;  // every analytic and numeric gradient is exactly zero
  bool passed = false;        // all entries pass and the check is conclusive
  double max_relative_error() const;
};

// Builds a scalar loss on the given tape from the current parameter values.
using LossBuilder = std::function<Var(Tape&, ParamSet&)>;

// Compares backward() against central differences for every parameter entry.
// Per tensor the error is max|analytic - numeric| / max(max|analytic|, max|numeric|);
// an entry passes when that error is strictly below `tolerance`.
GradCheckReport finite_diff_check(ParamSet& params, const LossBuilder& loss, double epsilon, double tolerance);

}  // namespace w2d
