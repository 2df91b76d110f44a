#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace w2d {

using Shape = std::vector<std::size_t>;

std::size_t element_count(const Shape& shape);
std::string shape_string(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NonFiniteError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Dense row-major array of doubles. Construction rejects a value count that
// does not match the shape and any NaN/Inf entry.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values);
  Tensor(Shape shape, std::initializer_list<double> values)
      : Tensor(std::move(shape), std::vector<double>(values)) {}

  static Tensor zeros(Shape shape);
  static Tensor filled(Shape shape, double value);
  static Tensor scalar(double value) { return Tensor({1}, {value}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }
  bool is_scalar() const { return values_.size() == 1; }

  std::span<const double> values() const { return values_; }
  const double* data() const { return values_.data(); }
  double operator[](std::size_t i) const { return values_[i]; }
  double item() const;

  // Mutable access is reserved for parameter updates and gradient buffers.
  std::span<double> mutable_values() { return values_; }

  // Same values, new shape of equal element count.
  Tensor reshaped(Shape shape) const;

  // Rows [begin, end) along axis 0.
  Tensor rows(std::size_t begin, std::size_t end) const;

  // Bitwise comparison (distinguishes +0 from -0).
  friend bool operator==(const Tensor& a, const Tensor& b);

 private:
  Shape shape_;
  std::vector<double> values_;
};

// Throws NonFiniteError naming `what` if any entry is NaN/Inf.
void require_finite(std::span<const double> values, std::string_view what);

struct Parameter {
  Tensor value;
  Tensor grad;
};

// Named parameter tensors with same-shaped gradient buffers, kept in
// insertion order so that iteration (and therefore serialization and SGD)
// is deterministic.
class ParamSet {
 public:
  void add(std::string name, Tensor value);

  bool contains(std::string_view name) const;
  Parameter& at(std::string_view name);
  const Parameter& at(std::string_view name) const;

  std::size_t size() const { return entries_.size(); }
  std::size_t scalar_count() const;

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  void zero_grad();

  // value <- value - learning_rate * grad, for every parameter.
  void sgd_step(double learning_rate);

  // True when every name, shape and value matches bitwise.
  bool same_values(const ParamSet& other) const;

 private:
  std::vector<std::pair<std::string, Parameter>> entries_;
};

}  // namespace w2d
