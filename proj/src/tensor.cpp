#include "w2d/tensor.hpp"

#include <algorithm>
#include <cstring>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

namespace w2d {

std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "x" : "") << shape[i];
  out << ']';
  return out.str();
}

void require_finite(std::span<const double> values, std::string_view what) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      std::ostringstream msg;
      msg << what << ": non-finite value " << values[i] << " at flat index " << i;
      throw NonFiniteError(msg.str());
    }
  }
}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), values_(std::move(values)) {
  if (shape_.empty()) throw ShapeError("tensor shape must have at least one axis");
  for (auto d : shape_)
    if (d == 0) throw ShapeError("tensor shape " + shape_string(shape_) + " has a zero extent");
  if (element_count(shape_) != values_.size())
    throw ShapeError("tensor shape " + shape_string(shape_) + " needs " + std::to_string(element_count(shape_)) +
                     " values, got " + std::to_string(values_.size()));
  require_finite(values_, "tensor construction");
}

bool operator==(const Tensor& a, const Tensor& b) {
  return a.shape_ == b.shape_ &&
         std::memcmp(a.values_.data(), b.values_.data(), a.values_.size() * sizeof(double)) == 0;
}

Tensor Tensor::zeros(Shape shape) { return filled(std::move(shape), 0.0); }

Tensor Tensor::filled(Shape shape, double value) {
  const auto n = element_count(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

double Tensor::item() const {
  if (values_.size() != 1) throw ShapeError("item() on non-scalar tensor " + shape_string(shape_));
  return values_[0];
}

Tensor Tensor::reshaped(Shape shape) const { return Tensor(std::move(shape), values_); }

Tensor Tensor::rows(std::size_t begin, std::size_t end) const {
  if (begin >= end || end > shape_.at(0)) throw ShapeError("row range out of bounds");
  const std::size_t stride = values_.size() / shape_[0];
  Shape s = shape_;
  s[0] = end - begin;
  return Tensor(std::move(s), std::vector<double>(values_.begin() + static_cast<std::ptrdiff_t>(begin * stride),
                                                  values_.begin() + static_cast<std::ptrdiff_t>(end * stride)));
}

void ParamSet::add(std::string name, Tensor value) {
  if (contains(name)) throw std::invalid_argument("duplicate parameter name '" + name + "'");
  Tensor grad = Tensor::zeros(value.shape());
  entries_.emplace_back(std::move(name), Parameter{std::move(value), std::move(grad)});
}

bool ParamSet::contains(std::string_view name) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const auto& e) { return e.first == name; });
}

Parameter& ParamSet::at(std::string_view name) {
  for (auto& e : entries_)
    if (e.first == name) return e.second;
  throw std::out_of_range("no parameter named '" + std::string(name) + "'");
}

const Parameter& ParamSet::at(std::string_view name) const {
  return const_cast<ParamSet*>(this)->at(name);
}

std::size_t ParamSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.second.value.size();
  return n;
}

void ParamSet::zero_grad() {
  for (auto& e : entries_) {
    auto g = e.second.grad.mutable_values();
    std::fill(g.begin(), g.end(), 0.0);
  }
}

void ParamSet::sgd_step(double learning_rate) {
  for (auto& [name, p] : entries_) {
    auto v = p.value.mutable_values();
    auto g = p.grad.values();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] -= learning_rate * g[i];
    require_finite(v, "parameter '" + name + "' after SGD step");
  }
}

bool ParamSet::same_values(const ParamSet& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].first != other.entries_[i].first) return false;
    if (!(entries_[i].second.value == other.entries_[i].second.value)) return false;
  }
  return true;
}

}  // namespace w2d
