#include "w2d/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "w2d/kernels.hpp"

namespace w2d {

const Tensor& Var::value() const {
  if (tape == nullptr) throw AutodiffError("Var is not attached to a tape");
  tape->check(*this);
  return tape->value(id);
}

const Tensor& LeafGradients::at(const Var& leaf) const {
  for (const auto& [id, g] : grads_)
    if (id == leaf.id) return g;
  throw AutodiffError("no gradient recorded for leaf node " + std::to_string(leaf.id) +
                      " (was it created with requires_grad?)");
}

void Tape::check(const Var& v) const {
  if (v.tape != this) throw AutodiffError("Var belongs to a different tape");
  if (v.generation != generation_ || v.id >= nodes_.size())
    throw AutodiffError("Var refers to a node that is no longer on the tape");
}

Var Tape::input(Tensor value, bool requires_grad) {
  Node node;
  node.value = std::move(value);
  node.op = "input";
  node.requires_grad = requires_grad;
  node.wants_leaf_grad = requires_grad;
  nodes_.push_back(std::move(node));
  return Var{this, nodes_.size() - 1, generation_};
}

Var Tape::parameter(ParamSet& params, const std::string& name, bool track) {
  Parameter& p = params.at(name);
  Node node;
  node.value = p.value;
  node.op = "parameter";
  node.requires_grad = track;
  node.param = track ? &p : nullptr;
  node.param_name = name;
  nodes_.push_back(std::move(node));
  return Var{this, nodes_.size() - 1, generation_};
}

Var Tape::record(Tensor value, std::vector<std::size_t> inputs, std::string op, Backprop backprop) {
  Node node;
  node.value = std::move(value);
  node.requires_grad = std::any_of(inputs.begin(), inputs.end(), [&](std::size_t i) { return nodes_[i].requires_grad; });
  node.inputs = std::move(inputs);
  node.op = std::move(op);
  if (node.requires_grad) node.backprop = std::move(backprop);
  nodes_.push_back(std::move(node));
  return Var{this, nodes_.size() - 1, generation_};
}

std::vector<double>& Tape::grad_buffer(std::size_t id) {
  auto& node = nodes_.at(id);
  if (node.grad.empty()) node.grad.assign(node.value.size(), 0.0);
  return node.grad;
}

void Tape::clear() {
  nodes_.clear();
  ++generation_;
}

LeafGradients Tape::backward(const Var& loss, GradMode mode) {
  if (loss.tape != this || loss.generation != generation_ || loss.id >= nodes_.size())
    throw AutodiffError("backward: loss is not on this tape");
  if (!nodes_[loss.id].value.is_scalar())
    throw AutodiffError("backward: loss must be scalar, got shape " + shape_string(nodes_[loss.id].value.shape()));

  if (mode == GradMode::overwrite) {
    for (auto& node : nodes_)
      if (node.param != nullptr) {
        auto g = node.param->grad.mutable_values();
        std::fill(g.begin(), g.end(), 0.0);
      }
  }

  LeafGradients leaves;
  grad_buffer(loss.id)[0] = 1.0;
  for (std::size_t id = loss.id + 1; id-- > 0;) {
    Node& node = nodes_[id];
    if (node.grad.empty() || !node.requires_grad) continue;
    for (std::size_t i = 0; i < node.grad.size(); ++i) {
      if (!std::isfinite(node.grad[i])) {
        std::ostringstream msg;
        msg << "backward: non-finite adjoint " << node.grad[i] << " at node " << id << " (" << node.op;
        if (!node.param_name.empty()) msg << " '" << node.param_name << "'";
        msg << "), flat index " << i;
        clear();
        throw NonFiniteError(msg.str());
      }
    }
    if (node.param != nullptr) {
      auto g = node.param->grad.mutable_values();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += node.grad[i];
    }
    if (node.wants_leaf_grad) leaves.grads_.emplace_back(id, Tensor(node.value.shape(), node.grad));
    if (node.backprop) node.backprop(*this, node.grad);
  }
  clear();
  return leaves;
}

namespace {

Tape& tape_of(std::initializer_list<const Var*> vars) {
  Tape* t = (*vars.begin())->tape;
  for (const Var* v : vars) {
    if (v->tape == nullptr || v->tape != t) throw AutodiffError("operands live on different tapes");
    t->check(*v);
  }
  return *t;
}

void require_rank(const Tensor& t, std::size_t rank, const char* op, const char* what) {
  if (t.rank() != rank)
    throw ShapeError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) + ", got " +
                     shape_string(t.shape()));
}

void add_into(std::vector<double>& dst, std::span<const double> src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

// Log-sum-exp cross-entropy for one row.
double row_cross_entropy(const double* row, std::size_t classes, std::size_t label) {
  double m = row[0];
  for (std::size_t c = 1; c < classes; ++c) m = std::max(m, row[c]);
  double s = 0.0;
  for (std::size_t c = 0; c < classes; ++c) s += std::exp(row[c] - m);
  return m + std::log(s) - row[label];
}

void check_labels(std::span<const std::size_t> labels, std::size_t batch, std::size_t classes, const char* op) {
  if (labels.size() != batch)
    throw ShapeError(std::string(op) + ": " + std::to_string(labels.size()) + " labels for batch of " +
                     std::to_string(batch));
  for (auto y : labels)
    if (y >= classes)
      throw std::out_of_range(std::string(op) + ": label " + std::to_string(y) + " outside [0, " +
                              std::to_string(classes) + ")");
}

}  // namespace

Var dense(const Var& x, const Var& w, const Var& b) {
  Tape& t = tape_of({&x, &w, &b});
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  const Tensor& bv = b.value();
  require_rank(xv, 2, "dense", "input");
  require_rank(wv, 2, "dense", "weight");
  require_rank(bv, 1, "dense", "bias");
  if (wv.dim(1) != xv.dim(1) || bv.dim(0) != wv.dim(0))
    throw ShapeError("dense: incompatible shapes " + shape_string(xv.shape()) + ", " + shape_string(wv.shape()) +
                     ", " + shape_string(bv.shape()));
  const kernels::DenseDims d{xv.dim(0), xv.dim(1), wv.dim(0)};
  std::vector<double> y(d.batch * d.out);
  kernels::dense_forward(d, xv.values(), wv.values(), bv.values(), y);
  const std::size_t xi = x.id, wi = w.id, bi = b.id;
  return t.record(Tensor({d.batch, d.out}, std::move(y)), {xi, wi, bi}, "dense",
                  [d, xi, wi, bi](Tape& tp, const std::vector<double>& g) {
                    if (tp.requires_grad(xi)) kernels::dense_backward_input(d, g, tp.value(wi).values(), tp.grad_buffer(xi));
                    if (tp.requires_grad(wi) || tp.requires_grad(bi)) {
                      auto& gw = tp.grad_buffer(wi);
                      auto& gb = tp.grad_buffer(bi);
                      kernels::dense_backward_params(d, g, tp.value(xi).values(), gw, gb);
                    }
                  });
}

Var conv2d(const Var& x, const Var& w, const Var& b, std::size_t stride, std::size_t padding) {
  Tape& t = tape_of({&x, &w, &b});
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  const Tensor& bv = b.value();
  require_rank(xv, 4, "conv2d", "input");
  require_rank(wv, 4, "conv2d", "weight");
  require_rank(bv, 1, "conv2d", "bias");
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  if (wv.dim(1) != xv.dim(1) || wv.dim(2) != wv.dim(3) || bv.dim(0) != wv.dim(0))
    throw ShapeError("conv2d: incompatible shapes " + shape_string(xv.shape()) + ", " + shape_string(wv.shape()));
  const kernels::Conv2dDims d{xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3), wv.dim(0), wv.dim(2), stride, padding};
  if (d.height + 2 * padding < d.kernel || d.width + 2 * padding < d.kernel)
    throw ShapeError("conv2d: kernel larger than padded input");
  std::vector<double> y(d.batch * d.out_channels * d.out_height() * d.out_width());
  kernels::conv2d_forward(d, xv.values(), wv.values(), bv.values(), y);
  const std::size_t xi = x.id, wi = w.id, bi = b.id;
  return t.record(Tensor({d.batch, d.out_channels, d.out_height(), d.out_width()}, std::move(y)), {xi, wi, bi},
                  "conv2d", [d, xi, wi, bi](Tape& tp, const std::vector<double>& g) {
                    if (tp.requires_grad(xi))
                      kernels::conv2d_backward_input(d, g, tp.value(wi).values(), tp.grad_buffer(xi));
                    if (tp.requires_grad(wi) || tp.requires_grad(bi)) {
                      auto& gw = tp.grad_buffer(wi);
                      auto& gb = tp.grad_buffer(bi);
                      kernels::conv2d_backward_params(d, g, tp.value(xi).values(), gw, gb);
                    }
                  });
}

Var relu(const Var& x) {
  Tape& t = tape_of({&x});
  const Tensor& xv = x.value();
  std::vector<double> y(xv.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  const std::size_t xi = x.id;
  return t.record(Tensor(xv.shape(), std::move(y)), {xi}, "relu", [xi](Tape& tp, const std::vector<double>& g) {
    const auto xs = tp.value(xi).values();
    auto& gx = tp.grad_buffer(xi);
    for (std::size_t i = 0; i < gx.size(); ++i)
      if (xs[i] > 0.0) gx[i] += g[i];
  });
}

namespace {

kernels::Pool2dDims pool_dims(const Tensor& xv, std::size_t kernel, std::size_t stride, const char* op) {
  require_rank(xv, 4, op, "input");
  if (kernel == 0 || stride == 0) throw ShapeError(std::string(op) + ": kernel and stride must be positive");
  if (kernel > xv.dim(2) || kernel > xv.dim(3)) throw ShapeError(std::string(op) + ": window larger than input");
  return kernels::Pool2dDims{xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3), kernel, stride};
}

}  // namespace

Var max_pool2d(const Var& x, std::size_t kernel, std::size_t stride) {
  Tape& t = tape_of({&x});
  const Tensor& xv = x.value();
  const auto d = pool_dims(xv, kernel, stride, "max_pool2d");
  const std::size_t out = d.batch * d.channels * d.out_height() * d.out_width();
  std::vector<double> y(out);
  std::vector<std::size_t> argmax(out);
  kernels::maxpool_forward(d, xv.values(), y, argmax);
  const std::size_t xi = x.id;
  return t.record(Tensor({d.batch, d.channels, d.out_height(), d.out_width()}, std::move(y)), {xi}, "max_pool2d",
                  [d, xi, argmax = std::move(argmax)](Tape& tp, const std::vector<double>& g) {
                    kernels::maxpool_backward(d, g, argmax, tp.grad_buffer(xi));
                  });
}

Var avg_pool2d(const Var& x, std::size_t kernel, std::size_t stride) {
  Tape& t = tape_of({&x});
  const Tensor& xv = x.value();
  const auto d = pool_dims(xv, kernel, stride, "avg_pool2d");
  std::vector<double> y(d.batch * d.channels * d.out_height() * d.out_width());
  kernels::avgpool_forward(d, xv.values(), y);
  const std::size_t xi = x.id;
  return t.record(Tensor({d.batch, d.channels, d.out_height(), d.out_width()}, std::move(y)), {xi}, "avg_pool2d",
                  [d, xi](Tape& tp, const std::vector<double>& g) {
                    kernels::avgpool_backward(d, g, tp.grad_buffer(xi));
                  });
}

Var flatten(const Var& x) {
  Tape& t = tape_of({&x});
  const Tensor& xv = x.value();
  if (xv.rank() < 2) throw ShapeError("flatten: input needs a batch axis and at least one feature axis");
  const std::size_t xi = x.id;
  return t.record(xv.reshaped({xv.dim(0), xv.size() / xv.dim(0)}), {xi}, "flatten",
                  [xi](Tape& tp, const std::vector<double>& g) { add_into(tp.grad_buffer(xi), g); });
}

Var mul_constant(const Var& x, const Tensor& factor) {
  Tape& t = tape_of({&x});
  const Tensor& xv = x.value();
  if (xv.shape() != factor.shape())
    throw ShapeError("mul_constant: shape " + shape_string(xv.shape()) + " vs factor " + shape_string(factor.shape()));
  std::vector<double> y(xv.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xv[i] * factor[i];
  const std::size_t xi = x.id;
  return t.record(Tensor(xv.shape(), std::move(y)), {xi}, "mul_constant",
                  [xi, factor](Tape& tp, const std::vector<double>& g) {
                    auto& gx = tp.grad_buffer(xi);
                    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * factor[i];
                  });
}

Var softmax_cross_entropy(const Var& logits, std::span<const std::size_t> labels, std::span<const double> weights) {
  Tape& t = tape_of({&logits});
  const Tensor& lv = logits.value();
  require_rank(lv, 2, "softmax_cross_entropy", "logits");
  const std::size_t n = lv.dim(0), classes = lv.dim(1);
  check_labels(labels, n, classes, "softmax_cross_entropy");
  if (weights.size() != n) throw ShapeError("softmax_cross_entropy: weight count does not match batch");
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (weights[i] == 0.0) continue;
    total += weights[i] * row_cross_entropy(lv.data() + i * classes, classes, labels[i]);
  }
  const std::size_t li = logits.id;
  std::vector<std::size_t> ys(labels.begin(), labels.end());
  std::vector<double> ws(weights.begin(), weights.end());
  return t.record(Tensor::scalar(total), {li}, "softmax_cross_entropy",
                  [li, n, classes, ys = std::move(ys), ws = std::move(ws)](Tape& tp, const std::vector<double>& g) {
                    const auto lvals = tp.value(li).values();
                    auto& gl = tp.grad_buffer(li);
                    for (std::size_t i = 0; i < n; ++i) {
                      if (ws[i] == 0.0) continue;
                      const double* row = lvals.data() + i * classes;
                      double m = row[0];
                      for (std::size_t c = 1; c < classes; ++c) m = std::max(m, row[c]);
                      double s = 0.0;
                      for (std::size_t c = 0; c < classes; ++c) s += std::exp(row[c] - m);
                      const double scale = g[0] * ws[i];
                      for (std::size_t c = 0; c < classes; ++c) {
                        const double p = std::exp(row[c] - m) / s;
                        gl[i * classes + c] += scale * (p - (c == ys[i] ? 1.0 : 0.0));
                      }
                    }
                  });
}

Var mean_cross_entropy(const Var& logits, std::span<const std::size_t> labels) {
  const std::size_t n = logits.value().dim(0);
  const std::vector<double> w(n, 1.0 / static_cast<double>(n));
  return softmax_cross_entropy(logits, labels, w);
}

Var squared_error(const Var& pred, std::span<const double> targets, std::span<const double> weights) {
  Tape& t = tape_of({&pred});
  const Tensor& pv = pred.value();
  require_rank(pv, 2, "squared_error", "prediction");
  if (pv.dim(1) != 1) throw ShapeError("squared_error: prediction must be [N x 1]");
  const std::size_t n = pv.dim(0);
  if (targets.size() != n || weights.size() != n) throw ShapeError("squared_error: target/weight count mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double r = pv[i] - targets[i];
    total += weights[i] * r * r;
  }
  const std::size_t pi = pred.id;
  std::vector<double> ts(targets.begin(), targets.end()), ws(weights.begin(), weights.end());
  return t.record(Tensor::scalar(total), {pi}, "squared_error",
                  [pi, ts = std::move(ts), ws = std::move(ws)](Tape& tp, const std::vector<double>& g) {
                    const auto pv = tp.value(pi).values();
                    auto& gp = tp.grad_buffer(pi);
                    for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[0] * ws[i] * 2.0 * (pv[i] - ts[i]);
                  });
}

Var pick_sum(const Var& x, std::span<const std::size_t> labels) {
  Tape& t = tape_of({&x});
  const Tensor& xv = x.value();
  require_rank(xv, 2, "pick_sum", "input");
  const std::size_t n = xv.dim(0), classes = xv.dim(1);
  check_labels(labels, n, classes, "pick_sum");
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) total += xv[i * classes + labels[i]];
  const std::size_t xi = x.id;
  std::vector<std::size_t> ys(labels.begin(), labels.end());
  return t.record(Tensor::scalar(total), {xi}, "pick_sum",
                  [xi, classes, ys = std::move(ys)](Tape& tp, const std::vector<double>& g) {
                    auto& gx = tp.grad_buffer(xi);
                    for (std::size_t i = 0; i < ys.size(); ++i) gx[i * classes + ys[i]] += g[0];
                  });
}

Var sum(const Var& x) {
  Tape& t = tape_of({&x});
  const Tensor& xv = x.value();
  double total = 0.0;
  for (double v : xv.values()) total += v;
  const std::size_t xi = x.id;
  return t.record(Tensor::scalar(total), {xi}, "sum", [xi](Tape& tp, const std::vector<double>& g) {
    auto& gx = tp.grad_buffer(xi);
    for (double& v : gx) v += g[0];
  });
}

Var square(const Var& x) {
  Tape& t = tape_of({&x});
  const Tensor& xv = x.value();
  std::vector<double> y(xv.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xv[i] * xv[i];
  const std::size_t xi = x.id;
  return t.record(Tensor(xv.shape(), std::move(y)), {xi}, "square", [xi](Tape& tp, const std::vector<double>& g) {
    const auto xs = tp.value(xi).values();
    auto& gx = tp.grad_buffer(xi);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * 2.0 * xs[i];
  });
}

std::vector<double> per_sample_cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
  require_rank(logits, 2, "per_sample_cross_entropy", "logits");
  const std::size_t n = logits.dim(0), classes = logits.dim(1);
  check_labels(labels, n, classes, "per_sample_cross_entropy");
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = row_cross_entropy(logits.data() + i * classes, classes, labels[i]);
  return out;
}

double GradCheckReport::max_relative_error() const {
  double m = 0.0;
  for (const auto& e : entries) m = std::max(m, e.max_relative_error);
  return m;
}

GradCheckReport finite_diff_check(ParamSet& params, const LossBuilder& loss, double epsilon, double tolerance) {
  if (!(epsilon > 0.0)) throw std::invalid_argument("finite_diff_check: epsilon must be positive");
  for (const auto& [name, p] : params) require_finite(p.value.values(), "finite_diff_check parameter '" + name + "'");

  Tape tape;
  tape.backward(loss(tape, params), GradMode::overwrite);
  std::vector<Tensor> analytic;
  for (const auto& [name, p] : params) analytic.push_back(p.grad);

  auto evaluate = [&] {
    Tape t;
    const double v = loss(t, params).value().item();
    t.clear();
    return v;
  };

  GradCheckReport report;
  bool any_nonzero = false;
  std::size_t k = 0;
  for (auto& [name, p] : params) {
    auto values = p.value.mutable_values();
    const auto a = analytic[k++].values();
    double max_diff = 0.0, max_a = 0.0, max_n = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double orig = values[i];
      values[i] = orig + epsilon;
      const double plus = evaluate();
      values[i] = orig - epsilon;
      const double minus = evaluate();
      values[i] = orig;
      const double numeric = (plus - minus) / (2.0 * epsilon);
      max_diff = std::max(max_diff, std::abs(a[i] - numeric));
      max_a = std::max(max_a, std::abs(a[i]));
      max_n = std::max(max_n, std::abs(numeric));
    }
    const double scale = std::max(max_a, max_n);
    if (scale > 0.0) any_nonzero = true;
    GradCheckEntry entry{name, scale > 0.0 ? max_diff / scale : 0.0, false};
    entry.passed = entry.max_relative_error < tolerance;
    report.entries.push_back(entry);
  }
  report.inconclusive = !any_nonzero;
  report.passed = !report.inconclusive &&
                  std::all_of(report.entries.begin(), report.entries.end(), [](const auto& e) { return e.passed; });
  return report;
}

}  // namespace w2d
