#include "w2d/worstcase.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace w2d {

namespace {
constexpr double kFractionSlack = 1e-9;

// Indices sorted by descending value, ties by ascending index.
std::vector<std::size_t> descending_order(std::span<const double> values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] > values[b]; });
  return order;
}
}  // namespace

std::size_t ceil_fraction(double fraction, std::size_t n) {
  const double v = fraction * static_cast<double>(n);
  const double r = std::round(v);
  if (std::abs(v - r) <= kFractionSlack * std::max(1.0, v)) return static_cast<std::size_t>(r);
  return static_cast<std::size_t>(std::ceil(v));
}

std::size_t floor_fraction(double fraction, std::size_t n) {
  const double v = fraction * static_cast<double>(n);
  const double r = std::round(v);
  if (std::abs(v - r) <= kFractionSlack * std::max(1.0, v)) return static_cast<std::size_t>(r);
  return static_cast<std::size_t>(std::floor(v));
}

std::size_t FeatureMask::zeros() const { return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), 0)); }

Tensor FeatureMask::as_tensor() const {
  std::vector<double> v(bits.begin(), bits.end());
  return Tensor({bits.size()}, std::move(v));
}

Tensor feature_importance(Model& model, const Tensor& features, std::span<const std::size_t> labels,
                          ImportanceTarget target) {
  if (features.rank() != 2 || features.dim(1) != model.feature_dim())
    throw ShapeError("feature_importance: features must be [N x " + std::to_string(model.feature_dim()) + "], got " +
                     shape_string(features.shape()));
  if (labels.size() != features.dim(0))
    throw ShapeError("feature_importance: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(features.dim(0)) + " samples");
  Tape tape;
  const Var f = tape.input(features, true);
  const Var logits = model.decode(tape, f, false);
  std::vector<std::size_t> targets(labels.begin(), labels.end());
  if (target == ImportanceTarget::predicted_class) {
    const auto lv = logits.value().values();
    const std::size_t c = model.classes();
    for (std::size_t i = 0; i < targets.size(); ++i)
      targets[i] = static_cast<std::size_t>(std::max_element(lv.begin() + i * c, lv.begin() + (i + 1) * c) -
                                            (lv.begin() + i * c));
  }
  const Var picked = pick_sum(logits, targets);
  const auto grads = tape.backward(picked);
  const Tensor& g = grads.at(f);
  std::vector<double> scores(g.size());
  for (std::size_t i = 0; i < scores.size(); ++i) scores[i] = std::abs(g[i]);
  return Tensor(features.shape(), std::move(scores));
}

FeatureMask build_feature_mask(std::span<const double> scores, double phi) {
  if (!(phi >= 0.0 && phi <= 1.0)) throw std::invalid_argument("build_feature_mask: phi must lie in [0, 1]");
  for (double s : scores)
    if (!std::isfinite(s) || s < 0.0) throw std::invalid_argument("build_feature_mask: scores must be finite and >= 0");
  FeatureMask mask{std::vector<std::uint8_t>(scores.size(), 1), phi};
  const std::size_t drop = ceil_fraction(phi, scores.size());
  const auto order = descending_order(scores);
  for (std::size_t i = 0; i < drop; ++i) mask.bits[order[i]] = 0;
  return mask;
}

SampleSelection select_worst_samples(std::span<const double> losses, double rho) {
  if (losses.empty()) throw std::invalid_argument("select_worst_samples: empty batch");
  if (!(rho > 0.0 && rho <= 1.0)) throw std::invalid_argument("select_worst_samples: rho must lie in (0, 1]");
  for (double l : losses)
    if (!std::isfinite(l)) throw std::invalid_argument("select_worst_samples: non-finite loss");
  const std::size_t k = ceil_fraction(rho, losses.size());
  auto order = descending_order(losses);
  order.resize(k);
  std::sort(order.begin(), order.end());
  return SampleSelection{std::move(order), std::vector<double>(losses.begin(), losses.end()), rho};
}

}  // namespace w2d
