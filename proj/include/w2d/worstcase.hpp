#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "w2d/model.hpp"
#include "w2d/tensor.hpp"

namespace w2d {

// ceil(fraction * n), robust to representation error in the product
// (0.7 * 10 evaluates to 7.000000000000001 in binary floating point and must
// round to 7, not 8).
std::size_t ceil_fraction(double fraction, std::size_t n);
// floor(fraction * n) with the same tolerance.
std::size_t floor_fraction(double fraction, std::size_t n);

struct FeatureMask {
  std::vector<std::uint8_t> bits;  // 1 = keep, 0 = muted
  double phi = 0.0;

  std::size_t zeros() const;
  Tensor as_tensor() const;
};

struct SampleSelection {
  std::vector<std::size_t> selected_indices;  // ascending
  std::vector<double> losses;
  double rho = 1.0;
};

enum class ImportanceTarget {
  true_class,       // gradient of the labelled class's logit
  predicted_class,  // gradient of the argmax logit
};

// Per-sample |d logit_target / d feature|, shape [N x feature_dim]. The
// gradient flows through the decoder only; model parameter gradients are
// left untouched.
Tensor feature_importance(Model& model, const Tensor& features, std::span<const std::size_t> labels,
                          ImportanceTarget target = ImportanceTarget::true_class);

// Mutes the ceil(phi * d) highest-scoring positions; equal scores resolve to
// the lowest index first.
FeatureMask build_feature_mask(std::span<const double> scores, double phi);

// Picks the ceil(eta * rho) highest losses; equal losses resolve to the
// lowest index first.
SampleSelection select_worst_samples(std::span<const double> losses, double rho);

}  // namespace w2d
