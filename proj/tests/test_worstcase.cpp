#include <doctest.h>

#include <algorithm>
#include <bit>
#include <numeric>

#include "test_util.hpp"
#include "w2d/worstcase.hpp"

using namespace w2d;
using w2d::test::random_tensor;

namespace {

std::vector<std::uint8_t> bits(std::initializer_list<int> v) { return {v.begin(), v.end()}; }

// Best subset of size k by total value; among equal totals the
// lexicographically smallest index list wins, which is the low-index rule.
std::vector<std::size_t> subset_oracle(const std::vector<double>& v, std::size_t k) {
  std::vector<std::size_t> best;
  double best_total = -1e300;
  for (std::uint32_t m = 0; m < (1u << v.size()); ++m) {
    if (static_cast<std::size_t>(std::popcount(m)) != k) continue;
    std::vector<std::size_t> s;
    double total = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i)
      if (m >> i & 1u) {
        s.push_back(i);
        total += v[i];
      }
    if (total > best_total || (total == best_total && s < best)) {
      best = s;
      best_total = total;
    }
  }
  return best;
}

std::vector<std::size_t> muted_positions(const FeatureMask& m) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < m.bits.size(); ++i)
    if (m.bits[i] == 0) out.push_back(i);
  return out;
}

}  // namespace

TEST_CASE("fraction rounding ignores representation error") {
  CHECK(ceil_fraction(0.7, 10) == 7);
  CHECK(ceil_fraction(0.3, 64) == 20);
  CHECK(ceil_fraction(1.0 / 3.0, 3) == 1);
  CHECK(ceil_fraction(0.0, 5) == 0);
  CHECK(floor_fraction(0.8, 5) == 4);
  CHECK(floor_fraction(0.7, 10) == 7);
}

TEST_CASE("mask examples") {
  CHECK(build_feature_mask(std::vector<double>{3, 1, 4, 1, 5}, 0.4).bits == bits({1, 1, 0, 1, 0}));
  CHECK(build_feature_mask(std::vector<double>{3, 1, 4, 1, 5}, 0.0).bits == bits({1, 1, 1, 1, 1}));
  CHECK(build_feature_mask(std::vector<double>{2, 2, 1}, 1.0 / 3.0).bits == bits({0, 1, 1}));
  const auto all = build_feature_mask(std::vector<double>{1, 2}, 1.0);
  CHECK(all.zeros() == 2);
  CHECK(all.as_tensor() == Tensor({2}, {0.0, 0.0}));
  CHECK_THROWS(build_feature_mask(std::vector<double>{1, 2}, -0.1));
  CHECK_THROWS(build_feature_mask(std::vector<double>{1, 2}, 1.5));
}

TEST_CASE("selection examples") {
  using V = std::vector<std::size_t>;
  CHECK(select_worst_samples(std::vector<double>{0.1, 2.3, 0.5, 1.7}, 0.5).selected_indices == V{1, 3});
  CHECK(select_worst_samples(std::vector<double>{0.1, 2.3, 0.5, 1.7}, 1.0).selected_indices == V{0, 1, 2, 3});
  CHECK(select_worst_samples(std::vector<double>{1, 1, 1, 1}, 0.25).selected_indices == V{0});
  CHECK_THROWS(select_worst_samples(std::vector<double>{}, 0.5));
  CHECK_THROWS(select_worst_samples(std::vector<double>{1.0}, 0.0));
  CHECK_THROWS(select_worst_samples(std::vector<double>{1.0}, -0.2));
}

TEST_CASE("selection and masks agree with the exhaustive subset oracle") {
  Rng rng(13);
  for (int c = 0; c < 2000; ++c) {
    const std::size_t n = 1 + rng.below(8);
    std::vector<double> v(n);
    for (auto& x : v) x = c % 2 ? static_cast<double>(rng.below(3)) : rng.uniform(0.0, 2.0);
    const double rho = rng.uniform(0.01, 1.0), phi = rng.uniform(0.0, 1.0);
    const auto sel = select_worst_samples(v, rho);
    CHECK(sel.selected_indices == subset_oracle(v, ceil_fraction(rho, n)));
    const auto mask = build_feature_mask(v, phi);
    CHECK(muted_positions(mask) == subset_oracle(v, ceil_fraction(phi, n)));
  }
}

TEST_CASE("selection follows the values under permutation") {
  Rng rng(17);
  for (int c = 0; c < 200; ++c) {
    const std::size_t n = 2 + rng.below(30);
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform();  // distinct with probability one
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm);
    std::vector<double> pv(n);
    for (std::size_t i = 0; i < n; ++i) pv[i] = v[perm[i]];
    const double rho = rng.uniform(0.05, 1.0);
    std::vector<double> a, b;
    for (auto i : select_worst_samples(v, rho).selected_indices) a.push_back(v[i]);
    for (auto i : select_worst_samples(pv, rho).selected_indices) b.push_back(pv[i]);
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    CHECK(a == b);
  }
}

TEST_CASE("linear decoder importance is the absolute class row") {
  Rng rng(19);
  Model m = build_model(linear_spec({4}, 3), 5);
  const std::vector<std::size_t> labels{2, 0, 2};
  const auto w = m.params().at("decoder.0.weight").value.values();
  const Tensor a = feature_importance(m, random_tensor(rng, {3, 4}), labels);
  const Tensor b = feature_importance(m, random_tensor(rng, {3, 4}, -10, 10), labels);
  CHECK(a == b);
  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t j = 0; j < 4; ++j) CHECK(a[n * 4 + j] == std::abs(w[labels[n] * 4 + j]));
  for (const auto& [name, p] : m.params())
    for (double g : p.grad.values()) CHECK(g == 0.0);
}

TEST_CASE("zero decoder weights give zero importance") {
  Model m = build_model(linear_spec({4}, 2), 5);
  for (auto& v : m.params().at("decoder.0.weight").value.mutable_values()) v = 0.0;
  Rng rng(1);
  const Tensor scores = feature_importance(m, random_tensor(rng, {2, 4}), std::vector<std::size_t>{0, 1});
  for (double s : scores.values()) CHECK(s == 0.0);
}

TEST_CASE("nonlinear decoder importance matches central differences") {
  const ModelSpec spec = parse_model_spec(
      "input = 5\nclasses = 3\nencoder = dense units=4\ndecoder = dense units=6\ndecoder = relu\ndecoder = dense units=3\n");
  Rng rng(23);
  for (int trial = 0; trial < 20; ++trial) {
    Model m = build_model(spec, 40 + static_cast<std::uint64_t>(trial));
    const Tensor f = random_tensor(rng, {2, 4});
    const std::vector<std::size_t> y{rng.below(3), rng.below(3)};
    const Tensor s = feature_importance(m, f, y);
    double max_diff = 0.0, scale = 0.0;
    for (std::size_t r = 0; r < 2; ++r)
      for (std::size_t j = 0; j < 4; ++j) {
        auto logit = [&](double delta) {
          std::vector<double> v(f.values().begin(), f.values().end());
          v[r * 4 + j] += delta;
          Tape t;
          return m.decode(t, t.input(Tensor({2, 4}, v)), false).value()[r * 3 + y[r]];
        };
        const double fd = std::abs((logit(1e-5) - logit(-1e-5)) / 2e-5);
        max_diff = std::max(max_diff, std::abs(fd - s[r * 4 + j]));
        scale = std::max({scale, fd, s[r * 4 + j]});
      }
    CHECK(max_diff <= 1e-5 * std::max(scale, 1e-12));
  }
}

TEST_CASE("predicted-class importance follows the argmax") {
  Model m = build_model(linear_spec({3}, 2), 8);
  const Tensor f({1, 3}, {1.0, -2.0, 0.5});
  Tape t;
  const Tensor logits = m.decode(t, t.input(f), false).value();
  const std::size_t top = logits[1] > logits[0] ? 1 : 0;
  CHECK(feature_importance(m, f, std::vector<std::size_t>{1 - top}, ImportanceTarget::predicted_class) ==
        feature_importance(m, f, std::vector<std::size_t>{top}));
}

TEST_CASE("importance rejects mismatched batches") {
  Model m = build_model(linear_spec({3}, 2), 8);
  CHECK_THROWS(feature_importance(m, Tensor::zeros({2, 3}), std::vector<std::size_t>{0}));
  CHECK_THROWS(feature_importance(m, Tensor::zeros({1, 4}), std::vector<std::size_t>{0}));
}
