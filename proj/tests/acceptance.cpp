// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
// Usage: acceptance [criterion numbers...]   (default: all ten)

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "w2d/autodiff.hpp"
#include "w2d/experiment.hpp"
#include "w2d/worstcase.hpp"

using namespace w2d;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fixed(double v, int digits = 2) {
  std::ostringstream s;
  s.setf(std::ios::fixed);
  s.precision(digits);
  s << v;
  return s.str();
}

Tensor random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(element_count(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(v));
}

std::filesystem::path source_dir() { return W2D_SOURCE_DIR; }

// ---- 1: ranking scores against the published columns ---------------------------

Outcome ranking_reproduction() {
  const auto t0 = Clock::now();
  std::size_t rows = 0;
  std::vector<std::string> mismatches;
  for (const char* name : {"diversity_shift", "correlation_shift", "correlation_shift_cmnist_avg"}) {
    const auto dir = source_dir() / "data" / "tables";
    const auto table = build_ranking_table(read_accuracy_csv(dir / (std::string(name) + ".csv")), "ERM");
    std::map<std::string, int> computed;
    for (const auto& r : table.rows) computed[r.algorithm] = r.score;

    std::ifstream in(dir / (std::string(name) + ".published.csv"));
    std::string line;
    std::getline(in, line);  // header: algorithm,average,prev_score,ranking_score
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      std::vector<std::string> f;
      std::stringstream ss(line);
      for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
      const int published = std::stoi(f.at(3));
      ++rows;
      const auto it = computed.find(f[0]);
      if (it == computed.end()) {
        mismatches.push_back(std::string(name) + ":" + f[0] + " missing");
      } else if (it->second != published) {
        mismatches.push_back(std::string(name) + ":" + f[0] + " " + std::to_string(it->second) + " vs " +
                             std::to_string(published));
      }
    }
  }
  const double secs = seconds_since(t0);
  std::string detail = std::to_string(rows - mismatches.size()) + "/" + std::to_string(rows) + " rows match, " +
                       fixed(secs, 3) + " s";
  for (const auto& m : mismatches) detail += "; " + m;
  return {rows == 51 && mismatches.empty() && secs < 1.0, detail};
}

// ---- 2: W2D(rho = 1, beta = 0) reproduces ERM bitwise --------------------------

Outcome erm_equivalence() {
  const auto t0 = Clock::now();
  const auto bundle = generate_two_shift(11, 0.0, 0.9, 500);
  const std::vector<Environment> parts{bundle.env("train0"), bundle.env("train1")};
  const Environment data = concat(parts, "train");
  const ModelSpec spec = mlp_spec(data.sample_shape, 2, {32});
  W2DConfig cfg;
  cfg.epochs = 20;
  cfg.batch_size = 50;
  cfg.learning_rate = 0.1;
  cfg.seed = 5;
  cfg.rho = 1.0;
  cfg.beta = 0.0;
  cfg.kappa = 0.3;

  auto run = [&](Algorithm algorithm) {
    std::vector<ParamSet> trajectory;
    train(algorithm, data, cfg, spec, [&](std::size_t, Model& m, TrainHistory&) { trajectory.push_back(m.params()); });
    return trajectory;
  };
  const auto erm = run(Algorithm::erm);
  const auto w2d = run(Algorithm::w2d);
  std::size_t equal = 0;
  for (std::size_t e = 0; e < std::min(erm.size(), w2d.size()); ++e) equal += erm[e].same_values(w2d[e]) ? 1 : 0;
  const double secs = seconds_since(t0);
  return {erm.size() == 20 && w2d.size() == 20 && equal == 20 && secs < 60.0,
          std::to_string(data.size()) + " samples, " + std::to_string(equal) + "/20 epoch snapshots bitwise equal, " +
              fixed(secs, 1) + " s"};
}

// ---- 3: finite-difference gradient checks -----------------------------------------

Outcome gradient_checks() {
  const auto t0 = Clock::now();
  constexpr double eps = 1e-5, tol = 1e-5;
  constexpr int instances = 20;
  Rng rng(2024);
  std::map<std::string, double> worst;
  std::map<std::string, int> failures;

  // Loss = sum(c * op(x, params)) with a random constant c, so every output
  // position contributes with a generic weight.
  using Op = std::function<Var(Tape&, ParamSet&)>;
  auto check = [&](const std::string& name, ParamSet params, const Op& op) {
    const Shape out_shape = [&] {
      Tape t;
      return op(t, params).value().shape();
    }();
    const Tensor c = random_tensor(rng, out_shape);
    const auto report =
        finite_diff_check(params, [&](Tape& t, ParamSet& p) { return sum(mul_constant(op(t, p), c)); }, eps, tol);
    worst[name] = std::max(worst[name], report.max_relative_error());
    if (!report.passed || report.max_relative_error() > tol) ++failures[name];
  };

  for (int i = 0; i < instances; ++i) {
    const std::size_t n = 1 + rng.below(3), in = 2 + rng.below(5), out = 1 + rng.below(4);
    {
      ParamSet p;
      p.add("x", random_tensor(rng, {n, in}));
      p.add("w", random_tensor(rng, {out, in}));
      p.add("b", random_tensor(rng, {out}));
      check("dense", std::move(p), [](Tape& t, ParamSet& ps) {
        return dense(t.parameter(ps, "x"), t.parameter(ps, "w"), t.parameter(ps, "b"));
      });
    }
    {
      const std::size_t c = 1 + rng.below(2), o = 1 + rng.below(3), k = 1 + 2 * rng.below(2), hw = 4 + rng.below(3);
      const std::size_t stride = 1 + rng.below(2), pad = rng.below(2);
      ParamSet p;
      p.add("x", random_tensor(rng, {n, c, hw, hw}));
      p.add("w", random_tensor(rng, {o, c, k, k}));
      p.add("b", random_tensor(rng, {o}));
      check("conv2d", std::move(p), [=](Tape& t, ParamSet& ps) {
        return conv2d(t.parameter(ps, "x"), t.parameter(ps, "w"), t.parameter(ps, "b"), stride, pad);
      });
    }
    {
      ParamSet p;
      // One guaranteed positive entry keeps the check from being flat.
      Tensor x = random_tensor(rng, {n, in});
      x.mutable_values()[0] = 0.1 + std::abs(x[0]);
      p.add("x", std::move(x));
      check("relu", std::move(p), [](Tape& t, ParamSet& ps) { return relu(t.parameter(ps, "x")); });
    }
    {
      ParamSet p;
      p.add("x", random_tensor(rng, {n, 2, 4, 6}));
      check("max_pool2d", std::move(p), [](Tape& t, ParamSet& ps) { return max_pool2d(t.parameter(ps, "x"), 2, 2); });
    }
    {
      ParamSet p;
      p.add("x", random_tensor(rng, {n, 2, 5, 5}));
      check("avg_pool2d", std::move(p), [](Tape& t, ParamSet& ps) { return avg_pool2d(t.parameter(ps, "x"), 3, 2); });
      ParamSet g;
      g.add("x", random_tensor(rng, {n, 3, 4, 4}));
      check("global_avg_pool", std::move(g), [](Tape& t, ParamSet& ps) { return avg_pool2d(t.parameter(ps, "x"), 4, 1); });
    }
    {
      ParamSet p;
      p.add("x", random_tensor(rng, {n, 2, 3, 3}));
      check("flatten", std::move(p), [](Tape& t, ParamSet& ps) { return flatten(t.parameter(ps, "x")); });
    }
    {
      ParamSet p;
      p.add("x", random_tensor(rng, {n, in}));
      const Tensor f = random_tensor(rng, {n, in});
      check("mul_constant", std::move(p), [f](Tape& t, ParamSet& ps) { return mul_constant(t.parameter(ps, "x"), f); });
      ParamSet q;
      q.add("x", random_tensor(rng, {n, in}));
      check("square", std::move(q), [](Tape& t, ParamSet& ps) { return square(t.parameter(ps, "x")); });
    }
    {
      const std::size_t classes = 2 + rng.below(3);
      std::vector<std::size_t> labels(n);
      std::vector<double> weights(n);
      for (std::size_t j = 0; j < n; ++j) {
        labels[j] = rng.below(classes);
        weights[j] = rng.uniform(0.1, 1.0);
      }
      ParamSet p;
      p.add("x", random_tensor(rng, {n, classes}, -3.0, 3.0));
      check("softmax_cross_entropy", std::move(p), [=](Tape& t, ParamSet& ps) {
        return softmax_cross_entropy(t.parameter(ps, "x"), labels, weights);
      });
      ParamSet q;
      q.add("x", random_tensor(rng, {n, classes}));
      check("pick_sum", std::move(q), [=](Tape& t, ParamSet& ps) { return pick_sum(t.parameter(ps, "x"), labels); });
    }
  }

  // Feature importance against central differences of the true-class logit,
  // through a two-layer decoder so the gradient depends on the features.
  const ModelSpec spec = parse_model_spec(
      "architecture = probe\ninput = 6\nclasses = 3\nencoder = dense units=5\n"
      "decoder = dense units=7\ndecoder = relu\ndecoder = dense units=3\n");
  double worst_importance = 0.0;
  int importance_failures = 0;
  for (int i = 0; i < instances; ++i) {
    Model model = build_model(spec, 100 + static_cast<std::uint64_t>(i));
    const std::size_t n = 1 + rng.below(4), d = model.feature_dim();
    const Tensor features = random_tensor(rng, {n, d});
    std::vector<std::size_t> labels(n);
    for (auto& y : labels) y = rng.below(3);
    const Tensor analytic = feature_importance(model, features, labels);
    auto true_logit = [&](const Tensor& f, std::size_t row) {
      Tape t;
      const Tensor logits = model.decode(t, t.input(f), false).value();
      return logits[row * 3 + labels[row]];
    };
    double max_diff = 0.0, scale = 0.0;
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = 0; j < d; ++j) {
        std::vector<double> plus(features.values().begin(), features.values().end()), minus = plus;
        plus[r * d + j] += eps;
        minus[r * d + j] -= eps;
        const double numeric = std::abs((true_logit(Tensor({n, d}, plus), r) - true_logit(Tensor({n, d}, minus), r)) /
                                        (2.0 * eps));
        max_diff = std::max(max_diff, std::abs(numeric - analytic[r * d + j]));
        scale = std::max({scale, numeric, analytic[r * d + j]});
      }
    const double rel = scale > 0.0 ? max_diff / scale : 1.0;
    worst_importance = std::max(worst_importance, rel);
    if (!(rel <= tol)) ++importance_failures;
  }
  worst["feature_importance"] = worst_importance;
  if (importance_failures > 0) failures["feature_importance"] = importance_failures;

  const double secs = seconds_since(t0);
  double overall = 0.0;
  std::string detail;
  for (const auto& [name, w] : worst) overall = std::max(overall, w);
  int total_failures = 0;
  for (const auto& [name, f] : failures) {
    total_failures += f;
    detail += "; " + name + " failed " + std::to_string(f) + "x";
  }
  std::ostringstream head;
  head << worst.size() << " primitives x " << instances << " instances, worst relative error " << overall << ", "
       << fixed(secs, 1) << " s";
  return {total_failures == 0 && secs < 60.0, head.str() + detail};
}

// ---- 4: selection and mask laws ------------------------------------------------------

// Exhaustive oracle: among all subsets of the required size, the one with the
// largest loss sum, preferring lower indices (lexicographically smallest) on ties.
std::vector<std::size_t> brute_force_top(std::span<const double> v, std::size_t k) {
  const std::size_t n = v.size();
  std::vector<std::size_t> best;
  double best_sum = -1e300;
  for (std::uint32_t m = 0; m < (1u << n); ++m) {
    if (static_cast<std::size_t>(std::popcount(m)) != k) continue;
    std::vector<std::size_t> s;
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      if (m & (1u << i)) {
        s.push_back(i);
        total += v[i];
      }
    // Ties in the sum are broken towards the set that picks lower indices
    // among equal values, which is the lexicographically smaller set.
    if (total > best_sum || (total == best_sum && s < best)) {
      best = s;
      best_sum = total;
    }
  }
  return best;
}

Outcome selection_and_masks() {
  const auto t0 = Clock::now();
  Rng rng(77);
  std::size_t violations = 0, oracle_checks = 0, oracle_misses = 0;
  const double fractions[] = {0.0, 0.1, 0.25, 1.0 / 3.0, 0.3, 0.5, 0.7, 0.9, 1.0};
  for (int c = 0; c < 10000; ++c) {
    const std::size_t n = 1 + rng.below(c % 2 == 0 ? 8 : 64);
    // Small integer values force many ties.
    const bool discrete = rng.bernoulli(0.5);
    std::vector<double> v(n);
    for (auto& x : v) x = discrete ? static_cast<double>(rng.below(4)) : rng.uniform(0.0, 5.0);
    double rho = rng.bernoulli(0.3) ? fractions[rng.below(9)] : rng.uniform(0.0, 1.0);
    if (rho == 0.0) rho = 0.05;

    const auto sel = select_worst_samples(v, rho);
    const std::size_t k = static_cast<std::size_t>(std::ceil(rho * static_cast<double>(n) - 1e-9));
    const auto& s = sel.selected_indices;
    std::set<std::size_t> chosen(s.begin(), s.end());
    double min_sel = 1e300, max_unsel = -1e300;
    for (std::size_t i = 0; i < n; ++i) {
      if (chosen.count(i)) min_sel = std::min(min_sel, v[i]);
      else max_unsel = std::max(max_unsel, v[i]);
    }
    if (s.size() != k || chosen.size() != k || !std::is_sorted(s.begin(), s.end()) || min_sel < max_unsel) ++violations;

    const double phi = rng.bernoulli(0.3) ? fractions[rng.below(9)] : rng.uniform(0.0, 1.0);
    const auto mask = build_feature_mask(v, phi);
    const std::size_t z = static_cast<std::size_t>(std::ceil(phi * static_cast<double>(n) - 1e-9));
    double min_muted = 1e300, max_kept = -1e300;
    std::vector<std::size_t> muted;
    for (std::size_t i = 0; i < n; ++i) {
      if (mask.bits[i] == 0) {
        muted.push_back(i);
        min_muted = std::min(min_muted, v[i]);
      } else {
        max_kept = std::max(max_kept, v[i]);
      }
    }
    if (mask.zeros() != z || muted.size() != z || min_muted < max_kept) ++violations;

    if (n <= 8) {
      ++oracle_checks;
      if (brute_force_top(v, k) != s || brute_force_top(v, z) != muted) ++oracle_misses;
    }
  }
  const double secs = seconds_since(t0);
  return {violations == 0 && oracle_misses == 0 && secs < 30.0,
          "10000 cases, " + std::to_string(violations) + " law violations, " + std::to_string(oracle_misses) + "/" +
              std::to_string(oracle_checks) + " oracle disagreements, " + fixed(secs, 2) + " s"};
}

// ---- 5: SWA running mean ---------------------------------------------------------------

Outcome swa_mean_law() {
  Rng rng(31);
  double worst = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t count = 1 + rng.below(40);
    const Shape shape{1 + rng.below(5), 1 + rng.below(5)};
    const double scale = std::pow(10.0, rng.uniform(-3.0, 3.0));
    SWAState state;
    std::vector<std::vector<double>> snaps;
    for (std::size_t s = 0; s < count; ++s) {
      ParamSet p;
      p.add("w", random_tensor(rng, shape, -scale, scale));
      snaps.emplace_back(p.at("w").value.values().begin(), p.at("w").value.values().end());
      state = swa_update(std::move(state), p);
    }
    for (std::size_t i = 0; i < element_count(shape); ++i) {
      // Direct mean in long double as the reference.
      long double acc = 0.0L;
      for (const auto& s : snaps) acc += s[i];
      const double direct = static_cast<double>(acc / static_cast<long double>(count));
      const double avg = state.average.at("w").value[i];
      // Relative to the snapshot magnitude: a mean near zero has no meaningful
      // relative error of its own.
      worst = std::max(worst, std::abs(avg - direct) / scale);
    }
    if (state.count != count) return {false, "count " + std::to_string(state.count) + " != " + std::to_string(count)};
  }
  std::ostringstream d;
  d << "200 random sequences, worst relative error " << worst;
  return {worst <= 1e-12, d.str()};
}

// ---- 6: phase schedule -----------------------------------------------------------------

Outcome phase_schedule() {
  const double kappas[] = {0.0, 0.05, 0.1, 0.2, 0.4, 1.0};
  std::size_t cases = 0, bad = 0;
  for (std::size_t T = 1; T <= 200; ++T)
    for (double kappa : kappas) {
      ++cases;
      // Integer oracle: floor((1 - kappa) T) with kappa = p / 100.
      const auto p = static_cast<std::size_t>(std::llround(kappa * 100.0));
      const std::size_t expected = ((100 - p) * T) / 100;
      std::size_t worst = 0;
      bool prefix = true;
      for (std::size_t e = 1; e <= T; ++e) {
        const bool wc = phase_of_epoch(e, T, kappa) == Phase::worst_case;
        worst += wc ? 1 : 0;
        if (wc != (e <= expected)) prefix = false;
      }
      if (worst != expected || !prefix) ++bad;
    }
  return {bad == 0, std::to_string(cases) + " (T, kappa) pairs, " + std::to_string(bad) + " mismatches"};
}

// ---- shared CMNIST protocol ---------------------------------------------------------------

ExperimentConfig cmnist_protocol(const std::string& algorithm, std::vector<std::string> test_envs, std::size_t epochs) {
  ExperimentConfig cfg;
  cfg.seed = 0;
  cfg.algorithm = algorithm;
  cfg.selection = SelectionStrategy::test_domain;
  cfg.dataset.resolution = 14;
  cfg.dataset.test_environments = std::move(test_envs);
  cfg.model.architecture = "mlp";
  cfg.model.hidden = {128, 128};
  cfg.train.epochs = epochs;
  cfg.train.batch_size = 64;
  cfg.train.learning_rate = 0.1;
  cfg.train.rho = 0.3;
  cfg.train.kappa = 0.2;
  cfg.output.checkpoint = false;
  cfg.output.history = false;
  return cfg;
}

double run_cmnist(ExperimentConfig cfg, const std::string& tag) {
  cfg.output.dir = (std::filesystem::temp_directory_path() / ("w2d_acceptance_" + tag)).string();
  std::filesystem::remove_all(cfg.output.dir);
  const auto results = run_experiment(cfg);
  std::filesystem::remove_all(cfg.output.dir);
  if (!results.summary) throw std::runtime_error(tag + ": no summary");
  return results.summary->cell.mean;
}

// ---- 7: ERM on CMNIST, -90 held out ------------------------------------------------------

Outcome cmnist_erm() {
  const auto t0 = Clock::now();
  const double acc = run_cmnist(cmnist_protocol("erm", {"-90"}, 40), "erm");
  const double secs = seconds_since(t0);
  return {acc >= 20.0 && acc <= 40.0 && secs <= 600.0,
          "accuracy " + fixed(acc) + "% (band [20, 40]), " + fixed(secs, 0) + " s"};
}

// ---- 8: W2D* over three folds against ERM under the same protocol -------------------------

Outcome cmnist_w2d_star() {
  const auto t0 = Clock::now();
  const std::vector<std::string> envs{"+90", "+80", "-90"};
  const double star = run_cmnist(cmnist_protocol("w2d_star", envs, 20), "w2d_star");
  const double star_secs = seconds_since(t0);
  const double erm = run_cmnist(cmnist_protocol("erm", envs, 20), "erm3");
  return {star >= 65.0 && star - erm >= 8.0 && star_secs <= 1800.0,
          "W2D* " + fixed(star) + "% vs ERM " + fixed(erm) + "% (gap " + fixed(star - erm) + "), W2D* " +
              fixed(star_secs, 0) + " s"};
}

// ---- 9: grayscale CMNIST reaches the label-noise ceiling ------------------------------------

Outcome grayscale_ceiling() {
  const auto t0 = Clock::now();
  DatasetConfig dc;
  dc.grayscale = true;
  dc.resolution = 14;
  const auto bundle = generate_dataset(dc, derive_seed(0, 101));
  // Each environment in turn is the evaluation target; the model trains on
  // the other two and is selected on their validation splits.
  W2DConfig cfg;
  cfg.epochs = 15;
  cfg.batch_size = 32;
  cfg.learning_rate = 0.1;
  bool all_in = true;
  std::string detail;
  for (std::size_t i = 0; i < bundle.environments.size(); ++i) {
    const std::string name = bundle.environments[i].name;
    const Fold fold = make_fold(bundle, name, 0.2, SelectionStrategy::train_domain, derive_seed(0, 200 + i));
    cfg.seed = derive_seed(0, 300 + i);
    const ModelSpec spec = mlp_spec(fold.train.sample_shape, 2, {128, 128});
    auto outcome = run_fold(fold, "erm", cfg, spec, SelectionStrategy::train_domain);
    const double acc = evaluate_accuracy(outcome.model, bundle.environments[i]);
    all_in = all_in && acc >= 72.0 && acc <= 78.0;
    detail += name + " " + fixed(acc) + "% (noise " +
              fixed(100.0 * std::stod(bundle.environments[i].metadata.at("measured_label_noise")), 1) + "%), ";
  }
  const double secs = seconds_since(t0);
  return {all_in && secs <= 600.0, detail + "band [72, 78], " + fixed(secs, 0) + " s"};
}

// ---- 10: two-shift ordering -----------------------------------------------------------------

Outcome two_shift_ordering() {
  const auto t0 = Clock::now();
  int sample_wins = 0, w2d_wins = 0;
  std::string detail;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto bundle = generate_two_shift(derive_seed(seed, 101), 0.0, 0.9, 1000);
    const Fold fold = make_fold(bundle, "test", 0.2, SelectionStrategy::test_domain, derive_seed(seed, 200));
    const ModelSpec spec = mlp_spec(fold.train.sample_shape, 2, {128, 128});
    W2DConfig cfg;
    cfg.epochs = 10;
    cfg.learning_rate = 0.1;
    cfg.rho = 0.3;
    cfg.seed = derive_seed(seed, 1);
    std::map<std::string, double> acc;
    for (const char* alg : {"erm", "sample_only", "w2d"}) {
      const auto o = run_fold(fold, alg, cfg, spec, SelectionStrategy::test_domain);
      acc[alg] = o.test[o.selected];
    }
    sample_wins += acc["sample_only"] > acc["erm"] ? 1 : 0;
    w2d_wins += acc["w2d"] > acc["erm"] ? 1 : 0;
    detail += "[" + fixed(acc["erm"], 1) + " " + fixed(acc["sample_only"], 1) + " " + fixed(acc["w2d"], 1) + "] ";
  }
  const double secs = seconds_since(t0);
  return {sample_wins >= 4 && w2d_wins >= 4 && secs <= 900.0,
          "SAMPLE_ONLY beats ERM " + std::to_string(sample_wins) + "/5, W2D " + std::to_string(w2d_wins) +
              "/5; per seed [erm sample_only w2d] " + detail + fixed(secs, 0) + " s"};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"ranking scores reproduce the published tables", ranking_reproduction},
      {"W2D(rho=1, beta=0) trajectory equals ERM bitwise", erm_equivalence},
      {"gradients match central finite differences", gradient_checks},
      {"selection and mask laws with subset oracle", selection_and_masks},
      {"SWA running average equals the direct mean", swa_mean_law},
      {"phase schedule yields floor((1-kappa)T) worst-case epochs", phase_schedule},
      {"ERM on CMNIST (-90 test) within [20, 40]", cmnist_erm},
      {"W2D* on CMNIST >= 65 and >= ERM + 8", cmnist_w2d_star},
      {"grayscale CMNIST at 75 +- 3 on every environment", grayscale_ceiling},
      {"two-shift: SAMPLE_ONLY and W2D beat ERM in >= 4/5 seeds", two_shift_ordering},
  };
  std::set<std::size_t> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(static_cast<std::size_t>(std::stoul(argv[i])));

  bool all = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!wanted.empty() && !wanted.count(i + 1)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    all = all && o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << (i + 1) << ": " << criteria[i].first << " -- "
              << o.detail << std::endl;
  }
  return all ? 0 : 1;
}
