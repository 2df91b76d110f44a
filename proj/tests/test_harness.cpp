#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "test_util.hpp"
#include "w2d/harness.hpp"

using namespace w2d;
using w2d::test::random_tensor;

namespace {

std::vector<CheckpointTrace> train_traces(std::initializer_list<double> v) {
  std::vector<CheckpointTrace> out;
  for (double x : v) out.push_back(CheckpointTrace{x, std::nullopt, std::nullopt});
  return out;
}

std::vector<AccuracyCell> cells(std::initializer_list<std::pair<double, double>> v) {
  std::vector<AccuracyCell> out;
  for (auto [m, s] : v) out.push_back({m, s});
  return out;
}

// 1 x 2 x 4 x 4 image classifier whose encoder ends in spatial maps.
ModelSpec tiny_cnn() {
  return parse_model_spec(
      "architecture = tiny\ninput = 2 4 4\nclasses = 2\n"
      "encoder = conv2d units=3 kernel=3 stride=1 padding=1\nencoder = relu\n"
      "encoder = avg_pool kernel=global\nencoder = flatten\ndecoder = dense units=2\n");
}

std::string read_text(const std::filesystem::path& p) {
  std::ifstream in(p);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST_CASE("accuracy of oracle and constant predictors") {
  const Tensor oracle({4, 2}, {1, 0, 0, 1, 0, 1, 1, 0});
  const std::vector<std::size_t> y{0, 1, 1, 0};
  CHECK(accuracy_from_logits(oracle, y) == 100.0);
  const Tensor constant({4, 2}, {1, 0, 1, 0, 1, 0, 1, 0});
  CHECK(accuracy_from_logits(constant, y) == 50.0);
  // Ties resolve to the lowest class.
  CHECK(accuracy_from_logits(Tensor({2, 2}, {0.5, 0.5, 0.5, 0.5}), std::vector<std::size_t>{0, 1}) == 50.0);
  CHECK_THROWS(accuracy_from_logits(oracle, std::vector<std::size_t>{0}));

  Model m = build_model(linear_spec({2}, 2), 1);
  CHECK_THROWS(evaluate_accuracy(m, Environment{"empty", {2}, {}, {}, {}}));
}

TEST_CASE("evaluate_accuracy matches logits on a hand-set linear model") {
  Model m = build_model(linear_spec({2}, 2), 1);
  auto w = m.params().at("decoder.0.weight").value.mutable_values();
  w[0] = 1.0, w[1] = 0.0, w[2] = 0.0, w[3] = 1.0;
  for (auto& b : m.params().at("decoder.0.bias").value.mutable_values()) b = 0.0;
  Environment env{"e", {2}, {0.9f, 0.1f, 0.2f, 0.7f, 0.6f, 0.3f, 0.4f, 0.5f}, {0, 1, 1, 1}, {}};
  CHECK(evaluate_accuracy(m, env) == 75.0);
}

TEST_CASE("summaries use the standard error of the mean") {
  const std::vector<double> one{71.0};
  CHECK(summarize(one).mean == 71.0);
  CHECK(summarize(one).stderr == 0.0);
  const std::vector<double> three{70.0, 72.0, 74.0};
  CHECK(summarize(three).mean == doctest::Approx(72.0));
  CHECK(summarize(three).stderr == doctest::Approx(2.0 / std::sqrt(3.0)));
}

TEST_CASE("model selection examples") {
  const auto a = train_traces({60, 70, 65});
  CHECK(select_model(a, SelectionStrategy::train_domain) == 1);
  const auto flat = train_traces({50, 50, 50});
  CHECK(select_model(flat, SelectionStrategy::train_domain) == 0);
  std::vector<CheckpointTrace> t(3);
  const double tv[] = {50, 55, 80};
  for (int i = 0; i < 3; ++i) t[i].test_val = tv[i];
  CHECK(select_model(t, SelectionStrategy::test_domain) == 2);
  CHECK_THROWS(select_model(t, SelectionStrategy::train_domain));
  CHECK_THROWS(select_model(t, SelectionStrategy::leave_one_out));
  CHECK_THROWS(select_model(std::vector<CheckpointTrace>{}, SelectionStrategy::test_domain));
  for (auto s : {SelectionStrategy::train_domain, SelectionStrategy::test_domain, SelectionStrategy::leave_one_out})
    CHECK(parse_strategy(strategy_name(s)) == s);
}

TEST_CASE("a single series has zero standard error") {
  std::size_t calls = 0;
  const auto r = random_search(default_search_space(), 5, 1, 3, [&](const Hyperparams& hp, std::uint64_t) {
    ++calls;
    return TrialOutcome{hp.at("rho") * 100.0, hp.at("phi") * 100.0};
  });
  CHECK(calls == 5);
  CHECK(r.cell.stderr == 0.0);
  CHECK(r.cell.mean == r.series_best[0]);
  // The reported accuracy belongs to the trial with the best criterion.
  const auto& best = r.trials[r.best_trial[0]];
  for (const auto& t : r.trials) CHECK(t.outcome->criterion <= best.outcome->criterion);
  CHECK(r.series_best[0] == best.outcome->accuracy);
}

TEST_CASE("search over a finite space finds the exhaustive maximum reproducibly") {
  SearchSpace space{{"phi", HyperRange::discrete({0.1, 0.2, 0.3})}, {"rho", HyperRange::discrete({0.1, 0.5})}};
  auto score = [](const Hyperparams& hp) { return 50.0 + 30.0 * hp.at("rho") - 40.0 * std::pow(hp.at("phi") - 0.2, 2); };
  const TrialRunner runner = [&](const Hyperparams& hp, std::uint64_t) { return TrialOutcome{score(hp), score(hp)}; };
  double exhaustive = -1e300;
  for (double phi : {0.1, 0.2, 0.3})
    for (double rho : {0.1, 0.5}) exhaustive = std::max(exhaustive, score({{"phi", phi}, {"rho", rho}}));
  const auto a = random_search(space, 40, 3, 11, runner);
  const auto b = random_search(space, 40, 3, 11, runner);
  for (double best : a.series_best) CHECK(best == exhaustive);
  CHECK(a.series_best == b.series_best);
  for (std::size_t i = 0; i < a.trials.size(); ++i) {
    CHECK(a.trials[i].hyperparameters == b.trials[i].hyperparameters);
    CHECK(a.trials[i].seed == b.trials[i].seed);
  }
}

TEST_CASE("default search uses the published ranges and 20 x 3 runs") {
  const auto space = default_search_space();
  CHECK(space.at("phi").lo == 0.1);
  CHECK(space.at("phi").hi == 0.4);
  CHECK(space.at("beta").hi == 0.3);
  CHECK(space.at("rho").hi == 0.5);
  CHECK(space.at("kappa").lo == 0.2);
  std::size_t calls = 0;
  std::set<std::uint64_t> seeds;
  const auto r = random_search(space, 20, 3, 0, [&](const Hyperparams& hp, std::uint64_t seed) {
    ++calls;
    seeds.insert(seed);
    for (const auto& [name, v] : hp) {
      CHECK(v >= space.at(name).lo);
      CHECK(v <= space.at(name).hi);
    }
    return TrialOutcome{1.0, 1.0};
  });
  CHECK(calls == 60);
  CHECK(seeds.size() == 60);
  CHECK(r.trials.size() == 60);
}

TEST_CASE("runner failures are recorded and an all-failed series aborts") {
  std::size_t observed = 0;
  const auto r = random_search(
      default_search_space(), 4, 2, 1,
      [&](const Hyperparams&, std::uint64_t seed) {
        if (seed % 2 == 0) throw std::runtime_error("diverged");
        return TrialOutcome{double(seed % 97), 1.0};
      },
      [&](const SearchTrial&) { ++observed; });
  CHECK(observed == 8);
  for (const auto& t : r.trials)
    if (!t.outcome) CHECK(t.error.find("diverged") != std::string::npos);
  CHECK_THROWS_AS(random_search(default_search_space(), 3, 2, 1,
                                [](const Hyperparams&, std::uint64_t) -> TrialOutcome { throw std::runtime_error("x"); }),
                  SearchError);
  CHECK_THROWS(random_search(default_search_space(), 0, 1, 1, [](const Hyperparams&, std::uint64_t) { return TrialOutcome{}; }));
}

TEST_CASE("ranking score examples") {
  const auto erm1 = cells({{81.5, 0.0}, {63.3, 0.2}, {42.6, 0.9}, {94.7, 0.1}});
  CHECK(ranking_score(cells({{83.4, 0}, {63.5, 0}, {44.5, 0}, {95.2, 0}}), erm1) == 3);
  const auto erm2 = cells({{29.9, 0.9}, {72.1, 1.6}, {87.2, 0.6}});
  CHECK(ranking_score(cells({{24.5, 0}, {69.4, 0}, {86.0, 0}}), erm2) == -3);
  CHECK(ranking_score(erm2, erm2) == 0);
  // Band edges belong to the band.
  CHECK(ranking_score(cells({{30.8, 0}, {70.5, 0}, {87.2, 0}}), erm2) == 0);
  CHECK_THROWS(ranking_score(cells({{1, 0}}), erm2));
}

TEST_CASE("ranking is invariant to a common positive rescaling") {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<AccuracyCell> row, base;
    for (int d = 0; d < 4; ++d) {
      base.push_back({rng.uniform(20, 90), rng.uniform(0, 2)});
      row.push_back({base.back().mean + rng.uniform(-4, 4), rng.uniform(0, 2)});
    }
    const double k = rng.uniform(0.2, 1.0);
    auto scaled = [k](std::vector<AccuracyCell> v) {
      for (auto& c : v) c = {c.mean * k, c.stderr * k};
      return v;
    };
    CHECK(ranking_score(scaled(row), scaled(base)) == ranking_score(row, base));
  }
}

TEST_CASE("ranking tables parse, sort and print") {
  const auto table = parse_accuracy_csv(
      "algorithm,dataset,mean,stderr\n"
      "ERM,A,50,1\nERM,B,60,1\n"
      "Good,A,55,0.5\nGood,B,65,0.5\n"
      "Bad,A,40,0.5\nBad,B,60.5,0.5\n");
  const auto ranking = build_ranking_table(table, "erm");
  REQUIRE(ranking.rows.size() == 3);
  CHECK(ranking.rows[0].algorithm == "Good");
  CHECK(ranking.rows[0].score == 2);
  CHECK(ranking.rows[0].average == doctest::Approx(60.0));
  CHECK(ranking.rows[1].algorithm == "ERM");
  CHECK(ranking.rows[2].score == -1);
  const auto csv = format_ranking_csv(ranking);
  CHECK(csv.find("Good") < csv.find("Bad"));
  CHECK(format_ranking_text(ranking).find("ERM") != std::string::npos);

  CHECK_THROWS(build_ranking_table(table, "Missing"));
  CHECK_THROWS(parse_accuracy_csv("algorithm,dataset,mean,stderr\nERM,A,50,1\nERM,B,60,1\nX,A,1,0\n"));
  CHECK_THROWS(parse_accuracy_csv("algorithm,dataset,mean\nERM,A,50\n"));
  CHECK_THROWS(parse_accuracy_csv("algorithm,dataset,mean,stderr\nERM,A,fifty,1\n"));

  const auto path = std::filesystem::temp_directory_path() / "w2d_test_table.csv";
  write_accuracy_csv(table, path);
  const auto back = read_accuracy_csv(path);
  std::filesystem::remove(path);
  CHECK(back.datasets == table.datasets);
  CHECK(back.row("Bad")[1].mean == 60.5);
}

TEST_CASE("CAM of one channel with unit weight is the normalized map") {
  const Tensor maps({1, 2, 2}, {1.0, 3.0, 2.0, 5.0});
  const std::vector<double> w{1.0};
  const Tensor cam = cam_from_maps(maps, w);
  CHECK(cam.shape() == Shape{2, 2});
  CHECK(cam[0] == 0.0);
  CHECK(cam[1] == doctest::Approx(0.5));
  CHECK(cam[2] == doctest::Approx(0.25));
  CHECK(cam[3] == 1.0);
}

TEST_CASE("CAM with uniform positive weights is the normalized channel mean") {
  Rng rng(4);
  const Tensor maps = random_tensor(rng, {3, 4, 5}, 0.0, 2.0);
  const Tensor cam = cam_from_maps(maps, std::vector<double>{0.7, 0.7, 0.7});
  std::vector<double> mean(20, 0.0);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < 20; ++i) mean[i] += maps[c * 20 + i] / 3.0;
  const double lo = *std::min_element(mean.begin(), mean.end()), hi = *std::max_element(mean.begin(), mean.end());
  for (std::size_t i = 0; i < 20; ++i) CHECK(cam[i] == doctest::Approx((mean[i] - lo) / (hi - lo)).epsilon(1e-12));
}

TEST_CASE("CAM of a hand-built two-channel map") {
  // Channel 0 [[1,2],[3,4]], channel 1 [[4,0],[1,1]], weights (1, -1):
  // sum [[-3, 2], [2, 3]] -> normalized [[0, 5/6], [5/6, 1]].
  const Tensor maps({2, 2, 2}, {1, 2, 3, 4, 4, 0, 1, 1});
  const Tensor raw = weighted_map_sum(maps, std::vector<double>{1.0, -1.0});
  CHECK(raw == Tensor({2, 2}, {-3, 2, 2, 3}));
  const Tensor cam = cam_from_maps(maps, std::vector<double>{1.0, -1.0});
  CHECK(cam[0] == 0.0);
  CHECK(cam[1] == doctest::Approx(5.0 / 6.0));
  CHECK(cam[3] == 1.0);
  CHECK(cam_from_maps(Tensor::filled({2, 2, 2}, 1.0), std::vector<double>{1.0, 1.0}) == Tensor::zeros({2, 2}));
  CHECK_THROWS(cam_from_maps(maps, std::vector<double>{1.0}));
}

TEST_CASE("the weighted map sum is linear in the weights") {
  Rng rng(6);
  const Tensor maps = random_tensor(rng, {3, 3, 3});
  const std::vector<double> a{0.3, -1.2, 2.0}, b{1.5, 0.4, -0.7};
  std::vector<double> ab(3);
  for (int i = 0; i < 3; ++i) ab[i] = 2.0 * a[i] + b[i];
  const Tensor sa = weighted_map_sum(maps, a), sb = weighted_map_sum(maps, b), sab = weighted_map_sum(maps, ab);
  for (std::size_t i = 0; i < 9; ++i) CHECK(sab[i] == doctest::Approx(2.0 * sa[i] + sb[i]).epsilon(1e-12));
}

TEST_CASE("CAM on a CNN uses the decoder row of the class") {
  Rng rng(7);
  Model m = build_model(tiny_cnn(), 2);
  const Tensor x = random_tensor(rng, {2, 4, 4}, 0.0, 1.0);
  const Tensor cam = class_activation_map(m, x, 1);
  CHECK(cam.shape() == Shape{4, 4});
  Tape t;
  const Tensor maps = m.encode_spatial(t, t.input(x.reshaped({1, 2, 4, 4}))).value();
  const auto w = m.params().at("decoder.0.weight").value.values();
  const std::vector<double> row{w[3], w[4], w[5]};
  CHECK(cam == cam_from_maps(maps.reshaped({3, 4, 4}), row));
  CHECK_THROWS(class_activation_map(m, x, 2));
  Model mlp = build_model(mlp_spec({2, 4, 4}, 2, {3}), 1);
  CHECK_THROWS(class_activation_map(mlp, x, 0));
}

TEST_CASE("selection counts rank by frequency then index") {
  TrainHistory h;
  for (std::size_t k = 0; k < 5; ++k) {
    IterationRecord r;
    r.batch = {3, 7, k + 10};
    r.selected = {1, 2};
    h.iterations.push_back(r);
  }
  const auto counts = selection_counts(h);
  CHECK(counts.front().index == 7);
  CHECK(counts.front().count == 5);
  CHECK(counts.size() == 6);
  CHECK(counts[1].index == 10);

  Environment env{"e", {1, 2, 2}, std::vector<float>(20 * 4, 0.5f), std::vector<std::size_t>(20, 0), {}};
  const auto out = std::filesystem::temp_directory_path() / "w2d_test_worst";
  const auto listed = export_worst_samples(h, env, 100, out);
  CHECK(listed.size() == 6);
  CHECK(std::filesystem::exists(out.string() + ".txt"));
  CHECK(std::filesystem::exists(out.string() + ".pgm"));
  CHECK(read_text(out.string() + ".txt").find("7") != std::string::npos);
  std::filesystem::remove(out.string() + ".txt");
  std::filesystem::remove(out.string() + ".pgm");
  CHECK_THROWS(export_worst_samples(TrainHistory{}, env, 3, out));
}

TEST_CASE("a planted mislabeled outlier is among the most selected samples") {
  Rng rng(8);
  Environment env{"blobs", {1, 2, 2}, {}, {}, {}};
  for (std::size_t i = 0; i < 200; ++i) {
    const std::size_t y = i % 2;
    for (int j = 0; j < 4; ++j)
      env.inputs.push_back(static_cast<float>(std::clamp(0.5 + (y ? 0.3 : -0.3) + 0.05 * rng.normal(), 0.0, 1.0)));
    env.labels.push_back(y);
  }
  const std::size_t planted = 57;  // a class-1 sample relabelled as class 0
  env.labels[planted] = 0;
  W2DConfig c;
  c.epochs = 10;
  c.batch_size = 20;
  c.rho = 0.1;
  c.kappa = 0.0;
  c.learning_rate = 0.5;
  const auto r = train(Algorithm::sample_only, env, c, mlp_spec({1, 2, 2}, 2, {8}));
  const auto out = std::filesystem::temp_directory_path() / "w2d_test_planted";
  const auto top = export_worst_samples(r.history, env, 5, out);
  std::filesystem::remove(out.string() + ".txt");
  std::filesystem::remove(out.string() + ".pgm");
  bool found = false;
  for (const auto& s : top) found = found || s.index == planted;
  CHECK(found);
}

TEST_CASE("image writers emit binary netpbm headers") {
  const auto pgm = std::filesystem::temp_directory_path() / "w2d_test.pgm";
  write_pgm(pgm, 2, 3, std::vector<double>{0, 0.5, 1, 2, -1, 0.25});
  const auto text = read_text(pgm);
  CHECK(text.rfind("P5\n3 2\n255\n", 0) == 0);
  CHECK(text.size() == std::string("P5\n3 2\n255\n").size() + 6);
  CHECK(static_cast<unsigned char>(text.back()) == 64);
  std::filesystem::remove(pgm);
  CHECK_THROWS(write_pgm(pgm, 2, 2, std::vector<double>{1.0}));
}
