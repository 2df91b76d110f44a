#include "w2d/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

namespace w2d {

std::string_view algorithm_name(Algorithm a) {
  switch (a) {
    case Algorithm::erm: return "erm";
    case Algorithm::feature_only: return "feature_only";
    case Algorithm::sample_only: return "sample_only";
    case Algorithm::w2d: return "w2d";
  }
  return "?";
}

Algorithm parse_algorithm(std::string_view name) {
  for (auto a : {Algorithm::erm, Algorithm::feature_only, Algorithm::sample_only, Algorithm::w2d})
    if (algorithm_name(a) == name) return a;
  throw std::invalid_argument("unknown algorithm '" + std::string(name) + "'");
}

std::string_view phase_name(Phase p) { return p == Phase::worst_case ? "worst_case" : "whole_batch"; }

namespace {
void require_unit(double v, const char* field) {
  if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument(std::string(field) + " must lie in [0, 1]");
}
}  // namespace

void W2DConfig::validate(std::size_t dataset_size) const {
  require_unit(phi, "phi");
  require_unit(beta, "beta");
  require_unit(rho, "rho");
  require_unit(kappa, "kappa");
  require_unit(swa_start_fraction, "swa_start_fraction");
  if (!(rho > 0.0)) throw std::invalid_argument("rho must be positive");
  if (batch_size == 0) throw std::invalid_argument("batch_size must be positive");
  if (batch_size > dataset_size)
    throw std::invalid_argument("batch_size " + std::to_string(batch_size) + " exceeds dataset size " +
                                std::to_string(dataset_size));
  if (epochs == 0) throw std::invalid_argument("epochs must be positive");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate))
    throw std::invalid_argument("learning_rate must be positive");
}

W2DConfig effective_config(Algorithm algorithm, W2DConfig config) {
  switch (algorithm) {
    case Algorithm::erm: config.rho = 1.0; config.beta = 0.0; break;
    case Algorithm::feature_only: config.rho = 1.0; break;
    case Algorithm::sample_only: config.beta = 0.0; break;
    case Algorithm::w2d: break;
  }
  return config;
}

std::size_t worst_case_epochs(std::size_t total_epochs, double kappa) {
  if (!(kappa >= 0.0 && kappa <= 1.0)) throw std::invalid_argument("kappa must lie in [0, 1]");
  return floor_fraction(1.0 - kappa, total_epochs);
}

Phase phase_of_epoch(std::size_t epoch, std::size_t total_epochs, double kappa) {
  if (epoch < 1 || epoch > total_epochs)
    throw std::out_of_range("epoch " + std::to_string(epoch) + " outside [1, " + std::to_string(total_epochs) + "]");
  return epoch <= worst_case_epochs(total_epochs, kappa) ? Phase::worst_case : Phase::whole_batch;
}

SWAState swa_update(SWAState state, const ParamSet& snapshot) {
  if (state.count == 0) {
    state.average = ParamSet{};
    for (const auto& [name, p] : snapshot) state.average.add(name, p.value);
    state.count = 1;
    return state;
  }
  if (state.average.size() != snapshot.size()) throw ShapeError("swa_update: parameter count mismatch");
  const double denom = static_cast<double>(state.count + 1);
  for (auto& [name, avg] : state.average) {
    const auto& snap = snapshot.at(name).value;
    if (snap.shape() != avg.value.shape()) throw ShapeError("swa_update: shape mismatch for '" + name + "'");
    auto a = avg.value.mutable_values();
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += (snap[i] - a[i]) / denom;
  }
  ++state.count;
  return state;
}

Model swa_model(const Model& like, const SWAState& state) {
  if (state.count == 0) throw std::logic_error("swa_model: no snapshots absorbed");
  Model out = like;
  for (auto& [name, p] : out.params()) {
    const auto& avg = state.average.at(name).value;
    auto v = p.value.mutable_values();
    std::copy(avg.values().begin(), avg.values().end(), v.begin());
  }
  return out;
}

namespace {

void require_finite_losses(const std::vector<double>& losses) {
  for (std::size_t i = 0; i < losses.size(); ++i)
    if (!std::isfinite(losses[i]))
      throw TrainingError("non-finite loss " + std::to_string(losses[i]) + " at batch position " + std::to_string(i));
}

double mean_of(const std::vector<double>& losses, const std::vector<std::size_t>& positions) {
  double s = 0.0;
  for (auto p : positions) s += losses[p];
  return positions.empty() ? 0.0 : s / static_cast<double>(positions.size());
}

void apply_update(Model& model, Tape& tape, const Var& loss, double lr) {
  try {
    tape.backward(loss, GradMode::overwrite);
    model.params().sgd_step(lr);
  } catch (const NonFiniteError& e) {
    throw TrainingError(std::string("training diverged: ") + e.what());
  }
}

}  // namespace

IterationRecord erm_step(Model& model, const Tensor& x, std::span<const std::size_t> labels, double learning_rate) {
  Tape tape;
  const auto fw = forward(model, tape, x);
  IterationRecord rec;
  rec.phase = Phase::whole_batch;
  rec.losses = per_sample_cross_entropy(fw.logits.value(), labels);
  require_finite_losses(rec.losses);
  rec.selected.resize(rec.losses.size());
  std::iota(rec.selected.begin(), rec.selected.end(), std::size_t{0});
  rec.mean_selected_loss = mean_of(rec.losses, rec.selected);
  apply_update(model, tape, mean_cross_entropy(fw.logits, labels), learning_rate);
  return rec;
}

IterationRecord w2d_step(Model& model, const Tensor& x, std::span<const std::size_t> labels, const W2DConfig& config,
                         Phase phase, Rng& mask_rng, Model* selector) {
  const std::size_t n = x.dim(0);
  if (labels.size() != n) throw ShapeError("w2d_step: label count does not match batch");
  Tape tape;
  const Var input = tape.input(x);
  const Var features = model.encode(tape, input);
  const Var logits = model.decode(tape, features);

  IterationRecord rec;
  rec.phase = phase;
  rec.losses = selector ? per_sample_cross_entropy(predict_logits(*selector, x), labels)
                        : per_sample_cross_entropy(logits.value(), labels);
  require_finite_losses(rec.losses);

  if (phase == Phase::worst_case) {
    rec.selected = select_worst_samples(rec.losses, config.rho).selected_indices;
  } else {
    rec.selected.resize(n);
    std::iota(rec.selected.begin(), rec.selected.end(), std::size_t{0});
  }
  const std::size_t k = rec.selected.size();
  rec.mean_selected_loss = mean_of(rec.losses, rec.selected);

  for (auto pick : mask_rng.sample_without_replacement(k, ceil_fraction(config.beta, k)))
    rec.masked.push_back(rec.selected[pick]);
  std::sort(rec.masked.begin(), rec.masked.end());

  Var loss_logits = logits;
  if (!rec.masked.empty()) {
    const std::size_t d = model.feature_dim();
    const Tensor& fv = features.value();
    std::vector<double> sub(rec.masked.size() * d);
    std::vector<std::size_t> sub_labels(rec.masked.size());
    for (std::size_t j = 0; j < rec.masked.size(); ++j) {
      const std::size_t row = rec.masked[j];
      std::copy(fv.values().begin() + static_cast<std::ptrdiff_t>(row * d),
                fv.values().begin() + static_cast<std::ptrdiff_t>((row + 1) * d),
                sub.begin() + static_cast<std::ptrdiff_t>(j * d));
      sub_labels[j] = labels[row];
    }
    const Tensor scores = feature_importance(model, Tensor({rec.masked.size(), d}, std::move(sub)), sub_labels,
                                             config.importance);
    std::vector<double> mask(n * d, 1.0);
    for (std::size_t j = 0; j < rec.masked.size(); ++j) {
      const auto fm = build_feature_mask(scores.values().subspan(j * d, d), config.phi);
      std::copy(fm.bits.begin(), fm.bits.end(), mask.begin() + static_cast<std::ptrdiff_t>(rec.masked[j] * d));
    }
    loss_logits = model.decode(tape, mul_constant(features, Tensor({n, d}, std::move(mask))));
  }

  std::vector<double> weights(n, 0.0);
  const double w = 1.0 / static_cast<double>(k);
  for (auto p : rec.selected) weights[p] = w;
  apply_update(model, tape, softmax_cross_entropy(loss_logits, labels, weights), config.learning_rate);
  return rec;
}

namespace {

TrainResult train_impl(Algorithm algorithm, const Environment& data, const W2DConfig& raw, const ModelSpec& spec,
                       const EpochCallback& on_epoch_end, Model* selector) {
  if (data.size() == 0) throw TrainingError("empty training set");
  raw.validate(data.size());
  W2DConfig config = effective_config(algorithm, raw);
  if (config.swa_enabled) config.kappa = 0.0;  // SWA runs replace whole-batch patching

  TrainResult result{build_model(spec, derive_seed(config.seed, 1)), {}, std::nullopt};
  Rng shuffle_rng(derive_seed(config.seed, 2));
  Rng mask_rng(derive_seed(config.seed, 3));

  const std::size_t per_epoch = data.size() / config.batch_size;
  const std::size_t swa_from = floor_fraction(1.0 - config.swa_start_fraction, config.epochs);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    const Phase phase = phase_of_epoch(epoch, config.epochs, config.kappa);
    for (std::size_t k = 0; k < per_epoch; ++k) {
      const std::span<const std::size_t> ids(order.data() + k * config.batch_size, config.batch_size);
      const Tensor x = data.batch(ids);
      std::vector<std::size_t> labels(ids.size());
      for (std::size_t i = 0; i < ids.size(); ++i) labels[i] = data.labels[ids[i]];
      IterationRecord rec = algorithm == Algorithm::erm
                                ? erm_step(result.model, x, labels, config.learning_rate)
                                : w2d_step(result.model, x, labels, config, phase, mask_rng, selector);
      rec.epoch = epoch;
      rec.iteration = k;
      rec.phase = phase;
      rec.batch.assign(ids.begin(), ids.end());
      result.history.iterations.push_back(std::move(rec));
    }
    if (config.swa_enabled && epoch > swa_from)
      result.swa = swa_update(result.swa.value_or(SWAState{}), result.model.params());
    result.history.epochs.push_back(EpochRecord{epoch, {}});
    if (on_epoch_end) on_epoch_end(epoch, result.model, result.history);
  }
  return result;
}

}  // namespace

TrainResult train(Algorithm algorithm, const Environment& data, const W2DConfig& config, const ModelSpec& spec,
                  const EpochCallback& on_epoch_end) {
  return train_impl(algorithm, data, config, spec, on_epoch_end, nullptr);
}

W2DStarResult train_w2d_star(const Environment& data, const W2DConfig& config, const ModelSpec& spec,
                             const EpochCallback& on_epoch_end) {
  if (config.w2dstar_bias_epochs == 0) {
    auto r = train_impl(Algorithm::w2d, data, config, spec, on_epoch_end, nullptr);
    return W2DStarResult{std::move(r.model), std::nullopt, std::move(r.history), std::move(r.swa)};
  }
  W2DConfig bias_config = config;
  bias_config.epochs = config.w2dstar_bias_epochs;
  bias_config.swa_enabled = false;
  bias_config.seed = derive_seed(config.seed, 17);
  Model bias = train_impl(Algorithm::erm, data, bias_config, spec, {}, nullptr).model;
  auto r = train_impl(Algorithm::w2d, data, config, spec, on_epoch_end, &bias);
  return W2DStarResult{std::move(r.model), std::move(bias), std::move(r.history), std::move(r.swa)};
}

void save_history(const TrainHistory& history, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write history " + path.string());
  for (const auto& it : history.iterations) {
    nlohmann::json j{{"type", "iteration"},       {"epoch", it.epoch},       {"k", it.iteration},
                     {"phase", phase_name(it.phase)}, {"batch", it.batch},     {"losses", it.losses},
                     {"selected", it.selected},   {"masked", it.masked},     {"mean_selected_loss", it.mean_selected_loss}};
    out << j.dump() << '\n';
  }
  for (const auto& ep : history.epochs) {
    nlohmann::json j{{"type", "epoch"}, {"epoch", ep.epoch}, {"accuracies", ep.accuracies}};
    out << j.dump() << '\n';
  }
}

TrainHistory load_history(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open history " + path.string());
  TrainHistory h;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    if (j.at("type") == "iteration") {
      IterationRecord r;
      r.epoch = j.at("epoch");
      r.iteration = j.at("k");
      r.phase = j.at("phase") == "worst_case" ? Phase::worst_case : Phase::whole_batch;
      r.batch = j.at("batch").get<std::vector<std::size_t>>();
      r.losses = j.at("losses").get<std::vector<double>>();
      r.selected = j.at("selected").get<std::vector<std::size_t>>();
      r.masked = j.at("masked").get<std::vector<std::size_t>>();
      r.mean_selected_loss = j.at("mean_selected_loss");
      h.iterations.push_back(std::move(r));
    } else if (j.at("type") == "epoch") {
      h.epochs.push_back(EpochRecord{j.at("epoch"), j.at("accuracies").get<std::map<std::string, double>>()});
    }
  }
  return h;
}

}  // namespace w2d
