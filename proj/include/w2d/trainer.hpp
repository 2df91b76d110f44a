#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "w2d/datasets.hpp"
#include "w2d/model.hpp"
#include "w2d/rng.hpp"
#include "w2d/worstcase.hpp"

namespace w2d {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Algorithm { erm, feature_only, sample_only, w2d };
enum class Phase { worst_case, whole_batch };

std::string_view algorithm_name(Algorithm a);
Algorithm parse_algorithm(std::string_view name);
std::string_view phase_name(Phase p);

struct W2DConfig {
  double phi = 1.0 / 3.0;   // feature drop fraction
  double beta = 1.0 / 3.0;  // fraction of the (selected) batch that is masked
  double rho = 0.3;         // worst-case sample fraction
  double kappa = 0.2;       // fraction of epochs trained with the whole batch
  std::size_t batch_size = 64;
  std::size_t epochs = 10;
  double learning_rate = 0.1;
  std::uint64_t seed = 0;
  bool swa_enabled = false;
  double swa_start_fraction = 0.25;
  std::size_t w2dstar_bias_epochs = 2;
  ImportanceTarget importance = ImportanceTarget::true_class;

  // Throws std::invalid_argument naming the offending field.
  void validate(std::size_t dataset_size) const;
};

// Parameters each algorithm actually trains with: ERM forces rho = 1 and
// beta = 0, FEATURE_ONLY forces rho = 1, SAMPLE_ONLY forces beta = 0.
W2DConfig effective_config(Algorithm algorithm, W2DConfig config);

// Number of WORST_CASE epochs: floor((1 - kappa) * T).
std::size_t worst_case_epochs(std::size_t total_epochs, double kappa);
// Epochs are 1-based.
Phase phase_of_epoch(std::size_t epoch, std::size_t total_epochs, double kappa);

struct IterationRecord {
  std::size_t epoch = 0;
  std::size_t iteration = 0;
  Phase phase = Phase::worst_case;
  std::vector<std::size_t> batch;     // sample ids in batch order
  std::vector<double> losses;         // per batch position, as used for selection
  std::vector<std::size_t> selected;  // batch positions, ascending
  std::vector<std::size_t> masked;    // batch positions that received a feature mask
  double mean_selected_loss = 0.0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  std::map<std::string, double> accuracies;
};

struct TrainHistory {
  std::vector<IterationRecord> iterations;
  std::vector<EpochRecord> epochs;
};

// Line-delimited JSON, one object per iteration and per epoch.
void save_history(const TrainHistory& history, const std::filesystem::path& path);
TrainHistory load_history(const std::filesystem::path& path);

struct SWAState {
  ParamSet average;
  std::size_t count = 0;
};

// Running mean: avg <- avg + (snapshot - avg) / (count + 1).
SWAState swa_update(SWAState state, const ParamSet& snapshot);
// A copy of `like` whose parameter values are the SWA average.
Model swa_model(const Model& like, const SWAState& state);

// One SGD update on a batch. With `selector` the per-sample losses used for
// worst-case selection come from that (frozen) model instead of `model`.
IterationRecord w2d_step(Model& model, const Tensor& x, std::span<const std::size_t> labels, const W2DConfig& config,
                         Phase phase, Rng& mask_rng, Model* selector = nullptr);

// Plain mean-loss SGD step.
IterationRecord erm_step(Model& model, const Tensor& x, std::span<const std::size_t> labels, double learning_rate);

// Called after every epoch (1-based) with the live model.
using EpochCallback = std::function<void(std::size_t epoch, Model& model, TrainHistory& history)>;

struct TrainResult {
  Model model;
  TrainHistory history;
  std::optional<SWAState> swa;
};

TrainResult train(Algorithm algorithm, const Environment& data, const W2DConfig& config, const ModelSpec& spec,
                  const EpochCallback& on_epoch_end = {});

struct W2DStarResult {
  Model debiased;
  std::optional<Model> bias;  // absent when w2dstar_bias_epochs == 0
  TrainHistory history;
  std::optional<SWAState> swa;
};

// Stage 1 trains a bias model with ERM for w2dstar_bias_epochs; stage 2
// trains a fresh model with W2D where the frozen bias model ranks losses.
W2DStarResult train_w2d_star(const Environment& data, const W2DConfig& config, const ModelSpec& spec,
                             const EpochCallback& on_epoch_end = {});

}  // namespace w2d
