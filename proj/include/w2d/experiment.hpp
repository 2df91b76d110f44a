#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "w2d/datasets.hpp"
#include "w2d/harness.hpp"
#include "w2d/model.hpp"
#include "w2d/trainer.hpp"

namespace w2d {

// Parse or validation failure; the message names the line and/or field.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct DatasetConfig {
  std::string kind = "cmnist";  // cmnist | two_shift
  std::string name;             // dataset id in results; defaults to `kind`
  double validation_fraction = 0.2;
  // cmnist
  std::vector<ColorEnvironment> environments = CmnistOptions{}.environments;
  std::vector<std::string> test_environments{"-90"};  // each is held out in turn; results are averaged
  double label_noise = 0.25;
  std::size_t resolution = 28;
  bool grayscale = false;
  std::size_t max_samples = 0;
  // two_shift
  double diversity = 0.0;
  double correlation = 0.9;
  std::size_t n_per_env = 1000;
  std::size_t image_size = 12;
  double pixel_noise = 0.15;
  double shift_label_noise = 0.1;
};

struct ModelConfig {
  std::string architecture = "mlp";  // mnist-cnn | mlp | linear
  std::vector<std::size_t> hidden{128, 128};
  std::string spec_file;  // overrides `architecture` when set
};

struct SearchConfig {
  std::size_t trials = 1;
  std::size_t series = 1;
  SearchSpace space;  // empty: every trial uses the train.* values
};

struct OutputConfig {
  std::string dir = "results";
  bool checkpoint = true;
  bool history = true;
  std::size_t worst_samples = 0;  // top-k export per series when > 0
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string label;                 // algorithm id in results; defaults to `algorithm`
  std::string algorithm = "erm";     // erm | feature_only | sample_only | w2d | w2d_star
  SelectionStrategy selection = SelectionStrategy::test_domain;
  DatasetConfig dataset;
  ModelConfig model;
  W2DConfig train;
  SearchConfig search;
  OutputConfig output;

  std::string algorithm_label() const { return label.empty() ? algorithm : label; }
  std::string dataset_label() const { return dataset.name.empty() ? dataset.kind : dataset.name; }
};

// Flat "section.key = value" text; '#' starts a comment; unknown keys throw.
ExperimentConfig parse_experiment_config(std::string_view text);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);
// Every key, in a stable order; parse(format(c)) reproduces c.
std::string format_experiment_config(const ExperimentConfig& config);
// Range and registry checks that need no data; throws ConfigError.
void validate_experiment_config(const ExperimentConfig& config);
bool operator==(const ExperimentConfig& a, const ExperimentConfig& b);

DatasetBundle generate_dataset(const DatasetConfig& config, std::uint64_t seed);
ModelSpec model_spec_for(const ModelConfig& config, const Shape& input, std::size_t classes);

// ---- protocol ------------------------------------------------------------------

// One evaluation fold: a test environment and the environments trained on.
struct Fold {
  std::string test_environment;
  Environment train;                    // concatenated training splits
  Environment train_val;                // union of training validation splits
  Environment test_eval, test_val;      // disjoint halves of the test environment
  std::optional<Environment> held_out;  // leave-one-out only: excluded training environment
};

// Splits each TRAIN environment into train/val and the test environment into
// test_eval/test_val using `validation_fraction`. With leave_one_out the last
// TRAIN environment is withheld from training and serves as the criterion.
Fold make_fold(const DatasetBundle& bundle, const std::string& test_environment, double validation_fraction,
               SelectionStrategy strategy, std::uint64_t seed);

struct FoldOutcome {
  std::vector<CheckpointTrace> traces;  // one per checkpoint (epoch, or the SWA average)
  std::vector<double> test;             // test_eval accuracy per checkpoint
  std::size_t selected = 0;
  Model model;                          // parameters of the selected checkpoint
  TrainHistory history;
};

FoldOutcome run_fold(const Fold& fold, const std::string& algorithm, const W2DConfig& config, const ModelSpec& spec,
                     SelectionStrategy strategy);

// Applies search hyperparameters (phi, beta, rho, kappa, learning_rate,
// batch_size, epochs, swa_start_fraction) on top of `base`.
W2DConfig apply_hyperparameters(W2DConfig base, const Hyperparams& hp);

// ---- results files ---------------------------------------------------------------

struct TrialRecord {
  std::string algorithm, dataset;
  std::size_t series = 0, trial = 0;
  std::uint64_t seed = 0;
  Hyperparams hyperparameters;
  bool ok = true;
  std::string error;
  // Fold averages at each fold's selected checkpoint.
  std::optional<double> train_val, test_val, held_out;
  double test = 0.0;
};

struct ResultsSummary {
  std::string algorithm, dataset;
  AccuracyCell cell;
  std::vector<double> series_best;
};

struct ResultsFile {
  ExperimentConfig config;
  std::string version, timestamp;
  std::vector<TrialRecord> trials;
  std::optional<ResultsSummary> summary;
  std::optional<std::string> failure;
};

ResultsFile read_results(const std::filesystem::path& path);

// Runs generate -> search/train -> select -> evaluate and writes
// <output.dir>/results.jsonl (plus histories, checkpoints and exports).
// Config errors are raised before anything is written; runtime failures
// append a failure record to the results file and rethrow.
ResultsFile run_experiment(const ExperimentConfig& config);

// Per-algorithm comparison across results files; the `baseline` algorithm
// (matched case-insensitively) must be present.
RankingTable report(std::span<const std::filesystem::path> results, std::string_view baseline = "erm");

}  // namespace w2d
