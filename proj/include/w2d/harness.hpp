#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "w2d/datasets.hpp"
#include "w2d/model.hpp"
#include "w2d/trainer.hpp"

namespace w2d {

// ---- accuracy ----------------------------------------------------------------

struct AccuracyCell {
  double mean = 0.0;    // percent
  double stderr = 0.0;  // percent
};

// Percent of samples whose argmax logit (lowest index on ties) equals the label.
double accuracy_from_logits(const Tensor& logits, std::span<const std::size_t> labels);
double evaluate_accuracy(Model& model, const Environment& env);

// Mean and standard error (sample std / sqrt(n), 0 for a single value).
AccuracyCell summarize(std::span<const double> values);

// ---- model selection ---------------------------------------------------------

enum class SelectionStrategy { train_domain, test_domain, leave_one_out };

std::string_view strategy_name(SelectionStrategy s);
SelectionStrategy parse_strategy(std::string_view name);

// Accuracies of one checkpoint. Each strategy reads one field.
struct CheckpointTrace {
  std::optional<double> train_val;  // union of training-environment validation splits
  std::optional<double> test_val;   // validation split drawn from the test distribution
  std::optional<double> held_out;   // held-out training environment
};

std::optional<double> criterion_of(const CheckpointTrace& trace, SelectionStrategy strategy);

// Index of the checkpoint maximizing the strategy's criterion, earliest on ties.
// Throws std::invalid_argument on an empty trace list or a missing field.
std::size_t select_model(std::span<const CheckpointTrace> traces, SelectionStrategy strategy);

// ---- random search -----------------------------------------------------------

// Either a continuous range [lo, hi] or a finite set of choices.
struct HyperRange {
  double lo = 0.0, hi = 0.0;
  std::vector<double> choices;

  static HyperRange continuous(double lo, double hi);
  static HyperRange discrete(std::vector<double> choices);
  bool is_discrete() const { return !choices.empty(); }
  double sample(Rng& rng) const;
};

using SearchSpace = std::map<std::string, HyperRange>;
using Hyperparams = std::map<std::string, double>;

// phi, beta, rho and kappa over their published search ranges.
SearchSpace default_search_space();

struct TrialOutcome {
  double criterion = 0.0;  // accuracy under the active selection strategy
  double accuracy = 0.0;   // reported (test) accuracy at the selected checkpoint
};

struct SearchTrial {
  std::size_t series = 0;
  std::size_t trial = 0;
  std::uint64_t seed = 0;
  Hyperparams hyperparameters;
  std::optional<TrialOutcome> outcome;  // empty when the runner threw
  std::string error;
};

struct SearchResult {
  AccuracyCell cell;
  std::vector<double> series_best;         // reported accuracy of each series' best trial
  std::vector<std::size_t> best_trial;     // index into `trials` per series
  std::vector<SearchTrial> trials;
};

using TrialRunner = std::function<TrialOutcome(const Hyperparams&, std::uint64_t trial_seed)>;
// Observes every finished trial (successful or not) in execution order.
using TrialObserver = std::function<void(const SearchTrial&)>;

class SearchError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// For each series, draws n_trials configurations uniformly from `space`, runs
// them, and keeps the trial with the highest criterion (earliest on ties).
// Runner exceptions are recorded per trial; a series without a single
// successful trial raises SearchError.
SearchResult random_search(const SearchSpace& space, std::size_t n_trials, std::size_t n_series, std::uint64_t seed,
                           const TrialRunner& runner, const TrialObserver& observer = {});

// ---- ranking score -----------------------------------------------------------

// Sum over datasets of +1 / 0 / -1 for a mean above / within / below the
// closed band baseline.mean +- baseline.stderr.
int ranking_score(std::span<const AccuracyCell> row, std::span<const AccuracyCell> baseline);

struct AccuracyTable {
  std::vector<std::string> datasets;
  std::vector<std::pair<std::string, std::vector<AccuracyCell>>> rows;  // algorithm -> cell per dataset

  const std::vector<AccuracyCell>& row(std::string_view algorithm) const;
  void add(const std::string& algorithm, const std::string& dataset, AccuracyCell cell);
  // Throws DataError unless every row covers every dataset.
  void validate() const;
};

// CSV with header "algorithm,dataset,mean,stderr".
AccuracyTable read_accuracy_csv(const std::filesystem::path& path);
AccuracyTable parse_accuracy_csv(std::string_view text);
void write_accuracy_csv(const AccuracyTable& table, const std::filesystem::path& path);

struct RankingRow {
  std::string algorithm;
  std::vector<AccuracyCell> cells;
  double average = 0.0;
  int score = 0;
};

struct RankingTable {
  std::vector<std::string> datasets;
  std::vector<RankingRow> rows;  // by score, then average (both descending), then name
};

// The baseline row is matched case-insensitively.
RankingTable build_ranking_table(const AccuracyTable& table, std::string_view baseline = "ERM");
std::string format_ranking_text(const RankingTable& table);
std::string format_ranking_csv(const RankingTable& table);

// ---- visualization -----------------------------------------------------------

// Unnormalized sum_c weights[c] * maps[c]; maps is [C x H x W].
Tensor weighted_map_sum(const Tensor& maps, std::span<const double> weights);
// Min-max normalized weighted sum, [H x W]; a constant map becomes all zeros.
Tensor cam_from_maps(const Tensor& maps, std::span<const double> weights);
// Requires a CNN encoder ending in global average pooling and a single dense
// decoder layer; x is one sample [C x H x W] (or [1 x C x H x W]).
Tensor class_activation_map(Model& model, const Tensor& x, std::size_t class_id);

// Binary PGM (P5) and PPM (P6); values in [0, 1] are clamped and scaled to 255.
void write_pgm(const std::filesystem::path& path, std::size_t height, std::size_t width,
               std::span<const double> gray);
void write_ppm(const std::filesystem::path& path, std::size_t height, std::size_t width,
               std::span<const double> rgb);

struct SelectionCount {
  std::size_t index = 0;  // sample id in the training environment
  std::size_t count = 0;
};

// Selection frequency of every sample that was ever selected, sorted by count
// (descending) then index.
std::vector<SelectionCount> selection_counts(const TrainHistory& history);

// Writes <out>.txt (rank, index, count, label) and an image grid of the top-k
// samples to <out>.pgm (one channel) or <out>.ppm (two or three channels).
// Returns the emitted listing.
std::vector<SelectionCount> export_worst_samples(const TrainHistory& history, const Environment& env, std::size_t k,
                                                 const std::filesystem::path& out);

}  // namespace w2d
