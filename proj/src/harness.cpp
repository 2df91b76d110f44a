#include "w2d/harness.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

namespace w2d {

// ---- accuracy ----------------------------------------------------------------

namespace {
std::size_t count_correct(const Tensor& logits, std::span<const std::size_t> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size())
    throw ShapeError("accuracy: logits " + shape_string(logits.shape()) + " for " + std::to_string(labels.size()) +
                     " labels");
  const std::size_t c = logits.dim(1);
  const auto v = logits.values();
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto row = v.subspan(i * c, c);
    const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    correct += best == labels[i];
  }
  return correct;
}
}  // namespace

double accuracy_from_logits(const Tensor& logits, std::span<const std::size_t> labels) {
  if (labels.empty()) throw std::invalid_argument("accuracy: empty environment");
  return 100.0 * static_cast<double>(count_correct(logits, labels)) / static_cast<double>(labels.size());
}

double evaluate_accuracy(Model& model, const Environment& env) {
  if (env.size() == 0) throw std::invalid_argument("evaluate_accuracy: environment '" + env.name + "' is empty");
  constexpr std::size_t kChunk = 512;
  std::size_t correct = 0;
  std::vector<std::size_t> ids;
  for (std::size_t begin = 0; begin < env.size(); begin += kChunk) {
    const std::size_t end = std::min(env.size(), begin + kChunk);
    ids.resize(end - begin);
    std::iota(ids.begin(), ids.end(), begin);
    correct += count_correct(predict_logits(model, env.batch(ids)),
                             std::span<const std::size_t>(env.labels.data() + begin, end - begin));
  }
  return 100.0 * static_cast<double>(correct) / static_cast<double>(env.size());
}

AccuracyCell summarize(std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("summarize: no values");
  const double n = static_cast<double>(values.size());
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  if (values.size() == 1) return {mean, 0.0};
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return {mean, std::sqrt(ss / (n - 1.0)) / std::sqrt(n)};
}

// ---- model selection ---------------------------------------------------------

std::string_view strategy_name(SelectionStrategy s) {
  switch (s) {
    case SelectionStrategy::train_domain: return "train_domain";
    case SelectionStrategy::test_domain: return "test_domain";
    case SelectionStrategy::leave_one_out: return "leave_one_out";
  }
  return "?";
}

SelectionStrategy parse_strategy(std::string_view name) {
  for (auto s : {SelectionStrategy::train_domain, SelectionStrategy::test_domain, SelectionStrategy::leave_one_out})
    if (strategy_name(s) == name) return s;
  throw std::invalid_argument("unknown selection strategy '" + std::string(name) + "'");
}

std::optional<double> criterion_of(const CheckpointTrace& trace, SelectionStrategy strategy) {
  switch (strategy) {
    case SelectionStrategy::train_domain: return trace.train_val;
    case SelectionStrategy::test_domain: return trace.test_val;
    case SelectionStrategy::leave_one_out: return trace.held_out;
  }
  return std::nullopt;
}

std::size_t select_model(std::span<const CheckpointTrace> traces, SelectionStrategy strategy) {
  if (traces.empty()) throw std::invalid_argument("select_model: no checkpoints");
  std::size_t best = 0;
  double best_value = 0.0;
  for (std::size_t i = 0; i < traces.size(); ++i) {
    const auto v = criterion_of(traces[i], strategy);
    if (!v)
      throw std::invalid_argument("select_model: checkpoint " + std::to_string(i) + " lacks the " +
                                  std::string(strategy_name(strategy)) + " accuracy");
    if (i == 0 || *v > best_value) {
      best = i;
      best_value = *v;
    }
  }
  return best;
}

// ---- random search -----------------------------------------------------------

HyperRange HyperRange::continuous(double lo, double hi) {
  if (!(lo <= hi)) throw std::invalid_argument("search range: lower bound exceeds upper bound");
  return HyperRange{lo, hi, {}};
}

HyperRange HyperRange::discrete(std::vector<double> choices) {
  if (choices.empty()) throw std::invalid_argument("search range: empty choice set");
  return HyperRange{0.0, 0.0, std::move(choices)};
}

double HyperRange::sample(Rng& rng) const {
  if (is_discrete()) return choices[rng.below(choices.size())];
  return rng.uniform(lo, hi);
}

SearchSpace default_search_space() {
  return {{"beta", HyperRange::continuous(0.1, 0.3)},
          {"kappa", HyperRange::continuous(0.2, 0.4)},
          {"phi", HyperRange::continuous(0.1, 0.4)},
          {"rho", HyperRange::continuous(0.1, 0.5)}};
}

SearchResult random_search(const SearchSpace& space, std::size_t n_trials, std::size_t n_series, std::uint64_t seed,
                           const TrialRunner& runner, const TrialObserver& observer) {
  if (n_trials == 0) throw std::invalid_argument("random_search: n_trials must be >= 1");
  if (n_series == 0) throw std::invalid_argument("random_search: n_series must be >= 1");
  SearchResult result;
  for (std::size_t s = 0; s < n_series; ++s) {
    const std::uint64_t series_seed = derive_seed(seed, s);
    Rng sampler(derive_seed(series_seed, 0));
    std::optional<std::size_t> best;
    for (std::size_t t = 0; t < n_trials; ++t) {
      SearchTrial trial;
      trial.series = s;
      trial.trial = t;
      trial.seed = derive_seed(series_seed, t + 1);
      for (const auto& [name, range] : space) trial.hyperparameters[name] = range.sample(sampler);
      try {
        trial.outcome = runner(trial.hyperparameters, trial.seed);
      } catch (const std::exception& e) {
        trial.error = e.what();
      }
      result.trials.push_back(trial);
      if (observer) observer(result.trials.back());
      if (trial.outcome && (!best || trial.outcome->criterion > result.trials[*best].outcome->criterion))
        best = result.trials.size() - 1;
    }
    if (!best) throw SearchError("random_search: every trial of series " + std::to_string(s) + " failed");
    result.best_trial.push_back(*best);
    result.series_best.push_back(result.trials[*best].outcome->accuracy);
  }
  result.cell = summarize(result.series_best);
  return result;
}

// ---- ranking score -----------------------------------------------------------

namespace {

// Published cells carry one decimal; sums such as 63.3 + 0.2 must compare
// equal to 63.5, so the band edges get a tiny relative slack.
bool above(double value, double bound) { return value > bound + 1e-9 * std::max(1.0, std::abs(bound)); }

std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    const auto b = cell.find_first_not_of(" \t\r");
    const auto e = cell.find_last_not_of(" \t\r");
    out.push_back(b == std::string::npos ? "" : cell.substr(b, e - b + 1));
  }
  return out;
}

}  // namespace

int ranking_score(std::span<const AccuracyCell> row, std::span<const AccuracyCell> baseline) {
  if (row.size() != baseline.size())
    throw std::invalid_argument("ranking_score: row covers " + std::to_string(row.size()) + " datasets, baseline " +
                                std::to_string(baseline.size()));
  int score = 0;
  for (std::size_t i = 0; i < row.size(); ++i) {
    const double hi = baseline[i].mean + baseline[i].stderr;
    const double lo = baseline[i].mean - baseline[i].stderr;
    if (above(row[i].mean, hi))
      ++score;
    else if (above(lo, row[i].mean))
      --score;
  }
  return score;
}

const std::vector<AccuracyCell>& AccuracyTable::row(std::string_view algorithm) const {
  for (const auto& [name, cells] : rows)
    if (name == algorithm) return cells;
  throw DataError("accuracy table: no row for '" + std::string(algorithm) + "'");
}

void AccuracyTable::add(const std::string& algorithm, const std::string& dataset, AccuracyCell cell) {
  if (!std::isfinite(cell.mean) || cell.mean < 0.0 || cell.mean > 100.0)
    throw DataError("accuracy table: mean out of [0, 100] for " + algorithm + "/" + dataset);
  if (!std::isfinite(cell.stderr) || cell.stderr < 0.0)
    throw DataError("accuracy table: negative stderr for " + algorithm + "/" + dataset);
  auto d = std::find(datasets.begin(), datasets.end(), dataset);
  if (d == datasets.end()) d = datasets.insert(datasets.end(), dataset);
  const auto col = static_cast<std::size_t>(d - datasets.begin());
  auto r = std::find_if(rows.begin(), rows.end(), [&](const auto& p) { return p.first == algorithm; });
  if (r == rows.end()) r = rows.insert(rows.end(), {algorithm, {}});
  if (r->second.size() <= col) r->second.resize(col + 1, AccuracyCell{-1.0, -1.0});
  if (r->second[col].stderr >= 0.0) throw DataError("accuracy table: duplicate cell " + algorithm + "/" + dataset);
  r->second[col] = cell;
}

void AccuracyTable::validate() const {
  if (datasets.empty() || rows.empty()) throw DataError("accuracy table is empty");
  for (const auto& [name, cells] : rows) {
    bool complete = cells.size() == datasets.size();
    for (const auto& c : cells) complete = complete && c.stderr >= 0.0;
    if (!complete) throw DataError("accuracy table: dataset mismatch, '" + name + "' does not cover every dataset");
  }
}

AccuracyTable parse_accuracy_csv(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  AccuracyTable table;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto cells = split_csv_line(line);
    if (line_no == 1 && !cells.empty() && cells[0] == "algorithm") continue;
    if (cells.size() != 4) throw DataError("accuracy csv line " + std::to_string(line_no) + ": expected 4 fields");
    try {
      table.add(cells[0], cells[1], AccuracyCell{std::stod(cells[2]), std::stod(cells[3])});
    } catch (const std::logic_error&) {
      throw DataError("accuracy csv line " + std::to_string(line_no) + ": malformed number");
    }
  }
  table.validate();
  return table;
}

AccuracyTable read_accuracy_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_accuracy_csv(ss.str());
}

void write_accuracy_csv(const AccuracyTable& table, const std::filesystem::path& path) {
  table.validate();
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "algorithm,dataset,mean,stderr\n" << std::setprecision(17);
  for (const auto& [name, cells] : table.rows)
    for (std::size_t d = 0; d < cells.size(); ++d)
      out << name << ',' << table.datasets[d] << ',' << cells[d].mean << ',' << cells[d].stderr << '\n';
}

RankingTable build_ranking_table(const AccuracyTable& table, std::string_view baseline) {
  table.validate();
  const std::vector<AccuracyCell>* base = nullptr;
  for (const auto& [name, cells] : table.rows)
    if (lower(name) == lower(baseline)) base = &cells;
  if (!base) throw DataError("ranking: baseline row '" + std::string(baseline) + "' is missing");
  RankingTable out{table.datasets, {}};
  for (const auto& [name, cells] : table.rows) {
    RankingRow r{name, cells, 0.0, ranking_score(cells, *base)};
    for (const auto& c : cells) r.average += c.mean;
    r.average /= static_cast<double>(cells.size());
    out.rows.push_back(std::move(r));
  }
  std::stable_sort(out.rows.begin(), out.rows.end(), [](const RankingRow& a, const RankingRow& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.average != b.average) return a.average > b.average;
    return a.algorithm < b.algorithm;
  });
  return out;
}

std::string format_ranking_text(const RankingTable& table) {
  std::vector<std::vector<std::string>> grid;
  std::vector<std::string> header{"Algorithm"};
  header.insert(header.end(), table.datasets.begin(), table.datasets.end());
  header.push_back("Average");
  header.push_back("Ranking score");
  grid.push_back(header);
  for (const auto& r : table.rows) {
    std::vector<std::string> line{r.algorithm};
    for (const auto& c : r.cells) {
      std::ostringstream s;
      s << std::fixed << std::setprecision(1) << c.mean << " +- " << c.stderr;
      line.push_back(s.str());
    }
    std::ostringstream avg;
    avg << std::fixed << std::setprecision(1) << r.average;
    line.push_back(avg.str());
    line.push_back((r.score > 0 ? "+" : "") + std::to_string(r.score));
    grid.push_back(std::move(line));
  }
  std::vector<std::size_t> width(header.size(), 0);
  for (const auto& line : grid)
    for (std::size_t i = 0; i < line.size(); ++i) width[i] = std::max(width[i], line[i].size());
  std::ostringstream out;
  for (std::size_t row = 0; row < grid.size(); ++row) {
    for (std::size_t i = 0; i < grid[row].size(); ++i) {
      if (i) out << "  ";
      if (i == 0)
        out << std::left << std::setw(static_cast<int>(width[i])) << grid[row][i];
      else
        out << std::right << std::setw(static_cast<int>(width[i])) << grid[row][i];
    }
    out << '\n';
    if (row == 0) out << std::string(std::accumulate(width.begin(), width.end(), 2 * (width.size() - 1)), '-') << '\n';
  }
  return out.str();
}

std::string format_ranking_csv(const RankingTable& table) {
  std::ostringstream out;
  out << "algorithm";
  for (const auto& d : table.datasets) out << ',' << d << "_mean," << d << "_stderr";
  out << ",average,ranking_score\n" << std::setprecision(10);
  for (const auto& r : table.rows) {
    out << r.algorithm;
    for (const auto& c : r.cells) out << ',' << c.mean << ',' << c.stderr;
    out << ',' << r.average << ',' << r.score << '\n';
  }
  return out.str();
}

// ---- visualization -----------------------------------------------------------

Tensor weighted_map_sum(const Tensor& maps, std::span<const double> weights) {
  if (maps.rank() != 3) throw ShapeError("cam: feature maps must be [C x H x W], got " + shape_string(maps.shape()));
  const std::size_t c = maps.dim(0), plane = maps.dim(1) * maps.dim(2);
  if (weights.size() != c)
    throw ShapeError("cam: " + std::to_string(weights.size()) + " weights for " + std::to_string(c) + " channels");
  std::vector<double> out(plane, 0.0);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < plane; ++i) out[i] += weights[ch] * maps[ch * plane + i];
  return Tensor({maps.dim(1), maps.dim(2)}, std::move(out));
}

Tensor cam_from_maps(const Tensor& maps, std::span<const double> weights) {
  const Tensor raw = weighted_map_sum(maps, weights);
  const auto v = raw.values();
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  std::vector<double> out(v.size(), 0.0);
  if (*hi > *lo)
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = (v[i] - *lo) / (*hi - *lo);
  return Tensor(raw.shape(), std::move(out));
}

Tensor class_activation_map(Model& model, const Tensor& x, std::size_t class_id) {
  const auto& spec = model.spec();
  if (spec.decoder.size() != 1 || spec.decoder[0].kind != LayerKind::dense)
    throw ModelSpecError("class activation map needs a single dense decoder layer");
  if (class_id >= model.classes())
    throw std::out_of_range("class id " + std::to_string(class_id) + " outside [0, " +
                            std::to_string(model.classes()) + ")");
  Shape batched = x.shape();
  if (batched == spec.input) batched.insert(batched.begin(), 1);
  if (batched.size() != spec.input.size() + 1 || batched[0] != 1)
    throw ShapeError("cam: expected one sample of shape " + shape_string(spec.input));
  Tape tape;
  const Var maps = model.encode_spatial(tape, tape.input(x.reshaped(batched)));
  const Shape& ms = maps.shape();
  const Tensor planes = maps.value().reshaped({ms[1], ms[2], ms[3]});
  const Tensor& w = model.params().at("decoder.0.weight").value;
  return cam_from_maps(planes, w.values().subspan(class_id * w.dim(1), w.dim(1)));
}

namespace {
void write_pnm(const std::filesystem::path& path, const char* magic, std::size_t height, std::size_t width,
               std::size_t channels, std::span<const double> values) {
  if (values.size() != height * width * channels)
    throw ShapeError("image: " + std::to_string(values.size()) + " values for " + std::to_string(height) + "x" +
                     std::to_string(width) + "x" + std::to_string(channels));
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << magic << '\n' << width << ' ' << height << "\n255\n";
  for (double v : values) {
    const double c = std::clamp(std::isfinite(v) ? v : 0.0, 0.0, 1.0);
    out.put(static_cast<char>(static_cast<unsigned char>(std::lround(c * 255.0))));
  }
}
}  // namespace

void write_pgm(const std::filesystem::path& path, std::size_t height, std::size_t width,
               std::span<const double> gray) {
  write_pnm(path, "P5", height, width, 1, gray);
}

void write_ppm(const std::filesystem::path& path, std::size_t height, std::size_t width,
               std::span<const double> rgb) {
  write_pnm(path, "P6", height, width, 3, rgb);
}

std::vector<SelectionCount> selection_counts(const TrainHistory& history) {
  std::map<std::size_t, std::size_t> counts;
  for (const auto& it : history.iterations)
    for (auto pos : it.selected) {
      if (pos >= it.batch.size()) throw DataError("history: selected position outside its batch");
      ++counts[it.batch[pos]];
    }
  std::vector<SelectionCount> out;
  for (const auto& [idx, n] : counts) out.push_back({idx, n});
  std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.count > b.count; });
  return out;
}

std::vector<SelectionCount> export_worst_samples(const TrainHistory& history, const Environment& env, std::size_t k,
                                                 const std::filesystem::path& out) {
  if (history.iterations.empty()) throw std::invalid_argument("export_worst_samples: empty history");
  auto listing = selection_counts(history);
  if (listing.size() > k) listing.resize(k);

  auto txt = out;
  txt += ".txt";
  std::ofstream list(txt);
  if (!list) throw std::runtime_error("cannot write " + txt.string());
  list << "rank index count label\n";
  for (std::size_t r = 0; r < listing.size(); ++r) {
    if (listing[r].index >= env.size())
      throw DataError("export_worst_samples: sample " + std::to_string(listing[r].index) + " not in '" + env.name +
                      "'");
    list << r << ' ' << listing[r].index << ' ' << listing[r].count << ' ' << env.labels[listing[r].index] << '\n';
  }
  if (listing.empty()) return listing;

  const auto& s = env.sample_shape;
  const std::size_t ch = s.size() == 3 ? s[0] : 1, h = s.size() == 3 ? s[1] : 1, w = s.back();
  if (ch > 3) throw ShapeError("export_worst_samples: at most 3 channels can be rendered");
  const std::size_t cols = std::min<std::size_t>(listing.size(), 8);
  const std::size_t rows = (listing.size() + cols - 1) / cols;
  const std::size_t gh = rows * (h + 1) + 1, gw = cols * (w + 1) + 1;
  const std::size_t out_ch = ch == 1 ? 1 : 3;
  std::vector<double> grid(gh * gw * out_ch, 1.0);
  for (std::size_t r = 0; r < listing.size(); ++r) {
    const auto px = env.sample(listing[r].index);
    const std::size_t oy = (r / cols) * (h + 1) + 1, ox = (r % cols) * (w + 1) + 1;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        for (std::size_t c = 0; c < out_ch; ++c)
          grid[((oy + y) * gw + ox + x) * out_ch + c] = c < ch ? px[(c * h + y) * w + x] : 0.0;
  }
  auto img = out;
  if (out_ch == 1) {
    img += ".pgm";
    write_pgm(img, gh, gw, grid);
  } else {
    img += ".ppm";
    write_ppm(img, gh, gw, grid);
  }
  return listing;
}

}  // namespace w2d
