#include "w2d/experiment.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <ctime>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include <json.hpp>

#ifndef W2D_VERSION
#define W2D_VERSION "dev"
#endif

namespace w2d {

namespace {

using json = nlohmann::json;

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.push_back(trim(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

std::string num(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

double to_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc{} || r.ptr != v.data() + v.size() || !std::isfinite(out))
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  return out;
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc{} || r.ptr != v.data() + v.size())
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

std::string join(const std::vector<std::string>& parts, char sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) out += (i ? std::string(1, sep) : "") + parts[i];
  return out;
}

std::string format_range(const HyperRange& r) {
  if (!r.is_discrete()) return num(r.lo) + ":" + num(r.hi);
  std::vector<std::string> parts;
  for (double c : r.choices) parts.push_back(num(c));
  return join(parts, '|');
}

HyperRange parse_range(const std::string& key, const std::string& v) {
  if (v.find(':') != std::string::npos) {
    const auto p = split(v, ':');
    if (p.size() != 2) throw ConfigError(key + ": expected lo:hi");
    const double lo = to_double(key, p[0]), hi = to_double(key, p[1]);
    if (lo > hi) throw ConfigError(key + ": lower bound exceeds upper bound");
    return HyperRange::continuous(lo, hi);
  }
  std::vector<double> choices;
  for (const auto& c : split(v, '|')) choices.push_back(to_double(key, c));
  return HyperRange::discrete(std::move(choices));
}

const std::vector<std::string> kAlgorithms{"erm", "feature_only", "sample_only", "w2d", "w2d_star"};
const std::vector<std::string> kSearchable{"phi",    "beta",       "rho",    "kappa", "learning_rate",
                                           "batch_size", "epochs", "swa_start_fraction"};

// Setter table: one entry per accepted key.
using Setter = std::function<void(ExperimentConfig&, const std::string& key, const std::string& value)>;

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = [] {
    std::map<std::string, Setter> t;
    t["seed"] = [](auto& c, auto& k, auto& v) { c.seed = to_u64(k, v); };
    t["label"] = [](auto& c, auto&, auto& v) { c.label = v; };
    t["algorithm"] = [](auto& c, auto&, auto& v) { c.algorithm = v; };
    t["selection"] = [](auto& c, auto& k, auto& v) {
      try {
        c.selection = parse_strategy(v);
      } catch (const std::invalid_argument& e) {
        throw ConfigError(k + ": " + e.what());
      }
    };
    t["dataset.kind"] = [](auto& c, auto&, auto& v) { c.dataset.kind = v; };
    t["dataset.name"] = [](auto& c, auto&, auto& v) { c.dataset.name = v; };
    t["dataset.validation_fraction"] = [](auto& c, auto& k, auto& v) { c.dataset.validation_fraction = to_double(k, v); };
    t["dataset.environments"] = [](auto& c, auto& k, auto& v) {
      c.dataset.environments.clear();
      for (const auto& item : split(v, ',')) {
        const auto p = split(item, ':');
        if (p.size() != 2 || p[0].empty()) throw ConfigError(k + ": expected name:color_flip_prob entries");
        c.dataset.environments.push_back({p[0], to_double(k, p[1])});
      }
    };
    t["dataset.test_environments"] = [](auto& c, auto&, auto& v) { c.dataset.test_environments = split(v, ','); };
    t["dataset.label_noise"] = [](auto& c, auto& k, auto& v) { c.dataset.label_noise = to_double(k, v); };
    t["dataset.resolution"] = [](auto& c, auto& k, auto& v) { c.dataset.resolution = to_u64(k, v); };
    t["dataset.grayscale"] = [](auto& c, auto& k, auto& v) { c.dataset.grayscale = to_bool(k, v); };
    t["dataset.max_samples"] = [](auto& c, auto& k, auto& v) { c.dataset.max_samples = to_u64(k, v); };
    t["dataset.diversity"] = [](auto& c, auto& k, auto& v) { c.dataset.diversity = to_double(k, v); };
    t["dataset.correlation"] = [](auto& c, auto& k, auto& v) { c.dataset.correlation = to_double(k, v); };
    t["dataset.n_per_env"] = [](auto& c, auto& k, auto& v) { c.dataset.n_per_env = to_u64(k, v); };
    t["dataset.image_size"] = [](auto& c, auto& k, auto& v) { c.dataset.image_size = to_u64(k, v); };
    t["dataset.pixel_noise"] = [](auto& c, auto& k, auto& v) { c.dataset.pixel_noise = to_double(k, v); };
    t["dataset.shift_label_noise"] = [](auto& c, auto& k, auto& v) { c.dataset.shift_label_noise = to_double(k, v); };
    t["model.architecture"] = [](auto& c, auto&, auto& v) { c.model.architecture = v; };
    t["model.hidden"] = [](auto& c, auto& k, auto& v) {
      c.model.hidden.clear();
      if (!v.empty())
        for (const auto& h : split(v, ',')) c.model.hidden.push_back(to_u64(k, h));
    };
    t["model.spec_file"] = [](auto& c, auto&, auto& v) { c.model.spec_file = v; };
    t["train.phi"] = [](auto& c, auto& k, auto& v) { c.train.phi = to_double(k, v); };
    t["train.beta"] = [](auto& c, auto& k, auto& v) { c.train.beta = to_double(k, v); };
    t["train.rho"] = [](auto& c, auto& k, auto& v) { c.train.rho = to_double(k, v); };
    t["train.kappa"] = [](auto& c, auto& k, auto& v) { c.train.kappa = to_double(k, v); };
    t["train.batch_size"] = [](auto& c, auto& k, auto& v) { c.train.batch_size = to_u64(k, v); };
    t["train.epochs"] = [](auto& c, auto& k, auto& v) { c.train.epochs = to_u64(k, v); };
    t["train.learning_rate"] = [](auto& c, auto& k, auto& v) { c.train.learning_rate = to_double(k, v); };
    t["train.swa"] = [](auto& c, auto& k, auto& v) { c.train.swa_enabled = to_bool(k, v); };
    t["train.swa_start_fraction"] = [](auto& c, auto& k, auto& v) { c.train.swa_start_fraction = to_double(k, v); };
    t["train.w2dstar_bias_epochs"] = [](auto& c, auto& k, auto& v) { c.train.w2dstar_bias_epochs = to_u64(k, v); };
    t["train.importance"] = [](auto& c, auto& k, auto& v) {
      if (v == "true_class")
        c.train.importance = ImportanceTarget::true_class;
      else if (v == "predicted_class")
        c.train.importance = ImportanceTarget::predicted_class;
      else
        throw ConfigError(k + ": expected true_class or predicted_class, got '" + v + "'");
    };
    t["search.trials"] = [](auto& c, auto& k, auto& v) { c.search.trials = to_u64(k, v); };
    t["search.series"] = [](auto& c, auto& k, auto& v) { c.search.series = to_u64(k, v); };
    t["output.dir"] = [](auto& c, auto&, auto& v) { c.output.dir = v; };
    t["output.checkpoint"] = [](auto& c, auto& k, auto& v) { c.output.checkpoint = to_bool(k, v); };
    t["output.history"] = [](auto& c, auto& k, auto& v) { c.output.history = to_bool(k, v); };
    t["output.worst_samples"] = [](auto& c, auto& k, auto& v) { c.output.worst_samples = to_u64(k, v); };
    return t;
  }();
  return table;
}

std::string iso_timestamp() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace

// ---- config ----------------------------------------------------------------------

ExperimentConfig parse_experiment_config(std::string_view text) {
  ExperimentConfig c;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  std::map<std::string, std::size_t> seen;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    const std::string where = "line " + std::to_string(line_no) + ": ";
    if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value'");
    const std::string key = trim(std::string_view(line).substr(0, eq));
    const std::string value = trim(std::string_view(line).substr(eq + 1));
    if (seen.contains(key))
      throw ConfigError(where + key + " repeats line " + std::to_string(seen[key]));
    seen[key] = line_no;
    try {
      if (key.starts_with("search.space.")) {
        const std::string name = key.substr(13);
        if (std::find(kSearchable.begin(), kSearchable.end(), name) == kSearchable.end())
          throw ConfigError(key + ": not a searchable hyperparameter");
        c.search.space[name] = parse_range(key, value);
        continue;
      }
      const auto it = setters().find(key);
      if (it == setters().end()) throw ConfigError(key + ": unknown key");
      it->second(c, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    } catch (const std::invalid_argument& e) {
      throw ConfigError(where + key + ": " + e.what());
    }
  }
  return c;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_experiment_config(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::string format_experiment_config(const ExperimentConfig& c) {
  std::ostringstream o;
  auto kv = [&](const std::string& k, const std::string& v) { o << k << " = " << v << '\n'; };
  auto b = [](bool v) { return std::string(v ? "true" : "false"); };
  kv("seed", std::to_string(c.seed));
  kv("label", c.label);
  kv("algorithm", c.algorithm);
  kv("selection", std::string(strategy_name(c.selection)));
  const auto& d = c.dataset;
  kv("dataset.kind", d.kind);
  kv("dataset.name", d.name);
  kv("dataset.validation_fraction", num(d.validation_fraction));
  std::vector<std::string> envs;
  for (const auto& e : d.environments) envs.push_back(e.name + ":" + num(e.color_flip_prob));
  kv("dataset.environments", join(envs, ','));
  kv("dataset.test_environments", join(d.test_environments, ','));
  kv("dataset.label_noise", num(d.label_noise));
  kv("dataset.resolution", std::to_string(d.resolution));
  kv("dataset.grayscale", b(d.grayscale));
  kv("dataset.max_samples", std::to_string(d.max_samples));
  kv("dataset.diversity", num(d.diversity));
  kv("dataset.correlation", num(d.correlation));
  kv("dataset.n_per_env", std::to_string(d.n_per_env));
  kv("dataset.image_size", std::to_string(d.image_size));
  kv("dataset.pixel_noise", num(d.pixel_noise));
  kv("dataset.shift_label_noise", num(d.shift_label_noise));
  kv("model.architecture", c.model.architecture);
  std::vector<std::string> hidden;
  for (auto h : c.model.hidden) hidden.push_back(std::to_string(h));
  kv("model.hidden", join(hidden, ','));
  kv("model.spec_file", c.model.spec_file);
  const auto& t = c.train;
  kv("train.phi", num(t.phi));
  kv("train.beta", num(t.beta));
  kv("train.rho", num(t.rho));
  kv("train.kappa", num(t.kappa));
  kv("train.batch_size", std::to_string(t.batch_size));
  kv("train.epochs", std::to_string(t.epochs));
  kv("train.learning_rate", num(t.learning_rate));
  kv("train.swa", b(t.swa_enabled));
  kv("train.swa_start_fraction", num(t.swa_start_fraction));
  kv("train.w2dstar_bias_epochs", std::to_string(t.w2dstar_bias_epochs));
  kv("train.importance", t.importance == ImportanceTarget::true_class ? "true_class" : "predicted_class");
  kv("search.trials", std::to_string(c.search.trials));
  kv("search.series", std::to_string(c.search.series));
  for (const auto& [name, range] : c.search.space) kv("search.space." + name, format_range(range));
  kv("output.dir", c.output.dir);
  kv("output.checkpoint", b(c.output.checkpoint));
  kv("output.history", b(c.output.history));
  kv("output.worst_samples", std::to_string(c.output.worst_samples));
  return o.str();
}

bool operator==(const ExperimentConfig& a, const ExperimentConfig& b) {
  return format_experiment_config(a) == format_experiment_config(b);
}

void validate_experiment_config(const ExperimentConfig& c) {
  auto unit = [](double v, const std::string& field) {
    if (!(v >= 0.0 && v <= 1.0)) throw ConfigError(field + " = " + num(v) + " must lie in [0, 1]");
  };
  if (std::find(kAlgorithms.begin(), kAlgorithms.end(), c.algorithm) == kAlgorithms.end())
    throw ConfigError("algorithm: unknown algorithm '" + c.algorithm + "'");
  const auto& d = c.dataset;
  if (!(d.validation_fraction > 0.0 && d.validation_fraction < 1.0))
    throw ConfigError("dataset.validation_fraction = " + num(d.validation_fraction) + " must lie in (0, 1)");
  if (d.kind == "cmnist") {
    unit(d.label_noise, "dataset.label_noise");
    if (d.environments.size() < 2) throw ConfigError("dataset.environments: need at least two environments");
    for (const auto& e : d.environments) unit(e.color_flip_prob, "dataset.environments[" + e.name + "]");
    if (d.test_environments.empty()) throw ConfigError("dataset.test_environments: empty");
    for (const auto& t : d.test_environments)
      if (std::none_of(d.environments.begin(), d.environments.end(), [&](const auto& e) { return e.name == t; }))
        throw ConfigError("dataset.test_environments: unknown environment '" + t + "'");
    if (d.resolution != 28 && d.resolution != 14) throw ConfigError("dataset.resolution must be 28 or 14");
  } else if (d.kind == "two_shift") {
    unit(d.diversity, "dataset.diversity");
    unit(d.correlation, "dataset.correlation");
    unit(d.pixel_noise, "dataset.pixel_noise");
    unit(d.shift_label_noise, "dataset.shift_label_noise");
    if (d.n_per_env < 2) throw ConfigError("dataset.n_per_env must be at least 2");
    if (d.image_size < 6) throw ConfigError("dataset.image_size must be at least 6");
  } else {
    throw ConfigError("dataset.kind: unknown dataset '" + d.kind + "'");
  }
  if (c.model.spec_file.empty()) {
    const auto& a = c.model.architecture;
    if (a != "mnist-cnn" && a != "mlp" && a != "linear")
      throw ConfigError("model.architecture: unknown architecture '" + a + "'");
    if (a == "mlp" && (c.model.hidden.empty() || std::count(c.model.hidden.begin(), c.model.hidden.end(), 0u)))
      throw ConfigError("model.hidden: mlp needs positive hidden widths");
  }
  try {
    c.train.validate(SIZE_MAX);
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    throw ConfigError("train." + msg);
  }
  if (c.search.trials == 0) throw ConfigError("search.trials must be at least 1");
  if (c.search.series == 0) throw ConfigError("search.series must be at least 1");
  for (const auto& [name, range] : c.search.space) {
    const std::vector<double> ends =
        range.is_discrete() ? range.choices : std::vector<double>{range.lo, range.hi};
    for (double v : ends) {
      const std::string field = "search.space." + name;
      if (name == "phi" || name == "beta" || name == "kappa" || name == "swa_start_fraction") unit(v, field);
      if (name == "rho" && !(v > 0.0 && v <= 1.0)) throw ConfigError(field + " = " + num(v) + " must lie in (0, 1]");
      if (name == "learning_rate" && !(v > 0.0)) throw ConfigError(field + " must be positive");
      if ((name == "batch_size" || name == "epochs") && !(v >= 1.0)) throw ConfigError(field + " must be >= 1");
    }
  }
  if (c.output.dir.empty()) throw ConfigError("output.dir: empty");
}

DatasetBundle generate_dataset(const DatasetConfig& d, std::uint64_t seed) {
  if (d.kind == "two_shift")
    return generate_two_shift(seed, d.diversity, d.correlation, d.n_per_env,
                              TwoShiftOptions{d.image_size, d.shift_label_noise, d.pixel_noise});
  CmnistOptions o;
  o.label_noise = d.label_noise;
  o.environments = d.environments;
  // Each listed environment is held out in its own fold; the bundle itself
  // records the first one as its TEST role.
  o.test_environments = {d.test_environments.front()};
  o.resolution = d.resolution;
  o.grayscale = d.grayscale;
  o.max_samples = d.max_samples;
  return generate_cmnist(load_digits(default_data_dir()), seed, o);
}

ModelSpec model_spec_for(const ModelConfig& m, const Shape& input, std::size_t classes) {
  if (m.spec_file.empty()) return registered_spec(m.architecture, input, classes, m.hidden);
  ModelSpec spec = load_model_spec(m.spec_file);
  if (spec.input != input || spec.classes != classes)
    throw ModelSpecError("spec file " + m.spec_file + " expects input " + shape_string(spec.input) + " / " +
                         std::to_string(spec.classes) + " classes; data has " + shape_string(input) + " / " +
                         std::to_string(classes));
  return spec;
}

// ---- protocol --------------------------------------------------------------------

Fold make_fold(const DatasetBundle& bundle, const std::string& test_environment, double validation_fraction,
               SelectionStrategy strategy, std::uint64_t seed) {
  const Environment& test = bundle.env(test_environment);
  std::vector<const Environment*> train_envs;
  for (const auto& e : bundle.environments)
    if (e.name != test_environment) train_envs.push_back(&e);
  if (train_envs.empty()) throw DataError("fold: no training environment besides '" + test_environment + "'");
  Fold fold;
  fold.test_environment = test_environment;
  if (strategy == SelectionStrategy::leave_one_out) {
    if (train_envs.size() < 2) throw DataError("leave-one-out needs at least two training environments");
    fold.held_out = *train_envs.back();
    train_envs.pop_back();
  }
  std::vector<Environment> trains, vals;
  for (std::size_t i = 0; i < train_envs.size(); ++i) {
    auto s = split_environment(*train_envs[i], SplitSpec{validation_fraction, derive_seed(seed, i)});
    trains.push_back(std::move(s.train));
    vals.push_back(std::move(s.val));
  }
  fold.train = concat(trains, "train");
  fold.train_val = concat(vals, "train_val");
  auto ts = split_environment(test, SplitSpec{0.5, derive_seed(seed, 1000)});
  fold.test_eval = std::move(ts.train);
  fold.test_val = std::move(ts.val);
  fold.test_eval.name = test_environment + "/eval";
  fold.test_val.name = test_environment + "/val";
  return fold;
}

FoldOutcome run_fold(const Fold& fold, const std::string& algorithm, const W2DConfig& config, const ModelSpec& spec,
                     SelectionStrategy strategy) {
  if (strategy == SelectionStrategy::leave_one_out && !fold.held_out)
    throw std::invalid_argument("run_fold: leave-one-out selection needs a held-out environment");
  std::vector<CheckpointTrace> traces;
  std::vector<double> test;
  std::optional<Model> best;
  double best_criterion = 0.0;
  std::size_t selected = 0;

  auto evaluate = [&](Model& m) -> std::map<std::string, double> {
    CheckpointTrace t;
    t.train_val = evaluate_accuracy(m, fold.train_val);
    t.test_val = evaluate_accuracy(m, fold.test_val);
    if (fold.held_out) t.held_out = evaluate_accuracy(m, *fold.held_out);
    traces.push_back(t);
    test.push_back(evaluate_accuracy(m, fold.test_eval));
    const double crit = *criterion_of(t, strategy);
    if (!best || crit > best_criterion) {
      best = m;
      best_criterion = crit;
      selected = traces.size() - 1;
    }
    std::map<std::string, double> acc{{"train_val", *t.train_val}, {"test_val", *t.test_val}, {"test", test.back()}};
    if (t.held_out) acc["held_out"] = *t.held_out;
    return acc;
  };
  const EpochCallback cb = [&](std::size_t, Model& m, TrainHistory& h) {
    if (!config.swa_enabled) h.epochs.back().accuracies = evaluate(m);
  };

  TrainHistory history;
  std::optional<SWAState> swa;
  std::optional<Model> last;
  if (algorithm == "w2d_star") {
    auto r = train_w2d_star(fold.train, config, spec, cb);
    history = std::move(r.history);
    swa = std::move(r.swa);
    last = std::move(r.debiased);
  } else {
    auto r = train(parse_algorithm(algorithm), fold.train, config, spec, cb);
    history = std::move(r.history);
    swa = std::move(r.swa);
    last = std::move(r.model);
  }
  if (config.swa_enabled) {
    Model averaged = swa_model(*last, *swa);
    history.epochs.back().accuracies = evaluate(averaged);
  }
  return FoldOutcome{std::move(traces), std::move(test), selected, std::move(*best), std::move(history)};
}

W2DConfig apply_hyperparameters(W2DConfig base, const Hyperparams& hp) {
  for (const auto& [name, v] : hp) {
    if (name == "phi") base.phi = v;
    else if (name == "beta") base.beta = v;
    else if (name == "rho") base.rho = v;
    else if (name == "kappa") base.kappa = v;
    else if (name == "learning_rate") base.learning_rate = v;
    else if (name == "swa_start_fraction") base.swa_start_fraction = v;
    else if (name == "batch_size") base.batch_size = static_cast<std::size_t>(std::llround(v));
    else if (name == "epochs") base.epochs = static_cast<std::size_t>(std::llround(v));
    else throw std::invalid_argument("unknown hyperparameter '" + name + "'");
  }
  return base;
}

// ---- results ---------------------------------------------------------------------

namespace {

json trial_json(const TrialRecord& r) {
  json j{{"type", "trial"},   {"algorithm", r.algorithm}, {"dataset", r.dataset},
         {"series", r.series}, {"trial", r.trial},         {"seed", r.seed},
         {"hyperparameters", r.hyperparameters},           {"status", r.ok ? "ok" : "failed"}};
  if (!r.ok) {
    j["error"] = r.error;
    return j;
  }
  if (r.train_val) j["train_val"] = *r.train_val;
  if (r.test_val) j["test_val"] = *r.test_val;
  if (r.held_out) j["held_out"] = *r.held_out;
  j["test"] = r.test;
  return j;
}

TrialRecord trial_from_json(const json& j) {
  TrialRecord r;
  r.algorithm = j.at("algorithm");
  r.dataset = j.at("dataset");
  r.series = j.at("series");
  r.trial = j.at("trial");
  r.seed = j.at("seed");
  r.hyperparameters = j.at("hyperparameters").get<Hyperparams>();
  r.ok = j.at("status") == "ok";
  if (!r.ok) {
    r.error = j.value("error", "");
    return r;
  }
  if (j.contains("train_val")) r.train_val = j["train_val"].get<double>();
  if (j.contains("test_val")) r.test_val = j["test_val"].get<double>();
  if (j.contains("held_out")) r.held_out = j["held_out"].get<double>();
  r.test = j.at("test");
  return r;
}

struct SeriesArtifacts {
  double criterion = 0.0;
  std::optional<Model> model;
  TrainHistory history;
};

}  // namespace

ResultsFile read_results(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open results " + path.string());
  ResultsFile out;
  std::string line;
  std::size_t line_no = 0;
  bool header = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = json::parse(line);
      const std::string type = j.at("type");
      if (type == "header") {
        out.config = parse_experiment_config(j.at("config").get<std::string>());
        out.version = j.at("version");
        out.timestamp = j.at("timestamp");
        header = true;
      } else if (type == "trial") {
        out.trials.push_back(trial_from_json(j));
      } else if (type == "summary") {
        out.summary = ResultsSummary{j.at("algorithm"), j.at("dataset"),
                                     AccuracyCell{j.at("mean"), j.at("stderr")},
                                     j.at("series_best").get<std::vector<double>>()};
      } else if (type == "failure") {
        out.failure = j.at("message").get<std::string>();
      }
    } catch (const json::exception& e) {
      throw DataError(path.string() + " line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (!header) throw DataError(path.string() + ": missing header record");
  return out;
}

ResultsFile run_experiment(const ExperimentConfig& config) {
  validate_experiment_config(config);
  // Everything that can be rejected from the config alone is rejected before
  // the output directory is touched.
  const DatasetBundle bundle = generate_dataset(config.dataset, derive_seed(config.seed, 101));
  const std::vector<std::string> test_envs =
      config.dataset.kind == "two_shift" ? std::vector<std::string>{"test"} : config.dataset.test_environments;
  std::vector<Fold> folds;
  for (std::size_t i = 0; i < test_envs.size(); ++i)
    folds.push_back(make_fold(bundle, test_envs[i], config.dataset.validation_fraction, config.selection,
                              derive_seed(config.seed, 200 + i)));
  const auto& first = folds.front().train;
  std::size_t classes = 0;
  for (const auto& e : bundle.environments)
    for (auto l : e.labels) classes = std::max(classes, l + 1);
  ModelSpec spec;
  try {
    spec = model_spec_for(config.model, first.sample_shape, std::max<std::size_t>(classes, 2));
    encoder_output_shape(spec);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
  for (const auto& f : folds)
    try {
      config.train.validate(f.train.size());
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("train.") + e.what());
    }

  const std::filesystem::path dir = config.output.dir;
  std::filesystem::create_directories(dir);
  std::ofstream results(dir / "results.jsonl");
  if (!results) throw std::runtime_error("cannot write " + (dir / "results.jsonl").string());

  ResultsFile file;
  file.config = config;
  file.version = W2D_VERSION;
  file.timestamp = iso_timestamp();
  results << json{{"type", "header"},
                  {"format", "w2d-results 1"},
                  {"version", file.version},
                  {"timestamp", file.timestamp},
                  {"config", format_experiment_config(config)}}
                 .dump()
          << '\n'
          << std::flush;

  std::vector<SeriesArtifacts> artifacts(config.search.series);
  std::optional<FoldOutcome> last_first_fold;
  double last_criterion = 0.0;

  const TrialRunner runner = [&](const Hyperparams& hp, std::uint64_t trial_seed) {
    W2DConfig tc = apply_hyperparameters(config.train, hp);
    tc.seed = trial_seed;
    double crit = 0.0, test = 0.0;
    last_first_fold.reset();
    for (std::size_t i = 0; i < folds.size(); ++i) {
      tc.validate(folds[i].train.size());
      FoldOutcome o = run_fold(folds[i], config.algorithm, tc, spec, config.selection);
      crit += *criterion_of(o.traces[o.selected], config.selection);
      test += o.test[o.selected];
      if (i == 0) last_first_fold = std::move(o);
    }
    last_criterion = crit / static_cast<double>(folds.size());
    return TrialOutcome{last_criterion, test / static_cast<double>(folds.size())};
  };

  const TrialObserver observer = [&](const SearchTrial& t) {
    TrialRecord r;
    r.algorithm = config.algorithm_label();
    r.dataset = config.dataset_label();
    r.series = t.series;
    r.trial = t.trial;
    r.seed = t.seed;
    r.hyperparameters = t.hyperparameters;
    r.ok = t.outcome.has_value();
    r.error = t.error;
    if (r.ok) {
      r.test = t.outcome->accuracy;
      switch (config.selection) {
        case SelectionStrategy::train_domain: r.train_val = t.outcome->criterion; break;
        case SelectionStrategy::test_domain: r.test_val = t.outcome->criterion; break;
        case SelectionStrategy::leave_one_out: r.held_out = t.outcome->criterion; break;
      }
      auto& a = artifacts[t.series];
      if (!a.model || t.outcome->criterion > a.criterion) {
        a.criterion = t.outcome->criterion;
        a.model = std::move(last_first_fold->model);
        a.history = std::move(last_first_fold->history);
      }
    }
    results << trial_json(r).dump() << '\n' << std::flush;
    file.trials.push_back(std::move(r));
  };

  try {
    const SearchResult sr =
        random_search(config.search.space, config.search.trials, config.search.series, config.seed, runner, observer);
    for (std::size_t s = 0; s < artifacts.size(); ++s) {
      const auto stem = dir / ("series" + std::to_string(s));
      if (config.output.checkpoint) save_checkpoint(*artifacts[s].model, stem);
      if (config.output.history) save_history(artifacts[s].history, stem.string() + ".history.jsonl");
      if (config.output.worst_samples > 0 && !artifacts[s].history.iterations.empty())
        export_worst_samples(artifacts[s].history, folds.front().train, config.output.worst_samples,
                             stem.string() + ".worst");
    }
    file.summary = ResultsSummary{config.algorithm_label(), config.dataset_label(), sr.cell, sr.series_best};
    results << json{{"type", "summary"},
                    {"algorithm", file.summary->algorithm},
                    {"dataset", file.summary->dataset},
                    {"mean", sr.cell.mean},
                    {"stderr", sr.cell.stderr},
                    {"series_best", sr.series_best}}
                   .dump()
            << '\n';
  } catch (const std::exception& e) {
    file.failure = e.what();
    results << json{{"type", "failure"}, {"message", e.what()}}.dump() << '\n' << std::flush;
    throw;
  }
  return file;
}

RankingTable report(std::span<const std::filesystem::path> results, std::string_view baseline) {
  if (results.empty()) throw DataError("report: no results files");
  AccuracyTable table;
  for (const auto& p : results) {
    const ResultsFile f = read_results(p);
    if (!f.summary)
      throw DataError(p.string() + ": no summary record" + (f.failure ? " (run failed: " + *f.failure + ")" : ""));
    table.add(f.summary->algorithm, f.summary->dataset, f.summary->cell);
  }
  return build_ranking_table(table, baseline);
}

}  // namespace w2d
