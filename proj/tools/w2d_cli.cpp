// Command-line front end: generate-data, train, search, rank, cam, report.
// Exit codes: 0 success, 2 configuration error, 3 runtime failure.

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "w2d/datasets.hpp"
#include "w2d/experiment.hpp"
#include "w2d/harness.hpp"
#include "w2d/model.hpp"

namespace {

constexpr int kConfigError = 2;
constexpr int kRuntimeError = 3;

w2d::ExperimentConfig load(const std::string& path, const std::optional<std::uint64_t>& seed,
                           const std::optional<std::string>& out_dir) {
  auto cfg = w2d::load_experiment_config(path);
  if (seed) cfg.seed = *seed;
  if (out_dir) cfg.output.dir = *out_dir;
  return cfg;
}

void print_summary(const w2d::ResultsFile& f) {
  const std::size_t ok = std::count_if(f.trials.begin(), f.trials.end(), [](const auto& t) { return t.ok; });
  std::cout << f.config.algorithm_label() << " on " << f.config.dataset_label() << ": " << ok << "/" << f.trials.size()
            << " trials succeeded";
  if (f.summary) std::cout << ", accuracy " << f.summary->cell.mean << " +- " << f.summary->cell.stderr;
  std::cout << "\nresults: " << (std::filesystem::path(f.config.output.dir) / "results.jsonl").string() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Worst-case training along samples and features: experiments and reporting"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;

  auto* gen = app.add_subcommand("generate-data", "Generate a dataset bundle from a config's dataset section");
  gen->add_option("-c,--config", config_path, "Experiment config")->required()->check(CLI::ExistingFile);
  gen->add_option("--seed", seed, "Override the config's master seed");
  std::string bundle_out;
  gen->add_option("-o,--out", bundle_out, "Bundle directory")->required();

  auto* train = app.add_subcommand("train", "Train once with the train.* values and evaluate");
  train->add_option("-c,--config", config_path, "Experiment config")->required()->check(CLI::ExistingFile);
  train->add_option("--seed", seed, "Override the config's master seed");
  train->add_option("-o,--out", out_dir, "Override output.dir");

  auto* search = app.add_subcommand("search", "Random hyperparameter search as configured under search.*");
  search->add_option("-c,--config", config_path, "Experiment config")->required()->check(CLI::ExistingFile);
  search->add_option("--seed", seed, "Override the config's master seed");
  search->add_option("-o,--out", out_dir, "Override output.dir");

  auto* rank = app.add_subcommand("rank", "Ranking scores for an accuracy table (algorithm,dataset,mean,stderr)");
  std::string table_path, baseline = "ERM", csv_out;
  rank->add_option("table", table_path, "Accuracy CSV")->required()->check(CLI::ExistingFile);
  rank->add_option("--baseline", baseline, "Baseline algorithm");
  rank->add_option("--csv", csv_out, "Also write the ranking as CSV");

  auto* cam = app.add_subcommand("cam", "Class activation map of one sample as a PGM image");
  std::string checkpoint, data_dir, env_name, cam_out;
  std::size_t sample_index = 0, class_id = 0;
  cam->add_option("--checkpoint", checkpoint, "Checkpoint stem (without .bin/.manifest)")->required();
  cam->add_option("--data", data_dir, "Dataset bundle directory")->required()->check(CLI::ExistingDirectory);
  cam->add_option("--env", env_name, "Environment name")->required();
  cam->add_option("--index", sample_index, "Sample index")->required();
  cam->add_option("--class", class_id, "Class id")->required();
  cam->add_option("-o,--out", cam_out, "Output .pgm")->required();

  auto* rep = app.add_subcommand("report", "Comparison table from results files");
  std::vector<std::string> results;
  std::string report_baseline = "erm", report_csv;
  rep->add_option("results", results, "results.jsonl files")->required()->check(CLI::ExistingFile);
  rep->add_option("--baseline", report_baseline, "Baseline algorithm label");
  rep->add_option("--csv", report_csv, "Also write the table as CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kConfigError;
  }

  try {
    if (*gen) {
      const auto cfg = load(config_path, seed, std::nullopt);
      w2d::validate_experiment_config(cfg);
      const auto bundle = w2d::generate_dataset(cfg.dataset, w2d::derive_seed(cfg.seed, 101));
      w2d::save_bundle(bundle, bundle_out);
      for (const auto& e : bundle.environments)
        std::cout << e.name << ": " << e.size() << " samples, " << w2d::shape_string(e.sample_shape) << '\n';
    } else if (*train || *search) {
      auto cfg = load(config_path, seed, out_dir);
      if (*train) {
        cfg.search.trials = 1;
        cfg.search.series = 1;
        cfg.search.space.clear();
      }
      print_summary(w2d::run_experiment(cfg));
    } else if (*rank) {
      const auto table = w2d::build_ranking_table(w2d::read_accuracy_csv(table_path), baseline);
      std::cout << w2d::format_ranking_text(table);
      if (!csv_out.empty()) std::ofstream(csv_out) << w2d::format_ranking_csv(table);
    } else if (*cam) {
      w2d::Model model = w2d::load_checkpoint(checkpoint);
      const auto bundle = w2d::load_bundle(data_dir);
      const auto& env = bundle.env(env_name);
      if (sample_index >= env.size()) throw std::out_of_range("--index beyond environment size");
      const std::size_t ids[] = {sample_index};
      const auto heat = w2d::class_activation_map(model, env.batch(ids), class_id);
      w2d::write_pgm(cam_out, heat.dim(0), heat.dim(1), heat.values());
      std::cout << "wrote " << cam_out << " (" << heat.dim(0) << "x" << heat.dim(1) << ")\n";
    } else if (*rep) {
      std::vector<std::filesystem::path> paths(results.begin(), results.end());
      const auto table = w2d::report(paths, report_baseline);
      std::cout << w2d::format_ranking_text(table);
      if (!report_csv.empty()) std::ofstream(report_csv) << w2d::format_ranking_csv(table);
    }
  } catch (const w2d::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntimeError;
  }
  return 0;
}
