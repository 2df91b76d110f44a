#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "w2d/tensor.hpp"

namespace w2d {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Labelled samples from one distribution. Inputs are stored channel-major as
// 32-bit floats in [0, 1] and widened to double when batched.
struct Environment {
  std::string name;
  Shape sample_shape;  // C x H x W
  std::vector<float> inputs;
  std::vector<std::size_t> labels;
  std::map<std::string, std::string> metadata;

  std::size_t size() const { return labels.size(); }
  std::size_t sample_size() const { return element_count(sample_shape); }
  std::span<const float> sample(std::size_t i) const;

  // [indices.size() x sample_shape...] in the given order.
  Tensor batch(std::span<const std::size_t> indices) const;
  Tensor all() const;
  Environment subset(std::span<const std::size_t> indices, std::string new_name) const;
};

Environment concat(std::span<const Environment> parts, std::string name);

enum class Role { train, test };

struct DatasetBundle {
  std::vector<Environment> environments;
  std::map<std::string, Role> roles;

  const Environment& env(const std::string& name) const;
  std::vector<std::string> names_with(Role role) const;
  // Throws DataError unless at least one TRAIN and one TEST environment exist
  // and every role names an environment.
  void validate() const;
};

// Bundled handwritten digits (28 x 28 grayscale, ground-truth labels 0-9).
struct DigitSource {
  std::size_t rows = 28, cols = 28;
  std::vector<std::uint8_t> pixels;
  std::vector<std::uint8_t> digits;
  std::size_t size() const { return digits.size(); }
};

// $W2D_DATA_DIR if set, else the directory configured at build time.
std::filesystem::path default_data_dir();
// Reads digits-images-idx3-ubyte.gz / digits-labels-idx1-ubyte.gz from `dir`.
DigitSource load_digits(const std::filesystem::path& dir);

struct ColorEnvironment {
  std::string name;
  double color_flip_prob = 0.0;
};

struct CmnistOptions {
  double label_noise = 0.25;
  std::vector<ColorEnvironment> environments{{"+90", 0.1}, {"+80", 0.2}, {"-90", 0.9}};
  std::vector<std::string> test_environments{"-90"};
  std::size_t resolution = 28;  // 28, or 14 for 2x2 average downsampling
  bool grayscale = false;       // both channels carry the digit: color removed
  std::size_t max_samples = 0;  // 0 = use every source digit
};

// Binary label y = (digit < 5), flipped with probability label_noise; the
// digit is drawn into channel `color`, where color = y flipped with the
// environment's color_flip_prob. Source digits are shuffled and dealt
// round-robin across environments.
DatasetBundle generate_cmnist(const DigitSource& source, std::uint64_t seed, const CmnistOptions& options = {});

struct TwoShiftOptions {
  std::size_t image_size = 12;
  double label_noise = 0.1;
  double pixel_noise = 0.15;
};

// Two training environments ("train0", "train1") and one test environment
// ("test"). The class is carried by bar orientation; a spurious color channel
// agrees with the label with probability (1 + c)/2 in training and (1 - c)/2
// in test; the test environment additionally receives a contrast-inversion
// and texture style of strength `diversity`.
DatasetBundle generate_two_shift(std::uint64_t seed, double diversity_strength, double correlation_strength,
                                 std::size_t n_per_env, const TwoShiftOptions& options = {});

struct SplitSpec {
  double validation_fraction = 0.2;
  std::uint64_t seed = 0;
};

struct Split {
  Environment train, val;
  std::vector<std::size_t> train_indices, val_indices;  // into the source environment
};

// Seeded uniform split with |val| = round(n * fraction).
Split split_environment(const Environment& env, const SplitSpec& spec);

// Fraction of samples whose dominant channel index equals the label
// (channel 0 vs channel 1 total intensity).
double color_label_agreement(const Environment& env);

// Bundle on disk: manifest.txt plus <env>.inputs.f32 / <env>.labels.u32 per environment.
void save_bundle(const DatasetBundle& bundle, const std::filesystem::path& dir);
DatasetBundle load_bundle(const std::filesystem::path& dir);

}  // namespace w2d
