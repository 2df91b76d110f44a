#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "w2d/autodiff.hpp"
#include "w2d/tensor.hpp"

namespace w2d {

enum class LayerKind { dense, conv2d, relu, max_pool, avg_pool, flatten };

std::string_view layer_kind_name(LayerKind kind);

struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  std::size_t units = 0;     // dense output width / conv output channels
  std::size_t kernel = 0;    // conv/pool window; 0 on avg_pool means global
  std::size_t stride = 1;
  std::size_t padding = 0;
};

class ModelSpecError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Architecture description. `input` excludes the batch axis.
struct ModelSpec {
  std::string architecture;
  Shape input;
  std::size_t classes = 0;
  std::vector<LayerSpec> encoder;
  std::vector<LayerSpec> decoder;
};

// Registered architectures. `hidden` is used by "mlp" only.
ModelSpec linear_spec(Shape input, std::size_t classes);
ModelSpec mlp_spec(Shape input, std::size_t classes, std::vector<std::size_t> hidden);
// Four 3x3 convolution blocks (64, 128 stride 2, 128, 128 channels) with ReLU,
// global average pooling, and a dense classification head.
ModelSpec mnist_cnn_spec(Shape input, std::size_t classes);
ModelSpec registered_spec(std::string_view architecture, Shape input, std::size_t classes,
                          std::vector<std::size_t> hidden = {});

// Plain-text architecture files; see specs/*.arch for the format.
ModelSpec parse_model_spec(std::string_view text);
ModelSpec load_model_spec(const std::filesystem::path& path);
std::string format_model_spec(const ModelSpec& spec);

// Output shape (without batch axis) of the encoder / whole model; throws
// ModelSpecError when consecutive layers do not compose.
Shape encoder_output_shape(const ModelSpec& spec);
std::size_t parameter_count(const ModelSpec& spec);

struct ForwardResult {
  Var features;  // e(x), [N x feature_dim]
  Var logits;    // d(mask * e(x)), [N x classes]
};

// f(x) = d(e(x)), split at the penultimate feature vector.
class Model {
 public:
  Model(ModelSpec spec, ParamSet params);

  const ModelSpec& spec() const { return spec_; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }
  std::size_t feature_dim() const { return feature_dim_; }
  std::size_t classes() const { return spec_.classes; }

  // Parameters enter the tape as tracked leaves unless track_params is false.
  Var encode(Tape& tape, const Var& x, bool track_params = true);
  Var decode(Tape& tape, const Var& features, bool track_params = true);

  // Encoder activations just before its first global average pool, i.e. the
  // spatial feature maps [N x C x H' x W'] of a CNN encoder. Throws
  // ModelSpecError for encoders without such a stage.
  Var encode_spatial(Tape& tape, const Var& x, bool track_params = false);

 private:
  Var apply(Tape& tape, Var x, const std::vector<LayerSpec>& layers, std::string_view prefix, bool track,
            std::size_t stop_before_global_pool = SIZE_MAX);

  ModelSpec spec_;
  ParamSet params_;
  std::size_t feature_dim_ = 0;
};

// Uniform fan-in initialization: every weight and bias of a layer with fan-in
// F is drawn from U(-1/sqrt(F), 1/sqrt(F)) using Rng(seed), layer by layer.
Model build_model(const ModelSpec& spec, std::uint64_t seed);

// x: [N x input...]. With a mask ([N x feature_dim] or [feature_dim]) the
// decoder sees mask * e(x); without one the features pass through unchanged.
ForwardResult forward(Model& model, Tape& tape, const Tensor& x, const std::optional<Tensor>& mask = std::nullopt,
                      bool track_params = true);

// Logits without gradient tracking, evaluated in chunks of `chunk` samples.
Tensor predict_logits(Model& model, const Tensor& x, std::size_t chunk = 256);

// Checkpoint = <stem>.bin (little-endian float32 arrays, back to back) plus
// <stem>.manifest (text: architecture spec, then "param <name> <shape> <offset> <count>").
void save_checkpoint(const Model& model, const std::filesystem::path& stem);
Model load_checkpoint(const std::filesystem::path& stem);

}  // namespace w2d
