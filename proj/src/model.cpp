#include "w2d/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "w2d/rng.hpp"

namespace w2d {

std::string_view layer_kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::dense: return "dense";
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::relu: return "relu";
    case LayerKind::max_pool: return "max_pool";
    case LayerKind::avg_pool: return "avg_pool";
    case LayerKind::flatten: return "flatten";
  }
  return "?";
}

namespace {

LayerKind parse_layer_kind(std::string_view s) {
  for (auto k : {LayerKind::dense, LayerKind::conv2d, LayerKind::relu, LayerKind::max_pool, LayerKind::avg_pool,
                 LayerKind::flatten})
    if (layer_kind_name(k) == s) return k;
  throw ModelSpecError("unknown layer kind '" + std::string(s) + "'");
}

LayerSpec make_dense(std::size_t units) { return {LayerKind::dense, units, 0, 1, 0}; }
LayerSpec make_conv(std::size_t channels, std::size_t kernel, std::size_t stride, std::size_t padding) {
  return {LayerKind::conv2d, channels, kernel, stride, padding};
}
LayerSpec make_simple(LayerKind kind) { return {kind, 0, 0, 1, 0}; }

// Shape transform of one layer (no batch axis).
Shape layer_output(const LayerSpec& layer, const Shape& in, std::size_t index, std::string_view where) {
  auto fail = [&](const std::string& why) {
    return ModelSpecError(std::string(where) + " layer " + std::to_string(index) + " (" +
                          std::string(layer_kind_name(layer.kind)) + "): " + why + ", input " + shape_string(in));
  };
  switch (layer.kind) {
    case LayerKind::dense:
      if (in.size() != 1) throw fail("dense needs a flat input; add a flatten layer");
      if (layer.units == 0) throw fail("units must be positive");
      return {layer.units};
    case LayerKind::conv2d: {
      if (in.size() != 3) throw fail("conv2d needs a [C x H x W] input");
      if (layer.units == 0 || layer.kernel == 0 || layer.stride == 0) throw fail("units, kernel, stride must be positive");
      if (in[1] + 2 * layer.padding < layer.kernel || in[2] + 2 * layer.padding < layer.kernel)
        throw fail("kernel larger than padded input");
      return {layer.units, (in[1] + 2 * layer.padding - layer.kernel) / layer.stride + 1,
              (in[2] + 2 * layer.padding - layer.kernel) / layer.stride + 1};
    }
    case LayerKind::relu: return in;
    case LayerKind::max_pool:
    case LayerKind::avg_pool: {
      if (in.size() != 3) throw fail("pooling needs a [C x H x W] input");
      if (layer.kind == LayerKind::avg_pool && layer.kernel == 0) return {in[0], 1, 1};
      if (layer.kernel == 0 || layer.stride == 0) throw fail("kernel and stride must be positive");
      if (layer.kernel > in[1] || layer.kernel > in[2]) throw fail("window larger than input");
      return {in[0], (in[1] - layer.kernel) / layer.stride + 1, (in[2] - layer.kernel) / layer.stride + 1};
    }
    case LayerKind::flatten: return {element_count(in)};
  }
  throw fail("unhandled layer");
}

Shape run_shapes(const std::vector<LayerSpec>& layers, Shape shape, std::string_view where) {
  for (std::size_t i = 0; i < layers.size(); ++i) shape = layer_output(layers[i], shape, i, where);
  return shape;
}

std::size_t layer_params(const LayerSpec& layer, const Shape& in) {
  if (layer.kind == LayerKind::dense) return (in[0] + 1) * layer.units;
  if (layer.kind == LayerKind::conv2d) return (in[0] * layer.kernel * layer.kernel + 1) * layer.units;
  return 0;
}

void validate(const ModelSpec& spec) {
  if (spec.input.empty()) throw ModelSpecError("model spec has no input shape");
  for (auto d : spec.input)
    if (d == 0) throw ModelSpecError("input shape " + shape_string(spec.input) + " has a zero extent");
  if (spec.classes == 0) throw ModelSpecError("classes must be positive");
  if (spec.decoder.empty()) throw ModelSpecError("decoder must contain at least one layer");
  const Shape features = encoder_output_shape(spec);
  if (features.size() != 1) throw ModelSpecError("encoder output must be flat, got " + shape_string(features));
  const Shape out = run_shapes(spec.decoder, features, "decoder");
  if (out != Shape{spec.classes})
    throw ModelSpecError("decoder output " + shape_string(out) + " does not match " + std::to_string(spec.classes) +
                         " classes");
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::size_t parse_size(const std::string& s, const std::string& what) {
  std::size_t pos = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(s, &pos);
  } catch (const std::exception&) {
    throw ModelSpecError("expected a non-negative integer for " + what + ", got '" + s + "'");
  }
  if (pos != s.size() || s.starts_with('-'))
    throw ModelSpecError("expected a non-negative integer for " + what + ", got '" + s + "'");
  return static_cast<std::size_t>(v);
}

LayerSpec parse_layer(const std::string& text, std::size_t line_no) {
  std::istringstream in(text);
  std::string kind;
  in >> kind;
  LayerSpec layer = make_simple(parse_layer_kind(kind));
  std::string kv;
  while (in >> kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ModelSpecError("line " + std::to_string(line_no) + ": expected key=value, got '" + kv + "'");
    const std::string key = kv.substr(0, eq), val = kv.substr(eq + 1);
    const std::string what = "line " + std::to_string(line_no) + " " + key;
    if (key == "units") layer.units = parse_size(val, what);
    else if (key == "kernel") layer.kernel = val == "global" ? 0 : parse_size(val, what);
    else if (key == "stride") layer.stride = parse_size(val, what);
    else if (key == "padding") layer.padding = parse_size(val, what);
    else throw ModelSpecError("line " + std::to_string(line_no) + ": unknown layer attribute '" + key + "'");
  }
  return layer;
}

std::string format_layer(const LayerSpec& l) {
  std::ostringstream out;
  out << layer_kind_name(l.kind);
  switch (l.kind) {
    case LayerKind::dense: out << " units=" << l.units; break;
    case LayerKind::conv2d:
      out << " units=" << l.units << " kernel=" << l.kernel << " stride=" << l.stride << " padding=" << l.padding;
      break;
    case LayerKind::max_pool: out << " kernel=" << l.kernel << " stride=" << l.stride; break;
    case LayerKind::avg_pool:
      if (l.kernel == 0) out << " kernel=global";
      else out << " kernel=" << l.kernel << " stride=" << l.stride;
      break;
    default: break;
  }
  return out.str();
}

}  // namespace

ModelSpec linear_spec(Shape input, std::size_t classes) {
  ModelSpec s{"linear", std::move(input), classes, {make_simple(LayerKind::flatten)}, {make_dense(classes)}};
  validate(s);
  return s;
}

ModelSpec mlp_spec(Shape input, std::size_t classes, std::vector<std::size_t> hidden) {
  if (hidden.empty()) throw ModelSpecError("mlp needs at least one hidden layer");
  ModelSpec s{"mlp", std::move(input), classes, {make_simple(LayerKind::flatten)}, {make_dense(classes)}};
  for (auto h : hidden) {
    s.encoder.push_back(make_dense(h));
    s.encoder.push_back(make_simple(LayerKind::relu));
  }
  validate(s);
  return s;
}

ModelSpec mnist_cnn_spec(Shape input, std::size_t classes) {
  ModelSpec s{"mnist-cnn", std::move(input), classes, {}, {make_dense(classes)}};
  s.encoder = {make_conv(64, 3, 1, 1),  make_simple(LayerKind::relu), make_conv(128, 3, 2, 1),
               make_simple(LayerKind::relu), make_conv(128, 3, 1, 1), make_simple(LayerKind::relu),
               make_conv(128, 3, 1, 1), make_simple(LayerKind::relu), LayerSpec{LayerKind::avg_pool, 0, 0, 1, 0},
               make_simple(LayerKind::flatten)};
  validate(s);
  return s;
}

ModelSpec registered_spec(std::string_view architecture, Shape input, std::size_t classes,
                          std::vector<std::size_t> hidden) {
  if (architecture == "linear") return linear_spec(std::move(input), classes);
  if (architecture == "mlp") return mlp_spec(std::move(input), classes, hidden.empty() ? std::vector<std::size_t>{128, 128} : hidden);
  if (architecture == "mnist-cnn") return mnist_cnn_spec(std::move(input), classes);
  throw ModelSpecError("unknown architecture '" + std::string(architecture) + "' (known: linear, mlp, mnist-cnn)");
}

ModelSpec parse_model_spec(std::string_view text) {
  ModelSpec spec;
  bool have_input = false, have_classes = false;
  std::istringstream in{std::string(text)};
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const auto hash = raw.find('#');
    const std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ModelSpecError("line " + std::to_string(line_no) + ": expected 'key = value'");
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    if (key == "architecture") {
      spec.architecture = value;
    } else if (key == "input") {
      std::istringstream dims(value);
      std::string d;
      spec.input.clear();
      while (dims >> d) spec.input.push_back(parse_size(d, "input"));
      have_input = true;
    } else if (key == "classes") {
      spec.classes = parse_size(value, "classes");
      have_classes = true;
    } else if (key == "encoder") {
      spec.encoder.push_back(parse_layer(value, line_no));
    } else if (key == "decoder") {
      spec.decoder.push_back(parse_layer(value, line_no));
    } else {
      throw ModelSpecError("line " + std::to_string(line_no) + ": unknown key '" + key + "'");
    }
  }
  if (!have_input || !have_classes) throw ModelSpecError("model spec needs 'input' and 'classes'");
  if (spec.architecture.empty()) spec.architecture = "custom";
  validate(spec);
  return spec;
}

ModelSpec load_model_spec(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ModelSpecError("cannot open model spec " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_model_spec(buf.str());
}

std::string format_model_spec(const ModelSpec& spec) {
  std::ostringstream out;
  out << "architecture = " << spec.architecture << "\ninput =";
  for (auto d : spec.input) out << ' ' << d;
  out << "\nclasses = " << spec.classes << '\n';
  for (const auto& l : spec.encoder) out << "encoder = " << format_layer(l) << '\n';
  for (const auto& l : spec.decoder) out << "decoder = " << format_layer(l) << '\n';
  return out.str();
}

Shape encoder_output_shape(const ModelSpec& spec) { return run_shapes(spec.encoder, spec.input, "encoder"); }

std::size_t parameter_count(const ModelSpec& spec) {
  validate(spec);
  std::size_t total = 0;
  Shape shape = spec.input;
  for (std::size_t i = 0; i < spec.encoder.size(); ++i) {
    total += layer_params(spec.encoder[i], shape);
    shape = layer_output(spec.encoder[i], shape, i, "encoder");
  }
  for (std::size_t i = 0; i < spec.decoder.size(); ++i) {
    total += layer_params(spec.decoder[i], shape);
    shape = layer_output(spec.decoder[i], shape, i, "decoder");
  }
  return total;
}

Model::Model(ModelSpec spec, ParamSet params) : spec_(std::move(spec)), params_(std::move(params)) {
  validate(spec_);
  feature_dim_ = encoder_output_shape(spec_)[0];
}

Var Model::apply(Tape& tape, Var x, const std::vector<LayerSpec>& layers, std::string_view prefix, bool track,
                 std::size_t stop_before_global_pool) {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& l = layers[i];
    if (i == stop_before_global_pool) return x;
    const std::string base = std::string(prefix) + "." + std::to_string(i);
    switch (l.kind) {
      case LayerKind::dense:
        x = dense(x, tape.parameter(params_, base + ".weight", track), tape.parameter(params_, base + ".bias", track));
        break;
      case LayerKind::conv2d:
        x = conv2d(x, tape.parameter(params_, base + ".weight", track), tape.parameter(params_, base + ".bias", track),
                   l.stride, l.padding);
        break;
      case LayerKind::relu: x = relu(x); break;
      case LayerKind::max_pool: x = max_pool2d(x, l.kernel, l.stride); break;
      case LayerKind::avg_pool:
        if (l.kernel == 0) {
          const auto& s = x.shape();
          if (s[2] != s[3]) throw ShapeError("global average pooling needs square feature maps");
          x = avg_pool2d(x, s[2], 1);
        } else {
          x = avg_pool2d(x, l.kernel, l.stride);
        }
        break;
      case LayerKind::flatten:
        if (x.shape().size() > 2) x = flatten(x);
        break;
    }
  }
  return x;
}

Var Model::encode(Tape& tape, const Var& x, bool track_params) {
  const auto& s = x.shape();
  if (s.size() != spec_.input.size() + 1 || !std::equal(spec_.input.begin(), spec_.input.end(), s.begin() + 1))
    throw ShapeError("model input " + shape_string(spec_.input) + " does not match batch " + shape_string(s));
  return apply(tape, x, spec_.encoder, "encoder", track_params);
}

Var Model::decode(Tape& tape, const Var& features, bool track_params) {
  const auto& s = features.shape();
  if (s.size() != 2 || s[1] != feature_dim_)
    throw ShapeError("decoder expects [N x " + std::to_string(feature_dim_) + "], got " + shape_string(s));
  return apply(tape, features, spec_.decoder, "decoder", track_params);
}

Var Model::encode_spatial(Tape& tape, const Var& x, bool track_params) {
  for (std::size_t i = 0; i < spec_.encoder.size(); ++i) {
    const auto& l = spec_.encoder[i];
    if (l.kind == LayerKind::avg_pool && l.kernel == 0) {
      if (i == 0) break;
      const auto& s = x.shape();
      if (s.size() != spec_.input.size() + 1)
        throw ShapeError("model input " + shape_string(spec_.input) + " does not match batch " + shape_string(s));
      return apply(tape, x, spec_.encoder, "encoder", track_params, i);
    }
  }
  throw ModelSpecError("architecture '" + spec_.architecture +
                       "' has no spatial feature maps followed by global average pooling");
}

Model build_model(const ModelSpec& spec, std::uint64_t seed) {
  validate(spec);
  Rng rng(seed);
  ParamSet params;
  auto init_layers = [&](const std::vector<LayerSpec>& layers, Shape shape, std::string_view prefix) {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const LayerSpec& l = layers[i];
      const std::string base = std::string(prefix) + "." + std::to_string(i);
      if (l.kind == LayerKind::dense || l.kind == LayerKind::conv2d) {
        const bool is_dense = l.kind == LayerKind::dense;
        const std::size_t fan_in = is_dense ? shape[0] : shape[0] * l.kernel * l.kernel;
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        Shape wshape = is_dense ? Shape{l.units, shape[0]} : Shape{l.units, shape[0], l.kernel, l.kernel};
        std::vector<double> w(element_count(wshape)), b(l.units);
        for (double& v : w) v = rng.uniform(-bound, bound);
        for (double& v : b) v = rng.uniform(-bound, bound);
        params.add(base + ".weight", Tensor(std::move(wshape), std::move(w)));
        params.add(base + ".bias", Tensor({l.units}, std::move(b)));
      }
      shape = layer_output(l, shape, i, prefix);
    }
    return shape;
  };
  const Shape features = init_layers(spec.encoder, spec.input, "encoder");
  init_layers(spec.decoder, features, "decoder");
  return Model(spec, std::move(params));
}

ForwardResult forward(Model& model, Tape& tape, const Tensor& x, const std::optional<Tensor>& mask, bool track_params) {
  const Var input = tape.input(x);
  const Var features = model.encode(tape, input, track_params);
  if (!mask) return {features, model.decode(tape, features, track_params)};
  const std::size_t n = features.shape()[0], d = model.feature_dim();
  Tensor full;
  if (mask->shape() == Shape{d}) {
    std::vector<double> v(n * d);
    for (std::size_t i = 0; i < n; ++i) std::copy(mask->values().begin(), mask->values().end(), v.begin() + i * d);
    full = Tensor({n, d}, std::move(v));
  } else if (mask->shape() == Shape{n, d}) {
    full = *mask;
  } else {
    throw ShapeError("mask shape " + shape_string(mask->shape()) + " does not match features [" + std::to_string(n) +
                     " x " + std::to_string(d) + "]");
  }
  const Var masked = mul_constant(features, full);
  return {features, model.decode(tape, masked, track_params)};
}

Tensor predict_logits(Model& model, const Tensor& x, std::size_t chunk) {
  const std::size_t n = x.dim(0);
  std::vector<double> out;
  out.reserve(n * model.classes());
  Tape tape;
  for (std::size_t begin = 0; begin < n; begin += chunk) {
    const std::size_t end = std::min(n, begin + chunk);
    const auto r = forward(model, tape, x.rows(begin, end), std::nullopt, false);
    const auto v = r.logits.value().values();
    out.insert(out.end(), v.begin(), v.end());
    tape.clear();
  }
  return Tensor({n, model.classes()}, std::move(out));
}

void save_checkpoint(const Model& model, const std::filesystem::path& stem) {
  auto bin_path = stem;
  bin_path += ".bin";
  auto manifest_path = stem;
  manifest_path += ".manifest";
  std::ofstream bin(bin_path, std::ios::binary);
  std::ofstream manifest(manifest_path);
  if (!bin || !manifest) throw std::runtime_error("cannot write checkpoint " + stem.string());
  manifest << "w2d-checkpoint 1\n";
  std::istringstream spec_lines(format_model_spec(model.spec()));
  std::string line;
  while (std::getline(spec_lines, line)) manifest << "spec " << line << '\n';
  std::size_t offset = 0;
  for (const auto& [name, p] : model.params()) {
    manifest << "param " << name << ' ' << shape_string(p.value.shape()) << ' ' << offset << ' ' << p.value.size()
             << '\n';
    for (double v : p.value.values()) {
      const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
      const char bytes[4] = {static_cast<char>(bits & 0xff), static_cast<char>((bits >> 8) & 0xff),
                             static_cast<char>((bits >> 16) & 0xff), static_cast<char>((bits >> 24) & 0xff)};
      bin.write(bytes, 4);
    }
    offset += p.value.size() * 4;
  }
}

Model load_checkpoint(const std::filesystem::path& stem) {
  auto bin_path = stem;
  bin_path += ".bin";
  auto manifest_path = stem;
  manifest_path += ".manifest";
  std::ifstream manifest(manifest_path);
  std::ifstream bin(bin_path, std::ios::binary);
  if (!manifest || !bin) throw std::runtime_error("cannot open checkpoint " + stem.string());
  std::string line;
  if (!std::getline(manifest, line) || line != "w2d-checkpoint 1")
    throw std::runtime_error("bad checkpoint manifest header in " + manifest_path.string());
  std::string spec_text;
  struct Entry {
    std::string name;
    std::size_t offset, count;
  };
  std::vector<Entry> entries;
  while (std::getline(manifest, line)) {
    if (line.starts_with("spec ")) {
      spec_text += line.substr(5) + '\n';
    } else if (line.starts_with("param ")) {
      std::istringstream in(line.substr(6));
      Entry e;
      std::string shape;
      in >> e.name >> shape >> e.offset >> e.count;
      if (!in) throw std::runtime_error("bad checkpoint param line: " + line);
      entries.push_back(e);
    }
  }
  Model model = build_model(parse_model_spec(spec_text), 0);
  for (const auto& e : entries) {
    auto& p = model.params().at(e.name);
    if (p.value.size() != e.count) throw std::runtime_error("checkpoint size mismatch for " + e.name);
    bin.seekg(static_cast<std::streamoff>(e.offset));
    auto values = p.value.mutable_values();
    for (std::size_t i = 0; i < e.count; ++i) {
      unsigned char b[4];
      if (!bin.read(reinterpret_cast<char*>(b), 4)) throw std::runtime_error("truncated checkpoint " + bin_path.string());
      const std::uint32_t bits = b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
      values[i] = static_cast<double>(std::bit_cast<float>(bits));
    }
  }
  return model;
}

}  // namespace w2d
