#include "w2d/datasets.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <sstream>

#include "w2d/rng.hpp"

#ifndef W2D_DEFAULT_DATA_DIR
#define W2D_DEFAULT_DATA_DIR "data"
#endif

namespace w2d {

std::span<const float> Environment::sample(std::size_t i) const {
  const std::size_t s = sample_size();
  return std::span<const float>(inputs).subspan(i * s, s);
}

Tensor Environment::batch(std::span<const std::size_t> indices) const {
  if (indices.empty()) throw DataError("environment '" + name + "': empty batch");
  const std::size_t s = sample_size();
  std::vector<double> v(indices.size() * s);
  for (std::size_t k = 0; k < indices.size(); ++k) {
    if (indices[k] >= size()) throw DataError("environment '" + name + "': sample index out of range");
    const float* src = inputs.data() + indices[k] * s;
    std::copy(src, src + s, v.begin() + static_cast<std::ptrdiff_t>(k * s));
  }
  Shape shape{indices.size()};
  shape.insert(shape.end(), sample_shape.begin(), sample_shape.end());
  return Tensor(std::move(shape), std::move(v));
}

Tensor Environment::all() const {
  std::vector<std::size_t> idx(size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return batch(idx);
}

Environment Environment::subset(std::span<const std::size_t> indices, std::string new_name) const {
  Environment out{std::move(new_name), sample_shape, {}, {}, metadata};
  const std::size_t s = sample_size();
  out.inputs.reserve(indices.size() * s);
  out.labels.reserve(indices.size());
  for (auto i : indices) {
    if (i >= size()) throw DataError("environment '" + name + "': subset index out of range");
    const auto src = sample(i);
    out.inputs.insert(out.inputs.end(), src.begin(), src.end());
    out.labels.push_back(labels[i]);
  }
  return out;
}

Environment concat(std::span<const Environment> parts, std::string name) {
  if (parts.empty()) throw DataError("concat: no environments");
  Environment out{std::move(name), parts[0].sample_shape, {}, {}, {}};
  for (const auto& p : parts) {
    if (p.sample_shape != out.sample_shape) throw DataError("concat: sample shapes differ");
    out.inputs.insert(out.inputs.end(), p.inputs.begin(), p.inputs.end());
    out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
  }
  return out;
}

const Environment& DatasetBundle::env(const std::string& name) const {
  for (const auto& e : environments)
    if (e.name == name) return e;
  throw DataError("no environment named '" + name + "'");
}

std::vector<std::string> DatasetBundle::names_with(Role role) const {
  std::vector<std::string> out;
  for (const auto& e : environments) {
    const auto it = roles.find(e.name);
    if (it != roles.end() && it->second == role) out.push_back(e.name);
  }
  return out;
}

void DatasetBundle::validate() const {
  for (const auto& [name, role] : roles) env(name);
  if (names_with(Role::train).empty()) throw DataError("dataset bundle has no TRAIN environment");
  if (names_with(Role::test).empty()) throw DataError("dataset bundle has no TEST environment");
  for (const auto& e : environments) {
    if (e.inputs.size() != e.size() * e.sample_size())
      throw DataError("environment '" + e.name + "': input count does not match labels");
  }
}

std::filesystem::path default_data_dir() {
  if (const char* env = std::getenv("W2D_DATA_DIR"); env != nullptr && *env != '\0') return env;
  return W2D_DEFAULT_DATA_DIR;
}

namespace {

std::vector<std::uint8_t> read_gz(const std::filesystem::path& path) {
  gzFile f = gzopen(path.string().c_str(), "rb");
  if (f == nullptr) throw DataError("cannot open " + path.string());
  std::vector<std::uint8_t> out;
  std::uint8_t buf[1 << 16];
  int got = 0;
  while ((got = gzread(f, buf, sizeof buf)) > 0) out.insert(out.end(), buf, buf + got);
  const bool failed = got < 0;
  gzclose(f);
  if (failed) throw DataError("corrupt gzip stream in " + path.string());
  return out;
}

std::uint32_t be32(const std::vector<std::uint8_t>& b, std::size_t at) {
  if (at + 4 > b.size()) throw DataError("truncated IDX header");
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) | (std::uint32_t{b[at + 2]} << 8) | b[at + 3];
}

void check_probability(double p, const std::string& what) {
  if (!(p >= 0.0 && p <= 1.0)) throw DataError(what + " must lie in [0, 1]");
}

std::string fmt(double v) {
  std::ostringstream out;
  out.precision(17);
  out << v;
  return out.str();
}

}  // namespace

DigitSource load_digits(const std::filesystem::path& dir) {
  const auto images = read_gz(dir / "digits-images-idx3-ubyte.gz");
  const auto labels = read_gz(dir / "digits-labels-idx1-ubyte.gz");
  if (be32(images, 0) != 0x803 || be32(labels, 0) != 0x801) throw DataError("bad IDX magic in " + dir.string());
  const std::size_t n = be32(images, 4), rows = be32(images, 8), cols = be32(images, 12);
  if (be32(labels, 4) != n) throw DataError("image/label counts differ in " + dir.string());
  if (images.size() != 16 + n * rows * cols || labels.size() != 8 + n) throw DataError("truncated IDX payload");
  DigitSource src;
  src.rows = rows;
  src.cols = cols;
  src.pixels.assign(images.begin() + 16, images.end());
  src.digits.assign(labels.begin() + 8, labels.end());
  for (auto d : src.digits)
    if (d > 9) throw DataError("digit label out of range");
  return src;
}

DatasetBundle generate_cmnist(const DigitSource& source, std::uint64_t seed, const CmnistOptions& options) {
  if (source.size() == 0) throw DataError("generate_cmnist: no source digits");
  check_probability(options.label_noise, "label_noise");
  if (options.environments.empty()) throw DataError("generate_cmnist: no environments");
  for (const auto& e : options.environments) check_probability(e.color_flip_prob, "color_flip_prob of " + e.name);
  if (options.resolution != source.rows && options.resolution * 2 != source.rows)
    throw DataError("generate_cmnist: resolution must be the source size or half of it");
  if (source.rows != source.cols) throw DataError("generate_cmnist: source digits must be square");

  Rng rng(seed);
  std::vector<std::size_t> order(source.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(order);
  if (options.max_samples > 0 && options.max_samples < order.size()) order.resize(options.max_samples);

  const std::size_t n_env = options.environments.size();
  const std::size_t res = options.resolution, factor = source.rows / res, plane = res * res;
  DatasetBundle bundle;
  for (const auto& spec : options.environments) {
    Environment env{spec.name, {2, res, res}, {}, {}, {}};
    env.metadata["kind"] = "cmnist";
    env.metadata["color_flip_prob"] = fmt(spec.color_flip_prob);
    env.metadata["label_noise"] = fmt(options.label_noise);
    env.metadata["grayscale"] = options.grayscale ? "1" : "0";
    env.metadata["resolution"] = std::to_string(res);
    env.metadata["seed"] = std::to_string(seed);
    bundle.environments.push_back(std::move(env));
    bundle.roles[spec.name] = Role::train;
  }
  for (const auto& t : options.test_environments) {
    if (!bundle.roles.contains(t)) throw DataError("generate_cmnist: unknown test environment '" + t + "'");
    bundle.roles[t] = Role::test;
  }

  std::vector<float> image(plane);
  std::vector<std::size_t> flipped(n_env, 0);
  for (std::size_t k = 0; k < order.size(); ++k) {
    const std::size_t src = order[k];
    Environment& env = bundle.environments[k % n_env];
    const double flip = options.environments[k % n_env].color_flip_prob;
    std::size_t y = source.digits[src] < 5 ? 1 : 0;
    if (rng.bernoulli(options.label_noise)) {
      y = 1 - y;
      ++flipped[k % n_env];
    }
    const std::size_t color = rng.bernoulli(flip) ? 1 - y : y;

    const std::uint8_t* px = source.pixels.data() + src * source.rows * source.cols;
    for (std::size_t r = 0; r < res; ++r)
      for (std::size_t c = 0; c < res; ++c) {
        unsigned acc = 0;
        for (std::size_t dr = 0; dr < factor; ++dr)
          for (std::size_t dc = 0; dc < factor; ++dc) acc += px[(r * factor + dr) * source.cols + c * factor + dc];
        image[r * res + c] = static_cast<float>(acc) / static_cast<float>(255 * factor * factor);
      }
    const std::size_t base = env.inputs.size();
    env.inputs.resize(base + 2 * plane, 0.0f);
    for (std::size_t ch = 0; ch < 2; ++ch)
      if (options.grayscale || ch == color)
        std::copy(image.begin(), image.end(), env.inputs.begin() + static_cast<std::ptrdiff_t>(base + ch * plane));
    env.labels.push_back(y);
  }
  for (std::size_t e = 0; e < n_env; ++e) {
    auto& env = bundle.environments[e];
    if (env.size() == 0) throw DataError("generate_cmnist: environment '" + env.name + "' received no samples");
    // Realized flip rate: 100 * (1 - this) is the accuracy ceiling of a color-blind predictor.
    env.metadata["measured_label_noise"] = fmt(static_cast<double>(flipped[e]) / static_cast<double>(env.size()));
  }
  bundle.validate();
  return bundle;
}

DatasetBundle generate_two_shift(std::uint64_t seed, double diversity_strength, double correlation_strength,
                                 std::size_t n_per_env, const TwoShiftOptions& options) {
  check_probability(diversity_strength, "diversity_strength");
  check_probability(correlation_strength, "correlation_strength");
  check_probability(options.label_noise, "label_noise");
  if (n_per_env == 0) throw DataError("generate_two_shift: n_per_env must be positive");
  if (options.image_size < 6) throw DataError("generate_two_shift: image_size must be at least 6");

  const std::size_t s = options.image_size, plane = s * s;
  const std::size_t bar = s - 2;
  Rng rng(seed);
  DatasetBundle bundle;
  struct EnvPlan {
    const char* name;
    Role role;
    double agreement;
    double style;
  };
  const double agree_train = 0.5 * (1.0 + correlation_strength);
  const double agree_test = 0.5 * (1.0 - correlation_strength);
  const EnvPlan plans[] = {{"train0", Role::train, agree_train, 0.0},
                           {"train1", Role::train, agree_train, 0.0},
                           {"test", Role::test, agree_test, diversity_strength}};
  for (const auto& plan : plans) {
    Environment env{plan.name, {2, s, s}, {}, {}, {}};
    env.metadata["kind"] = "two_shift";
    env.metadata["diversity_strength"] = fmt(diversity_strength);
    env.metadata["correlation_strength"] = fmt(correlation_strength);
    env.metadata["spurious_agreement"] = fmt(plan.agreement);
    env.metadata["style_strength"] = fmt(plan.style);
    env.metadata["label_noise"] = fmt(options.label_noise);
    env.metadata["seed"] = std::to_string(seed);
    env.inputs.reserve(n_per_env * 2 * plane);
    std::vector<float> img(2 * plane);
    for (std::size_t k = 0; k < n_per_env; ++k) {
      const std::size_t shape_class = rng.bernoulli(0.5) ? 1 : 0;
      std::size_t y = shape_class;
      if (rng.bernoulli(options.label_noise)) y = 1 - y;
      const std::size_t color = rng.bernoulli(plan.agreement) ? y : 1 - y;
      // Bar of length s-2 and thickness 2: horizontal for class 0, vertical for class 1.
      const std::size_t along = static_cast<std::size_t>(rng.below(s - bar + 1));
      const std::size_t across = static_cast<std::size_t>(rng.below(s - 1));
      std::fill(img.begin(), img.end(), 0.0f);
      for (std::size_t i = 0; i < bar; ++i)
        for (std::size_t t = 0; t < 2; ++t) {
          const std::size_t r = shape_class == 0 ? across + t : along + i;
          const std::size_t c = shape_class == 0 ? along + i : across + t;
          img[color * plane + r * s + c] = 1.0f;
        }
      for (std::size_t ch = 0; ch < 2; ++ch)
        for (std::size_t p = 0; p < plane; ++p) {
          double v = img[ch * plane + p];
          if (ch == color && plan.style > 0.0) v = (1.0 - plan.style) * v + plan.style * (1.0 - v);
          if (plan.style > 0.0 && ((p / s + p % s) % 2 == 0)) v += 0.25 * plan.style;
          v += options.pixel_noise * rng.normal();
          img[ch * plane + p] = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
      env.inputs.insert(env.inputs.end(), img.begin(), img.end());
      env.labels.push_back(y);
    }
    bundle.roles[env.name] = plan.role;
    bundle.environments.push_back(std::move(env));
  }
  bundle.validate();
  return bundle;
}

Split split_environment(const Environment& env, const SplitSpec& spec) {
  if (!(spec.validation_fraction > 0.0 && spec.validation_fraction < 1.0))
    throw DataError("split_environment: validation_fraction must lie in (0, 1)");
  if (env.size() == 0) throw DataError("split_environment: environment '" + env.name + "' is empty");
  const std::size_t n = env.size();
  const auto n_val = static_cast<std::size_t>(std::llround(static_cast<double>(n) * spec.validation_fraction));
  if (n_val == 0 || n_val == n)
    throw DataError("split_environment: fraction " + fmt(spec.validation_fraction) + " leaves an empty part of " +
                    std::to_string(n) + " samples");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(spec.seed);
  rng.shuffle(order);
  Split out;
  out.val_indices.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
  out.train_indices.assign(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
  std::sort(out.val_indices.begin(), out.val_indices.end());
  std::sort(out.train_indices.begin(), out.train_indices.end());
  out.train = env.subset(out.train_indices, env.name + ":train");
  out.val = env.subset(out.val_indices, env.name + ":val");
  return out;
}

double color_label_agreement(const Environment& env) {
  if (env.size() == 0) throw DataError("color_label_agreement: empty environment");
  if (env.sample_shape.empty() || env.sample_shape[0] != 2)
    throw DataError("color_label_agreement: expected two-channel samples");
  const std::size_t plane = env.sample_size() / 2;
  std::size_t agree = 0;
  for (std::size_t i = 0; i < env.size(); ++i) {
    const auto x = env.sample(i);
    double c0 = 0.0, c1 = 0.0;
    for (std::size_t p = 0; p < plane; ++p) {
      c0 += x[p];
      c1 += x[plane + p];
    }
    const std::size_t color = c1 > c0 ? 1 : 0;
    if (color == env.labels[i]) ++agree;
  }
  return static_cast<double>(agree) / static_cast<double>(env.size());
}

void save_bundle(const DatasetBundle& bundle, const std::filesystem::path& dir) {
  bundle.validate();
  std::filesystem::create_directories(dir);
  std::ofstream manifest(dir / "manifest.txt");
  if (!manifest) throw DataError("cannot write " + (dir / "manifest.txt").string());
  manifest << "w2d-bundle 1\n";
  for (std::size_t k = 0; k < bundle.environments.size(); ++k) {
    const auto& env = bundle.environments[k];
    const std::string stem = "env" + std::to_string(k);
    const auto role = bundle.roles.at(env.name);
    manifest << "env " << env.name << ' ' << (role == Role::train ? "train" : "test") << ' ' << env.size();
    for (auto d : env.sample_shape) manifest << ' ' << d;
    manifest << ' ' << stem << '\n';
    for (const auto& [key, value] : env.metadata) manifest << "meta " << env.name << ' ' << key << ' ' << value << '\n';
    std::ofstream in(dir / (stem + ".inputs.f32"), std::ios::binary);
    std::ofstream lb(dir / (stem + ".labels.u32"), std::ios::binary);
    for (float v : env.inputs) {
      const auto bits = std::bit_cast<std::uint32_t>(v);
      const char b[4] = {char(bits & 0xff), char((bits >> 8) & 0xff), char((bits >> 16) & 0xff), char(bits >> 24)};
      in.write(b, 4);
    }
    for (auto y : env.labels) {
      const auto v = static_cast<std::uint32_t>(y);
      const char b[4] = {char(v & 0xff), char((v >> 8) & 0xff), char((v >> 16) & 0xff), char(v >> 24)};
      lb.write(b, 4);
    }
    if (!in || !lb) throw DataError("failed writing environment '" + env.name + "'");
  }
}

namespace {
std::vector<std::uint32_t> read_u32_file(const std::filesystem::path& path, std::size_t count) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<std::uint32_t> out(count);
  for (auto& v : out) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4)) throw DataError("truncated " + path.string());
    v = b[0] | (b[1] << 8) | (b[2] << 16) | (std::uint32_t{b[3]} << 24);
  }
  return out;
}
}  // namespace

DatasetBundle load_bundle(const std::filesystem::path& dir) {
  std::ifstream manifest(dir / "manifest.txt");
  if (!manifest) throw DataError("cannot open " + (dir / "manifest.txt").string());
  std::string line;
  if (!std::getline(manifest, line) || line != "w2d-bundle 1") throw DataError("bad bundle manifest header");
  DatasetBundle bundle;
  while (std::getline(manifest, line)) {
    std::istringstream in(line);
    std::string tag;
    in >> tag;
    if (tag == "env") {
      Environment env;
      std::string role, stem;
      std::size_t n = 0, c = 0, h = 0, w = 0;
      in >> env.name >> role >> n >> c >> h >> w >> stem;
      if (!in || (role != "train" && role != "test")) throw DataError("bad env line: " + line);
      env.sample_shape = {c, h, w};
      const auto raw = read_u32_file(dir / (stem + ".inputs.f32"), n * c * h * w);
      env.inputs.resize(raw.size());
      std::transform(raw.begin(), raw.end(), env.inputs.begin(), [](std::uint32_t b) { return std::bit_cast<float>(b); });
      const auto labels = read_u32_file(dir / (stem + ".labels.u32"), n);
      env.labels.assign(labels.begin(), labels.end());
      bundle.roles[env.name] = role == "train" ? Role::train : Role::test;
      bundle.environments.push_back(std::move(env));
    } else if (tag == "meta") {
      std::string name, key, value;
      in >> name >> key;
      std::getline(in >> std::ws, value);
      for (auto& e : bundle.environments)
        if (e.name == name) e.metadata[key] = value;
    } else if (!tag.empty()) {
      throw DataError("unknown manifest record '" + tag + "'");
    }
  }
  bundle.validate();
  return bundle;
}

}  // namespace w2d
