#include "movl/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iterator>
#include <sstream>

#include <json.hpp>

#include "movl/error.hpp"
#include "movl/random.hpp"

namespace movl {

namespace fs = std::filesystem;
using json = nlohmann::json;

void validate_meta(const DatasetMeta& meta) {
  if (meta.num_classes < 2) throw MalformedDatasetError("meta: num_classes must be >= 2");
  if (meta.c != 1 && meta.c != 3) throw MalformedDatasetError("meta: c must be 1 or 3");
  if (meta.h == 0 || meta.w == 0) throw MalformedDatasetError("meta: h and w must be >= 1");
  if (!meta.class_names.empty() && meta.class_names.size() != meta.num_classes) {
    throw MalformedDatasetError("meta: class_names length must equal num_classes");
  }
  std::vector<std::pair<std::size_t, std::size_t>> ranges;
  for (const auto& [name, r] : meta.splits) {
    if (r.offset + r.length > meta.n) {
      throw MalformedDatasetError("meta: split '" + name + "' exceeds n");
    }
    ranges.emplace_back(r.offset, r.offset + r.length);
  }
  std::sort(ranges.begin(), ranges.end());
  for (std::size_t i = 1; i < ranges.size(); ++i) {
    if (ranges[i].first < ranges[i - 1].second) {
      throw MalformedDatasetError("meta: split ranges overlap");
    }
  }
}

Dataset::Dataset(DatasetMeta meta, std::vector<std::uint8_t> images,
                 std::vector<std::uint16_t> labels)
    : meta_(std::move(meta)), images_(std::move(images)), labels_(std::move(labels)) {
  validate_meta(meta_);
  if (images_.size() != meta_.n * meta_.image_bytes()) {
    throw MalformedDatasetError("images: expected " + std::to_string(meta_.n * meta_.image_bytes()) +
                                " bytes, got " + std::to_string(images_.size()));
  }
  if (labels_.size() != meta_.n) {
    throw MalformedDatasetError("labels: expected " + std::to_string(meta_.n) + " labels, got " +
                                std::to_string(labels_.size()));
  }
  for (std::size_t i = 0; i < labels_.size(); ++i) {
    if (labels_[i] >= meta_.num_classes) {
      throw CorruptLabelsError("labels: sample " + std::to_string(i) + " has label " +
                               std::to_string(labels_[i]) + " >= num_classes " +
                               std::to_string(meta_.num_classes));
    }
  }
}

std::vector<std::size_t> Dataset::split(const std::string& name) const {
  const auto it = meta_.splits.find(name);
  if (it == meta_.splits.end()) throw ContractError("dataset has no split '" + name + "'");
  std::vector<std::size_t> idx(it->second.length);
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = it->second.offset + i;
  return idx;
}

std::vector<int> Dataset::labels(std::span<const std::size_t> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(labels_[i]);
  return out;
}

namespace {

std::vector<char> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MalformedDatasetError("missing file: " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::size_t get_count(const json& j, const char* key) {
  if (!j.contains(key) || !j.at(key).is_number_unsigned()) {
    throw MalformedDatasetError(std::string("meta.json: '") + key + "' must be a non-negative integer");
  }
  return j.at(key).get<std::size_t>();
}

json meta_to_json(const DatasetMeta& meta) {
  json j;
  j["n"] = meta.n;
  j["h"] = meta.h;
  j["w"] = meta.w;
  j["c"] = meta.c;
  j["num_classes"] = meta.num_classes;
  json splits = json::object();
  for (const auto& [name, r] : meta.splits) {
    splits[name] = {{"offset", r.offset}, {"length", r.length}};
  }
  j["splits"] = splits;
  if (!meta.class_names.empty()) j["class_names"] = meta.class_names;
  return j;
}

}  // namespace

Dataset load_dataset(const fs::path& root) {
  const auto meta_bytes = read_file(root / "meta.json");
  json j;
  try {
    j = json::parse(meta_bytes.begin(), meta_bytes.end());
  } catch (const json::parse_error& e) {
    throw MalformedDatasetError(std::string("meta.json: ") + e.what());
  }
  DatasetMeta meta;
  meta.n = get_count(j, "n");
  meta.h = get_count(j, "h");
  meta.w = get_count(j, "w");
  meta.c = get_count(j, "c");
  meta.num_classes = get_count(j, "num_classes");
  if (j.contains("splits")) {
    for (const auto& [name, r] : j.at("splits").items()) {
      meta.splits[name] = {get_count(r, "offset"), get_count(r, "length")};
    }
  }
  if (j.contains("class_names")) meta.class_names = j.at("class_names").get<std::vector<std::string>>();

  const auto img = read_file(root / "images.u8");
  const auto lab = read_file(root / "labels.u16");
  if (img.size() != meta.n * meta.image_bytes()) {
    throw MalformedDatasetError("images.u8: size " + std::to_string(img.size()) +
                                " does not match meta (" + std::to_string(meta.n * meta.image_bytes()) + ")");
  }
  if (lab.size() != 2 * meta.n) {
    throw MalformedDatasetError("labels.u16: size " + std::to_string(lab.size()) +
                                " does not match meta (" + std::to_string(2 * meta.n) + ")");
  }
  std::vector<std::uint8_t> images(img.begin(), img.end());
  std::vector<std::uint16_t> labels(meta.n);
  for (std::size_t i = 0; i < meta.n; ++i) {
    labels[i] = static_cast<std::uint16_t>(static_cast<unsigned char>(lab[2 * i]) |
                                           (static_cast<unsigned char>(lab[2 * i + 1]) << 8));
  }
  return Dataset(std::move(meta), std::move(images), std::move(labels));
}

void save_dataset(const Dataset& data, const fs::path& root) {
  fs::create_directories(root);
  {
    std::ofstream out(root / "meta.json", std::ios::binary);
    out << meta_to_json(data.meta()).dump(2) << '\n';
  }
  {
    std::ofstream out(root / "images.u8", std::ios::binary);
    const auto img = data.raw_images();
    out.write(reinterpret_cast<const char*>(img.data()), static_cast<std::streamsize>(img.size()));
  }
  {
    std::ofstream out(root / "labels.u16", std::ios::binary);
    for (auto l : data.raw_labels()) {
      const char bytes[2] = {static_cast<char>(l & 0xff), static_cast<char>(l >> 8)};
      out.write(bytes, 2);
    }
  }
}

SyntheticDomainSpec SyntheticDomainSpec::source(std::size_t num_classes, std::uint64_t seed) {
  SyntheticDomainSpec s;
  s.domain = Domain::kSource;
  s.num_classes = num_classes;
  s.seed = seed;
  return s;
}

SyntheticDomainSpec SyntheticDomainSpec::target(std::size_t num_classes, std::uint64_t seed) {
  SyntheticDomainSpec s;
  s.domain = Domain::kTarget;
  s.num_classes = num_classes;
  s.seed = seed;
  s.grayscale = true;
  s.invert = true;
  s.noise_sigma = 0.1;
  s.texture_frequency = 0.22;
  s.val_per_class = 20;
  s.test_per_class = 100;
  return s;
}

const char* shape_name(std::size_t cls) {
  static constexpr std::array<const char*, kMaxShapeClasses> kNames = {
      "disk", "square", "triangle", "plus", "ring", "diamond", "bar", "cross", "frame", "half_disk"};
  return cls < kNames.size() ? kNames[cls] : "unknown";
}

namespace {

// Membership test in shape-local coordinates (unit radius).
bool inside_shape(std::size_t cls, double u, double v) {
  const double au = std::abs(u);
  const double av = std::abs(v);
  switch (cls) {
    case 0:
      return u * u + v * v <= 1.0;
    case 1:
      return std::max(au, av) <= 0.8;
    case 2:
      return v >= -0.8 && v <= 0.7 && au <= 0.9 * (v + 0.8) / 1.5;
    case 3:
      return (au <= 0.3 && av <= 0.95) || (av <= 0.3 && au <= 0.95);
    case 4: {
      const double r2 = u * u + v * v;
      return r2 <= 1.0 && r2 >= 0.36;
    }
    case 5:
      return au + av <= 1.0;
    case 6:
      return au <= 1.0 && av <= 0.32;
    case 7: {
      const double p = std::abs((u + v) * M_SQRT1_2);
      const double q = std::abs((u - v) * M_SQRT1_2);
      return (p <= 0.25 && q <= 1.0) || (q <= 0.25 && p <= 1.0);
    }
    case 8: {
      const double m = std::max(au, av);
      return m <= 0.85 && m >= 0.5;
    }
    case 9:
      return u * u + v * v <= 1.0 && v >= -0.15;
    default:
      return false;
  }
}

struct Rgb {
  double r, g, b;
};

void render_sample(const SyntheticDomainSpec& spec, std::size_t index, std::size_t cls,
                   std::uint8_t* out) {
  Rng rng(derive_seed(spec.seed, "synthetic/sample/" + std::to_string(index)));
  const auto size = static_cast<double>(spec.image_size);

  const Rgb bg0{rng.uniform(0.0, 0.4), rng.uniform(0.0, 0.4), rng.uniform(0.0, 0.4)};
  const Rgb bg1{rng.uniform(0.0, 0.4), rng.uniform(0.0, 0.4), rng.uniform(0.0, 0.4)};
  const Rgb fg{rng.uniform(0.55, 1.0), rng.uniform(0.55, 1.0), rng.uniform(0.55, 1.0)};
  const double orient = rng.uniform(0.0, M_PI);
  const double phase = rng.uniform(0.0, 2.0 * M_PI);
  const double cx = rng.uniform(0.35, 0.65) * size;
  const double cy = rng.uniform(0.35, 0.65) * size;
  const double radius = rng.uniform(0.2, 0.3) * size;
  const double rot = rng.uniform(-0.25, 0.25);
  const double cr = std::cos(rot);
  const double sr = std::sin(rot);
  const double kx = std::cos(orient) * spec.texture_frequency * 2.0 * M_PI;
  const double ky = std::sin(orient) * spec.texture_frequency * 2.0 * M_PI;
  Rng noise(derive_seed(spec.seed, "synthetic/noise/" + std::to_string(index)));

  for (std::size_t y = 0; y < spec.image_size; ++y) {
    for (std::size_t x = 0; x < spec.image_size; ++x) {
      // 2x2 supersampled coverage for soft edges.
      double coverage = 0.0;
      for (int sy = 0; sy < 2; ++sy) {
        for (int sx = 0; sx < 2; ++sx) {
          const double px = static_cast<double>(x) + 0.25 + 0.5 * sx - cx;
          const double py = static_cast<double>(y) + 0.25 + 0.5 * sy - cy;
          const double u = (cr * px + sr * py) / radius;
          const double v = (-sr * px + cr * py) / radius;
          coverage += inside_shape(cls, u, v) ? 0.25 : 0.0;
        }
      }
      const double t = 0.5 + 0.5 * std::sin(kx * static_cast<double>(x) + ky * static_cast<double>(y) + phase);
      Rgb px{bg0.r + t * (bg1.r - bg0.r), bg0.g + t * (bg1.g - bg0.g), bg0.b + t * (bg1.b - bg0.b)};
      px = {px.r + coverage * (fg.r - px.r), px.g + coverage * (fg.g - px.g),
            px.b + coverage * (fg.b - px.b)};
      if (spec.grayscale) {
        const double g = 0.299 * px.r + 0.587 * px.g + 0.114 * px.b;
        px = {g, g, g};
      }
      if (spec.invert) px = {1.0 - px.r, 1.0 - px.g, 1.0 - px.b};
      if (spec.noise_sigma > 0.0) {
        if (spec.grayscale) {
          const double n = spec.noise_sigma * noise.normal();
          px = {px.r + n, px.g + n, px.b + n};
        } else {
          px = {px.r + spec.noise_sigma * noise.normal(), px.g + spec.noise_sigma * noise.normal(),
                px.b + spec.noise_sigma * noise.normal()};
        }
      }
      for (double ch : {px.r, px.g, px.b}) {
        *out++ = static_cast<std::uint8_t>(std::lround(std::clamp(ch, 0.0, 1.0) * 255.0));
      }
    }
  }
}

}  // namespace

Dataset make_synthetic(const SyntheticDomainSpec& spec, std::size_t n_per_class) {
  if (n_per_class < 1) throw ConfigError("synthetic: n_per_class must be >= 1");
  if (spec.num_classes < 2 || spec.num_classes > kMaxShapeClasses) {
    throw ConfigError("synthetic: num_classes must be in [2, " + std::to_string(kMaxShapeClasses) + "]");
  }
  if (spec.image_size < 8) throw ConfigError("synthetic: image_size must be >= 8");
  if (spec.val_per_class + spec.test_per_class > n_per_class) {
    throw ConfigError("synthetic: val_per_class + test_per_class exceeds n_per_class");
  }
  if (spec.noise_sigma < 0.0) throw ConfigError("synthetic: noise sigma must be >= 0");

  const std::size_t k = spec.num_classes;
  DatasetMeta meta;
  meta.n = k * n_per_class;
  meta.h = meta.w = spec.image_size;
  meta.c = 3;
  meta.num_classes = k;
  const std::size_t train_per_class = n_per_class - spec.val_per_class - spec.test_per_class;
  std::size_t offset = 0;
  for (const auto& [name, per_class] : {std::pair<const char*, std::size_t>{"train", train_per_class},
                                        {"val", spec.val_per_class},
                                        {"test", spec.test_per_class}}) {
    if (per_class == 0) continue;
    meta.splits[name] = {offset, per_class * k};
    offset += per_class * k;
  }
  for (std::size_t i = 0; i < k; ++i) meta.class_names.emplace_back(shape_name(i));

  std::vector<std::uint8_t> images(meta.n * meta.image_bytes());
  std::vector<std::uint16_t> labels(meta.n);
  for (std::size_t i = 0; i < meta.n; ++i) {
    labels[i] = static_cast<std::uint16_t>(i % k);
    render_sample(spec, i, i % k, images.data() + i * meta.image_bytes());
  }
  return Dataset(std::move(meta), std::move(images), std::move(labels));
}

Dataset generate_synthetic(const SyntheticDomainSpec& spec, std::size_t n_per_class,
                           const fs::path& root) {
  Dataset data = make_synthetic(spec, n_per_class);
  save_dataset(data, root);
  return data;
}

}  // namespace movl
