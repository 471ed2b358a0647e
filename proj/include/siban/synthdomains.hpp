#pragma once

// Procedural paired-domain segmentation benchmark.
//
// Both domains draw scenes from one layout grammar (sky above a horizon,
// road below, buildings on the horizon, vehicles on the road, rare thin
// poles) and differ only in how a label map is rendered to RGB.

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "siban/autodiff.hpp"
#include "siban/errors.hpp"

namespace siban {

struct SceneSpec {
  std::size_t height = 64;
  std::size_t width = 64;
  std::vector<std::string> class_names = {"background", "road", "building", "vehicle", "pole"};
  std::vector<double> frequency_targets = {0.38, 0.505, 0.075, 0.025, 0.015};
  double horizon_min = 0.38;  // fractions of the image height
  double horizon_max = 0.55;
  std::size_t buildings_min = 1;
  std::size_t buildings_max = 3;
  double building_width_min = 0.12;  // fractions of the image width / height
  double building_width_max = 0.30;
  double building_height_min = 0.12;
  double building_height_max = 0.32;
  std::size_t vehicles_max = 2;
  double vehicle_width_min = 0.15;
  double vehicle_width_max = 0.30;
  double vehicle_height_min = 0.08;
  double vehicle_height_max = 0.16;
  double pole_probability = 0.35;
  std::size_t pole_width_min = 8;  // pixels
  std::size_t pole_width_max = 11;
  double pole_height_min = 0.22;
  double pole_height_max = 0.38;
  std::uint64_t seed = 1;

  std::size_t num_classes() const { return class_names.size(); }
};

inline constexpr std::uint8_t kBackground = 0, kRoad = 1, kBuilding = 2, kVehicle = 3, kPole = 4;

inline void validate(const SceneSpec& spec) {
  if (spec.num_classes() != 5) throw ConfigError("the scene grammar draws exactly 5 classes");
  if (spec.frequency_targets.size() != spec.num_classes()) throw ConfigError("one frequency target per class");
  double total = 0.0;
  for (double f : spec.frequency_targets) {
    if (!(f > 0.0)) throw ConfigError("frequency targets must be positive");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-6) throw ConfigError("frequency targets must sum to 1");
  if (spec.height == 0 || spec.width == 0 || spec.height > 65535 || spec.width > 65535) {
    throw ConfigError("scene size out of range");
  }
  if (!(0.0 < spec.horizon_min && spec.horizon_min <= spec.horizon_max && spec.horizon_max < 1.0)) {
    throw ConfigError("horizon band must lie inside (0, 1)");
  }
  if (spec.buildings_min > spec.buildings_max || spec.pole_width_min > spec.pole_width_max ||
      spec.pole_width_min == 0) {
    throw ConfigError("inconsistent scene grammar ranges");
  }
}

namespace detail {
inline double uniform(RngStream& rng, double lo, double hi) { return lo + (hi - lo) * rng.next_double(); }

inline std::size_t to_pixels(double fraction, std::size_t extent) {
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(fraction * static_cast<double>(extent))));
}

inline void fill_rect(std::vector<std::uint8_t>& labels, std::size_t width, std::size_t height, std::ptrdiff_t y0,
                      std::ptrdiff_t x0, std::size_t h, std::size_t w, std::uint8_t value) {
  const auto H = static_cast<std::ptrdiff_t>(height), W = static_cast<std::ptrdiff_t>(width);
  for (std::ptrdiff_t y = std::max<std::ptrdiff_t>(0, y0); y < std::min(H, y0 + static_cast<std::ptrdiff_t>(h)); ++y) {
    for (std::ptrdiff_t x = std::max<std::ptrdiff_t>(0, x0); x < std::min(W, x0 + static_cast<std::ptrdiff_t>(w));
         ++x) {
      labels[static_cast<std::size_t>(y * W + x)] = value;
    }
  }
}
}  // namespace detail

// Label map [H, W] (row-major); deterministic in (spec.seed, sample_seed).
inline std::vector<std::uint8_t> generate_scene(const SceneSpec& spec, std::uint64_t sample_seed) {
  validate(spec);
  RngStream rng = RngStream(spec.seed).fork(sample_seed);
  const std::size_t H = spec.height, W = spec.width;
  std::vector<std::uint8_t> labels(H * W, kBackground);
  const auto horizon = static_cast<std::ptrdiff_t>(
      std::lround(detail::uniform(rng, spec.horizon_min, spec.horizon_max) * static_cast<double>(H)));
  detail::fill_rect(labels, W, H, horizon, 0, H, W, kRoad);

  const std::size_t n_buildings =
      spec.buildings_min + static_cast<std::size_t>(rng.next_below(spec.buildings_max - spec.buildings_min + 1));
  for (std::size_t i = 0; i < n_buildings; ++i) {
    const std::size_t bw =
        detail::to_pixels(detail::uniform(rng, spec.building_width_min, spec.building_width_max), W);
    const std::size_t bh =
        detail::to_pixels(detail::uniform(rng, spec.building_height_min, spec.building_height_max), H);
    const auto x0 = static_cast<std::ptrdiff_t>(rng.next_below(W));
    detail::fill_rect(labels, W, H, horizon - static_cast<std::ptrdiff_t>(bh), x0 - static_cast<std::ptrdiff_t>(bw / 2),
                      bh, bw, kBuilding);
  }

  const std::size_t n_vehicles = static_cast<std::size_t>(rng.next_below(spec.vehicles_max + 1));
  for (std::size_t i = 0; i < n_vehicles; ++i) {
    const std::size_t vw = detail::to_pixels(detail::uniform(rng, spec.vehicle_width_min, spec.vehicle_width_max), W);
    const std::size_t vh =
        detail::to_pixels(detail::uniform(rng, spec.vehicle_height_min, spec.vehicle_height_max), H);
    const auto road_rows = static_cast<std::size_t>(std::max<std::ptrdiff_t>(1, static_cast<std::ptrdiff_t>(H) - horizon));
    const auto y0 = horizon + static_cast<std::ptrdiff_t>(rng.next_below(road_rows)) - static_cast<std::ptrdiff_t>(vh / 2);
    const auto x0 = static_cast<std::ptrdiff_t>(rng.next_below(W)) - static_cast<std::ptrdiff_t>(vw / 2);
    detail::fill_rect(labels, W, H, y0, x0, vh, vw, kVehicle);
  }

  if (rng.next_double() < spec.pole_probability) {
    const std::size_t pw =
        spec.pole_width_min + static_cast<std::size_t>(rng.next_below(spec.pole_width_max - spec.pole_width_min + 1));
    const std::size_t ph = detail::to_pixels(detail::uniform(rng, spec.pole_height_min, spec.pole_height_max), H);
    const auto base = horizon + static_cast<std::ptrdiff_t>(rng.next_below(std::max<std::size_t>(1, H / 8)));
    const auto x0 = static_cast<std::ptrdiff_t>(rng.next_below(W)) - static_cast<std::ptrdiff_t>(pw / 2);
    detail::fill_rect(labels, W, H, base - static_cast<std::ptrdiff_t>(ph), x0, ph, pw, kPole);
  }
  return labels;
}

struct DomainStyle {
  std::vector<std::array<double, 3>> base_colors;  // per class, 0..255
  double noise = 0.0;                              // std of per-pixel Gaussian noise
  double contrast = 1.0;                           // v <- (v - 128) contrast + 128 + brightness
  double brightness = 0.0;
  std::array<double, 3> channel_gain = {1.0, 1.0, 1.0};
  double grain_amplitude = 0.0;  // per-class oriented sinusoidal texture
  double grain_period = 8.0;
};

// Saturated flat colours with light texture: the "simulated" domain.
inline DomainStyle default_source_style() {
  DomainStyle s;
  s.base_colors = {{{110, 160, 230}}, {{90, 90, 95}}, {{185, 120, 80}}, {{210, 40, 45}}, {{235, 215, 60}}};
  s.noise = 4.0;
  s.grain_amplitude = 6.0;
  s.grain_period = 6.0;
  return s;
}

// Washed-out, colour-cast, noisy and heavily textured: the "real" domain.
inline DomainStyle default_target_style() {
  DomainStyle s = default_source_style();
  s.noise = 18.0;
  s.contrast = 0.55;
  s.brightness = 25.0;
  s.channel_gain = {{1.2, 0.95, 0.7}};
  s.grain_amplitude = 22.0;
  s.grain_period = 4.0;
  return s;
}

// RGB image [3, H, W] of bytes. Never reads beyond or modifies `labels`.
inline std::vector<std::uint8_t> render_domain(std::span<const std::uint8_t> labels, std::size_t height,
                                               std::size_t width, const DomainStyle& style,
                                               std::uint64_t sample_seed) {
  if (labels.size() != height * width) throw ShapeError("render_domain: label map size mismatch");
  const std::size_t K = style.base_colors.size();
  for (auto y : labels) {
    if (y >= K) throw ShapeError("render_domain: label " + std::to_string(y) + " but style has " + std::to_string(K) + " colours");
  }
  constexpr double kTwoPi = 6.283185307179586476925286766559;
  RngStream rng = RngStream(0x5EEDC0105ULL).fork(sample_seed);
  std::vector<double> phase(K);
  for (auto& p : phase) p = kTwoPi * rng.next_double();
  std::vector<double> noise(3 * height * width, 0.0);
  if (style.noise > 0.0) fill_normal(rng, noise);
  std::vector<std::uint8_t> image(3 * height * width);
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      const std::size_t k = labels[y * width + x];
      double grain = 0.0;
      if (style.grain_amplitude != 0.0) {
        const double angle = static_cast<double>(k) * 0.9;  // class-specific orientation
        const double u = std::cos(angle) * static_cast<double>(x) + std::sin(angle) * static_cast<double>(y);
        grain = style.grain_amplitude * std::sin(kTwoPi * u / style.grain_period + phase[k]);
      }
      for (std::size_t c = 0; c < 3; ++c) {
        double v = style.base_colors[k][c] + grain;
        v = (v - 128.0) * style.contrast + 128.0 + style.brightness;
        v *= style.channel_gain[c];
        v += style.noise * noise[(c * height + y) * width + x];
        v = std::clamp(std::round(v), 0.0, 255.0);
        image[(c * height + y) * width + x] = static_cast<std::uint8_t>(v);
      }
    }
  }
  return image;
}

enum class Split { kSource, kTargetTrain, kTargetVal };

inline constexpr std::array<Split, 3> kAllSplits = {Split::kSource, Split::kTargetTrain, Split::kTargetVal};

inline std::string split_name(Split s) {
  switch (s) {
    case Split::kSource: return "source";
    case Split::kTargetTrain: return "target-train";
    case Split::kTargetVal: return "target-val";
  }
  return "?";
}

inline Split parse_split(const std::string& name) {
  for (Split s : kAllSplits) {
    if (split_name(s) == name) return s;
  }
  throw ConfigError("unknown split '" + name + "' (expected source, target-train or target-val)");
}

inline bool is_target(Split s) { return s != Split::kSource; }

// Labels of target-train exist on disk but are never handed to training code.
inline bool labels_exposed(Split s) { return s != Split::kTargetTrain; }

struct SplitData {
  std::size_t count = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  bool has_labels = false;
  std::vector<std::uint8_t> images;  // count x [3, H, W]
  std::vector<std::uint8_t> labels;  // count x [H, W]

  std::span<const std::uint8_t> image(std::size_t i) const {
    return std::span<const std::uint8_t>(images).subspan(i * 3 * height * width, 3 * height * width);
  }
  std::span<const std::uint8_t> label(std::size_t i) const {
    return std::span<const std::uint8_t>(labels).subspan(i * height * width, height * width);
  }
};

inline constexpr char kDataMagic[4] = {'S', 'Y', 'N', 'D'};
inline constexpr std::uint32_t kDataVersion = 1;

namespace detail {
template <typename U>
void put_le(std::string& out, U value) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xFF));
}

template <typename U>
U get_le(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(U) > in.size()) throw FormatError("truncated file");
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  pos += sizeof(U);
  return static_cast<U>(v);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}
}  // namespace detail

inline std::string encode_split(const SplitData& d) {
  std::string out(kDataMagic, 4);
  detail::put_le<std::uint32_t>(out, kDataVersion);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d.count));
  detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(d.height));
  detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(d.width));
  detail::put_le<std::uint8_t>(out, 3);
  detail::put_le<std::uint8_t>(out, d.has_labels ? 1 : 0);
  const std::size_t img = 3 * d.height * d.width, lab = d.height * d.width;
  out.reserve(out.size() + d.count * (img + (d.has_labels ? lab : 0)));
  for (std::size_t i = 0; i < d.count; ++i) {
    out.append(reinterpret_cast<const char*>(d.images.data() + i * img), img);
    if (d.has_labels) out.append(reinterpret_cast<const char*>(d.labels.data() + i * lab), lab);
  }
  return out;
}

inline SplitData decode_split(const std::string& bytes) {
  if (bytes.size() < 4 || bytes.compare(0, 4, std::string(kDataMagic, 4)) != 0) throw FormatError("not a SYND data file");
  std::size_t pos = 4;
  const auto version = detail::get_le<std::uint32_t>(bytes, pos);
  if (version != kDataVersion) throw FormatError("unsupported data file version " + std::to_string(version));
  SplitData d;
  d.count = detail::get_le<std::uint32_t>(bytes, pos);
  d.height = detail::get_le<std::uint16_t>(bytes, pos);
  d.width = detail::get_le<std::uint16_t>(bytes, pos);
  if (detail::get_le<std::uint8_t>(bytes, pos) != 3) throw FormatError("data file must have 3 image channels");
  d.has_labels = detail::get_le<std::uint8_t>(bytes, pos) != 0;
  const std::size_t img = 3 * d.height * d.width, lab = d.height * d.width;
  const std::size_t record = img + (d.has_labels ? lab : 0);
  if (bytes.size() != pos + d.count * record) throw FormatError("data file size does not match its header");
  d.images.resize(d.count * img);
  if (d.has_labels) d.labels.resize(d.count * lab);
  for (std::size_t i = 0; i < d.count; ++i) {
    std::copy_n(bytes.data() + pos, img, reinterpret_cast<char*>(d.images.data() + i * img));
    pos += img;
    if (d.has_labels) {
      std::copy_n(bytes.data() + pos, lab, reinterpret_cast<char*>(d.labels.data() + i * lab));
      pos += lab;
    }
  }
  return d;
}

inline std::string split_file_name(Split s) { return split_name(s) + ".bin"; }

struct DatasetSizes {
  std::size_t source = 2000;
  std::size_t target_train = 2000;
  std::size_t target_val = 500;

  std::size_t of(Split s) const {
    return s == Split::kSource ? source : (s == Split::kTargetTrain ? target_train : target_val);
  }
};

// Per-sample seeds: disjoint ranges per split.
inline std::uint64_t sample_seed(Split s, std::size_t index) {
  return (static_cast<std::uint64_t>(s) << 32) | static_cast<std::uint64_t>(index);
}

inline std::vector<double> class_frequencies(std::span<const std::uint8_t> labels, std::size_t K) {
  std::vector<double> freq(K, 0.0);
  if (labels.empty()) return freq;
  std::vector<std::uint64_t> counts(K, 0);
  for (auto y : labels) {
    if (y < K) ++counts[y];
  }
  for (std::size_t k = 0; k < K; ++k) freq[k] = static_cast<double>(counts[k]) / static_cast<double>(labels.size());
  return freq;
}

inline nlohmann::ordered_json style_to_json(const DomainStyle& s) {
  nlohmann::ordered_json j;
  j["base_colors"] = s.base_colors;
  j["noise"] = s.noise;
  j["contrast"] = s.contrast;
  j["brightness"] = s.brightness;
  j["channel_gain"] = s.channel_gain;
  j["grain_amplitude"] = s.grain_amplitude;
  j["grain_period"] = s.grain_period;
  return j;
}

inline SplitData generate_split(const SceneSpec& spec, const DomainStyle& style, Split s, std::size_t count) {
  SplitData d;
  d.count = count;
  d.height = spec.height;
  d.width = spec.width;
  d.has_labels = true;
  d.images.reserve(count * 3 * spec.height * spec.width);
  d.labels.reserve(count * spec.height * spec.width);
  for (std::size_t i = 0; i < count; ++i) {
    const auto seed = sample_seed(s, i);
    const auto labels = generate_scene(spec, seed);
    const auto image = render_domain(labels, spec.height, spec.width, style, seed);
    d.images.insert(d.images.end(), image.begin(), image.end());
    d.labels.insert(d.labels.end(), labels.begin(), labels.end());
  }
  return d;
}

// Writes one data file per split plus manifest.json; returns the manifest.
inline nlohmann::ordered_json build_dataset(const SceneSpec& spec, const DomainStyle& source_style,
                                            const DomainStyle& target_style, const DatasetSizes& sizes,
                                            const std::filesystem::path& out_dir) {
  validate(spec);
  for (const auto* st : {&source_style, &target_style}) {
    if (st->base_colors.size() != spec.num_classes()) throw ConfigError("style needs one base colour per class");
  }
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());

  const std::size_t K = spec.num_classes();
  nlohmann::ordered_json manifest;
  manifest["version"] = kDataVersion;
  manifest["seed"] = spec.seed;
  manifest["height"] = spec.height;
  manifest["width"] = spec.width;
  manifest["num_classes"] = K;
  manifest["class_names"] = spec.class_names;
  manifest["frequency_targets"] = spec.frequency_targets;
  nlohmann::ordered_json splits, measured;
  std::vector<std::uint64_t> all_counts(K, 0);
  std::uint64_t all_pixels = 0;
  std::size_t n_total = 0;
  for (Split s : kAllSplits) {
    const DomainStyle& style = is_target(s) ? target_style : source_style;
    const SplitData d = generate_split(spec, style, s, sizes.of(s));
    detail::write_file(out_dir / split_file_name(s), encode_split(d));
    measured[split_name(s)] = class_frequencies(d.labels, K);
    for (auto y : d.labels) ++all_counts[y];
    all_pixels += d.labels.size();
    n_total += d.count;
    splits[split_name(s)] = {{"file", split_file_name(s)},
                             {"count", d.count},
                             {"domain", is_target(s) ? "target" : "source"},
                             {"labels", s == Split::kSource ? "train" : (s == Split::kTargetTrain ? "eval-only" : "eval")}};
  }
  std::vector<double> all(K, 0.0);
  for (std::size_t k = 0; k < K && all_pixels > 0; ++k) {
    all[k] = static_cast<double>(all_counts[k]) / static_cast<double>(all_pixels);
  }
  measured["all"] = all;
  manifest["num_samples"] = n_total;
  manifest["splits"] = splits;
  manifest["measured_frequencies"] = measured;
  manifest["styles"] = {{"source", style_to_json(source_style)}, {"target", style_to_json(target_style)}};
  detail::write_file(out_dir / "manifest.json", manifest.dump(2) + "\n");
  return manifest;
}

enum class Domain { kSource, kTarget };

struct DomainBatch {
  Domain domain = Domain::kSource;
  Tensor<float> images;  // [B, 3, H, W] in [0, 1]
  std::optional<std::vector<std::uint8_t>> labels;  // [B, H, W]
};

enum class LabelAccess { kIfAllowed, kRequire };

class Dataset {
 public:
  static Dataset open(const std::filesystem::path& dir) {
    Dataset ds;
    ds.dir_ = dir;
    const auto manifest = nlohmann::json::parse(detail::read_file(dir / "manifest.json"));
    ds.num_classes_ = manifest.at("num_classes").get<std::size_t>();
    ds.class_names_ = manifest.at("class_names").get<std::vector<std::string>>();
    for (Split s : kAllSplits) ds.splits_[static_cast<std::size_t>(s)] = decode_split(detail::read_file(dir / split_file_name(s)));
    return ds;
  }

  const SplitData& split(Split s) const { return splits_[static_cast<std::size_t>(s)]; }
  std::size_t num_classes() const { return num_classes_; }
  const std::vector<std::string>& class_names() const { return class_names_; }

  DomainBatch load_batch(Split s, std::span<const std::size_t> indices, LabelAccess access = LabelAccess::kIfAllowed) const {
    if (access == LabelAccess::kRequire && !labels_exposed(s)) {
      throw PolicyError("labels of split " + split_name(s) + " are evaluation-only");
    }
    const SplitData& d = split(s);
    if (indices.empty()) throw ShapeError("load_batch: empty index list");
    const std::size_t img = 3 * d.height * d.width, lab = d.height * d.width;
    std::vector<float> pixels(indices.size() * img);
    std::optional<std::vector<std::uint8_t>> labels;
    const bool with_labels = labels_exposed(s) && d.has_labels;
    if (access == LabelAccess::kRequire && !with_labels) throw PolicyError("split " + split_name(s) + " has no labels");
    if (with_labels) labels.emplace(indices.size() * lab);
    for (std::size_t n = 0; n < indices.size(); ++n) {
      const std::size_t i = indices[n];
      if (i >= d.count) {
        throw std::out_of_range("index " + std::to_string(i) + " out of range for split " + split_name(s) + " (" +
                                std::to_string(d.count) + " samples)");
      }
      auto src = d.image(i);
      for (std::size_t j = 0; j < img; ++j) pixels[n * img + j] = static_cast<float>(src[j]) / 255.0f;
      if (with_labels) std::copy_n(d.label(i).begin(), lab, labels->begin() + static_cast<std::ptrdiff_t>(n * lab));
    }
    DomainBatch batch;
    batch.domain = is_target(s) ? Domain::kTarget : Domain::kSource;
    batch.images = Tensor<float>(Shape{indices.size(), 3, d.height, d.width}, std::move(pixels));
    batch.labels = std::move(labels);
    return batch;
  }

 private:
  std::filesystem::path dir_;
  std::size_t num_classes_ = 0;
  std::vector<std::string> class_names_;
  std::array<SplitData, 3> splits_;
};

// Per-cell majority vote (ties -> lowest class id; ignore-only cells stay
// ignored). Labels [B, H, W] -> [B, H/f, W/f].
inline std::vector<std::uint8_t> downsample_labels(std::span<const std::uint8_t> labels, std::size_t batch,
                                                   std::size_t height, std::size_t width, std::size_t factor,
                                                   std::size_t num_classes) {
  if (labels.size() != batch * height * width) throw ShapeError("downsample_labels: size mismatch");
  if (factor == 0 || height % factor != 0 || width % factor != 0) {
    throw ShapeError("downsample_labels: size not divisible by factor");
  }
  const std::size_t h = height / factor, w = width / factor;
  std::vector<std::uint8_t> out(batch * h * w, 255);
  std::vector<std::size_t> votes(num_classes);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < h; ++i) {
      for (std::size_t j = 0; j < w; ++j) {
        std::fill(votes.begin(), votes.end(), 0);
        for (std::size_t y = i * factor; y < (i + 1) * factor; ++y) {
          for (std::size_t x = j * factor; x < (j + 1) * factor; ++x) {
            const auto v = labels[(b * height + y) * width + x];
            if (v < num_classes) ++votes[v];
          }
        }
        std::size_t best = 0;
        for (std::size_t k = 1; k < num_classes; ++k) {
          if (votes[k] > votes[best]) best = k;
        }
        if (votes[best] > 0) out[(b * h + i) * w + j] = static_cast<std::uint8_t>(best);
      }
    }
  }
  return out;
}

// Crops a [B,3,H,W] batch (and its labels) to size x size at (y0, x0).
inline DomainBatch crop_batch(const DomainBatch& in, std::size_t y0, std::size_t x0, std::size_t size) {
  const std::size_t B = in.images.dim(0), H = in.images.dim(2), W = in.images.dim(3);
  if (y0 + size > H || x0 + size > W) throw ShapeError("crop outside image");
  if (size == H && size == W) return in;
  DomainBatch out;
  out.domain = in.domain;
  std::vector<float> px(B * 3 * size * size);
  for (std::size_t p = 0; p < B * 3; ++p) {
    for (std::size_t y = 0; y < size; ++y) {
      std::copy_n(in.images.data().begin() + static_cast<std::ptrdiff_t>((p * H + y0 + y) * W + x0), size,
                  px.begin() + static_cast<std::ptrdiff_t>((p * size + y) * size));
    }
  }
  out.images = Tensor<float>(Shape{B, 3, size, size}, std::move(px));
  if (in.labels) {
    std::vector<std::uint8_t> lab(B * size * size);
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t y = 0; y < size; ++y) {
        std::copy_n(in.labels->begin() + static_cast<std::ptrdiff_t>((b * H + y0 + y) * W + x0), size,
                    lab.begin() + static_cast<std::ptrdiff_t>((b * size + y) * size));
      }
    }
    out.labels = std::move(lab);
  }
  return out;
}

}  // namespace siban
