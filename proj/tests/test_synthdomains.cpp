#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include <unistd.h>

#include "siban/synthdomains.hpp"

using namespace siban;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

// Label histogram read straight from the documented file layout, without the
// library decoder.
std::vector<std::uint64_t> recount_labels(const fs::path& p, std::size_t K, std::uint64_t& pixels) {
  const std::string b = slurp(p);
  auto u = [&](std::size_t off, int n) {
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b[off + i])) << (8 * i);
    return v;
  };
  EXPECT_EQ(b.substr(0, 4), "SYND");
  const std::uint64_t n = u(8, 4), h = u(12, 2), w = u(14, 2);
  EXPECT_EQ(u(16, 1), 3u);
  EXPECT_EQ(u(17, 1), 1u);
  std::vector<std::uint64_t> counts(K, 0);
  std::size_t pos = 18;
  for (std::uint64_t i = 0; i < n; ++i) {
    pos += 3 * h * w;
    for (std::uint64_t j = 0; j < h * w; ++j) ++counts.at(static_cast<unsigned char>(b[pos + j]));
    pos += h * w;
  }
  EXPECT_EQ(pos, b.size());
  pixels += n * h * w;
  return counts;
}

fs::path fresh_dir(const std::string& name) {
  const auto d = fs::temp_directory_path() / ("siban_synth_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(d);
  return d;
}

DomainStyle flat_style() {
  DomainStyle s;
  s.base_colors = {{{10, 20, 30}}, {{40, 50, 60}}, {{70, 80, 90}}, {{100, 110, 120}}, {{130, 140, 150}}};
  return s;
}

}  // namespace

TEST(SceneSpec, Validation) {
  SceneSpec s;
  EXPECT_NO_THROW(validate(s));
  EXPECT_NEAR(std::accumulate(s.frequency_targets.begin(), s.frequency_targets.end(), 0.0), 1.0, 1e-12);
  auto bad = s;
  bad.frequency_targets = {0.5, 0.5, 0.0, 0.0, 0.0};
  EXPECT_THROW(validate(bad), ConfigError);
  bad.frequency_targets = {0.3, 0.3, 0.1, 0.1, 0.1};
  EXPECT_THROW(validate(bad), ConfigError);
}

TEST(GenerateScene, DeterministicAndInRange) {
  SceneSpec s;
  for (std::uint64_t seed : {0ULL, 7ULL, 1ULL << 33}) {
    const auto a = generate_scene(s, seed);
    EXPECT_EQ(a, generate_scene(s, seed));
    ASSERT_EQ(a.size(), s.height * s.width);
    for (auto v : a) EXPECT_LT(v, s.num_classes());
  }
  EXPECT_NE(generate_scene(s, 1), generate_scene(s, 2));
  auto other = s;
  other.seed = 2;
  EXPECT_NE(generate_scene(s, 1), generate_scene(other, 1));
}

TEST(GenerateScene, PoleIsRare) {
  SceneSpec s;
  std::uint64_t pole = 0, total = 0;
  for (std::uint64_t i = 0; i < 1000; ++i) {
    for (auto v : generate_scene(s, 100000 + i)) pole += v == kPole;
    total += s.height * s.width;
  }
  const double f = static_cast<double>(pole) / static_cast<double>(total);
  EXPECT_GT(f, 0.001);
  EXPECT_LT(f, 0.02);
}

TEST(RenderDomain, DegenerateStyleGivesFlatColours) {
  SceneSpec s;
  const auto labels = generate_scene(s, 3);
  const auto style = flat_style();
  const auto img = render_domain(labels, s.height, s.width, style, 3);
  const std::size_t HW = s.height * s.width;
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t p = 0; p < HW; ++p) ASSERT_EQ(img[c * HW + p], style.base_colors[labels[p]][c]);
}

TEST(RenderDomain, StylesShiftColoursNotLabels) {
  SceneSpec s;
  const auto labels = generate_scene(s, 11);
  const auto copy = labels;
  const auto a = render_domain(labels, s.height, s.width, default_source_style(), 11);
  const auto b = render_domain(labels, s.height, s.width, default_target_style(), 11);
  EXPECT_EQ(labels, copy);
  const std::size_t HW = s.height * s.width;
  double dist2 = 0.0;
  for (std::size_t c = 0; c < 3; ++c) {
    double ma = 0.0, mb = 0.0;
    for (std::size_t p = 0; p < HW; ++p) {
      ma += a[c * HW + p];
      mb += b[c * HW + p];
    }
    dist2 += std::pow((ma - mb) / static_cast<double>(HW) / 255.0, 2);
  }
  EXPECT_GT(std::sqrt(dist2), 10.0 / 255.0);
}

TEST(RenderDomain, ExtremeTransformClamps) {
  SceneSpec s;
  const auto labels = generate_scene(s, 5);
  auto st = default_target_style();
  st.contrast = 40.0;
  st.noise = 500.0;
  const auto img = render_domain(labels, s.height, s.width, st, 5);
  std::size_t zeros = 0, full = 0;
  for (auto v : img) {
    zeros += v == 0;
    full += v == 255;
  }
  EXPECT_GT(zeros, 0u);
  EXPECT_GT(full, 0u);
}

TEST(RenderDomain, ClassCountMismatch) {
  std::vector<std::uint8_t> labels(16, 0);
  labels[3] = 4;
  auto st = flat_style();
  st.base_colors.resize(4);
  EXPECT_THROW(render_domain(labels, 4, 4, st, 0), ShapeError);
  EXPECT_THROW(render_domain(labels, 4, 5, flat_style(), 0), ShapeError);
}

TEST(SplitFile, EncodeDecodeRoundTrip) {
  SceneSpec s;
  s.height = s.width = 32;
  const auto d = generate_split(s, default_source_style(), Split::kSource, 3);
  const auto bytes = encode_split(d);
  EXPECT_EQ(bytes.size(), 18 + 3 * (4 * 32 * 32));
  const auto back = decode_split(bytes);
  EXPECT_EQ(back.images, d.images);
  EXPECT_EQ(back.labels, d.labels);
  EXPECT_THROW(decode_split(bytes.substr(0, bytes.size() - 1)), FormatError);
  EXPECT_THROW(decode_split("XXXX" + bytes.substr(4)), FormatError);
}

class BuiltDataset : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new fs::path(fresh_dir("full"));
    manifest_ = new nlohmann::ordered_json(
        build_dataset(SceneSpec{}, default_source_style(), default_target_style(), DatasetSizes{}, *dir_));
  }
  static void TearDownTestSuite() {
    fs::remove_all(*dir_);
    delete dir_;
    delete manifest_;
  }
  static fs::path* dir_;
  static nlohmann::ordered_json* manifest_;
};
fs::path* BuiltDataset::dir_ = nullptr;
nlohmann::ordered_json* BuiltDataset::manifest_ = nullptr;

TEST_F(BuiltDataset, ManifestMatchesRecount) {
  const std::size_t K = 5;
  std::vector<std::uint64_t> all(K, 0);
  std::uint64_t all_pixels = 0;
  for (Split s : kAllSplits) {
    std::uint64_t pixels = 0;
    const auto counts = recount_labels(*dir_ / split_file_name(s), K, pixels);
    const auto reported = (*manifest_)["measured_frequencies"][split_name(s)].get<std::vector<double>>();
    for (std::size_t k = 0; k < K; ++k) {
      EXPECT_NEAR(reported[k], static_cast<double>(counts[k]) / static_cast<double>(pixels), 1e-12);
      all[k] += counts[k];
    }
    all_pixels += pixels;
  }
  const auto reported = (*manifest_)["measured_frequencies"]["all"].get<std::vector<double>>();
  for (std::size_t k = 0; k < K; ++k) {
    EXPECT_NEAR(reported[k], static_cast<double>(all[k]) / static_cast<double>(all_pixels), 1e-12);
  }
  EXPECT_EQ((*manifest_)["num_samples"], 4500);
}

TEST_F(BuiltDataset, FrequenciesNearTargets) {
  const auto targets = (*manifest_)["frequency_targets"].get<std::vector<double>>();
  const auto measured = (*manifest_)["measured_frequencies"]["all"].get<std::vector<double>>();
  for (std::size_t k = 0; k < targets.size(); ++k) {
    EXPECT_LE(std::abs(measured[k] - targets[k]), 0.2 * targets[k]) << "class " << k;
  }
}

TEST_F(BuiltDataset, SourceAndTargetLayoutsAgree) {
  const auto src = (*manifest_)["measured_frequencies"]["source"].get<std::vector<double>>();
  const auto tgt = (*manifest_)["measured_frequencies"]["target-train"].get<std::vector<double>>();
  for (std::size_t k = 0; k < src.size(); ++k) {
    EXPECT_LE(std::abs(src[k] - tgt[k]), 0.1 * src[k]) << "class " << k;
  }
}

TEST_F(BuiltDataset, LoadBatchRoundTripAndPolicy) {
  const auto ds = Dataset::open(*dir_);
  const auto raw = decode_split(slurp(*dir_ / split_file_name(Split::kTargetVal)));
  const std::vector<std::size_t> idx = {4, 0, 499};
  const auto batch = ds.load_batch(Split::kTargetVal, idx);
  EXPECT_EQ(batch.domain, Domain::kTarget);
  ASSERT_TRUE(batch.labels.has_value());
  const std::size_t img = 3 * 64 * 64;
  for (std::size_t n = 0; n < idx.size(); ++n) {
    const auto ref = raw.image(idx[n]);
    for (std::size_t j = 0; j < img; ++j) {
      const float v = batch.images[n * img + j];
      ASSERT_GE(v, 0.0f);
      ASSERT_LE(v, 1.0f);
      ASSERT_EQ(static_cast<std::uint8_t>(std::lround(v * 255.0f)), ref[j]);
    }
  }

  const auto unlabeled = ds.load_batch(Split::kTargetTrain, idx);
  EXPECT_FALSE(unlabeled.labels.has_value());
  EXPECT_THROW(ds.load_batch(Split::kTargetTrain, idx, LabelAccess::kRequire), PolicyError);
  EXPECT_NO_THROW(ds.load_batch(Split::kSource, idx, LabelAccess::kRequire));
  const std::vector<std::size_t> out = {2000};
  EXPECT_THROW(ds.load_batch(Split::kSource, out), std::out_of_range);
}

TEST_F(BuiltDataset, RepeatedIndexGivesIdenticalSamples) {
  const auto ds = Dataset::open(*dir_);
  const std::vector<std::size_t> idx = {0, 0};
  const auto b = ds.load_batch(Split::kSource, idx);
  const std::size_t img = 3 * 64 * 64, lab = 64 * 64;
  for (std::size_t j = 0; j < img; ++j) ASSERT_EQ(b.images[j], b.images[img + j]);
  for (std::size_t j = 0; j < lab; ++j) ASSERT_EQ((*b.labels)[j], (*b.labels)[lab + j]);
}

TEST(BuildDataset, EmptyAndRebuildDeterminism) {
  const auto d0 = fresh_dir("empty");
  const auto m = build_dataset(SceneSpec{}, default_source_style(), default_target_style(), DatasetSizes{0, 0, 0}, d0);
  EXPECT_EQ(m["num_samples"], 0);
  const auto ds = Dataset::open(d0);
  for (Split s : kAllSplits) EXPECT_EQ(ds.split(s).count, 0u);
  fs::remove_all(d0);

  SceneSpec spec;
  spec.height = spec.width = 32;
  const DatasetSizes sizes{6, 5, 4};
  const auto a = fresh_dir("a"), b = fresh_dir("b");
  build_dataset(spec, default_source_style(), default_target_style(), sizes, a);
  build_dataset(spec, default_source_style(), default_target_style(), sizes, b);
  for (const auto& f : {"source.bin", "target-train.bin", "target-val.bin", "manifest.json"}) {
    EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  }
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(DownsampleLabels, MajorityTiesAndIgnore) {
  // One 4x4 map, factor 2 -> 2x2 cells.
  const std::vector<std::uint8_t> labels = {
      1, 1, 2, 3,  //
      1, 0, 3, 2,  //
      255, 255, 4, 255,  //
      255, 255, 255, 255,
  };
  const auto out = downsample_labels(labels, 1, 4, 4, 2, 5);
  EXPECT_EQ(out, (std::vector<std::uint8_t>{1, 2, 255, 4}));
  EXPECT_THROW(downsample_labels(labels, 1, 4, 4, 3, 5), ShapeError);
  EXPECT_THROW(downsample_labels(labels, 2, 4, 4, 2, 5), ShapeError);
  EXPECT_EQ(downsample_labels(labels, 1, 4, 4, 1, 5), labels);
}

TEST(CropBatch, MatchesSourceWindow) {
  DomainBatch in;
  std::vector<float> px(2 * 3 * 6 * 5);
  std::iota(px.begin(), px.end(), 0.0f);
  in.images = Tensor<float>(Shape{2, 3, 6, 5}, px);
  std::vector<std::uint8_t> lab(2 * 6 * 5);
  for (std::size_t i = 0; i < lab.size(); ++i) lab[i] = static_cast<std::uint8_t>(i % 5);
  in.labels = lab;
  EXPECT_THROW(crop_batch(in, 0, 0, 6), ShapeError);
  const auto out = crop_batch(in, 2, 1, 3);
  ASSERT_EQ(out.images.shape(), (Shape{2, 3, 3, 3}));
  for (std::size_t p = 0; p < 6; ++p)
    for (std::size_t y = 0; y < 3; ++y)
      for (std::size_t x = 0; x < 3; ++x) EXPECT_EQ(out.images[(p * 3 + y) * 3 + x], px[(p * 6 + y + 2) * 5 + x + 1]);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t y = 0; y < 3; ++y)
      for (std::size_t x = 0; x < 3; ++x) EXPECT_EQ((*out.labels)[(b * 3 + y) * 3 + x], lab[(b * 6 + y + 2) * 5 + x + 1]);
}

TEST(Splits, NamesRoundTrip) {
  for (Split s : kAllSplits) EXPECT_EQ(parse_split(split_name(s)), s);
  EXPECT_THROW(parse_split("train"), ConfigError);
  EXPECT_FALSE(labels_exposed(Split::kTargetTrain));
}
