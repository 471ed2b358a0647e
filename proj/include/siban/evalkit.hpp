#pragma once

// Segmentation metrics, A-distance, curve export and feature dumps.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "siban/autodiff.hpp"
#include "siban/losses.hpp"
#include "siban/nn.hpp"
#include "siban/sibanet.hpp"
#include "siban/synthdomains.hpp"

namespace siban {

// Rows are ground truth, columns are predictions.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t num_classes) : k_(num_classes), counts_(num_classes * num_classes, 0) {}

  std::size_t num_classes() const { return k_; }
  std::uint64_t at(std::size_t truth, std::size_t pred) const { return counts_.at(truth * k_ + pred); }
  std::uint64_t total() const { return std::accumulate(counts_.begin(), counts_.end(), std::uint64_t{0}); }

  void accumulate(std::span<const std::uint8_t> predictions, std::span<const std::uint8_t> labels) {
    if (predictions.size() != labels.size()) throw ShapeError("confusion_accumulate: size mismatch");
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] == kIgnoreLabel) continue;
      if (labels[i] >= k_ || predictions[i] >= k_) {
        throw std::invalid_argument("class id " + std::to_string(std::max(labels[i], predictions[i])) +
                                    " outside [0," + std::to_string(k_) + ")");
      }
    }
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] != kIgnoreLabel) ++counts_[labels[i] * k_ + predictions[i]];
    }
  }

  void merge(const ConfusionMatrix& other) {
    if (other.k_ != k_) throw ShapeError("cannot merge confusion matrices of different size");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  }

 private:
  std::size_t k_;
  std::vector<std::uint64_t> counts_;
};

struct IouTable {
  std::vector<std::optional<double>> per_class;  // nullopt: empty union, excluded from mIoU
  double miou = 0.0;
};

// IoU_k = cm[k][k] / (row_k + col_k - cm[k][k]); mIoU over classes with a
// non-empty union.
inline IouTable iou_table(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw std::invalid_argument("iou_table: empty confusion matrix");
  const std::size_t K = cm.num_classes();
  IouTable out;
  double acc = 0.0;
  std::size_t included = 0;
  for (std::size_t k = 0; k < K; ++k) {
    std::uint64_t row = 0, col = 0;
    for (std::size_t j = 0; j < K; ++j) {
      row += cm.at(k, j);
      col += cm.at(j, k);
    }
    const std::uint64_t inter = cm.at(k, k);
    const std::uint64_t uni = row + col - inter;
    if (uni == 0) {
      out.per_class.push_back(std::nullopt);
      continue;
    }
    const double iou = static_cast<double>(inter) / static_cast<double>(uni);
    out.per_class.push_back(iou);
    acc += iou;
    ++included;
  }
  out.miou = acc / static_cast<double>(included);
  return out;
}

inline double a_distance_from_error(double epsilon) { return 2.0 * (1.0 - 2.0 * epsilon); }

struct MetricsRecord {
  IouTable iou;
  std::optional<double> gain;  // mIoU points over a reference run
  std::optional<double> epsilon;
  std::optional<double> d_a;
  std::uint64_t checkpoint_iter = 0;
};

// ---------------------------------------------------------------------------
// Inference helpers

inline constexpr std::size_t kEvalChunk = 50;

// Argmax predictions at input resolution (nearest-neighbour upsampled from
// the latent grid), one [H, W] map per requested image.
inline std::vector<std::uint8_t> predict(const SibanModel<float>& model, Mode mode, const Dataset& data, Split split,
                                         std::span<const std::size_t> indices) {
  const SplitData& d = data.split(split);
  const std::size_t H = d.height, W = d.width, f = model.config.downsample(), K = model.config.num_classes;
  std::vector<std::uint8_t> out(indices.size() * H * W);
  for (std::size_t start = 0; start < indices.size(); start += kEvalChunk) {
    const auto chunk = indices.subspan(start, std::min(kEvalChunk, indices.size() - start));
    auto batch = data.load_batch(split, chunk);
    Tape<float> tape(Tape<float>::Mode::kNoGrad);
    auto enc = encode(tape, model, mode, batch.images, nullptr);
    auto logits = classify(tape, model, enc.z_sig);
    const std::size_t h = logits.dim(2), w = logits.dim(3);
    const auto& ld = logits.data();
    for (std::size_t b = 0; b < chunk.size(); ++b) {
      std::vector<std::uint8_t> coarse(h * w);
      for (std::size_t p = 0; p < h * w; ++p) {
        std::size_t best = 0;
        for (std::size_t k = 1; k < K; ++k) {
          if (ld[(b * K + k) * h * w + p] > ld[(b * K + best) * h * w + p]) best = k;
        }
        coarse[p] = static_cast<std::uint8_t>(best);
      }
      std::uint8_t* dst = out.data() + (start + b) * H * W;
      for (std::size_t y = 0; y < H; ++y) {
        for (std::size_t x = 0; x < W; ++x) dst[y * W + x] = coarse[(y / f) * w + x / f];
      }
    }
  }
  return out;
}

inline std::vector<std::size_t> all_indices(std::size_t n) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return idx;
}

struct SplitEvaluation {
  ConfusionMatrix confusion;
  std::vector<std::uint8_t> predictions;  // count x [H, W]
};

inline SplitEvaluation evaluate_split(const SibanModel<float>& model, Mode mode, const Dataset& data, Split split) {
  if (!labels_exposed(split)) throw PolicyError("split " + split_name(split) + " cannot be evaluated: labels are hidden");
  const SplitData& d = data.split(split);
  if (!d.has_labels) throw PolicyError("split " + split_name(split) + " has no labels");
  const auto idx = all_indices(d.count);
  SplitEvaluation ev{ConfusionMatrix(model.config.num_classes), predict(model, mode, data, split, idx)};
  ev.confusion.accumulate(ev.predictions, d.labels);
  return ev;
}

// Latent features z_sig [N, C, h, w] for the given images. With `noise` the
// bottleneck is sampled, otherwise its mean is used.
inline Tensor<float> compute_features(const SibanModel<float>& model, Mode mode, const Dataset& data, Split split,
                                      std::span<const std::size_t> indices, RngStream* noise) {
  std::vector<float> values;
  Shape shape;
  for (std::size_t start = 0; start < indices.size(); start += kEvalChunk) {
    const auto chunk = indices.subspan(start, std::min(kEvalChunk, indices.size() - start));
    auto batch = data.load_batch(split, chunk);
    Tape<float> tape(Tape<float>::Mode::kNoGrad);
    auto enc = encode(tape, model, mode, batch.images, noise);
    shape = enc.z_sig.shape();
    values.insert(values.end(), enc.z_sig.data().begin(), enc.z_sig.data().end());
  }
  if (values.empty()) throw std::invalid_argument("compute_features: no images");
  shape[0] = indices.size();
  return Tensor<float>(shape, std::move(values));
}

namespace detail {
inline Tensor<float> slice_batch(const Tensor<float>& x, std::span<const std::size_t> rows) {
  const std::size_t per = x.size() / x.dim(0);
  std::vector<float> out(rows.size() * per);
  for (std::size_t n = 0; n < rows.size(); ++n) {
    std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(rows[n] * per), per,
                out.begin() + static_cast<std::ptrdiff_t>(n * per));
  }
  Shape s = x.shape();
  s[0] = rows.size();
  return Tensor<float>(s, std::move(out));
}

// Balanced error of patch logits at threshold 0.5 (logit 0): source patches
// should score > 0, target patches < 0; exact ties count as half an error.
inline double balanced_error(const Tensor<float>& logits_source, const Tensor<float>& logits_target) {
  auto rate = [](const Tensor<float>& l, bool positive) {
    double err = 0.0;
    for (float v : l.data()) {
      if (v == 0.0f) {
        err += 0.5;
      } else if ((v > 0.0f) != positive) {
        err += 1.0;
      }
    }
    return err / static_cast<double>(l.size());
  };
  return 0.5 * (rate(logits_source, true) + rate(logits_target, false));
}
}  // namespace detail

struct ADistanceOptions {
  std::size_t images_per_domain = 200;
  double holdout_fraction = 0.5;
  std::size_t probe_iters = 500;
  std::size_t probe_batch = 8;
  double probe_lr = 1e-3;
  std::uint64_t seed = 0;
};

struct ADistanceResult {
  double epsilon = 0.5;
  double d_a = 0.0;
  bool probe = false;
};

// Splits feature rows [0, n) into a training prefix and a held-out suffix.
inline std::pair<std::size_t, std::size_t> holdout_split(std::size_t n, double holdout_fraction) {
  if (!(holdout_fraction > 0.0 && holdout_fraction < 1.0)) throw ConfigError("holdout_fraction must be in (0, 1)");
  const auto test = static_cast<std::size_t>(std::llround(static_cast<double>(n) * holdout_fraction));
  if (test == 0 || test >= n) throw std::invalid_argument("a_distance: too few feature rows for the holdout split");
  return {n - test, test};
}

// Held-out error of a given discriminator on balanced source/target features.
inline ADistanceResult a_distance_with_discriminator(const ModelConfig& cfg, const ParamStore<float>& disc,
                                                     const Tensor<float>& source, const Tensor<float>& target,
                                                     double holdout_fraction) {
  if (source.dim(0) != target.dim(0)) throw ShapeError("a_distance needs balanced feature sets");
  const auto [train, test] = holdout_split(source.dim(0), holdout_fraction);
  const auto rows = all_indices(source.dim(0));
  const auto held = std::span<const std::size_t>(rows).subspan(train, test);
  Tape<float> tape(Tape<float>::Mode::kNoGrad);
  const auto ls = discriminate(tape, cfg, disc, detail::slice_batch(source, held));
  const auto lt = discriminate(tape, cfg, disc, detail::slice_batch(target, held));
  ADistanceResult r;
  r.epsilon = detail::balanced_error(ls, lt);
  r.d_a = a_distance_from_error(r.epsilon);
  return r;
}

// Trains a fresh discriminator-shaped probe on the training portion of the
// frozen features and measures its held-out error. The probe's output layer
// starts at zero and every row index is drawn once per domain, so swapping
// the two feature sets leaves |d_A| exactly unchanged.
inline ADistanceResult a_distance_with_probe(const ModelConfig& cfg, const Tensor<float>& source,
                                             const Tensor<float>& target, const ADistanceOptions& opt) {
  if (source.dim(0) != target.dim(0)) throw ShapeError("a_distance needs balanced feature sets");
  const auto [train, test] = holdout_split(source.dim(0), opt.holdout_fraction);
  RngStream rng(opt.seed);
  RngStream init = rng.fork(1);
  RngStream draws = rng.fork(2);
  ParamStore<float> probe = make_discriminator_params<float>(cfg, init, true);
  AdamOptions adam;
  std::vector<std::size_t> rows(opt.probe_batch);
  for (std::size_t it = 0; it < opt.probe_iters; ++it) {
    for (auto& r : rows) r = draws.next_below(train);
    Tape<float> tape;
    auto ls = discriminate(tape, cfg, probe, detail::slice_batch(source, rows));
    auto lt = discriminate(tape, cfg, probe, detail::slice_batch(target, rows));
    auto loss = discriminator_loss(tape, ls, lt);
    probe.zero_grad();
    tape.backward(loss);
    adam_step(probe, opt.probe_lr, adam);
  }
  auto r = a_distance_with_discriminator(cfg, probe, source, target, opt.holdout_fraction);
  r.probe = true;
  return r;
}

// Source rows come from the tail of the source split, target rows from the
// head of target-val. Runs with a trained D use it; source-only runs train
// a probe.
inline ADistanceResult a_distance(const SibanModel<float>& model, Mode mode, const Dataset& data,
                                  const ADistanceOptions& opt) {
  const std::size_t ns = data.split(Split::kSource).count, nt = data.split(Split::kTargetVal).count;
  const std::size_t n = std::min({opt.images_per_domain, ns, nt});
  if (n < 2) throw std::invalid_argument("a_distance: empty feature sets");
  std::vector<std::size_t> src_idx(n), tgt_idx(n);
  for (std::size_t i = 0; i < n; ++i) {
    src_idx[i] = ns - n + i;
    tgt_idx[i] = i;
  }
  RngStream noise = RngStream(opt.seed).fork(3);
  RngStream* sampler = uses_bottleneck(mode) ? &noise : nullptr;
  const auto fs = compute_features(model, mode, data, Split::kSource, src_idx, sampler);
  const auto ft = compute_features(model, mode, data, Split::kTargetVal, tgt_idx, sampler);
  if (uses_discriminator(mode)) {
    return a_distance_with_discriminator(model.config, model.discriminator, fs, ft, opt.holdout_fraction);
  }
  return a_distance_with_probe(model.config, fs, ft, opt);
}

// ---------------------------------------------------------------------------
// Files

inline constexpr const char* kLogKeys[] = {"iter", "lr_g",  "lr_d", "loss_seg", "loss_adv_g", "loss_d",
                                           "kl_s", "kl_t",  "ic_s", "ic_t",     "beta_s",     "beta_t"};

inline std::string format_sig9(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

// steps.jsonl -> CSV with one row per record, 9 significant digits.
inline std::filesystem::path export_curves(const std::filesystem::path& run_dir,
                                           std::optional<std::filesystem::path> out_path = std::nullopt) {
  const auto log_path = run_dir / "steps.jsonl";
  std::ifstream in(log_path);
  if (!in) throw IoError("cannot open " + log_path.string());
  std::ostringstream csv;
  for (std::size_t i = 0; i < std::size(kLogKeys); ++i) csv << (i ? "," : "") << kLogKeys[i];
  csv << '\n';
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError(log_path.string() + ":" + std::to_string(line_no) + ": malformed JSON");
    }
    if (!rec.is_object()) throw FormatError(log_path.string() + ":" + std::to_string(line_no) + ": not an object");
    for (std::size_t i = 0; i < std::size(kLogKeys); ++i) {
      const auto it = rec.find(kLogKeys[i]);
      if (it == rec.end() || !it->is_number()) {
        throw FormatError(log_path.string() + ":" + std::to_string(line_no) + ": missing or non-numeric '" +
                          kLogKeys[i] + "'");
      }
      csv << (i ? "," : "");
      if (i == 0) {
        csv << it->get<std::uint64_t>();
      } else {
        csv << format_sig9(it->get<double>());
      }
    }
    csv << '\n';
  }
  const auto path = out_path.value_or(run_dir / "curves.csv");
  detail::write_file(path, csv.str());
  return path;
}

// Uniformly subsampled per-pixel latent vectors with domain and ground-truth
// class columns. Cells whose majority label is ignored are skipped.
inline std::filesystem::path dump_features(const SibanModel<float>& model, Mode mode, const Dataset& data, Split split,
                                           std::size_t max_pixels, std::uint64_t seed,
                                           const std::filesystem::path& out_path) {
  const SplitData& d = data.split(split);
  if (!labels_exposed(split) || !d.has_labels) {
    throw PolicyError("dump_features needs ground-truth classes; split " + split_name(split) + " has none exposed");
  }
  const std::size_t C = model.config.latent_channels, f = model.config.downsample();
  std::ostringstream csv;
  csv << "domain,class";
  for (std::size_t c = 0; c < C; ++c) csv << ",f" << c;
  csv << '\n';
  if (max_pixels > 0 && d.count > 0) {
    const auto idx = all_indices(d.count);
    const auto feats = compute_features(model, mode, data, split, idx, nullptr);
    const auto classes = downsample_labels(d.labels, d.count, d.height, d.width, f, model.config.num_classes);
    const std::size_t plane = feats.dim(2) * feats.dim(3);
    std::vector<std::size_t> candidates;
    for (std::size_t i = 0; i < classes.size(); ++i) {
      if (classes[i] != kIgnoreLabel) candidates.push_back(i);
    }
    const std::size_t take = std::min(max_pixels, candidates.size());
    RngStream rng(seed);
    for (std::size_t i = 0; i < take; ++i) {
      std::swap(candidates[i], candidates[i + rng.next_below(candidates.size() - i)]);
    }
    candidates.resize(take);
    std::sort(candidates.begin(), candidates.end());
    const std::string domain = is_target(split) ? "target" : "source";
    for (std::size_t cell : candidates) {
      const std::size_t n = cell / plane, p = cell % plane;
      csv << domain << ',' << static_cast<int>(classes[cell]);
      for (std::size_t c = 0; c < C; ++c) csv << ',' << format_sig9(feats.data()[(n * C + c) * plane + p]);
      csv << '\n';
    }
  }
  detail::write_file(out_path, csv.str());
  return out_path;
}

inline nlohmann::ordered_json metrics_to_json(const MetricsRecord& m, const std::vector<std::string>& class_names) {
  nlohmann::ordered_json j;
  j["checkpoint_iter"] = m.checkpoint_iter;
  nlohmann::ordered_json per_class = nlohmann::ordered_json::object();
  for (std::size_t k = 0; k < m.iou.per_class.size(); ++k) {
    const std::string name = k < class_names.size() ? class_names[k] : std::to_string(k);
    if (m.iou.per_class[k]) {
      per_class[name] = *m.iou.per_class[k];
    } else {
      per_class[name] = nullptr;
    }
  }
  j["per_class_iou"] = per_class;
  j["miou"] = m.iou.miou;
  if (m.gain) j["gain"] = *m.gain;
  j["epsilon"] = m.epsilon ? nlohmann::ordered_json(*m.epsilon) : nlohmann::ordered_json(nullptr);
  j["d_A"] = m.d_a ? nlohmann::ordered_json(*m.d_a) : nlohmann::ordered_json(nullptr);
  return j;
}

}  // namespace siban
