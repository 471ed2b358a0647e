#pragma once

// Alternating generator / discriminator / dual optimisation, run logging and
// checkpoints.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <cstring>
#include <type_traits>
#include <vector>

#include <nlohmann/json.hpp>

#include "siban/autodiff.hpp"
#include "siban/evalkit.hpp"
#include "siban/losses.hpp"
#include "siban/nn.hpp"
#include "siban/sibanet.hpp"
#include "siban/synthdomains.hpp"

namespace siban {

struct TrainConfig {
  Mode mode = Mode::kSiban;
  double lambda_adv = 1e-2;  // 1e-3 leaves D winning outright at this scale
  double info_capacity = 10.0;  // I_c, nats per pixel
  double alpha = 1e-4;
  double beta_init = 1e-3;
  double lr_g = 1e-2;  // 2.5e-4 does not move a from-scratch network in 5000 iters
  double lr_d = 1e-4;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.99;
  double power = 0.9;
  std::uint64_t max_iter = 5000;
  std::size_t batch_size = 4;
  std::size_t crop_size = 64;
  std::uint64_t seed = 0;
  std::uint64_t eval_interval = 1000;  // 0 disables interval checkpoints

  bool operator==(const TrainConfig&) const = default;
};

inline void validate(const TrainConfig& c) {
  auto non_negative = [](double v, const char* name) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError(std::string(name) + " must be a finite value >= 0");
  };
  non_negative(c.lambda_adv, "lambda_adv");
  non_negative(c.info_capacity, "I_c");
  non_negative(c.alpha, "alpha");
  non_negative(c.beta_init, "beta_init");
  non_negative(c.weight_decay, "weight_decay");
  non_negative(c.power, "power");
  if (!(c.lr_g > 0.0) || !(c.lr_d > 0.0)) throw ConfigError("learning rates must be positive");
  if (!(c.momentum >= 0.0 && c.momentum < 1.0)) throw ConfigError("momentum must be in [0, 1)");
  if (!(c.adam_beta1 >= 0.0 && c.adam_beta1 < 1.0) || !(c.adam_beta2 >= 0.0 && c.adam_beta2 < 1.0)) {
    throw ConfigError("adam betas must be in [0, 1)");
  }
  if (c.batch_size == 0) throw ConfigError("batch_size must be positive");
  if (c.crop_size == 0) throw ConfigError("crop_size must be positive");
}

// ---------------------------------------------------------------------------
// JSON mapping. Readers reject unknown keys.

namespace detail {
template <typename J>
void reject_unknown(const J& j, std::initializer_list<const char*> known, const std::string& section) {
  if (!j.is_object()) throw ConfigError("section '" + section + "' must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : known) ok = ok || it.key() == k;
    if (!ok) throw ConfigError("unknown key '" + section + "." + it.key() + "'");
  }
}

template <typename V, typename J>
void read_key(const J& j, const char* key, V& out, const std::string& section) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).template get<V>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("bad value for '" + section + "." + key + "': " + j.at(key).dump());
  }
  if constexpr (std::is_unsigned_v<V>) {
    if (j.at(key).is_number_integer() && j.at(key).template get<std::int64_t>() < 0) {
      throw ConfigError("'" + section + "." + key + "' must be non-negative");
    }
  }
}
}  // namespace detail

inline nlohmann::ordered_json to_json(const TrainConfig& c) {
  return {{"mode", mode_name(c.mode)},     {"lambda_adv", c.lambda_adv},   {"I_c", c.info_capacity},
          {"alpha", c.alpha},              {"beta_init", c.beta_init},     {"lr_g", c.lr_g},
          {"lr_d", c.lr_d},                {"momentum", c.momentum},       {"weight_decay", c.weight_decay},
          {"adam_beta1", c.adam_beta1},    {"adam_beta2", c.adam_beta2},   {"power", c.power},
          {"max_iter", c.max_iter},        {"batch_size", c.batch_size},   {"crop_size", c.crop_size},
          {"seed", c.seed},                {"eval_interval", c.eval_interval}};
}

template <typename J>
void update_from_json(TrainConfig& c, const J& j) {
  const std::string s = "train";
  detail::reject_unknown(j, {"mode", "lambda_adv", "I_c", "alpha", "beta_init", "lr_g", "lr_d", "momentum",
                             "weight_decay", "adam_beta1", "adam_beta2", "power", "max_iter", "batch_size",
                             "crop_size", "seed", "eval_interval"},
                         s);
  if (j.contains("mode")) c.mode = parse_mode(j.at("mode").template get<std::string>());
  detail::read_key(j, "lambda_adv", c.lambda_adv, s);
  detail::read_key(j, "I_c", c.info_capacity, s);
  detail::read_key(j, "alpha", c.alpha, s);
  detail::read_key(j, "beta_init", c.beta_init, s);
  detail::read_key(j, "lr_g", c.lr_g, s);
  detail::read_key(j, "lr_d", c.lr_d, s);
  detail::read_key(j, "momentum", c.momentum, s);
  detail::read_key(j, "weight_decay", c.weight_decay, s);
  detail::read_key(j, "adam_beta1", c.adam_beta1, s);
  detail::read_key(j, "adam_beta2", c.adam_beta2, s);
  detail::read_key(j, "power", c.power, s);
  detail::read_key(j, "max_iter", c.max_iter, s);
  detail::read_key(j, "batch_size", c.batch_size, s);
  detail::read_key(j, "crop_size", c.crop_size, s);
  detail::read_key(j, "seed", c.seed, s);
  detail::read_key(j, "eval_interval", c.eval_interval, s);
}

inline nlohmann::ordered_json to_json(const ConvSpec& l) {
  return {{"channels", l.channels}, {"kernel", l.kernel}, {"stride", l.stride}, {"padding", l.padding}};
}

inline nlohmann::ordered_json to_json(const ModelConfig& m) {
  nlohmann::ordered_json trunk = nlohmann::ordered_json::array(), disc = nlohmann::ordered_json::array();
  for (const auto& l : m.trunk) trunk.push_back(to_json(l));
  for (const auto& l : m.discriminator) disc.push_back(to_json(l));
  return {{"in_channels", m.in_channels}, {"trunk", trunk},
          {"latent_channels", m.latent_channels}, {"num_classes", m.num_classes},
          {"discriminator", disc},        {"leaky_slope", m.leaky_slope},
          {"logvar_min", m.logvar_min},   {"logvar_max", m.logvar_max}};
}

template <typename J>
void update_from_json(ModelConfig& m, const J& j) {
  const std::string s = "model";
  detail::reject_unknown(j, {"in_channels", "trunk", "latent_channels", "num_classes", "discriminator", "leaky_slope",
                             "logvar_min", "logvar_max"},
                         s);
  auto read_layers = [&](const char* key, std::vector<ConvSpec>& out) {
    if (!j.contains(key)) return;
    if (!j.at(key).is_array()) throw ConfigError("'" + s + "." + key + "' must be an array");
    out.clear();
    for (const auto& e : j.at(key)) {
      ConvSpec l;
      const std::string sub = s + "." + key;
      detail::reject_unknown(e, {"channels", "kernel", "stride", "padding"}, sub);
      detail::read_key(e, "channels", l.channels, sub);
      detail::read_key(e, "kernel", l.kernel, sub);
      detail::read_key(e, "stride", l.stride, sub);
      detail::read_key(e, "padding", l.padding, sub);
      if (l.channels == 0 || l.kernel == 0 || l.stride == 0) throw ConfigError("zero-sized layer in " + sub);
      out.push_back(l);
    }
  };
  detail::read_key(j, "in_channels", m.in_channels, s);
  read_layers("trunk", m.trunk);
  detail::read_key(j, "latent_channels", m.latent_channels, s);
  detail::read_key(j, "num_classes", m.num_classes, s);
  read_layers("discriminator", m.discriminator);
  detail::read_key(j, "leaky_slope", m.leaky_slope, s);
  detail::read_key(j, "logvar_min", m.logvar_min, s);
  detail::read_key(j, "logvar_max", m.logvar_max, s);
  if (!(m.logvar_min < m.logvar_max)) throw ConfigError("model.logvar_min must be below logvar_max");
}

// ---------------------------------------------------------------------------
// State and steps

struct TrainState {
  SibanModel<float> model;
  double beta_s = 0.0;
  double beta_t = 0.0;
  std::uint64_t iter = 0;
  RngStream noise_rng;  // reparameterisation noise
  RngStream data_rng;   // batch indices and crops
};

inline bool uses_dual(Mode m) { return uses_bottleneck(m); }

inline TrainState init_state(const ModelConfig& model_config, const TrainConfig& config) {
  validate(config);
  const RngStream root(config.seed);
  RngStream init = root.fork(0);
  TrainState st{make_model<float>(model_config, init), 0.0, 0.0, 0, root.fork(1), root.fork(2)};
  if (uses_dual(config.mode)) st.beta_s = st.beta_t = config.beta_init;
  return st;
}

// max(0, beta + alpha * l_ic).
inline double update_dual(double beta, double l_ic, double alpha) {
  if (alpha < 0.0) throw std::invalid_argument("dual step alpha must be non-negative");
  if (beta < 0.0) throw std::invalid_argument("Lagrange multiplier must be non-negative");
  return std::max(0.0, beta + alpha * l_ic);
}

namespace detail {
inline double scalar_value(const Tensor<float>& t, const char* what) {
  const double v = t.item();
  if (!std::isfinite(v)) throw NumericError(std::string("non-finite ") + what + " (" + std::to_string(v) + ")");
  return v;
}

// Per-pixel KL summed over channels, averaged over batch and pixels.
inline double mean_pixel_kl(const Tensor<float>& kl_map) {
  double s = 0.0;
  for (float v : kl_map.data()) s += v;
  return s / static_cast<double>(kl_map.dim(0) * kl_map.dim(2) * kl_map.dim(3));
}
}  // namespace detail

// One iteration: generator SGD step, discriminator Adam step on freshly
// detached features, then the dual updates from the generator step's
// constraint values. Uses the poly schedule at state.iter.
inline LossBundle train_step(TrainState& st, const DomainBatch& source, const DomainBatch& target,
                             const TrainConfig& cfg) {
  if (source.domain != Domain::kSource || !source.labels) {
    throw std::invalid_argument("train_step: source batch must come from the labelled source domain");
  }
  const bool adversarial = uses_discriminator(cfg.mode);
  const bool bottleneck = uses_bottleneck(cfg.mode);
  if (adversarial && target.domain != Domain::kTarget) {
    throw std::invalid_argument("train_step: target batch must come from the target domain");
  }
  if (adversarial && target.labels) throw PolicyError("train_step: target labels must not reach training");

  auto& model = st.model;
  const auto& mc = model.config;
  const double lr_g = poly_lr({cfg.lr_g, std::max<std::uint64_t>(cfg.max_iter, 1), cfg.power}, st.iter);
  const double lr_d = poly_lr({cfg.lr_d, std::max<std::uint64_t>(cfg.max_iter, 1), cfg.power}, st.iter);
  LossBundle out;
  RngStream* noise = bottleneck ? &st.noise_rng : nullptr;

  // (1) generator step
  {
    Tape<float> tape;
    const auto enc_s = encode(tape, model, cfg.mode, source.images, noise);
    const auto logits = classify(tape, model, enc_s.z_sig);
    const auto labels = downsample_labels(*source.labels, source.images.dim(0), source.images.dim(2),
                                          source.images.dim(3), mc.downsample(), mc.num_classes);
    const auto seg = segmentation_loss(tape, logits, labels);
    out.seg = detail::scalar_value(seg, "segmentation loss");

    std::optional<Tensor<float>> adv, ic_s, ic_t;
    if (adversarial) {
      const auto enc_t = encode(tape, model, cfg.mode, target.images, noise);
      adv = generator_adversarial_loss(tape, discriminate(tape, model, enc_t.z_sig));
      out.adv_g = detail::scalar_value(*adv, "adversarial loss");
      if (bottleneck) {
        const auto kl_s = gaussian_kl_per_channel(tape, enc_s.latent);
        const auto kl_t = gaussian_kl_per_channel(tape, enc_t.latent);
        out.kl_source_mean = detail::mean_pixel_kl(kl_s);
        out.kl_target_mean = detail::mean_pixel_kl(kl_t);
        ic_s = information_constraint_loss(tape, kl_s, enc_s.significance, cfg.info_capacity);
        ic_t = information_constraint_loss(tape, kl_t, enc_t.significance, cfg.info_capacity);
        out.ic_source = detail::scalar_value(*ic_s, "source information constraint");
        out.ic_target = detail::scalar_value(*ic_t, "target information constraint");
      }
    }
    const double lambda = adversarial ? cfg.lambda_adv : 0.0;
    const auto total = overall_generator_loss(tape, seg, adv, ic_s, ic_t, lambda, st.beta_s, st.beta_t);
    detail::scalar_value(total, "generator loss");
    model.generator.zero_grad();
    tape.backward(total);
    sgd_momentum_step(model.generator, lr_g, SgdOptions{cfg.momentum, cfg.weight_decay});
    model.discriminator.clear_grad();
  }

  // (2) discriminator step
  if (adversarial) {
    Tensor<float> zs, zt;
    {
      Tape<float> frozen(Tape<float>::Mode::kNoGrad);
      zs = encode(frozen, model, cfg.mode, source.images, noise).z_sig;
      zt = encode(frozen, model, cfg.mode, target.images, noise).z_sig;
    }
    Tape<float> tape;
    const auto loss = discriminator_loss(tape, discriminate(tape, model, zs), discriminate(tape, model, zt));
    out.d_loss = detail::scalar_value(loss, "discriminator loss");
    model.discriminator.zero_grad();
    tape.backward(loss);
    adam_step(model.discriminator, lr_d, AdamOptions{cfg.adam_beta1, cfg.adam_beta2, 1e-8, cfg.weight_decay});
  }

  // (3) dual step
  if (uses_dual(cfg.mode)) {
    st.beta_s = update_dual(st.beta_s, out.ic_source, cfg.alpha);
    st.beta_t = update_dual(st.beta_t, out.ic_target, cfg.alpha);
  }
  if (!(st.beta_s >= 0.0 && st.beta_t >= 0.0)) throw std::logic_error("Lagrange multiplier left the feasible set");
  ++st.iter;
  return out;
}

// Draws `batch_size` random images (with replacement) and a random square
// crop when crop_size is smaller than the images.
inline DomainBatch sample_batch(const Dataset& data, Split split, const TrainConfig& cfg, RngStream& rng) {
  const SplitData& d = data.split(split);
  if (d.count == 0) throw std::invalid_argument("split " + split_name(split) + " is empty");
  if (cfg.crop_size > d.height || cfg.crop_size > d.width) {
    throw ConfigError("crop_size " + std::to_string(cfg.crop_size) + " exceeds image size");
  }
  std::vector<std::size_t> idx(cfg.batch_size);
  for (auto& i : idx) i = rng.next_below(d.count);
  auto batch = data.load_batch(split, idx);
  if (cfg.crop_size == d.height && cfg.crop_size == d.width) return batch;
  const std::size_t y0 = rng.next_below(d.height - cfg.crop_size + 1);
  const std::size_t x0 = rng.next_below(d.width - cfg.crop_size + 1);
  return crop_batch(batch, y0, x0, cfg.crop_size);
}

// ---------------------------------------------------------------------------
// Checkpoints: "SIBC", u32 version, u64 header length, JSON header, then
// little-endian float32 payloads in directory order.

inline constexpr char kCheckpointMagic[4] = {'S', 'I', 'B', 'C'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {
template <typename V>
struct TensorSlot {
  std::string name;
  Shape shape;
  V* data;
};

template <typename S, typename V = std::conditional_t<std::is_const_v<S>, const std::vector<float>,
                                                      std::vector<float>>>
std::vector<TensorSlot<V>> checkpoint_slots(S& st) {
  auto values = [](auto& t) -> V& {
    if constexpr (std::is_const_v<V>) {
      return t.data();
    } else {
      return t.mutable_data();
    }
  };
  std::vector<TensorSlot<V>> slots;
  for (auto& e : st.model.generator.entries()) {
    slots.push_back({"G/" + e.name, e.value.shape(), &values(e.value)});
    slots.push_back({"G/" + e.name + "/velocity", e.value.shape(), &e.velocity});
  }
  for (auto& e : st.model.discriminator.entries()) {
    slots.push_back({"D/" + e.name, e.value.shape(), &values(e.value)});
    slots.push_back({"D/" + e.name + "/adam_m", e.value.shape(), &e.moment1});
    slots.push_back({"D/" + e.name + "/adam_v", e.value.shape(), &e.moment2});
  }
  return slots;
}

inline nlohmann::ordered_json rng_to_json(const RngStream& r) { return {{"seed", r.seed()}, {"counter", r.counter()}}; }
inline RngStream rng_from_json(const nlohmann::json& j) {
  return RngStream(j.at("seed").get<std::uint64_t>(), j.at("counter").get<std::uint64_t>());
}
}  // namespace detail

inline std::string encode_checkpoint(const TrainState& state, const TrainConfig& cfg) {
  const TrainState& st = state;
  const auto slots = detail::checkpoint_slots(st);
  nlohmann::ordered_json dir = nlohmann::ordered_json::array();
  std::uint64_t offset = 0;
  for (const auto& s : slots) {
    dir.push_back({{"name", s.name}, {"shape", s.shape}, {"offset", offset}});
    offset += s.data->size() * sizeof(float);
  }
  nlohmann::ordered_json header;
  header["model"] = to_json(st.model.config);
  header["train"] = to_json(cfg);
  header["iter"] = st.iter;
  header["beta_s"] = st.beta_s;
  header["beta_t"] = st.beta_t;
  header["rng"] = {{"noise", detail::rng_to_json(st.noise_rng)}, {"data", detail::rng_to_json(st.data_rng)}};
  header["adam_steps"] = st.model.discriminator.adam_steps();
  header["tensors"] = dir;
  const std::string text = header.dump();
  std::string out(kCheckpointMagic, 4);
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  detail::put_le<std::uint64_t>(out, text.size());
  out += text;
  out.reserve(out.size() + offset);
  for (const auto& s : slots) {
    for (float v : *s.data) {
      std::uint32_t bits;
      std::memcpy(&bits, &v, sizeof bits);
      detail::put_le<std::uint32_t>(out, bits);
    }
  }
  return out;
}

inline void save_checkpoint(const TrainState& state, const TrainConfig& cfg, const std::filesystem::path& path) {
  const auto tmp = path.string() + ".tmp";
  detail::write_file(tmp, encode_checkpoint(state, cfg));
  std::filesystem::rename(tmp, path);
}

struct LoadedCheckpoint {
  TrainState state;
  TrainConfig config;
};

inline LoadedCheckpoint decode_checkpoint(const std::string& bytes,
                                          const std::optional<ModelConfig>& expected_model = std::nullopt) {
  if (bytes.size() < 16 || bytes.compare(0, 4, kCheckpointMagic, 4) != 0) throw FormatError("not a checkpoint (bad magic)");
  std::size_t pos = 4;
  const auto version = detail::get_le<std::uint32_t>(bytes, pos);
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint version " + std::to_string(version) + " unsupported (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  }
  const auto header_len = detail::get_le<std::uint64_t>(bytes, pos);
  if (header_len > bytes.size() - 16) throw FormatError("truncated checkpoint header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(16, header_len));
  } catch (const nlohmann::json::parse_error&) {
    throw FormatError("corrupt checkpoint header");
  }
  LoadedCheckpoint out;
  ModelConfig mc;
  update_from_json(mc, header.at("model"));
  if (expected_model && !(*expected_model == mc)) throw ShapeError("checkpoint architecture differs from configuration");
  update_from_json(out.config, header.at("train"));
  RngStream dummy(0);
  out.state.model = make_model<float>(mc, dummy);
  out.state.iter = header.at("iter").get<std::uint64_t>();
  out.state.beta_s = header.at("beta_s").get<double>();
  out.state.beta_t = header.at("beta_t").get<double>();
  out.state.noise_rng = detail::rng_from_json(header.at("rng").at("noise"));
  out.state.data_rng = detail::rng_from_json(header.at("rng").at("data"));
  out.state.model.discriminator.set_adam_steps(header.at("adam_steps").get<std::uint64_t>());

  const auto slots = detail::checkpoint_slots(out.state);
  const auto& dir = header.at("tensors");
  if (dir.size() != slots.size()) throw ShapeError("checkpoint tensor count does not match the architecture");
  const std::size_t payload = 16 + header_len;
  for (std::size_t i = 0; i < slots.size(); ++i) {
    const auto& entry = dir[i];
    if (entry.at("name").get<std::string>() != slots[i].name || entry.at("shape").get<Shape>() != slots[i].shape) {
      throw ShapeError("checkpoint tensor '" + entry.at("name").get<std::string>() + "' does not match '" +
                       slots[i].name + "' " + to_string(slots[i].shape));
    }
    const std::size_t start = payload + entry.at("offset").get<std::size_t>();
    const std::size_t n = slots[i].data->size();
    if (start + n * sizeof(float) > bytes.size()) throw FormatError("truncated checkpoint payload");
    pos = start;
    for (std::size_t k = 0; k < n; ++k) {
      const auto bits = detail::get_le<std::uint32_t>(bytes, pos);
      std::memcpy(&(*slots[i].data)[k], &bits, sizeof(float));
    }
  }
  return out;
}

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path,
                                        const std::optional<ModelConfig>& expected_model = std::nullopt) {
  return decode_checkpoint(detail::read_file(path), expected_model);
}

// ---------------------------------------------------------------------------
// Runs

struct RunControl {
  std::optional<std::filesystem::path> resume;  // checkpoint to continue from
  std::optional<std::uint64_t> stop_at;         // checkpoint and stop after this many iterations
  bool quiet = true;
};

inline std::string checkpoint_name(std::uint64_t iter) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "ckpt_%06llu", static_cast<unsigned long long>(iter));
  return buf;
}

inline nlohmann::ordered_json step_record(std::uint64_t iter, double lr_g, double lr_d, const LossBundle& l,
                                          double beta_s, double beta_t) {
  return {{"iter", iter},   {"lr_g", lr_g},   {"lr_d", lr_d},     {"loss_seg", l.seg},
          {"loss_adv_g", l.adv_g},           {"loss_d", l.d_loss}, {"kl_s", l.kl_source_mean},
          {"kl_t", l.kl_target_mean},        {"ic_s", l.ic_source}, {"ic_t", l.ic_target},
          {"beta_s", beta_s}, {"beta_t", beta_t}};
}

namespace detail {
// Drops JSON-lines records whose "iter" is >= `bound` (resume support).
inline void truncate_log(const std::filesystem::path& path, std::uint64_t bound) {
  if (!std::filesystem::exists(path)) return;
  std::ifstream in(path);
  std::string line, kept;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (nlohmann::json::parse(line).at("iter").get<std::uint64_t>() < bound) kept += line + "\n";
  }
  in.close();
  write_file(path, kept);
}

inline std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}
}  // namespace detail

// Trains from scratch (or from `control.resume`) into `run_dir`, writing
// steps.jsonl, evals.jsonl, interval checkpoints, ckpt_final, config.json and
// run_info.json. Returns the final state.
inline TrainState run_training(const TrainConfig& cfg, const ModelConfig& model_config,
                               const std::filesystem::path& data_dir, const std::filesystem::path& run_dir,
                               const RunControl& control = {}) {
  validate(cfg);
  const Dataset data = Dataset::open(data_dir);
  if (data.num_classes() != model_config.num_classes) {
    throw ConfigError("dataset has " + std::to_string(data.num_classes()) + " classes, model expects " +
                      std::to_string(model_config.num_classes));
  }
  std::filesystem::create_directories(run_dir);
  const auto started = detail::utc_now();

  TrainState st;
  if (control.resume) {
    auto loaded = load_checkpoint(*control.resume, model_config);
    if (!(loaded.config == cfg)) throw ConfigError("resume: training configuration differs from the checkpoint's");
    st = std::move(loaded.state);
    detail::truncate_log(run_dir / "steps.jsonl", st.iter);
    detail::truncate_log(run_dir / "evals.jsonl", st.iter + 1);
  } else {
    st = init_state(model_config, cfg);
    detail::write_file(run_dir / "steps.jsonl", "");
    detail::write_file(run_dir / "evals.jsonl", "");
  }
  nlohmann::ordered_json config_doc = {{"train", to_json(cfg)}, {"model", to_json(model_config)}};
  detail::write_file(run_dir / "config.json", config_doc.dump(2) + "\n");

  std::ofstream log(run_dir / "steps.jsonl", std::ios::app | std::ios::binary);
  std::ofstream evals(run_dir / "evals.jsonl", std::ios::app | std::ios::binary);
  if (!log || !evals) throw IoError("cannot write logs in " + run_dir.string());
  const std::uint64_t end = control.stop_at ? std::min(*control.stop_at, cfg.max_iter) : cfg.max_iter;
  const std::uint64_t schedule_max = std::max<std::uint64_t>(cfg.max_iter, 1);

  while (st.iter < end) {
    const std::uint64_t it = st.iter;
    const auto src = sample_batch(data, Split::kSource, cfg, st.data_rng);
    const auto tgt = sample_batch(data, Split::kTargetTrain, cfg, st.data_rng);
    LossBundle l;
    try {
      l = train_step(st, src, tgt, cfg);
    } catch (const NumericError& e) {
      nlohmann::ordered_json diag = {{"iter", it}, {"error", e.what()}};
      detail::write_file(run_dir / "abort.json", diag.dump(2) + "\n");
      throw NumericError("training aborted at iteration " + std::to_string(it) + ": " + e.what() +
                         " (last good checkpoint kept)");
    }
    log << step_record(it, poly_lr({cfg.lr_g, schedule_max, cfg.power}, it),
                       poly_lr({cfg.lr_d, schedule_max, cfg.power}, it), l, st.beta_s, st.beta_t)
               .dump()
        << '\n';
    if (!control.quiet && st.iter % 100 == 0) {
      std::fprintf(stderr, "iter %llu seg %.4f d %.4f kl_s %.3f kl_t %.3f beta %.4g/%.4g\n",
                   static_cast<unsigned long long>(st.iter), l.seg, l.d_loss, l.kl_source_mean, l.kl_target_mean,
                   st.beta_s, st.beta_t);
    }
    if (cfg.eval_interval > 0 && st.iter % cfg.eval_interval == 0) {
      log.flush();
      if (st.iter < cfg.max_iter) save_checkpoint(st, cfg, run_dir / checkpoint_name(st.iter));
      const auto ev = evaluate_split(st.model, cfg.mode, data, Split::kTargetVal);
      evals << nlohmann::ordered_json{{"iter", st.iter}, {"miou", iou_table(ev.confusion).miou}}.dump() << '\n';
      evals.flush();
    }
  }
  log.flush();
  if (st.iter == cfg.max_iter) {
    save_checkpoint(st, cfg, run_dir / "ckpt_final");
  } else if (cfg.eval_interval == 0 || st.iter % cfg.eval_interval != 0) {
    save_checkpoint(st, cfg, run_dir / checkpoint_name(st.iter));
  }
  nlohmann::ordered_json info = {{"started_utc", started},
                                 {"finished_utc", detail::utc_now()},
                                 {"iter", st.iter},
                                 {"resumed_from", control.resume ? control.resume->string() : ""}};
  detail::write_file(run_dir / "run_info.json", info.dump(2) + "\n");
  return st;
}

}  // namespace siban
