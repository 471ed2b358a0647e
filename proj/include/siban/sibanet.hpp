#pragma once

// Feature extractor F, significance-aware layer, classifier C and
// discriminator D.
//
//   x --F--> (mu, logvar) --reparameterize--> z --SA--> v
//   z_sig = z * v  --C--> class logits
//   z_sig          --D--> patch domain logits

#include <algorithm>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "siban/autodiff.hpp"
#include "siban/nn.hpp"

namespace siban {

struct ConvSpec {
  std::size_t channels = 0;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t padding = 1;

  bool operator==(const ConvSpec&) const = default;
};

struct ModelConfig {
  std::size_t in_channels = 3;
  std::vector<ConvSpec> trunk = {{16, 3, 2, 1}, {32, 3, 2, 1}, {64, 3, 2, 1}, {64, 3, 1, 1}};
  std::size_t latent_channels = 64;
  std::size_t num_classes = 5;
  std::vector<ConvSpec> discriminator = {{32, 3, 1, 1}, {64, 4, 2, 1}, {64, 4, 2, 1}, {1, 3, 1, 1}};
  double leaky_slope = 0.2;
  double logvar_min = -10.0;
  double logvar_max = 10.0;

  std::size_t downsample() const {
    std::size_t f = 1;
    for (const auto& l : trunk) f *= l.stride;
    return f;
  }

  bool operator==(const ModelConfig&) const = default;
};

template <typename T>
struct GaussianLatent {
  Tensor<T> mu;
  Tensor<T> logvar;
};

template <typename T>
struct SignificanceMap {
  Tensor<T> v;  // entries in (0, 1)
};

template <typename T>
struct SibanModel {
  ModelConfig config;
  ParamStore<T> generator;      // F.*, SA.*, C.*
  ParamStore<T> discriminator;  // D.*
};

inline std::string trunk_name(std::size_t i) { return "F.conv" + std::to_string(i + 1); }
inline std::string disc_name(std::size_t i) { return "D.conv" + std::to_string(i + 1); }

// Discriminator parameters only. `zero_output_layer` zero-initialises the last
// layer so the untrained network is exactly label-symmetric.
template <typename T>
ParamStore<T> make_discriminator_params(const ModelConfig& config, RngStream& rng, bool zero_output_layer = false) {
  ParamStore<T> store;
  std::size_t in = config.latent_channels;
  for (std::size_t i = 0; i < config.discriminator.size(); ++i) {
    const auto& l = config.discriminator[i];
    add_conv_params(store, disc_name(i), in, l.channels, l.kernel, rng);
    in = l.channels;
  }
  if (zero_output_layer && !config.discriminator.empty()) {
    auto& w = store.get(disc_name(config.discriminator.size() - 1) + ".weight").mutable_data();
    std::fill(w.begin(), w.end(), T(0));
  }
  return store;
}

template <typename T>
SibanModel<T> make_model(const ModelConfig& config, RngStream& rng) {
  if (config.trunk.empty()) throw ConfigError("model needs at least one trunk layer");
  if (config.discriminator.empty() || config.discriminator.back().channels != 1) {
    throw ConfigError("discriminator must end in a single channel");
  }
  if (config.num_classes < 2) throw ConfigError("num_classes must be at least 2");
  SibanModel<T> model;
  model.config = config;
  std::size_t in = config.in_channels;
  for (std::size_t i = 0; i < config.trunk.size(); ++i) {
    add_conv_params(model.generator, trunk_name(i), in, config.trunk[i].channels, config.trunk[i].kernel, rng);
    in = config.trunk[i].channels;
  }
  add_conv_params(model.generator, "F.mu", in, config.latent_channels, 1, rng);
  add_conv_params(model.generator, "F.logvar", in, config.latent_channels, 1, rng);
  add_conv_params(model.generator, "SA.conv", config.latent_channels, config.latent_channels, 1, rng);
  add_conv_params(model.generator, "C.conv", config.latent_channels, config.num_classes, 1, rng);
  model.discriminator = make_discriminator_params<T>(config, rng);
  return model;
}

// Shared trunk followed by 1x1 mean and log-variance heads at 1/downsample
// resolution; logvar is clamped to [logvar_min, logvar_max].
template <typename T>
GaussianLatent<T> extract_features(Tape<T>& tape, const SibanModel<T>& model, const Tensor<T>& x) {
  const auto& cfg = model.config;
  if (x.rank() != 4 || x.dim(1) != cfg.in_channels) {
    throw ShapeError("extract_features expects [B," + std::to_string(cfg.in_channels) + ",H,W], got " +
                     to_string(x.shape()));
  }
  const std::size_t f = cfg.downsample();
  if (x.dim(2) % f != 0 || x.dim(3) % f != 0) {
    throw ShapeError("spatial size " + std::to_string(x.dim(2)) + "x" + std::to_string(x.dim(3)) +
                     " not divisible by downsample factor " + std::to_string(f));
  }
  Tensor<T> h = x;
  for (std::size_t i = 0; i < cfg.trunk.size(); ++i) {
    h = conv_layer_forward(tape, model.generator, trunk_name(i), h, cfg.trunk[i].stride, cfg.trunk[i].padding);
    h = leaky_relu(tape, h, cfg.leaky_slope);
  }
  if (h.dim(2) != x.dim(2) / f || h.dim(3) != x.dim(3) / f) {
    throw ShapeError("trunk produced " + to_string(h.shape()) + ", expected 1/" + std::to_string(f) + " resolution");
  }
  GaussianLatent<T> out;
  out.mu = conv_layer_forward(tape, model.generator, "F.mu", h, 1, 0);
  out.logvar = clamp(tape, conv_layer_forward(tape, model.generator, "F.logvar", h, 1, 0), cfg.logvar_min,
                     cfg.logvar_max);
  return out;
}

// v = sigmoid(relu(conv1x1(z))).
template <typename T>
SignificanceMap<T> significance_map(Tape<T>& tape, const SibanModel<T>& model, const Tensor<T>& z) {
  if (z.rank() != 4 || z.dim(1) != model.config.latent_channels) {
    throw ShapeError("significance_map expects " + std::to_string(model.config.latent_channels) +
                     " channels, got " + to_string(z.shape()));
  }
  auto pre = conv_layer_forward(tape, model.generator, "SA.conv", z, 1, 0);
  return {sigmoid(tape, relu(tape, pre))};
}

// z = mu + exp(logvar / 2) * eps.
template <typename T>
Tensor<T> reparameterize(Tape<T>& tape, const GaussianLatent<T>& latent, const Tensor<T>& eps) {
  if (latent.mu.shape() != latent.logvar.shape() || eps.shape() != latent.mu.shape()) {
    throw ShapeError("reparameterize shape mismatch");
  }
  auto sigma = exp(tape, scale(tape, latent.logvar, T(0.5)));
  return add(tape, latent.mu, mul(tape, sigma, eps));
}

// As above with eps ~ N(0, I) drawn from `rng`.
template <typename T>
Tensor<T> reparameterize(Tape<T>& tape, const GaussianLatent<T>& latent, RngStream& rng) {
  if (latent.mu.shape() != latent.logvar.shape()) {
    throw ShapeError("latent mu " + to_string(latent.mu.shape()) + " vs logvar " + to_string(latent.logvar.shape()));
  }
  const auto eps = rng_fill<T>(rng, latent.mu.shape(), StandardNormal{});
  return reparameterize(tape, latent, eps);
}

template <typename T>
Tensor<T> purify(Tape<T>& tape, const Tensor<T>& z, const SignificanceMap<T>& sig) {
  if (z.shape() != sig.v.shape()) {
    throw ShapeError("purify: z " + to_string(z.shape()) + " vs significance " + to_string(sig.v.shape()));
  }
  return mul(tape, z, sig.v);
}

// 1x1 convolution to class logits at latent resolution.
template <typename T>
Tensor<T> classify(Tape<T>& tape, const SibanModel<T>& model, const Tensor<T>& z_sig) {
  if (z_sig.rank() != 4 || z_sig.dim(1) != model.config.latent_channels) {
    throw ShapeError("classify expects " + std::to_string(model.config.latent_channels) + " channels, got " +
                     to_string(z_sig.shape()));
  }
  return conv_layer_forward(tape, model.generator, "C.conv", z_sig, 1, 0);
}

// Output spatial size of the discriminator for an h x w input, or 0 if the
// input is too small for its receptive field.
inline std::pair<std::size_t, std::size_t> discriminator_output_size(const ModelConfig& cfg, std::size_t h,
                                                                     std::size_t w) {
  for (const auto& l : cfg.discriminator) {
    h = conv_output_size(h, l.kernel, l.stride, l.padding);
    w = conv_output_size(w, l.kernel, l.stride, l.padding);
    if (h == 0 || w == 0) return {0, 0};
  }
  return {h, w};
}

// Fully convolutional patch logits [B,1,h',w'], leaky ReLU between layers.
template <typename T>
Tensor<T> discriminate(Tape<T>& tape, const ModelConfig& cfg, const ParamStore<T>& params, const Tensor<T>& z_sig) {
  if (z_sig.rank() != 4 || z_sig.dim(1) != cfg.latent_channels) {
    throw ShapeError("discriminate expects " + std::to_string(cfg.latent_channels) + " channels, got " +
                     to_string(z_sig.shape()));
  }
  if (discriminator_output_size(cfg, z_sig.dim(2), z_sig.dim(3)).first == 0) {
    throw ShapeError("discriminator input " + to_string(z_sig.shape()) + " smaller than its receptive field");
  }
  Tensor<T> h = z_sig;
  for (std::size_t i = 0; i < cfg.discriminator.size(); ++i) {
    const auto& l = cfg.discriminator[i];
    h = conv_layer_forward(tape, params, disc_name(i), h, l.stride, l.padding);
    if (i + 1 < cfg.discriminator.size()) h = leaky_relu(tape, h, cfg.leaky_slope);
  }
  return h;
}

template <typename T>
Tensor<T> discriminate(Tape<T>& tape, const SibanModel<T>& model, const Tensor<T>& z_sig) {
  return discriminate(tape, model.config, model.discriminator, z_sig);
}

// Ablation arms: no adaptation, adversarial only, adversarial + plain
// bottleneck, adversarial + significance-aware bottleneck.
enum class Mode { kSourceOnly, kBaseline, kIban, kSiban };

inline std::string mode_name(Mode m) {
  switch (m) {
    case Mode::kSourceOnly: return "source_only";
    case Mode::kBaseline: return "baseline";
    case Mode::kIban: return "iban";
    case Mode::kSiban: return "siban";
  }
  return "?";
}

inline Mode parse_mode(std::string name) {
  std::replace(name.begin(), name.end(), '-', '_');
  for (Mode m : {Mode::kSourceOnly, Mode::kBaseline, Mode::kIban, Mode::kSiban}) {
    if (mode_name(m) == name) return m;
  }
  throw ConfigError("unknown mode '" + name + "' (expected source-only, baseline, iban or siban)");
}

inline bool uses_bottleneck(Mode m) { return m == Mode::kIban || m == Mode::kSiban; }
inline bool uses_discriminator(Mode m) { return m != Mode::kSourceOnly; }

template <typename T>
struct Encoding {
  GaussianLatent<T> latent;
  Tensor<T> z_sig;                                // what C and D consume
  std::optional<SignificanceMap<T>> significance;  // siban only
};

// F followed by the arm's bottleneck. With `noise` the latent is sampled;
// without it the posterior mean is used (evaluation).
template <typename T>
Encoding<T> encode(Tape<T>& tape, const SibanModel<T>& model, Mode mode, const Tensor<T>& images, RngStream* noise) {
  Encoding<T> out;
  out.latent = extract_features(tape, model, images);
  if (!uses_bottleneck(mode)) {
    out.z_sig = out.latent.mu;
    return out;
  }
  Tensor<T> z = noise ? reparameterize(tape, out.latent, *noise) : out.latent.mu;
  if (mode == Mode::kSiban) {
    out.significance = significance_map(tape, model, z);
    out.z_sig = purify(tape, z, *out.significance);
  } else {
    out.z_sig = z;
  }
  return out;
}

}  // namespace siban
