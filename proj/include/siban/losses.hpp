#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>

#include "siban/autodiff.hpp"
#include "siban/sibanet.hpp"

namespace siban {

inline constexpr std::uint8_t kIgnoreLabel = 255;

struct LossBundle {
  double seg = 0.0;
  double adv_g = 0.0;
  double d_loss = 0.0;
  double ic_source = 0.0;
  double ic_target = 0.0;
  double kl_source_mean = 0.0;  // nats per pixel, summed over channels
  double kl_target_mean = 0.0;
};

// Mean over non-ignored pixels of -log softmax(logits)[label].
template <typename T>
Tensor<T> segmentation_loss(Tape<T>& tape, const Tensor<T>& logits, std::span<const std::uint8_t> labels) {
  if (logits.rank() != 4) throw ShapeError("segmentation_loss expects [B,K,h,w] logits");
  const std::size_t B = logits.dim(0), K = logits.dim(1), plane = logits.dim(2) * logits.dim(3);
  if (labels.size() != B * plane) {
    throw ShapeError("segmentation_loss: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(B * plane) + " pixels");
  }
  std::vector<T> mask(logits.size(), T(0));
  std::size_t count = 0;
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t p = 0; p < plane; ++p) {
      const std::uint8_t y = labels[b * plane + p];
      if (y == kIgnoreLabel) continue;
      if (y >= K) throw std::invalid_argument("label " + std::to_string(y) + " outside [0," + std::to_string(K) + ")");
      mask[(b * K + y) * plane + p] = T(1);
      ++count;
    }
  }
  if (count == 0) throw std::invalid_argument("segmentation_loss: every pixel is ignored");
  auto logp = log_softmax(tape, logits, 1);
  auto picked = sum(tape, mul(tape, logp, Tensor<T>(logits.shape(), std::move(mask))));
  return scale(tape, picked, T(-1) / static_cast<T>(count));
}

// Binary cross-entropy with source -> 1 and target -> 0, averaged over the
// patches of each domain and summed over the two domains.
template <typename T>
Tensor<T> discriminator_loss(Tape<T>& tape, const Tensor<T>& logits_source, const Tensor<T>& logits_target) {
  auto source_term = mean(tape, softplus(tape, scale(tape, logits_source, T(-1))));
  auto target_term = mean(tape, softplus(tape, logits_target));
  return add(tape, source_term, target_term);
}

// Non-saturating generator objective: mean of -log sigmoid(logit_T).
template <typename T>
Tensor<T> generator_adversarial_loss(Tape<T>& tape, const Tensor<T>& logits_target) {
  return mean(tape, softplus(tape, scale(tape, logits_target, T(-1))));
}

// KL[N(mu, exp(logvar)) || N(0, 1)] per entry:
// 0.5 (mu^2 + expm1(logvar) - logvar), which equals
// 0.5 (mu^2 + exp(logvar) - logvar - 1) and is never negative in floating point.
template <typename T>
Tensor<T> gaussian_kl_per_channel(Tape<T>& tape, const GaussianLatent<T>& latent) {
  if (latent.mu.shape() != latent.logvar.shape()) throw ShapeError("gaussian_kl: mu/logvar shape mismatch");
  auto var_term = sub(tape, expm1(tape, latent.logvar), latent.logvar);
  return scale(tape, add(tape, square(tape, latent.mu), var_term), T(0.5));
}

// Mean over batch and pixels of sum_c w_c (kl_c - I_c / C), where
// w = 1 - stop_gradient(v) with a significance map and w = 1 without one.
template <typename T>
Tensor<T> information_constraint_loss(Tape<T>& tape, const Tensor<T>& kl_map,
                                      const std::optional<SignificanceMap<T>>& significance, double info_capacity) {
  if (kl_map.rank() != 4) throw ShapeError("information_constraint_loss expects [B,C,h,w]");
  if (info_capacity < 0.0) throw std::invalid_argument("information capacity must be non-negative");
  const std::size_t C = kl_map.dim(1);
  const std::size_t pixels = kl_map.dim(0) * kl_map.dim(2) * kl_map.dim(3);
  const T per_channel = static_cast<T>(info_capacity / static_cast<double>(C));
  auto excess = add_scalar(tape, kl_map, -per_channel);
  if (significance) {
    if (significance->v.shape() != kl_map.shape()) {
      throw ShapeError("significance " + to_string(significance->v.shape()) + " vs kl " + to_string(kl_map.shape()));
    }
    auto weight = stop_gradient(significance->v);
    for (auto& w : weight.mutable_data()) w = T(1) - w;
    excess = mul(tape, excess, weight);
  }
  return scale(tape, sum(tape, excess), T(1) / static_cast<T>(pixels));
}

// L_seg + lambda L_adv + beta_s L_ic^S + beta_t L_ic^T. Absent or zero-weight
// terms are skipped; the multipliers are constants on the tape.
template <typename T>
Tensor<T> overall_generator_loss(Tape<T>& tape, const Tensor<T>& seg, const std::optional<Tensor<T>>& adv,
                                 const std::optional<Tensor<T>>& ic_source, const std::optional<Tensor<T>>& ic_target,
                                 double lambda, double beta_s, double beta_t) {
  if (beta_s < 0.0 || beta_t < 0.0) throw std::invalid_argument("Lagrange multipliers must be non-negative");
  if (lambda < 0.0) throw std::invalid_argument("adversarial weight must be non-negative");
  Tensor<T> total = seg;
  auto accumulate = [&](const std::optional<Tensor<T>>& term, double weight) {
    if (term && weight != 0.0) total = add(tape, total, scale(tape, *term, static_cast<T>(weight)));
  };
  accumulate(adv, lambda);
  accumulate(ic_source, beta_s);
  accumulate(ic_target, beta_t);
  return total;
}

}  // namespace siban
