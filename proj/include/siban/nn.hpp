#pragma once

// Parameter storage, convolution layers, optimizers and the poly learning
// rate schedule.

#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "siban/autodiff.hpp"

namespace siban {

template <typename T>
struct ParamEntry {
  std::string name;
  Tensor<T> value;
  std::vector<T> velocity;  // SGD momentum buffer
  std::vector<T> moment1;   // Adam first moment
  std::vector<T> moment2;   // Adam second moment
};

// Named parameters in insertion order plus their optimizer slots.
template <typename T>
class ParamStore {
 public:
  Tensor<T>& add(const std::string& name, Tensor<T> value) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter '" + name + "'");
    value.set_requires_grad(true);
    const std::size_t n = value.size();
    index_[name] = entries_.size();
    entries_.push_back(ParamEntry<T>{name, std::move(value), std::vector<T>(n, T(0)), std::vector<T>(n, T(0)),
                                     std::vector<T>(n, T(0))});
    return entries_.back().value;
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  const Tensor<T>& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter '" + name + "'");
    return entries_[it->second].value;
  }
  Tensor<T>& get(const std::string& name) {
    return const_cast<Tensor<T>&>(static_cast<const ParamStore&>(*this).get(name));
  }

  std::vector<ParamEntry<T>>& entries() { return entries_; }
  const std::vector<ParamEntry<T>>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  std::uint64_t adam_steps() const { return adam_steps_; }
  void set_adam_steps(std::uint64_t t) { adam_steps_ = t; }

  // Gives every parameter an all-zero gradient buffer.
  void zero_grad() {
    for (auto& e : entries_) {
      auto& g = e.value.mutable_grad();
      std::fill(g.begin(), g.end(), T(0));
    }
  }
  void clear_grad() {
    for (auto& e : entries_) e.value.clear_grad();
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
  }

 private:
  std::vector<ParamEntry<T>> entries_;
  std::map<std::string, std::size_t> index_;
  std::uint64_t adam_steps_ = 0;
};

// Registers `prefix.weight` [Cout,Cin,k,k] ~ uniform(-b, b), b = sqrt(1/(Cin k k)),
// and a zero `prefix.bias` [Cout].
template <typename T>
void add_conv_params(ParamStore<T>& store, const std::string& prefix, std::size_t in_channels,
                     std::size_t out_channels, std::size_t kernel, RngStream& rng) {
  const double bound = std::sqrt(1.0 / static_cast<double>(in_channels * kernel * kernel));
  store.add(prefix + ".weight",
            rng_fill<T>(rng, Shape{out_channels, in_channels, kernel, kernel}, Uniform{-bound, bound}));
  store.add(prefix + ".bias", Tensor<T>::zeros(Shape{out_channels}));
}

template <typename T>
Tensor<T> conv_layer_forward(Tape<T>& tape, const ParamStore<T>& params, const std::string& prefix,
                             const Tensor<T>& x, std::size_t stride, std::size_t padding) {
  const auto& w = params.get(prefix + ".weight");
  const auto& b = params.get(prefix + ".bias");
  if (x.rank() == 4 && x.dim(1) != w.dim(1)) {
    throw ShapeError(prefix + ": expected " + std::to_string(w.dim(1)) + " input channels, got " +
                     std::to_string(x.dim(1)));
  }
  return conv2d(tape, x, w, b, stride, padding);
}

namespace detail {
template <typename T>
void require_grads(const ParamStore<T>& params) {
  for (const auto& e : params.entries()) {
    if (!e.value.has_grad()) throw std::logic_error("optimizer step: parameter '" + e.name + "' has no gradient");
  }
}
}  // namespace detail

struct SgdOptions {
  double momentum = 0.9;
  double weight_decay = 5e-4;
};

// v <- momentum v + grad + weight_decay p;  p <- p - lr v. Clears gradients.
template <typename T>
void sgd_momentum_step(ParamStore<T>& params, double lr, const SgdOptions& opt = {}) {
  detail::require_grads(params);
  const T mu = static_cast<T>(opt.momentum), wd = static_cast<T>(opt.weight_decay), step = static_cast<T>(lr);
  for (auto& e : params.entries()) {
    auto& p = e.value.mutable_data();
    const auto& g = e.value.mutable_grad();
    for (std::size_t i = 0; i < p.size(); ++i) {
      e.velocity[i] = mu * e.velocity[i] + g[i] + wd * p[i];
      p[i] -= step * e.velocity[i];
    }
    e.value.clear_grad();
  }
}

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-8;
  double weight_decay = 5e-4;
};

// Bias-corrected Adam with weight decay added to the gradient. Clears gradients.
template <typename T>
void adam_step(ParamStore<T>& params, double lr, const AdamOptions& opt = {}) {
  detail::require_grads(params);
  params.set_adam_steps(params.adam_steps() + 1);
  const double t = static_cast<double>(params.adam_steps());
  const T b1 = static_cast<T>(opt.beta1), b2 = static_cast<T>(opt.beta2), wd = static_cast<T>(opt.weight_decay);
  const T c1 = static_cast<T>(1.0 - std::pow(opt.beta1, t));
  const T c2 = static_cast<T>(1.0 - std::pow(opt.beta2, t));
  const T step = static_cast<T>(lr), eps = static_cast<T>(opt.eps);
  for (auto& e : params.entries()) {
    auto& p = e.value.mutable_data();
    const auto& grad = e.value.mutable_grad();
    for (std::size_t i = 0; i < p.size(); ++i) {
      const T g = grad[i] + wd * p[i];
      e.moment1[i] = b1 * e.moment1[i] + (T(1) - b1) * g;
      e.moment2[i] = b2 * e.moment2[i] + (T(1) - b2) * g * g;
      const T m_hat = e.moment1[i] / c1;
      const T v_hat = e.moment2[i] / c2;
      p[i] -= step * m_hat / (std::sqrt(v_hat) + eps);
    }
    e.value.clear_grad();
  }
}

struct LrSchedule {
  double initial_lr = 2.5e-4;
  std::uint64_t max_iter = 1;
  double power = 0.9;
};

// initial_lr * (1 - iter/max_iter)^power.
inline double poly_lr(const LrSchedule& schedule, std::uint64_t iter) {
  if (schedule.max_iter == 0) throw std::invalid_argument("poly_lr: max_iter must be positive");
  if (iter > schedule.max_iter) {
    throw std::out_of_range("poly_lr: iter " + std::to_string(iter) + " beyond max_iter " +
                            std::to_string(schedule.max_iter));
  }
  const double frac = 1.0 - static_cast<double>(iter) / static_cast<double>(schedule.max_iter);
  return schedule.initial_lr * std::pow(frac, schedule.power);
}

}  // namespace siban
