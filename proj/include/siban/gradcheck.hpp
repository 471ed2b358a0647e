#pragma once

// Randomised gradient checks: composite primitive graphs and the network
// blocks, all in 64-bit.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "siban/autodiff.hpp"
#include "siban/sibanet.hpp"

namespace siban {

struct GraphCheck {
  double error = 0.0;
  std::vector<std::string> ops;  // primitive names in application order
  std::size_t rejected = 0;      // draws discarded as FD-unresolvable
  bool admissible = true;
};

namespace detail {
inline std::size_t pick(RngStream& rng, std::size_t lo, std::size_t hi) { return lo + rng.next_below(hi - lo + 1); }

inline Tensor<double> uniform_leaf(RngStream& rng, const Shape& shape) {
  return rng_fill<double>(rng, shape, Uniform{-1.0, 1.0});
}
}  // namespace detail

// Forward-only conditioning test for a finite-difference oracle: the largest
// relative disagreement, over the coordinates grad_check would perturb,
// between fourth-order central differences at steps h and 2h. Large values
// flag draws where the oracle cannot resolve the gradient (a kink inside the
// stencil, or a derivative below the rounding floor of the loss).
template <typename LossFn>
double fd_disagreement(LossFn&& loss_fn, std::vector<Tensor<double>> leaves, double h,
                       std::size_t max_coords_per_leaf = 0) {
  auto eval = [&]() {
    Tape<double> tape(Tape<double>::Mode::kNoGrad);
    return loss_fn(tape).item();
  };
  double worst = 0.0;
  for (auto& leaf : leaves) {
    auto& values = leaf.mutable_data();
    const std::size_t n = values.size();
    const std::size_t m = max_coords_per_leaf == 0 ? n : std::min(n, max_coords_per_leaf);
    for (std::size_t k = 0; k < m; ++k) {
      const std::size_t i = k * n / m;
      const double orig = values[i];
      auto at = [&](double offset) {
        values[i] = orig + offset;
        return eval();
      };
      auto stencil = [&](double step) { return (8.0 * (at(step) - at(-step)) - (at(2 * step) - at(-2 * step))) / (12.0 * step); };
      const double a = stencil(h), b = stencil(2.0 * h);
      values[i] = orig;
      const double scale = std::abs(a) + std::abs(b);
      if (scale > 0.0) worst = std::max(worst, std::abs(a - b) / scale);
    }
  }
  return worst;
}

inline constexpr double kFdResolution = 1e-7;  // admissible oracle disagreement
inline constexpr std::size_t kMaxDraws = 64;

// Builds a random graph of at most `max_ops` catalog primitives on leaves
// drawn from [-1, 1] and checks it against central differences. The loss is
// sum((y - y0) * r) for a fixed random r, with y0 the unperturbed output as a
// constant: the gradient is that of sum(y * r), while the loss is exactly 0
// at the base point so a perturbation is not lost in the rounding of large
// unrelated terms.
namespace detail {
inline GraphCheck random_graph_draw(RngStream& rng, std::size_t max_ops, double fd_epsilon) {
  struct Step {
    Primitive op;
    Attrs attrs;
    int leaf = -1;  // index into leaves of the second operand
  };
  std::vector<Tensor<double>> leaves;
  std::vector<Step> steps;
  GraphCheck out;

  const bool matrix = rng.next_below(5) == 0;
  Shape shape = matrix ? Shape{detail::pick(rng, 1, 4), detail::pick(rng, 1, 5)}
                       : Shape{detail::pick(rng, 1, 2), detail::pick(rng, 1, 3), detail::pick(rng, 2, 4),
                               detail::pick(rng, 2, 4)};
  leaves.push_back(detail::uniform_leaf(rng, shape));

  // Values are tracked while building so saturating primitives are only
  // drawn while |y| is moderate; a saturated chain has gradients far below
  // what finite differences can resolve.
  Tensor<double> value = leaves[0];
  auto advance = [&](const Step& s) {
    Tape<double> tape(Tape<double>::Mode::kNoGrad);
    std::vector<Tensor<double>> in = {value};
    if (s.leaf >= 0) in.push_back(leaves[static_cast<std::size_t>(s.leaf)]);
    value = apply_primitive(tape, s.op, in, s.attrs);
  };

  const std::size_t n_ops = detail::pick(rng, 1, max_ops);
  std::size_t used = 0;
  while (used < n_ops) {
    Step s;
    const std::size_t budget = n_ops - used;
    const bool r4 = shape.size() == 4;
    double peak = 0.0;
    for (double v : value.data()) peak = std::max(peak, std::abs(v));
    const std::uint64_t draw = rng.next_below(14);
    switch (peak > 2.5 && draw <= 7 ? 8 : draw) {
      case 0: s.op = Primitive::kRelu; break;
      case 1: s.op = Primitive::kLeakyRelu; s.attrs.slope = 0.2; break;
      case 2: s.op = Primitive::kSigmoid; break;
      case 3: s.op = Primitive::kExp; break;
      case 4:  // repeated squaring flattens small values beyond FD resolution
        s.op = !steps.empty() && steps.back().op == Primitive::kSquare ? Primitive::kSoftplus : Primitive::kSquare;
        break;
      case 5: s.op = Primitive::kSoftplus; break;
      case 6: {
        s.op = rng.next_below(2) ? Primitive::kSoftmax : Primitive::kLogSoftmax;
        if (!steps.empty() && steps.back().op == Primitive::kSoftmax) s.op = Primitive::kLog;  // log of a simplex
        const std::size_t rank = shape.size();
        std::size_t axis = rank >= 2 ? rank - 1 - rng.next_below(2) : 0;
        if (shape[axis] < 2 && rank >= 2) axis = 2 * rank - 3 - axis;  // the other trailing axis
        if (shape[axis] < 2) s.op = Primitive::kSigmoid;  // softmax over one entry is constant
        s.attrs.axis = static_cast<int>(axis);
        break;
      }
      case 7:
        if (budget >= 2) {  // log of a positive quantity
          steps.push_back({Primitive::kSigmoid, {}, -1});
          advance(steps.back());
          s.op = Primitive::kLog;
          ++used;
        } else {
          s.op = Primitive::kExpm1;
        }
        break;
      case 8: s.op = Primitive::kClamp; s.attrs.lo = -0.5; s.attrs.hi = 0.5; break;
      case 9:
      case 10: {
        const Primitive ops[] = {Primitive::kAdd, Primitive::kSub, Primitive::kMul};
        s.op = ops[rng.next_below(3)];
        Shape other = shape;
        if (r4 && rng.next_below(2)) other = Shape{1, 1, shape[2], shape[3]};
        s.leaf = static_cast<int>(leaves.size());
        leaves.push_back(detail::uniform_leaf(rng, other));
        break;
      }
      case 11:
        if (r4 && shape[2] * shape[3] <= 16) {
          s.op = Primitive::kUpsampleNearest;
          s.attrs.factor = 2;
          shape[2] *= 2;
          shape[3] *= 2;
        } else if (shape.size() >= 2 &&
                   !(!steps.empty() && steps.back().op == Primitive::kSoftmax &&
                     steps.back().attrs.axis == static_cast<int>(shape.size()) - 1)) {  // a simplex sums to 1
          s.op = rng.next_below(2) ? Primitive::kSum : Primitive::kMean;
          s.attrs.axes = {static_cast<int>(shape.size()) - 1};
          shape.pop_back();
        } else {
          s.op = Primitive::kSigmoid;
        }
        break;
      case 12: {
        if (shape.size() < 2) {
          s.op = Primitive::kSquare;
          break;
        }
        s.op = Primitive::kConcat;
        s.attrs.axis = 1;
        Shape other = shape;
        other[1] = detail::pick(rng, 1, 3);
        shape[1] += other[1];
        s.leaf = static_cast<int>(leaves.size());
        leaves.push_back(detail::uniform_leaf(rng, other));
        break;
      }
      default: {
        if (r4) {
          s.op = Primitive::kConv2d;
          const std::size_t k = rng.next_below(2) ? 3 : 1, cout = detail::pick(rng, 1, 3);
          s.attrs.padding = k / 2;
          s.attrs.stride = shape[2] >= 4 && shape[3] >= 4 && rng.next_below(2) ? 2 : 1;
          s.leaf = static_cast<int>(leaves.size());
          leaves.push_back(detail::uniform_leaf(rng, Shape{cout, shape[1], k, k}));
          shape = Shape{shape[0], cout, conv_output_size(shape[2], k, s.attrs.stride, s.attrs.padding),
                        conv_output_size(shape[3], k, s.attrs.stride, s.attrs.padding)};
        } else if (shape.size() != 2) {
          s.op = Primitive::kSoftplus;
        } else {
          s.op = Primitive::kMatMul;
          const std::size_t p = detail::pick(rng, 1, 5);
          s.leaf = static_cast<int>(leaves.size());
          leaves.push_back(detail::uniform_leaf(rng, Shape{shape[1], p}));
          shape[1] = p;
        }
        break;
      }
    }
    steps.push_back(s);
    advance(s);
    ++used;
  }
  for (const auto& s : steps) out.ops.emplace_back(primitive_name(s.op));
  const Tensor<double> weights = rng_fill<double>(rng, shape, Uniform{-1.0, 1.0});
  const Tensor<double> base = value.clone();

  auto loss_fn = [&](Tape<double>& tape) {
    Tensor<double> y = leaves[0];
    for (const auto& s : steps) {
      std::vector<Tensor<double>> in = {y};
      if (s.leaf >= 0) in.push_back(leaves[static_cast<std::size_t>(s.leaf)]);
      y = apply_primitive(tape, s.op, in, s.attrs);
    }
    return sum(tape, mul(tape, sub(tape, y, base), weights));
  };
  out.admissible = fd_disagreement(loss_fn, leaves, fd_epsilon) <= kFdResolution;
  if (out.admissible) out.error = grad_check_leaves(loss_fn, leaves, fd_epsilon);
  return out;
}

}  // namespace detail

// Draws graphs until one is resolvable by the finite-difference oracle and
// returns its check. Admissibility looks only at forward evaluations, never
// at the gradients under test.
inline GraphCheck random_graph_check(RngStream& rng, std::size_t max_ops = 6, double fd_epsilon = 1e-5) {
  std::size_t rejected = 0;
  for (std::size_t draw = 0; draw < kMaxDraws; ++draw) {
    GraphCheck g = detail::random_graph_draw(rng, max_ops, fd_epsilon);
    if (g.admissible) {
      g.rejected = rejected;
      return g;
    }
    ++rejected;
  }
  throw std::runtime_error("random_graph_check: no resolvable graph in " + std::to_string(kMaxDraws) + " draws");
}

struct BlockCheck {
  std::string block;
  double error = 0.0;
  double fd_disagreement = 0.0;  // oracle conditioning, see fd_disagreement()
  std::size_t rejected = 0;
};

// Checks F (trunk, mean and log-variance heads), the SA layer, C and D of a
// small 64-bit model with respect to their inputs and parameters.
// `coords_per_tensor` caps the coordinates perturbed per parameter tensor.
namespace detail {
inline std::vector<BlockCheck> network_block_draw(std::uint64_t seed, std::size_t coords_per_tensor,
                                                  double fd_epsilon) {
  ModelConfig cfg;
  cfg.trunk = {{4, 3, 2, 1}, {6, 3, 2, 1}, {8, 3, 2, 1}, {8, 3, 1, 1}};
  cfg.latent_channels = 6;
  cfg.num_classes = 3;
  cfg.discriminator = {{5, 3, 1, 1}, {6, 4, 2, 1}, {6, 4, 2, 1}, {1, 3, 1, 1}};
  RngStream rng(seed);
  auto model = make_model<double>(cfg, rng);
  // Non-zero biases so every bias gradient is exercised away from symmetry.
  for (auto* store : {&model.generator, &model.discriminator}) {
    for (auto& e : store->entries()) {
      if (e.name.ends_with(".bias")) e.value = rng_fill<double>(rng, e.value.shape(), Uniform{-0.1, 0.1});
      e.value.set_requires_grad(true);
    }
  }
  auto params = [](ParamStore<double>& store, const std::string& prefix) {
    std::vector<Tensor<double>> out;
    for (auto& e : store.entries()) {
      if (e.name.starts_with(prefix)) out.push_back(e.value);
    }
    return out;
  };
  // Each block's loss is sum((y - y0) * r) over its outputs, y0 being the
  // outputs at the unperturbed point (see random_graph_check).
  auto check = [&](const std::string& name, std::vector<Tensor<double>> leaves, auto&& outputs) {
    std::vector<Tensor<double>> base, weights;
    {
      Tape<double> tape(Tape<double>::Mode::kNoGrad);
      for (const auto& y : outputs(tape)) {
        base.push_back(y.clone());
        weights.push_back(rng_fill<double>(rng, y.shape(), Uniform{-1.0, 1.0}));
      }
    }
    auto loss = [&](Tape<double>& tape) {
      const auto ys = outputs(tape);
      Tensor<double> total;
      for (std::size_t k = 0; k < ys.size(); ++k) {
        auto term = sum(tape, mul(tape, sub(tape, ys[k], base[k]), weights[k]));
        total = k == 0 ? term : add(tape, total, term);
      }
      return total;
    };
    BlockCheck b{name, grad_check_leaves(loss, leaves, fd_epsilon, coords_per_tensor),
                 fd_disagreement(loss, leaves, fd_epsilon, coords_per_tensor)};
    return b;
  };

  std::vector<BlockCheck> out;
  Tensor<double> image = rng_fill<double>(rng, Shape{2, 3, 16, 16}, Uniform{0.0, 1.0});
  Tensor<double> latent_sa = rng_fill<double>(rng, Shape{2, cfg.latent_channels, 4, 4}, Uniform{-1.0, 1.0});
  Tensor<double> latent_c = latent_sa.clone();
  Tensor<double> latent_d = rng_fill<double>(rng, Shape{2, cfg.latent_channels, 8, 8}, Uniform{-1.0, 1.0});

  auto leaves_f = params(model.generator, "F.");
  leaves_f.push_back(image);
  out.push_back(check("F", leaves_f, [&](Tape<double>& tape) {
    const auto lat = extract_features(tape, model, image);
    return std::vector<Tensor<double>>{lat.mu, lat.logvar};
  }));
  auto leaves_sa = params(model.generator, "SA.");
  leaves_sa.push_back(latent_sa);
  out.push_back(check("SA", leaves_sa, [&](Tape<double>& tape) {
    return std::vector<Tensor<double>>{purify(tape, latent_sa, significance_map(tape, model, latent_sa))};
  }));
  auto leaves_c = params(model.generator, "C.");
  leaves_c.push_back(latent_c);
  out.push_back(check("C", leaves_c, [&](Tape<double>& tape) {
    return std::vector<Tensor<double>>{classify(tape, model, latent_c)};
  }));
  auto leaves_d = params(model.discriminator, "D.");
  leaves_d.push_back(latent_d);
  out.push_back(check("D", leaves_d, [&](Tape<double>& tape) {
    return std::vector<Tensor<double>>{discriminate(tape, model, latent_d)};
  }));
  return out;
}
}  // namespace detail

// Per block, the first of up to kMaxDraws independent draws (model, inputs)
// that the finite-difference oracle resolves; a draw is rejected only on
// oracle disagreement, never on the gradient comparison itself.
inline std::vector<BlockCheck> network_block_checks(std::uint64_t seed, std::size_t coords_per_tensor = 24,
                                                    double fd_epsilon = 1e-5) {
  std::vector<BlockCheck> result;
  std::vector<bool> done;
  RngStream seeds(seed);
  for (std::size_t draw = 0; draw < kMaxDraws; ++draw) {
    const auto blocks = detail::network_block_draw(draw == 0 ? seed : seeds.next_u64(), coords_per_tensor, fd_epsilon);
    if (result.empty()) {
      result = blocks;
      done.assign(blocks.size(), false);
    }
    bool all = true;
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      if (!done[b]) {
        result[b] = blocks[b];
        result[b].rejected = draw;
        done[b] = blocks[b].fd_disagreement <= kFdResolution;
      }
      all = all && done[b];
    }
    if (all) return result;
  }
  throw std::runtime_error("network_block_checks: no resolvable draw in " + std::to_string(kMaxDraws) + " draws");
}

}  // namespace siban
