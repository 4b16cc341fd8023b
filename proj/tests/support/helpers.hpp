#ifndef LSF_TESTS_SUPPORT_HELPERS_HPP
#define LSF_TESTS_SUPPORT_HELPERS_HPP

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "lsf/gradcheck.hpp"
#include "lsf/model.hpp"
#include "lsf/rng.hpp"
#include "lsf/tape.hpp"
#include "lsf/tensor.hpp"

namespace lsf::testutil {

/// Shrunk architecture for tests that rebuild the forward pass many times
/// (finite differences, permutation sweeps). Same shape family as the
/// default config, two layers instead of six.
inline ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.image_h = 8;
  cfg.image_w = 8;
  cfg.channels = 1;
  cfg.patch = 4;
  cfg.dim = 8;
  cfg.heads = 2;
  cfg.layers = 2;
  cfg.mlp_hidden = 16;
  cfg.classes = 3;
  cfg.posenc_dim = 8;
  cfg.dropout = 0.1f;
  return cfg;
}

template <typename T>
Tensor<T> random_image(const ModelConfig& cfg, Rng rng) {
  Tensor<T> img(Shape{cfg.image_h, cfg.image_w, cfg.channels});
  for (std::int64_t i = 0; i < img.size(); ++i) img[i] = static_cast<T>(rng.next_double());
  return img;
}

/// Inverse of patchify: scatter the token rows back into an image. Used to
/// confirm the flattening convention round-trips.
template <typename T>
Tensor<T> unpatchify(const Tensor<T>& patches, const ModelConfig& cfg) {
  if (patches.rank() != 2 || patches.dim(0) != cfg.tokens() || patches.dim(1) != cfg.patch_len()) {
    throw std::invalid_argument("unpatchify: token matrix shape " + patches.shape().str() +
                                " does not match the configuration");
  }
  Tensor<T> img(Shape{cfg.image_h, cfg.image_w, cfg.channels});
  const int grid_w = cfg.image_w / cfg.patch;
  for (int n = 0; n < cfg.tokens(); ++n) {
    const int gr = n / grid_w;
    const int gc = n % grid_w;
    for (int ch = 0; ch < cfg.channels; ++ch) {
      for (int r = 0; r < cfg.patch; ++r) {
        for (int c = 0; c < cfg.patch; ++c) {
          const int flat = ch * cfg.patch * cfg.patch + r * cfg.patch + c;
          img.at(gr * cfg.patch + r, gc * cfg.patch + c, ch) = patches.at(n, flat);
        }
      }
    }
  }
  return img;
}

/// Reduce any rank-1/rank-2 node to a scalar by multiplying with ones, so
/// op-level gradient tests have a loss to backpropagate from.
template <typename T>
NodeRef sum_all(Tape<T>& tape, NodeRef x) {
  const Shape s = tape.value(x).shape();
  if (s.rank == 1) {
    Tensor<T> ones(Shape{s.dim(0), 1});
    ones.fill(T(1));
    return tape.matmul(x, tape.constant(std::move(ones)));
  }
  if (s.rank == 2) {
    Tensor<T> left(Shape{s.dim(0)});
    left.fill(T(1));
    Tensor<T> right(Shape{s.dim(1), 1});
    right.fill(T(1));
    NodeRef rowsum = tape.matmul(tape.constant(std::move(left)), x);
    return tape.matmul(rowsum, tape.constant(std::move(right)));
  }
  throw std::invalid_argument("sum_all: expected a rank-1 or rank-2 node, got " + s.str());
}

/// Check an op subgraph's gradients against finite differences. `build`
/// receives a fresh tape plus leaves bound to the given parameter tensors
/// (in order) and must return a scalar loss node. Any Rng the builder needs
/// must be re-seeded inside `build` so repeated rebuilds see the same draw.
template <typename T, typename BuildFn>
GradCheckReport op_grad_check(const std::vector<std::pair<std::string, Tensor<T>*>>& params,
                              BuildFn build, T h = T(1e-3), double threshold = 1e-3) {
  auto eval = [&]() -> T {
    Tape<T> tape;
    std::vector<NodeRef> leaves;
    for (const auto& [name, t] : params) leaves.push_back(tape.leaf(*t, false));
    return tape.value(build(tape, leaves))[0];
  };
  auto analytic = [&]() {
    Tape<T> tape;
    std::vector<NodeRef> leaves;
    for (const auto& [name, t] : params) leaves.push_back(tape.leaf(*t, true));
    tape.backward(build(tape, leaves));
    std::vector<Tensor<T>> grads;
    grads.reserve(leaves.size());
    for (NodeRef l : leaves) grads.push_back(tape.grad_or_zero(l));
    return grads;
  };
  return grad_check<T>(params, eval, analytic, h, threshold);
}

/// Fill a tensor with uniform values in [-1, 1).
template <typename T>
Tensor<T> random_tensor(Shape shape, Rng rng) {
  Tensor<T> t(shape);
  for (std::int64_t i = 0; i < t.size(); ++i) {
    t[i] = static_cast<T>(2.0 * rng.next_double() - 1.0);
  }
  return t;
}

/// Full model loss for one image under one execution order, matching the
/// graph the trainer builds for each mode: classification term always,
/// plus one position term per executed layer when `with_predictors`.
template <typename T>
NodeRef build_mode_loss(Tape<T>& tape, const ParamNodes<T>& pn, const ModelConfig& cfg,
                        const Tensor<T>& image, int target, const ExecutionOrder& order,
                        bool full_order, bool with_predictors, Rng& dropout_rng, bool training) {
  NodeRef patches = tape.constant(patchify(image, cfg));
  NodeRef z0 = embed_input(tape, pn, patches);
  ForwardTrace<T> trace;
  ForwardTrace<T>* tap = with_predictors ? &trace : nullptr;
  NodeRef logits =
      model_forward(tape, pn, z0, order, dropout_rng, training, tap, full_order);
  NodeRef loss = tape.cross_entropy(logits, target);
  for (const auto& [u, pos] : trace.predictor_logits) {
    loss = tape.add(loss, tape.cross_entropy(u, pos - 1));
  }
  return loss;
}

/// End-to-end gradient check of every parameter tensor against central
/// differences, rebuilding the forward pass from scratch for each probe.
/// `sample_cap` < 1 checks every entry; otherwise at most that many
/// entries per tensor (sampled deterministically from `pick_rng`).
/// Dropout runs in inference mode so the objective is smooth.
template <typename T>
GradCheckReport model_grad_check(ModelParams<T>& params, const Tensor<T>& image, int target,
                                 const ExecutionOrder& order, bool full_order,
                                 bool with_predictors, std::int64_t sample_cap,
                                 const Rng& pick_rng, T h = T(1e-3), double threshold = 1e-3) {
  const ModelConfig& cfg = params.cfg;
  auto registry = param_registry(params);
  auto eval = [&]() -> T {
    Tape<T> tape;
    ParamNodes<T> pn = bind_params(tape, params, false);
    Rng silent(0);
    NodeRef loss = build_mode_loss(tape, pn, cfg, image, target, order, full_order,
                                   with_predictors, silent, false);
    return tape.value(loss)[0];
  };
  auto analytic = [&]() {
    Tape<T> tape;
    ParamNodes<T> pn = bind_params(tape, params, true);
    Rng silent(0);
    NodeRef loss = build_mode_loss(tape, pn, cfg, image, target, order, full_order,
                                   with_predictors, silent, false);
    tape.backward(loss);
    std::vector<Tensor<T>> grads;
    grads.reserve(pn.flat.size());
    for (const auto& [name, node] : pn.flat) grads.push_back(tape.grad_or_zero(node));
    return grads;
  };
  if (sample_cap < 1) {
    return grad_check<T>(registry, eval, analytic, h, threshold);
  }
  return grad_check_sampled<T>(registry, eval, analytic, pick_rng, sample_cap, h, threshold);
}

}  // namespace lsf::testutil

#endif  // LSF_TESTS_SUPPORT_HELPERS_HPP
