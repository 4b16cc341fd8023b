#ifndef LSF_TRAIN_HPP
#define LSF_TRAIN_HPP

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "lsf/dataset.hpp"
#include "lsf/model.hpp"
#include "lsf/rng.hpp"
#include "lsf/tape.hpp"
#include "lsf/tensor.hpp"

namespace lsf {

enum class TrainMode { Baseline, LayerShuffle, LayerShufflePosition, LayerShufflePredict, LayerDrop };

inline const char* train_mode_name(TrainMode m) {
  switch (m) {
    case TrainMode::Baseline: return "baseline";
    case TrainMode::LayerShuffle: return "shuffle";
    case TrainMode::LayerShufflePosition: return "shuffle-position";
    case TrainMode::LayerShufflePredict: return "shuffle-predict";
    case TrainMode::LayerDrop: return "layerdrop";
  }
  return "?";
}

inline TrainMode parse_train_mode(const std::string& s) {
  if (s == "baseline") return TrainMode::Baseline;
  if (s == "shuffle") return TrainMode::LayerShuffle;
  if (s == "shuffle-position") return TrainMode::LayerShufflePosition;
  if (s == "shuffle-predict") return TrainMode::LayerShufflePredict;
  if (s == "layerdrop") return TrainMode::LayerDrop;
  throw std::invalid_argument("unknown train mode: " + s);
}

inline Variant variant_for_mode(TrainMode m) {
  switch (m) {
    case TrainMode::LayerShufflePosition: return Variant::PosEncoding;
    case TrainMode::LayerShufflePredict: return Variant::PosPredictor;
    default: return Variant::Plain;
  }
}

/// Fresh uniform layer order, one draw per training batch.
inline ExecutionOrder sample_permutation(Rng& rng, int layers) {
  if (layers < 1) throw std::invalid_argument("sample_permutation: layers must be >= 1");
  return rng.permutation(layers);
}

/// Independent per-layer drop with probability p; survivors keep their
/// original relative order. If everything drops, one uniformly chosen
/// layer is retained so the pass is never empty.
inline ExecutionOrder layerdrop_mask(Rng& rng, int layers, double p) {
  if (layers < 1) throw std::invalid_argument("layerdrop_mask: layers must be >= 1");
  if (!(p >= 0.0 && p < 1.0)) {
    throw std::invalid_argument("layerdrop_mask: drop probability must be in [0,1)");
  }
  ExecutionOrder kept;
  for (int i = 0; i < layers; ++i) {
    if (!rng.next_bernoulli(p)) kept.push_back(i);
  }
  if (kept.empty()) {
    kept.push_back(static_cast<int>(rng.next_below(static_cast<std::uint64_t>(layers))));
  }
  return kept;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-6;
};

template <typename T>
struct AdamState {
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
  std::int64_t t = 0;

  static AdamState init(const std::vector<std::pair<std::string, Tensor<T>*>>& registry) {
    AdamState s;
    s.m.reserve(registry.size());
    s.v.reserve(registry.size());
    for (const auto& [name, tensor] : registry) {
      s.m.emplace_back(tensor->shape());
      s.v.emplace_back(tensor->shape());
    }
    return s;
  }
};

/// Bias-corrected Adam. Per-element arithmetic runs in double so the float
/// state tracks a 64-bit reference to well under the test tolerance.
template <typename T>
void adam_step(const std::vector<std::pair<std::string, Tensor<T>*>>& params,
               const std::vector<Tensor<T>>& grads, AdamState<T>& state, const AdamConfig& cfg) {
  if (params.size() != grads.size() || params.size() != state.m.size()) {
    throw std::invalid_argument("adam_step: parameter/gradient/state counts disagree");
  }
  state.t += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (size_t k = 0; k < params.size(); ++k) {
    Tensor<T>& p = *params[k].second;
    const Tensor<T>& g = grads[k];
    if (g.shape() != p.shape()) {
      throw std::invalid_argument("adam_step: gradient shape " + g.shape().str() +
                                  " does not match parameter " + params[k].first + " " +
                                  p.shape().str());
    }
    Tensor<T>& m = state.m[k];
    Tensor<T>& v = state.v[k];
    for (std::int64_t i = 0; i < p.size(); ++i) {
      const double gi = static_cast<double>(g[i]);
      const double mi = cfg.beta1 * static_cast<double>(m[i]) + (1.0 - cfg.beta1) * gi;
      const double vi = cfg.beta2 * static_cast<double>(v[i]) + (1.0 - cfg.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double step = cfg.lr * (mi / bc1) / (std::sqrt(vi / bc2) + cfg.eps);
      p[i] = static_cast<T>(static_cast<double>(p[i]) - step);
    }
  }
}

// ---------------------------------------------------------------------------
// Loss assembly
// ---------------------------------------------------------------------------

/// Classification loss plus, in predict mode, one cross-entropy per layer
/// against its realized position. `required_predictors` is the layer count
/// in predict mode and 0 otherwise; with no predictor terms the returned
/// node is the classification loss itself, bit for bit.
template <typename T>
NodeRef total_loss(Tape<T>& tape, NodeRef logits, int target,
                   std::span<const std::pair<NodeRef, int>> predictor_logits,
                   int required_predictors) {
  if (static_cast<int>(predictor_logits.size()) != required_predictors) {
    throw std::invalid_argument("total_loss: expected " + std::to_string(required_predictors) +
                                " predictor outputs, got " +
                                std::to_string(predictor_logits.size()));
  }
  NodeRef loss = tape.cross_entropy(logits, target);
  for (const auto& [u, pos] : predictor_logits) {
    loss = tape.add(loss, tape.cross_entropy(u, pos - 1));
  }
  return loss;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainConfig {
  TrainMode mode = TrainMode::Baseline;
  int epochs = 30;
  int batch_size = 64;
  double lr = 1e-4;
  std::uint64_t seed = 0;
  double drop_prob = 0.2;  // LayerDrop only
  /// Optional fixed layer subset (0-based, ascending) for reduced-depth
  /// retraining; empty means all layers.
  ExecutionOrder layers_subset;

  void validate(const ModelConfig& model) const {
    if (epochs < 1) throw std::invalid_argument("TrainConfig: epochs must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch size must be >= 1");
    if (!(drop_prob >= 0.0 && drop_prob < 1.0)) {
      throw std::invalid_argument("TrainConfig: drop probability must be in [0,1)");
    }
    if (!layers_subset.empty()) validate_suborder(layers_subset, model.layers);
  }
};

struct TrainResult {
  ModelParams<float> best_params;
  float best_val_loss = 0.0f;
  float best_val_acc = 0.0f;
  int best_epoch = 0;
  /// One line per epoch: epoch, train_loss, val_loss, val_acc, mode, seed
  /// (tab-separated).
  std::string metrics_log;
};

/// Full training loop: Adam over shuffled minibatches, per-epoch validation
/// under the mode's own execution-order regime, lowest-validation-loss
/// checkpointing. When `init` is given its tensors are the starting point
/// (fine-tuning); tensors the target mode adds on top — position tables,
/// predictor heads — are freshly initialized. `init` must share the model
/// geometry.
TrainResult train(const ModelConfig& model_cfg, const Dataset& data, const TrainConfig& cfg,
                  const ModelParams<float>* init = nullptr);

/// One optimizer step on one batch under a given execution order: forward
/// in that order, backward in exact reverse, Adam update. Returns the mean
/// batch loss. Exposed so order-consistency can be tested step for step.
float train_batch_step(ModelParams<float>& params, AdamState<float>& adam,
                       const AdamConfig& adam_cfg, std::span<const Example> batch,
                       const ExecutionOrder& order, bool full_order, bool with_predictors,
                       Rng& dropout_rng);

}  // namespace lsf

#endif  // LSF_TRAIN_HPP
