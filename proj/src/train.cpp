#include "lsf/train.hpp"

#include <algorithm>
#include <cstdio>
#include <limits>
#include <numeric>
#include <sstream>

#include "lsf/eval.hpp"

namespace lsf {
namespace {

void check_dataset(const ModelConfig& model_cfg, const Dataset& data) {
  if (data.train.empty() || data.val.empty()) {
    throw std::invalid_argument("train: dataset needs non-empty train and validation splits");
  }
  if (data.image_h != model_cfg.image_h || data.image_w != model_cfg.image_w ||
      data.channels != model_cfg.channels) {
    throw std::invalid_argument("train: dataset geometry does not match model config");
  }
  if (data.classes != model_cfg.classes) {
    throw std::invalid_argument("train: dataset has " + std::to_string(data.classes) +
                                " classes, model expects " + std::to_string(model_cfg.classes));
  }
}

/// Execution order for one training batch under the given mode.
ExecutionOrder draw_batch_order(TrainMode mode, const ExecutionOrder& base, double drop_prob,
                                Rng& order_rng) {
  switch (mode) {
    case TrainMode::Baseline:
      return base;
    case TrainMode::LayerShuffle:
    case TrainMode::LayerShufflePosition:
    case TrainMode::LayerShufflePredict: {
      ExecutionOrder order = base;
      order_rng.shuffle(order);
      return order;
    }
    case TrainMode::LayerDrop: {
      ExecutionOrder kept;
      for (int id : base) {
        if (!order_rng.next_bernoulli(drop_prob)) kept.push_back(id);
      }
      if (kept.empty()) {
        kept.push_back(base[static_cast<size_t>(
            order_rng.next_below(static_cast<std::uint64_t>(base.size())))]);
      }
      return kept;
    }
  }
  throw std::logic_error("draw_batch_order: unreachable");
}

struct EpochEval {
  float loss = 0.0f;
  float accuracy = 0.0f;
};

/// Mode-matched validation: sequential for Baseline and LayerDrop, a fresh
/// permutation per pass for the shuffle modes. Classification loss only,
/// so model selection is comparable across modes.
EpochEval validate_epoch(const ModelParams<float>& params, std::span<const Example> split,
                         TrainMode mode, const ExecutionOrder& base, const Rng& epoch_stream) {
  InferenceSession session(params);
  double loss_sum = 0.0;
  std::int64_t correct = 0;
  const bool shuffled = mode == TrainMode::LayerShuffle ||
                        mode == TrainMode::LayerShufflePosition ||
                        mode == TrainMode::LayerShufflePredict;
  for (size_t i = 0; i < split.size(); ++i) {
    ExecutionOrder order = base;
    if (shuffled) {
      Rng pass_rng = epoch_stream.fork(static_cast<std::uint64_t>(i));
      pass_rng.shuffle(order);
    }
    const auto outcome = session.run(split[i].image, split[i].label, order);
    loss_sum += outcome.loss;
    if (outcome.prediction == split[i].label) ++correct;
  }
  EpochEval e;
  e.loss = static_cast<float>(loss_sum / static_cast<double>(split.size()));
  e.accuracy = static_cast<float>(correct) / static_cast<float>(split.size());
  return e;
}

std::string format_metric(float v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6f", static_cast<double>(v));
  return buf;
}

}  // namespace

float train_batch_step(ModelParams<float>& params, AdamState<float>& adam,
                       const AdamConfig& adam_cfg, std::span<const Example> batch,
                       const ExecutionOrder& order, bool full_order, bool with_predictors,
                       Rng& dropout_rng) {
  if (batch.empty()) throw std::invalid_argument("train_batch_step: empty batch");
  Tape<float> tape;
  ParamNodes<float> pn = bind_params(tape, params, /*requires_grad=*/true);
  NodeRef batch_loss{};
  for (const Example& ex : batch) {
    NodeRef patches = tape.constant(patchify(ex.image, params.cfg));
    NodeRef z0 = embed_input(tape, pn, patches);
    ForwardTrace<float> trace;
    NodeRef logits = model_forward(tape, pn, z0, order, dropout_rng, /*training=*/true,
                                   with_predictors ? &trace : nullptr, full_order);
    const int required = with_predictors ? static_cast<int>(order.size()) : 0;
    NodeRef loss = total_loss<float>(tape, logits, ex.label, trace.predictor_logits, required);
    batch_loss = batch_loss.valid() ? tape.add(batch_loss, loss) : loss;
  }
  NodeRef mean_loss = tape.scale(batch_loss, 1.0f / static_cast<float>(batch.size()));
  tape.backward(mean_loss);

  auto registry = param_registry(params);
  std::vector<Tensor<float>> grads;
  grads.reserve(pn.flat.size());
  for (const auto& [name, node] : pn.flat) grads.push_back(tape.grad_or_zero(node));
  adam_step(registry, grads, adam, adam_cfg);
  return tape.value(mean_loss)[0];
}

TrainResult train(const ModelConfig& model_cfg, const Dataset& data, const TrainConfig& cfg,
                  const ModelParams<float>* init) {
  model_cfg.validate();
  cfg.validate(model_cfg);
  check_dataset(model_cfg, data);
  if (init != nullptr && !(init->cfg == model_cfg)) {
    throw std::invalid_argument("train: initial parameters do not match the model config");
  }

  const Variant variant = variant_for_mode(cfg.mode);
  const Rng root(cfg.seed);
  ModelParams<float> params = init != nullptr
                                  ? adapt_params(*init, variant, root.fork("init"))
                                  : init_params<float>(model_cfg, variant, root.fork("init"));
  AdamState<float> adam = AdamState<float>::init(param_registry(params));
  AdamConfig adam_cfg;
  adam_cfg.lr = cfg.lr;

  ExecutionOrder base =
      cfg.layers_subset.empty() ? identity_order(model_cfg.layers) : cfg.layers_subset;
  std::sort(base.begin(), base.end());
  const bool full_order = static_cast<int>(base.size()) == model_cfg.layers;
  const bool with_predictors = cfg.mode == TrainMode::LayerShufflePredict;

  Rng order_rng = root.fork("order");
  Rng dropout_rng = root.fork("dropout");
  Rng batch_rng = root.fork("batches");
  const Rng val_stream = root.fork("val");

  TrainResult result;
  result.best_val_loss = std::numeric_limits<float>::infinity();
  std::ostringstream metrics;

  std::vector<size_t> index(data.train.size());
  std::iota(index.begin(), index.end(), size_t{0});
  std::vector<Example> batch;
  batch.reserve(static_cast<size_t>(cfg.batch_size));

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    batch_rng.shuffle(index);
    double loss_sum = 0.0;
    std::int64_t examples_seen = 0;
    for (size_t start = 0; start < index.size(); start += static_cast<size_t>(cfg.batch_size)) {
      const size_t end = std::min(index.size(), start + static_cast<size_t>(cfg.batch_size));
      batch.clear();
      for (size_t k = start; k < end; ++k) batch.push_back(data.train[index[k]]);
      const ExecutionOrder order = draw_batch_order(cfg.mode, base, cfg.drop_prob, order_rng);
      const bool batch_full_order = full_order && cfg.mode != TrainMode::LayerDrop;
      const float mean_loss = train_batch_step(params, adam, adam_cfg, batch, order,
                                               batch_full_order, with_predictors, dropout_rng);
      loss_sum += static_cast<double>(mean_loss) * static_cast<double>(batch.size());
      examples_seen += static_cast<std::int64_t>(batch.size());
    }
    const float train_loss = static_cast<float>(loss_sum / static_cast<double>(examples_seen));

    const EpochEval val = validate_epoch(params, data.val, cfg.mode, base,
                                         val_stream.fork(static_cast<std::uint64_t>(epoch)));
    metrics << epoch << '\t' << format_metric(train_loss) << '\t' << format_metric(val.loss)
            << '\t' << format_metric(val.accuracy) << '\t' << train_mode_name(cfg.mode) << '\t'
            << cfg.seed << '\n';

    if (val.loss < result.best_val_loss) {
      result.best_val_loss = val.loss;
      result.best_val_acc = val.accuracy;
      result.best_epoch = epoch;
      result.best_params = params;
    }
  }
  result.metrics_log = metrics.str();
  return result;
}

}  // namespace lsf
