#include "lsf/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <stdexcept>
#include <utility>

namespace lsf {
namespace {

void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::string format_float(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

}  // namespace

InferenceSession::InferenceSession(const ModelParams<float>& params)
    : cfg_(params.cfg), variant_(params.variant) {
  cfg_.validate();
  pn_ = bind_params(tape_, params, /*requires_grad=*/false);
  watermark_ = tape_.size();
}

NodeRef InferenceSession::forward(const Tensor<float>& image, std::span<const int> order,
                                  ForwardTrace<float>* trace, NodeRef* z0_out) {
  tape_.truncate(watermark_);
  NodeRef patches = tape_.constant(patchify(image, cfg_));
  NodeRef z0 = embed_input(tape_, pn_, patches);
  if (z0_out) *z0_out = z0;
  if (order.empty()) {
    return tape_.matmul(tape_.row(z0, 0), pn_.head_weight);
  }
  return model_forward(tape_, pn_, z0, order, null_rng_, /*training=*/false, trace,
                       /*full_order_required=*/false);
}

Tensor<float> InferenceSession::logits(const Tensor<float>& image, std::span<const int> order) {
  return tape_.value(forward(image, order, nullptr, nullptr));
}

int InferenceSession::predict(const Tensor<float>& image, std::span<const int> order) {
  const Tensor<float> l = logits(image, order);
  return argmax(l);
}

InferenceSession::Outcome InferenceSession::run(const Tensor<float>& image, int target,
                                                std::span<const int> order) {
  NodeRef out = forward(image, order, nullptr, nullptr);
  NodeRef loss = tape_.cross_entropy(out, target);
  Outcome o;
  o.prediction = argmax(tape_.value(out));
  o.loss = tape_.value(loss)[0];
  return o;
}

InferenceSession::TracedPass InferenceSession::run_traced(const Tensor<float>& image,
                                                          std::span<const int> order) {
  ForwardTrace<float> trace;
  NodeRef z0{};
  NodeRef out = forward(image, order, &trace, &z0);
  TracedPass t;
  t.z0 = tape_.value(z0);
  t.z_after.reserve(trace.z_after.size());
  for (NodeRef z : trace.z_after) t.z_after.push_back(tape_.value(z));
  for (const auto& [u, pos] : trace.predictor_logits) t.predictor_logits.push_back(tape_.value(u));
  t.logits = tape_.value(out);
  t.prediction = argmax(std::as_const(t.logits));
  return t;
}

// ---------------------------------------------------------------------------

void EvalOrderSpec::validate(int layers) const {
  if (keep_count && subset) {
    throw std::invalid_argument("order spec: keep count and explicit subset are exclusive");
  }
  if (policy == Policy::Fixed) {
    if (keep_count || subset) {
      throw std::invalid_argument("order spec: a fixed order cannot be combined with pruning");
    }
    validate_full_order(fixed_order, layers);
    return;
  }
  if (keep_count && (*keep_count < 1 || *keep_count > layers)) {
    throw std::invalid_argument("order spec: keep count must be in [1," + std::to_string(layers) +
                                "]");
  }
  if (subset) validate_suborder(*subset, layers);
}

namespace {

ExecutionOrder sorted_copy(ExecutionOrder v) {
  std::sort(v.begin(), v.end());
  return v;
}

ExecutionOrder draw_subset(const Rng& stream, int layers, int keep) {
  ExecutionOrder perm = Rng(stream).permutation(layers);
  perm.resize(static_cast<size_t>(keep));
  return sorted_copy(std::move(perm));
}

}  // namespace

EvalResult evaluate(const ModelParams<float>& params, std::span<const Example> split,
                    const EvalOrderSpec& spec, int repeats, std::uint64_t seed) {
  if (split.empty()) throw std::invalid_argument("evaluate: empty split");
  if (repeats < 1) throw std::invalid_argument("evaluate: repeats must be >= 1");
  spec.validate(params.cfg.layers);

  InferenceSession session(params);
  const int layers = params.cfg.layers;
  const Rng root(seed);
  const Rng order_stream = root.fork("order");
  const Rng subset_stream = root.fork("subset");

  EvalResult result;
  for (int r = 0; r < repeats; ++r) {
    ExecutionOrder base;
    if (spec.subset) {
      base = sorted_copy(*spec.subset);
    } else if (spec.keep_count) {
      base = draw_subset(subset_stream.fork(static_cast<std::uint64_t>(r)), layers,
                         *spec.keep_count);
    } else {
      base = identity_order(layers);
    }
    std::int64_t correct = 0;
    for (size_t i = 0; i < split.size(); ++i) {
      const std::uint64_t pass =
          static_cast<std::uint64_t>(r) * split.size() + static_cast<std::uint64_t>(i);
      ExecutionOrder order = spec.policy == EvalOrderSpec::Policy::Fixed ? spec.fixed_order : base;
      if (spec.policy == EvalOrderSpec::Policy::Arbitrary) {
        Rng pass_rng = order_stream.fork(pass);
        pass_rng.shuffle(order);
      }
      if (session.predict(split[i].image, order) == split[i].label) ++correct;
    }
    result.per_repeat.push_back(static_cast<double>(correct) / static_cast<double>(split.size()));
  }

  double sum = 0.0;
  for (double a : result.per_repeat) sum += a;
  result.mean_accuracy = sum / static_cast<double>(repeats);
  double var = 0.0;
  for (double a : result.per_repeat) {
    var += (a - result.mean_accuracy) * (a - result.mean_accuracy);
  }
  result.std_accuracy = std::sqrt(var / static_cast<double>(repeats));
  return result;
}

std::vector<PruneCurveRow> prune_curve(const ModelParams<float>& params,
                                       std::span<const Example> split,
                                       std::span<const int> keep_counts,
                                       EvalOrderSpec::Policy policy, int subsets_per_count,
                                       std::uint64_t seed) {
  if (policy == EvalOrderSpec::Policy::Fixed) {
    throw std::invalid_argument("prune_curve: order policy must be sequential or arbitrary");
  }
  std::vector<PruneCurveRow> rows;
  const Rng root(seed);
  for (size_t k = 0; k < keep_counts.size(); ++k) {
    EvalOrderSpec spec;
    spec.policy = policy;
    spec.keep_count = keep_counts[k];
    const EvalResult res = evaluate(params, split, spec, subsets_per_count,
                                    root.fork(static_cast<std::uint64_t>(k)).state());
    rows.push_back({keep_counts[k], res.mean_accuracy, res.std_accuracy});
  }
  return rows;
}

// ---------------------------------------------------------------------------

ContributionResult contribution_analysis(const ModelParams<float>& params,
                                         std::span<const Example> images, int passes_per_image,
                                         std::uint64_t seed) {
  if (passes_per_image < 1) {
    throw std::invalid_argument("contribution_analysis: passes must be >= 1");
  }
  InferenceSession session(params);
  const ModelConfig& cfg = params.cfg;
  const Rng order_stream = Rng(seed).fork("order");

  ContributionResult out;
  std::map<std::pair<int, int>, std::pair<int, double>> buckets;
  int pass_id = 0;
  for (const Example& ex : images) {
    for (int p = 0; p < passes_per_image; ++p, ++pass_id) {
      ExecutionOrder order =
          order_stream.fork(static_cast<std::uint64_t>(pass_id)).permutation(cfg.layers);
      const InferenceSession::TracedPass t = session.run_traced(ex.image, order);
      std::vector<float> raws(order.size());
      double sum = 0.0;
      for (size_t s = 0; s < order.size(); ++s) {
        const Tensor<float>& cur = t.z_after[s];
        const Tensor<float>& prev = s == 0 ? t.z0 : t.z_after[s - 1];
        double acc = 0.0;
        for (int j = 0; j < cfg.dim; ++j) {
          const double d = static_cast<double>(cur.at(0, j)) - static_cast<double>(prev.at(0, j));
          acc += d * d;
        }
        raws[s] = static_cast<float>(std::sqrt(acc));
        sum += raws[s];
      }
      for (size_t s = 0; s < order.size(); ++s) {
        ContributionRecord rec;
        rec.layer_id = order[s] + 1;
        rec.position = static_cast<int>(s) + 1;
        rec.raw = raws[s];
        rec.normalized = sum > 0.0 ? static_cast<float>(raws[s] / sum) : 0.0f;
        rec.pass_id = pass_id;
        out.records.push_back(rec);
        auto& bucket = buckets[{rec.layer_id, rec.position}];
        bucket.first += 1;
        bucket.second += rec.normalized;
      }
    }
  }
  for (const auto& [key, agg] : buckets) {
    out.summary.push_back({key.first, key.second, agg.first, agg.second / agg.first});
  }
  return out;
}

void write_contribution_csv(const ContributionResult& result, std::ostream& os) {
  os << "layer_id,position,raw_norm,normalized_norm,pass_id\n";
  for (const ContributionRecord& r : result.records) {
    os << r.layer_id << ',' << r.position << ',' << format_float(r.raw) << ','
       << format_float(r.normalized) << ',' << r.pass_id << '\n';
  }
}

void dump_embeddings(const ModelParams<float>& params, int layer_id,
                     std::span<const Example> images, std::uint64_t seed, std::ostream& os) {
  const ModelConfig& cfg = params.cfg;
  if (layer_id < 0 || layer_id >= cfg.layers) {
    throw std::invalid_argument("dump_embeddings: layer id " + std::to_string(layer_id + 1) +
                                " out of range [1," + std::to_string(cfg.layers) + "]");
  }
  InferenceSession session(params);
  const Rng order_stream = Rng(seed).fork("order");
  const std::uint32_t vector_len =
      static_cast<std::uint32_t>(cfg.seq_len()) * static_cast<std::uint32_t>(cfg.dim);

  os.write("LSED", 4);
  write_u32(os, 1);
  write_u32(os, vector_len);
  write_u32(os, static_cast<std::uint32_t>(images.size()));
  for (size_t i = 0; i < images.size(); ++i) {
    ExecutionOrder order =
        order_stream.fork(static_cast<std::uint64_t>(i)).permutation(cfg.layers);
    const InferenceSession::TracedPass t = session.run_traced(images[i].image, order);
    int position = 0;
    for (size_t s = 0; s < order.size(); ++s) {
      if (order[s] == layer_id) {
        position = static_cast<int>(s) + 1;
        break;
      }
    }
    const Tensor<float>& z = t.z_after[static_cast<size_t>(position - 1)];
    write_u32(os, static_cast<std::uint32_t>(layer_id + 1));
    write_u32(os, static_cast<std::uint32_t>(position));
    os.write(reinterpret_cast<const char*>(z.raw()),
             static_cast<std::streamsize>(z.size() * sizeof(float)));
  }
  if (!os) throw std::runtime_error("dump_embeddings: write failed");
}

}  // namespace lsf
