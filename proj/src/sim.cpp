#include "lsf/sim.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <stdexcept>

namespace lsf {

NodePlan assign_layers(int layers, int nodes, AssignStrategy strategy) {
  if (nodes < 1 || nodes > layers) {
    throw std::invalid_argument("assign_layers: node count must be in [1," +
                                std::to_string(layers) + "], got " + std::to_string(nodes));
  }
  NodePlan plan;
  plan.nodes = nodes;
  plan.node_of_layer.resize(static_cast<size_t>(layers));
  if (strategy == AssignStrategy::RoundRobin) {
    for (int i = 0; i < layers; ++i) plan.node_of_layer[static_cast<size_t>(i)] = i % nodes;
  } else {
    // Equal blocks; the first (layers % nodes) nodes take one extra layer.
    const int base = layers / nodes;
    const int extra = layers % nodes;
    int layer = 0;
    for (int n = 0; n < nodes; ++n) {
      const int take = base + (n < extra ? 1 : 0);
      for (int k = 0; k < take; ++k) plan.node_of_layer[static_cast<size_t>(layer++)] = n;
    }
  }
  return plan;
}

SimOutcome run_inference(InferenceSession& session, const Tensor<float>& image,
                         const NodePlan& plan, std::span<const int> failed_nodes,
                         SimOrderPolicy policy, Rng& order_rng) {
  std::vector<bool> down(static_cast<size_t>(plan.nodes), false);
  for (int n : failed_nodes) {
    if (n < 0 || n >= plan.nodes) {
      throw std::invalid_argument("run_inference: failed node " + std::to_string(n + 1) +
                                  " out of range [1," + std::to_string(plan.nodes) + "]");
    }
    down[static_cast<size_t>(n)] = true;
  }
  SimOutcome out;
  for (size_t i = 0; i < plan.node_of_layer.size(); ++i) {
    if (!down[static_cast<size_t>(plan.node_of_layer[i])]) {
      out.executed.push_back(static_cast<int>(i));
    }
  }
  if (policy == SimOrderPolicy::ArrivalRandom) order_rng.shuffle(out.executed);
  out.prediction = session.predict(image, out.executed);
  return out;
}

SimResult simulate(const ModelParams<float>& params, std::span<const Example> split,
                   const NodePlan& plan, const SimConfig& cfg) {
  cfg.validate();
  if (split.empty()) throw std::invalid_argument("simulate: empty split");
  if (static_cast<int>(plan.node_of_layer.size()) != params.cfg.layers) {
    throw std::invalid_argument("simulate: plan covers " +
                                std::to_string(plan.node_of_layer.size()) + " layers, model has " +
                                std::to_string(params.cfg.layers));
  }

  InferenceSession session(params);
  const Rng root(cfg.seed);
  const Rng fail_stream = root.fork("fail");
  const Rng order_stream = root.fork("order");

  SimResult result;
  std::map<int, std::pair<int, int>> buckets;  // missing -> (trials, correct)
  for (int t = 0; t < cfg.trials; ++t) {
    Rng fail_rng = fail_stream.fork(static_cast<std::uint64_t>(t));
    TrialRecord rec;
    for (int n = 0; n < plan.nodes; ++n) {
      if (fail_rng.next_bernoulli(cfg.fail_prob)) rec.failed_nodes.push_back(n);
    }
    Rng order_rng = order_stream.fork(static_cast<std::uint64_t>(t));
    rec.image_index = static_cast<int>(static_cast<size_t>(t) % split.size());
    const Example& ex = split[static_cast<size_t>(rec.image_index)];
    const SimOutcome outcome =
        run_inference(session, ex.image, plan, rec.failed_nodes, cfg.policy, order_rng);
    rec.executed = outcome.executed;
    rec.missing_layers = params.cfg.layers - static_cast<int>(outcome.executed.size());
    rec.prediction = outcome.prediction;
    rec.correct = outcome.prediction == ex.label;
    auto& bucket = buckets[rec.missing_layers];
    bucket.first += 1;
    if (rec.correct) bucket.second += 1;
    result.trace.push_back(std::move(rec));
  }
  for (const auto& [missing, counts] : buckets) {
    result.rows.push_back(
        {missing, counts.first, static_cast<double>(counts.second) / counts.first});
  }
  return result;
}

void write_sim_csv(const SimResult& result, std::ostream& os) {
  os << "missing_layers,trials,accuracy\n";
  char buf[32];
  for (const SimRow& r : result.rows) {
    std::snprintf(buf, sizeof(buf), "%.9g", r.accuracy);
    os << r.missing_layers << ',' << r.trials << ',' << buf << '\n';
  }
}

}  // namespace lsf
