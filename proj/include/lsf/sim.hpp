#ifndef LSF_SIM_HPP
#define LSF_SIM_HPP

#include <cstdint>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "lsf/dataset.hpp"
#include "lsf/eval.hpp"
#include "lsf/model.hpp"

namespace lsf {

enum class AssignStrategy { RoundRobin, Contiguous };

inline AssignStrategy parse_assign_strategy(const std::string& s) {
  if (s == "roundrobin") return AssignStrategy::RoundRobin;
  if (s == "contiguous") return AssignStrategy::Contiguous;
  throw std::invalid_argument("unknown assignment strategy: " + s);
}

/// Which layer lives on which simulated node (both 0-based).
struct NodePlan {
  int nodes = 0;
  std::vector<int> node_of_layer;

  std::vector<int> layers_of(int node) const {
    std::vector<int> out;
    for (size_t i = 0; i < node_of_layer.size(); ++i) {
      if (node_of_layer[i] == node) out.push_back(static_cast<int>(i));
    }
    return out;
  }
};

NodePlan assign_layers(int layers, int nodes, AssignStrategy strategy);

enum class SimOrderPolicy { ArrivalRandom, PlanSequential };

inline SimOrderPolicy parse_sim_order_policy(const std::string& s) {
  if (s == "arrival-random") return SimOrderPolicy::ArrivalRandom;
  if (s == "plan-sequential") return SimOrderPolicy::PlanSequential;
  throw std::invalid_argument("unknown order policy: " + s);
}

struct SimConfig {
  double fail_prob = 0.0;  // per node per inference
  SimOrderPolicy policy = SimOrderPolicy::ArrivalRandom;
  int trials = 1;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(fail_prob >= 0.0 && fail_prob < 1.0)) {
      throw std::invalid_argument("SimConfig: fail probability must be in [0,1)");
    }
    if (trials < 1) throw std::invalid_argument("SimConfig: trials must be >= 1");
  }
};

struct TrialRecord {
  std::vector<int> failed_nodes;  // ascending
  ExecutionOrder executed;        // layers actually run, in execution order
  int missing_layers = 0;
  int image_index = 0;
  int prediction = 0;
  bool correct = false;
};

struct SimRow {
  int missing_layers = 0;
  int trials = 0;
  double accuracy = 0.0;
};

struct SimOutcome {
  int prediction = 0;
  ExecutionOrder executed;
};

/// One inference with the given failed nodes: their layers are skipped, the
/// survivors run in arrival-random or plan order. With every node down the
/// head is applied straight to the embedded input.
SimOutcome run_inference(InferenceSession& session, const Tensor<float>& image,
                         const NodePlan& plan, std::span<const int> failed_nodes,
                         SimOrderPolicy policy, Rng& order_rng);

struct SimResult {
  std::vector<SimRow> rows;  // ascending by missing layer count
  std::vector<TrialRecord> trace;
};

/// Trial t draws node failures from fork("fail").fork(t), shuffles arrivals
/// with fork("order").fork(t), and classifies image t mod |split| — the same
/// pass streams evaluate() uses, so a failure-free simulation reproduces it
/// exactly.
SimResult simulate(const ModelParams<float>& params, std::span<const Example> split,
                   const NodePlan& plan, const SimConfig& cfg);

void write_sim_csv(const SimResult& result, std::ostream& os);

}  // namespace lsf

#endif  // LSF_SIM_HPP
