#ifndef LSF_EVAL_HPP
#define LSF_EVAL_HPP

#include <cstdint>
#include <optional>
#include <ostream>
#include <span>
#include <vector>

#include "lsf/dataset.hpp"
#include "lsf/model.hpp"
#include "lsf/tape.hpp"

namespace lsf {

/// Binds one model onto a tape once and answers forward queries for many
/// (image, order) pairs by truncating back to the bound-parameter
/// watermark. Dropout is disabled; parameters are never mutated.
class InferenceSession {
 public:
  explicit InferenceSession(const ModelParams<float>& params);

  const ModelConfig& config() const { return cfg_; }
  Variant variant() const { return variant_; }

  /// Logits under the given execution order. An empty order applies the
  /// classification head directly to the embedded input (all-layers-lost
  /// fallback of the simulator).
  Tensor<float> logits(const Tensor<float>& image, std::span<const int> order);
  int predict(const Tensor<float>& image, std::span<const int> order);

  struct Outcome {
    int prediction = 0;
    float loss = 0.0f;
  };
  Outcome run(const Tensor<float>& image, int target, std::span<const int> order);

  struct TracedPass {
    Tensor<float> z0;
    std::vector<Tensor<float>> z_after;  // one per executed position
    std::vector<Tensor<float>> predictor_logits;  // PosPredictor variant only
    Tensor<float> logits;
    int prediction = 0;
  };
  TracedPass run_traced(const Tensor<float>& image, std::span<const int> order);

 private:
  NodeRef forward(const Tensor<float>& image, std::span<const int> order,
                  ForwardTrace<float>* trace, NodeRef* z0_out);

  ModelConfig cfg_;
  Variant variant_;
  Tape<float> tape_;
  ParamNodes<float> pn_;
  size_t watermark_ = 0;
  Rng null_rng_{0};  // dropout is inactive in eval mode and draws nothing
};

// ---------------------------------------------------------------------------
// Evaluation protocols
// ---------------------------------------------------------------------------

struct EvalOrderSpec {
  enum class Policy { Sequential, Arbitrary, Fixed };
  Policy policy = Policy::Sequential;
  ExecutionOrder fixed_order;               // Fixed policy only; full permutation
  std::optional<int> keep_count;            // prune: random subset of this size per repeat
  std::optional<ExecutionOrder> subset;     // prune: explicit 0-based subset

  static EvalOrderSpec sequential() { return {}; }
  static EvalOrderSpec arbitrary() { return {Policy::Arbitrary, {}, {}, {}}; }
  static EvalOrderSpec fixed(ExecutionOrder order) {
    return {Policy::Fixed, std::move(order), {}, {}};
  }

  void validate(int layers) const;
};

struct EvalResult {
  double mean_accuracy = 0.0;
  double std_accuracy = 0.0;
  std::vector<double> per_repeat;
};

/// Accuracy under the given order spec, averaged over `repeats` passes of
/// the split. Pass p of repeat r uses order stream fork("order").fork(r*n+p),
/// so repeat 0 aligns pass-for-pass with the simulator's trial streams.
EvalResult evaluate(const ModelParams<float>& params, std::span<const Example> split,
                    const EvalOrderSpec& spec, int repeats, std::uint64_t seed);

struct PruneCurveRow {
  int keep = 0;
  double mean_accuracy = 0.0;
  double std_accuracy = 0.0;
};

/// Accuracy per keep count, each averaged over `subsets_per_count` random
/// layer subsets (fresh subset per repeat inside evaluate).
std::vector<PruneCurveRow> prune_curve(const ModelParams<float>& params,
                                       std::span<const Example> split,
                                       std::span<const int> keep_counts,
                                       EvalOrderSpec::Policy policy, int subsets_per_count,
                                       std::uint64_t seed);

// ---------------------------------------------------------------------------
// Analyses
// ---------------------------------------------------------------------------

struct ContributionRecord {
  int layer_id = 0;   // 1-based original layer index
  int position = 0;   // 1-based realized position in the pass
  float raw = 0.0f;         // ||class(z_t) - class(z_{t-1})||_2
  float normalized = 0.0f;  // raw / sum of raws in the same pass
  int pass_id = 0;
};

struct ContributionSummaryRow {
  int layer_id = 0;
  int position = 0;
  int count = 0;
  double mean_normalized = 0.0;
};

struct ContributionResult {
  std::vector<ContributionRecord> records;
  std::vector<ContributionSummaryRow> summary;  // histogram data keyed by (layer, position)
};

/// Single-image passes under fresh full permutations; one record per
/// executed layer per pass.
ContributionResult contribution_analysis(const ModelParams<float>& params,
                                         std::span<const Example> images, int passes_per_image,
                                         std::uint64_t seed);

void write_contribution_csv(const ContributionResult& result, std::ostream& os);

/// One record per image: the tracked layer's flattened (N+1)*D output and
/// its realized position under a fresh full permutation. Binary format:
/// magic "LSED", u32 version=1, u32 vector_len, u32 record_count, then per
/// record u32 layer_id, u32 position, vector_len f32; all little-endian.
void dump_embeddings(const ModelParams<float>& params, int layer_id,
                     std::span<const Example> images, std::uint64_t seed, std::ostream& os);

}  // namespace lsf

#endif  // LSF_EVAL_HPP
