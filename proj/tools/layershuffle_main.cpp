// Command-line workbench around the layer-shuffled transformer library:
// dataset generation, training, order-robust evaluation, contribution and
// embedding analyses, and the node-failure simulator.

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "lsf/checkpoint.hpp"
#include "lsf/dataset.hpp"
#include "lsf/eval.hpp"
#include "lsf/model.hpp"
#include "lsf/sim.hpp"
#include "lsf/train.hpp"

namespace {

using namespace lsf;

/// Argument problems that surface only after flag parsing (bad enum text,
/// out-of-range layer ids, contradictory options). Exit code 2, like CLI11's
/// own parse errors, as opposed to 1 for runtime failures.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string fmt_g(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

std::vector<int> parse_int_list(const std::string& text, const std::string& what) {
  std::vector<int> out;
  std::istringstream is(text);
  std::string item;
  while (std::getline(is, item, ',')) {
    try {
      size_t used = 0;
      out.push_back(std::stoi(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw UsageError(what + ": expected comma-separated integers, got '" + text + "'");
    }
  }
  if (out.empty()) throw UsageError(what + ": empty list");
  return out;
}

/// 1-based layer ids on the command line, 0-based indices inside.
ExecutionOrder to_layer_indices(const std::vector<int>& ids, int layers, const std::string& what) {
  ExecutionOrder order;
  for (int id : ids) {
    if (id < 1 || id > layers) {
      throw UsageError(what + ": layer id " + std::to_string(id) + " outside 1.." +
                       std::to_string(layers));
    }
    order.push_back(id - 1);
  }
  return order;
}

struct DataArgs {
  std::string path;         // empty: generate the default synthetic set
  std::string split = "test";
  std::uint64_t gen_seed = 0;
};

void add_data_options(CLI::App* cmd, DataArgs& args, bool with_split) {
  cmd->add_option("--data", args.path,
                  "dataset file; omitted: regenerate the default synthetic set in memory");
  if (with_split) {
    cmd->add_option("--split", args.split, "dataset split to use (train|val|test)");
  }
}

Dataset open_dataset(const DataArgs& args) {
  if (!args.path.empty()) return load_dataset(args.path);
  SyntheticSpec spec;
  spec.seed = args.gen_seed;
  return generate_dataset(spec);
}

const std::vector<Example>& pick_split(const Dataset& ds, const std::string& split) {
  if (split == "train") return ds.train;
  if (split == "val") return ds.val;
  if (split == "test") return ds.test;
  throw UsageError("--split: expected train, val or test, got '" + split + "'");
}

Checkpoint open_checkpoint(const std::string& path) { return load_checkpoint(path); }

EvalOrderSpec build_order_spec(const std::string& order, std::optional<int> keep,
                               const std::string& subset, int layers) {
  EvalOrderSpec spec;
  if (order == "sequential") {
    spec = EvalOrderSpec::sequential();
  } else if (order == "arbitrary") {
    spec = EvalOrderSpec::arbitrary();
  } else if (order.rfind("fixed:", 0) == 0) {
    spec = EvalOrderSpec::fixed(
        to_layer_indices(parse_int_list(order.substr(6), "--order fixed"), layers, "--order fixed"));
  } else {
    throw UsageError("--order: expected sequential, arbitrary or fixed:<ids>, got '" + order + "'");
  }
  if (keep) spec.keep_count = *keep;
  if (!subset.empty()) {
    spec.subset = to_layer_indices(parse_int_list(subset, "--subset"), layers, "--subset");
  }
  try {
    spec.validate(layers);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  return spec;
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string mode;
  double drop_prob = 0.2;
  std::string layers_subset;
  int epochs = 0;
  int batch_size = 0;
  double lr = 0.0;
  std::uint64_t seed = 0;
  std::string out;
  std::string init;
  DataArgs data;
};

int run_train(const TrainArgs& a) {
  std::optional<Checkpoint> warm;
  if (!a.init.empty()) warm = open_checkpoint(a.init);

  ModelConfig model_cfg = warm ? warm->params.cfg : ModelConfig{};
  TrainConfig cfg;
  try {
    cfg.mode = parse_train_mode(a.mode);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  cfg.epochs = a.epochs;
  cfg.batch_size = a.batch_size;
  cfg.lr = a.lr;
  cfg.seed = a.seed;
  cfg.drop_prob = a.drop_prob;
  if (!a.layers_subset.empty()) {
    cfg.layers_subset = to_layer_indices(parse_int_list(a.layers_subset, "--layers-subset"),
                                         model_cfg.layers, "--layers-subset");
    std::sort(cfg.layers_subset.begin(), cfg.layers_subset.end());
  }
  try {
    cfg.validate(model_cfg);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }

  const Dataset data = open_dataset(a.data);
  TrainResult result = train(model_cfg, data, cfg, warm ? &warm->params : nullptr);

  Checkpoint ckpt;
  ckpt.params = std::move(result.best_params);
  ckpt.mode = cfg.mode;
  ckpt.seed = cfg.seed;
  ckpt.best_val_loss = result.best_val_loss;
  save_checkpoint(ckpt, a.out);

  std::cout << result.metrics_log;
  std::cout << "best_epoch " << result.best_epoch << "\n";
  std::cout << "best_val_loss " << fmt_g(result.best_val_loss) << "\n";
  std::cout << "best_val_acc " << fmt_g(result.best_val_acc) << "\n";
  std::cout << "checkpoint " << a.out << "\n";
  return 0;
}

struct EvalArgs {
  std::string ckpt;
  std::string order = "sequential";
  std::optional<int> keep;
  std::string subset;
  int repeats = 1;
  std::uint64_t seed = 0;
  DataArgs data;
};

int run_eval(const EvalArgs& a) {
  const Checkpoint ckpt = open_checkpoint(a.ckpt);
  const EvalOrderSpec spec = build_order_spec(a.order, a.keep, a.subset, ckpt.params.cfg.layers);
  if (a.repeats < 1) throw UsageError("--repeats: must be >= 1");

  const Dataset data = open_dataset(a.data);
  const EvalResult res = evaluate(ckpt.params, pick_split(data, a.data.split), spec, a.repeats,
                                  a.seed);
  std::cout << "order " << a.order << "\n";
  std::cout << "repeats " << a.repeats << "\n";
  std::cout << "mean_accuracy " << fmt_g(res.mean_accuracy) << "\n";
  std::cout << "std_accuracy " << fmt_g(res.std_accuracy) << "\n";
  return 0;
}

struct AnalyzeArgs {
  std::string ckpt;
  bool contributions = false;
  int dump_layer = 0;
  int samples = 0;
  int passes = 10;
  std::uint64_t seed = 0;
  std::string out;
  DataArgs data;
};

int run_analyze(const AnalyzeArgs& a) {
  if (a.contributions == (a.dump_layer != 0)) {
    throw UsageError("analyze: pass exactly one of --contributions or --dump-layer");
  }
  const Checkpoint ckpt = open_checkpoint(a.ckpt);
  const Dataset data = open_dataset(a.data);
  const std::vector<Example>& split = pick_split(data, a.data.split);
  if (a.samples < 1 || a.samples > static_cast<int>(split.size())) {
    throw UsageError("--samples: must be in 1.." + std::to_string(split.size()));
  }
  const std::span<const Example> images(split.data(), static_cast<size_t>(a.samples));

  std::ofstream os(a.out, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open for writing: " + a.out);

  if (a.contributions) {
    if (a.passes < 1) throw UsageError("--passes: must be >= 1");
    const ContributionResult res = contribution_analysis(ckpt.params, images, a.passes, a.seed);
    write_contribution_csv(res, os);
    std::cout << "records " << res.records.size() << "\n";
    std::cout << "summary_rows " << res.summary.size() << "\n";
  } else {
    if (a.dump_layer < 1 || a.dump_layer > ckpt.params.cfg.layers) {
      throw UsageError("--dump-layer: layer id outside 1.." +
                       std::to_string(ckpt.params.cfg.layers));
    }
    dump_embeddings(ckpt.params, a.dump_layer, images, a.seed, os);
    std::cout << "records " << images.size() << "\n";
    std::cout << "vector_len " << ckpt.params.cfg.seq_len() * ckpt.params.cfg.dim << "\n";
  }
  if (!os) throw std::runtime_error("write failed: " + a.out);
  std::cout << "file " << a.out << "\n";
  return 0;
}

struct SimArgs {
  std::string ckpt;
  int nodes = 0;
  std::string assign;
  double fail_prob = 0.0;
  int trials = 0;
  std::string order;
  std::uint64_t seed = 0;
  DataArgs data;
};

int run_sim(const SimArgs& a) {
  const Checkpoint ckpt = open_checkpoint(a.ckpt);
  SimConfig cfg;
  cfg.fail_prob = a.fail_prob;
  cfg.trials = a.trials;
  cfg.seed = a.seed;
  NodePlan plan;
  try {
    plan = assign_layers(ckpt.params.cfg.layers, a.nodes, parse_assign_strategy(a.assign));
    cfg.policy = parse_sim_order_policy(a.order);
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const Dataset data = open_dataset(a.data);
  const SimResult res = simulate(ckpt.params, pick_split(data, a.data.split), plan, cfg);
  write_sim_csv(res, std::cout);
  return 0;
}

struct DatasetArgs {
  bool generate = false;
  std::uint64_t seed = 0;
  std::string out;
  int n_train = 2000;
  int n_val = 1000;
  int n_test = 1000;
};

int run_dataset(const DatasetArgs& a) {
  if (!a.generate) throw UsageError("dataset: --generate is the only supported action");
  SyntheticSpec spec;
  spec.seed = a.seed;
  spec.n_train = a.n_train;
  spec.n_val = a.n_val;
  spec.n_test = a.n_test;
  Dataset ds;
  try {
    ds = generate_dataset(spec);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  save_dataset(ds, a.out);
  char checksum[32];
  std::snprintf(checksum, sizeof(checksum), "%016llx",
                static_cast<unsigned long long>(dataset_checksum(ds)));
  std::cout << "checksum " << checksum << "\n";
  std::cout << "train " << ds.train.size() << " val " << ds.val.size() << " test "
            << ds.test.size() << "\n";
  std::cout << "file " << a.out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"layer-shuffled vision transformer workbench"};
  app.require_subcommand(1);

  TrainArgs train_args;
  CLI::App* train_cmd = app.add_subcommand("train", "train a model and write a checkpoint");
  train_cmd->add_option("--mode", train_args.mode,
                        "baseline|shuffle|shuffle-position|shuffle-predict|layerdrop")
      ->required();
  train_cmd->add_option("--drop-prob", train_args.drop_prob, "per-layer drop probability");
  train_cmd->add_option("--layers-subset", train_args.layers_subset,
                        "train only these layers (1-based, comma-separated)");
  train_cmd->add_option("--epochs", train_args.epochs)->required();
  train_cmd->add_option("--batch-size", train_args.batch_size)->required();
  train_cmd->add_option("--lr", train_args.lr)->required();
  train_cmd->add_option("--seed", train_args.seed)->required();
  train_cmd->add_option("--out", train_args.out, "checkpoint path")->required();
  train_cmd->add_option("--init", train_args.init,
                        "checkpoint to fine-tune from instead of a fresh initialization");
  add_data_options(train_cmd, train_args.data, false);

  EvalArgs eval_args;
  CLI::App* eval_cmd = app.add_subcommand("eval", "accuracy under an execution-order protocol");
  eval_cmd->add_option("--ckpt", eval_args.ckpt)->required();
  eval_cmd->add_option("--order", eval_args.order, "sequential|arbitrary|fixed:<ids>");
  eval_cmd->add_option("--keep", eval_args.keep, "evaluate random layer subsets of this size");
  eval_cmd->add_option("--subset", eval_args.subset, "evaluate this layer subset (1-based)");
  eval_cmd->add_option("--repeats", eval_args.repeats)->required();
  eval_cmd->add_option("--seed", eval_args.seed);
  add_data_options(eval_cmd, eval_args.data, true);

  AnalyzeArgs analyze_args;
  CLI::App* analyze_cmd = app.add_subcommand("analyze", "contribution table or embedding dump");
  analyze_cmd->add_option("--ckpt", analyze_args.ckpt)->required();
  analyze_cmd->add_flag("--contributions", analyze_args.contributions,
                        "per-layer contribution records under shuffled passes");
  analyze_cmd->add_option("--dump-layer", analyze_args.dump_layer,
                          "dump this layer's output embeddings (1-based)");
  analyze_cmd->add_option("--samples", analyze_args.samples)->required();
  analyze_cmd->add_option("--passes", analyze_args.passes, "passes per image (contributions)");
  analyze_cmd->add_option("--seed", analyze_args.seed);
  analyze_cmd->add_option("--out", analyze_args.out)->required();
  add_data_options(analyze_cmd, analyze_args.data, true);

  SimArgs sim_args;
  CLI::App* sim_cmd = app.add_subcommand("sim", "distributed deployment with node failures");
  sim_cmd->add_option("--ckpt", sim_args.ckpt)->required();
  sim_cmd->add_option("--nodes", sim_args.nodes)->required();
  sim_cmd->add_option("--assign", sim_args.assign, "roundrobin|contiguous")->required();
  sim_cmd->add_option("--fail-prob", sim_args.fail_prob)->required();
  sim_cmd->add_option("--trials", sim_args.trials)->required();
  sim_cmd->add_option("--order", sim_args.order, "arrival-random|plan-sequential")->required();
  sim_cmd->add_option("--seed", sim_args.seed);
  add_data_options(sim_cmd, sim_args.data, true);

  DatasetArgs dataset_args;
  CLI::App* dataset_cmd = app.add_subcommand("dataset", "generate the synthetic dataset");
  dataset_cmd->add_flag("--generate", dataset_args.generate, "write a fresh dataset file");
  dataset_cmd->add_option("--seed", dataset_args.seed)->required();
  dataset_cmd->add_option("--out", dataset_args.out)->required();
  dataset_cmd->add_option("--train-size", dataset_args.n_train);
  dataset_cmd->add_option("--val-size", dataset_args.n_val);
  dataset_cmd->add_option("--test-size", dataset_args.n_test);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);  // prints help or the parse error
    return code == 0 ? 0 : 2;
  }

  try {
    if (app.got_subcommand(train_cmd)) return run_train(train_args);
    if (app.got_subcommand(eval_cmd)) return run_eval(eval_args);
    if (app.got_subcommand(analyze_cmd)) return run_analyze(analyze_args);
    if (app.got_subcommand(sim_cmd)) return run_sim(sim_args);
    if (app.got_subcommand(dataset_cmd)) return run_dataset(dataset_args);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
