#ifndef LSF_MODEL_HPP
#define LSF_MODEL_HPP

#include <cmath>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "lsf/rng.hpp"
#include "lsf/tape.hpp"
#include "lsf/tensor.hpp"

namespace lsf {

/// Architectural hyperparameters. The defaults are the desk-scale
/// configuration used throughout the tests: an 8-layer transformer over
/// 16x16 grayscale images that trains in minutes on one CPU core. Depth
/// matters more than width here: execution-order experiments need enough
/// layers that "almost sorted" permutations are a vanishing fraction of
/// all orders.
struct ModelConfig {
  int image_h = 16;
  int image_w = 16;
  int channels = 1;
  int patch = 4;
  int dim = 32;          // latent dimension, constant through the network
  int heads = 4;
  int layers = 8;
  int mlp_hidden = 64;
  int classes = 10;
  int posenc_dim = 32;   // per-position embedding width of the position-aware variant
  float dropout = 0.1f;

  int patch_len() const { return patch * patch * channels; }
  int tokens() const { return (image_h / patch) * (image_w / patch); }
  int seq_len() const { return tokens() + 1; }
  int head_dim() const { return dim / heads; }

  bool operator==(const ModelConfig&) const = default;

  void validate() const {
    if (image_h <= 0 || image_w <= 0 || channels <= 0 || patch <= 0 || dim <= 0 || heads <= 0 ||
        layers <= 0 || mlp_hidden <= 0 || classes <= 0 || posenc_dim <= 0) {
      throw std::invalid_argument("ModelConfig: all dimensions must be positive");
    }
    if (image_h % patch != 0 || image_w % patch != 0) {
      throw std::invalid_argument("ModelConfig: patch size must divide image height and width");
    }
    if (dim % heads != 0) {
      throw std::invalid_argument("ModelConfig: head count must divide latent dimension");
    }
    if (!(dropout >= 0.0f && dropout < 1.0f)) {
      throw std::invalid_argument("ModelConfig: dropout must be in [0,1)");
    }
  }
};

/// Which extra machinery the attention layers carry. Plain covers the
/// baseline, shuffled and layer-dropped training regimes; the other two
/// add the per-layer position tables and position predictors.
enum class Variant { Plain, PosEncoding, PosPredictor };

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::Plain: return "plain";
    case Variant::PosEncoding: return "pos-encoding";
    case Variant::PosPredictor: return "pos-predictor";
  }
  return "?";
}

template <typename T>
struct LayerNormParams {
  Tensor<T> gain;
  Tensor<T> bias;
};

template <typename T>
struct PatchEmbedParams {
  Tensor<T> weight;       // (P^2 C) x D patch projection
  Tensor<T> pos_embed;    // (N+1) x D, added to the full token sequence
  Tensor<T> class_token;  // D
};

template <typename T>
struct PositionEncodingParams {
  Tensor<T> table;  // L x F, one embedding per possible execution position
  Tensor<T> proj;   // (D+F) x D
  LayerNormParams<T> ln;
};

template <typename T>
struct PositionPredictorParams {
  Tensor<T> weight;  // D x L
  LayerNormParams<T> ln;
};

template <typename T>
struct AttentionLayerParams {
  LayerNormParams<T> ln1;
  std::vector<Tensor<T>> qkv;  // per head: D x 3*Dh
  Tensor<T> attn_out;          // (heads*Dh) x D
  LayerNormParams<T> ln2;
  Tensor<T> fc1_weight;  // D x hidden
  Tensor<T> fc1_bias;    // hidden
  Tensor<T> fc2_weight;  // hidden x D
  Tensor<T> fc2_bias;    // D
  PositionEncodingParams<T> posenc;      // present iff variant == PosEncoding
  PositionPredictorParams<T> predictor;  // present iff variant == PosPredictor
};

template <typename T>
struct ModelParams {
  ModelConfig cfg;
  Variant variant = Variant::Plain;
  PatchEmbedParams<T> embed;
  std::vector<AttentionLayerParams<T>> layers;
  Tensor<T> head_weight;  // D x classes

  template <typename U>
  ModelParams<U> cast() const;
};

/// Enumerate every learnable tensor with its checkpoint name, in the fixed
/// order that checkpoints, Adam state and gradient extraction all share.
template <typename T, typename Fn>
void for_each_param(ModelParams<T>& p, Fn&& fn) {
  fn("patch_embed.weight", p.embed.weight);
  fn("pos_embed", p.embed.pos_embed);
  fn("class_token", p.embed.class_token);
  for (size_t i = 0; i < p.layers.size(); ++i) {
    const std::string base = "layers." + std::to_string(i) + ".";
    AttentionLayerParams<T>& l = p.layers[i];
    fn(base + "ln1.gain", l.ln1.gain);
    fn(base + "ln1.bias", l.ln1.bias);
    for (size_t h = 0; h < l.qkv.size(); ++h) {
      fn(base + "attn.qkv." + std::to_string(h), l.qkv[h]);
    }
    fn(base + "attn.out", l.attn_out);
    fn(base + "ln2.gain", l.ln2.gain);
    fn(base + "ln2.bias", l.ln2.bias);
    fn(base + "mlp.fc1.weight", l.fc1_weight);
    fn(base + "mlp.fc1.bias", l.fc1_bias);
    fn(base + "mlp.fc2.weight", l.fc2_weight);
    fn(base + "mlp.fc2.bias", l.fc2_bias);
    if (p.variant == Variant::PosEncoding) {
      fn(base + "posenc.table", l.posenc.table);
      fn(base + "posenc.proj", l.posenc.proj);
      fn(base + "posenc.ln.gain", l.posenc.ln.gain);
      fn(base + "posenc.ln.bias", l.posenc.ln.bias);
    }
    if (p.variant == Variant::PosPredictor) {
      fn(base + "predictor.weight", l.predictor.weight);
      fn(base + "predictor.ln.gain", l.predictor.ln.gain);
      fn(base + "predictor.ln.bias", l.predictor.ln.bias);
    }
  }
  fn("head.weight", p.head_weight);
}

template <typename T, typename Fn>
void for_each_param(const ModelParams<T>& p, Fn&& fn) {
  for_each_param(const_cast<ModelParams<T>&>(p),
                 [&fn](const std::string& name, Tensor<T>& t) {
                   fn(name, static_cast<const Tensor<T>&>(t));
                 });
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>*>> param_registry(ModelParams<T>& p) {
  std::vector<std::pair<std::string, Tensor<T>*>> r;
  for_each_param(p, [&r](const std::string& name, Tensor<T>& t) { r.emplace_back(name, &t); });
  return r;
}

template <typename T>
std::int64_t parameter_count(const ModelParams<T>& p) {
  std::int64_t n = 0;
  for_each_param(p, [&n](const std::string&, const Tensor<T>& t) { n += t.size(); });
  return n;
}

/// Closed-form count of learnable scalars, kept independent of the actual
/// tensors so checkpoint scans have something to disagree with.
inline std::int64_t analytic_parameter_count(const ModelConfig& cfg, Variant variant) {
  const std::int64_t d = cfg.dim;
  const std::int64_t dh = cfg.head_dim();
  std::int64_t per_layer = 2 * d                       // ln1
                           + cfg.heads * d * 3 * dh    // qkv per head
                           + cfg.heads * dh * d        // attention output projection
                           + 2 * d                     // ln2
                           + d * cfg.mlp_hidden + cfg.mlp_hidden  // fc1
                           + cfg.mlp_hidden * d + d;   // fc2
  if (variant == Variant::PosEncoding) {
    per_layer += static_cast<std::int64_t>(cfg.layers) * cfg.posenc_dim  // table
                 + (d + cfg.posenc_dim) * d                              // projection
                 + 2 * (d + cfg.posenc_dim);                             // ln
  }
  if (variant == Variant::PosPredictor) {
    per_layer += d * cfg.layers + 2 * d;
  }
  return cfg.patch_len() * d                                 // patch projection
         + static_cast<std::int64_t>(cfg.seq_len()) * d + d  // pos_embed + class token
         + cfg.layers * per_layer + d * cfg.classes;
}

template <typename T>
template <typename U>
ModelParams<U> ModelParams<T>::cast() const {
  ModelParams<U> out;
  out.cfg = cfg;
  out.variant = variant;
  out.embed.weight = embed.weight.template cast<U>();
  out.embed.pos_embed = embed.pos_embed.template cast<U>();
  out.embed.class_token = embed.class_token.template cast<U>();
  out.head_weight = head_weight.template cast<U>();
  out.layers.resize(layers.size());
  for (size_t i = 0; i < layers.size(); ++i) {
    const auto& a = layers[i];
    auto& b = out.layers[i];
    b.ln1 = {a.ln1.gain.template cast<U>(), a.ln1.bias.template cast<U>()};
    for (const auto& q : a.qkv) b.qkv.push_back(q.template cast<U>());
    b.attn_out = a.attn_out.template cast<U>();
    b.ln2 = {a.ln2.gain.template cast<U>(), a.ln2.bias.template cast<U>()};
    b.fc1_weight = a.fc1_weight.template cast<U>();
    b.fc1_bias = a.fc1_bias.template cast<U>();
    b.fc2_weight = a.fc2_weight.template cast<U>();
    b.fc2_bias = a.fc2_bias.template cast<U>();
    if (variant == Variant::PosEncoding) {
      b.posenc.table = a.posenc.table.template cast<U>();
      b.posenc.proj = a.posenc.proj.template cast<U>();
      b.posenc.ln = {a.posenc.ln.gain.template cast<U>(), a.posenc.ln.bias.template cast<U>()};
    }
    if (variant == Variant::PosPredictor) {
      b.predictor.weight = a.predictor.weight.template cast<U>();
      b.predictor.ln = {a.predictor.ln.gain.template cast<U>(),
                        a.predictor.ln.bias.template cast<U>()};
    }
  }
  return out;
}

namespace detail {
template <typename T>
Tensor<T> trunc_normal_init(Shape shape, Rng rng, double stddev = 0.02) {
  Tensor<T> t(shape);
  for (std::int64_t i = 0; i < t.size(); ++i) {
    t[i] = static_cast<T>(rng.next_trunc_normal(0.0, stddev));
  }
  return t;
}
template <typename T>
Tensor<T> normal_init(Shape shape, Rng rng, double stddev = 0.02) {
  Tensor<T> t(shape);
  for (std::int64_t i = 0; i < t.size(); ++i) {
    t[i] = static_cast<T>(rng.next_normal(0.0, stddev));
  }
  return t;
}
}  // namespace detail

/// Fresh parameters: truncated-normal linear weights (std 0.02), plain
/// normal embeddings, unit LayerNorm gains, zero biases. Each tensor draws
/// from a stream forked off its own checkpoint name, so the result is
/// deterministic per seed and independent of enumeration order.
template <typename T>
ModelParams<T> init_params(const ModelConfig& cfg, Variant variant, const Rng& rng) {
  cfg.validate();
  ModelParams<T> p;
  p.cfg = cfg;
  p.variant = variant;
  const int d = cfg.dim;
  const int dh = cfg.head_dim();
  const int df = d + cfg.posenc_dim;
  p.embed.weight = detail::trunc_normal_init<T>({cfg.patch_len(), d}, rng.fork("patch_embed.weight"));
  p.embed.pos_embed = detail::normal_init<T>({cfg.seq_len(), d}, rng.fork("pos_embed"));
  p.embed.class_token = detail::normal_init<T>({d}, rng.fork("class_token"));
  p.layers.resize(static_cast<size_t>(cfg.layers));
  for (int i = 0; i < cfg.layers; ++i) {
    auto& l = p.layers[static_cast<size_t>(i)];
    const std::string base = "layers." + std::to_string(i) + ".";
    l.ln1 = {Tensor<T>::full({d}, T(1)), Tensor<T>::zeros({d})};
    for (int h = 0; h < cfg.heads; ++h) {
      l.qkv.push_back(detail::trunc_normal_init<T>({d, 3 * dh},
                                                   rng.fork(base + "attn.qkv." + std::to_string(h))));
    }
    l.attn_out = detail::trunc_normal_init<T>({cfg.heads * dh, d}, rng.fork(base + "attn.out"));
    l.ln2 = {Tensor<T>::full({d}, T(1)), Tensor<T>::zeros({d})};
    l.fc1_weight = detail::trunc_normal_init<T>({d, cfg.mlp_hidden}, rng.fork(base + "mlp.fc1.weight"));
    l.fc1_bias = Tensor<T>::zeros({cfg.mlp_hidden});
    l.fc2_weight = detail::trunc_normal_init<T>({cfg.mlp_hidden, d}, rng.fork(base + "mlp.fc2.weight"));
    l.fc2_bias = Tensor<T>::zeros({d});
    if (variant == Variant::PosEncoding) {
      l.posenc.table = detail::normal_init<T>({cfg.layers, cfg.posenc_dim},
                                              rng.fork(base + "posenc.table"));
      l.posenc.proj = detail::trunc_normal_init<T>({df, d}, rng.fork(base + "posenc.proj"));
      l.posenc.ln = {Tensor<T>::full({df}, T(1)), Tensor<T>::zeros({df})};
    }
    if (variant == Variant::PosPredictor) {
      l.predictor.weight = detail::trunc_normal_init<T>({d, cfg.layers},
                                                        rng.fork(base + "predictor.weight"));
      l.predictor.ln = {Tensor<T>::full({d}, T(1)), Tensor<T>::zeros({d})};
    }
  }
  p.head_weight = detail::trunc_normal_init<T>({d, cfg.classes}, rng.fork("head.weight"));
  return p;
}

/// Zero-filled parameter skeleton with the right shapes; checkpoint loading
/// fills it tensor by tensor.
template <typename T>
ModelParams<T> zero_params(const ModelConfig& cfg, Variant variant) {
  ModelParams<T> p = init_params<T>(cfg, variant, Rng(0));
  for_each_param(p, [](const std::string&, Tensor<T>& t) { t.fill(T(0)); });
  return p;
}

/// Re-house parameters under a (possibly different) variant. Tensors whose
/// checkpoint names exist in both layouts carry over bit for bit; tensors
/// unique to the target variant are drawn fresh from `rng`, tensors unique
/// to the source are dropped. This is the fine-tuning entry point: a
/// sequentially trained plain checkpoint becomes the starting point for a
/// shuffle run, with position tables or predictor heads added on top.
template <typename T>
ModelParams<T> adapt_params(const ModelParams<T>& source, Variant target, const Rng& rng) {
  std::map<std::string, const Tensor<T>*> have;
  for_each_param(source, [&have](const std::string& name, const Tensor<T>& t) {
    have.emplace(name, &t);
  });
  ModelParams<T> out = init_params<T>(source.cfg, target, rng);
  for_each_param(out, [&have](const std::string& name, Tensor<T>& t) {
    auto it = have.find(name);
    if (it != have.end()) t = *it->second;
  });
  return out;
}

// ---------------------------------------------------------------------------
// Execution orders
// ---------------------------------------------------------------------------

/// Layer execution order for one pass: 0-based layer ids, executed left to
/// right. A full permutation covers every layer exactly once; pruned
/// passes use a strict subset.
using ExecutionOrder = std::vector<int>;

inline ExecutionOrder identity_order(int layers) {
  ExecutionOrder o(static_cast<size_t>(layers));
  for (int i = 0; i < layers; ++i) o[static_cast<size_t>(i)] = i;
  return o;
}

/// Every id in [0, layers), each exactly once.
inline void validate_full_order(std::span<const int> order, int layers) {
  if (static_cast<int>(order.size()) != layers) {
    throw std::invalid_argument("execution order: expected " + std::to_string(layers) +
                                " entries, got " + std::to_string(order.size()));
  }
  std::vector<bool> seen(static_cast<size_t>(layers), false);
  for (int id : order) {
    if (id < 0 || id >= layers) {
      throw std::invalid_argument("execution order: layer id " + std::to_string(id + 1) +
                                  " out of range [1," + std::to_string(layers) + "]");
    }
    if (seen[static_cast<size_t>(id)]) {
      throw std::invalid_argument("execution order: duplicate layer id " + std::to_string(id + 1));
    }
    seen[static_cast<size_t>(id)] = true;
  }
}

/// Distinct ids within range; used for pruned passes.
inline void validate_suborder(std::span<const int> order, int layers) {
  if (order.empty() || static_cast<int>(order.size()) > layers) {
    throw std::invalid_argument("execution order: subset size must be in [1," +
                                std::to_string(layers) + "]");
  }
  std::vector<bool> seen(static_cast<size_t>(layers), false);
  for (int id : order) {
    if (id < 0 || id >= layers) {
      throw std::invalid_argument("execution order: layer id " + std::to_string(id + 1) +
                                  " out of range [1," + std::to_string(layers) + "]");
    }
    if (seen[static_cast<size_t>(id)]) {
      throw std::invalid_argument("execution order: duplicate layer id " + std::to_string(id + 1));
    }
    seen[static_cast<size_t>(id)] = true;
  }
}

// ---------------------------------------------------------------------------
// Patch extraction
// ---------------------------------------------------------------------------

/// Split an H x W x C image into N flattened patches. Patches are
/// enumerated row-major over the patch grid; within a patch the layout is
/// channel-major with row-major pixels inside each channel slice:
/// element (ch, r, c) lands at index ch*P*P + r*P + c.
template <typename T>
Tensor<T> patchify(const Tensor<T>& image, const ModelConfig& cfg) {
  if (image.rank() != 3 || image.dim(0) != cfg.image_h || image.dim(1) != cfg.image_w ||
      image.dim(2) != cfg.channels) {
    throw std::invalid_argument("patchify: image shape " + image.shape().str() +
                                " does not match config");
  }
  const int P = cfg.patch;
  const int grid_w = cfg.image_w / P;
  Tensor<T> out(Shape{cfg.tokens(), cfg.patch_len()});
  for (int n = 0; n < cfg.tokens(); ++n) {
    const int gy = n / grid_w;
    const int gx = n % grid_w;
    for (int ch = 0; ch < cfg.channels; ++ch) {
      for (int r = 0; r < P; ++r) {
        for (int c = 0; c < P; ++c) {
          out.at(n, ch * P * P + r * P + c) = image.at(gy * P + r, gx * P + c, ch);
        }
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Tape builders
// ---------------------------------------------------------------------------

template <typename T>
struct LayerNodes {
  NodeRef ln1_gain, ln1_bias;
  std::vector<NodeRef> qkv;
  NodeRef attn_out;
  NodeRef ln2_gain, ln2_bias;
  NodeRef fc1_weight, fc1_bias, fc2_weight, fc2_bias;
  NodeRef posenc_table, posenc_proj, posenc_ln_gain, posenc_ln_bias;
  NodeRef predictor_weight, predictor_ln_gain, predictor_ln_bias;
};

/// The model's parameters bound onto a tape as leaves. `flat` mirrors
/// param_registry order so gradients can be read back positionally.
template <typename T>
struct ParamNodes {
  const ModelConfig* cfg = nullptr;
  Variant variant = Variant::Plain;
  NodeRef embed_weight, pos_embed, class_token;
  std::vector<LayerNodes<T>> layers;
  NodeRef head_weight;
  std::vector<std::pair<std::string, NodeRef>> flat;
};

template <typename T>
ParamNodes<T> bind_params(Tape<T>& tape, const ModelParams<T>& p, bool requires_grad) {
  ParamNodes<T> n;
  n.cfg = &p.cfg;
  n.variant = p.variant;
  auto bind = [&](const std::string& name, const Tensor<T>& t) {
    NodeRef r = tape.leaf(t, requires_grad);
    n.flat.emplace_back(name, r);
    return r;
  };
  n.embed_weight = bind("patch_embed.weight", p.embed.weight);
  n.pos_embed = bind("pos_embed", p.embed.pos_embed);
  n.class_token = bind("class_token", p.embed.class_token);
  n.layers.resize(p.layers.size());
  for (size_t i = 0; i < p.layers.size(); ++i) {
    const std::string base = "layers." + std::to_string(i) + ".";
    const auto& l = p.layers[i];
    auto& ln = n.layers[i];
    ln.ln1_gain = bind(base + "ln1.gain", l.ln1.gain);
    ln.ln1_bias = bind(base + "ln1.bias", l.ln1.bias);
    for (size_t h = 0; h < l.qkv.size(); ++h) {
      ln.qkv.push_back(bind(base + "attn.qkv." + std::to_string(h), l.qkv[h]));
    }
    ln.attn_out = bind(base + "attn.out", l.attn_out);
    ln.ln2_gain = bind(base + "ln2.gain", l.ln2.gain);
    ln.ln2_bias = bind(base + "ln2.bias", l.ln2.bias);
    ln.fc1_weight = bind(base + "mlp.fc1.weight", l.fc1_weight);
    ln.fc1_bias = bind(base + "mlp.fc1.bias", l.fc1_bias);
    ln.fc2_weight = bind(base + "mlp.fc2.weight", l.fc2_weight);
    ln.fc2_bias = bind(base + "mlp.fc2.bias", l.fc2_bias);
    if (p.variant == Variant::PosEncoding) {
      ln.posenc_table = bind(base + "posenc.table", l.posenc.table);
      ln.posenc_proj = bind(base + "posenc.proj", l.posenc.proj);
      ln.posenc_ln_gain = bind(base + "posenc.ln.gain", l.posenc.ln.gain);
      ln.posenc_ln_bias = bind(base + "posenc.ln.bias", l.posenc.ln.bias);
    }
    if (p.variant == Variant::PosPredictor) {
      ln.predictor_weight = bind(base + "predictor.weight", l.predictor.weight);
      ln.predictor_ln_gain = bind(base + "predictor.ln.gain", l.predictor.ln.gain);
      ln.predictor_ln_bias = bind(base + "predictor.ln.bias", l.predictor.ln.bias);
    }
  }
  n.head_weight = bind("head.weight", p.head_weight);
  return n;
}

/// z_0: class token stacked over projected patches, plus the positional
/// embedding added to every row.
template <typename T>
NodeRef embed_input(Tape<T>& tape, const ParamNodes<T>& pn, NodeRef patches) {
  NodeRef projected = tape.matmul(patches, pn.embed_weight);
  NodeRef seq = tape.vstack_row(pn.class_token, projected);
  return tape.add(seq, pn.pos_embed);
}

/// Pre-norm attention block: z' = MSA(LN(z)) + z, out = MLP(LN(z')) + z',
/// with dropout after the MSA and MLP branches in training mode.
template <typename T>
NodeRef attention_layer_forward(Tape<T>& tape, const LayerNodes<T>& l, NodeRef z,
                                const ModelConfig& cfg, Rng& rng, bool training) {
  const int dh = cfg.head_dim();
  const T inv_sqrt_dh = T(1) / std::sqrt(static_cast<T>(dh));
  NodeRef x = tape.layer_norm(z, l.ln1_gain, l.ln1_bias);
  NodeRef heads_cat;
  for (int h = 0; h < cfg.heads; ++h) {
    NodeRef qkv = tape.matmul(x, l.qkv[static_cast<size_t>(h)]);
    NodeRef q = tape.slice_cols(qkv, 0, dh);
    NodeRef k = tape.slice_cols(qkv, dh, dh);
    NodeRef v = tape.slice_cols(qkv, 2 * dh, dh);
    NodeRef scores = tape.scale(tape.matmul(q, tape.transpose(k)), inv_sqrt_dh);
    NodeRef attn = tape.softmax_rows(scores);
    NodeRef sa = tape.matmul(attn, v);
    heads_cat = h == 0 ? sa : tape.concat_last(heads_cat, sa);
  }
  NodeRef msa = tape.matmul(heads_cat, l.attn_out);
  msa = tape.dropout(msa, static_cast<T>(cfg.dropout), rng, training);
  NodeRef z1 = tape.add(msa, z);
  NodeRef y = tape.layer_norm(z1, l.ln2_gain, l.ln2_bias);
  NodeRef hidden = tape.gelu(tape.add_rowvec(tape.matmul(y, l.fc1_weight), l.fc1_bias));
  NodeRef mlp = tape.add_rowvec(tape.matmul(hidden, l.fc2_weight), l.fc2_bias);
  mlp = tape.dropout(mlp, static_cast<T>(cfg.dropout), rng, training);
  return tape.add(mlp, z1);
}

/// Inject the layer's embedding for execution position `pos` (1-based):
/// append it to every token row, project back to D through LN + linear +
/// GELU + dropout, and keep a residual path to the unmodified input.
template <typename T>
NodeRef position_encoding_forward(Tape<T>& tape, const LayerNodes<T>& l, NodeRef z, int pos,
                                  const ModelConfig& cfg, Rng& rng, bool training) {
  if (pos < 1 || pos > cfg.layers) {
    throw std::invalid_argument("position_encoding_forward: position " + std::to_string(pos) +
                                " out of range [1," + std::to_string(cfg.layers) + "]");
  }
  NodeRef e = tape.row(l.posenc_table, pos - 1);
  NodeRef rep = tape.repeat_rows(e, cfg.seq_len());
  NodeRef h = tape.concat_last(z, rep);
  NodeRef x = tape.layer_norm(h, l.posenc_ln_gain, l.posenc_ln_bias);
  NodeRef g = tape.gelu(tape.matmul(x, l.posenc_proj));
  NodeRef d = tape.dropout(g, static_cast<T>(cfg.dropout), rng, training);
  return tape.add(d, z);
}

/// Which token row feeds the per-layer position predictor.
enum class PredictorInput { ClassToken, TokenMean };

/// Position logits u from the layer output: LN of the selected token, then
/// the D x L linear probe.
template <typename T>
NodeRef position_predict(Tape<T>& tape, const LayerNodes<T>& l, NodeRef z,
                         PredictorInput input = PredictorInput::ClassToken) {
  NodeRef tok;
  if (input == PredictorInput::ClassToken) {
    tok = tape.row(z, 0);
  } else {
    const Tensor<T>& zv = tape.value(z);
    const int rows = zv.dim(0);
    Tensor<T> avg(Shape{rows});
    avg.fill(T(1) / static_cast<T>(rows));
    tok = tape.matmul(tape.constant(std::move(avg)), z);
  }
  NodeRef x = tape.layer_norm(tok, l.predictor_ln_gain, l.predictor_ln_bias);
  return tape.matmul(x, l.predictor_weight);
}

/// Optional taps into a forward pass.
template <typename T>
struct ForwardTrace {
  /// Sequence state after every executed position (z_1 .. z_k); index t
  /// holds the output of the layer at position t+1.
  std::vector<NodeRef> z_after;
  /// Predictor logits and the 1-based position they should predict, one
  /// per executed layer (PosPredictor variant only).
  std::vector<std::pair<NodeRef, int>> predictor_logits;
};

/// Run the attention layers over z_0 in the given execution order and
/// apply the classification head to the class token. The order may be a
/// full permutation or a pruned subset; `validate_order` distinguishes
/// the two contracts.
template <typename T>
NodeRef model_forward(Tape<T>& tape, const ParamNodes<T>& pn, NodeRef z0,
                      std::span<const int> order, Rng& rng, bool training,
                      ForwardTrace<T>* trace = nullptr, bool full_order_required = true,
                      PredictorInput predictor_input = PredictorInput::ClassToken) {
  const ModelConfig& cfg = *pn.cfg;
  if (full_order_required) {
    validate_full_order(order, cfg.layers);
  } else {
    validate_suborder(order, cfg.layers);
  }
  NodeRef z = z0;
  int pos = 0;
  for (int layer_id : order) {
    ++pos;
    const LayerNodes<T>& l = pn.layers[static_cast<size_t>(layer_id)];
    if (pn.variant == Variant::PosEncoding) {
      z = position_encoding_forward(tape, l, z, pos, cfg, rng, training);
    }
    z = attention_layer_forward(tape, l, z, cfg, rng, training);
    if (trace) {
      trace->z_after.push_back(z);
      if (pn.variant == Variant::PosPredictor) {
        trace->predictor_logits.emplace_back(position_predict(tape, l, z, predictor_input), pos);
      }
    }
  }
  return tape.matmul(tape.row(z, 0), pn.head_weight);
}

/// Argmax with ties broken toward the lowest index.
template <typename T>
int argmax(std::span<const T> v) {
  int best = 0;
  for (size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[static_cast<size_t>(best)]) best = static_cast<int>(i);
  }
  return best;
}

template <typename T>
int argmax(const Tensor<T>& v) {
  return argmax(v.data());
}

}  // namespace lsf

#endif  // LSF_MODEL_HPP
