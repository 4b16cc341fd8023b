#ifndef LSF_TAPE_HPP
#define LSF_TAPE_HPP

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <deque>
#include <vector>

#include "lsf/rng.hpp"
#include "lsf/tensor.hpp"

namespace lsf {

/// Handle to a node on a Tape. Plain index, wrapped so it cannot be
/// confused with a loop counter or a layer id.
struct NodeRef {
  int i = -1;
  bool valid() const { return i >= 0; }
};

enum class Op : std::uint8_t {
  Leaf,
  MatMul,
  Transpose,
  Add,
  AddRowVec,
  Scale,
  SliceCols,
  ConcatLast,
  Row,
  VStackRow,
  RepeatRows,
  LayerNorm,
  Gelu,
  SoftmaxRows,
  Dropout,
  CrossEntropy,
};

/// Reverse-mode tape over dense tensors. Values are computed eagerly as
/// nodes are appended; backward() walks the node list in exact reverse of
/// the forward application order, which is what makes a permuted layer
/// order differentiate correctly. Parameters used multiple times simply
/// accumulate gradient on their leaf.
template <typename T>
class Tape {
 public:
  struct Node {
    Op op = Op::Leaf;
    std::array<int, 3> in{-1, -1, -1};
    int i0 = 0;    // op-specific: slice start, row index, repeat count, CE target
    int i1 = 0;    // op-specific: slice length
    T s = T(0);    // op-specific scalar: scale factor, LN epsilon, dropout p
    bool needs_grad = false;
    Tensor<T> val;
    Tensor<T> grad;    // allocated lazily during backward
    Tensor<T> saved;   // op-specific forward state (masks, probs, x_hat)
    Tensor<T> saved2;  // second forward state (LN reciprocal stddev)
  };

  Tape() = default;

  const std::deque<Node>& nodes() const { return nodes_; }
  size_t size() const { return nodes_.size(); }
  /// Drop every node appended after a recorded watermark; handles into the
  /// dropped region become invalid. Lets one tape serve many forward passes
  /// over the same bound parameters. Nodes live in a deque so references
  /// from value()/grad() stay valid while later nodes are appended.
  void truncate(size_t keep) {
    if (keep > nodes_.size()) {
      throw std::invalid_argument("Tape::truncate: watermark beyond tape size");
    }
    nodes_.resize(keep);
  }
  const Tensor<T>& value(NodeRef n) const { return nodes_[idx(n)].val; }
  const Tensor<T>& grad(NodeRef n) const {
    const Node& nd = nodes_[idx(n)];
    if (nd.grad.empty()) {
      throw std::logic_error("Tape: gradient not computed for this node");
    }
    return nd.grad;
  }
  /// Gradient of a leaf, as zeros if backward never reached it.
  Tensor<T> grad_or_zero(NodeRef n) const {
    const Node& nd = nodes_[idx(n)];
    return nd.grad.empty() ? Tensor<T>(nd.val.shape()) : nd.grad;
  }

  NodeRef leaf(Tensor<T> v, bool requires_grad) {
    Node n;
    n.op = Op::Leaf;
    n.val = std::move(v);
    n.needs_grad = requires_grad;
    return push(std::move(n));
  }
  NodeRef constant(Tensor<T> v) { return leaf(std::move(v), false); }

  NodeRef matmul(NodeRef a, NodeRef b) {
    const Tensor<T>& A = val(a);
    const Tensor<T>& B = val(b);
    if (A.rank() > 2 || B.rank() != 2) {
      throw std::invalid_argument("matmul: expects rank<=2 x rank 2, got " + A.shape().str() +
                                  " x " + B.shape().str());
    }
    if (A.shape().last() != B.dim(0)) {
      throw std::invalid_argument("matmul: inner dimensions disagree, " + A.shape().str() + " x " +
                                  B.shape().str());
    }
    Node n = binary(Op::MatMul, a, b);
    n.val = Tensor<T>(A.rank() == 1 ? Shape{B.dim(1)} : Shape{A.dim(0), B.dim(1)});
    n.val.mat().noalias() = A.mat() * B.mat();
    return push(std::move(n));
  }

  NodeRef transpose(NodeRef a) {
    const Tensor<T>& A = val(a);
    if (A.rank() != 2) throw std::invalid_argument("transpose: rank-2 only, got " + A.shape().str());
    Node n = unary(Op::Transpose, a);
    n.val = Tensor<T>(Shape{A.dim(1), A.dim(0)});
    n.val.mat() = A.mat().transpose();
    return push(std::move(n));
  }

  NodeRef add(NodeRef a, NodeRef b) {
    const Tensor<T>& A = val(a);
    const Tensor<T>& B = val(b);
    if (A.shape() != B.shape()) {
      throw std::invalid_argument("add: shape mismatch " + A.shape().str() + " vs " +
                                  B.shape().str());
    }
    Node n = binary(Op::Add, a, b);
    n.val = Tensor<T>(A.shape());
    n.val.array() = A.array() + B.array();
    return push(std::move(n));
  }

  /// Broadcast-add a rank-1 vector to every row of a matrix (bias add).
  NodeRef add_rowvec(NodeRef a, NodeRef b) {
    const Tensor<T>& A = val(a);
    const Tensor<T>& B = val(b);
    if (B.rank() != 1 || A.shape().last() != B.dim(0)) {
      throw std::invalid_argument("add_rowvec: " + A.shape().str() + " + " + B.shape().str());
    }
    Node n = binary(Op::AddRowVec, a, b);
    n.val = Tensor<T>(A.shape());
    n.val.mat() = A.mat().rowwise() + B.mat().row(0);
    return push(std::move(n));
  }

  NodeRef scale(NodeRef a, T s) {
    Node n = unary(Op::Scale, a);
    n.s = s;
    n.val = Tensor<T>(val(a).shape());
    n.val.array() = val(a).array() * s;
    return push(std::move(n));
  }

  /// Columns [start, start+len) of a rank-2 tensor.
  NodeRef slice_cols(NodeRef a, int start, int len) {
    const Tensor<T>& A = val(a);
    if (A.rank() != 2 || start < 0 || len <= 0 || start + len > A.dim(1)) {
      throw std::invalid_argument("slice_cols: invalid slice [" + std::to_string(start) + "," +
                                  std::to_string(start + len) + ") of " + A.shape().str());
    }
    Node n = unary(Op::SliceCols, a);
    n.i0 = start;
    n.i1 = len;
    n.val = Tensor<T>(Shape{A.dim(0), len});
    n.val.mat() = A.mat().middleCols(start, len);
    return push(std::move(n));
  }

  /// Concatenation along the last axis; leading dimensions must agree.
  NodeRef concat_last(NodeRef a, NodeRef b) {
    const Tensor<T>& A = val(a);
    const Tensor<T>& B = val(b);
    if (A.rank() != B.rank() || A.rank() > 2 ||
        (A.rank() == 2 && A.dim(0) != B.dim(0))) {
      throw std::invalid_argument("concat_last: leading shape mismatch " + A.shape().str() +
                                  " vs " + B.shape().str());
    }
    Node n = binary(Op::ConcatLast, a, b);
    const int da = A.shape().last();
    const int db = B.shape().last();
    n.val = Tensor<T>(A.rank() == 1 ? Shape{da + db} : Shape{A.dim(0), da + db});
    n.val.mat().leftCols(da) = A.mat();
    n.val.mat().rightCols(db) = B.mat();
    return push(std::move(n));
  }

  /// Row r of a rank-2 tensor, as a rank-1 tensor.
  NodeRef row(NodeRef a, int r) {
    const Tensor<T>& A = val(a);
    if (A.rank() != 2 || r < 0 || r >= A.dim(0)) {
      throw std::invalid_argument("row: index " + std::to_string(r) + " out of " + A.shape().str());
    }
    Node n = unary(Op::Row, a);
    n.i0 = r;
    n.val = Tensor<T>(Shape{A.dim(1)});
    n.val.mat() = A.mat().row(r);
    return push(std::move(n));
  }

  /// Stack a rank-1 vector on top of a rank-2 matrix.
  NodeRef vstack_row(NodeRef a, NodeRef b) {
    const Tensor<T>& A = val(a);
    const Tensor<T>& B = val(b);
    if (A.rank() != 1 || B.rank() != 2 || A.dim(0) != B.dim(1)) {
      throw std::invalid_argument("vstack_row: " + A.shape().str() + " over " + B.shape().str());
    }
    Node n = binary(Op::VStackRow, a, b);
    n.val = Tensor<T>(Shape{B.dim(0) + 1, B.dim(1)});
    n.val.mat().row(0) = A.mat().row(0);
    n.val.mat().bottomRows(B.dim(0)) = B.mat();
    return push(std::move(n));
  }

  /// Broadcast a rank-1 vector to `rows` identical rows.
  NodeRef repeat_rows(NodeRef a, int rows) {
    const Tensor<T>& A = val(a);
    if (A.rank() != 1 || rows <= 0) {
      throw std::invalid_argument("repeat_rows: needs rank-1 input, got " + A.shape().str());
    }
    Node n = unary(Op::RepeatRows, a);
    n.i0 = rows;
    n.val = Tensor<T>(Shape{rows, A.dim(0)});
    n.val.mat() = A.mat().row(0).replicate(rows, 1);
    return push(std::move(n));
  }

  /// Per-row normalization over the last dimension, then affine gain/bias.
  NodeRef layer_norm(NodeRef x, NodeRef gain, NodeRef bias, T eps = T(1e-5)) {
    const Tensor<T>& X = val(x);
    const Tensor<T>& G = val(gain);
    const Tensor<T>& B = val(bias);
    const int d = X.shape().last();
    if (G.rank() != 1 || B.rank() != 1 || G.dim(0) != d || B.dim(0) != d) {
      throw std::invalid_argument("layer_norm: gain/bias must be rank-1 of size " +
                                  std::to_string(d) + ", got " + G.shape().str() + " and " +
                                  B.shape().str());
    }
    if (eps <= T(0)) throw std::invalid_argument("layer_norm: eps must be positive");
    Node n;
    n.op = Op::LayerNorm;
    n.in = {x.i, gain.i, bias.i};
    n.s = eps;
    const auto rows = X.shape().rows_flat();
    n.val = Tensor<T>(X.shape());
    n.saved = Tensor<T>(X.shape());                              // x_hat
    n.saved2 = Tensor<T>(Shape{static_cast<int>(rows)});         // 1/stddev per row
    auto xm = X.mat();
    auto ym = n.val.mat();
    auto hm = n.saved.mat();
    for (Eigen::Index r = 0; r < rows; ++r) {
      const T mean = xm.row(r).mean();
      const T var = (xm.row(r).array() - mean).square().mean();
      const T rstd = T(1) / std::sqrt(var + eps);
      n.saved2[r] = rstd;
      hm.row(r) = (xm.row(r).array() - mean) * rstd;
      ym.row(r) = hm.row(r).array() * G.array().transpose() + B.array().transpose();
    }
    return push(std::move(n));
  }

  /// Exact-erf GELU: x * Phi(x).
  NodeRef gelu(NodeRef a) {
    Node n = unary(Op::Gelu, a);
    const Tensor<T>& A = val(a);
    n.val = Tensor<T>(A.shape());
    for (std::int64_t i = 0; i < A.size(); ++i) n.val[i] = A[i] * normal_cdf(A[i]);
    return push(std::move(n));
  }

  /// Row-wise softmax with max subtraction.
  NodeRef softmax_rows(NodeRef a) {
    Node n = unary(Op::SoftmaxRows, a);
    const Tensor<T>& A = val(a);
    n.val = Tensor<T>(A.shape());
    auto xm = A.mat();
    auto ym = n.val.mat();
    for (Eigen::Index r = 0; r < xm.rows(); ++r) {
      const T mx = xm.row(r).maxCoeff();
      ym.row(r) = (xm.row(r).array() - mx).exp();
      ym.row(r) /= ym.row(r).sum();
    }
    return push(std::move(n));
  }

  /// Inverted dropout: zero with probability p, scale survivors by 1/(1-p).
  /// Identity in eval mode. The realized mask is stored for backward.
  NodeRef dropout(NodeRef a, T p, Rng& rng, bool training) {
    if (!(p >= T(0) && p < T(1))) {
      throw std::invalid_argument("dropout: p must be in [0,1), got " + std::to_string(p));
    }
    const Tensor<T>& A = val(a);
    if (!training || p == T(0)) {
      Node n = unary(Op::Dropout, a);
      n.s = T(0);
      n.val = A;
      return push(std::move(n));
    }
    Node n = unary(Op::Dropout, a);
    n.s = p;
    n.val = Tensor<T>(A.shape());
    n.saved = Tensor<T>(A.shape());
    const T keep_scale = T(1) / (T(1) - p);
    for (std::int64_t i = 0; i < A.size(); ++i) {
      const T m = rng.next_bernoulli(static_cast<double>(p)) ? T(0) : keep_scale;
      n.saved[i] = m;
      n.val[i] = A[i] * m;
    }
    return push(std::move(n));
  }

  /// -log softmax(logits)[target], as a scalar (shape [1]) node.
  NodeRef cross_entropy(NodeRef logits, int target) {
    const Tensor<T>& L = val(logits);
    if (L.rank() != 1) {
      throw std::invalid_argument("cross_entropy: logits must be rank-1, got " + L.shape().str());
    }
    if (target < 0 || target >= L.dim(0)) {
      throw std::invalid_argument("cross_entropy: target " + std::to_string(target) +
                                  " out of range [0," + std::to_string(L.dim(0)) + ")");
    }
    Node n = unary(Op::CrossEntropy, logits);
    n.i0 = target;
    n.saved = Tensor<T>(L.shape());  // softmax probabilities
    const T mx = L.mat().maxCoeff();
    n.saved.array() = (L.array() - mx).exp();
    const T z = n.saved.array().sum();
    n.saved.array() /= z;
    n.val = Tensor<T>::scalar(std::log(z) - (L[target] - mx));
    return push(std::move(n));
  }

  /// Reverse-topological gradient accumulation from a scalar loss node.
  void backward(NodeRef loss) {
    Node& ln = nodes_[idx(loss)];
    if (ln.val.size() != 1) {
      throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                  ln.val.shape().str());
    }
    for (Node& n : nodes_) n.grad = Tensor<T>();
    ln.grad = Tensor<T>::scalar(T(1));
    for (int i = idx(loss); i >= 0; --i) {
      Node& n = nodes_[static_cast<size_t>(i)];
      if (!n.needs_grad || n.grad.empty()) continue;
      backward_node(n);
    }
  }

  static T normal_cdf(T x) {
    return T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
  }
  static T normal_pdf(T x) {
    return std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * std::numbers::pi_v<T>);
  }

 private:
  static size_t idx(NodeRef n) { return static_cast<size_t>(n.i); }
  const Tensor<T>& val(NodeRef n) const { return nodes_[idx(n)].val; }

  Node unary(Op op, NodeRef a) {
    Node n;
    n.op = op;
    n.in = {a.i, -1, -1};
    return n;
  }
  Node binary(Op op, NodeRef a, NodeRef b) {
    Node n;
    n.op = op;
    n.in = {a.i, b.i, -1};
    return n;
  }

  NodeRef push(Node n) {
    if (n.op != Op::Leaf) {
      for (int i : n.in) {
        if (i >= 0 && nodes_[static_cast<size_t>(i)].needs_grad) n.needs_grad = true;
      }
    }
    if (!all_finite(n.val)) {
      throw std::runtime_error("Tape: non-finite value produced by op " +
                               std::to_string(static_cast<int>(n.op)));
    }
    nodes_.push_back(std::move(n));
    return NodeRef{static_cast<int>(nodes_.size()) - 1};
  }

  Tensor<T>& grad_buffer(int i) {
    Node& n = nodes_[static_cast<size_t>(i)];
    if (n.grad.empty()) n.grad = Tensor<T>(n.val.shape());
    return n.grad;
  }
  bool wants_grad(int i) const { return i >= 0 && nodes_[static_cast<size_t>(i)].needs_grad; }

  void backward_node(Node& n) {
    const Tensor<T>& g = n.grad;
    switch (n.op) {
      case Op::Leaf:
        break;
      case Op::MatMul: {
        const Tensor<T>& A = nodes_[n.in[0]].val;
        const Tensor<T>& B = nodes_[n.in[1]].val;
        if (wants_grad(n.in[0])) grad_buffer(n.in[0]).mat().noalias() += g.mat() * B.mat().transpose();
        if (wants_grad(n.in[1])) grad_buffer(n.in[1]).mat().noalias() += A.mat().transpose() * g.mat();
        break;
      }
      case Op::Transpose:
        if (wants_grad(n.in[0])) grad_buffer(n.in[0]).mat() += g.mat().transpose();
        break;
      case Op::Add:
        if (wants_grad(n.in[0])) grad_buffer(n.in[0]).array() += g.array();
        if (wants_grad(n.in[1])) grad_buffer(n.in[1]).array() += g.array();
        break;
      case Op::AddRowVec:
        if (wants_grad(n.in[0])) grad_buffer(n.in[0]).array() += g.array();
        if (wants_grad(n.in[1])) grad_buffer(n.in[1]).mat() += g.mat().colwise().sum();
        break;
      case Op::Scale:
        if (wants_grad(n.in[0])) grad_buffer(n.in[0]).array() += g.array() * n.s;
        break;
      case Op::SliceCols:
        if (wants_grad(n.in[0])) grad_buffer(n.in[0]).mat().middleCols(n.i0, n.i1) += g.mat();
        break;
      case Op::ConcatLast: {
        const int da = nodes_[n.in[0]].val.shape().last();
        const int db = nodes_[n.in[1]].val.shape().last();
        if (wants_grad(n.in[0])) grad_buffer(n.in[0]).mat() += g.mat().leftCols(da);
        if (wants_grad(n.in[1])) grad_buffer(n.in[1]).mat() += g.mat().rightCols(db);
        break;
      }
      case Op::Row:
        if (wants_grad(n.in[0])) grad_buffer(n.in[0]).mat().row(n.i0) += g.mat().row(0);
        break;
      case Op::VStackRow: {
        const int rows_b = nodes_[n.in[1]].val.dim(0);
        if (wants_grad(n.in[0])) grad_buffer(n.in[0]).mat().row(0) += g.mat().row(0);
        if (wants_grad(n.in[1])) grad_buffer(n.in[1]).mat() += g.mat().bottomRows(rows_b);
        break;
      }
      case Op::RepeatRows:
        if (wants_grad(n.in[0])) grad_buffer(n.in[0]).mat() += g.mat().colwise().sum();
        break;
      case Op::LayerNorm: {
        const Tensor<T>& G = nodes_[n.in[1]].val;
        const auto rows = n.val.shape().rows_flat();
        auto gm = g.mat();
        auto hm = n.saved.mat();
        if (wants_grad(n.in[0])) {
          auto dxm = grad_buffer(n.in[0]).mat();
          for (Eigen::Index r = 0; r < rows; ++r) {
            // dyg = dL/dy * gain, per element of the row
            Eigen::Array<T, 1, Eigen::Dynamic> dyg =
                gm.row(r).array() * G.mat().row(0).array();
            const T m1 = dyg.mean();
            const T m2 = (dyg * hm.row(r).array()).mean();
            dxm.row(r).array() +=
                n.saved2[r] * (dyg - m1 - hm.row(r).array() * m2);
          }
        }
        if (wants_grad(n.in[1]))
          grad_buffer(n.in[1]).mat() += (gm.array() * hm.array()).colwise().sum().matrix();
        if (wants_grad(n.in[2])) grad_buffer(n.in[2]).mat() += gm.colwise().sum();
        break;
      }
      case Op::Gelu: {
        const Tensor<T>& X = nodes_[n.in[0]].val;
        if (wants_grad(n.in[0])) {
          Tensor<T>& gx = grad_buffer(n.in[0]);
          for (std::int64_t i = 0; i < X.size(); ++i) {
            gx[i] += g[i] * (normal_cdf(X[i]) + X[i] * normal_pdf(X[i]));
          }
        }
        break;
      }
      case Op::SoftmaxRows: {
        if (wants_grad(n.in[0])) {
          auto ym = n.val.mat();
          auto gm = g.mat();
          auto gx = grad_buffer(n.in[0]).mat();
          for (Eigen::Index r = 0; r < ym.rows(); ++r) {
            const T dot = (gm.row(r).array() * ym.row(r).array()).sum();
            gx.row(r).array() += ym.row(r).array() * (gm.row(r).array() - dot);
          }
        }
        break;
      }
      case Op::Dropout:
        if (wants_grad(n.in[0])) {
          if (n.s == T(0)) {
            grad_buffer(n.in[0]).array() += g.array();
          } else {
            grad_buffer(n.in[0]).array() += g.array() * n.saved.array();
          }
        }
        break;
      case Op::CrossEntropy:
        if (wants_grad(n.in[0])) {
          // d loss / d logits = softmax(logits) - onehot(target)
          Tensor<T>& gx = grad_buffer(n.in[0]);
          gx.array() += g[0] * n.saved.array();
          gx[n.i0] -= g[0];
        }
        break;
    }
  }

  std::deque<Node> nodes_;
};

}  // namespace lsf

#endif  // LSF_TAPE_HPP
