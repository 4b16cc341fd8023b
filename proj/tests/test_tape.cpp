#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <string>
#include <vector>

#include "lsf/gradcheck.hpp"
#include "lsf/model.hpp"
#include "lsf/rng.hpp"
#include "lsf/tape.hpp"
#include "lsf/tensor.hpp"
#include "support/helpers.hpp"

using namespace lsf;
using testutil::op_grad_check;
using testutil::random_tensor;
using testutil::sum_all;

namespace {

/// Run `fn`, which must throw std::invalid_argument, and return its message.
template <typename Fn>
std::string thrown_message(Fn&& fn) {
  try {
    fn();
  } catch (const std::invalid_argument& e) {
    return e.what();
  }
  FAIL("expected std::invalid_argument");
  return {};
}

}  // namespace

TEST_CASE("matmul computes products and validates shapes") {
  Tape<float> tape;
  NodeRef eye = tape.constant(Tensor<float>(Shape{2, 2}, {1, 0, 0, 1}));
  NodeRef m = tape.constant(Tensor<float>(Shape{2, 2}, {1, 2, 3, 4}));
  NodeRef prod = tape.matmul(eye, m);
  CHECK(max_abs_diff(tape.value(prod), tape.value(m)) == 0.0f);

  NodeRef selector = tape.constant(Tensor<float>(Shape{2, 2}, {1, 0, 0, 0}));
  NodeRef sel = tape.matmul(selector, tape.constant(Tensor<float>(Shape{2, 2}, {5, 6, 7, 8})));
  CHECK(tape.value(sel).at(0, 0) == 5.0f);
  CHECK(tape.value(sel).at(0, 1) == 6.0f);
  CHECK(tape.value(sel).at(1, 0) == 0.0f);
  CHECK(tape.value(sel).at(1, 1) == 0.0f);

  // both operand shapes must appear in the mismatch message
  const std::string msg = thrown_message([&] {
    tape.matmul(tape.constant(Tensor<float>(Shape{2, 3})),
                tape.constant(Tensor<float>(Shape{2, 3})));
  });
  CHECK(msg.find("[2x3]") != std::string::npos);
}

TEST_CASE("matmul gradients match finite differences") {
  Tensor<float> a = random_tensor<float>(Shape{3, 4}, Rng(1));
  Tensor<float> b = random_tensor<float>(Shape{4, 2}, Rng(2));
  auto report = op_grad_check<float>(
      {{"a", &a}, {"b", &b}},
      [](Tape<float>& t, const std::vector<NodeRef>& leaves) {
        return sum_all(t, t.matmul(leaves[0], leaves[1]));
      });
  CHECK(report.passed());
}

TEST_CASE("transpose flips and backpropagates") {
  Tape<float> tape;
  NodeRef a = tape.constant(Tensor<float>(Shape{2, 3}, {1, 2, 3, 4, 5, 6}));
  const Tensor<float>& tr = tape.value(tape.transpose(a));
  CHECK(tr.shape() == Shape{3, 2});
  CHECK(tr.at(2, 1) == 6.0f);

  Tensor<float> w = random_tensor<float>(Shape{3, 2}, Rng(3));
  auto report = op_grad_check<float>(
      {{"w", &w}}, [](Tape<float>& t, const std::vector<NodeRef>& leaves) {
        Tensor<float> m(Shape{3, 2}, {1, -2, 0.5f, 4, -1, 2});
        // force a non-trivial use of the transposed value
        return sum_all(t, t.matmul(t.transpose(leaves[0]), t.constant(std::move(m))));
      });
  CHECK(report.passed());
}

TEST_CASE("add and add_rowvec broadcast correctly") {
  Tape<float> tape;
  NodeRef a = tape.constant(Tensor<float>(Shape{2, 2}, {1, 2, 3, 4}));
  NodeRef b = tape.constant(Tensor<float>(Shape{2, 2}, {10, 20, 30, 40}));
  CHECK(tape.value(tape.add(a, b)).at(1, 1) == 44.0f);
  CHECK_THROWS_AS(tape.add(a, tape.constant(Tensor<float>(Shape{2, 3}))),
                  std::invalid_argument);

  NodeRef v = tape.constant(Tensor<float>(Shape{2}, {100, 200}));
  const Tensor<float>& s = tape.value(tape.add_rowvec(a, v));
  CHECK(s.at(0, 0) == 101.0f);
  CHECK(s.at(1, 1) == 204.0f);

  Tensor<float> x = random_tensor<float>(Shape{3, 4}, Rng(4));
  Tensor<float> bias = random_tensor<float>(Shape{4}, Rng(5));
  auto report = op_grad_check<float>(
      {{"x", &x}, {"bias", &bias}},
      [](Tape<float>& t, const std::vector<NodeRef>& leaves) {
        return sum_all(t, t.gelu(t.add_rowvec(leaves[0], leaves[1])));
      });
  CHECK(report.passed());
}

TEST_CASE("scale, slice_cols, row, vstack_row and repeat_rows") {
  Tape<float> tape;
  NodeRef a = tape.constant(Tensor<float>(Shape{2, 3}, {1, 2, 3, 4, 5, 6}));
  CHECK(tape.value(tape.scale(a, 0.5f)).at(1, 2) == 3.0f);

  const Tensor<float>& sl = tape.value(tape.slice_cols(a, 1, 2));
  CHECK(sl.shape() == Shape{2, 2});
  CHECK(sl.at(0, 0) == 2.0f);
  CHECK(sl.at(1, 1) == 6.0f);
  CHECK_THROWS_AS(tape.slice_cols(a, 2, 2), std::invalid_argument);

  const Tensor<float>& r = tape.value(tape.row(a, 1));
  CHECK(r.shape() == Shape{3});
  CHECK(r[0] == 4.0f);
  CHECK_THROWS_AS(tape.row(a, 2), std::invalid_argument);

  NodeRef top = tape.constant(Tensor<float>(Shape{3}, {9, 9, 9}));
  const Tensor<float>& st = tape.value(tape.vstack_row(top, a));
  CHECK(st.shape() == Shape{3, 3});
  CHECK(st.at(0, 1) == 9.0f);
  CHECK(st.at(1, 0) == 1.0f);

  const Tensor<float>& rep = tape.value(tape.repeat_rows(top, 4));
  CHECK(rep.shape() == Shape{4, 3});
  CHECK(rep.at(3, 2) == 9.0f);
}

TEST_CASE("structural op gradients match finite differences") {
  // the summed objective spans ~20 entries, so this one runs in double to
  // keep finite-difference rounding noise well under the threshold
  Tensor<double> x = random_tensor<double>(Shape{3, 4}, Rng(6));
  Tensor<double> v = random_tensor<double>(Shape{4}, Rng(7));
  auto report = op_grad_check<double>(
      {{"x", &x}, {"v", &v}},
      [](Tape<double>& t, const std::vector<NodeRef>& leaves) {
        NodeRef stacked = t.vstack_row(leaves[1], leaves[0]);       // 4x4
        NodeRef sliced = t.slice_cols(stacked, 1, 3);               // 4x3
        NodeRef rep = t.repeat_rows(t.row(stacked, 0), 2);          // 2x4
        NodeRef left = t.scale(sum_all(t, t.gelu(sliced)), 0.75);
        NodeRef right = sum_all(t, t.gelu(rep));
        return t.add(left, right);
      },
      1e-4);
  CHECK(report.passed());
  CHECK(report.worst() < 1e-6);  // double-precision FD should be clean
}

TEST_CASE("concat_last lays out row-major and splits gradients") {
  Tape<float> tape;
  NodeRef a1 = tape.constant(Tensor<float>(Shape{2}, {1, 2}));
  NodeRef b1 = tape.constant(Tensor<float>(Shape{1}, {3}));
  const Tensor<float>& c1 = tape.value(tape.concat_last(a1, b1));
  CHECK(c1.shape() == Shape{3});
  CHECK(c1[0] == 1.0f);
  CHECK(c1[2] == 3.0f);

  NodeRef a2 = tape.constant(Tensor<float>(Shape{2, 2}, {1, 2, 3, 4}));
  NodeRef b2 = tape.constant(Tensor<float>(Shape{2, 1}, {7, 8}));
  const Tensor<float>& c2 = tape.value(tape.concat_last(a2, b2));
  CHECK(c2.shape() == Shape{2, 3});
  CHECK(c2.at(0, 2) == 7.0f);
  CHECK(c2.at(1, 0) == 3.0f);
  CHECK_THROWS_AS(tape.concat_last(a2, tape.constant(Tensor<float>(Shape{3, 1}))),
                  std::invalid_argument);

  // gradient of sum(concat) is all-ones into each input
  Tape<float> g;
  NodeRef la = g.leaf(Tensor<float>(Shape{2, 2}, {1, 2, 3, 4}), true);
  NodeRef lb = g.leaf(Tensor<float>(Shape{2, 1}, {7, 8}), true);
  g.backward(sum_all(g, g.concat_last(la, lb)));
  CHECK(max_abs_diff(g.grad(la), Tensor<float>::full(Shape{2, 2}, 1.0f)) == 0.0f);
  CHECK(max_abs_diff(g.grad(lb), Tensor<float>::full(Shape{2, 1}, 1.0f)) == 0.0f);
}

TEST_CASE("layer_norm normalizes rows and applies the affine pair") {
  Tape<float> tape;
  NodeRef gain = tape.constant(Tensor<float>::full(Shape{4}, 1.0f));
  NodeRef bias = tape.constant(Tensor<float>(Shape{4}));
  NodeRef constant_row = tape.constant(Tensor<float>(Shape{4}, {4, 4, 4, 4}));
  const Tensor<float>& zeroed = tape.value(tape.layer_norm(constant_row, gain, bias));
  CHECK(std::abs(zeroed[0]) < 1e-6f);

  NodeRef gain2 = tape.constant(Tensor<float>::full(Shape{2}, 1.0f));
  NodeRef bias2 = tape.constant(Tensor<float>(Shape{2}));
  NodeRef pm = tape.constant(Tensor<float>(Shape{2}, {1, -1}));
  const Tensor<float>& sym = tape.value(tape.layer_norm(pm, gain2, bias2));
  CHECK(sym[0] == doctest::Approx(1.0f).epsilon(1e-4));
  CHECK(sym[1] == doctest::Approx(-1.0f).epsilon(1e-4));

  // affine parameters act after normalization
  NodeRef g3 = tape.constant(Tensor<float>(Shape{2}, {2, 2}));
  NodeRef b3 = tape.constant(Tensor<float>(Shape{2}, {10, 10}));
  const Tensor<float>& aff = tape.value(tape.layer_norm(pm, g3, b3));
  CHECK(aff[0] == doctest::Approx(12.0f).epsilon(1e-4));

  CHECK_THROWS_AS(tape.layer_norm(pm, gain, bias), std::invalid_argument);
}

TEST_CASE("layer_norm gradients match finite differences") {
  // double keeps the finite differences quiet through the rstd chain
  Tensor<double> x = random_tensor<double>(Shape{3, 5}, Rng(8));
  Tensor<double> gain = random_tensor<double>(Shape{5}, Rng(9));
  Tensor<double> bias = random_tensor<double>(Shape{5}, Rng(10));
  auto report = op_grad_check<double>(
      {{"x", &x}, {"gain", &gain}, {"bias", &bias}},
      [](Tape<double>& t, const std::vector<NodeRef>& leaves) {
        return sum_all(t, t.gelu(t.layer_norm(leaves[0], leaves[1], leaves[2])));
      },
      1e-4);
  CHECK(report.passed());
}

TEST_CASE("gelu matches the exact normal CDF formulation") {
  Tape<float> tape;
  NodeRef x = tape.constant(Tensor<float>(Shape{3}, {0.0f, 1.0f, -10.0f}));
  const Tensor<float>& y = tape.value(tape.gelu(x));
  CHECK(y[0] == 0.0f);
  CHECK(y[1] == doctest::Approx(0.841345f).epsilon(1e-5));
  CHECK(std::abs(y[2]) < 1e-6f);

  Tensor<float> w = random_tensor<float>(Shape{2, 4}, Rng(11));
  auto report = op_grad_check<float>(
      {{"w", &w}}, [](Tape<float>& t, const std::vector<NodeRef>& leaves) {
        return sum_all(t, t.gelu(leaves[0]));
      });
  CHECK(report.passed());
}

TEST_CASE("softmax_rows is stable and rows sum to one") {
  Tape<float> tape;
  NodeRef z = tape.constant(Tensor<float>(Shape{2}, {0, 0}));
  const Tensor<float>& half = tape.value(tape.softmax_rows(z));
  CHECK(half[0] == doctest::Approx(0.5f));
  CHECK(half[1] == doctest::Approx(0.5f));

  NodeRef big = tape.constant(Tensor<float>(Shape{2}, {1000, 0}));
  const Tensor<float>& sat = tape.value(tape.softmax_rows(big));
  CHECK(all_finite(sat));
  CHECK(sat[0] == doctest::Approx(1.0f));
  CHECK(sat[1] == doctest::Approx(0.0f));

  NodeRef m = tape.constant(random_tensor<float>(Shape{4, 6}, Rng(12)));
  const Tensor<float>& sm = tape.value(tape.softmax_rows(m));
  for (int r = 0; r < 4; ++r) {
    float sum = 0.0f;
    for (int c = 0; c < 6; ++c) {
      CHECK(sm.at(r, c) > 0.0f);
      CHECK(sm.at(r, c) < 1.0f);
      sum += sm.at(r, c);
    }
    CHECK(sum == doctest::Approx(1.0f).epsilon(1e-6));
  }

  Tensor<double> w = random_tensor<double>(Shape{3, 4}, Rng(13));
  auto report = op_grad_check<double>(
      {{"w", &w}}, [](Tape<double>& t, const std::vector<NodeRef>& leaves) {
        Tensor<double> mix = random_tensor<double>(Shape{4, 1}, Rng(14));
        return sum_all(t, t.gelu(t.matmul(t.softmax_rows(leaves[0]), t.constant(std::move(mix)))));
      },
      1e-4);
  CHECK(report.passed());
}

TEST_CASE("dropout: identity cases, drop rate, and frozen-mask gradients") {
  Rng rng(21);
  Tape<float> tape;
  NodeRef x = tape.constant(Tensor<float>(Shape{2, 2}, {1, 2, 3, 4}));
  CHECK(max_abs_diff(tape.value(tape.dropout(x, 0.0f, rng, true)), tape.value(x)) == 0.0f);
  CHECK(max_abs_diff(tape.value(tape.dropout(x, 0.9f, rng, false)), tape.value(x)) == 0.0f);
  CHECK_THROWS_AS(tape.dropout(x, 1.0f, rng, true), std::invalid_argument);
  CHECK_THROWS_AS(tape.dropout(x, -0.1f, rng, true), std::invalid_argument);

  // observed drop fraction over 1e5 elements
  Tape<float> big;
  NodeRef ones = big.constant(Tensor<float>::full(Shape{100000}, 1.0f));
  Rng drop_rng(22);
  const Tensor<float>& dropped = big.value(big.dropout(ones, 0.5f, drop_rng, true));
  int zeros = 0;
  for (std::int64_t i = 0; i < dropped.size(); ++i) zeros += dropped[i] == 0.0f ? 1 : 0;
  CHECK(std::abs(zeros / 1e5 - 0.5) < 0.01);

  // gradient of sum through a frozen mask is exactly mask / (1-p)
  Tape<float> g;
  NodeRef leaf = g.leaf(Tensor<float>::full(Shape{100}, 1.0f), true);
  Rng mask_rng(23);
  NodeRef d = g.dropout(leaf, 0.5f, mask_rng, true);
  g.backward(sum_all(g, d));
  const Tensor<float>& grad = g.grad(leaf);
  const Tensor<float>& out = g.value(d);
  for (std::int64_t i = 0; i < grad.size(); ++i) {
    CHECK(grad[i] == (out[i] == 0.0f ? 0.0f : 2.0f));
  }

  // the same seed freezes the mask across rebuilds, so FD applies
  Tensor<float> w = random_tensor<float>(Shape{4, 4}, Rng(24));
  auto report = op_grad_check<float>(
      {{"w", &w}}, [](Tape<float>& t, const std::vector<NodeRef>& leaves) {
        Rng frozen(25);
        return sum_all(t, t.dropout(leaves[0], 0.5f, frozen, true));
      });
  CHECK(report.passed());
}

TEST_CASE("cross_entropy values, analytic gradient identity, and errors") {
  Tape<float> tape;
  NodeRef uniform = tape.constant(Tensor<float>(Shape{10}));
  CHECK(tape.value(tape.cross_entropy(uniform, 3))[0] ==
        doctest::Approx(std::log(10.0f)).epsilon(1e-6));

  Tensor<float> confident(Shape{4});
  confident[2] = 1e4f;
  NodeRef conf = tape.constant(std::move(confident));
  CHECK(tape.value(tape.cross_entropy(conf, 2))[0] == doctest::Approx(0.0f));

  CHECK_THROWS_AS(tape.cross_entropy(uniform, 10), std::invalid_argument);
  CHECK_THROWS_AS(tape.cross_entropy(uniform, -1), std::invalid_argument);

  // gradient equals softmax(logits) - onehot(target)
  Tape<float> g;
  Tensor<float> logits = random_tensor<float>(Shape{5}, Rng(31));
  NodeRef leaf = g.leaf(logits, true);
  NodeRef sm = g.softmax_rows(leaf);
  g.backward(g.cross_entropy(leaf, 2));
  const Tensor<float>& grad = g.grad(leaf);
  const Tensor<float>& probs = g.value(sm);
  for (int i = 0; i < 5; ++i) {
    const float expected = probs[i] - (i == 2 ? 1.0f : 0.0f);
    CHECK(grad[i] == doctest::Approx(expected).epsilon(1e-5));
  }

  Tensor<float> w = random_tensor<float>(Shape{6}, Rng(32));
  auto report = op_grad_check<float>(
      {{"w", &w}}, [](Tape<float>& t, const std::vector<NodeRef>& leaves) {
        return t.cross_entropy(leaves[0], 4);
      });
  CHECK(report.passed());
}

TEST_CASE("backward: linear gradient, reuse accumulation, scalar-loss guard") {
  // loss = sum(w · x) with fixed x: grad w = x (s copied through matmul)
  Tape<float> tape;
  Tensor<float> x(Shape{3, 1}, {2, -1, 4});
  NodeRef w = tape.leaf(Tensor<float>(Shape{3}, {1, 1, 1}), true);
  tape.backward(tape.matmul(w, tape.constant(x)));
  CHECK(max_abs_diff(tape.grad(w), Tensor<float>(Shape{3}, {2, -1, 4})) == 0.0f);

  // a parameter used twice accumulates twice the single-use gradient
  Tape<float> twice;
  NodeRef w2 = twice.leaf(Tensor<float>(Shape{3}, {1, 2, 3}), true);
  NodeRef used_twice = twice.add(w2, w2);
  twice.backward(sum_all(twice, used_twice));
  CHECK(max_abs_diff(twice.grad(w2), Tensor<float>::full(Shape{3}, 2.0f)) == 0.0f);

  // k-fold reuse equals k-fold accumulation
  Tape<float> kfold;
  NodeRef w3 = kfold.leaf(Tensor<float>(Shape{2, 2}, {1, 0, 0, 1}), true);
  NodeRef acc = kfold.matmul(w3, kfold.constant(Tensor<float>(Shape{2, 2}, {1, 2, 3, 4})));
  for (int k = 1; k < 3; ++k) {
    acc = kfold.add(acc, kfold.matmul(w3, kfold.constant(Tensor<float>(Shape{2, 2}, {1, 2, 3, 4}))));
  }
  kfold.backward(sum_all(kfold, acc));
  Tape<float> once;
  NodeRef w4 = once.leaf(Tensor<float>(Shape{2, 2}, {1, 0, 0, 1}), true);
  once.backward(sum_all(once, once.matmul(w4, once.constant(Tensor<float>(Shape{2, 2}, {1, 2, 3, 4})))));
  Tensor<float> three_times = once.grad(w4);
  three_times.array() *= 3.0f;
  CHECK(max_abs_diff(kfold.grad(w3), three_times) < 1e-6f);

  // non-scalar loss is rejected
  Tape<float> bad;
  NodeRef vec = bad.leaf(Tensor<float>(Shape{3}, {1, 2, 3}), true);
  CHECK_THROWS_AS(bad.backward(vec), std::invalid_argument);

  // asking for a gradient that was never computed is a logic error
  Tape<float> cold;
  NodeRef c = cold.leaf(Tensor<float>(Shape{2}), true);
  CHECK_THROWS_AS(cold.grad(c), std::logic_error);
}

TEST_CASE("grad_check passes a quadratic and flags a corrupted gradient") {
  Tensor<float> w = Tensor<float>::scalar(3.0f);
  std::vector<std::pair<std::string, Tensor<float>*>> params{{"w", &w}};
  auto eval = [&]() -> float { return w[0] * w[0]; };
  auto analytic = [&]() { return std::vector<Tensor<float>>{Tensor<float>::scalar(2.0f * w[0])}; };
  auto report = grad_check<float>(params, eval, analytic);
  CHECK(report.passed());
  CHECK(report.per_param.size() == 1);
  CHECK(report.per_param[0].entries_checked == 1);

  auto corrupted = [&]() {
    return std::vector<Tensor<float>>{Tensor<float>::scalar(4.0f * w[0])};
  };
  CHECK_FALSE(grad_check<float>(params, eval, corrupted).passed());
  CHECK_THROWS_AS(grad_check<float>(params, eval, analytic, -1.0f), std::invalid_argument);
}

TEST_CASE("grad_check_sampled caps the probed entries per tensor") {
  Tensor<double> w = random_tensor<double>(Shape{10, 10}, Rng(41));
  std::vector<std::pair<std::string, Tensor<double>*>> params{{"w", &w}};
  auto eval = [&]() -> double {
    double s = 0.0;
    for (std::int64_t i = 0; i < w.size(); ++i) s += w[i] * w[i];
    return s;
  };
  auto analytic = [&]() {
    Tensor<double> g(w.shape());
    for (std::int64_t i = 0; i < w.size(); ++i) g[i] = 2.0 * w[i];
    return std::vector<Tensor<double>>{g};
  };
  auto report = grad_check_sampled<double>(params, eval, analytic, Rng(7), 12);
  CHECK(report.passed());
  CHECK(report.per_param[0].entries_checked == 12);
  // small tensors are still checked exhaustively
  Tensor<double> tiny = random_tensor<double>(Shape{3}, Rng(42));
  std::vector<std::pair<std::string, Tensor<double>*>> tp{{"tiny", &tiny}};
  auto teval = [&]() -> double { return tiny[0] + tiny[1] + tiny[2]; };
  auto tanalytic = [&]() {
    return std::vector<Tensor<double>>{Tensor<double>::full(Shape{3}, 1.0)};
  };
  auto tiny_report = grad_check_sampled<double>(tp, teval, tanalytic, Rng(8), 12);
  CHECK(tiny_report.per_param[0].entries_checked == 3);
  CHECK(tiny_report.passed());
}

TEST_CASE("the full two-layer model loss passes an exhaustive gradient check") {
  const ModelConfig cfg = testutil::tiny_config();
  ModelParams<double> params = init_params<double>(cfg, Variant::Plain, Rng(51));
  Tensor<double> image = testutil::random_image<double>(cfg, Rng(52));
  // permuted order: this is the literal check that backward respects the
  // forward order that was actually executed
  const ExecutionOrder order{1, 0};
  auto report = testutil::model_grad_check<double>(params, image, 1, order,
                                                   /*full_order=*/true,
                                                   /*with_predictors=*/false,
                                                   /*sample_cap=*/0, Rng(53), 1e-4);
  CHECK(report.passed());
  CHECK(report.per_param.size() == param_registry(params).size());
}

TEST_CASE("tape size and truncate support reuse across passes") {
  Tape<float> tape;
  NodeRef a = tape.leaf(Tensor<float>(Shape{2, 2}, {1, 2, 3, 4}), false);
  const size_t watermark = tape.size();
  CHECK(watermark == 1);
  (void)tape.scale(a, 2.0f);
  (void)tape.scale(a, 3.0f);
  CHECK(tape.size() == 3);
  tape.truncate(watermark);
  CHECK(tape.size() == 1);
  // the surviving node is still usable
  CHECK(tape.value(tape.scale(a, 5.0f)).at(0, 1) == 10.0f);
  CHECK_THROWS_AS(tape.truncate(99), std::invalid_argument);
}
