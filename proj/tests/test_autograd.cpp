#include <gtest/gtest.h>

#include "support.hpp"

using namespace medrat;
using medrat::support::gradient_error;
using medrat::support::Md;
using medrat::support::random_matrix;
using V = ag::Var<double>;
using Leaves = std::vector<V>;

namespace {

// Contracting with a fixed random matrix gives every output entry a distinct
// weight, so a wrong gradient cannot hide behind a symmetric sum.
V contract(ag::Tape<double>& t, const V& y, std::uint64_t seed = 99) {
  Rng rng(seed);
  return ag::sum(ag::mul(y, t.constant(random_matrix(y.rows(), y.cols(), rng))));
}

constexpr double kTol = 1e-6;

}  // namespace

TEST(Autograd, ElementwiseOps) {
  Rng rng(1);
  Md a = random_matrix(3, 4, rng), b = random_matrix(3, 4, rng);
  EXPECT_LT(gradient_error({a, b}, [](auto& t, const Leaves& x) { return contract(t, ag::add(x[0], x[1])); }), kTol);
  EXPECT_LT(gradient_error({a, b}, [](auto& t, const Leaves& x) { return contract(t, ag::sub(x[0], x[1])); }), kTol);
  EXPECT_LT(gradient_error({a, b}, [](auto& t, const Leaves& x) { return contract(t, ag::mul(x[0], x[1])); }), kTol);
  EXPECT_LT(gradient_error({a}, [](auto& t, const Leaves& x) { return contract(t, ag::scale(x[0], -1.7)); }), kTol);
  EXPECT_LT(gradient_error({a}, [](auto& t, const Leaves& x) { return contract(t, ag::tanh(x[0])); }), kTol);
  EXPECT_LT(gradient_error({a}, [](auto& t, const Leaves& x) { return contract(t, ag::sigmoid(x[0])); }), kTol);
  // keep entries away from the kink
  Md r = a;
  for (Eigen::Index k = 0; k < r.size(); ++k) r.data()[k] += r.data()[k] >= 0 ? 0.1 : -0.1;
  EXPECT_LT(gradient_error({r}, [](auto& t, const Leaves& x) { return contract(t, ag::relu(x[0])); }), kTol);
}

TEST(Autograd, SameNodeUsedTwice) {
  Rng rng(2);
  Md a = random_matrix(2, 3, rng);
  EXPECT_LT(gradient_error({a}, [](auto& t, const Leaves& x) { return contract(t, ag::mul(x[0], x[0])); }), kTol);
}

TEST(Autograd, MatrixProducts) {
  Rng rng(3);
  Md a = random_matrix(3, 5, rng), b = random_matrix(5, 2, rng), c = random_matrix(4, 5, rng);
  Md bias = random_matrix(1, 5, rng);
  EXPECT_LT(gradient_error({a, b}, [](auto& t, const Leaves& x) { return contract(t, ag::matmul(x[0], x[1])); }), kTol);
  EXPECT_LT(gradient_error({a, c}, [](auto& t, const Leaves& x) { return contract(t, ag::matmul_bt(x[0], x[1])); }),
            kTol);
  EXPECT_LT(gradient_error({a, bias}, [](auto& t, const Leaves& x) { return contract(t, ag::add_row(x[0], x[1])); }),
            kTol);
}

TEST(Autograd, LayerNorm) {
  Rng rng(4);
  Md x = random_matrix(4, 6, rng), g = random_matrix(1, 6, rng), b = random_matrix(1, 6, rng);
  EXPECT_LT(gradient_error({x, g, b},
                           [](auto& t, const Leaves& v) { return contract(t, ag::layer_norm(v[0], v[1], v[2])); }),
            kTol);
}

TEST(Autograd, RowOps) {
  Rng rng(5);
  Md a = random_matrix(4, 3, rng), b = random_matrix(2, 3, rng);
  EXPECT_LT(gradient_error({a}, [](auto& t, const Leaves& x) { return contract(t, ag::gather_rows(x[0], {3, 0, 3, 1})); }),
            kTol);
  EXPECT_LT(gradient_error({a, b},
                           [](auto& t, const Leaves& x) {
                             return contract(t, ag::concat_rows(std::vector<V>{x[1], x[0], x[1]}));
                           }),
            kTol);
  EXPECT_LT(gradient_error({a}, [](auto& t, const Leaves& x) { return contract(t, ag::row_normalize(x[0])); }), kTol);
}

TEST(Autograd, SegmentOps) {
  Rng rng(6);
  const auto segs = make_segments({3, 1, 4});
  Md s = random_matrix(8, 1, rng), z = random_matrix(8, 5, rng);
  const std::vector<std::uint8_t> mask{1, 0, 1, 1, 1, 1, 0, 1};
  EXPECT_LT(gradient_error({s}, [&](auto& t, const Leaves& x) { return contract(t, ag::segment_softmax(x[0], segs)); }),
            kTol);
  EXPECT_LT(gradient_error({s},
                           [&](auto& t, const Leaves& x) { return contract(t, ag::segment_softmax(x[0], segs, &mask)); }),
            kTol);
  EXPECT_LT(gradient_error({s, z},
                           [&](auto& t, const Leaves& x) { return contract(t, ag::segment_weighted_sum(x[0], x[1], segs)); }),
            kTol);
}

TEST(Autograd, SegmentSoftmaxForward) {
  ag::Tape<double> t(false);
  Md s(4, 1);
  s << 1.0, 2.0, 3.0, 0.5;
  const std::vector<std::uint8_t> mask{1, 0, 1, 1};
  auto y = ag::segment_softmax(t.constant(s), make_segments({3, 1}), &mask);
  EXPECT_DOUBLE_EQ(y.value()(1, 0), 0.0);
  EXPECT_NEAR(y.value()(0, 0) + y.value()(2, 0), 1.0, 1e-12);
  EXPECT_NEAR(y.value()(3, 0), 1.0, 1e-12);
  const std::vector<std::uint8_t> none{0, 0, 0, 1};
  EXPECT_THROW(ag::segment_softmax(t.constant(s), make_segments({3, 1}), &none), InputError);
}

TEST(Autograd, AttentionSelfAndCross) {
  Rng rng(7);
  const ag::AttentionLayout self{make_segments({3, 2}), make_segments({3, 2})};
  Md q = random_matrix(5, 4, rng), k = random_matrix(5, 4, rng), v = random_matrix(5, 4, rng);
  for (bool causal : {false, true}) {
    EXPECT_LT(gradient_error({q, k, v},
                             [&](auto& t, const Leaves& x) {
                               return contract(t, ag::attention(x[0], x[1], x[2], self, 2, causal));
                             }),
              kTol)
        << "causal=" << causal;
  }
  const ag::AttentionLayout cross{make_segments({2, 3}), make_segments({4, 1})};
  Md qc = random_matrix(5, 4, rng);
  const std::vector<std::uint8_t> mask{1, 1, 0, 1, 1};
  EXPECT_LT(gradient_error({qc, k, v},
                           [&](auto& t, const Leaves& x) {
                             return contract(t, ag::attention(x[0], x[1], x[2], cross, 2, false, &mask));
                           }),
            kTol);
}

TEST(Autograd, AttentionWeights) {
  Rng rng(8);
  ag::Tape<double> t(false);
  const ag::AttentionLayout layout{make_segments({3}), make_segments({4})};
  const std::vector<std::uint8_t> mask{1, 0, 1, 1};
  ag::AttentionWeights<double> w;
  auto q = t.constant(random_matrix(3, 4, rng)), k = t.constant(random_matrix(4, 4, rng));
  auto v = t.constant(random_matrix(4, 4, rng));
  ag::attention(q, k, v, layout, 2, false, &mask, &w);
  ASSERT_EQ(w.size(), 1u);
  for (Eigen::Index i = 0; i < 3; ++i) {
    EXPECT_NEAR(w[0].row(i).sum(), 1.0, 1e-12);
    EXPECT_DOUBLE_EQ(w[0](i, 1), 0.0);
  }
  // a single key always receives the full weight
  const ag::AttentionLayout one{make_segments({3}), make_segments({1})};
  auto v1 = t.constant(random_matrix(1, 4, rng));
  auto out = ag::attention(q, t.constant(random_matrix(1, 4, rng)), v1, one, 2, false, nullptr, &w);
  for (Eigen::Index i = 0; i < 3; ++i) {
    EXPECT_NEAR(w[0](i, 0), 1.0, 1e-12);
    EXPECT_TRUE(out.value().row(i).isApprox(v1.value().row(0)));
  }
}

TEST(Autograd, CausalMaskHidesFuture) {
  Rng rng(9);
  const ag::AttentionLayout layout{make_segments({4}), make_segments({4})};
  Md q = random_matrix(4, 4, rng), k = random_matrix(4, 4, rng), v = random_matrix(4, 4, rng);
  ag::Tape<double> t(false);
  auto a = ag::attention(t.constant(q), t.constant(k), t.constant(v), layout, 2, true);
  k.row(3).setRandom();
  v.row(3).setRandom();
  auto b = ag::attention(t.constant(q), t.constant(k), t.constant(v), layout, 2, true);
  EXPECT_TRUE(a.value().topRows(3).isApprox(b.value().topRows(3), 1e-14));
  EXPECT_FALSE(a.value().row(3).isApprox(b.value().row(3)));
}

TEST(Autograd, TopkSoftmax) {
  Rng rng(10);
  Md s = random_matrix(3, 6, rng);
  EXPECT_LT(gradient_error({s}, [](auto& t, const Leaves& x) { return contract(t, ag::topk_softmax(x[0], 3)); }), kTol);
  EXPECT_LT(gradient_error({s}, [](auto& t, const Leaves& x) { return contract(t, ag::topk_softmax(x[0], 1)); }), kTol);

  ag::Tape<double> t(false);
  Md tie(1, 4);
  tie << 0.5, 0.5, 0.5, 0.5;
  std::vector<std::vector<Eigen::Index>> sel;
  auto y = ag::topk_softmax(t.constant(tie), 2, &sel);
  EXPECT_EQ(sel[0], (std::vector<Eigen::Index>{0, 1}));
  EXPECT_NEAR(y.value()(0, 0), 0.5, 1e-12);
  EXPECT_DOUBLE_EQ(y.value()(0, 2), 0.0);
  EXPECT_THROW(ag::topk_softmax(t.constant(tie), 5), InputError);
}

TEST(Autograd, SoftmaxCrossEntropy) {
  Rng rng(11);
  Md x = random_matrix(5, 7, rng);
  const std::vector<int> tgt{3, -1, 0, 6, 2};
  EXPECT_LT(gradient_error({x}, [&](auto&, const Leaves& v) { return ag::softmax_cross_entropy(v[0], tgt); }), kTol);
  ag::Tape<double> t(false);
  auto ce = ag::softmax_cross_entropy(t.constant(Md::Zero(4, 7)), std::vector<int>{1, 2, 3, 4});
  EXPECT_NEAR(ce.item(), std::log(7.0), 1e-12);
  EXPECT_THROW(ag::softmax_cross_entropy(t.constant(x), std::vector<int>(5, -1)), InputError);
}

TEST(Autograd, GradientAccumulatesAcrossBackward) {
  ag::Parameter<double> p("p", Md::Constant(1, 1, 2.0));
  for (int i = 0; i < 2; ++i) {
    ag::Tape<double> t;
    auto v = t.parameter(p);
    t.backward(ag::sum(ag::mul(v, v)));
  }
  EXPECT_DOUBLE_EQ(p.grad(0, 0), 8.0);
  p.zero_grad();
  EXPECT_DOUBLE_EQ(p.grad(0, 0), 0.0);
}

TEST(Autograd, ShapeErrors) {
  ag::Tape<double> t;
  auto a = t.constant(Md::Zero(2, 3));
  auto b = t.constant(Md::Zero(3, 2));
  EXPECT_THROW(ag::add(a, b), InputError);
  EXPECT_THROW(ag::matmul(a, a), InputError);
  EXPECT_THROW(t.backward(a), InputError);
}
