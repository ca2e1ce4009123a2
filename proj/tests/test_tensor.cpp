#include <gtest/gtest.h>

#include "cmt/nn.hpp"
#include "cmt/ops.hpp"
#include "grad_check.hpp"

using namespace cmt;
using cmt::test::max_grad_error;

using Td = Tensor<double>;

TEST(Matmul, IdentityAndHandProduct) {
    Td I = Td::from({2, 2}, {1, 0, 0, 1});
    Td A = Td::from({2, 2}, {1, 2, 3, 4});
    Td C = matmul(I, A);
    EXPECT_EQ(C.data(), A.data());

    Td a = Td::from({1, 2}, {1, 2});
    Td b = Td::from({2, 1}, {3, 4});
    EXPECT_DOUBLE_EQ(matmul(a, b).item(), 11.0);
}

TEST(Matmul, ShapeMismatchThrows) {
    Td a = Td::from({2, 3}, {1, 2, 3, 4, 5, 6});
    Td b = Td::from({2, 2}, {1, 2, 3, 4});
    EXPECT_THROW(matmul(a, b), std::invalid_argument);
}

TEST(Matmul, GradientMatchesFiniteDifferences) {
    Rng rng(42);
    Td A = Td::uniform({3, 3}, rng, -1, 1, true);
    Td B = Td::uniform({3, 3}, rng, -1, 1, true);
    double err = max_grad_error([&] { return sum(matmul(A, B)); }, {A, B});
    EXPECT_LT(err, 1e-6);
}

TEST(Matmul, TransposedVariantsGradients) {
    Rng rng(7);
    Td A = Td::uniform({3, 4}, rng, -1, 1, true);
    Td B = Td::uniform({3, 4}, rng, -1, 1, true);
    EXPECT_LT(max_grad_error([&] { return sum(matmul(A, B, false, true)); }, {A, B}), 1e-6);
    EXPECT_LT(max_grad_error([&] { return sum(matmul(A, B, true, false)); }, {A, B}), 1e-6);
}

TEST(Softmax, UniformOnEqualInputs) {
    Td x = Td::from({1, 3}, {0, 0, 0});
    Td y = softmax_rows(x);
    for (int j = 0; j < 3; ++j) EXPECT_NEAR(y.at(j), 1.0 / 3.0, 1e-12);
}

TEST(Softmax, StabilizedAgainstOverflow) {
    Td x = Td::from({1, 3}, {1000, 0, 0});
    Td y = softmax_rows(x);
    EXPECT_NEAR(y.at(0), 1.0, 1e-12);
    EXPECT_NEAR(y.at(1), 0.0, 1e-12);
    for (double v : y.data()) EXPECT_TRUE(std::isfinite(v));
}

TEST(Softmax, RowsSumToOne) {
    Rng rng(3);
    Td x = Td::uniform({4, 7}, rng, -5, 5);
    Td y = softmax_rows(x);
    for (int i = 0; i < 4; ++i) {
        double s = 0;
        for (int j = 0; j < 7; ++j) s += y.at(i, j);
        EXPECT_NEAR(s, 1.0, 1e-6);
    }
}

TEST(Softmax, GradientMatchesFiniteDifferences) {
    Rng rng(11);
    Td x = Td::uniform({1, 5}, rng, -2, 2, true);
    Td w = Td::uniform({1, 5}, rng, -1, 1);  // weighting makes the check non-trivial
    double err = max_grad_error([&] { return sum(mul(softmax_rows(x), w)); }, {x});
    EXPECT_LT(err, 1e-6);
}

TEST(Mlp, ZeroInitGivesZeroOutput) {
    ParamStore<double> store;
    Rng rng(1);
    Mlp<double> mlp(store, "m", {4, 8, 3}, rng);
    for (auto& [name, p] : store.params) std::fill(p.data().begin(), p.data().end(), 0.0);
    Td x = Td::uniform({2, 4}, rng, -1, 1);
    Td y = mlp.forward(x);
    for (double v : y.data()) EXPECT_DOUBLE_EQ(v, 0.0);
}

TEST(Mlp, SingleLinearLayerEqualsMatmulPlusBias) {
    ParamStore<double> store;
    Rng rng(5);
    Linear<double> lin(store, "lin", 3, 2, rng);
    Td x = Td::from({1, 3}, {1, 2, 3});
    Td y = lin.forward(x);
    for (int j = 0; j < 2; ++j) {
        double expect = lin.bias().at(j);
        for (int i = 0; i < 3; ++i) expect += x.at(i) * lin.weight().at(i, j);
        EXPECT_NEAR(y.at(j), expect, 1e-12);
    }
}

TEST(Mlp, FullGradientCheck) {
    ParamStore<double> store;
    Rng rng(9);
    Mlp<double> mlp(store, "m", {4, 256, 3}, rng);
    Td x = Td::uniform({2, 4}, rng, -1, 1, true);
    std::vector<Td> leaves{x};
    for (auto& [name, p] : store.params) leaves.push_back(p);
    // sample a handful of coordinates per parameter; full sweep is too slow
    std::vector<std::vector<int>> sample;
    Rng pick(13);
    for (auto& l : leaves) {
        std::vector<int> idx;
        for (int k = 0; k < 6; ++k) idx.push_back(static_cast<int>(pick.uniform_int(l.size())));
        sample.push_back(idx);
    }
    double err = max_grad_error([&] { return sum(square(mlp.forward(x))); }, leaves, 1e-5, &sample);
    EXPECT_LT(err, 1e-6);
}

TEST(LayerNormOp, GradientMatchesFiniteDifferences) {
    Rng rng(21);
    Td x = Td::uniform({3, 6}, rng, -2, 2, true);
    Td g = Td::uniform({6}, rng, 0.5, 1.5, true);
    Td b = Td::uniform({6}, rng, -0.5, 0.5, true);
    Td w = Td::uniform({3, 6}, rng, -1, 1);
    double err =
        max_grad_error([&] { return sum(mul(layer_norm(x, g, b), w)); }, {x, g, b}, 1e-6);
    EXPECT_LT(err, 1e-5);
}

TEST(Attention, SingleKeyIgnoresScores) {
    ParamStore<double> store;
    Rng rng(2);
    MultiHeadAttention<double> mha(store, "a", 8, 2, rng);
    Td k = Td::uniform({1, 8}, rng, -1, 1);
    Td v = Td::uniform({1, 8}, rng, -1, 1);
    Td q1 = Td::uniform({1, 8}, rng, -1, 1);
    Td q2 = Td::uniform({1, 8}, rng, -1, 1);
    Td y1 = mha.forward(q1, k, v);
    Td y2 = mha.forward(q2, k, v);
    for (int j = 0; j < 8; ++j) EXPECT_NEAR(y1.at(j), y2.at(j), 1e-12);
}

TEST(Attention, KeyValuePermutationInvariance) {
    ParamStore<double> store;
    Rng rng(4);
    MultiHeadAttention<double> mha(store, "a", 8, 2, rng);
    Td q = Td::uniform({3, 8}, rng, -1, 1);
    Td k = Td::uniform({5, 8}, rng, -1, 1);
    Td v = Td::uniform({5, 8}, rng, -1, 1);
    std::vector<int> perm{4, 2, 0, 3, 1};
    Td kp = gather_rows(k, perm);
    Td vp = gather_rows(v, perm);
    Td y = mha.forward(q, k, v);
    Td yp = mha.forward(q, kp, vp);
    for (size_t i = 0; i < y.data().size(); ++i) EXPECT_NEAR(y.data()[i], yp.data()[i], 1e-10);
}

TEST(Attention, WeightRowsSumToOne) {
    ParamStore<double> store;
    Rng rng(6);
    MultiHeadAttention<double> mha(store, "a", 4, 1, rng);
    Td q = Td::uniform({3, 4}, rng, -1, 1);
    Td k = Td::uniform({4, 4}, rng, -1, 1);
    auto w = mha.attention_weights(q, k);
    for (int i = 0; i < 3; ++i) {
        double s = 0;
        for (int j = 0; j < 4; ++j) s += w[i * 4 + j];
        EXPECT_NEAR(s, 1.0, 1e-6);
    }
}

TEST(Attention, AllFalseMaskEqualsUnmasked) {
    ParamStore<double> store;
    Rng rng(8);
    MultiHeadAttention<double> mha(store, "a", 8, 2, rng);
    Td q = Td::uniform({3, 8}, rng, -1, 1);
    Td k = Td::uniform({5, 8}, rng, -1, 1);
    Td v = Td::uniform({5, 8}, rng, -1, 1);
    std::vector<std::uint8_t> mask(15, 0);
    Td y0 = mha.forward(q, k, v);
    Td y1 = mha.forward(q, k, v, &mask);
    EXPECT_EQ(y0.data(), y1.data());  // bit-exact
}

TEST(Attention, FullyMaskedRowOutputsZeroAttention) {
    Td x = Td::from({2, 3}, {1, 2, 3, 4, 5, 6});
    std::vector<std::uint8_t> mask{1, 1, 1, 0, 0, 0};
    Td y = softmax_rows(x, &mask);
    EXPECT_DOUBLE_EQ(y.at(0, 0), 0.0);
    EXPECT_DOUBLE_EQ(y.at(0, 1), 0.0);
    EXPECT_DOUBLE_EQ(y.at(0, 2), 0.0);
    double s = y.at(1, 0) + y.at(1, 1) + y.at(1, 2);
    EXPECT_NEAR(s, 1.0, 1e-12);
}

TEST(Attention, FullGradientCheck) {
    ParamStore<double> store;
    Rng rng(14);
    MultiHeadAttention<double> mha(store, "a", 8, 2, rng);
    Td q = Td::uniform({2, 8}, rng, -1, 1, true);
    Td k = Td::uniform({3, 8}, rng, -1, 1, true);
    Td v = Td::uniform({3, 8}, rng, -1, 1, true);
    std::vector<Td> leaves{q, k, v};
    for (auto& [name, p] : store.params) leaves.push_back(p);
    double err = max_grad_error([&] { return sum(square(mha.forward(q, k, v))); }, leaves);
    EXPECT_LT(err, 1e-5);
}

TEST(Autodiff, FanOutAccumulatesAdditively) {
    Td x = Td::from({2}, {1.0, 2.0}, true);
    Td y = add(mul(x, x), x);  // x^2 + x -> dy/dx = 2x + 1
    sum(y).backward();
    EXPECT_DOUBLE_EQ(x.grad()[0], 3.0);
    EXPECT_DOUBLE_EQ(x.grad()[1], 5.0);
}

TEST(Autodiff, UnreachableLeafGetsZeroGradient) {
    Td x = Td::from({1}, {1.0}, true);
    Td unused = Td::from({1}, {5.0}, true);
    sum(mul(x, x)).backward();
    EXPECT_DOUBLE_EQ(x.grad()[0], 2.0);
    EXPECT_DOUBLE_EQ(unused.grad()[0], 0.0);
}

TEST(Autodiff, BackwardRequiresScalarRoot) {
    Td x = Td::from({2}, {1.0, 2.0}, true);
    EXPECT_THROW(mul(x, x).backward(), std::logic_error);
}

TEST(Autodiff, DeterministicForward) {
    auto run = [] {
        Rng rng(123);
        ParamStore<double> store;
        Mlp<double> mlp(store, "m", {4, 16, 4}, rng);
        Td x = Td::uniform({3, 4}, rng, -1, 1);
        return mlp.forward(x).data();
    };
    EXPECT_EQ(run(), run());  // bit-identical
}

TEST(Ops, ClampAndAbsSubgradient) {
    Td x = Td::from({3}, {-2.0, 0.0, 2.0}, true);
    sum(cmt::abs(x)).backward();
    EXPECT_DOUBLE_EQ(x.grad()[0], -1.0);
    EXPECT_DOUBLE_EQ(x.grad()[1], 0.0);  // subgradient at 0 is 0
    EXPECT_DOUBLE_EQ(x.grad()[2], 1.0);

    Td y = clamp(Td::from({3}, {-2.0, 0.5, 2.0}), 0.0, 1.0);
    EXPECT_DOUBLE_EQ(y.at(0), 0.0);
    EXPECT_DOUBLE_EQ(y.at(1), 0.5);
    EXPECT_DOUBLE_EQ(y.at(2), 1.0);
}

TEST(Ops, GatherConcatSliceGradients) {
    Rng rng(31);
    Td a = Td::uniform({4, 3}, rng, -1, 1, true);
    Td b = Td::uniform({2, 3}, rng, -1, 1, true);
    double err = max_grad_error(
        [&] {
            Td cat = concat_rows<double>({a, b});
            Td g = gather_rows(cat, {0, 5, 0, 3});
            Td s = slice_cols(g, 1, 2);
            return sum(square(s));
        },
        {a, b});
    EXPECT_LT(err, 1e-6);
}

TEST(Ops, Conv3x3GradientAndLocality) {
    Rng rng(17);
    const int h = 4, w = 5, cin = 2, cout = 3;
    Td x = Td::uniform({h * w, cin}, rng, -1, 1, true);
    Td wt = Td::uniform({9 * cin, cout}, rng, -1, 1, true);
    Td b = Td::uniform({cout}, rng, -1, 1, true);
    double err = max_grad_error([&] { return sum(square(conv3x3(x, h, w, wt, b))); }, {x, wt, b});
    EXPECT_LT(err, 1e-5);
}

TEST(Ops, MaxPoolGroups) {
    Td x = Td::from({4, 2}, {1, 9, 5, 2, 3, 3, -1, 0}, true);
    std::vector<int> groups{0, 0, 1, -1};
    Td y = maxpool_groups(x, groups, 3);
    EXPECT_DOUBLE_EQ(y.at(0, 0), 5.0);
    EXPECT_DOUBLE_EQ(y.at(0, 1), 9.0);
    EXPECT_DOUBLE_EQ(y.at(1, 0), 3.0);
    EXPECT_DOUBLE_EQ(y.at(2, 0), 0.0);  // empty group
    sum(y).backward();
    EXPECT_DOUBLE_EQ(x.grad()[0 * 2 + 1], 1.0);  // argmax positions get the gradient
    EXPECT_DOUBLE_EQ(x.grad()[1 * 2 + 0], 1.0);
    EXPECT_DOUBLE_EQ(x.grad()[3 * 2 + 0], 0.0);  // unassigned row
}

#ifndef NDEBUG
TEST(Ops, NonFiniteForwardIsHardError) {
    Td x = Td::from({1}, {-1.0});
    EXPECT_THROW(cmt::log(x), std::runtime_error);
}
#endif
