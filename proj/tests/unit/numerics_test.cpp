#include <gtest/gtest.h>

#include <cmath>

#include "support/oracles.hpp"
#include "vitc/numerics/kernels.hpp"
#include "vitc/numerics/ops.hpp"

using namespace vitc;
using namespace vitc::nn;
using vitc::oracle::random_tensor;

namespace {

Var P(Tensor t) { return Var::parameter(std::move(t)); }
Var K(Tensor t) { return Var::constant(std::move(t)); }

}  // namespace

TEST(Matmul, IdentityLeavesOperandUnchanged) {
    Tensor b = random_tensor({3, 2}, 11);
    Var c = matmul(K(Tensor::identity(3)), K(b));
    EXPECT_EQ(c.value(), b);
}

TEST(Matmul, HandArithmetic) {
    Var c = matmul(K(Tensor::matrix({{1, 2}})), K(Tensor::matrix({{3}, {4}})));
    ASSERT_EQ(c.shape(), (Shape{1, 1}));
    EXPECT_FLOAT_EQ(c.value()[0], 11.0f);
}

TEST(Matmul, MatchesTripleLoop) {
    Tensor a = random_tensor({5, 7}, 1), b = random_tensor({7, 4}, 2);
    EXPECT_LE(max_abs_diff(matmul(K(a), K(b)).value(), oracle::ref_matmul(a, b)), 1e-6);
}

TEST(Matmul, MatchesTripleLoopAcrossTileEdges) {
    for (auto [m, k, n] : std::vector<std::array<int64_t, 3>>{{1, 1, 1}, {4, 3, 16}, {9, 33, 17}, {65, 16, 65}}) {
        Tensor a = random_tensor({m, k}, static_cast<uint64_t>(m * 100 + k)), b = random_tensor({k, n}, 7);
        EXPECT_LE(max_abs_diff(matmul(K(a), K(b)).value(), oracle::ref_matmul(a, b)), 1e-5)
            << m << "x" << k << "x" << n;
    }
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
    try {
        matmul(K(Tensor({2, 3})), K(Tensor({4, 5})));
        FAIL() << "expected DimensionError";
    } catch (const DimensionError& e) {
        std::string msg = e.what();
        EXPECT_NE(msg.find("[2,3]"), std::string::npos);
        EXPECT_NE(msg.find("[4,5]"), std::string::npos);
    }
}

TEST(Matmul, MacInstrumentation) {
    MacCountScope scope;
    matmul(K(Tensor({3, 4})), K(Tensor({4, 5})));
    EXPECT_EQ(scope.count(), 60u);
}

TEST(Matmul, CountingDisabledOutsideScope) {
    { MacCountScope scope; }
    matmul(K(Tensor({3, 4})), K(Tensor({4, 5})));
    EXPECT_FALSE(mac_counter().enabled);
}

TEST(LayerNorm, ConstantRowMapsToZero) {
    Var y = layer_norm(K(Tensor({1, 4}, 5.0f)), K(Tensor::ones({4})), K(Tensor::zeros({4})), 1e-5f);
    for (float v : y.value().data()) EXPECT_FLOAT_EQ(v, 0.0f);
}

TEST(LayerNorm, StandardizedRowUnchanged) {
    Var y = layer_norm(K(Tensor::matrix({{1, -1}})), K(Tensor::ones({2})), K(Tensor::zeros({2})), 1e-12f);
    EXPECT_NEAR(y.value()[0], 1.0f, 1e-6);
    EXPECT_NEAR(y.value()[1], -1.0f, 1e-6);
}

TEST(LayerNorm, RandomRowMoments) {
    Tensor x = random_tensor({1, 64}, 5, -3.0f, 7.0f);
    Var y = layer_norm(K(x), K(Tensor::ones({64})), K(Tensor::zeros({64})), 1e-6f);
    double mean = 0.0, var = 0.0;
    for (float v : y.value().data()) mean += v;
    mean /= 64;
    for (float v : y.value().data()) var += (v - mean) * (v - mean);
    var /= 64;
    EXPECT_LE(std::abs(mean), 1e-6);
    EXPECT_LE(std::abs(var - 1.0), 1e-3);
}

TEST(LayerNorm, WidthMismatch) {
    EXPECT_THROW(layer_norm(K(Tensor({2, 4})), K(Tensor::ones({3})), K(Tensor::zeros({3}))), DimensionError);
}

TEST(Reference, OpsAgreeWithNaiveLoops) {
    Tensor x = random_tensor({6, 9}, 21, -2.0f, 2.0f);
    Tensor g = random_tensor({9}, 22), b = random_tensor({9}, 23);
    EXPECT_LE(max_abs_diff(layer_norm(K(x), K(g), K(b), 1e-6f).value(), oracle::ref_layer_norm(x, g, b, 1e-6)), 1e-5);

    Tensor ge = gelu(K(x)).value();
    Tensor sm = softmax(K(x)).value();
    for (int64_t r = 0; r < 6; ++r) {
        std::vector<double> row(9);
        for (int64_t j = 0; j < 9; ++j) row[j] = x.at(r, j);
        auto ref = oracle::ref_softmax(row);
        for (int64_t j = 0; j < 9; ++j) {
            EXPECT_NEAR(sm.at(r, j), ref[j], 1e-5);
            EXPECT_NEAR(ge.at(r, j), oracle::ref_gelu(x.at(r, j)), 1e-5);
        }
    }
}

TEST(Softmax, RowsSumToOneAndUniformStaysUniform) {
    Tensor x = random_tensor({8, 13}, 3, -10.0f, 10.0f);
    Tensor y = softmax(K(x)).value();
    for (int64_t r = 0; r < 8; ++r) {
        double s = 0.0;
        for (int64_t j = 0; j < 13; ++j) s += y.at(r, j);
        EXPECT_NEAR(s, 1.0, 1e-6);
    }
    Tensor u = softmax(K(Tensor({1, 5}, 2.5f))).value();
    for (float v : u.data()) EXPECT_FLOAT_EQ(v, 0.2f);
}

TEST(Attention, MatchesPerHeadReference) {
    const int64_t n = 7, heads = 2, dq = 3, dv = 4;
    Tensor q = random_tensor({n, heads * dq}, 31), k = random_tensor({n, heads * dq}, 32),
           v = random_tensor({n, heads * dv}, 33);
    Var out = attention(K(q), K(k), K(v), 1, n, heads);
    EXPECT_LE(max_abs_diff(out.value(), oracle::ref_attention(q, k, v, heads)), 1e-5);
}

TEST(Attention, BatchedEqualsPerSequence) {
    const int64_t n = 5, heads = 3, d = 2;
    Tensor q = random_tensor({2 * n, heads * d}, 41), k = random_tensor({2 * n, heads * d}, 42),
           v = random_tensor({2 * n, heads * d}, 43);
    Tensor out = attention(K(q), K(k), K(v), 2, n, heads).value();
    for (int64_t b = 0; b < 2; ++b) {
        std::vector<int64_t> rows;
        for (int64_t i = 0; i < n; ++i) rows.push_back(b * n + i);
        Tensor ref = oracle::ref_attention(q.row_subset(rows), k.row_subset(rows), v.row_subset(rows), heads);
        EXPECT_LE(max_abs_diff(out.row_subset(rows), ref), 1e-5);
    }
}

TEST(Attention, QueryKeyMismatchIsConsistencyError) {
    EXPECT_THROW(attention(K(Tensor({4, 6})), K(Tensor({4, 4})), K(Tensor({4, 6})), 1, 4, 2), ConsistencyError);
}

TEST(GradOf, LinearFunction) {
    Tensor x = random_tensor({3, 1}, 51);
    Var w = P(random_tensor({2, 3}, 52));
    auto g = grad_of(sum(matmul(w, K(x))), std::vector<Var>{w});
    for (int64_t i = 0; i < 2; ++i)
        for (int64_t j = 0; j < 3; ++j) EXPECT_FLOAT_EQ(g[0].at(i, j), x[j]);
}

TEST(GradOf, GroupLassoClosedForm) {
    Var c = P(Tensor({2}, std::vector<float>{3.0f, 4.0f}));
    auto g = grad_of(l2_norm(c), std::vector<Var>{c});
    EXPECT_FLOAT_EQ(g[0][0], 0.6f);
    EXPECT_FLOAT_EQ(g[0][1], 0.8f);
}

TEST(GradOf, UnknownParameter) {
    Var a = P(Tensor({2}, 1.0f));
    Var stray = P(Tensor({2}, 1.0f));
    EXPECT_THROW(grad_of(sum(a), std::vector<Var>{stray}), UnknownParameterError);
}

TEST(GradOf, NoGradGuardRecordsNothing) {
    Var a = P(Tensor({2}, 1.0f));
    NoGradGuard guard;
    Var s = sum(a);
    EXPECT_FALSE(s.requires_grad());
}

// Finite-difference check of every op at h = 1e-3, rel. tol 1e-2 (f32).
class OpGradients : public ::testing::Test {
protected:
    static constexpr double kH = 1e-3, kRtol = 1e-2, kAtol = 2e-4;
    void check(const std::function<Var()>& f, std::vector<Var> params) {
        auto r = oracle::grad_check(f, std::move(params), kH, kRtol, kAtol);
        EXPECT_LE(r.max_rel_error, kRtol) << r.worst;
        EXPECT_GT(r.checked, 0);
    }
};

TEST_F(OpGradients, MatmulAndLinear) {
    Var a = P(random_tensor({3, 4}, 61)), b = P(random_tensor({4, 5}, 62)), bias = P(random_tensor({5}, 63));
    check([&] { return sum(mul(matmul(a, b), K(random_tensor({3, 5}, 64)))); }, {a, b});
    check([&] { return sum(mul(linear(a, b, bias), K(random_tensor({3, 5}, 65)))); }, {a, b, bias});
}

TEST_F(OpGradients, ElementwiseAndReductions) {
    Var a = P(random_tensor({6, 4}, 71)), b = P(random_tensor({6, 4}, 72)), t = P(random_tensor({2, 4}, 73));
    check([&] { return sum(mul(add(a, b), b)); }, {a, b});
    check([&] { return sum(mul(add_tiled(a, t), K(random_tensor({6, 4}, 74)))); }, {a, t});
    check([&] { return l2_norm(scale(a, 1.7f)); }, {a});
}

TEST_F(OpGradients, NormalizationAndActivations) {
    Var x = P(random_tensor({3, 8}, 81, -2.0f, 2.0f)), g = P(random_tensor({8}, 82)), b = P(random_tensor({8}, 83));
    Tensor w = random_tensor({3, 8}, 84);
    check([&] { return sum(mul(layer_norm(x, g, b), K(w))); }, {x, g, b});
    check([&] { return sum(mul(gelu(x), K(w))); }, {x});
    check([&] { return sum(mul(softmax(x), K(w))); }, {x});
}

TEST_F(OpGradients, AttentionAndHeadMatmul) {
    const int64_t n = 4, heads = 2;
    Var q = P(random_tensor({2 * n, heads * 3}, 91)), k = P(random_tensor({2 * n, heads * 3}, 92)),
        v = P(random_tensor({2 * n, heads * 2}, 93));
    Tensor w = random_tensor({2 * n, heads * 2}, 94);
    check([&] { return sum(mul(attention(q, k, v, 2, n, heads), K(w))); }, {q, k, v});
    Var m = P(random_tensor({heads, 3, 3}, 95));
    Tensor w2 = random_tensor({2 * n, heads * 3}, 96);
    check([&] { return sum(mul(head_matmul(q, m), K(w2))); }, {q, m});
}

TEST_F(OpGradients, RowAndColumnPlumbing) {
    Var x = P(random_tensor({6, 3}, 101)), y = P(random_tensor({6, 2}, 102)), tok = P(random_tensor({1, 3}, 103));
    check([&] { return sum(mul(gather_rows(x, {5, 0, 0, 2}), K(random_tensor({4, 3}, 104)))); }, {x});
    check([&] { return sum(mul(scatter_cols(y, {3, 0}, 4), K(random_tensor({6, 4}, 105)))); }, {y});
    check([&] { return sum(mul(concat_cols(x, y), K(random_tensor({6, 5}, 106)))); }, {x, y});
    check([&] { return sum(mul(prepend_token(x, tok, 2), K(random_tensor({8, 3}, 107)))); }, {x, tok});
    check([&] { return sum(mul(mean_pool(x, 3), K(random_tensor({3, 3}, 108)))); }, {x});
}

TEST_F(OpGradients, CrossEntropy) {
    Var logits = P(random_tensor({4, 5}, 111, -2.0f, 2.0f));
    std::vector<int32_t> labels{0, 3, 4, 1};
    check([&] { return cross_entropy(logits, labels); }, {logits});
}

TEST(CrossEntropy, UniformLogitsGiveLogK) {
    std::vector<int32_t> labels{2, 0};
    Var l = cross_entropy(K(Tensor({2, 10})), labels);
    EXPECT_NEAR(l.value().item(), std::log(10.0), 1e-6);
}

TEST(ScatterCols, PlacesColumns) {
    Var y = scatter_cols(K(Tensor::matrix({{1, 2}})), {2, 0}, 3);
    EXPECT_EQ(y.value(), Tensor::matrix({{2, 0, 1}}));
}
