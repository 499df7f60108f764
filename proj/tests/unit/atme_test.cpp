#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "support/flops_oracle.hpp"
#include "support/oracles.hpp"
#include "vitc/atme/merge.hpp"
#include "vitc/atme/planner.hpp"
#include "vitc/errors.hpp"
#include "vitc/flops/audit.hpp"

using namespace vitc;
using namespace vitc::atme;
using nn::Tensor;
using nn::Var;
using vitc::oracle::random_tensor;

namespace {

FusionLayer random_fusion(int64_t c, uint64_t seed) {
    return FusionLayer{Var::parameter(random_tensor({2 * c}, seed, 0.5f, 1.5f)),
                       Var::parameter(random_tensor({2 * c}, seed + 1)),
                       Var::parameter(random_tensor({2 * c, c}, seed + 2)),
                       Var::parameter(random_tensor({c}, seed + 3))};
}

// LayerNorm + Linear on one concatenated pair, in double precision.
std::vector<double> ref_fuse(const std::vector<double>& a, const std::vector<double>& b, const FusionLayer& f) {
    std::vector<double> x(a);
    x.insert(x.end(), b.begin(), b.end());
    const size_t n = x.size(), c = a.size();
    double mean = 0.0, var = 0.0;
    for (double v : x) mean += v;
    mean /= static_cast<double>(n);
    for (double v : x) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n);
    for (size_t i = 0; i < n; ++i) {
        x[i] = (x[i] - mean) / std::sqrt(var + kLayerNormEps) * f.norm_weight.value()[static_cast<int64_t>(i)] +
               f.norm_bias.value()[static_cast<int64_t>(i)];
    }
    std::vector<double> y(c);
    for (size_t j = 0; j < c; ++j) {
        double s = f.bias.value()[static_cast<int64_t>(j)];
        for (size_t i = 0; i < n; ++i) s += x[i] * f.weight.value().at(static_cast<int64_t>(i), static_cast<int64_t>(j));
        y[j] = s;
    }
    return y;
}

std::vector<double> row(const Tensor& t, int64_t r) {
    std::vector<double> out;
    for (int64_t j = 0; j < t.dim(1); ++j) out.push_back(t.at(r, j));
    return out;
}

ReductionFn reduction_for(const ViTConfig& cfg) {
    return [cfg](const MergePlan& p) { return flops::reduction_ratio(cfg, p); };
}

}  // namespace

TEST(PairSources, TwoByTwoGridPairsRowMajor) {
    const auto h = pair_sources({2, 2}, MergeDirection::horizontal);
    ASSERT_EQ(h.size(), 2u);
    EXPECT_EQ(h[0], (std::pair<int64_t, int64_t>{0, 1}));
    EXPECT_EQ(h[1], (std::pair<int64_t, int64_t>{2, 3}));
    const auto v = pair_sources({2, 2}, MergeDirection::vertical);
    EXPECT_EQ(v[0], (std::pair<int64_t, int64_t>{0, 2}));
    EXPECT_EQ(v[1], (std::pair<int64_t, int64_t>{1, 3}));
}

TEST(PairSources, EveryTokenUsedExactlyOnce) {
    for (auto dir : {MergeDirection::horizontal, MergeDirection::vertical}) {
        const auto pairs = pair_sources({6, 4}, dir);
        EXPECT_EQ(pairs.size(), 12u);
        std::multiset<int64_t> seen;
        for (auto [a, b] : pairs) {
            seen.insert(a);
            seen.insert(b);
        }
        for (int64_t i = 0; i < 24; ++i) EXPECT_EQ(seen.count(i), 1u) << i;
    }
}

TEST(PairSources, OddExtentIsPlacementError) {
    EXPECT_THROW(pair_sources({4, 3}, MergeDirection::horizontal), PlacementError);
    EXPECT_THROW(pair_sources({3, 4}, MergeDirection::vertical), PlacementError);
}

TEST(Merge, DeitGridTokenCounts) {
    const int64_t c = 8;
    const auto fusion = FusionLayer::averaging(c);
    Var x = Var::constant(random_tensor({197, c}, 1));
    auto h = htm(x, {14, 14}, fusion, true);
    EXPECT_EQ(h.tokens.shape(), (nn::Shape{99, c}));
    EXPECT_EQ(h.grid, (Grid{14, 7}));
    auto v = vtm(h.tokens, h.grid, fusion, true);
    EXPECT_EQ(v.tokens.shape(), (nn::Shape{50, c}));
    EXPECT_EQ(v.grid, (Grid{7, 7}));
}

TEST(Merge, AveragingInitGivesPairMeans) {
    const int64_t c = 5;
    const auto fusion = FusionLayer::averaging(c);
    const Tensor x = random_tensor({1 + 4 * 6, c}, 2);
    for (auto dir : {MergeDirection::horizontal, MergeDirection::vertical}) {
        auto out = merge_tokens(Var::constant(x), 1, {4, 6}, dir, true, fusion, false);
        const auto pairs = pair_sources({4, 6}, dir);
        for (size_t p = 0; p < pairs.size(); ++p) {
            for (int64_t j = 0; j < c; ++j) {
                const double mean = 0.5 * (x.at(1 + pairs[p].first, j) + x.at(1 + pairs[p].second, j));
                EXPECT_NEAR(out.tokens.value().at(static_cast<int64_t>(p) + 1, j), mean, 1e-6);
            }
        }
    }
}

TEST(Merge, ClsRowPassesThroughBitIdentical) {
    const int64_t c = 6, batch = 3, per = 1 + 16;
    const Tensor x = random_tensor({batch * per, c}, 3);
    auto out = merge_tokens(Var::constant(x), batch, {4, 4}, MergeDirection::horizontal, true, random_fusion(c, 9));
    for (int64_t b = 0; b < batch; ++b)
        for (int64_t j = 0; j < c; ++j) EXPECT_EQ(out.tokens.value().at(b * 9, j), x.at(b * per, j));
}

TEST(Merge, VtmAfterHtmOnTwoByTwoIsFusedOfFused) {
    const int64_t c = 4;
    const Tensor x = random_tensor({4, c}, 4);
    const auto f1 = random_fusion(c, 10);
    const auto f2 = random_fusion(c, 20);
    auto h = htm(Var::constant(x), {2, 2}, f1, false);
    auto v = vtm(h.tokens, h.grid, f2, false);
    ASSERT_EQ(v.tokens.shape(), (nn::Shape{1, c}));
    EXPECT_EQ(v.grid, (Grid{1, 1}));
    const auto top = ref_fuse(row(x, 0), row(x, 1), f1);
    const auto bottom = ref_fuse(row(x, 2), row(x, 3), f1);
    const auto expect = ref_fuse(top, bottom, f2);
    for (int64_t j = 0; j < c; ++j) EXPECT_NEAR(v.tokens.value().at(0, j), expect[static_cast<size_t>(j)], 1e-5);
}

TEST(Merge, OutputDependsOnlyOnItsSourcePair) {
    const int64_t c = 4;
    Tensor x = random_tensor({16, c}, 5);
    const auto f = random_fusion(c, 30);
    const Tensor before = vtm(Var::constant(x), {4, 4}, f, false).tokens.value();
    x.at(5, 2) += 1.0f;  // position (1,1) pairs with (0,1) -> output (0,1) = row 1
    const Tensor after = vtm(Var::constant(x), {4, 4}, f, false).tokens.value();
    for (int64_t r = 0; r < 8; ++r) {
        const bool changed = max_abs_diff(before.row_subset(std::vector<int64_t>{r}),
                                          after.row_subset(std::vector<int64_t>{r})) > 0.0;
        EXPECT_EQ(changed, r == 1) << r;
    }
}

TEST(Merge, RowCountMismatchIsDimensionError) {
    const auto f = FusionLayer::averaging(3);
    EXPECT_THROW(htm(Var::constant(Tensor({10, 3})), {2, 4}, f, true), DimensionError);
}

TEST(MergePlan, ParseAndPrintRoundTrip) {
    const auto p = MergePlan::parse("3h, 7v");
    ASSERT_EQ(p.size(), 2u);
    EXPECT_EQ(p.entries()[1], (MergeEntry{7, MergeDirection::vertical}));
    EXPECT_EQ(p.to_string(), "3h,7v");
    EXPECT_TRUE(MergePlan::parse("").empty());
    EXPECT_THROW(MergePlan::parse("3x"), PlacementError);
    EXPECT_THROW(MergePlan::parse("h"), PlacementError);
}

TEST(MergePlan, ValidationRules) {
    const auto cfg = ViTConfig::deit_small();
    EXPECT_NO_THROW(MergePlan::parse("3h,7v").validate(cfg));
    EXPECT_THROW(MergePlan::parse("3v").validate(cfg), PlacementError);      // must start horizontal
    EXPECT_THROW(MergePlan::parse("3h,7h").validate(cfg), PlacementError);   // must alternate
    EXPECT_THROW(MergePlan::parse("7h,3v").validate(cfg), PlacementError);   // must increase
    EXPECT_THROW(MergePlan::parse("11h").validate(cfg), PlacementError);     // nothing left to run
    EXPECT_THROW(MergePlan::parse("1h,2v,3h").validate(cfg), PlacementError);  // 14 -> 7 -> odd
}

TEST(MergePlan, BlockGridsFollowConvention) {
    const auto grids = MergePlan::parse("3h,7v").block_grids(ViTConfig::deit_small());
    ASSERT_EQ(grids.size(), 13u);
    EXPECT_EQ(grids[3], (Grid{14, 14}));
    EXPECT_EQ(grids[4], (Grid{14, 7}));
    EXPECT_EQ(grids[7], (Grid{14, 7}));
    EXPECT_EQ(grids[8], (Grid{7, 7}));
}

TEST(Planner, MaxMergesFollowsGridEvenness) {
    EXPECT_EQ(max_merges(ViTConfig::deit_small()), 2);  // 14 -> 7 on both axes
    EXPECT_EQ(max_merges(ViTConfig::desk()), 3);         // 8x8 grid, depth 4 caps at 3
}

TEST(Planner, UniformSplitMatchesStageDepths) {
    EXPECT_EQ(uniform_plan(ViTConfig::deit_small(), 2).to_string(), "3h,7v");
    EXPECT_EQ(uniform_plan(ViTConfig::desk(), 2).to_string(), "0h,2v");
    EXPECT_EQ(uniform_plan(ViTConfig::desk(), 1).to_string(), "1h");
}

TEST(Planner, DeitSmallUniformReduction) {
    const auto cfg = ViTConfig::deit_small();
    const double r = flops::reduction_ratio(cfg, uniform_plan(cfg, 2));
    EXPECT_NEAR(r, oracle::ref_reduction(cfg, {3, 7}), 1e-12);
    EXPECT_NEAR(r, 0.411, 0.005);
}

TEST(Planner, DeitSmallAdjustedPlan) {
    const auto cfg = ViTConfig::deit_small();
    const auto res = plan_merges(cfg, 0.433, reduction_for(cfg));
    EXPECT_EQ(res.uniform.to_string(), "3h,7v");
    EXPECT_EQ(res.plan.to_string(), "3h,6v");
    EXPECT_NEAR(res.achieved, 0.433, 0.005);
    EXPECT_NEAR(res.achieved, oracle::ref_reduction(cfg, {3, 6}), 1e-12);
}

TEST(Planner, DeitTinyTargetWithinHalfPoint) {
    const auto cfg = ViTConfig::deit_tiny();
    const auto res = plan_merges(cfg, 0.502, reduction_for(cfg));
    EXPECT_NEAR(res.achieved, 0.502, 0.005);
    // The three-full/three-half/six-quarter split (49.97%) is also within
    // half a point, but greedy descent from 3h,7v settles on 1h,7v (50.41%),
    // which is closer to the target.
    EXPECT_NEAR(oracle::ref_reduction(cfg, {2, 5}), 0.502, 0.005);
    EXPECT_EQ(res.plan.to_string(), "1h,7v");
    EXPECT_NEAR(res.achieved, oracle::ref_reduction(cfg, {1, 7}), 1e-12);
}

TEST(Planner, GreedyResultIsNoWorseThanAnyNeighbour) {
    const auto cfg = ViTConfig::deit_tiny();
    const double target = 0.47;
    const auto res = plan_merges(cfg, target, reduction_for(cfg));
    const auto& e = res.plan.entries();
    const double err = std::abs(res.achieved - target);
    for (size_t i = 0; i < e.size(); ++i) {
        for (int d : {-1, 1}) {
            std::vector<int> b{e[0].after_block, e[1].after_block};
            b[i] += d;
            if (b[0] < 0 || b[1] > cfg.depth - 2 || b[0] >= b[1]) continue;
            EXPECT_GE(std::abs(oracle::ref_reduction(cfg, b) - target), err - 1e-15);
        }
    }
}

TEST(Planner, UnreachableTargetReportsMaximum) {
    const auto cfg = ViTConfig::deit_small();
    try {
        plan_merges(cfg, 0.9, reduction_for(cfg));
        FAIL() << "expected PlacementError";
    } catch (const PlacementError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("maximum achievable"), std::string::npos) << msg;
    }
}

TEST(Planner, Deterministic) {
    const auto cfg = ViTConfig::deit_base();
    const auto a = plan_merges(cfg, 0.45, reduction_for(cfg));
    const auto b = plan_merges(cfg, 0.45, reduction_for(cfg));
    EXPECT_EQ(a.plan, b.plan);
    EXPECT_EQ(a.achieved, b.achieved);
}
