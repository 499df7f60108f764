#include <gtest/gtest.h>

#include <cmath>

#include "support/alg3_oracle.hpp"
#include "support/oracles.hpp"
#include "vitc/cdcp/channels.hpp"
#include "vitc/cdcp/prune.hpp"
#include "vitc/errors.hpp"
#include "vitc/flops/audit.hpp"
#include "vitc/model/checkpoint.hpp"

using namespace vitc;
using namespace vitc::cdcp;
using nn::Tensor;
using nn::Var;
using vitc::oracle::random_tensor;

namespace {

ViTConfig toy_config(int depth, int heads, int head_dim) {
    ViTConfig c;
    c.depth = depth;
    c.heads = heads;
    c.head_dim = head_dim;
    c.dim = heads * head_dim;
    c.patch = 4;
    c.img = 16;
    c.classes = 5;
    c.mlp_ratio = 2;
    return c;
}

// Compacted model whose weights and compactors are random, so scores are
// distinct and folding is non-trivial.
ViTModel random_compacted(const ViTConfig& cfg, uint64_t seed, const char* plan = "") {
    auto m = ViTModel::create(cfg, seed);
    m.insert_merges(atme::MergePlan::parse(plan));
    m.insert_compactors();
    uint64_t s = seed * 1000;
    for (auto& [name, v] : m.named_parameters()) {
        Var p = v;
        Tensor noise = random_tensor(p.shape(), s++, -0.25f, 0.25f);
        p.mutable_value().add_(noise);
    }
    return m;
}

Tensor images(int64_t batch, int img, uint64_t seed) { return random_tensor({batch, 3, img, img}, seed, 0.0f, 1.0f); }

std::set<int> cols(const std::set<ChannelRef>& p, int block, ChannelKind kind, int head) {
    std::set<int> out;
    for (const auto& c : p)
        if (c.block == block && c.kind == kind && c.head == head) out.insert(c.col);
    return out;
}

}  // namespace

TEST(CompactorGrad, LassoOffPassesTaskGradient) {
    const std::vector<float> c{0.3f, -1.0f, 2.0f}, g{0.5f, 0.25f, -4.0f};
    EXPECT_EQ(compactor_grad(c, 1.0f, g, 0.0), g);
}

TEST(CompactorGrad, MaskedColumnGetsUnitVectorTimesLambda) {
    const std::vector<float> c{3.0f, 4.0f}, g{10.0f, -7.0f};
    const auto r = compactor_grad(c, 0.0f, g, 1e-5);
    EXPECT_NEAR(r[0], 0.6e-5, 1e-12);
    EXPECT_NEAR(r[1], 0.8e-5, 1e-12);
}

TEST(CompactorGrad, ZeroColumnHasNoLassoTerm) {
    const std::vector<float> c{0.0f, 0.0f}, g{1.0f, 2.0f};
    EXPECT_EQ(compactor_grad(c, 0.0f, g, 1.0), (std::vector<float>{0.0f, 0.0f}));
}

TEST(CompactorGrad, LassoTermMatchesFiniteDifference) {
    const Tensor c = random_tensor({6}, 11);
    const double lambda = 0.37;
    const std::vector<float> zero(6, 0.0f);
    const auto r = compactor_grad(c.data(), 1.0f, zero, lambda);
    auto f = [&](std::vector<double> x) {
        double s = 0.0;
        for (double v : x) s += v * v;
        return lambda * std::sqrt(s);
    };
    for (int i = 0; i < 6; ++i) {
        std::vector<double> up(c.data().begin(), c.data().end()), down = up;
        up[size_t(i)] += 1e-6;
        down[size_t(i)] -= 1e-6;
        const double num = (f(up) - f(down)) / 2e-6;
        EXPECT_NEAR(r[size_t(i)], num, 1e-3 * std::abs(num) + 1e-7);
    }
}

TEST(CompactorGrad, TensorFormActsPerColumn) {
    const Tensor m = random_tensor({2, 3, 3}, 12);
    const Tensor g = random_tensor({2, 3, 3}, 13);
    Tensor mask = Tensor::ones({2, 3});
    mask[4] = 0.0f;  // head 1, column 1
    const Tensor out = compactor_grad(m, mask, g, 0.1);
    for (int64_t h = 0; h < 2; ++h)
        for (int64_t j = 0; j < 3; ++j) {
            std::vector<float> c, gc;
            for (int64_t i = 0; i < 3; ++i) {
                c.push_back(m[(h * 3 + i) * 3 + j]);
                gc.push_back(g[(h * 3 + i) * 3 + j]);
            }
            const auto r = compactor_grad(c, mask[h * 3 + j], gc, 0.1);
            for (int64_t i = 0; i < 3; ++i) EXPECT_EQ(out[(h * 3 + i) * 3 + j], r[size_t(i)]);
        }
}

TEST(ScoreBoard, QueryKeyPairsShareMeanScore) {
    const auto m = random_compacted(toy_config(2, 3, 4), 1);
    const auto b = ScoreBoard::from_model(m);
    const auto norms_q = column_norms(m.compactors[1].q.value());
    const auto norms_k = column_norms(m.compactors[1].k.value());
    for (int h = 0; h < 3; ++h)
        for (int j = 0; j < 4; ++j) {
            const double sq = b.score({1, ChannelKind::q, h, j});
            EXPECT_EQ(sq, b.score({1, ChannelKind::k, h, j}));
            EXPECT_NEAR(sq, 0.5 * (norms_q[h * 4 + j] + norms_k[h * 4 + j]), 1e-6);
        }
    // q, k, v per head plus proj and fc1 columns.
    EXPECT_EQ(b.size(), 2u * (3 * 3 * 4 + 12 + 24));
}

TEST(ScoreBoard, ArgminBreaksTiesLexicographically) {
    ScoreBoard b;
    b.insert({1, ChannelKind::q, 0, 0}, 0.5);
    b.insert({0, ChannelKind::fc1, -1, 3}, 0.5);
    b.insert({0, ChannelKind::v, 2, 1}, 0.5);
    b.insert({0, ChannelKind::v, 1, 7}, 0.5);
    EXPECT_EQ(b.argmin(), (ChannelRef{0, ChannelKind::v, 1, 7}));
    b.remove({0, ChannelKind::v, 1, 7});
    EXPECT_EQ(b.argmin(), (ChannelRef{0, ChannelKind::v, 2, 1}));
}

TEST(HeadConsistency, SingleHeadReturnsOnlySelection) {
    ScoreBoard b;
    for (int j = 0; j < 3; ++j) b.insert({0, ChannelKind::v, 0, j}, 0.1 * (j + 1));
    const auto out = head_consistency_expand({0, ChannelKind::v, 0, 1}, b);
    EXPECT_EQ(out, (std::vector<ChannelRef>{{0, ChannelKind::v, 0, 1}}));
    EXPECT_FALSE(b.contains({0, ChannelKind::v, 0, 1}));
}

TEST(HeadConsistency, AddsSiblingArgmin) {
    ScoreBoard b;
    b.insert({0, ChannelKind::v, 0, 0}, 0.05);
    b.insert({0, ChannelKind::v, 0, 1}, 0.3);
    b.insert({0, ChannelKind::v, 1, 0}, 0.2);
    b.insert({0, ChannelKind::v, 1, 1}, 0.1);
    const auto out = head_consistency_expand({0, ChannelKind::v, 0, 0}, b);
    ASSERT_EQ(out.size(), 2u);
    EXPECT_EQ(out[1], (ChannelRef{0, ChannelKind::v, 1, 1}));
    EXPECT_FALSE(b.contains(out[1]));
    EXPECT_TRUE(b.contains({0, ChannelKind::v, 1, 0}));
}

TEST(HeadConsistency, SiblingWithLastChannelIsRetentionError) {
    ScoreBoard b;
    b.insert({0, ChannelKind::q, 0, 0}, 0.1);
    b.insert({0, ChannelKind::q, 0, 1}, 0.2);
    b.insert({0, ChannelKind::q, 1, 1}, 0.3);
    EXPECT_THROW(head_consistency_expand({0, ChannelKind::q, 0, 0}, b), MinimumRetentionError);
}

TEST(AttentionConsistency, MirrorsIndexIntoPartner) {
    ScoreBoard b;
    b.insert({0, ChannelKind::q, 0, 5}, 0.1);
    b.insert({0, ChannelKind::k, 0, 5}, 0.1);
    const auto out = attention_consistency_expand({0, ChannelKind::q, 0, 5}, b, {});
    EXPECT_EQ(out, (std::vector<ChannelRef>{{0, ChannelKind::q, 0, 5}, {0, ChannelKind::k, 0, 5}}));
    EXPECT_TRUE(b.empty());
}

TEST(AttentionConsistency, SymmetricAndIdempotent) {
    ScoreBoard b1, b2;
    for (auto* b : {&b1, &b2}) {
        b->insert({2, ChannelKind::q, 1, 3}, 0.4);
        b->insert({2, ChannelKind::k, 1, 3}, 0.4);
    }
    auto a = attention_consistency_expand({2, ChannelKind::q, 1, 3}, b1, {});
    auto k = attention_consistency_expand({2, ChannelKind::k, 1, 3}, b2, {});
    EXPECT_EQ(std::set<ChannelRef>(a.begin(), a.end()), std::set<ChannelRef>(k.begin(), k.end()));
    const std::set<ChannelRef> already{{2, ChannelKind::k, 1, 3}};
    ScoreBoard b3;
    b3.insert({2, ChannelKind::q, 1, 3}, 0.4);
    EXPECT_EQ(attention_consistency_expand({2, ChannelKind::q, 1, 3}, b3, already).size(), 1u);
}

TEST(Select, ZeroTargetSelectsNothing) {
    const auto m = random_compacted(toy_config(2, 3, 4), 2);
    const auto st = select_channels(m, 0.0);
    EXPECT_TRUE(st.pruned.empty());
    EXPECT_EQ(st.r_current, 0.0);
}

TEST(Select, HandSetToyMatchesReference) {
    // One block, two heads, D = 4, C = 8.
    auto m = ViTModel::create(toy_config(1, 2, 4), 3);
    m.insert_compactors();
    auto& cp = m.compactors[0];
    auto set_norm = [](Tensor& t, int64_t slab, int64_t col, float norm) {
        const int64_t d = t.shape().back();
        for (int64_t i = 0; i < d; ++i) t[(slab * d + i) * d + col] = i == col ? norm : 0.0f;
    };
    const float qn[2][4] = {{0.9f, 0.2f, 0.5f, 0.7f}, {0.4f, 0.8f, 0.15f, 0.6f}};
    const float kn[2][4] = {{0.3f, 0.2f, 0.9f, 0.1f}, {0.4f, 0.1f, 0.35f, 0.6f}};
    const float vn[2][4] = {{0.05f, 0.5f, 0.45f, 0.9f}, {0.25f, 0.65f, 0.12f, 0.3f}};
    for (int h = 0; h < 2; ++h)
        for (int j = 0; j < 4; ++j) {
            set_norm(cp.q.mutable_value(), h, j, qn[h][j]);
            set_norm(cp.k.mutable_value(), h, j, kn[h][j]);
            set_norm(cp.v.mutable_value(), h, j, vn[h][j]);
        }
    for (int j = 0; j < 8; ++j) set_norm(cp.proj.mutable_value(), 0, j, 0.1f * float(j + 2));
    for (int j = 0; j < 16; ++j) set_norm(cp.fc1.mutable_value(), 0, j, 0.07f * float((j * 7) % 16 + 1));
    for (double target : {0.02, 0.08, 0.15, 0.3}) {
        double r_ref = 0.0;
        const auto expect = oracle::ref_select(m, target, &r_ref);
        const auto st = select_channels(m, target);
        EXPECT_EQ(st.pruned, expect) << target;
        EXPECT_NEAR(st.r_current, r_ref, 1e-12);
        EXPECT_GE(st.r_current, target);
    }
}

TEST(Select, RandomToyMatchesReferenceAndInvariants) {
    for (uint64_t seed : {4, 5, 6}) {
        const auto cfg = toy_config(3, 3, 4);
        const auto m = random_compacted(cfg, seed, "0h");
        for (double target : {0.05, 0.12, 0.25}) {
            const auto st = select_channels(m, target);
            EXPECT_EQ(st.pruned, oracle::ref_select(m, target)) << seed << " " << target;
            for (int l = 0; l < 3; ++l) {
                for (auto kind : {ChannelKind::q, ChannelKind::k, ChannelKind::v}) {
                    const size_t n0 = cols(st.pruned, l, kind, 0).size();
                    for (int h = 1; h < 3; ++h) EXPECT_EQ(cols(st.pruned, l, kind, h).size(), n0);
                }
                for (int h = 0; h < 3; ++h)
                    EXPECT_EQ(cols(st.pruned, l, ChannelKind::q, h), cols(st.pruned, l, ChannelKind::k, h));
            }
        }
    }
}

TEST(Select, RatioMatchesFlopsAuditOfPrunedWidths) {
    const auto m = random_compacted(toy_config(2, 2, 4), 7, "0h");
    const auto st = select_channels(m, 0.2);
    const auto state = pruned_state(m, st.pruned);
    const double merged = double(flops::total_macs(m.config, m.plan));
    const double base = double(flops::total_macs(m.config, {}));
    EXPECT_NEAR(st.r_current, (merged - double(flops::total_macs(m.config, m.plan, &state))) / base, 1e-15);
}

TEST(Select, UnreachableTargetReportsMaximum) {
    const auto m = random_compacted(toy_config(1, 2, 2), 8);
    try {
        select_channels(m, 0.95);
        FAIL() << "expected SelectionError";
    } catch (const SelectionError& e) {
        EXPECT_GT(e.max_achievable(), 0.3);
        EXPECT_LT(e.max_achievable(), 0.95);
    }
}

TEST(Select, RetentionKeepsOneChannelPerGroup) {
    const auto m = random_compacted(toy_config(1, 2, 2), 9);
    double max_r = 0.0;
    try {
        select_channels(m, 0.95);
    } catch (const SelectionError& e) {
        max_r = e.max_achievable();
    }
    const auto st = select_channels(m, max_r);
    for (int h = 0; h < 2; ++h) {
        EXPECT_EQ(cols(st.pruned, 0, ChannelKind::q, h).size(), 1u);
        EXPECT_EQ(cols(st.pruned, 0, ChannelKind::v, h).size(), 1u);
    }
    EXPECT_EQ(cols(st.pruned, 0, ChannelKind::proj, -1).size(), 3u);
    EXPECT_EQ(cols(st.pruned, 0, ChannelKind::fc1, -1).size(), 7u);
}

TEST(Select, DeitTinyStopsWithinOneStepOfTarget) {
    auto m = ViTModel::create(ViTConfig::deit_tiny(), 10);
    m.insert_compactors();
    // Perturb the identity compactors so column norms differ.
    uint64_t s = 77;
    for (auto& cp : m.compactors) {
        for (auto kind : {ChannelKind::q, ChannelKind::k, ChannelKind::v, ChannelKind::proj, ChannelKind::fc1}) {
            Tensor noise = random_tensor(cp.matrix(kind).shape(), s++, -0.02f, 0.02f);
            cp.matrix(kind).mutable_value().add_(noise);
        }
    }
    const auto st = select_channels(m, 0.251);
    EXPECT_GE(st.r_current, 0.251);
    EXPECT_LT(st.r_current - st.last_step, 0.251);
    EXPECT_GT(st.last_step, 0.0);
    // Per-head uniformity across all twelve blocks.
    for (int l = 0; l < 12; ++l)
        for (auto kind : {ChannelKind::q, ChannelKind::v})
            for (int h = 1; h < 3; ++h)
                EXPECT_EQ(cols(st.pruned, l, kind, h).size(), cols(st.pruned, l, kind, 0).size());
}

TEST(Fold, IdentityCompactorLeavesWeight) {
    const Tensor w = random_tensor({5, 4}, 20), b = random_tensor({4}, 21);
    const auto f = fold(w, b, Tensor::identity(4));
    EXPECT_EQ(f.weight, w);
    EXPECT_EQ(f.bias, b);
}

TEST(Fold, MatchesTwoMatmulPath) {
    const Tensor w = random_tensor({6, 5}, 22), b = random_tensor({5}, 23), m = random_tensor({5, 5}, 24);
    const Tensor x = random_tensor({3, 6}, 25);
    const std::vector<int64_t> keep{0, 2, 3};
    const auto f = fold(w, b, m.column_subset(keep));
    Tensor y = oracle::ref_matmul(x, w);
    for (int64_t i = 0; i < 3; ++i)
        for (int64_t j = 0; j < 5; ++j) y.at(i, j) += b[j];
    const Tensor two = oracle::ref_matmul(y, m);
    Tensor one = oracle::ref_matmul(x, f.weight);
    for (int64_t i = 0; i < 3; ++i)
        for (size_t j = 0; j < keep.size(); ++j)
            EXPECT_NEAR(one.at(i, int64_t(j)) + f.bias[int64_t(j)], two.at(i, keep[j]), 1e-5);
}

TEST(Fold, ZeroColumnDropsOnlyThatChannel) {
    const Tensor w = random_tensor({4, 3}, 26), b = random_tensor({3}, 27);
    Tensor m = Tensor::identity(3);
    m.at(1, 1) = 0.0f;
    const auto full = fold(w, b, m);
    for (int64_t i = 0; i < 4; ++i) {
        EXPECT_EQ(full.weight.at(i, 1), 0.0f);
        EXPECT_EQ(full.weight.at(i, 0), w.at(i, 0));
    }
}

TEST(PruneModel, EmptySelectionKeepsLogits) {
    auto m = random_compacted(toy_config(2, 2, 4), 30, "0h");
    PruneState st;
    apply_masks(m, st.pruned);
    const auto res = prune_model(m, st);
    const Tensor x = images(4, 16, 31);
    EXPECT_LE(max_abs_diff(res.model.forward(x).value(), m.forward(x).value()), 1e-4);
    EXPECT_FALSE(res.model.has_compactors());
    EXPECT_TRUE(res.model.is_folded());
}

TEST(PruneModel, FoldedMatchesMaskedAndShrinksShapes) {
    auto m = random_compacted(ViTConfig::desk(), 32, "0h,2v");
    auto st = select_channels(m, 0.2);
    apply_masks(m, st.pruned);
    auto masked = m.clone();
    hard_zero(masked, st.pruned);
    const auto res = prune_model(m, st, 1e9);
    for (uint64_t s = 0; s < 5; ++s) {
        const Tensor x = images(4, 32, 100 + s);
        EXPECT_LE(max_abs_diff(res.model.forward(x).value(), masked.forward(x, {.gate_masks = true}).value()), 1e-4);
        EXPECT_LE(max_abs_diff(res.model.forward(x).value(), masked.forward(x).value()), 1e-4);
    }
    const auto state = pruned_state(m, st.pruned);
    EXPECT_EQ(flops::state_of(res.model), state);
    EXPECT_EQ(res.model.parameter_count(), flops::model_params(m.config, m.plan, &state));
    EXPECT_NEAR(flops::model_flops(res.model).ratio,
                flops::reduction_ratio(m.config, m.plan) + st.r_current, 1e-12);
    for (const auto& a : res.report.audits) {
        if (a.name != "target_reached") EXPECT_TRUE(a.passed) << a.name << ": " << a.detail;
    }
}

TEST(PruneModel, ParameterReductionMatchesClosedForm) {
    auto m = random_compacted(ViTConfig::deit_small(), 33);
    const auto st = select_channels(m, 0.1);
    apply_masks(m, st.pruned);
    const auto res = prune_model(m, st, 1e9);
    int64_t removed = 0;
    const int64_t c = 384;
    for (const auto& ch : st.pruned) {
        switch (ch.kind) {
            case ChannelKind::q:
            case ChannelKind::k: removed += c + 1; break;         // weight column + bias
            case ChannelKind::v: removed += c + 1 + c; break;     // plus one proj input row
            case ChannelKind::proj: removed += 384 + 1; break;    // proj output column + bias
            case ChannelKind::fc1: removed += c + 1 + c; break;   // plus one fc2 row
        }
    }
    // A pruned proj output column loses one entry per surviving proj input row.
    int64_t correction = 0;
    for (int l = 0; l < 12; ++l) {
        const int64_t v_pruned = int64_t(cols(st.pruned, l, ChannelKind::v, 0).size()) * 6;
        const int64_t p_pruned = int64_t(cols(st.pruned, l, ChannelKind::proj, -1).size());
        correction += v_pruned * p_pruned;  // counted twice above
    }
    EXPECT_EQ(m.parameter_count() - res.model.parameter_count(), removed - correction);
}

TEST(PruneModel, MisalignedSelectionIsConsistencyError) {
    auto m = random_compacted(toy_config(1, 2, 4), 34);
    PruneState st;
    st.pruned = {{0, ChannelKind::q, 0, 1}, {0, ChannelKind::q, 1, 1}, {0, ChannelKind::k, 0, 1}, {0, ChannelKind::k, 1, 2}};
    apply_masks(m, st.pruned);
    EXPECT_THROW(prune_model(m, st), ConsistencyError);
    st.pruned = {{0, ChannelKind::v, 0, 1}};
    apply_masks(m, st.pruned);
    EXPECT_THROW(prune_model(m, st), ConsistencyError);
}

TEST(PruneModel, FoldedCheckpointRoundTrip) {
    auto m = random_compacted(ViTConfig::desk(), 35, "0h");
    const auto st = select_channels(m, 0.15);
    apply_masks(m, st.pruned);
    const auto res = prune_model(m, st, 1e9);
    const std::string bytes = serialize_checkpoint(res.model);
    EXPECT_NE(bytes.find("retained 0 qk 0"), std::string::npos);
    const auto back = deserialize_checkpoint(bytes);
    EXPECT_EQ(serialize_checkpoint(back), bytes);
    const Tensor x = images(2, 32, 36);
    EXPECT_EQ(back.forward(x).value(), res.model.forward(x).value());
}

TEST(PruneReport, AuditsFlagLargePrunedNorms) {
    auto m = random_compacted(toy_config(1, 2, 4), 37);
    const auto st = select_channels(m, 0.1);
    apply_masks(m, st.pruned);
    const auto r = prune_report(m, st, 1e-6);
    bool norm_failed = false;
    for (const auto& a : r.audits)
        if (a.name == "pruned_norm") norm_failed = !a.passed;
    EXPECT_TRUE(norm_failed);
    EXPECT_FALSE(r.all_passed());
    EXPECT_NE(r.table().find("[FAIL] pruned_norm"), std::string::npos);
    EXPECT_NE(r.to_json().find("\"all_passed\": false"), std::string::npos);
}

TEST(PruneReport, MaskMismatchIsReported) {
    auto m = random_compacted(toy_config(1, 2, 4), 38);
    const auto st = select_channels(m, 0.1);
    const auto r = prune_report(m, st, 1e9);  // masks never applied
    for (const auto& a : r.audits)
        if (a.name == "masks_match_P") EXPECT_FALSE(a.passed);
}
