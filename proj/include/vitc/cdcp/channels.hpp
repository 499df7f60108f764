#pragma once

#include <compare>
#include <cstdint>
#include <functional>
#include <map>
#include <set>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "vitc/flops/audit.hpp"
#include "vitc/model/vit.hpp"

namespace vitc::cdcp {

// Address of one compactor column. `head` is -1 for proj and fc1.
struct ChannelRef {
    int block = 0;
    ChannelKind kind = ChannelKind::q;
    int head = -1;
    int col = 0;

    // Lexicographic (block, kind q<k<v<proj<fc1, head, col).
    auto operator<=>(const ChannelRef&) const = default;
    std::string to_string() const;
};

// A (block, kind, head) compactor group; proj and fc1 use head -1.
struct GroupKey {
    int block = 0;
    ChannelKind kind = ChannelKind::q;
    int head = -1;
    auto operator<=>(const GroupKey&) const = default;
};

inline GroupKey group_of(const ChannelRef& c) { return {c.block, c.kind, c.head}; }

// Global score set S with per-group local views. Scores are column L2 norms;
// a q column and its k partner both score the mean of their two norms.
class ScoreBoard {
public:
    ScoreBoard() = default;
    static ScoreBoard from_model(const ViTModel& model);

    void insert(const ChannelRef& c, double score);
    // Removes c from S and its local view; no-op when absent.
    void remove(const ChannelRef& c);
    bool contains(const ChannelRef& c) const { return scores_.count(c) != 0; }
    double score(const ChannelRef& c) const;
    bool empty() const { return global_.empty(); }
    size_t size() const { return global_.size(); }

    // Lowest (score, ref) entry of S. Board must be non-empty.
    ChannelRef argmin() const;
    // Lowest entry of a local view, or nullptr when the view is empty.
    const ChannelRef* local_argmin(const GroupKey& g) const;
    size_t local_size(const GroupKey& g) const;
    // Every local view ever populated for (block, kind), including emptied
    // ones, in head order.
    std::vector<GroupKey> groups(int block, ChannelKind kind) const;

    const std::map<ChannelRef, double>& scores() const { return scores_; }

private:
    using Entry = std::pair<double, ChannelRef>;
    std::map<ChannelRef, double> scores_;
    std::set<Entry> global_;
    std::map<GroupKey, std::set<Entry>> local_;
};

struct PruneState {
    std::set<ChannelRef> pruned;  // P
    double r_current = 0.0;
    double r_target = 0.0;
    int iterations = 0;      // loop iterations that added channels
    double last_step = 0.0;  // r_current gained by the final iteration
};

// Eq. 2 for one column: m * g_cls + lambda * c / ||c||. The lasso term is
// zero when ||c|| < 1e-12.
std::vector<float> compactor_grad(std::span<const float> c, float m, std::span<const float> g_cls, double lambda);

// Column-wise Eq. 2 over a whole compactor: m is [d, d] with mask [d], or
// [heads, d, d] with mask [heads, d].
nn::Tensor compactor_grad(const nn::Tensor& m, const nn::Tensor& mask, const nn::Tensor& g_cls, double lambda);

// Column L2 norms, shaped like the mask.
nn::Tensor column_norms(const nn::Tensor& m);

// Alg. 1: c plus the lowest-scoring channel of every sibling head of the same
// kind; all returned channels leave the board. Throws MinimumRetentionError
// when a sibling head has no channel it may give up (its last one is kept).
std::vector<ChannelRef> head_consistency_expand(const ChannelRef& c, ScoreBoard& board);

// Alg. 2: c plus its mirror in the opposite of q/k. The partner leaves the
// board; when it is already in `pruned` only c is returned.
std::vector<ChannelRef> attention_consistency_expand(const ChannelRef& c, ScoreBoard& board,
                                                     const std::set<ChannelRef>& pruned);

// Reduction attributable to channel pruning for a given surviving-width state.
using RatioFn = std::function<double(const flops::ChannelState&)>;

// (F(plan, full) - F(plan, state)) / F(no merges, full): channel savings with
// the merge plan held fixed, on the same scale as the merge reduction so the
// two add up to the joint reduction.
RatioFn channel_ratio_fn(const ViTConfig& config, const atme::MergePlan& plan);

// Alg. 3. Starts from an empty P and a copy of `board`; pops the global
// argmin until r_current >= r_target. A channel that is the last survivor of
// its group is retired from the board instead of pruned. Throws
// SelectionError (with the largest reachable ratio) when the board runs dry.
PruneState select_channels(ScoreBoard board, const ViTModel& model, double r_target, const RatioFn& ratio);
PruneState select_channels(const ViTModel& model, double r_target);

// Widths left after removing P from a compacted model.
flops::ChannelState pruned_state(const ViTModel& model, const std::set<ChannelRef>& pruned);

// W_bar = W * M_bar, b_bar = b * M_bar.
struct Folded {
    nn::Tensor weight;
    nn::Tensor bias;
};
Folded fold(const nn::Tensor& w, const nn::Tensor& b, const nn::Tensor& m_bar);

}  // namespace vitc::cdcp
