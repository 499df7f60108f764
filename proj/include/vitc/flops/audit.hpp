#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vitc/atme/merge_plan.hpp"
#include "vitc/model/config.hpp"

namespace vitc {
class ViTModel;
}

namespace vitc::flops {

// Surviving widths of one block. Per-head widths are summed over heads, so
// q_total = sum_h D_q^h and so on.
struct BlockDims {
    int64_t q_total = 0;
    int64_t k_total = 0;
    int64_t v_total = 0;
    int64_t proj_out = 0;
    int64_t mlp_hidden = 0;

    static BlockDims full(const ViTConfig& config);
    bool operator==(const BlockDims&) const = default;
};

// One entry per block.
using ChannelState = std::vector<BlockDims>;

ChannelState full_state(const ViTConfig& config);
// Widths read off a model's weight shapes (folded models report pruned widths).
ChannelState state_of(const ViTModel& model);

struct Component {
    std::string name;
    int64_t macs = 0;
};

// Multiply-accumulate counts of the matmuls of one forward pass on a single
// image. One MAC is reported as one FLOP.
struct FlopsReport {
    std::vector<Component> components;
    int64_t total = 0;
    int64_t baseline = 0;  // unmerged, unpruned model of the same config
    double ratio = 0.0;    // 1 - total / baseline

    int64_t component(const std::string& name) const;
    // Aligned text table with per-component MACs and totals.
    std::string table() const;
    std::string to_json() const;
};

// `state` may be null for full widths. Throws PlacementError for illegal plans.
FlopsReport model_flops(const ViTConfig& config, const atme::MergePlan& plan, const ChannelState* state = nullptr);
FlopsReport model_flops(const ViTModel& model);

// Reduction ratio only (cheaper than building the component list).
double reduction_ratio(const ViTConfig& config, const atme::MergePlan& plan, const ChannelState* state = nullptr);
int64_t total_macs(const ViTConfig& config, const atme::MergePlan& plan, const ChannelState* state = nullptr);

// Exact parameter count, including merge fusion layers and pruned widths.
int64_t model_params(const ViTConfig& config, const atme::MergePlan& plan, const ChannelState* state = nullptr);

}  // namespace vitc::flops
