#pragma once

#include <functional>
#include <optional>

#include "vitc/atme/merge_plan.hpp"

namespace vitc::atme {

// Reduction ratio (1 - total / baseline) achieved by a plan.
using ReductionFn = std::function<double(const MergePlan&)>;

struct PlanResult {
    MergePlan plan;
    double achieved = 0.0;
    MergePlan uniform;  // starting point before adjustment
    double uniform_achieved = 0.0;
    int adjustments = 0;
};

// Largest number of alternating merges (h, v, h, ...) the grid supports
// without odd extents, also bounded by depth - 1.
int max_merges(const ViTConfig& config);

// Merges spread so the blocks split into count + 1 stages of equal depth
// (rounded): merge i runs after block round(i * depth / (count + 1)) - 1.
MergePlan uniform_plan(const ViTConfig& config, int count);

// Uniform placement, then greedy +/-1 block moves of single merges while
// |achieved - target| strictly decreases. Ties prefer moving the later merge,
// then the larger reduction. `count` defaults to min(2, max_merges).
// Throws PlacementError when the target exceeds what every legal merge at the
// earliest positions achieves.
PlanResult plan_merges(const ViTConfig& config, double target, const ReductionFn& reduction,
                       std::optional<int> count = std::nullopt);

}  // namespace vitc::atme
