#include "vitc/atme/planner.hpp"

#include <cmath>
#include <sstream>

#include "vitc/errors.hpp"

namespace vitc::atme {

int max_merges(const ViTConfig& config) {
    int h = config.grid(), w = config.grid();
    int count = 0;
    while (count < config.depth - 1) {
        if (count % 2 == 0) {
            if (w % 2 != 0) break;
            w /= 2;
        } else {
            if (h % 2 != 0) break;
            h /= 2;
        }
        ++count;
    }
    return count;
}

MergePlan uniform_plan(const ViTConfig& config, int count) {
    if (count < 0 || count > max_merges(config)) {
        throw PlacementError("cannot place " + std::to_string(count) + " merges; at most " +
                             std::to_string(max_merges(config)) + " are legal");
    }
    std::vector<int> blocks;
    int prev = -1;
    for (int i = 1; i <= count; ++i) {
        const double boundary = static_cast<double>(i) * config.depth / (count + 1);
        int after = static_cast<int>(std::lround(boundary)) - 1;
        after = std::max(after, prev + 1);
        blocks.push_back(after);
        prev = after;
    }
    MergePlan plan = MergePlan::alternating(blocks);
    plan.validate(config);
    return plan;
}

namespace {

bool legal(const std::vector<int>& blocks, int depth) {
    for (size_t i = 0; i < blocks.size(); ++i) {
        if (blocks[i] < 0 || blocks[i] > depth - 2) return false;
        if (i > 0 && blocks[i] <= blocks[i - 1]) return false;
    }
    return true;
}

std::vector<int> after_blocks(const MergePlan& plan) {
    std::vector<int> out;
    for (const auto& e : plan.entries()) out.push_back(e.after_block);
    return out;
}

}  // namespace

PlanResult plan_merges(const ViTConfig& config, double target, const ReductionFn& reduction,
                       std::optional<int> count) {
    if (!(target > 0.0 && target < 1.0)) {
        throw PlacementError("merge target ratio must lie in (0, 1), got " + std::to_string(target));
    }
    const int kmax = max_merges(config);
    std::vector<int> earliest;
    for (int i = 0; i < kmax; ++i) earliest.push_back(i);
    const double best_possible = kmax ? reduction(MergePlan::alternating(earliest)) : 0.0;
    if (target > best_possible) {
        std::ostringstream os;
        os << "merge target " << target << " unreachable; maximum achievable reduction is " << best_possible;
        throw PlacementError(os.str());
    }
    const int k = count.value_or(std::min(2, kmax));
    if (k < 1) throw PlacementError("no legal merge placement for this grid");

    PlanResult result;
    result.uniform = uniform_plan(config, k);
    result.uniform_achieved = reduction(result.uniform);

    std::vector<int> current = after_blocks(result.uniform);
    double current_ratio = result.uniform_achieved;
    double current_err = std::abs(current_ratio - target);
    for (;;) {
        bool found = false;
        std::vector<int> best;
        double best_ratio = 0.0, best_err = current_err;
        // Later merges first so that ties keep the later-merge move.
        for (int i = static_cast<int>(current.size()) - 1; i >= 0; --i) {
            for (int delta : {-1, +1}) {
                std::vector<int> cand = current;
                cand[i] += delta;
                if (!legal(cand, config.depth)) continue;
                const double ratio = reduction(MergePlan::alternating(cand));
                const double err = std::abs(ratio - target);
                const bool better = err < best_err;
                const bool tie_larger = found && err == best_err && ratio > best_ratio;
                if (better || tie_larger) {
                    found = true;
                    best = cand;
                    best_ratio = ratio;
                    best_err = err;
                }
            }
        }
        if (!found) break;
        current = best;
        current_ratio = best_ratio;
        current_err = best_err;
        ++result.adjustments;
    }
    result.plan = MergePlan::alternating(current);
    result.achieved = current_ratio;
    return result;
}

}  // namespace vitc::atme
