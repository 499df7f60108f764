#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "vitc/model/config.hpp"

namespace vitc::atme {

enum class MergeDirection { horizontal, vertical };

char direction_code(MergeDirection d);

struct Grid {
    int height = 0;
    int width = 0;
    int count() const { return height * width; }
    bool operator==(const Grid&) const = default;
};

// A merge runs after block `after_block` (0-based) and before the attention
// of block after_block + 1, so blocks 0..after_block see the old resolution.
struct MergeEntry {
    int after_block = 0;
    MergeDirection direction = MergeDirection::horizontal;
    bool operator==(const MergeEntry&) const = default;
};

class MergePlan {
public:
    MergePlan() = default;
    explicit MergePlan(std::vector<MergeEntry> entries) : entries_(std::move(entries)) {}

    // "3h,7v" style; an empty string is the empty plan.
    static MergePlan parse(std::string_view text);
    // Directions alternate starting with horizontal.
    static MergePlan alternating(const std::vector<int>& after_blocks);
    std::string to_string() const;

    const std::vector<MergeEntry>& entries() const { return entries_; }
    bool empty() const { return entries_.empty(); }
    size_t size() const { return entries_.size(); }

    // Throws PlacementError unless indices strictly increase within
    // [0, depth - 2], directions alternate starting with horizontal, and every
    // merged extent is even when the merge runs.
    void validate(const ViTConfig& config) const;

    // Spatial grid seen by each block (size depth), plus the final grid.
    std::vector<Grid> block_grids(const ViTConfig& config) const;

    // Index into entries() of the merge that runs right before `block`, or -1.
    int merge_before(int block) const;

    bool operator==(const MergePlan&) const = default;

private:
    std::vector<MergeEntry> entries_;
};

}  // namespace vitc::atme
