#include "vitc/atme/merge_plan.hpp"

#include <charconv>
#include <sstream>

#include "vitc/errors.hpp"

namespace vitc::atme {

char direction_code(MergeDirection d) { return d == MergeDirection::horizontal ? 'h' : 'v'; }

MergePlan MergePlan::parse(std::string_view text) {
    std::vector<MergeEntry> entries;
    size_t pos = 0;
    while (pos < text.size()) {
        size_t end = text.find(',', pos);
        if (end == std::string_view::npos) end = text.size();
        std::string_view item = text.substr(pos, end - pos);
        while (!item.empty() && item.front() == ' ') item.remove_prefix(1);
        while (!item.empty() && item.back() == ' ') item.remove_suffix(1);
        if (item.size() < 2) throw PlacementError("malformed merge entry '" + std::string(item) + "'");
        const char dir = item.back();
        int block = -1;
        auto [ptr, ec] = std::from_chars(item.data(), item.data() + item.size() - 1, block);
        if (ec != std::errc() || ptr != item.data() + item.size() - 1 || (dir != 'h' && dir != 'v')) {
            throw PlacementError("malformed merge entry '" + std::string(item) + "'");
        }
        entries.push_back({block, dir == 'h' ? MergeDirection::horizontal : MergeDirection::vertical});
        pos = end + 1;
    }
    return MergePlan(std::move(entries));
}

MergePlan MergePlan::alternating(const std::vector<int>& after_blocks) {
    std::vector<MergeEntry> entries;
    for (size_t i = 0; i < after_blocks.size(); ++i) {
        entries.push_back({after_blocks[i], i % 2 == 0 ? MergeDirection::horizontal : MergeDirection::vertical});
    }
    return MergePlan(std::move(entries));
}

std::string MergePlan::to_string() const {
    std::ostringstream os;
    for (size_t i = 0; i < entries_.size(); ++i) {
        if (i) os << ',';
        os << entries_[i].after_block << direction_code(entries_[i].direction);
    }
    return os.str();
}

void MergePlan::validate(const ViTConfig& config) const {
    Grid grid{config.grid(), config.grid()};
    int prev = -1;
    for (size_t i = 0; i < entries_.size(); ++i) {
        const auto& e = entries_[i];
        const std::string where = "merge " + std::to_string(e.after_block) + direction_code(e.direction);
        if (e.after_block < 0 || e.after_block > config.depth - 2) {
            throw PlacementError(where + ": block index outside [0, " + std::to_string(config.depth - 2) + "]");
        }
        if (e.after_block <= prev) throw PlacementError(where + ": block indices must strictly increase");
        const auto expected = i % 2 == 0 ? MergeDirection::horizontal : MergeDirection::vertical;
        if (e.direction != expected) {
            throw PlacementError(where + ": directions must alternate starting with horizontal");
        }
        if (e.direction == MergeDirection::horizontal) {
            if (grid.width % 2 != 0) {
                throw PlacementError(where + ": odd grid width " + std::to_string(grid.width));
            }
            grid.width /= 2;
        } else {
            if (grid.height % 2 != 0) {
                throw PlacementError(where + ": odd grid height " + std::to_string(grid.height));
            }
            grid.height /= 2;
        }
        prev = e.after_block;
    }
}

std::vector<Grid> MergePlan::block_grids(const ViTConfig& config) const {
    std::vector<Grid> grids;
    Grid grid{config.grid(), config.grid()};
    for (int b = 0; b <= config.depth; ++b) {
        const int m = merge_before(b);
        if (m >= 0) {
            if (entries_[m].direction == MergeDirection::horizontal) {
                grid.width /= 2;
            } else {
                grid.height /= 2;
            }
        }
        grids.push_back(grid);
    }
    return grids;
}

int MergePlan::merge_before(int block) const {
    for (size_t i = 0; i < entries_.size(); ++i) {
        if (entries_[i].after_block == block - 1) return static_cast<int>(i);
    }
    return -1;
}

}  // namespace vitc::atme
