#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "vitc/atme/merge_plan.hpp"
#include "vitc/numerics/autograd.hpp"

namespace vitc::atme {

// LayerNorm(2C) followed by Linear(2C -> C), applied to concatenated pairs.
struct FusionLayer {
    nn::Var norm_weight;  // [2C]
    nn::Var norm_bias;    // [2C]
    nn::Var weight;       // [2C, C]
    nn::Var bias;         // [C]

    // Identity norm affine and the pair-averaging map [I/2; I/2] with zero bias.
    static FusionLayer averaging(int64_t dim);
    int64_t dim() const { return weight.value().dim(1); }
    FusionLayer clone() const;
};

struct MergeResult {
    nn::Var tokens;
    Grid grid;
};

// Source positions (row-major within one image's grid) of the two tokens fused
// into each output token, ordered row-major over the output grid.
std::vector<std::pair<int64_t, int64_t>> pair_sources(Grid grid, MergeDirection direction);

// Merges adjacent token pairs of `batch` sequences laid out as
// [batch * (cls + grid.count()), C]. The CLS row, when present, is carried
// through unchanged. `normalize = false` skips the LayerNorm (test mode).
MergeResult merge_tokens(const nn::Var& tokens, int64_t batch, Grid grid, MergeDirection direction, bool has_cls,
                         const FusionLayer& fusion, bool normalize = true);

// Single-sequence horizontal merge: pairs columns (2j, 2j+1) of each row.
MergeResult htm(const nn::Var& tokens, Grid grid, const FusionLayer& fusion, bool has_cls, bool normalize = true);
// Single-sequence vertical merge: pairs rows (2i, 2i+1) of each column.
MergeResult vtm(const nn::Var& tokens, Grid grid, const FusionLayer& fusion, bool has_cls, bool normalize = true);

}  // namespace vitc::atme
