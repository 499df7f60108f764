#include "vitc/atme/merge.hpp"

#include "vitc/errors.hpp"
#include "vitc/model/config.hpp"
#include "vitc/numerics/ops.hpp"

namespace vitc::atme {

using nn::Tensor;
using nn::Var;

FusionLayer FusionLayer::averaging(int64_t dim) {
    Tensor w({2 * dim, dim});
    for (int64_t i = 0; i < dim; ++i) {
        w.at(i, i) = 0.5f;
        w.at(dim + i, i) = 0.5f;
    }
    return FusionLayer{Var::parameter(Tensor::ones({2 * dim})), Var::parameter(Tensor::zeros({2 * dim})),
                       Var::parameter(std::move(w)), Var::parameter(Tensor::zeros({dim}))};
}

FusionLayer FusionLayer::clone() const {
    return FusionLayer{Var::parameter(norm_weight.value()), Var::parameter(norm_bias.value()),
                       Var::parameter(weight.value()), Var::parameter(bias.value())};
}

std::vector<std::pair<int64_t, int64_t>> pair_sources(Grid grid, MergeDirection direction) {
    const int64_t h = grid.height, w = grid.width;
    std::vector<std::pair<int64_t, int64_t>> out;
    if (direction == MergeDirection::horizontal) {
        if (w % 2 != 0) throw PlacementError("horizontal merge needs an even grid width, got " + std::to_string(w));
        for (int64_t i = 0; i < h; ++i)
            for (int64_t j = 0; j < w / 2; ++j) out.emplace_back(i * w + 2 * j, i * w + 2 * j + 1);
    } else {
        if (h % 2 != 0) throw PlacementError("vertical merge needs an even grid height, got " + std::to_string(h));
        for (int64_t i = 0; i < h / 2; ++i)
            for (int64_t j = 0; j < w; ++j) out.emplace_back(2 * i * w + j, (2 * i + 1) * w + j);
    }
    return out;
}

MergeResult merge_tokens(const Var& tokens, int64_t batch, Grid grid, MergeDirection direction, bool has_cls,
                         const FusionLayer& fusion, bool normalize) {
    const auto pairs = pair_sources(grid, direction);
    const int64_t per_seq = grid.count() + (has_cls ? 1 : 0);
    const int64_t offset = has_cls ? 1 : 0;
    if (tokens.value().rank() != 2 || tokens.value().dim(0) != batch * per_seq) {
        throw DimensionError("merge_tokens: expected " + std::to_string(batch * per_seq) + " rows for grid " +
                             std::to_string(grid.height) + "x" + std::to_string(grid.width) + ", got " +
                             nn::shape_str(tokens.shape()));
    }
    const int64_t m = static_cast<int64_t>(pairs.size());
    std::vector<int64_t> left, right, cls_rows;
    left.reserve(static_cast<size_t>(batch * m));
    right.reserve(static_cast<size_t>(batch * m));
    for (int64_t b = 0; b < batch; ++b) {
        if (has_cls) cls_rows.push_back(b * per_seq);
        for (const auto& [l, r] : pairs) {
            left.push_back(b * per_seq + offset + l);
            right.push_back(b * per_seq + offset + r);
        }
    }
    Var grouped = nn::concat_cols(nn::gather_rows(tokens, std::move(left)), nn::gather_rows(tokens, std::move(right)));
    if (normalize) grouped = nn::layer_norm(grouped, fusion.norm_weight, fusion.norm_bias, kLayerNormEps);
    Var fused = nn::linear(grouped, fusion.weight, fusion.bias);
    if (has_cls) fused = nn::prepend_token(fused, nn::gather_rows(tokens, std::move(cls_rows)), batch);

    Grid out = grid;
    if (direction == MergeDirection::horizontal) {
        out.width /= 2;
    } else {
        out.height /= 2;
    }
    return {fused, out};
}

MergeResult htm(const Var& tokens, Grid grid, const FusionLayer& fusion, bool has_cls, bool normalize) {
    return merge_tokens(tokens, 1, grid, MergeDirection::horizontal, has_cls, fusion, normalize);
}

MergeResult vtm(const Var& tokens, Grid grid, const FusionLayer& fusion, bool has_cls, bool normalize) {
    return merge_tokens(tokens, 1, grid, MergeDirection::vertical, has_cls, fusion, normalize);
}

}  // namespace vitc::atme
