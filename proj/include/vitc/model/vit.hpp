#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "vitc/atme/merge.hpp"
#include "vitc/atme/merge_plan.hpp"
#include "vitc/model/config.hpp"
#include "vitc/numerics/autograd.hpp"

namespace vitc {

enum class ChannelKind { q = 0, k = 1, v = 2, proj = 3, fc1 = 4 };

const char* kind_name(ChannelKind kind);
bool is_head_kind(ChannelKind kind);

// Weights of one pre-norm transformer block. Per-head projections are stored
// packed: q.weight is [C, heads * qk_dim] with head h owning columns
// [h*qk_dim, (h+1)*qk_dim). Widths shrink after structural pruning.
struct BlockWeights {
    nn::Var norm1_weight, norm1_bias;
    nn::Var q_weight, q_bias;
    nn::Var k_weight, k_bias;
    nn::Var v_weight, v_bias;
    nn::Var proj_weight, proj_bias;  // [heads * v_dim, proj_out]
    nn::Var norm2_weight, norm2_bias;
    nn::Var fc1_weight, fc1_bias;  // [C, F]
    nn::Var fc2_weight, fc2_bias;  // [F, C]
    // Residual-stream columns written by proj outputs; empty means all C.
    std::vector<int64_t> proj_index;

    int64_t qk_dim(int heads) const { return q_weight.value().dim(1) / heads; }
    int64_t v_dim(int heads) const { return v_weight.value().dim(1) / heads; }
    int64_t proj_out() const { return proj_weight.value().dim(1); }
    int64_t mlp_hidden() const { return fc1_weight.value().dim(1); }
};

// Learnable square transforms post-multiplying q/k/v (per head), proj and fc1
// outputs. Masks are per-column bits; a zero bit marks a channel in P.
struct BlockCompactors {
    nn::Var q, k, v;  // [heads, D, D]
    nn::Var proj;     // [C, C]
    nn::Var fc1;      // [F, F]
    nn::Tensor q_mask, k_mask, v_mask;  // [heads, D]
    nn::Tensor proj_mask;               // [C]
    nn::Tensor fc1_mask;                // [F]

    const nn::Var& matrix(ChannelKind kind) const;
    nn::Var& matrix(ChannelKind kind);
    const nn::Tensor& mask(ChannelKind kind) const;
    nn::Tensor& mask(ChannelKind kind);
};

// Channel indices kept by structural pruning, recorded in folded checkpoints.
struct RetainedChannels {
    std::vector<std::vector<int64_t>> qk;  // per head
    std::vector<std::vector<int64_t>> v;   // per head
    std::vector<int64_t> proj;
    std::vector<int64_t> fc1;
};

struct ForwardOptions {
    // Multiply compactor columns by their mask bits in the forward pass.
    bool gate_masks = false;
};

class ViTModel {
public:
    ViTConfig config;
    nn::Var patch_weight, patch_bias;  // [3*p*p, C], [C]
    nn::Var cls_token;                 // [1, C] (undefined when use_cls is false)
    nn::Var pos_embed;                 // [N, C]
    std::vector<BlockWeights> blocks;
    nn::Var norm_weight, norm_bias;    // final norm (undefined when disabled)
    nn::Var head_weight, head_bias;    // [C, classes], [classes]
    atme::MergePlan plan;
    std::vector<atme::FusionLayer> merges;  // aligned with plan.entries()
    std::vector<BlockCompactors> compactors;  // empty or one per block
    std::vector<RetainedChannels> retained;   // non-empty only for folded models
    std::map<std::string, std::string> meta;

    ViTModel() = default;
    ViTModel(const ViTModel&) = delete;
    ViTModel& operator=(const ViTModel&) = delete;
    ViTModel(ViTModel&&) = default;
    ViTModel& operator=(ViTModel&&) = default;

    // Truncated-normal (std 0.02) linear weights, zero biases, unit norms.
    static ViTModel create(const ViTConfig& config, uint64_t seed);
    ViTModel clone() const;

    // Installs merge layers with averaging initialization. Throws
    // PlacementError when the plan is illegal or merges already exist.
    void insert_merges(const atme::MergePlan& plan);
    // Installs identity compactors with all-ones masks.
    void insert_compactors();
    bool has_compactors() const { return !compactors.empty(); }
    bool is_folded() const { return !retained.empty(); }

    // Parameters in checkpoint order. Compactors are included when present.
    std::vector<std::pair<std::string, nn::Var>> named_parameters() const;
    std::vector<nn::Var> parameters() const;
    // Trainable scalar count, excluding compactors (they fold away).
    int64_t parameter_count() const;

    // Patch features of a [B, 3, img, img] batch: [B * spatial, 3*p*p] with
    // features ordered (channel, row, col) inside each patch.
    nn::Tensor patchify(const nn::Tensor& images) const;
    // Patch embedding, CLS prepend and positional embedding: [B * N, C].
    nn::Var embed(const nn::Tensor& images) const;
    // Logits [B, classes].
    nn::Var forward(const nn::Tensor& images, const ForwardOptions& options = {}) const;
};

// Multi-head self-attention of one block over `batch` sequences of `tokens`
// rows each. `compactors` may be null.
nn::Var mhsa_forward(const nn::Var& x, int64_t batch, int64_t tokens, int heads, const BlockWeights& block,
                     const BlockCompactors* compactors, const ForwardOptions& options = {});

// Full pre-norm block: x + MHSA(LN(x)), then + FFN(LN(x)).
nn::Var block_forward(const nn::Var& x, int64_t batch, int64_t tokens, int heads, const BlockWeights& block,
                      const BlockCompactors* compactors, const ForwardOptions& options = {});

}  // namespace vitc
