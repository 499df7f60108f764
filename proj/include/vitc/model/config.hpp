#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace vitc {

// Architecture of a plain ViT. dim == heads * head_dim for unpruned models.
struct ViTConfig {
    int depth = 12;
    int dim = 384;
    int heads = 6;
    int head_dim = 64;
    int patch = 16;
    int img = 224;
    int classes = 1000;
    int mlp_ratio = 4;
    bool use_cls = true;
    bool final_norm = true;

    int grid() const { return img / patch; }
    int spatial_tokens() const { return grid() * grid(); }
    int tokens() const { return spatial_tokens() + (use_cls ? 1 : 0); }
    int mlp_hidden() const { return dim * mlp_ratio; }
    int patch_features() const { return 3 * patch * patch; }

    // Throws ConfigError on an inconsistent architecture.
    void validate() const;

    static ViTConfig deit_tiny();
    static ViTConfig deit_small();
    static ViTConfig deit_base();
    // 4 blocks, C=64, 4 heads, 32x32 input in 4x4 patches (8x8 grid), 10 classes.
    static ViTConfig desk();
    // "deit-tiny", "deit-small", "deit-base" or "desk".
    static ViTConfig by_name(std::string_view name);

    bool operator==(const ViTConfig&) const = default;
};

inline constexpr float kLayerNormEps = 1e-6f;

}  // namespace vitc
