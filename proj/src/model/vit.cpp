#include "vitc/model/vit.hpp"

#include <random>

#include "vitc/errors.hpp"
#include "vitc/numerics/ops.hpp"

namespace vitc {

using nn::Tensor;
using nn::Var;

const char* kind_name(ChannelKind kind) {
    switch (kind) {
        case ChannelKind::q: return "q";
        case ChannelKind::k: return "k";
        case ChannelKind::v: return "v";
        case ChannelKind::proj: return "proj";
        case ChannelKind::fc1: return "fc1";
    }
    return "?";
}

bool is_head_kind(ChannelKind kind) {
    return kind == ChannelKind::q || kind == ChannelKind::k || kind == ChannelKind::v;
}

const Var& BlockCompactors::matrix(ChannelKind kind) const {
    switch (kind) {
        case ChannelKind::q: return q;
        case ChannelKind::k: return k;
        case ChannelKind::v: return v;
        case ChannelKind::proj: return proj;
        case ChannelKind::fc1: return fc1;
    }
    throw ConfigError("bad channel kind");
}

Var& BlockCompactors::matrix(ChannelKind kind) {
    return const_cast<Var&>(static_cast<const BlockCompactors&>(*this).matrix(kind));
}

const Tensor& BlockCompactors::mask(ChannelKind kind) const {
    switch (kind) {
        case ChannelKind::q: return q_mask;
        case ChannelKind::k: return k_mask;
        case ChannelKind::v: return v_mask;
        case ChannelKind::proj: return proj_mask;
        case ChannelKind::fc1: return fc1_mask;
    }
    throw ConfigError("bad channel kind");
}

Tensor& BlockCompactors::mask(ChannelKind kind) {
    return const_cast<Tensor&>(static_cast<const BlockCompactors&>(*this).mask(kind));
}

namespace {

constexpr float kInitStd = 0.02f;

Tensor trunc_normal(std::mt19937_64& rng, nn::Shape shape, float std) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> normal(0.0, 1.0);
    for (auto& x : t.data()) {
        double z = normal(rng);
        while (z < -2.0 || z > 2.0) z = normal(rng);
        x = static_cast<float>(z * std);
    }
    return t;
}

Var param(Tensor t) { return Var::parameter(std::move(t)); }
Var copy_param(const Var& v) { return v.defined() ? Var::parameter(v.value()) : Var(); }

// Compactor matrix with each column scaled by its mask bit (constant mask).
Var gated(const Var& m, const Tensor& mask) {
    Tensor full(m.shape());
    const int64_t d = m.shape().back();
    const int64_t mats = full.numel() / (d * d);
    for (int64_t g = 0; g < mats; ++g)
        for (int64_t i = 0; i < d; ++i)
            for (int64_t j = 0; j < d; ++j) full[(g * d + i) * d + j] = mask[g * d + j];
    return nn::mul(m, Var::constant(std::move(full)));
}

Var compact(const Var& y, const Var& m, const Tensor& mask, bool per_head, const ForwardOptions& options) {
    const Var eff = options.gate_masks ? gated(m, mask) : m;
    return per_head ? nn::head_matmul(y, eff) : nn::matmul(y, eff);
}

}  // namespace

Var mhsa_forward(const Var& x, int64_t batch, int64_t tokens, int heads, const BlockWeights& block,
                 const BlockCompactors* cp, const ForwardOptions& options) {
    Var q = nn::linear(x, block.q_weight, block.q_bias);
    Var k = nn::linear(x, block.k_weight, block.k_bias);
    Var v = nn::linear(x, block.v_weight, block.v_bias);
    if (cp) {
        q = compact(q, cp->q, cp->q_mask, true, options);
        k = compact(k, cp->k, cp->k_mask, true, options);
        v = compact(v, cp->v, cp->v_mask, true, options);
    }
    if (q.shape() != k.shape()) {
        throw ConsistencyError("query/key widths differ: " + nn::shape_str(q.shape()) + " vs " +
                               nn::shape_str(k.shape()));
    }
    Var a = nn::attention(q, k, v, batch, tokens, heads);
    Var out = nn::linear(a, block.proj_weight, block.proj_bias);
    if (cp) out = compact(out, cp->proj, cp->proj_mask, false, options);
    if (!block.proj_index.empty()) out = nn::scatter_cols(out, block.proj_index, x.shape()[1]);
    return out;
}

Var block_forward(const Var& x, int64_t batch, int64_t tokens, int heads, const BlockWeights& block,
                  const BlockCompactors* cp, const ForwardOptions& options) {
    Var h = nn::layer_norm(x, block.norm1_weight, block.norm1_bias, kLayerNormEps);
    Var y = nn::add(x, mhsa_forward(h, batch, tokens, heads, block, cp, options));
    Var z = nn::linear(nn::layer_norm(y, block.norm2_weight, block.norm2_bias, kLayerNormEps), block.fc1_weight,
                       block.fc1_bias);
    if (cp) z = compact(z, cp->fc1, cp->fc1_mask, false, options);
    z = nn::linear(nn::gelu(z), block.fc2_weight, block.fc2_bias);
    return nn::add(y, z);
}

ViTModel ViTModel::create(const ViTConfig& config, uint64_t seed) {
    config.validate();
    std::mt19937_64 rng(seed);
    const int64_t c = config.dim, f = config.mlp_hidden();
    ViTModel m;
    m.config = config;
    m.patch_weight = param(trunc_normal(rng, {config.patch_features(), c}, kInitStd));
    m.patch_bias = param(Tensor::zeros({c}));
    if (config.use_cls) m.cls_token = param(trunc_normal(rng, {1, c}, kInitStd));
    m.pos_embed = param(trunc_normal(rng, {config.tokens(), c}, kInitStd));
    for (int l = 0; l < config.depth; ++l) {
        BlockWeights b;
        b.norm1_weight = param(Tensor::ones({c}));
        b.norm1_bias = param(Tensor::zeros({c}));
        b.q_weight = param(trunc_normal(rng, {c, c}, kInitStd));
        b.q_bias = param(Tensor::zeros({c}));
        b.k_weight = param(trunc_normal(rng, {c, c}, kInitStd));
        b.k_bias = param(Tensor::zeros({c}));
        b.v_weight = param(trunc_normal(rng, {c, c}, kInitStd));
        b.v_bias = param(Tensor::zeros({c}));
        b.proj_weight = param(trunc_normal(rng, {c, c}, kInitStd));
        b.proj_bias = param(Tensor::zeros({c}));
        b.norm2_weight = param(Tensor::ones({c}));
        b.norm2_bias = param(Tensor::zeros({c}));
        b.fc1_weight = param(trunc_normal(rng, {c, f}, kInitStd));
        b.fc1_bias = param(Tensor::zeros({f}));
        b.fc2_weight = param(trunc_normal(rng, {f, c}, kInitStd));
        b.fc2_bias = param(Tensor::zeros({c}));
        m.blocks.push_back(std::move(b));
    }
    if (config.final_norm) {
        m.norm_weight = param(Tensor::ones({c}));
        m.norm_bias = param(Tensor::zeros({c}));
    }
    m.head_weight = param(trunc_normal(rng, {c, config.classes}, kInitStd));
    m.head_bias = param(Tensor::zeros({config.classes}));
    return m;
}

ViTModel ViTModel::clone() const {
    ViTModel m;
    m.config = config;
    m.patch_weight = copy_param(patch_weight);
    m.patch_bias = copy_param(patch_bias);
    m.cls_token = copy_param(cls_token);
    m.pos_embed = copy_param(pos_embed);
    for (const auto& b : blocks) {
        BlockWeights n;
        n.norm1_weight = copy_param(b.norm1_weight);
        n.norm1_bias = copy_param(b.norm1_bias);
        n.q_weight = copy_param(b.q_weight);
        n.q_bias = copy_param(b.q_bias);
        n.k_weight = copy_param(b.k_weight);
        n.k_bias = copy_param(b.k_bias);
        n.v_weight = copy_param(b.v_weight);
        n.v_bias = copy_param(b.v_bias);
        n.proj_weight = copy_param(b.proj_weight);
        n.proj_bias = copy_param(b.proj_bias);
        n.norm2_weight = copy_param(b.norm2_weight);
        n.norm2_bias = copy_param(b.norm2_bias);
        n.fc1_weight = copy_param(b.fc1_weight);
        n.fc1_bias = copy_param(b.fc1_bias);
        n.fc2_weight = copy_param(b.fc2_weight);
        n.fc2_bias = copy_param(b.fc2_bias);
        n.proj_index = b.proj_index;
        m.blocks.push_back(std::move(n));
    }
    m.norm_weight = copy_param(norm_weight);
    m.norm_bias = copy_param(norm_bias);
    m.head_weight = copy_param(head_weight);
    m.head_bias = copy_param(head_bias);
    m.plan = plan;
    for (const auto& f : merges) m.merges.push_back(f.clone());
    for (const auto& cp : compactors) {
        BlockCompactors n = cp;
        n.q = copy_param(cp.q);
        n.k = copy_param(cp.k);
        n.v = copy_param(cp.v);
        n.proj = copy_param(cp.proj);
        n.fc1 = copy_param(cp.fc1);
        m.compactors.push_back(std::move(n));
    }
    m.retained = retained;
    m.meta = meta;
    return m;
}

void ViTModel::insert_merges(const atme::MergePlan& new_plan) {
    if (!plan.empty()) throw PlacementError("model already carries merge plan " + plan.to_string());
    new_plan.validate(config);
    plan = new_plan;
    merges.clear();
    for (size_t i = 0; i < plan.size(); ++i) merges.push_back(atme::FusionLayer::averaging(config.dim));
}

void ViTModel::insert_compactors() {
    if (has_compactors()) throw ConfigError("model already has compactors");
    if (is_folded()) throw ConfigError("cannot insert compactors into a folded model");
    const int h = config.heads;
    for (const auto& b : blocks) {
        const int64_t d = b.qk_dim(h), dv = b.v_dim(h), c = b.proj_out(), f = b.mlp_hidden();
        auto stacked = [h](int64_t n) {
            Tensor t({h, n, n});
            for (int64_t g = 0; g < h; ++g)
                for (int64_t i = 0; i < n; ++i) t[(g * n + i) * n + i] = 1.0f;
            return t;
        };
        BlockCompactors cp;
        cp.q = param(stacked(d));
        cp.k = param(stacked(d));
        cp.v = param(stacked(dv));
        cp.proj = param(Tensor::identity(c));
        cp.fc1 = param(Tensor::identity(f));
        cp.q_mask = Tensor::ones({h, d});
        cp.k_mask = Tensor::ones({h, d});
        cp.v_mask = Tensor::ones({h, dv});
        cp.proj_mask = Tensor::ones({c});
        cp.fc1_mask = Tensor::ones({f});
        compactors.push_back(std::move(cp));
    }
}

std::vector<std::pair<std::string, Var>> ViTModel::named_parameters() const {
    std::vector<std::pair<std::string, Var>> out;
    auto add = [&out](std::string name, const Var& v) {
        if (v.defined()) out.emplace_back(std::move(name), v);
    };
    add("patch_embed.weight", patch_weight);
    add("patch_embed.bias", patch_bias);
    add("cls_token", cls_token);
    add("pos_embed", pos_embed);
    for (size_t l = 0; l < blocks.size(); ++l) {
        const auto& b = blocks[l];
        const std::string p = "blocks." + std::to_string(l) + ".";
        add(p + "norm1.weight", b.norm1_weight);
        add(p + "norm1.bias", b.norm1_bias);
        add(p + "attn.q.weight", b.q_weight);
        add(p + "attn.q.bias", b.q_bias);
        add(p + "attn.k.weight", b.k_weight);
        add(p + "attn.k.bias", b.k_bias);
        add(p + "attn.v.weight", b.v_weight);
        add(p + "attn.v.bias", b.v_bias);
        add(p + "attn.proj.weight", b.proj_weight);
        add(p + "attn.proj.bias", b.proj_bias);
        add(p + "norm2.weight", b.norm2_weight);
        add(p + "norm2.bias", b.norm2_bias);
        add(p + "mlp.fc1.weight", b.fc1_weight);
        add(p + "mlp.fc1.bias", b.fc1_bias);
        add(p + "mlp.fc2.weight", b.fc2_weight);
        add(p + "mlp.fc2.bias", b.fc2_bias);
    }
    for (size_t i = 0; i < merges.size(); ++i) {
        const std::string p = "merges." + std::to_string(i) + ".";
        add(p + "norm.weight", merges[i].norm_weight);
        add(p + "norm.bias", merges[i].norm_bias);
        add(p + "fc.weight", merges[i].weight);
        add(p + "fc.bias", merges[i].bias);
    }
    add("norm.weight", norm_weight);
    add("norm.bias", norm_bias);
    add("head.weight", head_weight);
    add("head.bias", head_bias);
    for (size_t l = 0; l < compactors.size(); ++l) {
        const std::string p = "compactors." + std::to_string(l) + ".";
        for (auto kind : {ChannelKind::q, ChannelKind::k, ChannelKind::v, ChannelKind::proj, ChannelKind::fc1}) {
            add(p + kind_name(kind), compactors[l].matrix(kind));
        }
    }
    return out;
}

std::vector<Var> ViTModel::parameters() const {
    std::vector<Var> out;
    for (auto& [name, v] : named_parameters()) out.push_back(v);
    return out;
}

int64_t ViTModel::parameter_count() const {
    int64_t n = 0;
    for (const auto& [name, v] : named_parameters()) {
        if (name.rfind("compactors.", 0) == 0) continue;
        n += v.value().numel();
    }
    return n;
}

Tensor ViTModel::patchify(const Tensor& images) const {
    const int64_t img = config.img, p = config.patch, g = config.grid();
    if (images.rank() != 4 || images.dim(1) != 3 || images.dim(2) != img || images.dim(3) != img) {
        throw ConfigError("expected images [B,3," + std::to_string(img) + "," + std::to_string(img) + "], got " +
                          nn::shape_str(images.shape()));
    }
    const int64_t batch = images.dim(0), feat = 3 * p * p;
    Tensor out({batch * g * g, feat});
    const float* src = images.ptr();
    float* dst = out.ptr();
    for (int64_t b = 0; b < batch; ++b)
        for (int64_t gy = 0; gy < g; ++gy)
            for (int64_t gx = 0; gx < g; ++gx) {
                float* row = dst + ((b * g + gy) * g + gx) * feat;
                for (int64_t ch = 0; ch < 3; ++ch)
                    for (int64_t py = 0; py < p; ++py)
                        for (int64_t px = 0; px < p; ++px)
                            *row++ = src[((b * 3 + ch) * img + gy * p + py) * img + gx * p + px];
            }
    return out;
}

Var ViTModel::embed(const Tensor& images) const {
    const int64_t batch = images.rank() == 4 ? images.dim(0) : 0;
    Var x = nn::linear(Var::constant(patchify(images)), patch_weight, patch_bias);
    if (config.use_cls) x = nn::prepend_token(x, cls_token, batch);
    return nn::add_tiled(x, pos_embed);
}

Var ViTModel::forward(const Tensor& images, const ForwardOptions& options) const {
    Var x = embed(images);
    const int64_t batch = images.dim(0);
    const int64_t cls = config.use_cls ? 1 : 0;
    atme::Grid grid{config.grid(), config.grid()};
    for (int l = 0; l < config.depth; ++l) {
        const int m = plan.merge_before(l);
        if (m >= 0) {
            auto merged = atme::merge_tokens(x, batch, grid, plan.entries()[static_cast<size_t>(m)].direction,
                                             config.use_cls, merges[static_cast<size_t>(m)]);
            x = merged.tokens;
            grid = merged.grid;
        }
        const BlockCompactors* cp = has_compactors() ? &compactors[static_cast<size_t>(l)] : nullptr;
        x = block_forward(x, batch, grid.count() + cls, config.heads, blocks[static_cast<size_t>(l)], cp, options);
    }
    const int64_t tokens = grid.count() + cls;
    Var pooled;
    if (config.use_cls) {
        std::vector<int64_t> rows;
        for (int64_t b = 0; b < batch; ++b) rows.push_back(b * tokens);
        pooled = nn::gather_rows(x, std::move(rows));
    } else {
        pooled = nn::mean_pool(x, batch);
    }
    if (config.final_norm) pooled = nn::layer_norm(pooled, norm_weight, norm_bias, kLayerNormEps);
    return nn::linear(pooled, head_weight, head_bias);
}

}  // namespace vitc
