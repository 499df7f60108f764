#include "vitc/flops/audit.hpp"

#include <iomanip>
#include <json.hpp>
#include <sstream>

#include "vitc/errors.hpp"
#include "vitc/model/vit.hpp"

namespace vitc::flops {

BlockDims BlockDims::full(const ViTConfig& config) {
    const int64_t c = config.dim;
    return {c, c, c, c, config.mlp_hidden()};
}

ChannelState full_state(const ViTConfig& config) {
    return ChannelState(static_cast<size_t>(config.depth), BlockDims::full(config));
}

ChannelState state_of(const ViTModel& model) {
    ChannelState s;
    for (const auto& b : model.blocks) {
        s.push_back({b.q_weight.value().dim(1), b.k_weight.value().dim(1), b.v_weight.value().dim(1), b.proj_out(),
                     b.mlp_hidden()});
    }
    return s;
}

int64_t FlopsReport::component(const std::string& name) const {
    for (const auto& c : components)
        if (c.name == name) return c.macs;
    return 0;
}

std::string FlopsReport::table() const {
    std::ostringstream os;
    os << std::left << std::setw(16) << "component" << std::right << std::setw(16) << "MACs" << std::setw(10)
       << "share" << '\n';
    for (const auto& c : components) {
        os << std::left << std::setw(16) << c.name << std::right << std::setw(16) << c.macs << std::setw(9)
           << std::fixed << std::setprecision(2) << (total ? 100.0 * c.macs / total : 0.0) << "%\n";
    }
    os << std::left << std::setw(16) << "total" << std::right << std::setw(16) << total << "  ("
       << std::setprecision(4) << total / 1e9 << " G)\n";
    os << std::left << std::setw(16) << "baseline" << std::right << std::setw(16) << baseline << "  ("
       << std::setprecision(4) << baseline / 1e9 << " G)\n";
    os << std::left << std::setw(16) << "reduction" << std::right << std::setw(15) << std::setprecision(2)
       << 100.0 * ratio << "%\n";
    return os.str();
}

std::string FlopsReport::to_json() const {
    nlohmann::ordered_json j;
    nlohmann::ordered_json comps = nlohmann::ordered_json::object();
    for (const auto& c : components) comps[c.name] = c.macs;
    j["components"] = comps;
    j["total_macs"] = total;
    j["baseline_macs"] = baseline;
    j["reduction_ratio"] = ratio;
    return j.dump(2);
}

namespace {

const BlockDims& dims_at(const ViTConfig& config, const ChannelState* state, size_t l, const BlockDims& full) {
    if (!state) return full;
    if (state->size() != static_cast<size_t>(config.depth)) {
        throw DimensionError("channel state lists " + std::to_string(state->size()) + " blocks, config has " +
                             std::to_string(config.depth));
    }
    return (*state)[l];
}

std::vector<Component> components(const ViTConfig& config, const atme::MergePlan& plan, const ChannelState* state) {
    config.validate();
    plan.validate(config);
    const int64_t c = config.dim;
    const int64_t cls = config.use_cls ? 1 : 0;
    const BlockDims full = BlockDims::full(config);
    const auto grids = plan.block_grids(config);

    std::vector<Component> out;
    out.push_back({"patch_embed", int64_t{config.spatial_tokens()} * config.patch_features() * c});
    for (int l = 0; l < config.depth; ++l) {
        const int m = plan.merge_before(l);
        const int64_t spatial = grids[static_cast<size_t>(l)].count();
        if (m >= 0) out.push_back({"merge" + std::to_string(m), spatial * 2 * c * c});
        const int64_t n = spatial + cls;
        const BlockDims& d = dims_at(config, state, static_cast<size_t>(l), full);
        const std::string p = "block" + std::to_string(l) + ".";
        out.push_back({p + "qkv", n * c * (d.q_total + d.k_total + d.v_total)});
        out.push_back({p + "attn", n * n * d.q_total + n * n * d.v_total});
        out.push_back({p + "proj", n * d.v_total * d.proj_out});
        out.push_back({p + "ffn", 2 * n * c * d.mlp_hidden});
    }
    out.push_back({"head", c * config.classes});
    return out;
}

int64_t sum(const std::vector<Component>& comps) {
    int64_t t = 0;
    for (const auto& c : comps) t += c.macs;
    return t;
}

}  // namespace

int64_t total_macs(const ViTConfig& config, const atme::MergePlan& plan, const ChannelState* state) {
    return sum(components(config, plan, state));
}

double reduction_ratio(const ViTConfig& config, const atme::MergePlan& plan, const ChannelState* state) {
    const int64_t base = total_macs(config, {}, nullptr);
    return 1.0 - static_cast<double>(total_macs(config, plan, state)) / static_cast<double>(base);
}

FlopsReport model_flops(const ViTConfig& config, const atme::MergePlan& plan, const ChannelState* state) {
    FlopsReport r;
    r.components = components(config, plan, state);
    r.total = sum(r.components);
    r.baseline = total_macs(config, {}, nullptr);
    r.ratio = 1.0 - static_cast<double>(r.total) / static_cast<double>(r.baseline);
    return r;
}

FlopsReport model_flops(const ViTModel& model) {
    const ChannelState s = state_of(model);
    return model_flops(model.config, model.plan, &s);
}

int64_t model_params(const ViTConfig& config, const atme::MergePlan& plan, const ChannelState* state) {
    config.validate();
    plan.validate(config);
    const int64_t c = config.dim;
    const BlockDims full = BlockDims::full(config);
    int64_t n = int64_t{config.patch_features()} * c + c;
    if (config.use_cls) n += c;
    n += int64_t{config.tokens()} * c;
    for (int l = 0; l < config.depth; ++l) {
        const BlockDims& d = dims_at(config, state, static_cast<size_t>(l), full);
        n += 4 * c;  // two norms
        n += (c + 1) * (d.q_total + d.k_total + d.v_total);
        n += d.v_total * d.proj_out + d.proj_out;
        n += c * d.mlp_hidden + d.mlp_hidden;
        n += d.mlp_hidden * c + c;
    }
    n += static_cast<int64_t>(plan.size()) * (2 * c * 2 + 2 * c * c + c);
    if (config.final_norm) n += 2 * c;
    n += c * config.classes + config.classes;
    return n;
}

}  // namespace vitc::flops
