#include "vitc/run/run_config.hpp"

#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "vitc/atme/merge_plan.hpp"
#include "vitc/errors.hpp"
#include "vitc/util/hash.hpp"

namespace vitc::run {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

[[noreturn]] void bad(const std::string& msg) { throw ConfigError("config: " + msg); }

const json& object_at(const json& j, const std::string& where) {
    if (!j.is_object()) bad("'" + where + "' must be an object");
    return j;
}

void reject_unknown(const json& j, const std::string& where, const std::set<std::string>& known) {
    for (const auto& [key, _] : j.items())
        if (!known.count(key)) bad("unknown key '" + (where.empty() ? key : where + "." + key) + "'");
}

template <typename T>
void read(const json& j, const char* key, const std::string& where, T& out) {
    auto it = j.find(key);
    if (it == j.end()) return;
    try {
        if constexpr (std::is_same_v<T, bool>) {
            if (!it->is_boolean()) throw std::invalid_argument("boolean");
        } else if constexpr (std::is_same_v<T, std::string>) {
            if (!it->is_string()) throw std::invalid_argument("string");
        } else if constexpr (std::is_integral_v<T>) {
            if (!it->is_number_integer()) throw std::invalid_argument("integer");
        } else {
            if (!it->is_number()) throw std::invalid_argument("number");
        }
        out = it->get<T>();
    } catch (const std::exception& e) {
        bad("'" + where + "." + key + "' must be a " + e.what());
    }
}

const std::set<std::string> kScheduleKeys = {
    "batch_size", "base_lr", "min_lr", "lr_warmup_epochs", "weight_decay", "beta1", "beta2",
    "compactor_beta1", "eps", "compactor_lr_scale", "optimizer", "flip", "warmup_epochs", "interval_iters",
    "ratio_step", "lambda", "settle_epochs", "reset_moments_on_mask", "distill_alpha"};

void apply_schedule(const json& j, const std::string& where, train::Schedule& s) {
    read(j, "batch_size", where, s.batch_size);
    read(j, "base_lr", where, s.base_lr);
    read(j, "min_lr", where, s.min_lr);
    read(j, "lr_warmup_epochs", where, s.lr_warmup_epochs);
    read(j, "weight_decay", where, s.weight_decay);
    read(j, "beta1", where, s.beta1);
    read(j, "beta2", where, s.beta2);
    read(j, "compactor_beta1", where, s.compactor_beta1);
    read(j, "eps", where, s.eps);
    read(j, "compactor_lr_scale", where, s.compactor_lr_scale);
    std::string opt = train::optimizer_name(s.optimizer);
    read(j, "optimizer", where, opt);
    s.optimizer = train::optimizer_from_name(opt);
    read(j, "flip", where, s.flip);
    read(j, "warmup_epochs", where, s.warmup_epochs);
    read(j, "interval_iters", where, s.interval_iters);
    read(j, "ratio_step", where, s.ratio_step);
    read(j, "lambda", where, s.lambda);
    read(j, "settle_epochs", where, s.settle_epochs);
    read(j, "reset_moments_on_mask", where, s.reset_moments_on_mask);
    read(j, "distill_alpha", where, s.distill_alpha);
}

ordered_json schedule_json(const train::Schedule& s, bool pretrain) {
    ordered_json j;
    if (pretrain) j["epochs"] = s.epochs;
    j["batch_size"] = s.batch_size;
    j["base_lr"] = s.base_lr;
    j["min_lr"] = s.min_lr;
    j["lr_warmup_epochs"] = s.lr_warmup_epochs;
    j["weight_decay"] = s.weight_decay;
    j["beta1"] = s.beta1;
    j["beta2"] = s.beta2;
    j["eps"] = s.eps;
    j["optimizer"] = train::optimizer_name(s.optimizer);
    j["flip"] = s.flip;
    if (!pretrain) {
        j["compactor_beta1"] = s.compactor_beta1;
        j["compactor_lr_scale"] = s.compactor_lr_scale;
        j["warmup_epochs"] = s.warmup_epochs;
        j["interval_iters"] = s.interval_iters;
        j["ratio_step"] = s.ratio_step;
        j["lambda"] = s.lambda;
        j["settle_epochs"] = s.settle_epochs;
        j["reset_moments_on_mask"] = s.reset_moments_on_mask;
        j["distill_alpha"] = s.distill_alpha;
    }
    return j;
}

}  // namespace

RunConfig RunConfig::from_json(const std::string& text) {
    json root;
    try {
        root = json::parse(text);
    } catch (const json::parse_error& e) {
        bad(std::string("malformed JSON: ") + e.what());
    }
    object_at(root, "<root>");
    reject_unknown(root, "", {"seed", "output", "model", "data", "plan", "pretrain", "finetune", "prune"});

    RunConfig c;
    read(root, "seed", "<root>", c.seed);
    read(root, "output", "<root>", c.output);

    if (root.contains("model")) {
        const json& m = object_at(root["model"], "model");
        reject_unknown(m, "model", {"arch", "depth", "dim", "heads", "head_dim", "patch", "img", "classes", "mlp_ratio"});
        read(m, "arch", "model", c.arch);
        c.model = ViTConfig::by_name(c.arch);
        read(m, "depth", "model", c.model.depth);
        read(m, "dim", "model", c.model.dim);
        read(m, "heads", "model", c.model.heads);
        read(m, "head_dim", "model", c.model.head_dim);
        read(m, "patch", "model", c.model.patch);
        read(m, "img", "model", c.model.img);
        read(m, "classes", "model", c.model.classes);
        read(m, "mlp_ratio", "model", c.model.mlp_ratio);
    }
    if (root.contains("data")) {
        const json& d = object_at(root["data"], "data");
        reject_unknown(d, "data", {"manifest", "n", "noise"});
        read(d, "manifest", "data", c.manifest);
        read(d, "n", "data", c.synth_n);
        read(d, "noise", "data", c.synth_noise);
    }
    if (root.contains("plan")) {
        const json& p = object_at(root["plan"], "plan");
        reject_unknown(p, "plan", {"merges", "count", "target"});
        read(p, "merges", "plan", c.merges);
        read(p, "count", "plan", c.merge_count);
        read(p, "target", "plan", c.merge_target);
    }
    if (root.contains("pretrain")) {
        const json& p = object_at(root["pretrain"], "pretrain");
        auto known = kScheduleKeys;
        known.insert({"epochs", "checkpoint"});
        reject_unknown(p, "pretrain", known);
        read(p, "checkpoint", "pretrain", c.pretrained);
        read(p, "epochs", "pretrain", c.pretrain.epochs);
        apply_schedule(p, "pretrain", c.pretrain);
    }
    if (root.contains("finetune")) {
        const json& f = object_at(root["finetune"], "finetune");
        auto known = kScheduleKeys;
        known.insert({"final_ratio", "epochs", "ramp_end"});
        reject_unknown(f, "finetune", known);
        read(f, "final_ratio", "finetune", c.final_ratio);
        read(f, "epochs", "finetune", c.finetune_epochs);
        read(f, "ramp_end", "finetune", c.ramp_end);
        json overrides = f;
        for (const char* k : {"final_ratio", "epochs", "ramp_end"}) overrides.erase(k);
        c.finetune_overrides = overrides.dump();
    }
    if (root.contains("prune")) {
        const json& p = object_at(root["prune"], "prune");
        reject_unknown(p, "prune", {"norm_tolerance"});
        read(p, "norm_tolerance", "prune", c.norm_tolerance);
    }

    c.model.validate();
    c.pretrain.seed = c.seed;
    c.pretrain.validate();
    if (c.synth_n < 0) bad("data.n must be >= 0");
    if (c.synth_noise < 0.0) bad("data.noise must be >= 0");
    if (c.merge_count < 0) bad("plan.count must be >= 0");
    if (c.merges != "uniform" && c.merges != "auto") {
        try {
            atme::MergePlan::parse(c.merges);
        } catch (const std::exception& e) {
            bad("plan.merges: " + std::string(e.what()));
        }
    }
    if (c.finetune_epochs < 1) bad("finetune.epochs must be >= 1");
    if (!(c.ramp_end > 0.0 && c.ramp_end <= 1.0)) bad("finetune.ramp_end must lie in (0, 1]");
    if (!(c.norm_tolerance > 0.0)) bad("prune.norm_tolerance must be > 0");
    c.finetune_schedule(1000).validate();
    if (c.output.empty()) bad("output must not be empty");
    return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config '" + path.string() + "'");
    std::stringstream ss;
    ss << is.rdbuf();
    return from_json(ss.str());
}

std::string RunConfig::to_json(bool with_output) const {
    ordered_json j;
    j["seed"] = seed;
    if (with_output) j["output"] = output;
    j["model"] = {{"arch", arch},         {"depth", model.depth},     {"dim", model.dim},
                  {"heads", model.heads}, {"head_dim", model.head_dim}, {"patch", model.patch},
                  {"img", model.img},     {"classes", model.classes}, {"mlp_ratio", model.mlp_ratio}};
    j["data"] = {{"manifest", manifest}, {"n", synth_n}, {"noise", synth_noise}};
    j["plan"] = {{"merges", merges}, {"count", merge_count}, {"target", merge_target}};
    ordered_json pre = schedule_json(pretrain, true);
    pre["checkpoint"] = pretrained;
    j["pretrain"] = pre;
    ordered_json ft;
    ft["final_ratio"] = final_ratio;
    ft["epochs"] = finetune_epochs;
    ft["ramp_end"] = ramp_end;
    const json overrides = json::parse(finetune_overrides);
    for (const auto& [k, v] : overrides.items()) ft[k] = v;
    j["finetune"] = ft;
    j["prune"] = {{"norm_tolerance", norm_tolerance}};
    return j.dump(2);
}

std::string RunConfig::hash() const { return hex64(fnv1a64(to_json(false))); }

std::filesystem::path RunConfig::output_dir() const {
    std::filesystem::path out(output);
    if (out.is_relative())
        if (const char* root = std::getenv("VITC_OUTPUT_ROOT"); root && *root) return std::filesystem::path(root) / out;
    return out;
}

train::Schedule RunConfig::finetune_schedule(int64_t train_count) const {
    const train::Schedule probe = train::Schedule::desk_finetune(final_ratio, finetune_epochs, 1, ramp_end);
    const json overrides = json::parse(finetune_overrides);
    int batch = probe.batch_size;
    read(overrides, "batch_size", "finetune", batch);
    if (batch < 1) bad("finetune.batch_size must be >= 1");
    const int64_t ipe = std::max<int64_t>(1, (train_count + batch - 1) / batch);
    train::Schedule s = train::Schedule::desk_finetune(final_ratio, finetune_epochs, ipe, ramp_end);
    s.batch_size = batch;
    apply_schedule(overrides, "finetune", s);
    s.seed = seed;
    return s;
}

data::SynthOptions RunConfig::synth_options() const {
    data::SynthOptions o;
    o.noise = synth_noise;
    return o;
}

}  // namespace vitc::run
