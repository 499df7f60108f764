#include "vitc/run/pipeline.hpp"

#include <charconv>
#include <chrono>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include <json.hpp>

#include "vitc/errors.hpp"
#include "vitc/flops/audit.hpp"
#include "vitc/model/checkpoint.hpp"

namespace vitc::run {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

std::string exact(double v) {
    char buf[32];
    auto r = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, r.ptr);
}

double parse_exact(const std::string& s) {
    double v = 0.0;
    auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw CheckpointError("bad numeric meta value '" + s + "'");
    return v;
}

// Runs `fn`, converting any library exception into a StageError for `stage`.
template <typename Fn>
auto guarded(const char* stage, Fn&& fn) -> decltype(fn()) {
    try {
        return fn();
    } catch (const StageError&) {
        throw;
    } catch (const std::exception& e) {
        throw StageError(stage, e.what());
    }
}

class Timer {
public:
    // Elapsed time as "12.3 s".
    std::string elapsed() const {
        std::ostringstream os;
        os << std::fixed << std::setprecision(1)
           << std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count() << " s";
        return os.str();
    }

private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

}  // namespace

std::string EvalSummary::to_json(const RunConfig& cfg) const {
    ordered_json j;
    j["config_hash"] = cfg.hash();
    j["seed"] = cfg.seed;
    j["baseline_acc"] = baseline_acc;
    j["compacted_acc"] = compacted_acc;
    j["folded_acc"] = folded_acc;
    j["baseline_macs"] = baseline_macs;
    j["folded_macs"] = folded_macs;
    j["merge_reduction"] = merge_reduction;
    j["joint_reduction"] = joint_reduction;
    j["r_target"] = r_target;
    j["r_current"] = r_current;
    j["baseline_params"] = baseline_params;
    j["folded_params"] = folded_params;
    j["audits_passed"] = audits_passed;
    j["folded_hash"] = folded_hash;
    return j.dump(2) + "\n";
}

std::string EvalSummary::table() const {
    std::ostringstream os;
    os << std::fixed << std::setprecision(4);
    os << "top-1 (test)      baseline " << baseline_acc << "  compacted " << compacted_acc << "  folded "
       << folded_acc << "\n";
    os << "MACs              baseline " << baseline_macs << "  folded " << folded_macs << "\n";
    os << "reduction         merges " << merge_reduction << "  joint " << joint_reduction << "\n";
    os << "channel ratio     r_target " << r_target << "  r_current " << r_current << "\n";
    os << "parameters        baseline " << baseline_params << "  folded " << folded_params << "\n";
    os << "prune audits      " << (audits_passed ? "all passed" : "FAILED") << "\n";
    os << "folded hash       " << folded_hash << "\n";
    return os.str();
}

Pipeline::Pipeline(RunConfig cfg, std::ostream& log)
    : cfg_(std::move(cfg)), dir_(cfg_.output_dir()), hash_(cfg_.hash()), log_(log) {
    prepare();
}

void Pipeline::prepare() {
    if (!cfg_.manifest.empty() && !fs::is_regular_file(cfg_.manifest))
        throw ConfigError("data.manifest '" + cfg_.manifest + "' does not exist");
    if (!cfg_.pretrained.empty() && !fs::is_regular_file(cfg_.pretrained))
        throw ConfigError("pretrain.checkpoint '" + cfg_.pretrained + "' does not exist");
    std::error_code ec;
    fs::create_directories(dir_, ec);
    if (ec || !fs::is_directory(dir_))
        throw ConfigError("cannot create output directory '" + dir_.string() + "': " + ec.message());
    write(artifact::config, cfg_.to_json() + "\n");
}

void Pipeline::write(const std::string& name, const std::string& contents) const {
    const fs::path path = dir_ / name;
    std::ofstream os(path, std::ios::binary);
    os << contents;
    if (!os) throw CheckpointError("cannot write '" + path.string() + "'");
}

std::string Pipeline::run_record() const {
    ordered_json j;
    j["record"] = "run";
    j["config_hash"] = hash_;
    j["seed"] = cfg_.seed;
    return j.dump() + "\n";
}

void Pipeline::stamp(ViTModel& model, const std::string& stage) const {
    model.meta["config_hash"] = hash_;
    model.meta["seed"] = std::to_string(cfg_.seed);
    model.meta["stage"] = stage;
}

ViTModel Pipeline::load_artifact(const char* name) const { return load_checkpoint(dir_ / name); }

cdcp::PruneState Pipeline::state_of(const ViTModel& compacted) {
    cdcp::PruneState s;
    s.pruned = cdcp::masked_channels(compacted);
    const auto ratio = cdcp::channel_ratio_fn(compacted.config, compacted.plan);
    s.r_current = ratio(cdcp::pruned_state(compacted, s.pruned));
    auto it = compacted.meta.find("r_target");
    s.r_target = it == compacted.meta.end() ? 0.0 : parse_exact(it->second);
    return s;
}

data::Dataset Pipeline::load_data() const {
    return guarded("data", [&] {
        const ViTConfig& m = cfg_.model;
        data::Dataset ds = cfg_.manifest.empty()
                               ? data::synth_generate(cfg_.seed, cfg_.synth_n, m.img, m.classes, cfg_.synth_options())
                               : data::load_dataset(cfg_.manifest);
        log_ << "[data] " << ds.size() << " samples, " << ds.classes << " classes, " << ds.img << "px ("
             << (cfg_.manifest.empty() ? "synthetic" : cfg_.manifest) << ")\n";
        return ds;
    });
}

ViTModel Pipeline::pretrain(const data::Dataset& ds) const {
    return guarded("pretrain", [&] {
        Timer t;
        if (!cfg_.pretrained.empty()) {
            ViTModel m = load_checkpoint(cfg_.pretrained);
            if (m.has_compactors() || !m.plan.empty()) throw ConfigError("pretrain.checkpoint must be a plain ViT");
            log_ << "[pretrain] loaded " << cfg_.pretrained << "\n";
            stamp(m, "pretrain");
            save_checkpoint(m, dir_ / artifact::pretrained);
            return m;
        }
        ViTModel m = ViTModel::create(cfg_.model, cfg_.seed);
        const auto report = train::pretrain(m, ds, cfg_.pretrain, [&](const train::EpochRecord& e, const ViTModel&) {
            log_ << "[pretrain] epoch " << e.epoch << " loss " << e.loss << " acc " << e.acc << " val " << e.val_acc
                 << " (" << t.elapsed() << ")\n";
        });
        write(std::string(artifact::pretrain_report) + ".jsonl", run_record() + report.to_jsonl());
        write(std::string(artifact::pretrain_report) + ".txt", report.table());
        stamp(m, "pretrain");
        save_checkpoint(m, dir_ / artifact::pretrained);
        return m;
    });
}

atme::PlanResult Pipeline::plan() const {
    return guarded("plan", [&] {
        const ViTConfig& c = cfg_.model;
        auto reduction = [&](const atme::MergePlan& p) { return flops::reduction_ratio(c, p); };
        atme::PlanResult r;
        if (cfg_.merges == "auto") {
            r = atme::plan_merges(c, cfg_.merge_target, reduction, cfg_.merge_count);
        } else {
            r.uniform = atme::uniform_plan(c, cfg_.merge_count);
            r.uniform_achieved = reduction(r.uniform);
            r.plan = cfg_.merges == "uniform" ? r.uniform : atme::MergePlan::parse(cfg_.merges);
            r.achieved = reduction(r.plan);
        }
        const auto report = flops::model_flops(c, r.plan);
        ordered_json j;
        j["config_hash"] = hash_;
        j["seed"] = cfg_.seed;
        j["mode"] = cfg_.merges == "auto" || cfg_.merges == "uniform" ? cfg_.merges : "explicit";
        j["plan"] = r.plan.to_string();
        j["reduction"] = r.achieved;
        j["uniform_plan"] = r.uniform.to_string();
        j["uniform_reduction"] = r.uniform_achieved;
        j["adjustments"] = r.adjustments;
        j["flops"] = ordered_json::parse(report.to_json());
        write(std::string(artifact::plan_report) + ".json", j.dump(2) + "\n");
        std::ostringstream txt;
        txt << "plan " << r.plan.to_string() << "  reduction " << std::fixed << std::setprecision(4) << r.achieved
            << "  (uniform " << r.uniform.to_string() << " " << r.uniform_achieved << ", " << r.adjustments
            << " adjustments)\n"
            << report.table();
        write(std::string(artifact::plan_report) + ".txt", txt.str());
        log_ << "[plan] " << r.plan.to_string() << " reduces FLOPs by " << r.achieved << "\n";
        return r;
    });
}

train::FinetuneResult Pipeline::finetune(const ViTModel& pretrained, const atme::MergePlan& plan,
                                         const data::Dataset& ds) const {
    return guarded("finetune", [&] {
        Timer t;
        const train::Schedule s = cfg_.finetune_schedule(int64_t(ds.indices(data::Split::train).size()));
        const ViTModel* teacher = s.distill_alpha > 0.0 ? &pretrained : nullptr;
        auto result = train::finetune_cait(pretrained, plan, ds, s, teacher,
                                           [&](const train::EpochRecord& e, const ViTModel&) {
                                               log_ << "[finetune] epoch " << e.epoch << " loss " << e.loss
                                                    << " val " << e.val_acc << " r_target " << e.r_target
                                                    << " masked " << e.masked_count << " max|c| "
                                                    << e.max_masked_norm << " (" << t.elapsed() << ")\n";
                                           });
        write(std::string(artifact::finetune_report) + ".jsonl", run_record() + result.report.to_jsonl());
        write(std::string(artifact::finetune_report) + ".txt", result.report.table());
        stamp(result.model, "finetune");
        result.model.meta["r_target"] = exact(result.state.r_target);
        result.model.meta["r_current"] = exact(result.state.r_current);
        save_checkpoint(result.model, dir_ / artifact::compacted);
        return result;
    });
}

cdcp::PruneResult Pipeline::fold(const ViTModel& compacted, const cdcp::PruneState& state) const {
    return guarded("fold", [&] {
        auto result = cdcp::prune_model(compacted, state, cfg_.norm_tolerance);
        stamp(result.model, "fold");
        save_checkpoint(result.model, dir_ / artifact::folded);
        ordered_json j = ordered_json::parse(result.report.to_json());
        j["config_hash"] = hash_;
        j["seed"] = cfg_.seed;
        write(std::string(artifact::prune_report) + ".json", j.dump(2) + "\n");
        write(std::string(artifact::prune_report) + ".txt", result.report.table());
        log_ << "[fold] " << state.pruned.size() << " channels removed, audits "
             << (result.report.all_passed() ? "passed" : "FAILED") << "\n";
        return result;
    });
}

EvalSummary Pipeline::eval(const ViTModel& pretrained, const ViTModel& compacted, const cdcp::PruneState& state,
                           const ViTModel& folded, const data::Dataset& ds, bool audits_passed) const {
    return guarded("eval", [&] {
        const auto test = ds.indices(data::Split::test);
        EvalSummary e;
        e.baseline_acc = train::evaluate(pretrained, ds, test);
        ViTModel zeroed = compacted.clone();
        cdcp::hard_zero(zeroed, state.pruned);
        e.compacted_acc = train::evaluate(zeroed, ds, test);
        e.folded_acc = train::evaluate(folded, ds, test);
        const auto base = flops::model_flops(pretrained);
        const auto fold = flops::model_flops(folded);
        e.baseline_macs = base.total;
        e.folded_macs = fold.total;
        e.merge_reduction = flops::reduction_ratio(folded.config, folded.plan);
        e.joint_reduction = fold.ratio;
        e.r_target = state.r_target;
        e.r_current = state.r_current;
        e.baseline_params = pretrained.parameter_count();
        e.folded_params = folded.parameter_count();
        e.audits_passed = audits_passed;
        e.folded_hash = checkpoint_hash(folded);
        write(std::string(artifact::eval) + ".json", e.to_json(cfg_));
        write(std::string(artifact::eval) + ".txt", e.table());
        return e;
    });
}

EvalSummary Pipeline::run_all() const {
    const data::Dataset ds = load_data();
    const ViTModel pre = pretrain(ds);
    const atme::PlanResult p = plan();
    const train::FinetuneResult ft = finetune(pre, p.plan, ds);
    const cdcp::PruneResult folded = fold(ft.model, ft.state);
    return eval(pre, ft.model, ft.state, folded.model, ds, folded.report.all_passed());
}

}  // namespace vitc::run
