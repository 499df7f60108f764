#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "vitc/errors.hpp"
#include "vitc/flops/audit.hpp"
#include "vitc/model/checkpoint.hpp"
#include "vitc/run/pipeline.hpp"

using namespace vitc;
namespace fs = std::filesystem;

namespace {

constexpr int kOk = 0;
constexpr int kStageFailure = 1;
constexpr int kUsage = 2;

// Usage or input problem detected before any work started.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

void require_file(const std::string& path, const char* what) {
    if (!fs::is_regular_file(path)) throw UsageError(std::string(what) + " '" + path + "' does not exist");
}

// Prints `table` or `json` to stdout and, with a prefix, writes both files.
void emit(const std::string& table, const std::string& json, const std::string& format, const std::string& out) {
    std::cout << (format == "json" ? json : table);
    if (!out.empty()) {
        std::ofstream(out + ".txt") << table;
        std::ofstream(out + ".json") << json;
    }
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

run::Pipeline open_run(const std::string& config_path) {
    require_file(config_path, "config");
    return run::Pipeline(run::RunConfig::load(config_path), std::cerr);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Vision transformer compression: token merging plus consistent channel pruning"};
    app.require_subcommand(1);
    std::string format = "table", out;

    // flops
    auto* flops_cmd = app.add_subcommand("flops", "Analytical MAC audit of an architecture or checkpoint");
    std::string arch, merges, checkpoint;
    flops_cmd->add_option("--arch", arch, "deit-tiny | deit-small | deit-base | desk");
    flops_cmd->add_option("--checkpoint", checkpoint, "Checkpoint to audit instead of --arch");
    flops_cmd->add_option("--merges", merges, "Merge plan, e.g. 3h,7v");
    flops_cmd->add_option("--format", format, "Stdout format")->check(CLI::IsMember({"table", "json"}));
    flops_cmd->add_option("--out", out, "Also write <out>.txt and <out>.json");

    // plan
    auto* plan_cmd = app.add_subcommand("plan", "Place merges for a FLOPs-reduction target");
    double target = 0.5;
    int count = 2;
    plan_cmd->add_option("--arch", arch, "Architecture preset (standalone planning)");
    plan_cmd->add_option("--target", target, "Merge-only reduction target in [0, 1)");
    plan_cmd->add_option("--count", count, "Number of merges");
    plan_cmd->add_option("--format", format, "Stdout format")->check(CLI::IsMember({"table", "json"}));
    plan_cmd->add_option("--out", out, "Also write <out>.txt and <out>.json");

    // synth
    auto* synth_cmd = app.add_subcommand("synth", "Write a synthetic dataset manifest");
    uint64_t seed = 1;
    int64_t n = 4000;
    int img = 32, classes = 10;
    double noise = 0.25;
    synth_cmd->add_option("--seed", seed);
    synth_cmd->add_option("--n", n);
    synth_cmd->add_option("--img", img);
    synth_cmd->add_option("--classes", classes);
    synth_cmd->add_option("--noise", noise);
    synth_cmd->add_option("--out", out, "Manifest path")->required();

    // config
    auto* config_cmd = app.add_subcommand("config", "Print the resolved default (or given) run config");

    // run-directory stages
    std::string config_path;
    auto stage = [&](const char* name, const char* help) {
        auto* cmd = app.add_subcommand(name, help);
        cmd->add_option("--config", config_path, "Run config (JSON)");
        return cmd;
    };
    auto* pretrain_cmd = stage("pretrain", "Train the baseline ViT");
    plan_cmd->add_option("--config", config_path, "Run config: plan into its run directory instead");
    auto* finetune_cmd = stage("finetune", "Insert merges and compactors, then prune-train");
    auto* fold_cmd = stage("fold", "Fold compactors and remove pruned channels");
    std::string fold_out;
    fold_cmd->add_option("--checkpoint", checkpoint, "Compacted checkpoint (instead of --config)");
    fold_cmd->add_option("--out", fold_out, "Folded checkpoint path (with --checkpoint)");
    auto* eval_cmd = stage("eval", "Evaluate baseline, compacted and folded models");
    std::string manifest;
    eval_cmd->add_option("--checkpoint", checkpoint, "Single checkpoint to evaluate (with --data)");
    eval_cmd->add_option("--data", manifest, "Dataset manifest (with --checkpoint)");
    auto* report_cmd = stage("report", "Print every report in the run directory");
    auto* pipeline_cmd = stage("pipeline", "Run data, pretrain, plan, finetune, fold and eval");
    config_cmd->add_option("--config", config_path, "Config to resolve");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kUsage;
    }

    try {
        if (flops_cmd->parsed()) {
            if (arch.empty() == checkpoint.empty()) throw UsageError("flops needs exactly one of --arch or --checkpoint");
            flops::FlopsReport r;
            if (!checkpoint.empty()) {
                require_file(checkpoint, "checkpoint");
                const ViTModel m = load_checkpoint(checkpoint);
                if (!merges.empty()) throw UsageError("--merges applies to --arch only");
                r = flops::model_flops(m);
            } else {
                r = flops::model_flops(ViTConfig::by_name(arch), atme::MergePlan::parse(merges));
            }
            emit(r.table(), r.to_json() + "\n", format, out);
            return kOk;
        }
        if (plan_cmd->parsed() && config_path.empty()) {
            if (arch.empty()) throw UsageError("plan needs --arch or --config");
            const ViTConfig c = ViTConfig::by_name(arch);
            auto red = [&](const atme::MergePlan& p) { return flops::reduction_ratio(c, p); };
            const auto r = atme::plan_merges(c, target, red, count);
            nlohmann::ordered_json j;
            j["arch"] = arch;
            j["target"] = target;
            j["plan"] = r.plan.to_string();
            j["reduction"] = r.achieved;
            j["uniform_plan"] = r.uniform.to_string();
            j["uniform_reduction"] = r.uniform_achieved;
            j["adjustments"] = r.adjustments;
            std::ostringstream t;
            t << "uniform  " << r.uniform.to_string() << "  " << r.uniform_achieved << "\n"
              << "planned  " << r.plan.to_string() << "  " << r.achieved << "  (" << r.adjustments
              << " adjustments)\n";
            emit(t.str(), j.dump(2) + "\n", format, out);
            return kOk;
        }
        if (synth_cmd->parsed()) {
            data::SynthOptions o;
            o.noise = noise;
            data::save_dataset(data::synth_generate(seed, n, img, classes, o), out);
            std::cout << "wrote " << n << " samples to " << out << "\n";
            return kOk;
        }
        if (config_cmd->parsed()) {
            const run::RunConfig c = config_path.empty() ? run::RunConfig::from_json("{}")
                                                         : (require_file(config_path, "config"),
                                                            run::RunConfig::load(config_path));
            std::cout << c.to_json() << "\n";
            std::cerr << "config hash " << c.hash() << "\n";
            return kOk;
        }
        if (fold_cmd->parsed() && !checkpoint.empty()) {
            require_file(checkpoint, "checkpoint");
            if (fold_out.empty()) throw UsageError("fold --checkpoint needs --out");
            const ViTModel compacted = load_checkpoint(checkpoint);
            if (!compacted.has_compactors()) throw UsageError("checkpoint carries no compactors");
            const auto state = run::Pipeline::state_of(compacted);
            auto result = cdcp::prune_model(compacted, state);
            result.model.meta = compacted.meta;
            result.model.meta["stage"] = "fold";
            save_checkpoint(result.model, fold_out);
            std::cout << result.report.table();
            return result.report.all_passed() ? kOk : kStageFailure;
        }
        if (eval_cmd->parsed() && !checkpoint.empty()) {
            require_file(checkpoint, "checkpoint");
            require_file(manifest, "dataset manifest");
            const ViTModel m = load_checkpoint(checkpoint);
            const data::Dataset ds = data::load_dataset(manifest);
            const double acc = train::evaluate(m, ds, ds.indices(data::Split::test));
            std::cout << "top-1 (test) " << acc << "\n";
            return kOk;
        }
        if (config_path.empty()) throw UsageError("--config is required");
        run::Pipeline p = open_run(config_path);

        if (pipeline_cmd->parsed()) {
            const auto e = p.run_all();
            std::cout << e.table();
            std::cerr << "[pipeline] artifacts in " << p.dir().string() << "\n";
            return e.audits_passed ? kOk : kStageFailure;
        }
        if (pretrain_cmd->parsed()) {
            p.pretrain(p.load_data());
            std::cout << slurp(p.dir() / (std::string(run::artifact::pretrain_report) + ".txt"));
            return kOk;
        }
        if (plan_cmd->parsed()) {
            p.plan();
            std::cout << slurp(p.dir() / (std::string(run::artifact::plan_report) + ".txt"));
            return kOk;
        }
        if (finetune_cmd->parsed()) {
            const auto ds = p.load_data();
            const ViTModel pre = p.load_artifact(run::artifact::pretrained);
            const auto result = p.finetune(pre, p.plan().plan, ds);
            std::cout << result.report.table();
            return kOk;
        }
        if (fold_cmd->parsed()) {
            const ViTModel compacted = p.load_artifact(run::artifact::compacted);
            const auto result = p.fold(compacted, run::Pipeline::state_of(compacted));
            std::cout << result.report.table();
            return result.report.all_passed() ? kOk : kStageFailure;
        }
        if (eval_cmd->parsed()) {
            const auto ds = p.load_data();
            const ViTModel pre = p.load_artifact(run::artifact::pretrained);
            const ViTModel compacted = p.load_artifact(run::artifact::compacted);
            const ViTModel folded = p.load_artifact(run::artifact::folded);
            const auto state = run::Pipeline::state_of(compacted);
            const bool audits = cdcp::prune_report(compacted, state, p.config().norm_tolerance).all_passed();
            std::cout << p.eval(pre, compacted, state, folded, ds, audits).table();
            return kOk;
        }
        if (report_cmd->parsed()) {
            bool any = false;
            for (const char* name : {run::artifact::pretrain_report, run::artifact::plan_report,
                                     run::artifact::finetune_report, run::artifact::prune_report,
                                     run::artifact::eval}) {
                const fs::path txt = p.dir() / (std::string(name) + ".txt");
                if (!fs::exists(txt)) continue;
                std::cout << "== " << name << " ==\n" << slurp(txt) << "\n";
                any = true;
            }
            if (!any) throw UsageError("no reports in '" + p.dir().string() + "'");
            return kOk;
        }
    } catch (const run::StageError& e) {
        std::cerr << "vitc: " << e.what() << "\n";
        return kStageFailure;
    } catch (const UsageError& e) {
        std::cerr << "vitc: " << e.what() << "\n";
        return kUsage;
    } catch (const ConfigError& e) {
        std::cerr << "vitc: " << e.what() << "\n";
        return kUsage;
    } catch (const PlacementError& e) {
        std::cerr << "vitc: " << e.what() << "\n";
        return kUsage;
    } catch (const CheckpointError& e) {
        std::cerr << "vitc: " << e.what() << "\n";
        return kUsage;
    } catch (const IngestionError& e) {
        std::cerr << "vitc: " << e.what() << "\n";
        return kUsage;
    } catch (const std::exception& e) {
        std::cerr << "vitc: " << e.what() << "\n";
        return kStageFailure;
    }
    return kUsage;
}
