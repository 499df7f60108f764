#pragma once

#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>

#include "vitc/atme/planner.hpp"
#include "vitc/cdcp/prune.hpp"
#include "vitc/data/dataset.hpp"
#include "vitc/model/vit.hpp"
#include "vitc/run/run_config.hpp"
#include "vitc/train/trainer.hpp"

namespace vitc::run {

// A pipeline stage failed; `stage` names it ("data", "pretrain", "plan",
// "finetune", "fold", "eval").
class StageError : public std::runtime_error {
public:
    StageError(std::string stage, const std::string& what)
        : std::runtime_error("stage '" + stage + "' failed: " + what), stage_(std::move(stage)) {}
    const std::string& stage() const { return stage_; }

private:
    std::string stage_;
};

// Artifact file names inside the run directory.
namespace artifact {
inline constexpr const char* config = "config.json";
inline constexpr const char* pretrained = "pretrained.ckpt";
inline constexpr const char* pretrain_report = "pretrain_report";  // .jsonl / .txt
inline constexpr const char* plan_report = "plan_report";          // .json / .txt
inline constexpr const char* compacted = "compacted.ckpt";
inline constexpr const char* finetune_report = "finetune_report";  // .jsonl / .txt
inline constexpr const char* folded = "folded.ckpt";
inline constexpr const char* prune_report = "prune_report";        // .json / .txt
inline constexpr const char* eval = "eval";                        // .json / .txt
}  // namespace artifact

struct EvalSummary {
    double baseline_acc = 0.0;   // pretrained model on the test split
    double compacted_acc = 0.0;  // compacted model with P hard-zeroed
    double folded_acc = 0.0;
    int64_t baseline_macs = 0;
    int64_t folded_macs = 0;
    double merge_reduction = 0.0;  // plan alone, full widths
    double joint_reduction = 0.0;  // folded model vs unmerged baseline
    double r_target = 0.0;
    double r_current = 0.0;
    int64_t baseline_params = 0;
    int64_t folded_params = 0;
    bool audits_passed = false;
    std::string folded_hash;

    std::string to_json(const RunConfig& cfg) const;
    std::string table() const;
};

// Run directory plus the resolved config; every stage reads inputs from and
// writes artifacts to `dir`, and logs progress to `log`.
class Pipeline {
public:
    Pipeline(RunConfig cfg, std::ostream& log);

    const RunConfig& config() const { return cfg_; }
    const std::filesystem::path& dir() const { return dir_; }

    // Checks referenced input files and creates the run directory; throws
    // ConfigError. Called by the constructor.
    void prepare();

    data::Dataset load_data() const;
    ViTModel pretrain(const data::Dataset& ds) const;
    atme::PlanResult plan() const;
    train::FinetuneResult finetune(const ViTModel& pretrained, const atme::MergePlan& plan,
                                   const data::Dataset& ds) const;
    cdcp::PruneResult fold(const ViTModel& compacted, const cdcp::PruneState& state) const;
    EvalSummary eval(const ViTModel& pretrained, const ViTModel& compacted, const cdcp::PruneState& state,
                     const ViTModel& folded, const data::Dataset& ds, bool audits_passed) const;

    // All stages in order. Stage failures surface as StageError.
    EvalSummary run_all() const;

    // Reads an artifact of a previous stage (CheckpointError when absent).
    ViTModel load_artifact(const char* name) const;
    // P and ratios recorded in a compacted checkpoint.
    static cdcp::PruneState state_of(const ViTModel& compacted);

    // Writes `name` into the run directory.
    void write(const std::string& name, const std::string& contents) const;

private:
    RunConfig cfg_;
    std::filesystem::path dir_;
    std::string hash_;
    std::ostream& log_;

    void stamp(ViTModel& model, const std::string& stage) const;
    std::string run_record() const;
};

}  // namespace vitc::run
