#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "vitc/data/dataset.hpp"
#include "vitc/model/config.hpp"
#include "vitc/train/schedule.hpp"

namespace vitc::run {

// Pipeline configuration read from JSON. Every section is optional; unknown
// keys anywhere are rejected. Key reference (defaults in brackets):
//
//   seed                  [1]      single source of all randomness
//   output                ["runs/desk"]  artifact directory; relative paths
//                                  resolve under $VITC_OUTPUT_ROOT when set
//   model.arch            ["desk"] deit-tiny | deit-small | deit-base | desk
//   model.<field>                  depth dim heads head_dim patch img classes
//                                  mlp_ratio override the preset
//   data.manifest         [""]     dataset manifest; empty = synthesize
//   data.n                [4000]   synthetic sample count
//   data.noise            [0.25]   synthetic pixel noise
//   plan.merges           ["uniform"]  uniform | auto | explicit "0h,2v"
//   plan.count            [2]      merges for uniform/auto
//   plan.target           [0.5]    merge-only reduction target for auto
//   pretrain.checkpoint   [""]     start from this checkpoint, skip training
//   pretrain.<schedule key>        overrides of the desk pretrain schedule
//   finetune.final_ratio  [0.15]   channel-pruning FLOPs target
//   finetune.epochs       [12]
//   finetune.ramp_end     [0.5]    fraction of training where the ramp ends
//   finetune.<schedule key>        overrides of the derived desk schedule
//   prune.norm_tolerance  [0.01]   audit bound on pruned column norms
//
// Schedule keys: batch_size base_lr min_lr lr_warmup_epochs weight_decay beta1
// beta2 compactor_beta1 eps compactor_lr_scale optimizer flip warmup_epochs
// interval_iters ratio_step lambda settle_epochs reset_moments_on_mask
// distill_alpha (epochs for pretrain).
struct RunConfig {
    uint64_t seed = 1;
    std::string output = "runs/desk";
    std::string arch = "desk";
    ViTConfig model = ViTConfig::desk();

    std::string manifest;
    int64_t synth_n = 4000;
    double synth_noise = 0.25;

    std::string merges = "uniform";
    int merge_count = 2;
    double merge_target = 0.5;

    std::string pretrained;
    train::Schedule pretrain = train::Schedule::desk_pretrain();

    double final_ratio = 0.15;
    int finetune_epochs = 12;
    double ramp_end = 0.5;
    std::string finetune_overrides = "{}";  // JSON object, applied after derivation

    double norm_tolerance = 1e-2;

    // Throws ConfigError on unknown keys, wrong types or invalid values.
    static RunConfig from_json(const std::string& text);
    static RunConfig load(const std::filesystem::path& path);

    // Fully resolved config as pretty JSON. `with_output` false drops the
    // output path (the hashed form).
    std::string to_json(bool with_output = true) const;
    // 16 hex digits over to_json(false).
    std::string hash() const;

    // Artifact directory after applying VITC_OUTPUT_ROOT.
    std::filesystem::path output_dir() const;

    // Desk finetune schedule for `train_count` training samples, with the
    // finetune overrides applied.
    train::Schedule finetune_schedule(int64_t train_count) const;

    data::SynthOptions synth_options() const;
};

}  // namespace vitc::run
