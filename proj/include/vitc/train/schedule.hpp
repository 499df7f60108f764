#pragma once

#include <cstdint>
#include <string>

namespace vitc::train {

enum class OptimizerKind { adamw, sgd };

// Optimisation and pruning schedule shared by pretraining and fine-tuning.
struct Schedule {
    int epochs = 30;
    int batch_size = 64;
    double base_lr = 1e-3;
    double min_lr = 1e-6;
    int lr_warmup_epochs = 2;  // linear LR warmup before cosine decay
    double weight_decay = 0.05;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double compactor_beta1 = 0.99;
    double eps = 1e-8;
    double compactor_lr_scale = 1.0;
    OptimizerKind optimizer = OptimizerKind::adamw;
    bool flip = false;
    uint64_t seed = 0;

    // Pruning: after `warmup_epochs`, every `interval_iters` iterations
    // r_target grows by `ratio_step` (a fraction, capped at final_ratio) and
    // P is rebuilt.
    int warmup_epochs = 3;
    int interval_iters = 25;
    double ratio_step = 0.00025;
    double lambda = 1e-5;
    double final_ratio = 0.0;
    // Final epochs during which P and the masks stay fixed so masked columns
    // can finish shrinking (0 rebuilds P until the end).
    int settle_epochs = 0;
    // Zero the optimizer moments of a compactor column whenever its mask bit
    // changes.
    bool reset_moments_on_mask = false;

    // Weight of the hard-label distillation term (0 disables it).
    double distill_alpha = 0.0;

    // Throws ConfigError.
    void validate() const;

    // r_target after `intervals` completed post-warmup intervals.
    double ramp(int64_t intervals) const;
    // Linear warmup to base_lr, then cosine decay to min_lr.
    double lr_at(int64_t iter, int64_t iters_per_epoch) const;

    // Fine-tuning values used for ImageNet-scale runs (300 epochs).
    static Schedule paper(double final_ratio);
    // Desk-scale pretraining of a ViT from scratch.
    static Schedule desk_pretrain();
    // Desk-scale fine-tuning: the pruning warmup is 10% of the epochs and the
    // ramp reaches final_ratio at `ramp_end` of training.
    static Schedule desk_finetune(double final_ratio, int epochs, int64_t iters_per_epoch, double ramp_end = 0.5);
};

const char* optimizer_name(OptimizerKind kind);
OptimizerKind optimizer_from_name(const std::string& name);

}  // namespace vitc::train
