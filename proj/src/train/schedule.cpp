#include "vitc/train/schedule.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "vitc/errors.hpp"

namespace vitc::train {

void Schedule::validate() const {
    auto need = [](bool ok, const char* what) {
        if (!ok) throw ConfigError(std::string("schedule: ") + what);
    };
    need(epochs >= 0, "epochs must be >= 0");
    need(batch_size >= 1, "batch_size must be >= 1");
    need(base_lr >= 0.0 && min_lr >= 0.0 && min_lr <= base_lr, "need 0 <= min_lr <= base_lr");
    need(lr_warmup_epochs >= 0, "lr_warmup_epochs must be >= 0");
    need(weight_decay >= 0.0, "weight_decay must be >= 0");
    need(beta1 >= 0.0 && beta1 < 1.0 && compactor_beta1 >= 0.0 && compactor_beta1 < 1.0, "betas must lie in [0, 1)");
    need(beta2 >= 0.0 && beta2 < 1.0, "beta2 must lie in [0, 1)");
    need(eps > 0.0, "eps must be > 0");
    need(compactor_lr_scale >= 0.0, "compactor_lr_scale must be >= 0");
    need(warmup_epochs >= 0, "warmup_epochs must be >= 0");
    need(interval_iters >= 1, "interval_iters must be >= 1");
    need(settle_epochs >= 0, "settle_epochs must be >= 0");
    need(ratio_step >= 0.0, "ratio_step must be >= 0");
    need(lambda >= 0.0, "lambda must be >= 0");
    need(final_ratio >= 0.0 && final_ratio < 1.0, "final_ratio must lie in [0, 1)");
    need(distill_alpha >= 0.0, "distill_alpha must be >= 0");
}

double Schedule::ramp(int64_t intervals) const {
    return std::min(final_ratio, double(std::max<int64_t>(intervals, 0)) * ratio_step);
}

double Schedule::lr_at(int64_t iter, int64_t iters_per_epoch) const {
    const int64_t total = int64_t(epochs) * iters_per_epoch;
    const int64_t warm = std::min<int64_t>(int64_t(lr_warmup_epochs) * iters_per_epoch, total);
    if (iter < warm) return base_lr * double(iter + 1) / double(warm);
    if (total <= warm) return base_lr;
    const double progress = std::clamp(double(iter - warm) / double(total - warm), 0.0, 1.0);
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

Schedule Schedule::paper(double final_ratio) {
    Schedule s;
    s.epochs = 300;
    s.batch_size = 256;
    s.base_lr = 1e-4;
    s.min_lr = 1e-6;
    s.lr_warmup_epochs = 5;
    s.weight_decay = 0.05;
    s.beta1 = 0.9;
    s.compactor_beta1 = 0.99;
    s.beta2 = 0.999;
    s.warmup_epochs = 30;
    s.interval_iters = 25;
    s.ratio_step = 0.00025;
    s.lambda = 1e-5;
    s.final_ratio = final_ratio;
    s.distill_alpha = 0.1;
    return s;
}

Schedule Schedule::desk_pretrain() {
    Schedule s;
    s.epochs = 6;
    s.batch_size = 64;
    s.base_lr = 2e-3;
    s.min_lr = 1e-5;
    s.lr_warmup_epochs = 1;
    s.weight_decay = 0.05;
    return s;
}

Schedule Schedule::desk_finetune(double final_ratio, int epochs, int64_t iters_per_epoch, double ramp_end) {
    Schedule s;
    s.epochs = epochs;
    s.batch_size = 16;
    s.base_lr = 5e-4;
    s.min_lr = 1e-6;
    s.lr_warmup_epochs = 0;
    s.weight_decay = 0.05;
    s.warmup_epochs = std::max(1, int(std::lround(0.1 * epochs)));
    s.interval_iters = 25;
    s.settle_epochs = std::max(1, int(std::lround(0.3 * epochs)));
    s.lambda = 1e-4;
    s.compactor_lr_scale = 20.0;
    s.reset_moments_on_mask = true;
    s.final_ratio = final_ratio;
    const double ramp_iters = (ramp_end * epochs - s.warmup_epochs) * double(iters_per_epoch);
    const double intervals = std::max(1.0, std::floor(ramp_iters / s.interval_iters));
    s.ratio_step = final_ratio / intervals;
    return s;
}

const char* optimizer_name(OptimizerKind kind) { return kind == OptimizerKind::adamw ? "adamw" : "sgd"; }

OptimizerKind optimizer_from_name(const std::string& name) {
    if (name == "adamw") return OptimizerKind::adamw;
    if (name == "sgd") return OptimizerKind::sgd;
    throw ConfigError("unknown optimizer '" + name + "' (expected adamw or sgd)");
}

}  // namespace vitc::train
