#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "vitc/cdcp/channels.hpp"
#include "vitc/data/dataset.hpp"
#include "vitc/model/vit.hpp"
#include "vitc/train/optimizer.hpp"
#include "vitc/train/schedule.hpp"

namespace vitc::train {

struct EpochRecord {
    int epoch = 0;
    int64_t iter = 0;  // iterations completed at the end of the epoch
    double lr = 0.0;
    double loss = 0.0;  // mean training loss over the epoch
    double acc = 0.0;   // training top-1 over the epoch
    double val_acc = -1.0;  // -1 when there is no validation split
    double r_target = 0.0;
    double r_current = 0.0;
    int64_t masked_count = 0;
    double max_masked_norm = 0.0;
    bool operator==(const EpochRecord&) const = default;
};

// One P rebuild during fine-tuning.
struct IntervalRecord {
    int64_t iter = 0;
    int64_t interval = 0;  // 1-based count of post-warmup intervals
    double r_target = 0.0;
    double r_current = 0.0;
    int64_t masked_count = 0;
    int64_t restored = 0;  // channels whose mask went back to 1
    bool operator==(const IntervalRecord&) const = default;
};

struct TrainReport {
    std::string phase;  // "pretrain" or "finetune"
    std::vector<EpochRecord> epochs;
    std::vector<IntervalRecord> intervals;

    // One JSON object per line: epoch records, then interval records.
    std::string to_jsonl() const;
    std::string table() const;
    bool operator==(const TrainReport&) const = default;
};

using EpochCallback = std::function<void(const EpochRecord&, const ViTModel&)>;

struct LossStats {
    double loss = 0.0;
    int64_t correct = 0;
};

// Forward, task loss (cross-entropy plus alpha-weighted cross-entropy against
// the teacher's argmax) and its gradient for every entry of
// model.parameters().
LossStats task_gradients(const ViTModel& model, const data::Batch& batch, const ViTModel* teacher, double alpha,
                         std::vector<nn::Tensor>& grads);

// Replaces the compactor entries of `grads` (task gradients in
// model.parameters() order) by m * g + lambda * c / ||c|| column by column.
// When `lasso` is given it receives the lambda term alone, aligned with grads.
void assemble_compactor_grads(const ViTModel& model, std::vector<nn::Tensor>& grads, double lambda,
                              std::vector<nn::Tensor>* lasso = nullptr);

// Parameter groups: compactors use compactor_beta1, compactor_lr_scale and no
// decay; rank-1 tensors skip decay.
Optimizer make_optimizer(const ViTModel& model, const Schedule& schedule);

// Top-1 accuracy over `index` (1.0 for an empty index).
double evaluate(const ViTModel& model, const data::Dataset& ds, const std::vector<int64_t>& index,
                int batch_size = 256, const ForwardOptions& options = {});

// Cross-entropy training from the current weights. Throws TrainingError on a
// non-finite loss, ConfigError when the model carries compactors or does not
// match the dataset.
TrainReport pretrain(ViTModel& model, const data::Dataset& ds, const Schedule& schedule,
                     const EpochCallback& on_epoch = {});

struct FinetuneResult {
    ViTModel model;            // compacted: merges and compactors in place
    cdcp::PruneState state;    // final P
    TrainReport report;
};

// Inserts `plan` (averaging init) and identity compactors into a copy of
// `pretrained`, then trains with Eq. 2 compactor gradients and the ratio ramp.
// A model that already carries `plan` and compactors is trained as is.
FinetuneResult finetune_cait(const ViTModel& pretrained, const atme::MergePlan& plan, const data::Dataset& ds,
                             const Schedule& schedule, const ViTModel* teacher = nullptr,
                             const EpochCallback& on_epoch = {});

}  // namespace vitc::train
