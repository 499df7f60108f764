#include "vitc/train/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <random>
#include <sstream>

#include <json.hpp>

#include "vitc/cdcp/prune.hpp"
#include "vitc/errors.hpp"
#include "vitc/numerics/ops.hpp"
#include "vitc/util/hash.hpp"

namespace vitc::train {

using nn::Tensor;
using nn::Var;

namespace {

constexpr ChannelKind kKinds[] = {ChannelKind::q, ChannelKind::k, ChannelKind::v, ChannelKind::proj,
                                  ChannelKind::fc1};

// Index of the first compactor in model.parameters(); compactors come last,
// five per block in kind order.
size_t compactor_offset(const ViTModel& model) {
    const auto named = model.named_parameters();
    for (size_t i = 0; i < named.size(); ++i)
        if (named[i].first.rfind("compactors.", 0) == 0) return i;
    return named.size();
}

std::vector<int32_t> argmax_rows(const Tensor& logits) {
    const int64_t b = logits.dim(0), k = logits.dim(1);
    std::vector<int32_t> out(size_t(b), 0);
    for (int64_t i = 0; i < b; ++i) {
        const float* row = logits.ptr() + i * k;
        out[size_t(i)] = int32_t(std::max_element(row, row + k) - row);
    }
    return out;
}

int64_t count_correct(const Tensor& logits, const std::vector<int32_t>& labels) {
    const auto pred = argmax_rows(logits);
    int64_t n = 0;
    for (size_t i = 0; i < pred.size(); ++i) n += pred[i] == labels[i];
    return n;
}

void check_data(const ViTModel& model, const data::Dataset& ds) {
    if (model.config.img != ds.img)
        throw ConfigError("model expects " + std::to_string(model.config.img) + "px images, dataset has " + std::to_string(ds.img));
    if (model.config.classes < ds.classes)
        throw ConfigError("model has " + std::to_string(model.config.classes) + " classes, dataset has " + std::to_string(ds.classes));
}

std::mt19937_64 batch_rng(uint64_t seed, int epoch) {
    return std::mt19937_64(fnv1a64(&epoch, sizeof(epoch), seed ^ 0x5bd1e995ULL));
}

double max_masked_norm(const ViTModel& model) {
    double out = 0.0;
    for (const auto& cp : model.compactors)
        for (auto kind : kKinds) {
            const Tensor norms = cdcp::column_norms(cp.matrix(kind).value());
            const Tensor& mask = cp.mask(kind);
            for (int64_t j = 0; j < mask.numel(); ++j)
                if (mask[j] == 0.0f) out = std::max(out, double(norms[j]));
        }
    return out;
}

[[noreturn]] void diverged(const char* phase, int epoch, int64_t iter, double loss, double lr, double r_target) {
    std::ostringstream os;
    os << phase << ": non-finite loss " << loss << " at epoch " << epoch << ", iteration " << iter << " (lr " << lr
       << ", r_target " << r_target << ")";
    throw TrainingError(os.str());
}

}  // namespace

std::string TrainReport::to_jsonl() const {
    std::string out;
    for (const auto& e : epochs) {
        nlohmann::ordered_json j;
        j["phase"] = phase;
        j["record"] = "epoch";
        j["epoch"] = e.epoch;
        j["iter"] = e.iter;
        j["lr"] = e.lr;
        j["loss"] = e.loss;
        j["acc"] = e.acc;
        j["val_acc"] = e.val_acc;
        j["r_target"] = e.r_target;
        j["r_current"] = e.r_current;
        j["masked_count"] = e.masked_count;
        j["max_masked_norm"] = e.max_masked_norm;
        out += j.dump() + "\n";
    }
    for (const auto& r : intervals) {
        nlohmann::ordered_json j;
        j["phase"] = phase;
        j["record"] = "interval";
        j["iter"] = r.iter;
        j["interval"] = r.interval;
        j["r_target"] = r.r_target;
        j["r_current"] = r.r_current;
        j["masked_count"] = r.masked_count;
        j["restored"] = r.restored;
        out += j.dump() + "\n";
    }
    return out;
}

std::string TrainReport::table() const {
    std::ostringstream os;
    os << phase << "\n";
    os << std::left << std::setw(6) << "epoch" << std::right << std::setw(8) << "iter" << std::setw(11) << "lr"
       << std::setw(9) << "loss" << std::setw(8) << "acc" << std::setw(8) << "val" << std::setw(10) << "r_target"
       << std::setw(10) << "r_curr" << std::setw(8) << "masked" << std::setw(11) << "max|c|" << "\n";
    for (const auto& e : epochs) {
        os << std::left << std::setw(6) << e.epoch << std::right << std::setw(8) << e.iter << std::setw(11)
           << std::scientific << std::setprecision(2) << e.lr << std::fixed << std::setprecision(4) << std::setw(9)
           << e.loss << std::setprecision(3) << std::setw(8) << e.acc << std::setw(8) << e.val_acc << std::setw(10)
           << e.r_target << std::setw(10) << e.r_current << std::setw(8) << e.masked_count << std::scientific
           << std::setprecision(2) << std::setw(11) << e.max_masked_norm << std::defaultfloat << "\n";
    }
    return os.str();
}

LossStats task_gradients(const ViTModel& model, const data::Batch& batch, const ViTModel* teacher, double alpha,
                         std::vector<Tensor>& grads) {
    const auto params = model.parameters();
    const Var logits = model.forward(batch.images);
    Var loss = nn::cross_entropy(logits, batch.labels);
    if (teacher && alpha > 0.0) {
        std::vector<int32_t> hard;
        {
            nn::NoGradGuard guard;
            hard = argmax_rows(teacher->forward(batch.images).value());
        }
        loss = nn::add(loss, nn::scale(nn::cross_entropy(logits, hard), float(alpha)));
    }
    grads = nn::grad_of(loss, params);
    return {double(loss.value().item()), count_correct(logits.value(), batch.labels)};
}

void assemble_compactor_grads(const ViTModel& model, std::vector<Tensor>& grads, double lambda,
                              std::vector<Tensor>* lasso) {
    const size_t base = compactor_offset(model);
    if (grads.size() != base + 5 * model.compactors.size())
        throw DimensionError("assemble_compactor_grads: gradient list does not match model parameters");
    if (lasso) {
        lasso->assign(grads.size(), Tensor());
        for (size_t i = 0; i < grads.size(); ++i) (*lasso)[i] = Tensor(grads[i].shape());
    }
    for (size_t l = 0; l < model.compactors.size(); ++l) {
        const auto& cp = model.compactors[l];
        for (size_t k = 0; k < 5; ++k) {
            const size_t i = base + 5 * l + k;
            const Tensor& m = cp.matrix(kKinds[k]).value();
            const Tensor& mask = cp.mask(kKinds[k]);
            if (lasso) (*lasso)[i] = cdcp::compactor_grad(m, Tensor(mask.shape(), 0.0f), Tensor(m.shape(), 0.0f), lambda);
            grads[i] = cdcp::compactor_grad(m, mask, grads[i], lambda);
        }
    }
}

Optimizer make_optimizer(const ViTModel& model, const Schedule& s) {
    std::vector<Var> params;
    std::vector<ParamGroup> groups;
    for (const auto& [name, v] : model.named_parameters()) {
        ParamGroup g;
        if (name.rfind("compactors.", 0) == 0) {
            g.beta1 = s.compactor_beta1;
            g.lr_scale = s.compactor_lr_scale;
            g.weight_decay = 0.0;
        } else {
            g.beta1 = s.beta1;
            g.weight_decay = v.value().rank() <= 1 ? 0.0 : s.weight_decay;
        }
        params.push_back(v);
        groups.push_back(g);
    }
    return Optimizer(s.optimizer, std::move(params), std::move(groups), s.beta2, s.eps);
}

double evaluate(const ViTModel& model, const data::Dataset& ds, const std::vector<int64_t>& index, int batch_size,
                const ForwardOptions& options) {
    if (index.empty()) return 1.0;
    nn::NoGradGuard guard;
    int64_t correct = 0;
    for (const auto& b : data::epoch_batches(index, batch_size, false, 0, 0)) {
        const auto batch = data::make_batch(ds, b);
        correct += count_correct(model.forward(batch.images, options).value(), batch.labels);
    }
    return double(correct) / double(index.size());
}

TrainReport pretrain(ViTModel& model, const data::Dataset& ds, const Schedule& s, const EpochCallback& on_epoch) {
    s.validate();
    if (model.has_compactors()) throw ConfigError("pretrain: model already carries compactors");
    check_data(model, ds);
    const auto train_idx = ds.indices(data::Split::train);
    const auto val_idx = ds.indices(data::Split::val);
    const int64_t ipe = int64_t(data::epoch_batches(train_idx, s.batch_size, false, 0, 0).size());

    TrainReport report;
    report.phase = "pretrain";
    Optimizer opt = make_optimizer(model, s);
    int64_t iter = 0;
    std::vector<Tensor> grads;
    for (int epoch = 0; epoch < s.epochs; ++epoch) {
        auto rng = batch_rng(s.seed, epoch);
        double loss_sum = 0.0;
        int64_t correct = 0, seen = 0;
        double lr = 0.0;
        for (const auto& idx : data::epoch_batches(train_idx, s.batch_size, true, s.seed, epoch)) {
            const bool flip = s.flip && (rng() & 1);
            const auto batch = data::make_batch(ds, idx, true, flip);
            const LossStats st = task_gradients(model, batch, nullptr, 0.0, grads);
            lr = s.lr_at(iter, ipe);
            if (!std::isfinite(st.loss)) diverged("pretrain", epoch, iter, st.loss, lr, 0.0);
            opt.step(grads, lr);
            ++iter;
            loss_sum += st.loss * double(idx.size());
            correct += st.correct;
            seen += int64_t(idx.size());
        }
        EpochRecord rec;
        rec.epoch = epoch;
        rec.iter = iter;
        rec.lr = lr;
        rec.loss = seen ? loss_sum / double(seen) : 0.0;
        rec.acc = seen ? double(correct) / double(seen) : 0.0;
        rec.val_acc = val_idx.empty() ? -1.0 : evaluate(model, ds, val_idx);
        report.epochs.push_back(rec);
        if (on_epoch) on_epoch(rec, model);
    }
    return report;
}

FinetuneResult finetune_cait(const ViTModel& pretrained, const atme::MergePlan& plan, const data::Dataset& ds,
                             const Schedule& s, const ViTModel* teacher, const EpochCallback& on_epoch) {
    s.validate();
    check_data(pretrained, ds);
    ViTModel model = pretrained.clone();
    if (model.plan.empty() && !plan.empty()) {
        model.insert_merges(plan);
    } else if (model.plan != plan) {
        throw ConfigError("finetune: model carries merge plan '" + model.plan.to_string() + "', requested '" +
                          plan.to_string() + "'");
    }
    if (!model.has_compactors()) model.insert_compactors();
    if (model.is_folded()) throw ConfigError("finetune: model is already folded");

    const auto train_idx = ds.indices(data::Split::train);
    const auto val_idx = ds.indices(data::Split::val);
    const int64_t ipe = int64_t(data::epoch_batches(train_idx, s.batch_size, false, 0, 0).size());
    const int64_t warmup_iters = int64_t(s.warmup_epochs) * ipe;
    const int64_t settle_from = int64_t(std::max(0, s.epochs - s.settle_epochs)) * ipe;
    const size_t base = compactor_offset(model);

    FinetuneResult out{ViTModel(), {}, {}};
    out.report.phase = "finetune";
    cdcp::PruneState state;
    cdcp::apply_masks(model, state.pruned);
    Optimizer opt = make_optimizer(model, s);
    int64_t iter = 0, intervals = 0;
    double r_target = 0.0;
    std::vector<Tensor> grads;

    for (int epoch = 0; epoch < s.epochs; ++epoch) {
        auto rng = batch_rng(s.seed, epoch);
        double loss_sum = 0.0, lr = 0.0;
        int64_t correct = 0, seen = 0;
        for (const auto& idx : data::epoch_batches(train_idx, s.batch_size, true, s.seed, epoch)) {
            const bool flip = s.flip && (rng() & 1);
            const auto batch = data::make_batch(ds, idx, true, flip);
            const LossStats st = task_gradients(model, batch, teacher, s.distill_alpha, grads);
            lr = s.lr_at(iter, ipe);
            if (!std::isfinite(st.loss)) diverged("finetune", epoch, iter, st.loss, lr, r_target);
            assemble_compactor_grads(model, grads, s.lambda);
            opt.step(grads, lr);
            ++iter;
            loss_sum += st.loss * double(idx.size());
            correct += st.correct;
            seen += int64_t(idx.size());

            if (iter <= warmup_iters || iter > settle_from || (iter - warmup_iters) % s.interval_iters != 0) continue;
            ++intervals;
            r_target = s.ramp(intervals);
            const std::set<cdcp::ChannelRef> previous = state.pruned;
            state = r_target > 0.0 ? cdcp::select_channels(model, r_target) : cdcp::PruneState{};
            state.r_target = r_target;
            IntervalRecord rec{iter, intervals, r_target, state.r_current, int64_t(state.pruned.size()), 0};
            for (const auto& c : previous) rec.restored += state.pruned.count(c) == 0;
            if (s.reset_moments_on_mask) {
                std::vector<cdcp::ChannelRef> changed;
                std::set_symmetric_difference(previous.begin(), previous.end(), state.pruned.begin(),
                                              state.pruned.end(), std::back_inserter(changed));
                for (const auto& c : changed)
                    opt.reset_column(base + 5 * size_t(c.block) + size_t(c.kind), std::max(c.head, 0), c.col);
            }
            cdcp::apply_masks(model, state.pruned);
            out.report.intervals.push_back(rec);
        }
        EpochRecord rec;
        rec.epoch = epoch;
        rec.iter = iter;
        rec.lr = lr;
        rec.loss = seen ? loss_sum / double(seen) : 0.0;
        rec.acc = seen ? double(correct) / double(seen) : 0.0;
        rec.val_acc = val_idx.empty() ? -1.0 : evaluate(model, ds, val_idx);
        rec.r_target = r_target;
        rec.r_current = state.r_current;
        rec.masked_count = int64_t(state.pruned.size());
        rec.max_masked_norm = max_masked_norm(model);
        out.report.epochs.push_back(rec);
        if (on_epoch) on_epoch(rec, model);
    }
    state.r_target = r_target;
    out.state = std::move(state);
    out.model = std::move(model);
    return out;
}

}  // namespace vitc::train
