#pragma once

#include <string>
#include <vector>

#include "vitc/cdcp/channels.hpp"

namespace vitc::cdcp {

struct GroupStats {
    int block = 0;
    ChannelKind kind = ChannelKind::q;
    int head = -1;
    int64_t total = 0;
    int64_t pruned = 0;
    int64_t retained = 0;
    double min_retained_norm = 0.0;
    double max_retained_norm = 0.0;
    double max_pruned_norm = 0.0;  // 0 when nothing is pruned
};

struct Audit {
    std::string name;
    bool passed = false;
    std::string detail;
};

struct PruneReport {
    std::vector<GroupStats> groups;
    double r_current = 0.0;
    double r_target = 0.0;
    double max_pruned_norm = 0.0;  // largest column norm in P before zeroing
    int64_t pruned_channels = 0;
    std::vector<Audit> audits;

    bool all_passed() const;
    std::string table() const;
    std::string to_json() const;
};

// Sets every mask bit to 0 for channels in P and to 1 elsewhere.
void apply_masks(ViTModel& model, const std::set<ChannelRef>& pruned);
// Channels whose mask bit is 0.
std::set<ChannelRef> masked_channels(const ViTModel& model);
// Writes zeros into the compactor columns listed in P.
void hard_zero(ViTModel& model, const std::set<ChannelRef>& pruned);

// Per-group statistics and the invariant audits for P on a compacted model.
// `norm_tolerance` bounds the pre-zeroing norm of pruned columns.
PruneReport prune_report(const ViTModel& compacted, const PruneState& state, double norm_tolerance);

struct PruneResult {
    ViTModel model;
    PruneReport report;
};

// Hard-zeroes P, folds every compactor into its weight and removes the dead
// dimensions: per-head q/k and v widths, the matching proj input rows, fc1
// outputs with the matching fc2 rows, and proj outputs (written back into the
// residual stream through an index scatter). Query weights are rescaled by
// sqrt(D_q' / D_q) so attention logits keep their scale under the narrower
// 1/sqrt(D_q') softmax temperature. Throws ConsistencyError when P breaks
// head uniformity or q/k alignment.
PruneResult prune_model(const ViTModel& compacted, const PruneState& state, double norm_tolerance = 1e-2);

}  // namespace vitc::cdcp
