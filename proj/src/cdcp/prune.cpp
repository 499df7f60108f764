#include "vitc/cdcp/prune.hpp"

#include <cmath>
#include <iomanip>
#include <json.hpp>
#include <sstream>

#include "vitc/errors.hpp"

namespace vitc::cdcp {

using nn::Tensor;
using nn::Var;

namespace {

constexpr ChannelKind kHeadKinds[] = {ChannelKind::q, ChannelKind::k, ChannelKind::v};
constexpr ChannelKind kAllKinds[] = {ChannelKind::q, ChannelKind::k, ChannelKind::v, ChannelKind::proj,
                                     ChannelKind::fc1};

// Heads covered by a compactor kind (1 for proj and fc1).
int groups_of(const ViTModel& m, ChannelKind kind) { return is_head_kind(kind) ? m.config.heads : 1; }

int64_t width_of(const BlockCompactors& cp, ChannelKind kind) { return cp.matrix(kind).shape().back(); }

// Flat offset of row i, column j of the (g)-th d x d slab.
int64_t at(int64_t g, int64_t i, int64_t j, int64_t d) { return (g * d + i) * d + j; }

double column_norm(const Tensor& m, int64_t g, int64_t j) {
    const int64_t d = m.shape().back();
    double s = 0.0;
    for (int64_t i = 0; i < d; ++i) {
        const double v = m[at(g, i, j, d)];
        s += v * v;
    }
    return std::sqrt(s);
}

// Pruned columns of every (block, kind, head) group.
std::map<GroupKey, std::set<int>> pruned_by_group(const std::set<ChannelRef>& pruned) {
    std::map<GroupKey, std::set<int>> out;
    for (const auto& c : pruned) out[group_of(c)].insert(c.col);
    return out;
}

std::vector<int64_t> kept(int64_t width, const std::set<int>& removed) {
    std::vector<int64_t> out;
    for (int64_t j = 0; j < width; ++j)
        if (!removed.count(static_cast<int>(j))) out.push_back(j);
    return out;
}

// g-th d x d slab restricted to the listed columns.
Tensor slab_columns(const Tensor& m, int64_t g, const std::vector<int64_t>& cols) {
    const int64_t d = m.shape().back();
    Tensor out({d, static_cast<int64_t>(cols.size())});
    for (int64_t i = 0; i < d; ++i)
        for (size_t j = 0; j < cols.size(); ++j) out.at(i, static_cast<int64_t>(j)) = m[at(g, i, cols[j], d)];
    return out;
}

Tensor column_range(const Tensor& w, int64_t start, int64_t count) {
    std::vector<int64_t> cols(static_cast<size_t>(count));
    for (int64_t j = 0; j < count; ++j) cols[static_cast<size_t>(j)] = start + j;
    return w.column_subset(cols);
}

Tensor concat_columns(const std::vector<Tensor>& parts) {
    const int64_t rows = parts.front().rank() == 2 ? parts.front().rows() : 1;
    int64_t total = 0;
    for (const auto& p : parts) total += p.shape().back();
    Tensor out = parts.front().rank() == 2 ? Tensor({rows, total}) : Tensor({total});
    int64_t off = 0;
    for (const auto& p : parts) {
        const int64_t w = p.shape().back();
        for (int64_t r = 0; r < rows; ++r)
            for (int64_t j = 0; j < w; ++j) out[r * total + off + j] = p[r * w + j];
        off += w;
    }
    return out;
}

// Folds a per-head projection: W [C, H*D], b [H*D], M [H, D, D].
void fold_heads(const Tensor& w, const Tensor& b, const Tensor& m, const std::vector<std::vector<int64_t>>& keep,
                float scale, Tensor& w_out, Tensor& b_out) {
    const int64_t heads = m.dim(0), d = m.dim(1);
    std::vector<Tensor> ws, bs;
    for (int64_t h = 0; h < heads; ++h) {
        const Tensor mbar = slab_columns(m, h, keep[static_cast<size_t>(h)]);
        Folded f = fold(column_range(w, h * d, d), column_range(b.reshaped({1, b.numel()}), h * d, d).reshaped({d}),
                        mbar);
        if (scale != 1.0f) {
            f.weight.scale_(scale);
            f.bias.scale_(scale);
        }
        ws.push_back(std::move(f.weight));
        bs.push_back(std::move(f.bias));
    }
    w_out = concat_columns(ws);
    b_out = concat_columns(bs);
}

void check_consistency(const ViTModel& m, const std::map<GroupKey, std::set<int>>& by_group) {
    auto get = [&](GroupKey g) {
        auto it = by_group.find(g);
        return it == by_group.end() ? std::set<int>{} : it->second;
    };
    for (int l = 0; l < m.config.depth; ++l) {
        for (auto kind : kHeadKinds) {
            const size_t n0 = get({l, kind, 0}).size();
            for (int h = 1; h < m.config.heads; ++h) {
                if (get({l, kind, h}).size() != n0) {
                    throw ConsistencyError("block " + std::to_string(l) + " " + kind_name(kind) +
                                           ": heads prune different channel counts");
                }
            }
        }
        for (int h = 0; h < m.config.heads; ++h) {
            if (get({l, ChannelKind::q, h}) != get({l, ChannelKind::k, h})) {
                throw ConsistencyError("block " + std::to_string(l) + " head " + std::to_string(h) +
                                       ": query and key prune different columns");
            }
        }
    }
}

}  // namespace

void apply_masks(ViTModel& model, const std::set<ChannelRef>& pruned) {
    for (auto& cp : model.compactors)
        for (auto kind : kAllKinds) cp.mask(kind).fill(1.0f);
    for (const auto& c : pruned) {
        auto& cp = model.compactors.at(static_cast<size_t>(c.block));
        const int64_t d = width_of(cp, c.kind);
        cp.mask(c.kind)[std::max(c.head, 0) * d + c.col] = 0.0f;
    }
}

std::set<ChannelRef> masked_channels(const ViTModel& model) {
    std::set<ChannelRef> out;
    for (size_t l = 0; l < model.compactors.size(); ++l) {
        const auto& cp = model.compactors[l];
        for (auto kind : kAllKinds) {
            const int64_t d = width_of(cp, kind);
            const int groups = groups_of(model, kind);
            for (int g = 0; g < groups; ++g)
                for (int64_t j = 0; j < d; ++j)
                    if (cp.mask(kind)[g * d + j] == 0.0f) {
                        out.insert({static_cast<int>(l), kind, is_head_kind(kind) ? g : -1, static_cast<int>(j)});
                    }
        }
    }
    return out;
}

void hard_zero(ViTModel& model, const std::set<ChannelRef>& pruned) {
    for (const auto& c : pruned) {
        Tensor& m = model.compactors.at(static_cast<size_t>(c.block)).matrix(c.kind).mutable_value();
        const int64_t d = m.shape().back();
        const int64_t g = std::max(c.head, 0);
        for (int64_t i = 0; i < d; ++i) m[at(g, i, c.col, d)] = 0.0f;
    }
}

bool PruneReport::all_passed() const {
    for (const auto& a : audits)
        if (!a.passed) return false;
    return true;
}

std::string PruneReport::table() const {
    std::ostringstream os;
    os << std::left << std::setw(7) << "block" << std::setw(6) << "kind" << std::setw(6) << "head" << std::right
       << std::setw(7) << "total" << std::setw(8) << "pruned" << std::setw(8) << "kept" << std::setw(12) << "min_kept"
       << std::setw(12) << "max_kept" << std::setw(12) << "max_pruned" << '\n';
    os << std::scientific << std::setprecision(3);
    for (const auto& g : groups) {
        os << std::left << std::setw(7) << g.block << std::setw(6) << kind_name(g.kind) << std::setw(6)
           << (g.head >= 0 ? std::to_string(g.head) : "-") << std::right << std::setw(7) << g.total << std::setw(8)
           << g.pruned << std::setw(8) << g.retained << std::setw(12) << g.min_retained_norm << std::setw(12)
           << g.max_retained_norm << std::setw(12) << g.max_pruned_norm << '\n';
    }
    os << std::fixed << std::setprecision(4);
    os << "r_current " << r_current << "  r_target " << r_target << "  pruned channels " << pruned_channels << '\n';
    os << std::scientific << std::setprecision(3) << "max pruned norm before zeroing " << max_pruned_norm << '\n';
    for (const auto& a : audits) os << (a.passed ? "[ok]   " : "[FAIL] ") << a.name << ": " << a.detail << '\n';
    return os.str();
}

std::string PruneReport::to_json() const {
    nlohmann::ordered_json j;
    j["r_current"] = r_current;
    j["r_target"] = r_target;
    j["pruned_channels"] = pruned_channels;
    j["max_pruned_norm"] = max_pruned_norm;
    auto& gs = j["groups"] = nlohmann::ordered_json::array();
    for (const auto& g : groups) {
        gs.push_back({{"block", g.block},
                      {"kind", kind_name(g.kind)},
                      {"head", g.head},
                      {"total", g.total},
                      {"pruned", g.pruned},
                      {"retained", g.retained},
                      {"min_retained_norm", g.min_retained_norm},
                      {"max_retained_norm", g.max_retained_norm},
                      {"max_pruned_norm", g.max_pruned_norm}});
    }
    auto& as = j["audits"] = nlohmann::ordered_json::array();
    for (const auto& a : audits) as.push_back({{"name", a.name}, {"passed", a.passed}, {"detail", a.detail}});
    j["all_passed"] = all_passed();
    return j.dump(2);
}

PruneReport prune_report(const ViTModel& m, const PruneState& state, double norm_tolerance) {
    if (!m.has_compactors()) throw ConfigError("prune report needs a compacted model");
    PruneReport r;
    r.r_current = state.r_current;
    r.r_target = state.r_target;
    r.pruned_channels = static_cast<int64_t>(state.pruned.size());
    const auto by_group = pruned_by_group(state.pruned);

    bool min_retention = true;
    for (int l = 0; l < m.config.depth; ++l) {
        const auto& cp = m.compactors[static_cast<size_t>(l)];
        for (auto kind : kAllKinds) {
            const Tensor& mat = cp.matrix(kind).value();
            const int64_t d = mat.shape().back();
            for (int g = 0; g < groups_of(m, kind); ++g) {
                const GroupKey key{l, kind, is_head_kind(kind) ? g : -1};
                auto it = by_group.find(key);
                const std::set<int> none;
                const std::set<int>& gone = it == by_group.end() ? none : it->second;
                GroupStats s{l, kind, key.head, d, static_cast<int64_t>(gone.size()), d - static_cast<int64_t>(gone.size())};
                s.min_retained_norm = INFINITY;
                for (int64_t j = 0; j < d; ++j) {
                    const double n = column_norm(mat, g, j);
                    if (gone.count(static_cast<int>(j))) {
                        s.max_pruned_norm = std::max(s.max_pruned_norm, n);
                    } else {
                        s.min_retained_norm = std::min(s.min_retained_norm, n);
                        s.max_retained_norm = std::max(s.max_retained_norm, n);
                    }
                }
                if (s.retained == 0) {
                    s.min_retained_norm = 0.0;
                    min_retention = false;
                }
                r.max_pruned_norm = std::max(r.max_pruned_norm, s.max_pruned_norm);
                r.groups.push_back(s);
            }
        }
    }

    std::string uniform_detail = "per-head pruned counts equal in every block";
    std::string align_detail = "query/key pruned columns identical for every head";
    bool uniform = true, aligned = true;
    try {
        check_consistency(m, by_group);
    } catch (const ConsistencyError& e) {
        const std::string what = e.what();
        if (what.find("different channel counts") != std::string::npos) {
            uniform = false;
            uniform_detail = what;
        } else {
            aligned = false;
            align_detail = what;
        }
    }
    r.audits.push_back({"head_uniformity", uniform, uniform_detail});
    r.audits.push_back({"qk_alignment", aligned, align_detail});
    r.audits.push_back({"min_retention", min_retention,
                        min_retention ? "every compactor group keeps at least one channel" : "a group lost every channel"});

    const auto masked = masked_channels(m);
    const bool masks_ok = masked == state.pruned;
    r.audits.push_back({"masks_match_P", masks_ok,
                        std::to_string(masked.size()) + " masked vs " + std::to_string(state.pruned.size()) + " in P"});

    bool symmetric = true;
    const ScoreBoard b = ScoreBoard::from_model(m);
    for (int l = 0; l < m.config.depth && symmetric; ++l) {
        const auto& cp = m.compactors[static_cast<size_t>(l)];
        for (int h = 0; h < m.config.heads && symmetric; ++h)
            for (int64_t j = 0; j < width_of(cp, ChannelKind::q); ++j) {
                const int c = static_cast<int>(j);
                if (b.score({l, ChannelKind::q, h, c}) != b.score({l, ChannelKind::k, h, c})) symmetric = false;
            }
    }
    r.audits.push_back({"score_symmetry", symmetric, "query/key partner scores equal"});

    std::ostringstream norm_detail;
    norm_detail << std::scientific << std::setprecision(3) << "max pruned column norm " << r.max_pruned_norm
                << " (tolerance " << norm_tolerance << ")";
    r.audits.push_back({"pruned_norm", r.max_pruned_norm <= norm_tolerance, norm_detail.str()});

    std::ostringstream ratio_detail;
    ratio_detail << std::fixed << std::setprecision(4) << "r_current " << r.r_current << " vs r_target " << r.r_target;
    r.audits.push_back({"target_reached", r.r_current >= r.r_target, ratio_detail.str()});
    return r;
}

PruneResult prune_model(const ViTModel& compacted, const PruneState& state, double norm_tolerance) {
    if (!compacted.has_compactors()) throw ConfigError("prune_model needs a compacted model");
    for (const auto& b : compacted.blocks) {
        if (!b.proj_index.empty()) throw ConfigError("prune_model cannot refold an already folded model");
    }
    const auto by_group = pruned_by_group(state.pruned);
    check_consistency(compacted, by_group);
    PruneReport report = prune_report(compacted, state, norm_tolerance);

    ViTModel out = compacted.clone();
    hard_zero(out, state.pruned);
    const int heads = out.config.heads;
    const int64_t c = out.config.dim;
    auto removed = [&](GroupKey g) {
        auto it = by_group.find(g);
        return it == by_group.end() ? std::set<int>{} : it->second;
    };

    for (int l = 0; l < out.config.depth; ++l) {
        BlockWeights& b = out.blocks[static_cast<size_t>(l)];
        const BlockCompactors& cp = out.compactors[static_cast<size_t>(l)];
        const int64_t d = b.qk_dim(heads), dv = b.v_dim(heads);
        RetainedChannels keep;
        for (int h = 0; h < heads; ++h) {
            keep.qk.push_back(kept(d, removed({l, ChannelKind::q, h})));
            keep.v.push_back(kept(dv, removed({l, ChannelKind::v, h})));
        }
        keep.proj = kept(b.proj_out(), removed({l, ChannelKind::proj, -1}));
        keep.fc1 = kept(b.mlp_hidden(), removed({l, ChannelKind::fc1, -1}));

        const int64_t d_new = static_cast<int64_t>(keep.qk[0].size());
        const float q_scale = static_cast<float>(std::sqrt(static_cast<double>(d_new) / static_cast<double>(d)));
        Tensor w, bias;
        fold_heads(b.q_weight.value(), b.q_bias.value(), cp.q.value(), keep.qk, q_scale, w, bias);
        b.q_weight = Var::parameter(std::move(w));
        b.q_bias = Var::parameter(std::move(bias));
        fold_heads(b.k_weight.value(), b.k_bias.value(), cp.k.value(), keep.qk, 1.0f, w, bias);
        b.k_weight = Var::parameter(std::move(w));
        b.k_bias = Var::parameter(std::move(bias));
        fold_heads(b.v_weight.value(), b.v_bias.value(), cp.v.value(), keep.v, 1.0f, w, bias);
        b.v_weight = Var::parameter(std::move(w));
        b.v_bias = Var::parameter(std::move(bias));

        std::vector<int64_t> proj_rows;
        for (int h = 0; h < heads; ++h)
            for (int64_t j : keep.v[static_cast<size_t>(h)]) proj_rows.push_back(h * dv + j);
        const Folded proj = fold(b.proj_weight.value().row_subset(proj_rows), b.proj_bias.value(),
                                 cp.proj.value().column_subset(keep.proj));
        b.proj_weight = Var::parameter(proj.weight);
        b.proj_bias = Var::parameter(proj.bias);
        if (static_cast<int64_t>(keep.proj.size()) < c) b.proj_index = keep.proj;

        const Folded fc1 = fold(b.fc1_weight.value(), b.fc1_bias.value(), cp.fc1.value().column_subset(keep.fc1));
        b.fc1_weight = Var::parameter(fc1.weight);
        b.fc1_bias = Var::parameter(fc1.bias);
        b.fc2_weight = Var::parameter(b.fc2_weight.value().row_subset(keep.fc1));
        out.retained.push_back(std::move(keep));
    }
    out.compactors.clear();
    return {std::move(out), std::move(report)};
}

}  // namespace vitc::cdcp
