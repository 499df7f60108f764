#include "vitc/cdcp/channels.hpp"

#include <cmath>
#include <sstream>

#include "vitc/errors.hpp"
#include "vitc/numerics/ops.hpp"

namespace vitc::cdcp {

using nn::Tensor;

namespace {

constexpr double kNormFloor = 1e-12;

ChannelRef mirror(const ChannelRef& c) {
    ChannelRef m = c;
    m.kind = c.kind == ChannelKind::q ? ChannelKind::k : ChannelKind::q;
    return m;
}

bool is_qk(ChannelKind k) { return k == ChannelKind::q || k == ChannelKind::k; }

}  // namespace

std::string ChannelRef::to_string() const {
    std::ostringstream os;
    os << "block " << block << ' ' << kind_name(kind);
    if (head >= 0) os << " head " << head;
    os << " col " << col;
    return os.str();
}

Tensor column_norms(const Tensor& m) {
    const int64_t d = m.shape().back();
    const int64_t rows = m.dim(-2);
    const int64_t groups = m.numel() / (rows * d);
    Tensor out = m.rank() == 3 ? Tensor({groups, d}) : Tensor({d});
    for (int64_t g = 0; g < groups; ++g) {
        for (int64_t j = 0; j < d; ++j) {
            double s = 0.0;
            for (int64_t i = 0; i < rows; ++i) {
                const double v = m[(g * rows + i) * d + j];
                s += v * v;
            }
            out[g * d + j] = static_cast<float>(std::sqrt(s));
        }
    }
    return out;
}

ScoreBoard ScoreBoard::from_model(const ViTModel& model) {
    if (!model.has_compactors()) throw ConfigError("score board needs a model with compactors");
    ScoreBoard board;
    const int heads = model.config.heads;
    for (size_t l = 0; l < model.compactors.size(); ++l) {
        const auto& cp = model.compactors[l];
        const int block = static_cast<int>(l);
        // Recomputed in double to keep q/k pair scores exactly equal.
        auto norm = [](const Tensor& m, int64_t g, int64_t j) {
            const int64_t d = m.shape().back(), rows = m.dim(-2);
            double s = 0.0;
            for (int64_t i = 0; i < rows; ++i) {
                const double v = m[(g * rows + i) * d + j];
                s += v * v;
            }
            return std::sqrt(s);
        };
        const Tensor& q = cp.q.value();
        const Tensor& k = cp.k.value();
        const Tensor& v = cp.v.value();
        for (int h = 0; h < heads; ++h) {
            for (int64_t j = 0; j < q.shape().back(); ++j) {
                const double s = 0.5 * (norm(q, h, j) + norm(k, h, j));
                board.insert({block, ChannelKind::q, h, static_cast<int>(j)}, s);
                board.insert({block, ChannelKind::k, h, static_cast<int>(j)}, s);
            }
            for (int64_t j = 0; j < v.shape().back(); ++j) {
                board.insert({block, ChannelKind::v, h, static_cast<int>(j)}, norm(v, h, j));
            }
        }
        for (auto kind : {ChannelKind::proj, ChannelKind::fc1}) {
            const Tensor& m = cp.matrix(kind).value();
            for (int64_t j = 0; j < m.shape().back(); ++j) board.insert({block, kind, -1, static_cast<int>(j)}, norm(m, 0, j));
        }
    }
    return board;
}

void ScoreBoard::insert(const ChannelRef& c, double score) {
    remove(c);
    scores_[c] = score;
    global_.insert({score, c});
    local_[group_of(c)].insert({score, c});
}

void ScoreBoard::remove(const ChannelRef& c) {
    auto it = scores_.find(c);
    if (it == scores_.end()) return;
    const Entry e{it->second, c};
    global_.erase(e);
    local_[group_of(c)].erase(e);
    scores_.erase(it);
}

double ScoreBoard::score(const ChannelRef& c) const {
    auto it = scores_.find(c);
    if (it == scores_.end()) throw SelectionError("channel " + c.to_string() + " is not on the score board", 0.0);
    return it->second;
}

ChannelRef ScoreBoard::argmin() const {
    if (global_.empty()) throw SelectionError("score board is empty", 0.0);
    return global_.begin()->second;
}

const ChannelRef* ScoreBoard::local_argmin(const GroupKey& g) const {
    auto it = local_.find(g);
    if (it == local_.end() || it->second.empty()) return nullptr;
    return &it->second.begin()->second;
}

std::vector<GroupKey> ScoreBoard::groups(int block, ChannelKind kind) const {
    std::vector<GroupKey> out;
    for (const auto& [g, entries] : local_)
        if (g.block == block && g.kind == kind) out.push_back(g);
    return out;
}

size_t ScoreBoard::local_size(const GroupKey& g) const {
    auto it = local_.find(g);
    return it == local_.end() ? 0 : it->second.size();
}

std::vector<float> compactor_grad(std::span<const float> c, float m, std::span<const float> g_cls, double lambda) {
    if (c.size() != g_cls.size()) {
        throw DimensionError("compactor_grad: column has " + std::to_string(c.size()) + " entries, gradient " +
                             std::to_string(g_cls.size()));
    }
    double norm = 0.0;
    for (float v : c) norm += static_cast<double>(v) * v;
    norm = std::sqrt(norm);
    const double coef = norm < kNormFloor ? 0.0 : lambda / norm;
    std::vector<float> out(c.size());
    for (size_t i = 0; i < c.size(); ++i) out[i] = static_cast<float>(m * g_cls[i] + coef * c[i]);
    return out;
}

Tensor compactor_grad(const Tensor& m, const Tensor& mask, const Tensor& g_cls, double lambda) {
    nn::require_same_shape(m, g_cls, "compactor_grad");
    const int64_t d = m.shape().back(), rows = m.dim(-2);
    const int64_t groups = m.numel() / (rows * d);
    if (mask.numel() != groups * d) {
        throw DimensionError("compactor_grad: mask " + nn::shape_str(mask.shape()) + " does not match compactor " +
                             nn::shape_str(m.shape()));
    }
    Tensor out(m.shape());
    std::vector<float> col(static_cast<size_t>(rows)), g(static_cast<size_t>(rows));
    for (int64_t grp = 0; grp < groups; ++grp) {
        for (int64_t j = 0; j < d; ++j) {
            for (int64_t i = 0; i < rows; ++i) {
                col[i] = m[(grp * rows + i) * d + j];
                g[i] = g_cls[(grp * rows + i) * d + j];
            }
            const auto r = compactor_grad(col, mask[grp * d + j], g, lambda);
            for (int64_t i = 0; i < rows; ++i) out[(grp * rows + i) * d + j] = r[i];
        }
    }
    return out;
}

std::vector<ChannelRef> head_consistency_expand(const ChannelRef& c, ScoreBoard& board) {
    if (!is_head_kind(c.kind)) throw ConsistencyError("head-level consistency applies to q/k/v, got " + c.to_string());
    board.remove(c);
    std::vector<ChannelRef> out{c};
    for (const GroupKey& g : board.groups(c.block, c.kind)) {
        if (g.head == c.head) continue;
        if (board.local_size(g) <= 1) {
            throw MinimumRetentionError("head " + std::to_string(g.head) + " of block " + std::to_string(c.block) +
                                        " " + kind_name(c.kind) + " has no channel left to prune alongside " +
                                        c.to_string());
        }
        const ChannelRef pick = *board.local_argmin(g);
        board.remove(pick);
        out.push_back(pick);
    }
    return out;
}

std::vector<ChannelRef> attention_consistency_expand(const ChannelRef& c, ScoreBoard& board,
                                                     const std::set<ChannelRef>& pruned) {
    if (!is_qk(c.kind)) throw ConsistencyError("attention-level consistency applies to q/k, got " + c.to_string());
    board.remove(c);
    const ChannelRef partner = mirror(c);
    if (pruned.count(partner)) return {c};
    board.remove(partner);
    return {c, partner};
}

RatioFn channel_ratio_fn(const ViTConfig& config, const atme::MergePlan& plan) {
    const double base = static_cast<double>(flops::total_macs(config, {}, nullptr));
    const double merged = static_cast<double>(flops::total_macs(config, plan, nullptr));
    return [config, plan, base, merged](const flops::ChannelState& s) {
        return (merged - static_cast<double>(flops::total_macs(config, plan, &s))) / base;
    };
}

namespace {

void shrink(flops::ChannelState& s, const ChannelRef& c) {
    auto& d = s[static_cast<size_t>(c.block)];
    switch (c.kind) {
        case ChannelKind::q: --d.q_total; break;
        case ChannelKind::k: --d.k_total; break;
        case ChannelKind::v: --d.v_total; break;
        case ChannelKind::proj: --d.proj_out; break;
        case ChannelKind::fc1: --d.mlp_hidden; break;
    }
}

}  // namespace

flops::ChannelState pruned_state(const ViTModel& model, const std::set<ChannelRef>& pruned) {
    flops::ChannelState s = flops::state_of(model);
    for (const auto& c : pruned) shrink(s, c);
    return s;
}

PruneState select_channels(ScoreBoard board, const ViTModel& model, double r_target, const RatioFn& ratio) {
    PruneState st;
    st.r_target = r_target;
    flops::ChannelState state = flops::state_of(model);
    st.r_current = ratio(state);
    while (st.r_current < r_target) {
        if (board.empty()) {
            std::ostringstream os;
            os << "channel selection cannot reach r_target " << r_target << "; maximum achievable reduction is "
               << st.r_current;
            throw SelectionError(os.str(), st.r_current);
        }
        const ChannelRef c = board.argmin();
        if (board.local_size(group_of(c)) <= 1) {
            // Last survivor of its compactor (or head): never pruned.
            board.remove(c);
            if (is_qk(c.kind)) board.remove(mirror(c));
            continue;
        }
        std::vector<ChannelRef> added;
        if (c.kind == ChannelKind::proj || c.kind == ChannelKind::fc1) {
            board.remove(c);
            added.push_back(c);
        } else if (c.kind == ChannelKind::v) {
            added = head_consistency_expand(c, board);
        } else {
            for (const auto& h : head_consistency_expand(c, board)) {
                for (const auto& a : attention_consistency_expand(h, board, st.pruned)) added.push_back(a);
            }
        }
        for (const auto& a : added) {
            if (st.pruned.insert(a).second) shrink(state, a);
        }
        const double before = st.r_current;
        st.r_current = ratio(state);
        st.last_step = st.r_current - before;
        ++st.iterations;
    }
    return st;
}

PruneState select_channels(const ViTModel& model, double r_target) {
    return select_channels(ScoreBoard::from_model(model), model, r_target, channel_ratio_fn(model.config, model.plan));
}

Folded fold(const Tensor& w, const Tensor& b, const Tensor& m_bar) {
    nn::require_rank(w, 2, "fold weight");
    nn::require_rank(m_bar, 2, "fold compactor");
    nn::NoGradGuard guard;
    Folded f;
    f.weight = nn::matmul(nn::Var::constant(w), nn::Var::constant(m_bar)).value();
    f.bias = nn::matmul(nn::Var::constant(b.reshaped({1, b.numel()})), nn::Var::constant(m_bar))
                 .value()
                 .reshaped({m_bar.dim(1)});
    return f;
}

}  // namespace vitc::cdcp
