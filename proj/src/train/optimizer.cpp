#include "vitc/train/optimizer.hpp"

#include <cmath>

#include "vitc/errors.hpp"

namespace vitc::train {

using nn::Tensor;

Optimizer::Optimizer(OptimizerKind kind, std::vector<nn::Var> params, std::vector<ParamGroup> groups, double beta2,
                     double eps)
    : kind_(kind), params_(std::move(params)), groups_(std::move(groups)), beta2_(beta2), eps_(eps) {
    if (groups_.size() != params_.size()) throw ConfigError("optimizer: one group per parameter required");
    if (kind_ == OptimizerKind::adamw) {
        for (const auto& p : params_) {
            m_.emplace_back(p.shape());
            v_.emplace_back(p.shape());
        }
    }
}

void Optimizer::step(const std::vector<Tensor>& grads, double lr) {
    if (grads.size() != params_.size()) throw DimensionError("optimizer: gradient count does not match parameters");
    ++steps_;
    for (size_t i = 0; i < params_.size(); ++i) {
        Tensor& w = params_[i].mutable_value();
        const Tensor& g = grads[i];
        require_same_shape(w, g, "optimizer step");
        const ParamGroup& grp = groups_[i];
        const float rate = float(lr * grp.lr_scale);
        const float decay = float(1.0 - lr * grp.lr_scale * grp.weight_decay);
        float* wp = w.ptr();
        const float* gp = g.ptr();
        const int64_t n = w.numel();
        if (kind_ == OptimizerKind::sgd) {
            for (int64_t j = 0; j < n; ++j) wp[j] = wp[j] * decay - rate * gp[j];
            continue;
        }
        const float b1 = float(grp.beta1), b2 = float(beta2_);
        const double c1 = 1.0 - std::pow(grp.beta1, double(steps_));
        const double c2 = 1.0 - std::pow(beta2_, double(steps_));
        const float step_size = float(lr * grp.lr_scale / c1);
        const float inv_c2 = float(1.0 / std::sqrt(c2));
        const float eps = float(eps_);
        float* mp = m_[i].ptr();
        float* vp = v_[i].ptr();
        for (int64_t j = 0; j < n; ++j) {
            mp[j] = b1 * mp[j] + (1.0f - b1) * gp[j];
            vp[j] = b2 * vp[j] + (1.0f - b2) * gp[j] * gp[j];
            wp[j] = wp[j] * decay - step_size * mp[j] / (std::sqrt(vp[j]) * inv_c2 + eps);
        }
    }
}

void Optimizer::reset_column(size_t param, int64_t slab, int64_t col) {
    if (kind_ != OptimizerKind::adamw) return;
    Tensor& m = m_.at(param);
    Tensor& v = v_.at(param);
    const int64_t d = m.shape().back();
    const int64_t rows = m.rank() == 3 ? m.shape()[1] : m.shape()[0];
    for (int64_t r = 0; r < rows; ++r) {
        const int64_t at = (slab * rows + r) * d + col;
        m[at] = 0.0f;
        v[at] = 0.0f;
    }
}

}  // namespace vitc::train
