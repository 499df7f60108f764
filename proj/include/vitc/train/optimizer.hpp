#pragma once

#include <cstdint>
#include <vector>

#include "vitc/numerics/autograd.hpp"
#include "vitc/train/schedule.hpp"

namespace vitc::train {

struct ParamGroup {
    double lr_scale = 1.0;
    double weight_decay = 0.0;
    double beta1 = 0.9;
};

// AdamW with decoupled weight decay, or plain gradient descent, over a fixed
// parameter list. Each parameter carries its own group settings.
class Optimizer {
public:
    Optimizer(OptimizerKind kind, std::vector<nn::Var> params, std::vector<ParamGroup> groups, double beta2,
              double eps);

    // One update with `grads` aligned to the parameter list.
    void step(const std::vector<nn::Tensor>& grads, double lr);
    // Zeroes both moments of column `col` of parameter `param`; for a rank-3
    // parameter [s, d, d] the column lives in slab `slab`.
    void reset_column(size_t param, int64_t slab, int64_t col);

    int64_t steps() const { return steps_; }
    const std::vector<nn::Var>& params() const { return params_; }

private:
    OptimizerKind kind_;
    std::vector<nn::Var> params_;
    std::vector<ParamGroup> groups_;
    double beta2_, eps_;
    std::vector<nn::Tensor> m_, v_;
    int64_t steps_ = 0;
};

}  // namespace vitc::train
