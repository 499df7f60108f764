#pragma once

// Reference implementations used as independent oracles in tests. Everything
// here is written as plain loops in double precision and shares no code path
// with the library kernels.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "vitc/numerics/autograd.hpp"
#include "vitc/numerics/kernels.hpp"
#include "vitc/numerics/tensor.hpp"

namespace vitc::oracle {

using nn::Tensor;
using nn::Var;

inline Tensor random_tensor(nn::Shape shape, uint64_t seed, float lo = -1.0f, float hi = 1.0f) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> dist(lo, hi);
    Tensor t(std::move(shape));
    for (auto& v : t.data()) v = dist(rng);
    return t;
}

inline Tensor ref_matmul(const Tensor& a, const Tensor& b) {
    const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor c({m, n});
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (int64_t t = 0; t < k; ++t) s += static_cast<double>(a.at(i, t)) * b.at(t, j);
            c.at(i, j) = static_cast<float>(s);
        }
    }
    return c;
}

inline std::vector<double> ref_softmax(const std::vector<double>& x) {
    double mx = x[0];
    for (double v : x) mx = std::max(mx, v);
    std::vector<double> y(x.size());
    double s = 0.0;
    for (size_t i = 0; i < x.size(); ++i) s += (y[i] = std::exp(x[i] - mx));
    for (auto& v : y) v /= s;
    return y;
}

inline double ref_gelu(double x) {
    return 0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (x + 0.044715 * x * x * x)));
}

inline Tensor ref_layer_norm(const Tensor& x, const Tensor& g, const Tensor& b, double eps) {
    const int64_t c = x.dim(-1), rows = x.numel() / c;
    Tensor y(x.shape());
    for (int64_t r = 0; r < rows; ++r) {
        double mean = 0.0, var = 0.0;
        for (int64_t j = 0; j < c; ++j) mean += x[r * c + j];
        mean /= c;
        for (int64_t j = 0; j < c; ++j) var += (x[r * c + j] - mean) * (x[r * c + j] - mean);
        var /= c;
        for (int64_t j = 0; j < c; ++j) {
            y[r * c + j] = static_cast<float>((x[r * c + j] - mean) / std::sqrt(var + eps) * g[j] + b[j]);
        }
    }
    return y;
}

// Single-sequence multi-head attention written head by head.
inline Tensor ref_attention(const Tensor& q, const Tensor& k, const Tensor& v, int64_t heads) {
    const int64_t n = q.dim(0), dq = q.dim(1) / heads, dv = v.dim(1) / heads;
    Tensor out({n, heads * dv});
    for (int64_t h = 0; h < heads; ++h) {
        for (int64_t i = 0; i < n; ++i) {
            std::vector<double> s(static_cast<size_t>(n));
            for (int64_t j = 0; j < n; ++j) {
                double dot = 0.0;
                for (int64_t d = 0; d < dq; ++d) dot += static_cast<double>(q.at(i, h * dq + d)) * k.at(j, h * dq + d);
                s[j] = dot / std::sqrt(static_cast<double>(dq));
            }
            auto p = ref_softmax(s);
            for (int64_t d = 0; d < dv; ++d) {
                double acc = 0.0;
                for (int64_t j = 0; j < n; ++j) acc += p[j] * v.at(j, h * dv + d);
                out.at(i, h * dv + d) = static_cast<float>(acc);
            }
        }
    }
    return out;
}

struct GradCheckResult {
    double max_rel_error = 0.0;  // over checked elements, using the mixed metric below
    int64_t checked = 0;
    std::string worst;
};

// Central finite differences against grad_of. Element error is
// |a - n| / (max(|a|, |n|) + atol / rtol), i.e. passing the returned value at
// rtol means |a - n| <= rtol * max(|a|, |n|) + atol. At most `per_param`
// elements per tensor are sampled (all when smaller).
inline GradCheckResult grad_check(const std::function<Var()>& loss_fn, std::vector<Var> params, double h,
                                  double rtol, double atol, int64_t per_param = 1 << 30, uint64_t seed = 1) {
    nn::PreciseAccumulation precise;
    GradCheckResult res;
    std::vector<Tensor> analytic;
    {
        Var loss = loss_fn();
        analytic = nn::grad_of(loss, params);
    }
    std::mt19937_64 rng(seed);
    for (size_t p = 0; p < params.size(); ++p) {
        Tensor& value = params[p].mutable_value();
        std::vector<int64_t> idx(static_cast<size_t>(value.numel()));
        for (int64_t i = 0; i < value.numel(); ++i) idx[i] = i;
        if (value.numel() > per_param) {
            std::shuffle(idx.begin(), idx.end(), rng);
            idx.resize(static_cast<size_t>(per_param));
        }
        for (int64_t i : idx) {
            const float orig = value[i];
            const float up = orig + static_cast<float>(h);
            const float down = orig - static_cast<float>(h);
            double fp, fm;
            {
                nn::NoGradGuard ng;
                value[i] = up;
                fp = loss_fn().value().item();
                value[i] = down;
                fm = loss_fn().value().item();
                value[i] = orig;
            }
            const double num = (fp - fm) / (static_cast<double>(up) - static_cast<double>(down));
            const double ana = analytic[p][i];
            const double err = std::abs(ana - num) / (std::max(std::abs(ana), std::abs(num)) + atol / rtol);
            ++res.checked;
            if (err > res.max_rel_error) {
                res.max_rel_error = err;
                res.worst = "param " + std::to_string(p) + " elem " + std::to_string(i) + " analytic " +
                            std::to_string(ana) + " numeric " + std::to_string(num);
            }
        }
    }
    return res;
}

}  // namespace vitc::oracle
