#include "vitc/numerics/ops.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <string>

#include "vitc/numerics/kernels.hpp"

namespace vitc::nn {

namespace {

// exp for float lanes: range reduction by ln 2 and a degree-6 polynomial,
// written branch-free so loops over it vectorize. Relative error ~2 ulp on
// [-87, 88]; inputs are clamped to that range.
inline float lane_exp(float x) {
    x = x < -87.0f ? -87.0f : (x > 88.0f ? 88.0f : x);
    const float n = std::floor(x * 1.44269504088896341f + 0.5f);
    const float r = (x - n * 0.693359375f) + n * 2.12194440e-4f;
    float p = 1.9875691500e-4f;
    p = p * r + 1.3981999507e-3f;
    p = p * r + 8.3334519073e-3f;
    p = p * r + 4.1665795894e-2f;
    p = p * r + 1.6666665459e-1f;
    p = p * r + 5.0000001201e-1f;
    p = p * r * r + r + 1.0f;
    const int32_t bits = (static_cast<int32_t>(n) + 127) << 23;
    float scale;
    std::memcpy(&scale, &bits, sizeof(scale));
    return p * scale;
}

// tanh(u) = 1 - 2 / (exp(2u) + 1).
inline float lane_tanh(float u) { return 1.0f - 2.0f / (lane_exp(2.0f * u) + 1.0f); }


using detail::Node;

void push_grad(Node& self, size_t i, Tensor&& g) {
    auto& p = self.parents[i];
    if (p->requires_grad) p->accumulate(std::move(g));
}

bool wants(const Node& self, size_t i) { return self.parents[i]->requires_grad; }

[[noreturn]] void mismatch(const char* op, const Tensor& a, const Tensor& b) {
    throw DimensionError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
}

// Column sums of a [r, c] buffer, accumulated in double.
Tensor column_sums(const Tensor& g, int64_t r, int64_t c) {
    std::vector<double> acc(static_cast<size_t>(c), 0.0);
    for (int64_t i = 0; i < r; ++i) {
        const float* row = g.ptr() + i * c;
        for (int64_t j = 0; j < c; ++j) acc[j] += row[j];
    }
    Tensor out({c});
    for (int64_t j = 0; j < c; ++j) out[j] = static_cast<float>(acc[j]);
    return out;
}

Tensor matmul_values(const Tensor& a, const Tensor& b) {
    const int64_t m = a.rows(), k = a.cols(), n = b.cols();
    Tensor c({m, n});
    gemm(m, n, k, a.ptr(), k, 1, b.ptr(), n, c.ptr(), n);
    return c;
}

// dA = dC * B^T and dB = A^T * dC for C = A * B.
void matmul_backward(Node& self, const Tensor& a, const Tensor& b) {
    const int64_t m = a.rows(), k = a.cols(), n = b.cols();
    const Tensor& dc = self.grad;
    if (wants(self, 0)) {
        Tensor bt = b.transposed();
        Tensor da({m, k});
        gemm(m, k, n, dc.ptr(), n, 1, bt.ptr(), k, da.ptr(), k);
        push_grad(self, 0, std::move(da));
    }
    if (wants(self, 1)) {
        Tensor db({k, n});
        gemm(k, n, m, a.ptr(), 1, k, dc.ptr(), n, db.ptr(), n);
        push_grad(self, 1, std::move(db));
    }
}

}  // namespace

Var matmul(const Var& a, const Var& b) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.rows()) mismatch("matmul", av, bv);
    record_macs(static_cast<uint64_t>(av.rows() * av.cols() * bv.cols()));
    return Var::from_op(matmul_values(av, bv), {a, b}, [](Node& self) {
        matmul_backward(self, self.parents[0]->value, self.parents[1]->value);
    });
}

Var linear(const Var& x, const Var& w, const Var& bias) {
    const Tensor& xv = x.value();
    const Tensor& wv = w.value();
    const Tensor& bv = bias.value();
    if (xv.rank() != 2 || wv.rank() != 2 || xv.cols() != wv.rows()) mismatch("linear", xv, wv);
    if (bv.numel() != wv.cols()) mismatch("linear bias", wv, bv);
    const int64_t m = xv.rows(), n = wv.cols();
    record_macs(static_cast<uint64_t>(m * xv.cols() * n));
    Tensor out = matmul_values(xv, wv);
    for (int64_t i = 0; i < m; ++i) {
        float* row = out.ptr() + i * n;
        for (int64_t j = 0; j < n; ++j) row[j] += bv[j];
    }
    return Var::from_op(std::move(out), {x, w, bias}, [](Node& self) {
        matmul_backward(self, self.parents[0]->value, self.parents[1]->value);
        if (wants(self, 2)) {
            const Tensor& g = self.grad;
            Tensor db = column_sums(g, g.rows(), g.cols());
            push_grad(self, 2, std::move(db).reshaped(self.parents[2]->value.shape()));
        }
    });
}

Var add(const Var& a, const Var& b) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (!av.same_shape(bv)) mismatch("add", av, bv);
    Tensor out = av;
    out.add_(bv);
    return Var::from_op(std::move(out), {a, b}, [](Node& self) {
        if (wants(self, 0)) push_grad(self, 0, Tensor(self.grad));
        if (wants(self, 1)) push_grad(self, 1, Tensor(self.grad));
    });
}

Var add_tiled(const Var& x, const Var& y) {
    const Tensor& xv = x.value();
    const Tensor& yv = y.value();
    const int64_t period = yv.numel();
    if (period == 0 || xv.numel() % period != 0 || xv.dim(-1) != yv.dim(-1)) mismatch("add_tiled", xv, yv);
    Tensor out = xv;
    const int64_t reps = xv.numel() / period;
    for (int64_t r = 0; r < reps; ++r) {
        float* o = out.ptr() + r * period;
        for (int64_t i = 0; i < period; ++i) o[i] += yv[i];
    }
    return Var::from_op(std::move(out), {x, y}, [period, reps](Node& self) {
        if (wants(self, 0)) push_grad(self, 0, Tensor(self.grad));
        if (wants(self, 1)) {
            std::vector<double> acc(static_cast<size_t>(period), 0.0);
            for (int64_t r = 0; r < reps; ++r) {
                const float* g = self.grad.ptr() + r * period;
                for (int64_t i = 0; i < period; ++i) acc[i] += g[i];
            }
            Tensor dy(self.parents[1]->value.shape());
            for (int64_t i = 0; i < period; ++i) dy[i] = static_cast<float>(acc[i]);
            push_grad(self, 1, std::move(dy));
        }
    });
}

Var mul(const Var& a, const Var& b) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (!av.same_shape(bv)) mismatch("mul", av, bv);
    Tensor out = av;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
    return Var::from_op(std::move(out), {a, b}, [](Node& self) {
        const Tensor& av = self.parents[0]->value;
        const Tensor& bv = self.parents[1]->value;
        if (wants(self, 0)) {
            Tensor g = self.grad;
            for (int64_t i = 0; i < g.numel(); ++i) g[i] *= bv[i];
            push_grad(self, 0, std::move(g));
        }
        if (wants(self, 1)) {
            Tensor g = self.grad;
            for (int64_t i = 0; i < g.numel(); ++i) g[i] *= av[i];
            push_grad(self, 1, std::move(g));
        }
    });
}

Var scale(const Var& x, float s) {
    Tensor out = x.value();
    out.scale_(s);
    return Var::from_op(std::move(out), {x}, [s](Node& self) {
        Tensor g = self.grad;
        g.scale_(s);
        push_grad(self, 0, std::move(g));
    });
}

Var sum(const Var& x) {
    double acc = 0.0;
    for (float v : x.value().data()) acc += v;
    return Var::from_op(Tensor::scalar(static_cast<float>(acc)), {x}, [](Node& self) {
        push_grad(self, 0, Tensor(self.parents[0]->value.shape(), self.grad[0]));
    });
}

Var l2_norm(const Var& x) {
    double acc = 0.0;
    for (float v : x.value().data()) acc += static_cast<double>(v) * v;
    const double norm = std::sqrt(acc);
    return Var::from_op(Tensor::scalar(static_cast<float>(norm)), {x}, [norm](Node& self) {
        Tensor g = self.parents[0]->value;
        if (norm < 1e-12) {
            g.fill(0.0f);
        } else {
            g.scale_(static_cast<float>(self.grad[0] / norm));
        }
        push_grad(self, 0, std::move(g));
    });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, float eps) {
    const Tensor& xv = x.value();
    const int64_t c = xv.dim(-1);
    if (gamma.value().numel() != c || beta.value().numel() != c) mismatch("layer_norm", xv, gamma.value());
    if (!(eps > 0.0f)) throw DimensionError("layer_norm: eps must be positive");
    const int64_t rows = xv.numel() / c;
    Tensor xhat(xv.shape());
    std::vector<float> rstd(static_cast<size_t>(rows));
    Tensor out(xv.shape());
    const float* g = gamma.value().ptr();
    const float* b = beta.value().ptr();
    for (int64_t r = 0; r < rows; ++r) {
        const float* in = xv.ptr() + r * c;
        double mean = 0.0;
        for (int64_t j = 0; j < c; ++j) mean += in[j];
        mean /= static_cast<double>(c);
        double var = 0.0;
        for (int64_t j = 0; j < c; ++j) {
            const double d = in[j] - mean;
            var += d * d;
        }
        var /= static_cast<double>(c);
        const double inv = 1.0 / std::sqrt(var + eps);
        rstd[r] = static_cast<float>(inv);
        float* xh = xhat.ptr() + r * c;
        float* o = out.ptr() + r * c;
        for (int64_t j = 0; j < c; ++j) {
            xh[j] = static_cast<float>((in[j] - mean) * inv);
            o[j] = xh[j] * g[j] + b[j];
        }
    }
    return Var::from_op(std::move(out), {x, gamma, beta},
                        [xhat = std::move(xhat), rstd = std::move(rstd), c, rows](Node& self) {
                            const Tensor& dy = self.grad;
                            const float* g = self.parents[1]->value.ptr();
                            std::vector<double> dgamma(static_cast<size_t>(c), 0.0);
                            std::vector<double> dbeta(static_cast<size_t>(c), 0.0);
                            Tensor dx(dy.shape());
                            for (int64_t r = 0; r < rows; ++r) {
                                const float* dyr = dy.ptr() + r * c;
                                const float* xh = xhat.ptr() + r * c;
                                double mean_d = 0.0, mean_dx = 0.0;
                                for (int64_t j = 0; j < c; ++j) {
                                    const double d = static_cast<double>(dyr[j]) * g[j];
                                    mean_d += d;
                                    mean_dx += d * xh[j];
                                    dgamma[j] += static_cast<double>(dyr[j]) * xh[j];
                                    dbeta[j] += dyr[j];
                                }
                                mean_d /= static_cast<double>(c);
                                mean_dx /= static_cast<double>(c);
                                float* dxr = dx.ptr() + r * c;
                                for (int64_t j = 0; j < c; ++j) {
                                    const double d = static_cast<double>(dyr[j]) * g[j];
                                    dxr[j] = static_cast<float>(rstd[r] * (d - mean_d - xh[j] * mean_dx));
                                }
                            }
                            if (wants(self, 0)) push_grad(self, 0, std::move(dx));
                            auto to_tensor = [&](const std::vector<double>& v, const Shape& shape) {
                                Tensor t(shape);
                                for (int64_t j = 0; j < c; ++j) t[j] = static_cast<float>(v[j]);
                                return t;
                            };
                            if (wants(self, 1)) push_grad(self, 1, to_tensor(dgamma, self.parents[1]->value.shape()));
                            if (wants(self, 2)) push_grad(self, 2, to_tensor(dbeta, self.parents[2]->value.shape()));
                        });
}

Var gelu(const Var& x) {
    Tensor out = x.value();
    Tensor th(out.shape());  // tanh of the inner argument, reused by backward
    float* o = out.ptr();
    float* t = th.ptr();
    const float a = float(kGeluSqrt2OverPi), b = float(kGeluCubic);
    for (int64_t i = 0; i < out.numel(); ++i) {
        const float z = o[i];
        t[i] = lane_tanh(a * (z + b * z * z * z));
        o[i] = 0.5f * z * (1.0f + t[i]);
    }
    return Var::from_op(std::move(out), {x}, [th = std::move(th), a, b](Node& self) {
        const float* xv = self.parents[0]->value.ptr();
        const float* t = th.ptr();
        Tensor g = self.grad;
        float* gp = g.ptr();
        for (int64_t i = 0; i < g.numel(); ++i) {
            const float z = xv[i];
            const float du = a * (1.0f + 3.0f * b * z * z);
            gp[i] *= 0.5f * (1.0f + t[i]) + 0.5f * z * (1.0f - t[i] * t[i]) * du;
        }
        push_grad(self, 0, std::move(g));
    });
}

namespace {

void softmax_row(const float* in, float* out, int64_t n) {
    float mx = in[0];
    for (int64_t j = 1; j < n; ++j) mx = std::max(mx, in[j]);
    double total = 0.0;
    for (int64_t j = 0; j < n; ++j) {
        const double e = std::exp(static_cast<double>(in[j]) - mx);
        out[j] = static_cast<float>(e);
        total += e;
    }
    const double inv = 1.0 / total;
    for (int64_t j = 0; j < n; ++j) out[j] = static_cast<float>(out[j] * inv);
}

// dx = y * (dy - sum(dy * y)) per row, optionally scaled.
void softmax_row_backward(const float* y, const float* dy, float* dx, int64_t n, double s) {
    double dot = 0.0;
    for (int64_t j = 0; j < n; ++j) dot += static_cast<double>(dy[j]) * y[j];
    for (int64_t j = 0; j < n; ++j) dx[j] = static_cast<float>(s * y[j] * (dy[j] - dot));
}

}  // namespace

Var softmax(const Var& x) {
    const Tensor& xv = x.value();
    const int64_t n = xv.dim(-1);
    const int64_t rows = xv.numel() / n;
    Tensor out(xv.shape());
    for (int64_t r = 0; r < rows; ++r) softmax_row(xv.ptr() + r * n, out.ptr() + r * n, n);
    Tensor y = out;
    return Var::from_op(std::move(out), {x}, [y = std::move(y), n, rows](Node& self) {
        Tensor dx(y.shape());
        for (int64_t r = 0; r < rows; ++r) {
            softmax_row_backward(y.ptr() + r * n, self.grad.ptr() + r * n, dx.ptr() + r * n, n, 1.0);
        }
        push_grad(self, 0, std::move(dx));
    });
}

Var attention(const Var& q, const Var& k, const Var& v, int64_t batch, int64_t tokens, int64_t heads) {
    const Tensor& qv = q.value();
    const Tensor& kv = k.value();
    const Tensor& vv = v.value();
    require_rank(qv, 2, "attention q");
    require_rank(kv, 2, "attention k");
    require_rank(vv, 2, "attention v");
    if (!qv.same_shape(kv)) {
        throw ConsistencyError("attention: query/key shapes differ " + shape_str(qv.shape()) + " vs " +
                               shape_str(kv.shape()));
    }
    if (qv.rows() != batch * tokens || vv.rows() != batch * tokens || qv.cols() % heads != 0 ||
        vv.cols() % heads != 0) {
        mismatch("attention", qv, vv);
    }
    const int64_t n = tokens;
    const int64_t dq = qv.cols() / heads;
    const int64_t dv = vv.cols() / heads;
    const int64_t ldq = qv.cols(), ldv = vv.cols();
    const double scale_factor = 1.0 / std::sqrt(static_cast<double>(dq));
    record_macs(static_cast<uint64_t>(batch * heads * (n * n * dq + n * n * dv)));

    Tensor probs({batch, heads, n, n});
    Tensor out({batch * n, heads * dv});
    Tensor kt({dq, n});
    Tensor scores({n, n});
    for (int64_t b = 0; b < batch; ++b) {
        for (int64_t h = 0; h < heads; ++h) {
            const float* qp = qv.ptr() + b * n * ldq + h * dq;
            const float* kp = kv.ptr() + b * n * ldq + h * dq;
            for (int64_t j = 0; j < n; ++j)
                for (int64_t d = 0; d < dq; ++d) kt.at(d, j) = kp[j * ldq + d];
            gemm(n, n, dq, qp, ldq, 1, kt.ptr(), n, scores.ptr(), n);
            float* p = probs.ptr() + (b * heads + h) * n * n;
            for (int64_t i = 0; i < n * n; ++i) scores[i] = static_cast<float>(scores[i] * scale_factor);
            for (int64_t i = 0; i < n; ++i) softmax_row(scores.ptr() + i * n, p + i * n, n);
            gemm(n, dv, n, p, n, 1, vv.ptr() + b * n * ldv + h * dv, ldv, out.ptr() + b * n * ldv + h * dv,
                 ldv);
        }
    }
    return Var::from_op(
        std::move(out), {q, k, v},
        [probs = std::move(probs), batch, heads, n, dq, dv, ldq, ldv, scale_factor](Node& self) {
            const Tensor& qv = self.parents[0]->value;
            const Tensor& kv = self.parents[1]->value;
            const Tensor& vv = self.parents[2]->value;
            const Tensor& dout = self.grad;
            Tensor dqt(qv.shape()), dkt(kv.shape()), dvt(vv.shape());
            Tensor vt({dv, n}), dp({n, n}), ds({n, n});
            for (int64_t b = 0; b < batch; ++b) {
                for (int64_t h = 0; h < heads; ++h) {
                    const float* p = probs.ptr() + (b * heads + h) * n * n;
                    const float* dop = dout.ptr() + b * n * ldv + h * dv;
                    const float* vp = vv.ptr() + b * n * ldv + h * dv;
                    for (int64_t j = 0; j < n; ++j)
                        for (int64_t d = 0; d < dv; ++d) vt.at(d, j) = vp[j * ldv + d];
                    gemm(n, n, dv, dop, ldv, 1, vt.ptr(), n, dp.ptr(), n);
                    gemm(n, dv, n, p, 1, n, dop, ldv, dvt.ptr() + b * n * ldv + h * dv, ldv);
                    for (int64_t i = 0; i < n; ++i) {
                        softmax_row_backward(p + i * n, dp.ptr() + i * n, ds.ptr() + i * n, n, scale_factor);
                    }
                    const float* qp = qv.ptr() + b * n * ldq + h * dq;
                    const float* kp = kv.ptr() + b * n * ldq + h * dq;
                    gemm(n, dq, n, ds.ptr(), n, 1, kp, ldq, dqt.ptr() + b * n * ldq + h * dq, ldq);
                    gemm(n, dq, n, ds.ptr(), 1, n, qp, ldq, dkt.ptr() + b * n * ldq + h * dq, ldq);
                }
            }
            if (wants(self, 0)) push_grad(self, 0, std::move(dqt));
            if (wants(self, 1)) push_grad(self, 1, std::move(dkt));
            if (wants(self, 2)) push_grad(self, 2, std::move(dvt));
        });
}

Var head_matmul(const Var& x, const Var& m) {
    const Tensor& xv = x.value();
    const Tensor& mv = m.value();
    require_rank(xv, 2, "head_matmul x");
    require_rank(mv, 3, "head_matmul m");
    const int64_t heads = mv.dim(0), d = mv.dim(1);
    if (mv.dim(2) != d || xv.cols() != heads * d) mismatch("head_matmul", xv, mv);
    const int64_t r = xv.rows(), ld = heads * d;
    record_macs(static_cast<uint64_t>(r * heads * d * d));
    Tensor out({r, ld});
    for (int64_t h = 0; h < heads; ++h) {
        gemm(r, d, d, xv.ptr() + h * d, ld, 1, mv.ptr() + h * d * d, d, out.ptr() + h * d, ld);
    }
    return Var::from_op(std::move(out), {x, m}, [heads, d, r, ld](Node& self) {
        const Tensor& xv = self.parents[0]->value;
        const Tensor& mv = self.parents[1]->value;
        const Tensor& dy = self.grad;
        if (wants(self, 0)) {
            Tensor dx({r, ld});
            Tensor mt({d, d});
            for (int64_t h = 0; h < heads; ++h) {
                const float* mh = mv.ptr() + h * d * d;
                for (int64_t i = 0; i < d; ++i)
                    for (int64_t j = 0; j < d; ++j) mt.at(j, i) = mh[i * d + j];
                gemm(r, d, d, dy.ptr() + h * d, ld, 1, mt.ptr(), d, dx.ptr() + h * d, ld);
            }
            push_grad(self, 0, std::move(dx));
        }
        if (wants(self, 1)) {
            Tensor dm(mv.shape());
            for (int64_t h = 0; h < heads; ++h) {
                gemm(d, d, r, xv.ptr() + h * d, 1, ld, dy.ptr() + h * d, ld, dm.ptr() + h * d * d, d);
            }
            push_grad(self, 1, std::move(dm));
        }
    });
}

Var gather_rows(const Var& x, std::vector<int64_t> index) {
    const Tensor& xv = x.value();
    require_rank(xv, 2, "gather_rows");
    Tensor out = xv.row_subset(index);
    return Var::from_op(std::move(out), {x}, [index = std::move(index)](Node& self) {
        const Tensor& xv = self.parents[0]->value;
        const int64_t c = xv.cols();
        Tensor dx(xv.shape());
        for (size_t i = 0; i < index.size(); ++i) {
            const float* g = self.grad.ptr() + static_cast<int64_t>(i) * c;
            float* d = dx.ptr() + index[i] * c;
            for (int64_t j = 0; j < c; ++j) d[j] += g[j];
        }
        push_grad(self, 0, std::move(dx));
    });
}

Var scatter_cols(const Var& x, std::vector<int64_t> index, int64_t width) {
    const Tensor& xv = x.value();
    require_rank(xv, 2, "scatter_cols");
    if (static_cast<int64_t>(index.size()) != xv.cols()) {
        throw DimensionError("scatter_cols: " + std::to_string(index.size()) + " indices for " +
                             shape_str(xv.shape()));
    }
    for (auto i : index) {
        if (i < 0 || i >= width) throw DimensionError("scatter_cols: index out of range");
    }
    const int64_t r = xv.rows(), k = xv.cols();
    Tensor out({r, width});
    for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < k; ++j) out.at(i, index[j]) += xv.at(i, j);
    return Var::from_op(std::move(out), {x}, [index = std::move(index)](Node& self) {
        push_grad(self, 0, self.grad.column_subset(index));
    });
}

Var concat_cols(const Var& a, const Var& b) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.rank() != 2 || bv.rank() != 2 || av.rows() != bv.rows()) mismatch("concat_cols", av, bv);
    const int64_t r = av.rows(), ca = av.cols(), cb = bv.cols();
    Tensor out({r, ca + cb});
    for (int64_t i = 0; i < r; ++i) {
        std::copy_n(av.ptr() + i * ca, ca, out.ptr() + i * (ca + cb));
        std::copy_n(bv.ptr() + i * cb, cb, out.ptr() + i * (ca + cb) + ca);
    }
    return Var::from_op(std::move(out), {a, b}, [r, ca, cb](Node& self) {
        Tensor da({r, ca}), db({r, cb});
        for (int64_t i = 0; i < r; ++i) {
            std::copy_n(self.grad.ptr() + i * (ca + cb), ca, da.ptr() + i * ca);
            std::copy_n(self.grad.ptr() + i * (ca + cb) + ca, cb, db.ptr() + i * cb);
        }
        if (wants(self, 0)) push_grad(self, 0, std::move(da));
        if (wants(self, 1)) push_grad(self, 1, std::move(db));
    });
}

Var prepend_token(const Var& spatial, const Var& token, int64_t batch) {
    const Tensor& sv = spatial.value();
    const Tensor& tv = token.value();
    require_rank(sv, 2, "prepend_token");
    const int64_t c = sv.cols();
    const int64_t token_rows = tv.numel() / (c ? c : 1);
    if (batch <= 0 || sv.rows() % batch != 0 || tv.dim(-1) != c || (token_rows != 1 && token_rows != batch)) {
        mismatch("prepend_token", sv, tv);
    }
    const int64_t m = sv.rows() / batch;
    Tensor out({batch * (m + 1), c});
    for (int64_t b = 0; b < batch; ++b) {
        const float* t = tv.ptr() + (token_rows == 1 ? 0 : b * c);
        std::copy_n(t, c, out.ptr() + b * (m + 1) * c);
        std::copy_n(sv.ptr() + b * m * c, m * c, out.ptr() + (b * (m + 1) + 1) * c);
    }
    return Var::from_op(std::move(out), {spatial, token}, [batch, m, c, token_rows](Node& self) {
        const Tensor& g = self.grad;
        if (wants(self, 0)) {
            Tensor ds({batch * m, c});
            for (int64_t b = 0; b < batch; ++b) {
                std::copy_n(g.ptr() + (b * (m + 1) + 1) * c, m * c, ds.ptr() + b * m * c);
            }
            push_grad(self, 0, std::move(ds));
        }
        if (wants(self, 1)) {
            Tensor dt(self.parents[1]->value.shape());
            for (int64_t b = 0; b < batch; ++b) {
                float* d = dt.ptr() + (token_rows == 1 ? 0 : b * c);
                const float* src = g.ptr() + b * (m + 1) * c;
                for (int64_t j = 0; j < c; ++j) d[j] += src[j];
            }
            push_grad(self, 1, std::move(dt));
        }
    });
}

Var mean_pool(const Var& x, int64_t batch) {
    const Tensor& xv = x.value();
    require_rank(xv, 2, "mean_pool");
    if (batch <= 0 || xv.rows() % batch != 0) throw DimensionError("mean_pool: rows not divisible by batch");
    const int64_t t = xv.rows() / batch, c = xv.cols();
    Tensor out({batch, c});
    for (int64_t b = 0; b < batch; ++b) {
        for (int64_t j = 0; j < c; ++j) {
            double acc = 0.0;
            for (int64_t i = 0; i < t; ++i) acc += xv.at(b * t + i, j);
            out.at(b, j) = static_cast<float>(acc / static_cast<double>(t));
        }
    }
    return Var::from_op(std::move(out), {x}, [batch, t, c](Node& self) {
        Tensor dx({batch * t, c});
        const float inv = 1.0f / static_cast<float>(t);
        for (int64_t b = 0; b < batch; ++b)
            for (int64_t i = 0; i < t; ++i)
                for (int64_t j = 0; j < c; ++j) dx.at(b * t + i, j) = self.grad.at(b, j) * inv;
        push_grad(self, 0, std::move(dx));
    });
}

Var cross_entropy(const Var& logits, std::span<const int32_t> labels) {
    const Tensor& lv = logits.value();
    require_rank(lv, 2, "cross_entropy");
    const int64_t b = lv.rows(), k = lv.cols();
    if (static_cast<int64_t>(labels.size()) != b) {
        throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                             shape_str(lv.shape()));
    }
    Tensor probs({b, k});
    double loss = 0.0;
    for (int64_t i = 0; i < b; ++i) {
        if (labels[i] < 0 || labels[i] >= k) throw DimensionError("cross_entropy: label out of range");
        softmax_row(lv.ptr() + i * k, probs.ptr() + i * k, k);
        loss -= std::log(std::max(static_cast<double>(probs.at(i, labels[i])), 1e-30));
    }
    loss /= static_cast<double>(b);
    std::vector<int32_t> lab(labels.begin(), labels.end());
    return Var::from_op(Tensor::scalar(static_cast<float>(loss)), {logits},
                        [probs = std::move(probs), lab = std::move(lab), b, k](Node& self) {
                            Tensor d = probs;
                            const float s = self.grad[0] / static_cast<float>(b);
                            for (int64_t i = 0; i < b; ++i) {
                                d.at(i, lab[i]) -= 1.0f;
                                for (int64_t j = 0; j < k; ++j) d.at(i, j) *= s;
                            }
                            push_grad(self, 0, std::move(d));
                        });
}

}  // namespace vitc::nn
