#pragma once

#include <cstdint>

namespace vitc::nn {

// C[i, j] = sum_t A(i, t) * B[t, j], accumulated in ascending t: in float by
// default, in double inside a PreciseAccumulation scope.
//
// A(i, t) lives at a[i * a_row + t * a_col], so both A and its transpose can be
// passed without copying. B rows are contiguous with stride ldb; C rows have
// stride ldc. C is overwritten. Each output element is reduced by a single
// loop in fixed order, so results do not depend on tiling.
void gemm(int64_t m, int64_t n, int64_t k, const float* a, int64_t a_row, int64_t a_col,
          const float* b, int64_t ldb, float* c, int64_t ldc);

// Switches gemm on this thread to double accumulation for the scope's
// lifetime. Used by finite-difference checks, where float round-off in the
// forward pass would swamp a 1e-3 step.
class PreciseAccumulation {
public:
    PreciseAccumulation();
    ~PreciseAccumulation();
    PreciseAccumulation(const PreciseAccumulation&) = delete;
    PreciseAccumulation& operator=(const PreciseAccumulation&) = delete;

private:
    bool saved_;
};

bool precise_accumulation();

// Multiply-accumulate instrumentation. Only forward matmul-type ops report.
struct MacCounter {
    bool enabled = false;
    uint64_t macs = 0;
};

MacCounter& mac_counter();

inline void record_macs(uint64_t n) {
    auto& c = mac_counter();
    if (c.enabled) c.macs += n;
}

// Enables the thread-local counter for the scope and restores the previous
// state on exit.
class MacCountScope {
public:
    MacCountScope() : saved_(mac_counter()) { mac_counter() = MacCounter{true, 0}; }
    ~MacCountScope() { mac_counter() = saved_; }
    MacCountScope(const MacCountScope&) = delete;
    MacCountScope& operator=(const MacCountScope&) = delete;

    uint64_t count() const { return mac_counter().macs; }

private:
    MacCounter saved_;
};

}  // namespace vitc::nn
