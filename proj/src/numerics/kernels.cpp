#include "vitc/numerics/kernels.hpp"

#include <array>
#if defined(__AVX512F__)
#include <immintrin.h>
#endif
#include <cstring>
#include <utility>

namespace vitc::nn {

namespace {

constexpr int kRows = 6;
constexpr int kCols = 32;

constexpr int kLaneWidth = 16;

// R x (L * 16) register tile writing the first `cols` columns of C.
template <int R, int L>
void tile(int64_t k, const float* a, int64_t a_row, int64_t a_col, const float* b, int64_t ldb, float* c,
          int64_t ldc, int cols) {
#if defined(__AVX512F__)
    const int last = cols - (L - 1) * kLaneWidth;
    const __mmask16 tail = last >= kLaneWidth ? __mmask16(0xFFFF) : __mmask16((1u << last) - 1u);
    __m512 acc[R][L];
#pragma GCC unroll 8
    for (int r = 0; r < R; ++r)
#pragma GCC unroll 2
        for (int j = 0; j < L; ++j) acc[r][j] = _mm512_setzero_ps();
    for (int64_t t = 0; t < k; ++t) {
        const float* brow = b + t * ldb;
        __m512 bv[L];
#pragma GCC unroll 2
        for (int j = 0; j < L - 1; ++j) bv[j] = _mm512_loadu_ps(brow + j * kLaneWidth);
        bv[L - 1] = _mm512_maskz_loadu_ps(tail, brow + (L - 1) * kLaneWidth);
#pragma GCC unroll 8
        for (int r = 0; r < R; ++r) {
            const __m512 av = _mm512_set1_ps(a[r * a_row + t * a_col]);
#pragma GCC unroll 2
            for (int j = 0; j < L; ++j) acc[r][j] = _mm512_fmadd_ps(av, bv[j], acc[r][j]);
        }
    }
#pragma GCC unroll 8
    for (int r = 0; r < R; ++r) {
#pragma GCC unroll 2
        for (int j = 0; j < L - 1; ++j) _mm512_storeu_ps(c + r * ldc + j * kLaneWidth, acc[r][j]);
        _mm512_mask_storeu_ps(c + r * ldc + (L - 1) * kLaneWidth, tail, acc[r][L - 1]);
    }
#else
    float acc[R][L * kLaneWidth] = {};
    for (int64_t t = 0; t < k; ++t) {
        const float* brow = b + t * ldb;
        for (int r = 0; r < R; ++r) {
            const float av = a[r * a_row + t * a_col];
            for (int j = 0; j < cols; ++j) acc[r][j] += av * brow[j];
        }
    }
    for (int r = 0; r < R; ++r) std::memcpy(c + r * ldc, acc[r], sizeof(float) * size_t(cols));
#endif
}

// Double-accumulating reference tile used in precise mode.
void tile_precise(int rows, int cols, int64_t k, const float* a, int64_t a_row, int64_t a_col, const float* b,
                  int64_t ldb, float* c, int64_t ldc) {
    double acc[kRows][kCols] = {};
    for (int64_t t = 0; t < k; ++t) {
        const float* brow = b + t * ldb;
        for (int r = 0; r < rows; ++r) {
            const double av = a[r * a_row + t * a_col];
            for (int j = 0; j < cols; ++j) acc[r][j] += av * static_cast<double>(brow[j]);
        }
    }
    for (int r = 0; r < rows; ++r)
        for (int j = 0; j < cols; ++j) c[r * ldc + j] = static_cast<float>(acc[r][j]);
}

thread_local bool t_precise = false;

using TileFn = void (*)(int64_t, const float*, int64_t, int64_t, const float*, int64_t, float*, int64_t, int);

template <int L, size_t... R>
constexpr std::array<TileFn, sizeof...(R)> row_table(std::index_sequence<R...>) {
    return {&tile<int(R) + 1, L>...};
}

constexpr auto kOneLane = row_table<1>(std::make_index_sequence<kRows>{});
constexpr auto kTwoLanes = row_table<2>(std::make_index_sequence<kRows>{});

}  // namespace

void gemm(int64_t m, int64_t n, int64_t k, const float* a, int64_t a_row, int64_t a_col,
          const float* b, int64_t ldb, float* c, int64_t ldc) {
    for (int64_t i = 0; i < m; i += kRows) {
        const int rows = static_cast<int>(m - i < kRows ? m - i : kRows);
        const float* ai = a + i * a_row;
        float* ci = c + i * ldc;
        for (int64_t j = 0; j < n; j += kCols) {
            const int cols = static_cast<int>(n - j < kCols ? n - j : kCols);
            if (t_precise) {
                tile_precise(rows, cols, k, ai, a_row, a_col, b + j, ldb, ci + j, ldc);
                continue;
            }
            const auto& table = cols > kLaneWidth ? kTwoLanes : kOneLane;
            table[size_t(rows - 1)](k, ai, a_row, a_col, b + j, ldb, ci + j, ldc, cols);
        }
    }
}

bool precise_accumulation() { return t_precise; }

PreciseAccumulation::PreciseAccumulation() : saved_(t_precise) { t_precise = true; }
PreciseAccumulation::~PreciseAccumulation() { t_precise = saved_; }

MacCounter& mac_counter() {
    thread_local MacCounter counter;
    return counter;
}

}  // namespace vitc::nn
