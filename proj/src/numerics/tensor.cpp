#include "vitc/numerics/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace vitc::nn {

namespace {

// Activation tensors are multi-megabyte and short-lived. glibc would serve
// them with fresh mmap calls and fault every page in again; keep freed blocks
// in the heap instead.
[[maybe_unused]] const bool kHeapTuned = [] {
#if defined(__GLIBC__)
    mallopt(M_MMAP_THRESHOLD, 32 << 20);  // glibc maximum
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    mallopt(M_TOP_PAD, 64 << 20);
#endif
    return true;
}();

}  // namespace

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

int64_t shape_numel(const Shape& shape) {
    int64_t n = 1;
    for (auto d : shape) {
        if (d < 0) throw DimensionError("negative extent in shape " + shape_str(shape));
        n *= d;
    }
    return n;
}

Tensor::Tensor(Shape shape, float fill)
    : shape_(std::move(shape)), data_(static_cast<size_t>(shape_numel(shape_)), fill) {}

Tensor::Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_numel(shape_) != static_cast<int64_t>(data_.size())) {
        throw DimensionError("shape " + shape_str(shape_) + " does not match " +
                             std::to_string(data_.size()) + " values");
    }
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<float>> rows) {
    const int64_t r = static_cast<int64_t>(rows.size());
    const int64_t c = r ? static_cast<int64_t>(rows.begin()->size()) : 0;
    std::vector<float> data;
    data.reserve(static_cast<size_t>(r * c));
    for (const auto& row : rows) {
        if (static_cast<int64_t>(row.size()) != c) throw DimensionError("ragged matrix literal");
        data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(data));
}

Tensor Tensor::identity(int64_t n) {
    Tensor t({n, n});
    for (int64_t i = 0; i < n; ++i) t.at(i, i) = 1.0f;
    return t;
}

int64_t Tensor::dim(int64_t axis) const {
    if (axis < 0) axis += rank();
    if (axis < 0 || axis >= rank()) {
        throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape_));
    }
    return shape_[static_cast<size_t>(axis)];
}

float Tensor::item() const {
    if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape_));
    return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const& {
    Tensor copy = *this;
    return std::move(copy).reshaped(std::move(shape));
}

Tensor Tensor::reshaped(Shape shape) && {
    if (shape_numel(shape) != numel()) {
        throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    shape_ = std::move(shape);
    return std::move(*this);
}

int64_t Tensor::rows() const {
    require_rank(*this, 2, "rows()");
    return shape_[0];
}

int64_t Tensor::cols() const {
    require_rank(*this, 2, "cols()");
    return shape_[1];
}

Tensor Tensor::transposed() const {
    const int64_t r = rows(), c = cols();
    Tensor out({c, r});
    for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < c; ++j) out.at(j, i) = at(i, j);
    return out;
}

Tensor Tensor::column_subset(std::span<const int64_t> cols) const {
    const int64_t r = rows(), c = this->cols();
    const int64_t k = static_cast<int64_t>(cols.size());
    Tensor out({r, k});
    for (int64_t j = 0; j < k; ++j) {
        if (cols[j] < 0 || cols[j] >= c) throw DimensionError("column index out of range");
    }
    for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < k; ++j) out.at(i, j) = at(i, cols[j]);
    return out;
}

Tensor Tensor::row_subset(std::span<const int64_t> rows) const {
    const int64_t c = cols(), r = this->rows();
    const int64_t k = static_cast<int64_t>(rows.size());
    Tensor out({k, c});
    for (int64_t i = 0; i < k; ++i) {
        if (rows[i] < 0 || rows[i] >= r) throw DimensionError("row index out of range");
        std::copy_n(ptr() + rows[i] * c, c, out.ptr() + i * c);
    }
    return out;
}

void Tensor::fill(float v) { std::fill(data_.begin(), data_.end(), v); }

void Tensor::add_(const Tensor& other) {
    require_same_shape(*this, other, "add_");
    for (size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
}

void Tensor::scale_(float s) {
    for (auto& v : data_) v *= s;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "max_abs_diff");
    double m = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) {
        m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
    }
    return m;
}

void require_rank(const Tensor& t, int64_t rank, const char* what) {
    if (t.rank() != rank) {
        throw DimensionError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                             shape_str(t.shape()));
    }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
}

}  // namespace vitc::nn
