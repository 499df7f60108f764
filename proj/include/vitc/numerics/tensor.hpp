#pragma once

#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "vitc/errors.hpp"

namespace vitc::nn {

using Shape = std::vector<int64_t>;

std::string shape_str(const Shape& shape);
int64_t shape_numel(const Shape& shape);

// Dense row-major f32 array. Copies are deep; the value owns its storage.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, float fill = 0.0f);
    Tensor(Shape shape, std::vector<float> data);

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0f); }
    static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0f); }
    static Tensor scalar(float v) { return Tensor({1}, std::vector<float>{v}); }
    // Row-major 2-D literal, e.g. matrix({{1, 2}, {3, 4}}).
    static Tensor matrix(std::initializer_list<std::initializer_list<float>> rows);
    static Tensor identity(int64_t n);

    const Shape& shape() const noexcept { return shape_; }
    int64_t rank() const noexcept { return static_cast<int64_t>(shape_.size()); }
    int64_t dim(int64_t axis) const;
    int64_t numel() const noexcept { return static_cast<int64_t>(data_.size()); }
    bool empty() const noexcept { return data_.empty(); }

    float* ptr() noexcept { return data_.data(); }
    const float* ptr() const noexcept { return data_.data(); }
    std::span<float> data() noexcept { return data_; }
    std::span<const float> data() const noexcept { return data_; }
    const std::vector<float>& vec() const noexcept { return data_; }

    float& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    float operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }
    float& at(int64_t r, int64_t c) { return data_[static_cast<size_t>(r * shape_.back() + c)]; }
    float at(int64_t r, int64_t c) const {
        return data_[static_cast<size_t>(r * shape_.back() + c)];
    }
    float item() const;

    // Same data under a new shape with equal element count.
    Tensor reshaped(Shape shape) const&;
    Tensor reshaped(Shape shape) &&;

    // 2-D helpers.
    int64_t rows() const;
    int64_t cols() const;
    Tensor transposed() const;
    Tensor column_subset(std::span<const int64_t> cols) const;
    Tensor row_subset(std::span<const int64_t> rows) const;

    void fill(float v);
    void add_(const Tensor& other);
    void scale_(float s);

    bool same_shape(const Tensor& other) const noexcept { return shape_ == other.shape_; }
    bool operator==(const Tensor& other) const = default;

private:
    Shape shape_;
    std::vector<float> data_;
};

// Largest absolute elementwise difference; shapes must match.
double max_abs_diff(const Tensor& a, const Tensor& b);

void require_rank(const Tensor& t, int64_t rank, const char* what);
void require_same_shape(const Tensor& a, const Tensor& b, const char* what);

}  // namespace vitc::nn
