#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace calibra {

// Dense n-dimensional array of 64-bit reals, row-major.
// Invariant: numel(shape) == data.size().
struct Tensor {
    std::vector<std::int64_t> shape;
    std::vector<double> data;
    bool requires_grad = false;

    Tensor() = default;

    static Tensor zeros(std::vector<std::int64_t> shape);
    static Tensor full(std::vector<std::int64_t> shape, double value);
    static Tensor from_data(std::vector<std::int64_t> shape, std::vector<double> values);
    static Tensor scalar(double value);

    std::int64_t numel() const;
    int rank() const { return static_cast<int>(shape.size()); }
    std::int64_t dim(int i) const { return shape[static_cast<std::size_t>(i)]; }
    bool is_scalar() const { return shape.empty() || (shape.size() == 1 && shape[0] == 1); }
    double scalar_value() const;

    double& operator[](std::int64_t i) { return data[static_cast<std::size_t>(i)]; }
    double operator[](std::int64_t i) const { return data[static_cast<std::size_t>(i)]; }

    // NCHW accessors.
    double& at4(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w);
    double at4(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const;
    double& at2(std::int64_t r, std::int64_t c);
    double at2(std::int64_t r, std::int64_t c) const;

    bool same_shape(const Tensor& other) const { return shape == other.shape; }
    bool all_finite() const;

    Tensor& fill(double value);
    Tensor reshaped(std::vector<std::int64_t> new_shape) const;
};

std::int64_t numel(const std::vector<std::int64_t>& shape);
std::string shape_str(const std::vector<std::int64_t>& shape);

// Strict elementwise helpers used outside the autograd path.
double max_abs_diff(const Tensor& a, const Tensor& b);
bool bit_identical(const Tensor& a, const Tensor& b);

}  // namespace calibra
