#include "calibra/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>

namespace calibra {

std::int64_t numel(const std::vector<std::int64_t>& shape) {
    std::int64_t n = 1;
    for (std::int64_t d : shape) n *= d;
    return n;
}

std::string shape_str(const std::vector<std::int64_t>& shape) {
    if (shape.empty()) return "scalar";
    std::ostringstream os;
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    return os.str();
}

static void check_shape(const std::vector<std::int64_t>& shape) {
    for (std::int64_t d : shape) {
        if (d <= 0) {
            throw std::invalid_argument("tensor shape has non-positive dim: " + shape_str(shape));
        }
    }
}

Tensor Tensor::zeros(std::vector<std::int64_t> shape) {
    check_shape(shape);
    Tensor t;
    t.data.assign(static_cast<std::size_t>(calibra::numel(shape)), 0.0);
    t.shape = std::move(shape);
    return t;
}

Tensor Tensor::full(std::vector<std::int64_t> shape, double value) {
    Tensor t = zeros(std::move(shape));
    t.fill(value);
    return t;
}

Tensor Tensor::from_data(std::vector<std::int64_t> shape, std::vector<double> values) {
    check_shape(shape);
    if (calibra::numel(shape) != static_cast<std::int64_t>(values.size())) {
        throw std::invalid_argument("tensor data length " + std::to_string(values.size()) +
                                    " does not match shape " + shape_str(shape));
    }
    Tensor t;
    t.shape = std::move(shape);
    t.data = std::move(values);
    return t;
}

Tensor Tensor::scalar(double value) {
    Tensor t;
    t.shape = {1};
    t.data = {value};
    return t;
}

std::int64_t Tensor::numel() const { return static_cast<std::int64_t>(data.size()); }

double Tensor::scalar_value() const {
    if (!is_scalar()) {
        throw std::invalid_argument("expected scalar tensor, got shape " + shape_str(shape));
    }
    return data.empty() ? 0.0 : data[0];
}

double& Tensor::at4(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) {
    return data[static_cast<std::size_t>(((n * shape[1] + c) * shape[2] + h) * shape[3] + w)];
}

double Tensor::at4(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
    return data[static_cast<std::size_t>(((n * shape[1] + c) * shape[2] + h) * shape[3] + w)];
}

double& Tensor::at2(std::int64_t r, std::int64_t c) {
    return data[static_cast<std::size_t>(r * shape[1] + c)];
}

double Tensor::at2(std::int64_t r, std::int64_t c) const {
    return data[static_cast<std::size_t>(r * shape[1] + c)];
}

bool Tensor::all_finite() const {
    for (double v : data) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

Tensor& Tensor::fill(double value) {
    for (double& v : data) v = value;
    return *this;
}

Tensor Tensor::reshaped(std::vector<std::int64_t> new_shape) const {
    check_shape(new_shape);
    if (calibra::numel(new_shape) != numel()) {
        throw std::invalid_argument("reshape from " + shape_str(shape) + " to " +
                                    shape_str(new_shape) + " changes element count");
    }
    Tensor t;
    t.shape = std::move(new_shape);
    t.data = data;
    t.requires_grad = requires_grad;
    return t;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) {
        throw std::invalid_argument("max_abs_diff shape mismatch: " + shape_str(a.shape) + " vs " +
                                    shape_str(b.shape));
    }
    double m = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        m = std::max(m, std::fabs(a.data[i] - b.data[i]));
    }
    return m;
}

bool bit_identical(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) return false;
    return std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(double)) == 0;
}

}  // namespace calibra
