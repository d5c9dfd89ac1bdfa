#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <string>
#include <vector>

#include "mrlab/error.hpp"

namespace mrlab {

// Dense row-major matrix of doubles. Everything in the library is rank-2;
// scalars are 1x1 and vectors are 1xn or nx1 as the formulas dictate.
class Tensor {
public:
    Tensor() = default;
    Tensor(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Tensor(std::size_t rows, std::size_t cols, std::vector<double> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_) {
            throw ShapeError("Tensor: data size " + std::to_string(data_.size()) +
                             " does not match shape " + shape_str(rows_, cols_));
        }
    }

    static Tensor scalar(double v) { return Tensor(1, 1, {v}); }
    static Tensor row(std::vector<double> v) {
        const std::size_t n = v.size();
        return Tensor(1, n, std::move(v));
    }
    static Tensor col(std::vector<double> v) {
        const std::size_t n = v.size();
        return Tensor(n, 1, std::move(v));
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }
    std::vector<std::size_t> shape() const { return {rows_, cols_}; }

    double& at(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double at(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    const std::vector<double>& vec() const { return data_; }

    double item() const {
        if (size() != 1) {
            throw ShapeError("Tensor::item: expected scalar, got " + shape_str(rows_, cols_));
        }
        return data_[0];
    }

    bool same_shape(const Tensor& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

    bool all_finite() const {
        for (double v : data_) {
            if (!std::isfinite(v)) return false;
        }
        return true;
    }

    std::string shape_str() const { return shape_str(rows_, cols_); }
    static std::string shape_str(std::size_t r, std::size_t c) {
        return std::to_string(r) + "x" + std::to_string(c);
    }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

} // namespace mrlab
