// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fmattn/core/counters.hpp"
#include "fmattn/core/error.hpp"

namespace fmattn::core {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);

inline std::size_t extent_product(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

/// Dense row-major array. T is float (training) or double (verification).
template <typename T>
class Tensor {
  public:
    using value_type = T;
    using storage_type = std::vector<T, TrackingAllocator<T>>;

    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T{0})
        : shape_(std::move(shape)), data_(extent_product(shape_), fill) {}

    Tensor(Shape shape, std::initializer_list<T> values) : shape_(std::move(shape)), data_(values) {
        if (data_.size() != extent_product(shape_))
            throw ShapeError("tensor: " + std::to_string(data_.size()) + " values for shape " +
                             shape_string(shape_));
    }

    Tensor(Shape shape, std::span<const T> values)
        : shape_(std::move(shape)), data_(values.begin(), values.end()) {
        if (data_.size() != extent_product(shape_))
            throw ShapeError("tensor: " + std::to_string(data_.size()) + " values for shape " +
                             shape_string(shape_));
    }

    static Tensor matrix(std::size_t rows, std::size_t cols, T fill = T{0}) {
        return Tensor(Shape{rows, cols}, fill);
    }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t extent(std::size_t axis) const { return shape_.at(axis); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    std::size_t rows() const { return shape_.at(0); }
    std::size_t cols() const { return shape_.at(1); }

    std::span<T> data() { return {data_.data(), data_.size()}; }
    std::span<const T> data() const { return {data_.data(), data_.size()}; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    T& operator()(std::size_t i, std::size_t j) {
        assert(rank() == 2 && i < shape_[0] && j < shape_[1]);
        return data_[i * shape_[1] + j];
    }
    const T& operator()(std::size_t i, std::size_t j) const {
        assert(rank() == 2 && i < shape_[0] && j < shape_[1]);
        return data_[i * shape_[1] + j];
    }

    T& operator()(std::size_t i, std::size_t j, std::size_t k) {
        assert(rank() == 3);
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }
    const T& operator()(std::size_t i, std::size_t j, std::size_t k) const {
        assert(rank() == 3);
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }

    std::span<T> row(std::size_t i) {
        const std::size_t w = shape_.at(1);
        return {data_.data() + i * w, w};
    }
    std::span<const T> row(std::size_t i) const {
        const std::size_t w = shape_.at(1);
        return {data_.data() + i * w, w};
    }

    void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](T x) { return std::isfinite(x); });
    }

    /// Throws NumericError naming `op` if any value is NaN or Inf.
    void require_finite(const char* op) const {
        if (!all_finite()) throw NumericError(std::string(op) + ": non-finite value in " + shape_string(shape_));
    }

    Tensor& operator+=(const Tensor& other) {
        if (!same_shape(other))
            throw ShapeError("tensor +=: " + shape_string(shape_) + " vs " + shape_string(other.shape_));
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
        return *this;
    }

    Tensor& operator*=(T s) {
        for (auto& x : data_) x *= s;
        return *this;
    }

    bool operator==(const Tensor& other) const { return shape_ == other.shape_ && data_ == other.data_; }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out(shape_);
        for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
        return out;
    }

  private:
    Shape shape_;
    storage_type data_;
};

/// Trainable tensor with a gradient of the same shape.
template <typename T>
struct Parameter {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;

    Parameter() = default;
    Parameter(std::string name_, Tensor<T> value_)
        : name(std::move(name_)), value(std::move(value_)), grad(value.shape()) {}

    void zero_grad() { grad.fill(T{0}); }
};

}  // namespace fmattn::core
