#pragma once

#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

namespace nowcastkd {

/// Dense row-major double tensor. Value semantics; shape is part of the value.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<std::int64_t> shape);
    Tensor(std::initializer_list<std::int64_t> shape);

    static Tensor zeros(std::vector<std::int64_t> shape);
    static Tensor full(std::vector<std::int64_t> shape, double value);

    const std::vector<std::int64_t>& shape() const { return shape_; }
    std::int64_t ndim() const { return static_cast<std::int64_t>(shape_.size()); }
    std::int64_t dim(std::int64_t i) const { return shape_[static_cast<std::size_t>(i)]; }
    std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    double& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
    double operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

    /// Reassigns the shape in place; element count must match.
    Tensor& reshape(std::vector<std::int64_t> shape);
    /// Copy with a new shape of identical element count.
    Tensor reshaped(std::vector<std::int64_t> shape) const;

    void fill(double value);
    void zero() { fill(0.0); }

    Tensor& operator+=(const Tensor& other);
    Tensor& operator-=(const Tensor& other);
    Tensor& operator*=(double s);

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
    bool all_finite() const;
    double min() const;
    double max() const;
    double sum() const;

    std::string shape_str() const;

private:
    std::vector<std::int64_t> shape_;
    std::vector<double> data_;
};

std::int64_t shape_numel(const std::vector<std::int64_t>& shape);

/// Throws std::invalid_argument naming `what` when shapes differ.
void check_same_shape(const Tensor& a, const Tensor& b, const char* what);

}  // namespace nowcastkd
