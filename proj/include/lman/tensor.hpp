#pragma once

#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "lman/error.hpp"

namespace lman {

/// Named dense tensor, row-major.
template <typename Scalar>
struct Tensor {
    std::string name;
    std::vector<std::size_t> shape;
    std::vector<Scalar> values;

    Tensor() = default;
    Tensor(std::string tensor_name, std::vector<std::size_t> dims)
        : name(std::move(tensor_name)), shape(std::move(dims)), values(element_count(shape), Scalar(0)) {}

    static std::size_t element_count(const std::vector<std::size_t>& dims) {
        return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>());
    }

    std::size_t size() const noexcept { return values.size(); }
    Scalar* data() noexcept { return values.data(); }
    const Scalar* data() const noexcept { return values.data(); }

    bool operator==(const Tensor&) const = default;
};

/// Ordered collection of tensors making up one model component.
template <typename Scalar>
using ParameterSet = std::vector<Tensor<Scalar>>;

template <typename Scalar>
bool same_shapes(const ParameterSet<Scalar>& a, const ParameterSet<Scalar>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i].shape != b[i].shape) return false;
    }
    return true;
}

/// Zero-valued set with the same names and shapes as `like`.
template <typename Scalar>
ParameterSet<Scalar> zeros_like(const ParameterSet<Scalar>& like) {
    ParameterSet<Scalar> out;
    out.reserve(like.size());
    for (const auto& t : like) out.emplace_back(t.name, t.shape);
    return out;
}

template <typename Scalar>
std::size_t parameter_count(const ParameterSet<Scalar>& set) {
    std::size_t n = 0;
    for (const auto& t : set) n += t.size();
    return n;
}

/// Element-wise conversion between precisions.
template <typename To, typename From>
ParameterSet<To> cast_parameters(const ParameterSet<From>& in) {
    ParameterSet<To> out;
    out.reserve(in.size());
    for (const auto& t : in) {
        Tensor<To> c(t.name, t.shape);
        for (std::size_t i = 0; i < t.size(); ++i) c.values[i] = static_cast<To>(t.values[i]);
        out.push_back(std::move(c));
    }
    return out;
}

/// Row-major matrix used for feature batches.
template <typename Scalar>
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), data_(rows * cols, Scalar(0)) {}

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }

    std::span<Scalar> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const Scalar> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    Scalar& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    Scalar operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::vector<Scalar>& values() noexcept { return data_; }
    const std::vector<Scalar>& values() const noexcept { return data_; }

    bool operator==(const Matrix&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<Scalar> data_;
};

template <typename Scalar>
Scalar dot(std::span<const Scalar> a, std::span<const Scalar> b) {
    if (a.size() != b.size()) throw StructuralError("dot: length mismatch");
    Scalar s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

}  // namespace lman
