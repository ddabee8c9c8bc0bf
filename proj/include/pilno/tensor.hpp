#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "pilno/error.hpp"

namespace pilno {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ')';
    return os.str();
}

// Dense row-major double tensor. Values are treated as immutable once a tensor
// has been handed to the graph; in-place writes happen only while building a
// tensor and inside optimizer steps, which own their parameters exclusively.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, double fill = 0.0)
        : shape_(std::move(shape)), data_(shape_size(shape_), fill) {
        validate_shape();
    }

    Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
        validate_shape();
        if (data_.size() != shape_size(shape_))
            throw ShapeError("tensor data size " + std::to_string(data_.size()) +
                             " does not match shape " + shape_str(shape_));
    }

    static Tensor scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }

    static Tensor from_vector(std::vector<double> v) {
        Shape s{v.size()};
        return Tensor(std::move(s), std::move(v));
    }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t last_dim() const { return shape_.empty() ? 1 : shape_.back(); }
    std::size_t leading_size() const { return shape_.empty() ? 1 : size() / shape_.back(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    const std::vector<double>& values() const { return data_; }

    // Same data, different shape (sizes must agree). Row-major layout makes
    // this a free operation.
    Tensor reshaped(Shape s) const {
        if (shape_size(s) != size())
            throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
        return Tensor(std::move(s), data_);
    }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

private:
    void validate_shape() const {
        for (std::size_t d : shape_)
            if (d == 0) throw ShapeError("zero extent in shape " + shape_str(shape_));
    }

    Shape shape_;
    std::vector<double> data_;
};

inline bool same_shape(const Tensor& a, const Tensor& b) { return a.shape() == b.shape(); }

using EigenRowMat =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EigenMapC = Eigen::Map<const EigenRowMat>;
using EigenMap = Eigen::Map<EigenRowMat>;

// (..., k) x (k, n) -> (..., n). Leading axes are flattened into rows, so a
// (B, N, k) input is a pointwise feature transform applied at every (b, n).
inline Tensor matmul(const Tensor& a, const Tensor& w) {
    if (w.rank() != 2) throw ShapeError("matmul: right operand must be rank 2, got " + shape_str(w.shape()));
    if (a.rank() < 1 || a.last_dim() != w.dim(0))
        throw ShapeError("matmul: inner dims disagree, " + shape_str(a.shape()) + " x " + shape_str(w.shape()));
    const std::size_t rows = a.leading_size(), k = w.dim(0), n = w.dim(1);
    Shape out_shape = a.shape();
    out_shape.back() = n;
    Tensor out(std::move(out_shape));
    EigenMap(out.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(n)) =
        EigenMapC(a.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(k)) *
        EigenMapC(w.data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n));
    return out;
}

} // namespace pilno
