#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <string>
#include <vector>

#include "error.hpp"

namespace sphenic {

// Row-major dense matrix of doubles. Column vectors are n x 1, row vectors 1 x n.
class DenseMatrix {
public:
    DenseMatrix() = default;
    DenseMatrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    static DenseMatrix identity(std::size_t n) {
        DenseMatrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    static DenseMatrix from_rows(std::initializer_list<std::initializer_list<double>> rows) {
        DenseMatrix m(rows.size(), rows.size() ? rows.begin()->size() : 0);
        std::size_t i = 0;
        for (const auto& r : rows) {
            if (r.size() != m.cols_)
                throw DimensionError("from_rows: ragged row " + std::to_string(i));
            std::size_t j = 0;
            for (double v : r) m(i, j++) = v;
            ++i;
        }
        return m;
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    std::vector<double>& data() { return data_; }
    const std::vector<double>& data() const { return data_; }

    bool same_shape(const DenseMatrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

    std::string shape_str() const {
        return std::to_string(rows_) + "x" + std::to_string(cols_);
    }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

    DenseMatrix row(std::size_t r) const {
        DenseMatrix out(1, cols_);
        for (std::size_t j = 0; j < cols_; ++j) out(0, j) = (*this)(r, j);
        return out;
    }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

inline void check_same_shape(const DenseMatrix& a, const DenseMatrix& b, const char* op) {
    if (!a.same_shape(b))
        throw DimensionError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
}

// i-k-j loop order keeps the inner loop contiguous in both C and B.
inline DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b) {
    if (a.cols() != b.rows())
        throw DimensionError("matmul: inner dimensions differ, " + a.shape_str() + " vs " + b.shape_str());
    DenseMatrix c(a.rows(), b.cols());
    const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
    const double* ad = a.data().data();
    const double* bd = b.data().data();
    double* cd = c.data().data();
    for (std::size_t i = 0; i < n; ++i) {
        const double* arow = ad + i * k;
        double* crow = cd + i * m;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            const double* brow = bd + p * m;
            for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
        }
    }
    return c;
}

inline DenseMatrix transpose(const DenseMatrix& a) {
    DenseMatrix t(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
    return t;
}

// Numerically stable: subtracts the row maximum before exponentiating.
inline DenseMatrix softmax_rows(const DenseMatrix& a) {
    if (a.cols() == 0) throw DimensionError("softmax_rows: empty rows");
    DenseMatrix out(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        double mx = a(i, 0);
        for (std::size_t j = 1; j < a.cols(); ++j) mx = std::max(mx, a(i, j));
        double sum = 0.0;
        for (std::size_t j = 0; j < a.cols(); ++j) {
            const double e = std::exp(a(i, j) - mx);
            out(i, j) = e;
            sum += e;
        }
        for (std::size_t j = 0; j < a.cols(); ++j) out(i, j) /= sum;
    }
    return out;
}

} // namespace sphenic
