#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "kvfunnel/error.hpp"

namespace kvfunnel {

/// Dense row-major float matrix. Storage is fp32; reductions accumulate in
/// at least fp32 in a fixed loop order so results are reproducible.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, float fill = 0.0f)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<float> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_) {
            throw ShapeError("matrix data length " + std::to_string(data_.size()) +
                             " does not match " + shape_string(rows_, cols_));
        }
    }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0f;
        return m;
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }

    float& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    float operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<float> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const float> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::span<float> data() { return data_; }
    std::span<const float> data() const { return data_; }

    std::string shape() const { return shape_string(rows_, cols_); }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](float x) { return std::isfinite(x); });
    }

    friend bool operator==(const Matrix&, const Matrix&) = default;

    static std::string shape_string(std::size_t r, std::size_t c) {
        return std::to_string(r) + "x" + std::to_string(c);
    }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<float> data_;
};

/// Standard product a·b. Row i of the result depends only on row i of `a`,
/// so a single-row product is bit-identical to the matching row of a batch.
inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul shape mismatch: " + a.shape() + " x " + b.shape());
    }
    Matrix out(a.rows(), b.cols());
    std::vector<float> acc(b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        std::fill(acc.begin(), acc.end(), 0.0f);
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const float aik = a(i, k);
            auto brow = b.row(k);
            for (std::size_t j = 0; j < b.cols(); ++j) acc[j] += aik * brow[j];
        }
        std::copy(acc.begin(), acc.end(), out.row(i).begin());
    }
    return out;
}

/// In-place max-subtracted softmax over one row.
inline void softmax_inplace(std::span<float> row) {
    if (row.empty()) return;
    const float mx = *std::max_element(row.begin(), row.end());
    float sum = 0.0f;
    for (float& x : row) {
        x = std::exp(x - mx);
        sum += x;
    }
    const float inv = 1.0f / sum;
    for (float& x : row) x *= inv;
}

inline Matrix softmax_rows(const Matrix& m) {
    Matrix out = m;
    for (std::size_t r = 0; r < out.rows(); ++r) softmax_inplace(out.row(r));
    return out;
}

enum class PoolMode { avg, max };

/// Same-length 1-D pooling. Windows are centered and truncated at the
/// edges; avg divides by the truncated window length.
inline std::vector<float> pool_1d(std::span<const float> scores, std::size_t kernel, PoolMode mode) {
    if (kernel == 0 || kernel % 2 == 0) {
        throw ParameterError("pool kernel must be odd and >= 1, got " + std::to_string(kernel));
    }
    if (kernel > scores.size()) {
        throw ParameterError("pool kernel " + std::to_string(kernel) + " exceeds length " +
                             std::to_string(scores.size()));
    }
    const std::size_t n = scores.size();
    const std::size_t half = kernel / 2;
    std::vector<float> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t lo = i >= half ? i - half : 0;
        const std::size_t hi = std::min(n, i + half + 1);
        if (mode == PoolMode::max) {
            out[i] = *std::max_element(scores.begin() + lo, scores.begin() + hi);
        } else {
            double acc = 0.0;
            for (std::size_t j = lo; j < hi; ++j) acc += scores[j];
            out[i] = static_cast<float>(acc / static_cast<double>(hi - lo));
        }
    }
    return out;
}

}  // namespace kvfunnel
