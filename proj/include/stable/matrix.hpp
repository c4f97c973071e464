#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "stable/common.hpp"

namespace stable {

// Dense row-major 2-D array of 64-bit reals. All model weights, adapter
// factors and activations use this type; 1-D quantities are stored as 1 x n.
struct Matrix {
    int rows = 0;
    int cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c, 0.0) {}

    double& operator()(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
    double operator()(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }

    size_t size() const { return data.size(); }

    bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }

    bool all_finite() const {
        for (double v : data) {
            if (!std::isfinite(v)) return false;
        }
        return true;
    }
};

// out = a * b, shapes (m,k) x (k,n)
inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols != b.rows) fail(ErrorKind::shape, "matmul: inner dimensions disagree");
    Matrix out(a.rows, b.cols);
    for (int i = 0; i < a.rows; ++i) {
        for (int k = 0; k < a.cols; ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) continue;
            const double* brow = &b.data[static_cast<size_t>(k) * b.cols];
            double* orow = &out.data[static_cast<size_t>(i) * out.cols];
            for (int j = 0; j < b.cols; ++j) orow[j] += aik * brow[j];
        }
    }
    return out;
}

// out = a * b^T, shapes (m,k) x (n,k)
inline Matrix matmul_bt(const Matrix& a, const Matrix& b) {
    if (a.cols != b.cols) fail(ErrorKind::shape, "matmul_bt: inner dimensions disagree");
    Matrix out(a.rows, b.rows);
    for (int i = 0; i < a.rows; ++i) {
        const double* arow = &a.data[static_cast<size_t>(i) * a.cols];
        for (int j = 0; j < b.rows; ++j) {
            const double* brow = &b.data[static_cast<size_t>(j) * b.cols];
            double acc = 0.0;
            for (int k = 0; k < a.cols; ++k) acc += arow[k] * brow[k];
            out(i, j) = acc;
        }
    }
    return out;
}

// out = a^T * b, shapes (k,m) x (k,n)
inline Matrix matmul_at(const Matrix& a, const Matrix& b) {
    if (a.rows != b.rows) fail(ErrorKind::shape, "matmul_at: inner dimensions disagree");
    Matrix out(a.cols, b.cols);
    for (int k = 0; k < a.rows; ++k) {
        const double* arow = &a.data[static_cast<size_t>(k) * a.cols];
        const double* brow = &b.data[static_cast<size_t>(k) * b.cols];
        for (int i = 0; i < a.cols; ++i) {
            const double aki = arow[i];
            if (aki == 0.0) continue;
            double* orow = &out.data[static_cast<size_t>(i) * out.cols];
            for (int j = 0; j < b.cols; ++j) orow[j] += aki * brow[j];
        }
    }
    return out;
}

inline void add_inplace(Matrix& a, const Matrix& b, double scale = 1.0) {
    if (!a.same_shape(b)) fail(ErrorKind::shape, "add: shape mismatch");
    for (size_t i = 0; i < a.data.size(); ++i) a.data[i] += scale * b.data[i];
}

inline Matrix scaled(const Matrix& a, double s) {
    Matrix out = a;
    for (double& v : out.data) v *= s;
    return out;
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) fail(ErrorKind::shape, "max_abs_diff: shape mismatch");
    double m = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        const double d = std::fabs(a.data[i] - b.data[i]);
        if (d > m) m = d;
    }
    return m;
}

}  // namespace stable
