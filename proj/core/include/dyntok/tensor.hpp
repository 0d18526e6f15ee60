// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <vector>

namespace dyntok {

// Dense row-major 2D tensor of doubles. Vectors are represented explicitly as
// (n x 1) columns or (1 x n) rows; every op states which it expects.
struct Tensor {
    int rows = 0;
    int cols = 0;
    std::vector<double> v;

    Tensor() = default;
    Tensor(int r, int c) : rows(r), cols(c), v(static_cast<size_t>(r) * c, 0.0) {}

    static Tensor zeros(int r, int c) { return Tensor(r, c); }

    static Tensor full(int r, int c, double x) {
        Tensor t(r, c);
        std::fill(t.v.begin(), t.v.end(), x);
        return t;
    }

    static Tensor scalar(double x) {
        Tensor t(1, 1);
        t.v[0] = x;
        return t;
    }

    static Tensor row_vec(std::initializer_list<double> xs) {
        Tensor t(1, static_cast<int>(xs.size()));
        std::copy(xs.begin(), xs.end(), t.v.begin());
        return t;
    }

    static Tensor row_vec(const std::vector<double>& xs) {
        Tensor t(1, static_cast<int>(xs.size()));
        std::copy(xs.begin(), xs.end(), t.v.begin());
        return t;
    }

    static Tensor col_vec(const std::vector<double>& xs) {
        Tensor t(static_cast<int>(xs.size()), 1);
        std::copy(xs.begin(), xs.end(), t.v.begin());
        return t;
    }

    double& at(int r, int c) { return v[static_cast<size_t>(r) * cols + c]; }
    double at(int r, int c) const { return v[static_cast<size_t>(r) * cols + c]; }

    double* row(int r) { return v.data() + static_cast<size_t>(r) * cols; }
    const double* row(int r) const { return v.data() + static_cast<size_t>(r) * cols; }

    int64_t numel() const { return static_cast<int64_t>(rows) * cols; }

    bool same_shape(const Tensor& o) const { return rows == o.rows && cols == o.cols; }

    bool all_finite() const {
        for (double x : v)
            if (!std::isfinite(x)) return false;
        return true;
    }

    double item() const { return v[0]; }
};

}  // namespace dyntok
