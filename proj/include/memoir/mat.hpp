#pragma once

#include <cassert>
#include <cstddef>
#include <vector>

namespace memoir {

using Vec = std::vector<double>;

// Dense row-major matrix of doubles. Deliberately minimal: the model code
// spells out its own loops so the arithmetic order is explicit and
// reproducible.
struct Mat {
    int rows = 0;
    int cols = 0;
    std::vector<double> v;

    Mat() = default;
    Mat(int r, int c) : rows(r), cols(c), v(static_cast<size_t>(r) * c, 0.0) {}

    void resize(int r, int c) {
        rows = r;
        cols = c;
        v.assign(static_cast<size_t>(r) * c, 0.0);
    }
    void zero() { std::fill(v.begin(), v.end(), 0.0); }

    double* row(int r) { return v.data() + static_cast<size_t>(r) * cols; }
    const double* row(int r) const { return v.data() + static_cast<size_t>(r) * cols; }

    double& at(int r, int c) { return v[static_cast<size_t>(r) * cols + c]; }
    double at(int r, int c) const { return v[static_cast<size_t>(r) * cols + c]; }

    size_t size() const { return v.size(); }

    bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }
};

// out[0..n) += a[0..n)
inline void vec_add_inplace(double* out, const double* a, int n) {
    for (int i = 0; i < n; ++i) out[i] += a[i];
}

// y = M x  (M: rows x cols, x: cols, y: rows)
inline void matvec(const Mat& m, const double* x, double* y) {
    for (int r = 0; r < m.rows; ++r) {
        const double* w = m.row(r);
        double acc = 0.0;
        for (int c = 0; c < m.cols; ++c) acc += w[c] * x[c];
        y[r] = acc;
    }
}

// y += M^T g  (scatter of a row gradient through M)
inline void matvec_transposed_add(const Mat& m, const double* g, double* y) {
    for (int r = 0; r < m.rows; ++r) {
        const double* w = m.row(r);
        const double gr = g[r];
        for (int c = 0; c < m.cols; ++c) y[c] += w[c] * gr;
    }
}

}  // namespace memoir
