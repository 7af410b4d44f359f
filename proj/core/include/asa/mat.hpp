#pragma once

#include <algorithm>
#include <cassert>
#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

#include "asa/rng.hpp"

namespace asa {

// Dense row-major matrix of doubles. All model math runs in 64-bit so that
// traces, checkpoints and gradient checks are exactly reproducible.
struct Mat {
    int rows = 0;
    int cols = 0;
    std::vector<double> d;

    Mat() = default;
    Mat(int r, int c) : rows(r), cols(c), d(static_cast<std::size_t>(r) * c, 0.0) {}

    double& operator()(int r, int c) { return d[static_cast<std::size_t>(r) * cols + c]; }
    double operator()(int r, int c) const { return d[static_cast<std::size_t>(r) * cols + c]; }

    double* row(int r) { return d.data() + static_cast<std::size_t>(r) * cols; }
    const double* row(int r) const { return d.data() + static_cast<std::size_t>(r) * cols; }

    std::size_t size() const { return d.size(); }
    bool empty() const { return d.empty(); }
    bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }

    void zero() { std::fill(d.begin(), d.end(), 0.0); }

    void resize(int r, int c) {
        rows = r;
        cols = c;
        d.assign(static_cast<std::size_t>(r) * c, 0.0);
    }

    void fill_normal(Rng& rng, double mean, double stddev) {
        for (auto& x : d) x = rng.normal(mean, stddev);
    }
};

inline void require_shape(const Mat& m, int r, int c, const std::string& what) {
    if (m.rows != r || m.cols != c) {
        throw std::invalid_argument(what + ": expected " + std::to_string(r) + "x" +
                                    std::to_string(c) + ", got " + std::to_string(m.rows) +
                                    "x" + std::to_string(m.cols));
    }
}

// out = A * B
inline void matmul(const Mat& a, const Mat& b, Mat& out) {
    assert(a.cols == b.rows);
    out.resize(a.rows, b.cols);
    for (int i = 0; i < a.rows; ++i) {
        const double* ai = a.row(i);
        double* oi = out.row(i);
        for (int k = 0; k < a.cols; ++k) {
            const double aik = ai[k];
            if (aik == 0.0) continue;
            const double* bk = b.row(k);
            for (int j = 0; j < b.cols; ++j) oi[j] += aik * bk[j];
        }
    }
}

// out = A^T * B
inline void matmul_tn(const Mat& a, const Mat& b, Mat& out) {
    assert(a.rows == b.rows);
    out.resize(a.cols, b.cols);
    for (int k = 0; k < a.rows; ++k) {
        const double* ak = a.row(k);
        const double* bk = b.row(k);
        for (int i = 0; i < a.cols; ++i) {
            const double aki = ak[i];
            if (aki == 0.0) continue;
            double* oi = out.row(i);
            for (int j = 0; j < b.cols; ++j) oi[j] += aki * bk[j];
        }
    }
}

// out = A * B^T
inline void matmul_nt(const Mat& a, const Mat& b, Mat& out) {
    assert(a.cols == b.cols);
    out.resize(a.rows, b.rows);
    for (int i = 0; i < a.rows; ++i) {
        const double* ai = a.row(i);
        double* oi = out.row(i);
        for (int j = 0; j < b.rows; ++j) {
            const double* bj = b.row(j);
            double acc = 0.0;
            for (int k = 0; k < a.cols; ++k) acc += ai[k] * bj[k];
            oi[j] = acc;
        }
    }
}

// out += A * B
inline void matmul_acc(const Mat& a, const Mat& b, Mat& out) {
    assert(a.cols == b.rows && out.rows == a.rows && out.cols == b.cols);
    for (int i = 0; i < a.rows; ++i) {
        const double* ai = a.row(i);
        double* oi = out.row(i);
        for (int k = 0; k < a.cols; ++k) {
            const double aik = ai[k];
            if (aik == 0.0) continue;
            const double* bk = b.row(k);
            for (int j = 0; j < b.cols; ++j) oi[j] += aik * bk[j];
        }
    }
}

// out += A^T * B (gradient accumulation form)
inline void matmul_tn_acc(const Mat& a, const Mat& b, Mat& out) {
    assert(a.rows == b.rows && out.rows == a.cols && out.cols == b.cols);
    for (int k = 0; k < a.rows; ++k) {
        const double* ak = a.row(k);
        const double* bk = b.row(k);
        for (int i = 0; i < a.cols; ++i) {
            const double aki = ak[i];
            if (aki == 0.0) continue;
            double* oi = out.row(i);
            for (int j = 0; j < b.cols; ++j) oi[j] += aki * bk[j];
        }
    }
}

inline void add_row_inplace(Mat& m, int r, const double* v) {
    double* p = m.row(r);
    for (int j = 0; j < m.cols; ++j) p[j] += v[j];
}

inline std::uint64_t hash_mat(const Mat& m, std::uint64_t h = 0xcbf29ce484222325ULL) {
    h = fnv1a64(&m.rows, sizeof(m.rows), h);
    h = fnv1a64(&m.cols, sizeof(m.cols), h);
    if (!m.d.empty()) h = fnv1a64(m.d.data(), m.d.size() * sizeof(double), h);
    return h;
}

}  // namespace asa
