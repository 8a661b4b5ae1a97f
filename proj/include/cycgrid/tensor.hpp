#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <vector>

namespace cycgrid {

// Dense row-major tensor, rank 1 or 2, always 64-bit floats.
struct Tensor {
    std::vector<int> dims;
    std::vector<double> v;

    Tensor() = default;
    explicit Tensor(int n) : dims{n}, v(static_cast<size_t>(n), 0.0) {}
    Tensor(int r, int c) : dims{r, c}, v(static_cast<size_t>(r) * c, 0.0) {}

    int rank() const { return static_cast<int>(dims.size()); }
    int rows() const { return rank() == 2 ? dims[0] : 1; }
    int cols() const { return rank() == 2 ? dims[1] : (dims.empty() ? 0 : dims[0]); }
    size_t size() const { return v.size(); }

    double* row(int i) { return v.data() + static_cast<size_t>(i) * cols(); }
    const double* row(int i) const { return v.data() + static_cast<size_t>(i) * cols(); }

    double& at(int i, int j) { return v[static_cast<size_t>(i) * cols() + j]; }
    double at(int i, int j) const { return v[static_cast<size_t>(i) * cols() + j]; }

    void zero() { std::fill(v.begin(), v.end(), 0.0); }

    // reshape reusing capacity; newly grown elements are zero, retained ones
    // keep stale values (callers overwrite every extent they read)
    void ensure(int r, int c) {
        dims = {r, c};
        v.resize(static_cast<size_t>(r) * c);
    }
};

// c[0..n) += s * b[0..n)
inline void axpy(int n, double s, const double* b, double* c) {
    for (int j = 0; j < n; ++j) c[j] += s * b[j];
}

// fixed 4-lane reduction order: deterministic, and the independent partial
// sums break the FMA latency chain
inline double dot(int n, const double* a, const double* b) {
    double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
    int j = 0;
    for (; j + 4 <= n; j += 4) {
        s0 += a[j] * b[j];
        s1 += a[j + 1] * b[j + 1];
        s2 += a[j + 2] * b[j + 2];
        s3 += a[j + 3] * b[j + 3];
    }
    double s = (s0 + s1) + (s2 + s3);
    for (; j < n; ++j) s += a[j] * b[j];
    return s;
}

// C (m×n) = A (m×k) · B (k×n). Accumulation over k is sequential so the
// single-row and multi-row paths produce bit-identical results.
inline void gemm(const double* a, int m, int k, const double* b, int n, double* c) {
    for (int i = 0; i < m; ++i) {
        double* ci = c + static_cast<size_t>(i) * n;
        std::fill(ci, ci + n, 0.0);
        const double* ai = a + static_cast<size_t>(i) * k;
        for (int p = 0; p < k; ++p) axpy(n, ai[p], b + static_cast<size_t>(p) * n, ci);
    }
}

// C (m×n) += Aᵀ (m×k stored k×m) · B (k×n); used for weight gradients.
inline void gemm_at_b_acc(const double* a, int k, int m, const double* b, int n, double* c) {
    for (int p = 0; p < k; ++p) {
        const double* ap = a + static_cast<size_t>(p) * m;
        const double* bp = b + static_cast<size_t>(p) * n;
        for (int i = 0; i < m; ++i) axpy(n, ap[i], bp, c + static_cast<size_t>(i) * n);
    }
}

// C (m×k) += A (m×n) · Bᵀ (n×k stored k×n); used for input gradients.
inline void gemm_a_bt_acc(const double* a, int m, int n, const double* b, int k, double* c) {
    for (int i = 0; i < m; ++i) {
        const double* ai = a + static_cast<size_t>(i) * n;
        double* ci = c + static_cast<size_t>(i) * k;
        for (int j = 0; j < k; ++j) ci[j] += dot(n, ai, b + static_cast<size_t>(j) * n);
    }
}

// Runs fn(i) for i in [0, n) on a persistent worker pool. Work is split in
// fixed contiguous blocks; callers that need determinism accumulate into
// per-index or per-block buffers and reduce in index order.
void parallel_for(int n, int threads, const std::function<void(int)>& fn);

// Static block partition used by parallel_for: which block index i lands in,
// and how many blocks a given (n, threads) split produces.
int parallel_block_of(int index, int n, int threads);
int parallel_num_blocks(int n, int threads);

}  // namespace cycgrid
