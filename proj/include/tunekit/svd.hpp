#pragma once

// Truncated SVD by seeded subspace iteration. Deterministic for a fixed seed,
// computed internally in double regardless of the tensor's precision. The
// iteration refines the left subspace, a small Rayleigh-Ritz problem rotates
// it onto singular directions, and right vectors come from back-multiplying.

#include <cmath>
#include <vector>

#include "tunekit/common.hpp"
#include "tunekit/tensor.hpp"

namespace tunekit {

template <class T>
struct TruncatedSvd {
    Tensor<T> u;  // [m, rank]
    Tensor<T> s;  // [rank], nonincreasing, nonnegative
    Tensor<T> v;  // [n, rank]
    bool converged = true;
    int iterations = 0;
};

namespace detail {

// columns of q (m x r, column-major here) orthonormalized in place by
// modified Gram-Schmidt with one re-orthogonalization pass; collapsed
// columns are replaced by random directions so the basis keeps full rank
inline void orthonormalize_cols(std::vector<std::vector<double>>& q, Rng& rng,
                                std::vector<double>* rdiag = nullptr) {
    const int r = int(q.size());
    const int m = int(q[0].size());
    for (int i = 0; i < r; ++i) {
        for (int pass = 0; pass < 2; ++pass)
            for (int j = 0; j < i; ++j) {
                double dot = 0;
                for (int t = 0; t < m; ++t) dot += q[i][t] * q[j][t];
                for (int t = 0; t < m; ++t) q[i][t] -= dot * q[j][t];
            }
        double norm = 0;
        for (int t = 0; t < m; ++t) norm += q[i][t] * q[i][t];
        norm = std::sqrt(norm);
        if (rdiag) (*rdiag)[i] = norm;
        if (norm < 1e-150) {
            // degenerate direction, restart it from noise
            for (int t = 0; t < m; ++t) q[i][t] = rng.normal();
            for (int j = 0; j < i; ++j) {
                double dot = 0;
                for (int t = 0; t < m; ++t) dot += q[i][t] * q[j][t];
                for (int t = 0; t < m; ++t) q[i][t] -= dot * q[j][t];
            }
            norm = 0;
            for (int t = 0; t < m; ++t) norm += q[i][t] * q[i][t];
            norm = std::sqrt(norm);
        }
        for (int t = 0; t < m; ++t) q[i][t] /= norm;
    }
}

// cyclic Jacobi for a small symmetric matrix; returns eigenvectors as columns of v
inline void jacobi_eigen_sym(std::vector<double>& a, int n, std::vector<double>& v) {
    v.assign(size_t(n) * n, 0.0);
    for (int i = 0; i < n; ++i) v[size_t(i) * n + i] = 1.0;
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0;
        for (int i = 0; i < n; ++i)
            for (int j = i + 1; j < n; ++j) off += a[size_t(i) * n + j] * a[size_t(i) * n + j];
        if (off < 1e-300) break;
        for (int p = 0; p < n - 1; ++p)
            for (int q = p + 1; q < n; ++q) {
                const double apq = a[size_t(p) * n + q];
                if (std::abs(apq) < 1e-300) continue;
                const double app = a[size_t(p) * n + p], aqq = a[size_t(q) * n + q];
                const double theta = (aqq - app) / (2.0 * apq);
                const double t = (theta >= 0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
                for (int k = 0; k < n; ++k) {
                    const double akp = a[size_t(k) * n + p], akq = a[size_t(k) * n + q];
                    a[size_t(k) * n + p] = c * akp - s * akq;
                    a[size_t(k) * n + q] = s * akp + c * akq;
                }
                for (int k = 0; k < n; ++k) {
                    const double apk = a[size_t(p) * n + k], aqk = a[size_t(q) * n + k];
                    a[size_t(p) * n + k] = c * apk - s * aqk;
                    a[size_t(q) * n + k] = s * apk + c * aqk;
                }
                for (int k = 0; k < n; ++k) {
                    const double vkp = v[size_t(k) * n + p], vkq = v[size_t(k) * n + q];
                    v[size_t(k) * n + p] = c * vkp - s * vkq;
                    v[size_t(k) * n + q] = s * vkp + c * vkq;
                }
            }
    }
}

}  // namespace detail

template <class T>
TruncatedSvd<T> truncated_svd(const Tensor<T>& mat, int rank, double tol = 1e-10,
                              uint64_t seed = 0, int max_iters = 500) {
    if (mat.ndim() != 2)
        fail("truncated_svd: expected a matrix, got " + detail::shape_str(mat.shape()));
    const int m = mat.dim(0), n = mat.dim(1);
    if (rank < 1) fail("truncated_svd: rank must be at least 1");
    if (rank > std::min(m, n))
        fail("truncated_svd: rank " + std::to_string(rank) + " exceeds min dimension " +
             std::to_string(std::min(m, n)) + " of " + detail::shape_str(mat.shape()));
    for (T x : mat.data())
        if (!std::isfinite(double(x))) fail("truncated_svd: non-finite input");

    std::vector<double> a(mat.numel());
    for (size_t i = 0; i < a.size(); ++i) a[i] = double(mat.data()[i]);

    Rng rng(mix_seed(seed, 0x5fd7));
    auto mat_vec = [&](const std::vector<double>& x, std::vector<double>& y) {
        y.assign(size_t(m), 0.0);
        for (int i = 0; i < m; ++i) {
            double acc = 0;
            const double* row = a.data() + size_t(i) * n;
            for (int j = 0; j < n; ++j) acc += row[j] * x[size_t(j)];
            y[size_t(i)] = acc;
        }
    };
    auto mat_tvec = [&](const std::vector<double>& x, std::vector<double>& y) {
        y.assign(size_t(n), 0.0);
        for (int i = 0; i < m; ++i) {
            const double* row = a.data() + size_t(i) * n;
            const double xi = x[size_t(i)];
            for (int j = 0; j < n; ++j) y[size_t(j)] += row[j] * xi;
        }
    };

    // column-major working sets
    std::vector<std::vector<double>> vcols(rank), ucols(rank);
    for (int i = 0; i < rank; ++i) {
        vcols[i].resize(size_t(n));
        for (double& x : vcols[i]) x = rng.normal();
    }
    detail::orthonormalize_cols(vcols, rng);

    std::vector<double> sigma_prev(rank, 0.0), rdiag(rank, 0.0);
    bool converged = false;
    int iters = 0;
    while (iters < max_iters) {
        ++iters;
        for (int i = 0; i < rank; ++i) mat_vec(vcols[i], ucols[i]);
        detail::orthonormalize_cols(ucols, rng);
        for (int i = 0; i < rank; ++i) mat_tvec(ucols[i], vcols[i]);
        detail::orthonormalize_cols(vcols, rng, &rdiag);
        double sig_max = 0, delta = 0;
        for (int i = 0; i < rank; ++i) sig_max = std::max(sig_max, rdiag[i]);
        for (int i = 0; i < rank; ++i) delta = std::max(delta, std::abs(rdiag[i] - sigma_prev[i]));
        sigma_prev = rdiag;
        if (delta <= tol * (1.0 + sig_max)) {
            converged = true;
            break;
        }
    }
    if (!converged)
        log_warn("truncated_svd: no convergence after " + std::to_string(iters) +
                 " iterations, returning best iterate");

    // Rayleigh-Ritz on the left subspace: G = U^T M M^T U, rotate U by its
    // eigenvectors, recover sigma and V
    std::vector<std::vector<double>> bcols(rank);  // B^T columns: b_i = M^T u_i
    for (int i = 0; i < rank; ++i) mat_tvec(ucols[i], bcols[i]);
    std::vector<double> g(size_t(rank) * rank, 0.0);
    for (int i = 0; i < rank; ++i)
        for (int j = i; j < rank; ++j) {
            double dot = 0;
            for (int t = 0; t < n; ++t) dot += bcols[i][size_t(t)] * bcols[j][size_t(t)];
            g[size_t(i) * rank + j] = dot;
            g[size_t(j) * rank + i] = dot;
        }
    std::vector<double> evecs;
    detail::jacobi_eigen_sym(g, rank, evecs);
    std::vector<int> order(rank);
    for (int i = 0; i < rank; ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](int x, int y) {
        return g[size_t(x) * rank + x] > g[size_t(y) * rank + y];
    });

    TruncatedSvd<T> out;
    out.converged = converged;
    out.iterations = iters;
    out.u = Tensor<T>::zeros({m, rank});
    out.s = Tensor<T>::zeros({rank});
    out.v = Tensor<T>::zeros({n, rank});

    std::vector<std::vector<double>> final_v(rank);
    for (int c = 0; c < rank; ++c) {
        const int e = order[c];
        const double lambda = std::max(g[size_t(e) * rank + e], 0.0);
        const double sigma = std::sqrt(lambda);
        out.s.data()[c] = T(sigma);
        // u_c = U * evec_e
        std::vector<double> ucol(size_t(m), 0.0);
        for (int k = 0; k < rank; ++k) {
            const double w = evecs[size_t(k) * rank + e];
            for (int t = 0; t < m; ++t) ucol[size_t(t)] += w * ucols[k][size_t(t)];
        }
        for (int t = 0; t < m; ++t) out.u.data()[size_t(t) * rank + c] = T(ucol[size_t(t)]);
        // v_c = M^T u_c / sigma, or an orthonormal filler when sigma vanishes
        std::vector<double> vcol;
        if (sigma > 1e-150) {
            mat_tvec(ucol, vcol);
            for (double& x : vcol) x /= sigma;
        } else {
            vcol.assign(size_t(n), 0.0);
            for (double& x : vcol) x = rng.normal();
        }
        for (int prev = 0; prev < c; ++prev) {
            double dot = 0;
            for (int t = 0; t < n; ++t) dot += vcol[size_t(t)] * final_v[prev][size_t(t)];
            if (sigma > 1e-150) continue;  // already orthogonal up to rounding
            for (int t = 0; t < n; ++t) vcol[size_t(t)] -= dot * final_v[prev][size_t(t)];
        }
        if (sigma <= 1e-150) {
            double norm = 0;
            for (double x : vcol) norm += x * x;
            norm = std::sqrt(norm);
            if (norm > 0)
                for (double& x : vcol) x /= norm;
        }
        final_v[c] = vcol;
        for (int t = 0; t < n; ++t) out.v.data()[size_t(t) * rank + c] = T(vcol[size_t(t)]);
    }
    return out;
}

}  // namespace tunekit
