#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "vd/rng.hpp"
#include "vd/tensor.hpp"

namespace vd {

// Semi-orthogonal projection matrix [rows x cols] from a seeded Gaussian
// draw, orthonormalized along the shorter side with modified Gram-Schmidt.
// rows <= cols gives orthonormal rows; rows > cols orthonormal columns.
template <typename T>
Tensor<T> random_semi_orthogonal(int64_t rows, int64_t cols, uint64_t seed) {
    Rng rng(seed);
    const int64_t k = std::min(rows, cols);
    const int64_t d = std::max(rows, cols);
    // k vectors of length d, orthonormalized.
    std::vector<std::vector<double>> v(k, std::vector<double>(d));
    for (auto& row : v)
        for (auto& x : row) x = rng.normal();
    for (int64_t i = 0; i < k; ++i) {
        for (int64_t j = 0; j < i; ++j) {
            double dot = 0;
            for (int64_t t = 0; t < d; ++t) dot += v[i][t] * v[j][t];
            for (int64_t t = 0; t < d; ++t) v[i][t] -= dot * v[j][t];
        }
        double nrm = 0;
        for (int64_t t = 0; t < d; ++t) nrm += v[i][t] * v[i][t];
        nrm = std::sqrt(nrm);
        if (nrm < 1e-12) {  // astronomically unlikely; re-draw the vector
            for (auto& x : v[i]) x = rng.normal() + 1.0;
            --i;
            continue;
        }
        for (int64_t t = 0; t < d; ++t) v[i][t] /= nrm;
    }
    Tensor<T> m({rows, cols});
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t c = 0; c < cols; ++c)
            m.data[static_cast<size_t>(r * cols + c)] =
                static_cast<T>(rows <= cols ? v[r][c] : v[c][r]);
    return m;
}

// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
// Returns eigenvalues in `evals` (descending) and matching eigenvectors as
// rows of the returned matrix. Deterministic for fixed input.
inline void jacobi_eigh(std::vector<double> a, int64_t n, std::vector<double>& evals,
                        std::vector<double>& evecs_rows) {
    std::vector<double> v(static_cast<size_t>(n * n), 0.0);
    for (int64_t i = 0; i < n; ++i) v[static_cast<size_t>(i * n + i)] = 1.0;
    auto A = [&](int64_t r, int64_t c) -> double& { return a[static_cast<size_t>(r * n + c)]; };
    auto V = [&](int64_t r, int64_t c) -> double& { return v[static_cast<size_t>(r * n + c)]; };

    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0;
        for (int64_t p = 0; p < n; ++p)
            for (int64_t q = p + 1; q < n; ++q) off += A(p, q) * A(p, q);
        if (off < 1e-26) break;
        for (int64_t p = 0; p < n; ++p) {
            for (int64_t q = p + 1; q < n; ++q) {
                const double apq = A(p, q);
                if (std::abs(apq) < 1e-300) continue;
                const double theta = (A(q, q) - A(p, p)) / (2.0 * apq);
                const double t = (theta >= 0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (int64_t k = 0; k < n; ++k) {
                    const double akp = A(k, p), akq = A(k, q);
                    A(k, p) = c * akp - s * akq;
                    A(k, q) = s * akp + c * akq;
                }
                for (int64_t k = 0; k < n; ++k) {
                    const double apk = A(p, k), aqk = A(q, k);
                    A(p, k) = c * apk - s * aqk;
                    A(q, k) = s * apk + c * aqk;
                }
                for (int64_t k = 0; k < n; ++k) {
                    const double vkp = V(k, p), vkq = V(k, q);
                    V(k, p) = c * vkp - s * vkq;
                    V(k, q) = s * vkp + c * vkq;
                }
            }
        }
    }
    std::vector<int64_t> order(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
    std::stable_sort(order.begin(), order.end(), [&](int64_t x, int64_t y) {
        return a[static_cast<size_t>(x * n + x)] > a[static_cast<size_t>(y * n + y)];
    });
    evals.assign(static_cast<size_t>(n), 0.0);
    evecs_rows.assign(static_cast<size_t>(n * n), 0.0);
    for (int64_t r = 0; r < n; ++r) {
        const int64_t src = order[static_cast<size_t>(r)];
        evals[static_cast<size_t>(r)] = a[static_cast<size_t>(src * n + src)];
        for (int64_t k = 0; k < n; ++k)
            evecs_rows[static_cast<size_t>(r * n + k)] = V(k, src);
    }
    // Sign convention: largest-magnitude entry positive, for determinism.
    for (int64_t r = 0; r < n; ++r) {
        double best = 0;
        int64_t bi = 0;
        for (int64_t k = 0; k < n; ++k) {
            const double x = evecs_rows[static_cast<size_t>(r * n + k)];
            if (std::abs(x) > std::abs(best)) {
                best = x;
                bi = k;
            }
        }
        (void)bi;
        if (best < 0)
            for (int64_t k = 0; k < n; ++k) evecs_rows[static_cast<size_t>(r * n + k)] *= -1.0;
    }
}

}  // namespace vd
