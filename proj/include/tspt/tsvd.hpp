// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>
#include <Eigen/SVD>

#include <algorithm>
#include <utility>
#include <vector>

#include "tspt/tensor3.hpp"

namespace tspt {

/// Full t-SVD factors of an n1 x n2 x n3 tensor: A = U * S * V^T with
/// orthogonal U (n1 x n1 x n3), V (n2 x n2 x n3) and f-diagonal S
/// (n1 x n2 x n3).
struct TSVDFactors {
    Tensor3 U;
    Tensor3 S;
    Tensor3 V;
};

/// Rank-r truncation: U n1 x r x n3, S r x r x n3 (f-diagonal),
/// V n2 x r x n3. Orthonormal lateral slices hold at construction time
/// only; training may destroy them.
struct LowRankFactors {
    Tensor3 U;
    Tensor3 S;
    Tensor3 V;
    int r = 0;
};

/// First `cols` lateral slices starting at column col0, over all frontal
/// slices.
inline Tensor3 lateral_cols(const Tensor3& t, int col0, int cols) {
    if (col0 < 0 || cols < 1 || col0 + cols > t.n2)
        throw InvalidArgument("lateral_cols: range [" + std::to_string(col0) +
                              ", " + std::to_string(col0 + cols) +
                              ") out of bounds for " + t.shape());
    Tensor3 out(t.n1, cols, t.n3);
    for (int k = 0; k < t.n3; ++k)
        out.slice(k) = t.slice(k).middleCols(col0, cols);
    return out;
}

/// Rectangular sub-block (same rows/cols in every frontal slice).
inline Tensor3 sub_block(const Tensor3& t, int row0, int rows, int col0,
                         int cols) {
    if (row0 < 0 || rows < 1 || row0 + rows > t.n1 || col0 < 0 || cols < 1 ||
        col0 + cols > t.n2)
        throw InvalidArgument("sub_block: range out of bounds for " + t.shape());
    Tensor3 out(rows, cols, t.n3);
    for (int k = 0; k < t.n3; ++k)
        out.slice(k) = t.slice(k).block(row0, col0, rows, cols);
    return out;
}

namespace detail {

/// Inverse mode-3 FFT of a factor spectrum, with the residue bound taken
/// relative to the spectrum's own scale (unitary factors have norm
/// sqrt(n*n3) regardless of the decomposed tensor's magnitude).
inline Tensor3 factor_ifft(const ComplexTensor3& f, const char* which) {
    double max_imag = 0.0;
    Tensor3 out = ifft_mode3_raw(f, &max_imag);
    const double bound = 1e-9 * std::max(f.fnorm(), 1e-300);
    if (max_imag > bound)
        throw NumericError(std::string("tsvd: factor ") + which +
                           " has imaginary residue " + std::to_string(max_imag) +
                           " above bound " + std::to_string(bound));
    return out;
}

}  // namespace detail

/// t-SVD via the Fourier route: per-slice matrix SVDs of the mode-3
/// spectrum, conjugate symmetry enforced explicitly so the inverse
/// transform is real. Singular values are sorted descending within every
/// Fourier slice; self-conjugate slices (DC, and Nyquist when n3 is even)
/// get a real SVD so their factors stay real.
inline TSVDFactors tsvd(const Tensor3& a) {
    detail::require_nonempty(a.n1, a.n2, a.n3, "tsvd");
    const int n1 = a.n1, n2 = a.n2, n3 = a.n3;
    const int m = std::min(n1, n2);

    const ComplexTensor3 fa = fft_mode3(a);
    ComplexTensor3 fu(n1, n1, n3), fv(n2, n2, n3);
    Eigen::MatrixXd sing(m, n3);

    const int computed = n3 / 2 + 1;  // remaining slices are mirrored
    detail::parallel_for(computed, [&](int k) {
        const bool self_conjugate = (k == 0) || (2 * k == n3);
        if (self_conjugate) {
            Eigen::MatrixXd real_slice = fa.slice(k).real();
            Eigen::JacobiSVD<Eigen::MatrixXd> svd(
                real_slice, Eigen::ComputeFullU | Eigen::ComputeFullV);
            if (svd.info() != Eigen::Success)
                throw DecompositionError("tsvd: SVD did not converge", k);
            fu.slice(k) = svd.matrixU().cast<std::complex<double>>();
            fv.slice(k) = svd.matrixV().cast<std::complex<double>>();
            sing.col(k) = svd.singularValues();
        } else {
            Eigen::MatrixXcd slice = fa.slice(k);
            Eigen::JacobiSVD<Eigen::MatrixXcd> svd(
                slice, Eigen::ComputeFullU | Eigen::ComputeFullV);
            if (svd.info() != Eigen::Success)
                throw DecompositionError("tsvd: SVD did not converge", k);
            fu.slice(k) = svd.matrixU();
            fv.slice(k) = svd.matrixV();
            sing.col(k) = svd.singularValues();
        }
    });
    for (int k = computed; k < n3; ++k) {
        fu.slice(k) = fu.slice(n3 - k).conjugate();
        fv.slice(k) = fv.slice(n3 - k).conjugate();
        sing.col(k) = sing.col(n3 - k);
    }

    TSVDFactors out;
    out.U = detail::factor_ifft(fu, "U");
    out.V = detail::factor_ifft(fv, "V");

    // S is assembled tube by tube so off-diagonal entries are exactly zero.
    out.S = Tensor3(n1, n2, n3);
    if (n3 == 1) {
        for (int j = 0; j < m; ++j) out.S(j, j, 0) = sing(j, 0);
    } else {
        Eigen::FFT<double> fft;
        std::vector<std::complex<double>> spec(n3), inv(n3);
        for (int j = 0; j < m; ++j) {
            for (int k = 0; k < n3; ++k) spec[k] = {sing(j, k), 0.0};
            fft.inv(inv, spec);
            for (int k = 0; k < n3; ++k) out.S(j, j, k) = inv[k].real();
        }
    }
    return out;
}

/// Splits full factors at rank r into the principal triple (leading r
/// lateral slices of U and V, leading r x r block of S) and the residual
/// tensor built from the complementary slices, so principal + residual
/// reproduces the decomposed tensor.
inline std::pair<LowRankFactors, Tensor3> truncate_split(const TSVDFactors& f,
                                                         int r) {
    const int n1 = f.U.n1, n2 = f.V.n1, n3 = f.S.n3;
    const int m = std::min(n1, n2);
    if (r < 1 || r > m)
        throw InvalidArgument("truncate_split: rank " + std::to_string(r) +
                              " out of range [1, " + std::to_string(m) + "]");

    LowRankFactors principal;
    principal.r = r;
    principal.U = lateral_cols(f.U, 0, r);
    principal.S = sub_block(f.S, 0, r, 0, r);
    principal.V = lateral_cols(f.V, 0, r);

    Tensor3 residual;
    if (r == m) {
        residual = Tensor3(n1, n2, n3);  // zero: nothing was discarded
    } else {
        Tensor3 u_tail = lateral_cols(f.U, r, n1 - r);
        Tensor3 s_tail = sub_block(f.S, r, n1 - r, r, n2 - r);
        Tensor3 v_tail = lateral_cols(f.V, r, n2 - r);
        residual = tprod(tprod(u_tail, s_tail), ttranspose(v_tail));
    }
    return {std::move(principal), std::move(residual)};
}

/// U_r * S_r * V_r^T.
inline Tensor3 reconstruct(const LowRankFactors& p) {
    if (p.U.n2 != p.S.n1 || p.S.n2 != p.V.n2 || p.U.n3 != p.S.n3 ||
        p.S.n3 != p.V.n3)
        throw InvalidArgument("reconstruct: factor shapes not conformable: U=" +
                              p.U.shape() + " S=" + p.S.shape() +
                              " V=" + p.V.shape());
    return tprod(tprod(p.U, p.S), ttranspose(p.V));
}

/// Largest per-Fourier-slice matrix rank, counting singular values above
/// tol times the globally largest one.
inline int tubal_rank(const Tensor3& a, double tol = 1e-9) {
    if (tol < 0.0)
        throw InvalidArgument("tubal_rank: tol must be nonnegative");
    detail::require_nonempty(a.n1, a.n2, a.n3, "tubal_rank");
    const ComplexTensor3 fa = fft_mode3(a);
    const int m = std::min(a.n1, a.n2);
    Eigen::MatrixXd sing(m, a.n3);
    detail::parallel_for(a.n3, [&](int k) {
        Eigen::MatrixXcd slice = fa.slice(k);
        Eigen::JacobiSVD<Eigen::MatrixXcd> svd(slice);
        sing.col(k) = svd.singularValues();
    });
    const double sigma_max = sing.maxCoeff();
    int rank = 0;
    for (int k = 0; k < a.n3; ++k) {
        int count = 0;
        for (int j = 0; j < m; ++j)
            if (sing(j, k) > tol * sigma_max) ++count;
        rank = std::max(rank, count);
    }
    return rank;
}

}  // namespace tspt
