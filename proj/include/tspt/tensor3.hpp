// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>
#include <unsupported/Eigen/FFT>

#include <atomic>
#include <cmath>
#include <complex>
#include <cstdlib>
#include <exception>
#include <string>
#include <thread>
#include <vector>

#include "tspt/errors.hpp"

namespace tspt {

using RowMatrixXd =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMatrixXcd = Eigen::Matrix<std::complex<double>, Eigen::Dynamic,
                                   Eigen::Dynamic, Eigen::RowMajor>;

namespace detail {

inline std::string shape_str(int n1, int n2, int n3) {
    return std::to_string(n1) + "x" + std::to_string(n2) + "x" +
           std::to_string(n3);
}

/// Worker cap for per-slice parallelism. TSPT_THREADS caps it; absent
/// means sequential.
inline int max_threads() {
    static const int n = [] {
        const char* env = std::getenv("TSPT_THREADS");
        if (env == nullptr) return 1;
        int v = std::atoi(env);
        return v < 1 ? 1 : v;
    }();
    return n;
}

/// Runs body(i) for i in [0, count). Bodies must write disjoint state so
/// the result is independent of the worker count.
template <typename F>
void parallel_for(int count, F&& body) {
    const int workers = std::min(max_threads(), count);
    if (workers <= 1) {
        for (int i = 0; i < count; ++i) body(i);
        return;
    }
    std::atomic<int> next{0};
    std::exception_ptr eptr;
    std::atomic<bool> failed{false};
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(workers));
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            for (;;) {
                const int i = next.fetch_add(1);
                if (i >= count || failed.load()) return;
                try {
                    body(i);
                } catch (...) {
                    if (!failed.exchange(true)) eptr = std::current_exception();
                    return;
                }
            }
        });
    }
    for (auto& t : pool) t.join();
    if (failed.load()) std::rethrow_exception(eptr);
}

}  // namespace detail

/// Dense real third-order tensor. Frontal slice k is the n1 x n2 matrix
/// A(:,:,k); entry (i,j,k) sits at offset k*n1*n2 + i*n2 + j (row-major
/// slices, third index slowest).
struct Tensor3 {
    int n1 = 0;
    int n2 = 0;
    int n3 = 0;
    std::vector<double> data;

    Tensor3() = default;
    Tensor3(int rows, int cols, int slices) : n1(rows), n2(cols), n3(slices) {
        if (rows <= 0 || cols <= 0 || slices <= 0)
            throw InvalidArgument("Tensor3: dimensions must be positive, got " +
                                  detail::shape_str(rows, cols, slices));
        data.assign(static_cast<std::size_t>(n1) * n2 * n3, 0.0);
    }

    std::size_t size() const { return data.size(); }
    std::string shape() const { return detail::shape_str(n1, n2, n3); }

    double& operator()(int i, int j, int k) {
        return data[static_cast<std::size_t>(k) * n1 * n2 +
                    static_cast<std::size_t>(i) * n2 + j];
    }
    double operator()(int i, int j, int k) const {
        return data[static_cast<std::size_t>(k) * n1 * n2 +
                    static_cast<std::size_t>(i) * n2 + j];
    }

    Eigen::Map<RowMatrixXd> slice(int k) {
        return {data.data() + static_cast<std::size_t>(k) * n1 * n2, n1, n2};
    }
    Eigen::Map<const RowMatrixXd> slice(int k) const {
        return {data.data() + static_cast<std::size_t>(k) * n1 * n2, n1, n2};
    }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

/// Complex companion of Tensor3, same slice layout. Holds mode-3 spectra;
/// for the FFT of a real tensor, slice k and slice n3-k (0-based, k >= 1)
/// are complex conjugates.
struct ComplexTensor3 {
    int n1 = 0;
    int n2 = 0;
    int n3 = 0;
    std::vector<std::complex<double>> data;

    ComplexTensor3() = default;
    ComplexTensor3(int rows, int cols, int slices)
        : n1(rows), n2(cols), n3(slices) {
        if (rows <= 0 || cols <= 0 || slices <= 0)
            throw InvalidArgument(
                "ComplexTensor3: dimensions must be positive, got " +
                detail::shape_str(rows, cols, slices));
        data.assign(static_cast<std::size_t>(n1) * n2 * n3, {0.0, 0.0});
    }

    std::size_t size() const { return data.size(); }
    std::string shape() const { return detail::shape_str(n1, n2, n3); }

    std::complex<double>& operator()(int i, int j, int k) {
        return data[static_cast<std::size_t>(k) * n1 * n2 +
                    static_cast<std::size_t>(i) * n2 + j];
    }
    std::complex<double> operator()(int i, int j, int k) const {
        return data[static_cast<std::size_t>(k) * n1 * n2 +
                    static_cast<std::size_t>(i) * n2 + j];
    }

    Eigen::Map<RowMatrixXcd> slice(int k) {
        return {data.data() + static_cast<std::size_t>(k) * n1 * n2, n1, n2};
    }
    Eigen::Map<const RowMatrixXcd> slice(int k) const {
        return {data.data() + static_cast<std::size_t>(k) * n1 * n2, n1, n2};
    }

    double fnorm() const {
        double s = 0.0;
        for (const auto& z : data) s += std::norm(z);
        return std::sqrt(s);
    }
};

/// Frobenius norm.
inline double fnorm(const Tensor3& a) {
    double s = 0.0;
    for (double v : a.data) s += v * v;
    return std::sqrt(s);
}

inline double max_abs_diff(const Tensor3& a, const Tensor3& b) {
    if (a.n1 != b.n1 || a.n2 != b.n2 || a.n3 != b.n3)
        throw InvalidArgument("max_abs_diff: shapes differ, " + a.shape() +
                              " vs " + b.shape());
    double m = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i)
        m = std::max(m, std::abs(a.data[i] - b.data[i]));
    return m;
}

namespace detail {

inline void require_nonempty(int n1, int n2, int n3, const char* op) {
    if (n1 <= 0 || n2 <= 0 || n3 <= 0)
        throw InvalidArgument(std::string(op) + ": tensor has a zero dimension (" +
                              shape_str(n1, n2, n3) + ")");
}

/// Mode-3 inverse FFT discarding the imaginary part; reports the largest
/// imaginary magnitude seen so callers can apply their own residue bound.
inline Tensor3 ifft_mode3_raw(const ComplexTensor3& t, double* max_imag) {
    require_nonempty(t.n1, t.n2, t.n3, "ifft_mode3");
    Tensor3 out(t.n1, t.n2, t.n3);
    double worst = 0.0;
    const std::size_t stride = static_cast<std::size_t>(t.n1) * t.n2;
    if (t.n3 == 1) {
        for (std::size_t p = 0; p < stride; ++p) {
            out.data[p] = t.data[p].real();
            worst = std::max(worst, std::abs(t.data[p].imag()));
        }
    } else {
        Eigen::FFT<double> fft;
        std::vector<std::complex<double>> tube(t.n3), inv(t.n3);
        for (std::size_t p = 0; p < stride; ++p) {
            for (int k = 0; k < t.n3; ++k) tube[k] = t.data[k * stride + p];
            fft.inv(inv, tube);
            for (int k = 0; k < t.n3; ++k) {
                out.data[k * stride + p] = inv[k].real();
                worst = std::max(worst, std::abs(inv[k].imag()));
            }
        }
    }
    if (max_imag != nullptr) *max_imag = worst;
    return out;
}

}  // namespace detail

/// FFT along the third mode, one DFT per (i, j) tube. Unnormalized
/// forward transform; ifft_mode3 applies the 1/n3 factor, so the pair is
/// an exact round trip.
inline ComplexTensor3 fft_mode3(const Tensor3& t) {
    detail::require_nonempty(t.n1, t.n2, t.n3, "fft_mode3");
    ComplexTensor3 out(t.n1, t.n2, t.n3);
    const std::size_t stride = static_cast<std::size_t>(t.n1) * t.n2;
    if (t.n3 == 1) {
        for (std::size_t p = 0; p < stride; ++p) out.data[p] = {t.data[p], 0.0};
        return out;
    }
    Eigen::FFT<double> fft;
    std::vector<std::complex<double>> tube(t.n3), spec(t.n3);
    for (std::size_t p = 0; p < stride; ++p) {
        for (int k = 0; k < t.n3; ++k) tube[k] = {t.data[k * stride + p], 0.0};
        fft.fwd(spec, tube);
        for (int k = 0; k < t.n3; ++k) out.data[k * stride + p] = spec[k];
    }
    return out;
}

/// Inverse of fft_mode3. The input is expected to be conjugate-symmetric
/// along mode 3; the imaginary residue of the inverse must stay below
/// 1e-9 * ||t||_F or the call fails.
inline Tensor3 ifft_mode3(const ComplexTensor3& t) {
    double max_imag = 0.0;
    Tensor3 out = detail::ifft_mode3_raw(t, &max_imag);
    const double bound = 1e-9 * t.fnorm();
    if (max_imag > bound)
        throw NumericError(
            "ifft_mode3: imaginary residue " + std::to_string(max_imag) +
            " exceeds 1e-9 * ||t|| = " + std::to_string(bound) +
            "; input is not conjugate-symmetric along mode 3");
    return out;
}

/// Identity tensor: frontal slice 1 is I_n, all other slices zero. Acts
/// as the unit of the t-product.
inline Tensor3 identity_tensor(int n, int n3) {
    if (n < 1 || n3 < 1)
        throw InvalidArgument("identity_tensor: n and n3 must be >= 1, got n=" +
                              std::to_string(n) + " n3=" + std::to_string(n3));
    Tensor3 e(n, n, n3);
    for (int i = 0; i < n; ++i) e(i, i, 0) = 1.0;
    return e;
}

/// Tensor transpose: slice 1 transposed, remaining slices transposed and
/// reversed in order. Satisfies (A * B)^T = B^T * A^T under the t-product.
inline Tensor3 ttranspose(const Tensor3& a) {
    detail::require_nonempty(a.n1, a.n2, a.n3, "ttranspose");
    Tensor3 out(a.n2, a.n1, a.n3);
    out.slice(0) = a.slice(0).transpose();
    for (int k = 1; k < a.n3; ++k)
        out.slice(k) = a.slice(a.n3 - k).transpose();
    return out;
}

namespace detail {

inline void require_tprod_shapes(const Tensor3& a, const Tensor3& b,
                                 const char* op) {
    require_nonempty(a.n1, a.n2, a.n3, op);
    require_nonempty(b.n1, b.n2, b.n3, op);
    if (a.n2 != b.n1 || a.n3 != b.n3)
        throw InvalidArgument(std::string(op) + ": incompatible shapes a=" +
                              a.shape() + ", b=" + b.shape() +
                              " (need a.n2 == b.n1 and a.n3 == b.n3)");
}

}  // namespace detail

/// t-product A * B via the Fourier route: transform both operands along
/// mode 3, multiply matching frontal slices, transform back. The result
/// of real operands is real; the inverse-FFT residue is checked against
/// 1e-9 * max(||a||, ||b||) before being discarded.
inline Tensor3 tprod(const Tensor3& a, const Tensor3& b) {
    detail::require_tprod_shapes(a, b, "tprod");
    const ComplexTensor3 fa = fft_mode3(a);
    const ComplexTensor3 fb = fft_mode3(b);
    ComplexTensor3 fc(a.n1, b.n2, a.n3);
    detail::parallel_for(a.n3, [&](int k) {
        fc.slice(k).noalias() = fa.slice(k) * fb.slice(k);
    });
    double max_imag = 0.0;
    Tensor3 c = detail::ifft_mode3_raw(fc, &max_imag);
    const double bound = 1e-9 * std::max(fnorm(a), fnorm(b));
    if (max_imag > bound)
        throw NumericError("tprod: imaginary residue " +
                           std::to_string(max_imag) + " exceeds bound " +
                           std::to_string(bound));
    return c;
}

/// Reference t-product that materializes the block-circulant matrix
/// circ(A), the stacked MatVec(B), multiplies, and folds back. Testing
/// aid only; O(n1*n2*l*n3^2) time and quadratic memory in n3.
inline Tensor3 tprod_oracle(const Tensor3& a, const Tensor3& b) {
    detail::require_tprod_shapes(a, b, "tprod_oracle");
    if (static_cast<long long>(a.n1) * a.n3 > 4096)
        throw InvalidArgument(
            "tprod_oracle: circulant would have " +
            std::to_string(static_cast<long long>(a.n1) * a.n3) +
            " rows (> 4096); use tprod for problems this size");

    const int n1 = a.n1, n2 = a.n2, n3 = a.n3, l = b.n2;
    Eigen::MatrixXd circ(static_cast<Eigen::Index>(n1) * n3,
                         static_cast<Eigen::Index>(n2) * n3);
    for (int bi = 0; bi < n3; ++bi)
        for (int bj = 0; bj < n3; ++bj) {
            const int src = ((bi - bj) % n3 + n3) % n3;
            circ.block(static_cast<Eigen::Index>(bi) * n1,
                       static_cast<Eigen::Index>(bj) * n2, n1, n2) =
                a.slice(src);
        }

    Eigen::MatrixXd stacked(static_cast<Eigen::Index>(n2) * n3, l);
    for (int k = 0; k < n3; ++k)
        stacked.block(static_cast<Eigen::Index>(k) * n2, 0, n2, l) = b.slice(k);

    const Eigen::MatrixXd prod = circ * stacked;

    Tensor3 out(n1, l, n3);
    for (int k = 0; k < n3; ++k)
        out.slice(k) = prod.block(static_cast<Eigen::Index>(k) * n1, 0, n1, l);
    return out;
}

}  // namespace tspt
