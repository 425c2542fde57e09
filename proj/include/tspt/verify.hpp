// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "tspt/random.hpp"
#include "tspt/tensor3.hpp"
#include "tspt/train.hpp"
#include "tspt/tsvd.hpp"

namespace tspt {

struct PropertyResult {
    std::string name;
    bool pass = false;
    double worst = 0.0;   // worst observed error for the property
    double bound = 0.0;   // the bound it was checked against
    std::string detail;
};

namespace detail {

inline void record(std::vector<PropertyResult>& out, const std::string& name,
                   double worst, double bound, const std::string& extra = "") {
    out.push_back({name, worst <= bound, worst, bound, extra});
}

inline double rel_fnorm_diff(const Tensor3& a, const Tensor3& b) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const double d = a.data[i] - b.data[i];
        num += d * d;
        den += b.data[i] * b.data[i];
    }
    return den == 0.0 ? std::sqrt(num) : std::sqrt(num / den);
}

}  // namespace detail

/// Random-instance properties of the fast t-product: oracle equivalence,
/// identity, transpose rule, associativity, spectrum symmetry, Parseval.
inline std::vector<PropertyResult> run_tprod_suite(std::uint64_t seed) {
    std::vector<PropertyResult> out;
    Rng rng(seed);
    auto dim = [&](int lo, int hi) {
        return lo + static_cast<int>(rng() % (hi - lo + 1));
    };

    double worst_oracle = 0.0;
    for (int t = 0; t < 50; ++t) {
        const int n1 = dim(1, 8), n2 = dim(1, 8), l = dim(1, 8), n3 = dim(1, 8);
        Tensor3 a = random_tensor(n1, n2, n3, rng);
        Tensor3 b = random_tensor(n2, l, n3, rng);
        worst_oracle =
            std::max(worst_oracle,
                     max_abs_diff(tprod(a, b), tprod_oracle(a, b)));
    }
    detail::record(out, "tprod matches block-circulant oracle", worst_oracle,
                   1e-10);

    double worst_id = 0.0;
    for (int t = 0; t < 10; ++t) {
        const int n1 = dim(1, 8), n2 = dim(1, 8), n3 = dim(1, 8);
        Tensor3 a = random_tensor(n1, n2, n3, rng);
        worst_id = std::max(
            worst_id, max_abs_diff(tprod(a, identity_tensor(n2, n3)), a));
    }
    detail::record(out, "identity tensor is the t-product unit", worst_id,
                   1e-12);

    double worst_tt = 0.0;
    for (int t = 0; t < 10; ++t) {
        const int n1 = dim(2, 6), n2 = dim(2, 6), l = dim(2, 6), n3 = dim(2, 6);
        Tensor3 a = random_tensor(n1, n2, n3, rng);
        Tensor3 b = random_tensor(n2, l, n3, rng);
        worst_tt = std::max(
            worst_tt,
            max_abs_diff(ttranspose(tprod(a, b)),
                         tprod(ttranspose(b), ttranspose(a))));
    }
    detail::record(out, "(a*b)^T = b^T * a^T", worst_tt, 1e-10);

    double worst_assoc = 0.0;
    for (int t = 0; t < 10; ++t) {
        const int n3 = dim(2, 6);
        Tensor3 a = random_tensor(dim(2, 6), dim(2, 6), n3, rng);
        Tensor3 b = random_tensor(a.n2, dim(2, 6), n3, rng);
        Tensor3 c = random_tensor(b.n2, dim(2, 6), n3, rng);
        worst_assoc = std::max(
            worst_assoc,
            max_abs_diff(tprod(tprod(a, b), c), tprod(a, tprod(b, c))));
    }
    detail::record(out, "associativity on random triples", worst_assoc, 1e-9);

    double worst_conj = 0.0;
    for (int t = 0; t < 10; ++t) {
        Tensor3 a = random_tensor(dim(1, 6), dim(1, 6), dim(2, 8), rng);
        ComplexTensor3 f = fft_mode3(a);
        for (int k = 1; k < a.n3; ++k)
            for (int i = 0; i < a.n1; ++i)
                for (int j = 0; j < a.n2; ++j) {
                    const auto z = f(i, j, k);
                    const auto w = std::conj(f(i, j, a.n3 - k));
                    worst_conj = std::max(
                        worst_conj, std::abs(z - w) / (1.0 + std::abs(z)));
                }
    }
    detail::record(out, "conjugate symmetry of real spectra", worst_conj,
                   1e-12);

    double worst_parseval = 0.0;
    for (int t = 0; t < 10; ++t) {
        Tensor3 a = random_tensor(dim(1, 6), dim(1, 6), dim(1, 8), rng);
        const double spatial = fnorm(a);
        const double fourier =
            fft_mode3(a).fnorm() / std::sqrt(static_cast<double>(a.n3));
        if (spatial > 0)
            worst_parseval = std::max(worst_parseval,
                                      std::abs(spatial - fourier) / spatial);
    }
    detail::record(out, "Parseval: ||a|| = ||fft(a)|| / sqrt(n3)",
                   worst_parseval, 1e-10);
    return out;
}

/// t-SVD invariants on random tensors: reconstruction, orthogonality,
/// f-diagonality, descending Fourier spectra, split identity and the
/// tail-energy formula.
inline std::vector<PropertyResult> run_tsvd_suite(std::uint64_t seed) {
    std::vector<PropertyResult> out;
    Rng rng(seed);
    auto dim = [&](int lo, int hi) {
        return lo + static_cast<int>(rng() % (hi - lo + 1));
    };

    double worst_recon = 0.0, worst_orth = 0.0, worst_fdiag = 0.0,
           worst_order = 0.0, worst_sum = 0.0, worst_tail = 0.0;
    for (int t = 0; t < 20; ++t) {
        const int n1 = dim(4, 16), n2 = dim(4, 16), n3 = dim(1, 8);
        Tensor3 a = random_tensor(n1, n2, n3, rng);
        TSVDFactors f = tsvd(a);

        Tensor3 recon = tprod(tprod(f.U, f.S), ttranspose(f.V));
        worst_recon = std::max(worst_recon, detail::rel_fnorm_diff(recon, a));

        worst_orth = std::max(
            worst_orth, max_abs_diff(tprod(ttranspose(f.U), f.U),
                                     identity_tensor(n1, n3)));
        worst_orth = std::max(
            worst_orth, max_abs_diff(tprod(ttranspose(f.V), f.V),
                                     identity_tensor(n2, n3)));

        for (int k = 0; k < n3; ++k)
            for (int i = 0; i < n1; ++i)
                for (int j = 0; j < n2; ++j)
                    if (i != j)
                        worst_fdiag =
                            std::max(worst_fdiag, std::abs(f.S(i, j, k)));

        ComplexTensor3 fs = fft_mode3(f.S);
        for (int k = 0; k < n3; ++k) {
            double prev = std::numeric_limits<double>::infinity();
            for (int j = 0; j < std::min(n1, n2); ++j) {
                const auto z = fs(j, j, k);
                worst_order = std::max(worst_order, std::abs(z.imag()));
                worst_order = std::max(worst_order, -z.real());
                worst_order = std::max(worst_order, z.real() - prev);
                prev = z.real();
            }
        }

        // Split identity + tail energy for r in {1, 2, 4}.
        ComplexTensor3 fa = fft_mode3(a);
        for (int r : {1, 2, 4}) {
            if (r > std::min(n1, n2)) continue;
            auto [principal, residual] = truncate_split(f, r);
            Tensor3 sum = reconstruct(principal);
            for (std::size_t i = 0; i < sum.data.size(); ++i)
                sum.data[i] += residual.data[i];
            worst_sum = std::max(worst_sum, detail::rel_fnorm_diff(sum, a));

            double tail = 0.0;
            for (int k = 0; k < n3; ++k) {
                Eigen::MatrixXcd slice = fa.slice(k);
                Eigen::JacobiSVD<Eigen::MatrixXcd> svd(slice);
                for (Eigen::Index j = r; j < svd.singularValues().size(); ++j)
                    tail += svd.singularValues()(j) * svd.singularValues()(j);
            }
            tail /= n3;
            const double got = fnorm(residual);
            if (tail > 0)
                worst_tail = std::max(worst_tail,
                                      std::abs(got * got - tail) / tail);
        }
    }
    detail::record(out, "reconstruction U*S*V^T = a (relative)", worst_recon,
                   1e-9);
    detail::record(out, "U, V orthogonality", worst_orth, 1e-9);
    detail::record(out, "S f-diagonality (exact)", worst_fdiag, 0.0);
    detail::record(out, "Fourier singular values real, >= 0, descending",
                   worst_order, 1e-9);
    detail::record(out, "principal + residual = original (relative)",
                   worst_sum, 1e-9);
    detail::record(out, "residual energy = Fourier tail energy (relative)",
                   worst_tail, 1e-8);
    return out;
}

/// Finite-difference gradient agreement for the three adapter methods on
/// the tiny configuration.
inline std::vector<PropertyResult> run_grad_suite(std::uint64_t seed) {
    std::vector<PropertyResult> out;
    ModelConfig cfg;  // d=8, heads=2, layers=2, seq_len=4, regression
    ToyData data = make_toy_data(cfg, 4, seed ^ detail::kDataSeedMix);
    const std::vector<int> batch = {0, 1};

    struct Case {
        Method method;
        int rank;
    };
    for (const Case& c : {Case{Method::LoraPT, 1}, Case{Method::Lora, 2},
                          Case{Method::Pissa, 2}}) {
        ToyModel model = ToyModel::build(cfg, c.method, c.rank, seed);
        Eigen::VectorXd grad;
        model.batch_loss_and_grad(data, batch, grad);
        auto loss = [&] { return model.batch_loss(data, batch); };
        FdReport rep = finite_diff_check(loss, model.registry(), grad, 1e-5);
        PropertyResult r;
        r.name = "finite-difference agreement, " + to_string(c.method) +
                 " rank " + std::to_string(c.rank);
        r.worst = rep.max_rel;
        r.bound = 1e-5;
        r.pass = rep.max_rel <= 1e-5 && rep.max_abs_small <= 1e-8;
        std::ostringstream os;
        os.precision(3);
        os << "max rel err " << rep.max_rel << " over "
           << model.registry().total() << " coordinates";
        r.detail = os.str();
        out.push_back(std::move(r));
    }
    return out;
}

}  // namespace tspt
