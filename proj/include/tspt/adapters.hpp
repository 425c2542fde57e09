// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>
#include <Eigen/SVD>

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "tspt/random.hpp"
#include "tspt/tensor3.hpp"
#include "tspt/tsvd.hpp"

namespace tspt {

// ---------------------------------------------------------------------------
// Encoder weights and their stacked-tensor form
// ---------------------------------------------------------------------------

/// One transformer layer's adaptable matrices: the four attention
/// projections (d x d) and the two MLP matrices (d x 4d, 4d x d).
struct LayerWeights {
    Eigen::MatrixXd q, k, v, o, up, down;
};

/// Per-layer weight matrices of a transformer encoder. Bias-like vectors
/// ride along in `extras` untouched; they are never adapted or counted.
struct EncoderWeights {
    int d = 0;
    int layers = 0;
    std::vector<LayerWeights> layer;
    std::map<std::string, Eigen::VectorXd> extras;
};

inline void validate_encoder(const EncoderWeights& w) {
    if (w.d < 1 || w.layers < 1 ||
        w.layer.size() != static_cast<std::size_t>(w.layers))
        throw InvalidArgument("encoder weights: inconsistent layer count");
    const int d = w.d;
    for (int l = 0; l < w.layers; ++l) {
        const LayerWeights& lw = w.layer[l];
        auto bad = [&](const Eigen::MatrixXd& m, int rows, int cols) {
            return m.rows() != rows || m.cols() != cols;
        };
        if (bad(lw.q, d, d) || bad(lw.k, d, d) || bad(lw.v, d, d) ||
            bad(lw.o, d, d) || bad(lw.up, d, 4 * d) || bad(lw.down, 4 * d, d))
            throw InvalidArgument("encoder weights: bad matrix shape in layer " +
                                  std::to_string(l + 1));
    }
}

/// How the attention matrices are laid out inside the stacked tensor.
/// Only one order is defined; the tag is serialized so adapter files are
/// self-describing.
enum class StackOrder { LayerMajorQkvo };

inline std::string to_string(StackOrder o) {
    switch (o) {
        case StackOrder::LayerMajorQkvo: return "layer-major-qkvo";
    }
    throw InvalidArgument("unknown stack order");
}

inline StackOrder stack_order_from_string(const std::string& s) {
    if (s == "layer-major-qkvo") return StackOrder::LayerMajorQkvo;
    throw InvalidArgument("unknown stack order tag: \"" + s + "\"");
}

/// The three stacked tensors: attention matrices as d x d x 4L (slice
/// 4(l-1)+t holds q, k, v, o of layer l for t = 1..4), and the MLP
/// matrices as d x 4d x L and 4d x d x L.
struct StackedTensors {
    Tensor3 w_sa;
    Tensor3 w_up;
    Tensor3 w_down;
    StackOrder stack_order = StackOrder::LayerMajorQkvo;
    int d = 0;
    int layers = 0;
};

inline StackedTensors tensorize(const EncoderWeights& w) {
    validate_encoder(w);
    StackedTensors s;
    s.d = w.d;
    s.layers = w.layers;
    s.w_sa = Tensor3(w.d, w.d, 4 * w.layers);
    s.w_up = Tensor3(w.d, 4 * w.d, w.layers);
    s.w_down = Tensor3(4 * w.d, w.d, w.layers);
    for (int l = 0; l < w.layers; ++l) {
        const LayerWeights& lw = w.layer[l];
        s.w_sa.slice(4 * l + 0) = lw.q;
        s.w_sa.slice(4 * l + 1) = lw.k;
        s.w_sa.slice(4 * l + 2) = lw.v;
        s.w_sa.slice(4 * l + 3) = lw.o;
        s.w_up.slice(l) = lw.up;
        s.w_down.slice(l) = lw.down;
    }
    return s;
}

inline EncoderWeights detensorize(const StackedTensors& s) {
    if (s.stack_order != StackOrder::LayerMajorQkvo)
        throw InvalidArgument("detensorize: unknown stack order tag");
    const int L = s.w_up.n3;
    if (s.w_sa.n3 != 4 * L || s.w_down.n3 != L)
        throw InvalidArgument(
            "detensorize: slice counts inconsistent (w_sa has " +
            std::to_string(s.w_sa.n3) + " slices, expected 4 x " +
            std::to_string(L) + ")");
    EncoderWeights w;
    w.d = s.w_sa.n1;
    w.layers = L;
    w.layer.resize(L);
    for (int l = 0; l < L; ++l) {
        LayerWeights& lw = w.layer[l];
        lw.q = s.w_sa.slice(4 * l + 0);
        lw.k = s.w_sa.slice(4 * l + 1);
        lw.v = s.w_sa.slice(4 * l + 2);
        lw.o = s.w_sa.slice(4 * l + 3);
        lw.up = s.w_up.slice(l);
        lw.down = s.w_down.slice(l);
    }
    return w;
}

// ---------------------------------------------------------------------------
// Parameter counting
// ---------------------------------------------------------------------------

enum class Method { LoraPT, Lora, Pissa };

inline std::string to_string(Method m) {
    switch (m) {
        case Method::LoraPT: return "lora-pt";
        case Method::Lora: return "lora";
        case Method::Pissa: return "pissa";
    }
    throw InvalidArgument("unknown method");
}

inline Method method_from_string(const std::string& s) {
    if (s == "lora-pt") return Method::LoraPT;
    if (s == "lora") return Method::Lora;
    if (s == "pissa") return Method::Pissa;
    throw InvalidArgument("unknown method: \"" + s + "\" (expected lora-pt, lora, or pissa)");
}

/// Trainable adapter parameters for hidden size d, L layers, rank r.
/// lora-pt counts the stored factor arrays (U, V lateral slices plus the
/// diagonal tubes of S); lora counts A and B per matrix; pissa counts
/// U, V and the singular values per matrix.
inline long long param_count(Method method, int d, int layers, int r) {
    if (d < 1 || layers < 1 || r < 1)
        throw InvalidArgument("param_count: d, layers, rank must be >= 1");
    const long long L = layers, D = d, R = r;
    switch (method) {
        case Method::LoraPT:
            return 4 * L * R * (2 * D + 1) + 2 * L * R * (5 * D + 1);
        case Method::Lora:
            return 4 * L * 2 * D * R + 2 * L * 5 * D * R;
        case Method::Pissa:
            return 4 * L * (2 * D + 1) * R + 2 * L * (5 * D + 1) * R;
    }
    throw InvalidArgument("unknown method");
}

// ---------------------------------------------------------------------------
// LoRA-PT adapter
// ---------------------------------------------------------------------------

/// Trainable factors of one stacked tensor: lateral slices of U and V
/// plus the diagonal tubes of S (row j of s_tubes is tube (j, j, :)).
/// Keeping only tubes makes the off-diagonal of S zero by construction,
/// for the adapter's whole lifetime.
struct PrincipalFactors {
    Tensor3 u;                // n1 x r x n3
    Eigen::MatrixXd s_tubes;  // r x n3
    Tensor3 v;                // n2 x r x n3
};

inline Tensor3 f_diagonal_from_tubes(const Eigen::MatrixXd& tubes) {
    const int r = static_cast<int>(tubes.rows());
    const int n3 = static_cast<int>(tubes.cols());
    Tensor3 s(r, r, n3);
    for (int j = 0; j < r; ++j)
        for (int k = 0; k < n3; ++k) s(j, j, k) = tubes(j, k);
    return s;
}

inline Tensor3 reconstruct_principal(const PrincipalFactors& p) {
    LowRankFactors f;
    f.r = static_cast<int>(p.s_tubes.rows());
    f.U = p.u;
    f.S = f_diagonal_from_tubes(p.s_tubes);
    f.V = p.v;
    return reconstruct(f);
}

/// LoRA-PT state: per stacked tensor, trainable principal factors plus a
/// frozen residual tensor. Effective weights are residual + U * S * V^T,
/// detensorized back into per-layer matrices.
struct LoRAPTAdapter {
    int rank = 0;
    int d = 0;
    int layers = 0;
    StackOrder stack_order = StackOrder::LayerMajorQkvo;

    PrincipalFactors sa, up, down;
    Tensor3 residual_sa, residual_up, residual_down;  // never trained

    std::map<std::string, Eigen::VectorXd> extras;

    StackedTensors effective_stacked() const {
        StackedTensors s;
        s.d = d;
        s.layers = layers;
        s.stack_order = stack_order;
        s.w_sa = reconstruct_principal(sa);
        s.w_up = reconstruct_principal(up);
        s.w_down = reconstruct_principal(down);
        for (std::size_t i = 0; i < s.w_sa.data.size(); ++i)
            s.w_sa.data[i] += residual_sa.data[i];
        for (std::size_t i = 0; i < s.w_up.data.size(); ++i)
            s.w_up.data[i] += residual_up.data[i];
        for (std::size_t i = 0; i < s.w_down.data.size(); ++i)
            s.w_down.data[i] += residual_down.data[i];
        return s;
    }

    EncoderWeights effective_weights() const {
        EncoderWeights w = detensorize(effective_stacked());
        w.extras = extras;
        return w;
    }

    long long trainable_count() const {
        auto factors = [](const PrincipalFactors& p) {
            return static_cast<long long>(p.u.size()) + p.s_tubes.size() +
                   static_cast<long long>(p.v.size());
        };
        return factors(sa) + factors(up) + factors(down);
    }
};

namespace detail {

inline PrincipalFactors split_tensor(const Tensor3& t, int r, Tensor3* residual,
                                     const char* name) {
    try {
        auto [principal, res] = truncate_split(tsvd(t), r);
        PrincipalFactors p;
        p.u = principal.U;
        p.v = principal.V;
        p.s_tubes = Eigen::MatrixXd(r, t.n3);
        for (int j = 0; j < r; ++j)
            for (int k = 0; k < t.n3; ++k) p.s_tubes(j, k) = principal.S(j, j, k);
        *residual = res;
        return p;
    } catch (const DecompositionError& e) {
        throw DecompositionError(std::string(name) + ": " + e.what(), e.slice());
    }
}

}  // namespace detail

/// Decomposes the three stacked tensors at rank r. The effective weights
/// of a freshly built adapter reproduce the input within the t-SVD's
/// reconstruction accuracy.
inline LoRAPTAdapter build_lorapt(const StackedTensors& s, int r) {
    if (r < 1 || r > s.d)
        throw InvalidArgument("build_lorapt: rank " + std::to_string(r) +
                              " out of range [1, " + std::to_string(s.d) + "]");
    LoRAPTAdapter a;
    a.rank = r;
    a.d = s.d;
    a.layers = s.layers;
    a.stack_order = s.stack_order;
    a.sa = detail::split_tensor(s.w_sa, r, &a.residual_sa, "w_sa");
    a.up = detail::split_tensor(s.w_up, r, &a.residual_up, "w_up");
    a.down = detail::split_tensor(s.w_down, r, &a.residual_down, "w_down");
    return a;
}

// ---------------------------------------------------------------------------
// Matrix-level baselines: LoRA and PISSA
// ---------------------------------------------------------------------------

/// Additive (lora) or principal/residual (pissa) adapter of a single
/// weight matrix.
struct MatrixAdapter {
    std::string name;  // "layer.{l}.{role}"
    Method method = Method::Lora;
    int rank = 0;

    // lora: effective = frozen + a * b, with b zero at initialization.
    // pissa: effective = frozen + u * diag(sigma) * v^T; frozen holds the
    // discarded SVD tail.
    Eigen::MatrixXd frozen;
    Eigen::MatrixXd a, b;
    Eigen::MatrixXd u, v;
    Eigen::VectorXd sigma;

    Eigen::MatrixXd effective() const {
        if (method == Method::Lora) return frozen + a * b;
        return frozen + u * sigma.asDiagonal() * v.transpose();
    }

    long long trainable_count() const {
        if (method == Method::Lora) return a.size() + b.size();
        return u.size() + sigma.size() + v.size();
    }
};

/// One MatrixAdapter per encoder matrix, layer-major, q/k/v/o/up/down.
struct MatrixAdapterSet {
    Method method = Method::Lora;
    int rank = 0;
    int d = 0;
    int layers = 0;
    std::vector<MatrixAdapter> items;
    std::map<std::string, Eigen::VectorXd> extras;

    EncoderWeights effective_weights() const {
        EncoderWeights w;
        w.d = d;
        w.layers = layers;
        w.layer.resize(layers);
        w.extras = extras;
        std::size_t idx = 0;
        for (int l = 0; l < layers; ++l) {
            LayerWeights& lw = w.layer[l];
            lw.q = items[idx++].effective();
            lw.k = items[idx++].effective();
            lw.v = items[idx++].effective();
            lw.o = items[idx++].effective();
            lw.up = items[idx++].effective();
            lw.down = items[idx++].effective();
        }
        return w;
    }

    long long trainable_count() const {
        long long n = 0;
        for (const auto& it : items) n += it.trainable_count();
        return n;
    }
};

namespace detail {

template <typename F>
void for_each_matrix(const EncoderWeights& w, F&& body) {
    for (int l = 0; l < w.layers; ++l) {
        const LayerWeights& lw = w.layer[l];
        const std::string prefix = "layer." + std::to_string(l + 1) + ".";
        body(prefix + "q", lw.q);
        body(prefix + "k", lw.k);
        body(prefix + "v", lw.v);
        body(prefix + "o", lw.o);
        body(prefix + "up", lw.up);
        body(prefix + "down", lw.down);
    }
}

}  // namespace detail

/// Classic LoRA: W + A B with A ~ N(0, 1/r) and B = 0, so the effective
/// weights at initialization equal the originals bit for bit.
inline MatrixAdapterSet build_matrix_lora(const EncoderWeights& w, int r,
                                          std::uint64_t seed) {
    validate_encoder(w);
    if (r < 1 || r > w.d)
        throw InvalidArgument("build_matrix_lora: rank out of range");
    MatrixAdapterSet set;
    set.method = Method::Lora;
    set.rank = r;
    set.d = w.d;
    set.layers = w.layers;
    set.extras = w.extras;
    Rng rng(seed);
    const double stddev = 1.0 / std::sqrt(static_cast<double>(r));
    detail::for_each_matrix(w, [&](const std::string& name,
                                   const Eigen::MatrixXd& mat) {
        MatrixAdapter ma;
        ma.name = name;
        ma.method = Method::Lora;
        ma.rank = r;
        ma.frozen = mat;
        ma.a = random_matrix(static_cast<int>(mat.rows()), r, rng, stddev);
        ma.b = Eigen::MatrixXd::Zero(r, mat.cols());
        set.items.push_back(std::move(ma));
    });
    return set;
}

/// PISSA: per-matrix SVD split at rank r. The leading factors train, the
/// tail is folded into a frozen residual.
inline MatrixAdapterSet build_pissa(const EncoderWeights& w, int r) {
    validate_encoder(w);
    if (r < 1 || r > w.d)
        throw InvalidArgument("build_pissa: rank out of range");
    MatrixAdapterSet set;
    set.method = Method::Pissa;
    set.rank = r;
    set.d = w.d;
    set.layers = w.layers;
    set.extras = w.extras;
    detail::for_each_matrix(w, [&](const std::string& name,
                                   const Eigen::MatrixXd& mat) {
        Eigen::JacobiSVD<Eigen::MatrixXd> svd(
            mat, Eigen::ComputeFullU | Eigen::ComputeFullV);
        if (svd.info() != Eigen::Success)
            throw DecompositionError("build_pissa: SVD failed for " + name, 0);
        const int m = static_cast<int>(svd.singularValues().size());
        MatrixAdapter ma;
        ma.name = name;
        ma.method = Method::Pissa;
        ma.rank = r;
        ma.u = svd.matrixU().leftCols(r);
        ma.sigma = svd.singularValues().head(r);
        ma.v = svd.matrixV().leftCols(r);
        if (r < m) {
            ma.frozen = svd.matrixU().middleCols(r, m - r) *
                        svd.singularValues().tail(m - r).asDiagonal() *
                        svd.matrixV().middleCols(r, m - r).transpose();
        } else {
            ma.frozen = Eigen::MatrixXd::Zero(mat.rows(), mat.cols());
        }
        set.items.push_back(std::move(ma));
    });
    return set;
}

}  // namespace tspt
