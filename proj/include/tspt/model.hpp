// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "tspt/adapters.hpp"
#include "tspt/errors.hpp"

namespace tspt {

enum class Task { Regression, BinaryVoxelToy };

inline std::string to_string(Task t) {
    return t == Task::Regression ? "regression" : "binary-voxel-toy";
}

inline Task task_from_string(const std::string& s) {
    if (s == "regression") return Task::Regression;
    if (s == "binary-voxel-toy") return Task::BinaryVoxelToy;
    throw InvalidArgument("unknown task: \"" + s + "\"");
}

struct ModelConfig {
    int d = 8;
    int n_heads = 2;
    int layers = 2;
    int seq_len = 4;
    Task task = Task::Regression;
};

inline void validate_config(const ModelConfig& c) {
    if (c.d < 1 || c.n_heads < 1 || c.layers < 0 || c.seq_len < 1)
        throw InvalidArgument("model config: dimensions must be positive");
    if (c.d % c.n_heads != 0)
        throw InvalidArgument("model config: d=" + std::to_string(c.d) +
                              " not divisible by n_heads=" +
                              std::to_string(c.n_heads));
}

/// Trainable scale/shift pairs of one block's two layer norms.
struct BlockNorms {
    Eigen::VectorXd g1, b1, g2, b2;
};

constexpr double kLayerNormEps = 1e-5;

// ---------------------------------------------------------------------------
// Elementwise pieces
// ---------------------------------------------------------------------------

/// Exact (erf-based) GELU.
inline double gelu(double x) {
    return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2));
}

inline double gelu_grad(double x) {
    const double phi =
        std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
    return 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2)) + x * phi;
}

/// Row-wise softmax with the usual max shift. Rejects non-finite scores.
inline Eigen::MatrixXd softmax_rows(const Eigen::MatrixXd& scores) {
    if (!scores.allFinite())
        throw NumericError("softmax: non-finite attention scores");
    Eigen::MatrixXd p(scores.rows(), scores.cols());
    for (Eigen::Index i = 0; i < scores.rows(); ++i) {
        const double m = scores.row(i).maxCoeff();
        Eigen::ArrayXd e = (scores.row(i).array() - m).exp();
        p.row(i) = e / e.sum();
    }
    return p;
}

/// d(softmax)/d(scores) given probabilities p and upstream dp, row-wise:
/// ds = p o (dp - <dp, p>).
inline Eigen::MatrixXd softmax_backward(const Eigen::MatrixXd& p,
                                        const Eigen::MatrixXd& dp) {
    Eigen::MatrixXd ds(p.rows(), p.cols());
    for (Eigen::Index i = 0; i < p.rows(); ++i) {
        const double dot = p.row(i).dot(dp.row(i));
        ds.row(i) = (p.row(i).array() * (dp.row(i).array() - dot)).matrix();
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Layer norm
// ---------------------------------------------------------------------------

struct LayerNormCache {
    Eigen::MatrixXd xhat;
    Eigen::VectorXd inv_std;  // per row
};

inline Eigen::MatrixXd layer_norm(const Eigen::MatrixXd& x,
                                  const Eigen::VectorXd& gamma,
                                  const Eigen::VectorXd& beta,
                                  LayerNormCache* cache = nullptr) {
    const Eigen::Index rows = x.rows(), d = x.cols();
    Eigen::MatrixXd y(rows, d);
    Eigen::MatrixXd xhat(rows, d);
    Eigen::VectorXd inv_std(rows);
    for (Eigen::Index i = 0; i < rows; ++i) {
        const double mu = x.row(i).mean();
        Eigen::ArrayXd c = x.row(i).array() - mu;
        const double var = c.square().mean();
        const double s = 1.0 / std::sqrt(var + kLayerNormEps);
        xhat.row(i) = (c * s).matrix();
        inv_std(i) = s;
        y.row(i) = (xhat.row(i).array() * gamma.transpose().array() +
                    beta.transpose().array())
                       .matrix();
    }
    if (cache != nullptr) {
        cache->xhat = std::move(xhat);
        cache->inv_std = std::move(inv_std);
    }
    return y;
}

inline Eigen::MatrixXd layer_norm_backward(const Eigen::MatrixXd& dy,
                                           const Eigen::VectorXd& gamma,
                                           const LayerNormCache& cache,
                                           Eigen::VectorXd* dgamma,
                                           Eigen::VectorXd* dbeta) {
    const Eigen::Index rows = dy.rows(), d = dy.cols();
    if (dgamma != nullptr)
        *dgamma += (dy.array() * cache.xhat.array()).colwise().sum().matrix();
    if (dbeta != nullptr) *dbeta += dy.colwise().sum();
    Eigen::MatrixXd dx(rows, d);
    for (Eigen::Index i = 0; i < rows; ++i) {
        Eigen::ArrayXd dxhat = dy.row(i).array() * gamma.transpose().array();
        const double m1 = dxhat.mean();
        const double m2 = (dxhat * cache.xhat.row(i).transpose().array()).mean();
        dx.row(i) = (cache.inv_std(i) *
                     (dxhat - m1 - cache.xhat.row(i).transpose().array() * m2))
                        .matrix();
    }
    return dx;
}

// ---------------------------------------------------------------------------
// Attention and MLP, forward and reverse
// ---------------------------------------------------------------------------

struct MhsaCache {
    Eigen::MatrixXd x;  // input (already layer-normed by the caller)
    std::vector<Eigen::MatrixXd> q, k, v, p, a;
};

/// Per-head sum of softmax(X Wq_i Wk_i^T X^T / sqrt(d)) X Wv_i Wo_i^T,
/// with head i using the i-th column block of each projection matrix.
/// Note the scale is sqrt(d), not sqrt(d / n_heads).
inline Eigen::MatrixXd mhsa_forward(const Eigen::MatrixXd& x,
                                    const LayerWeights& w, int n_heads,
                                    MhsaCache* cache = nullptr) {
    const int d = static_cast<int>(w.q.rows());
    if (x.cols() != d)
        throw InvalidArgument("mhsa: input width " + std::to_string(x.cols()) +
                              " != d " + std::to_string(d));
    const int dh = d / n_heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));

    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(x.rows(), d);
    if (cache != nullptr) {
        cache->x = x;
        cache->q.assign(n_heads, {});
        cache->k.assign(n_heads, {});
        cache->v.assign(n_heads, {});
        cache->p.assign(n_heads, {});
        cache->a.assign(n_heads, {});
    }
    for (int h = 0; h < n_heads; ++h) {
        const int c0 = h * dh;
        Eigen::MatrixXd qi = x * w.q.middleCols(c0, dh);
        Eigen::MatrixXd ki = x * w.k.middleCols(c0, dh);
        Eigen::MatrixXd vi = x * w.v.middleCols(c0, dh);
        Eigen::MatrixXd pi = softmax_rows(qi * ki.transpose() * scale);
        Eigen::MatrixXd ai = pi * vi;
        out.noalias() += ai * w.o.middleCols(c0, dh).transpose();
        if (cache != nullptr) {
            cache->q[h] = std::move(qi);
            cache->k[h] = std::move(ki);
            cache->v[h] = std::move(vi);
            cache->p[h] = std::move(pi);
            cache->a[h] = std::move(ai);
        }
    }
    return out;
}

/// Gradients of mhsa_forward. Adds weight gradients into dw and returns
/// the gradient with respect to the input.
inline Eigen::MatrixXd mhsa_backward(const Eigen::MatrixXd& dout,
                                     const LayerWeights& w,
                                     const MhsaCache& cache, int n_heads,
                                     LayerWeights& dw) {
    const int d = static_cast<int>(w.q.rows());
    const int dh = d / n_heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    Eigen::MatrixXd dx = Eigen::MatrixXd::Zero(cache.x.rows(), d);

    for (int h = 0; h < n_heads; ++h) {
        const int c0 = h * dh;
        const Eigen::MatrixXd& qi = cache.q[h];
        const Eigen::MatrixXd& ki = cache.k[h];
        const Eigen::MatrixXd& vi = cache.v[h];
        const Eigen::MatrixXd& pi = cache.p[h];
        const Eigen::MatrixXd& ai = cache.a[h];

        // out += ai * Wo_i^T
        Eigen::MatrixXd dai = dout * w.o.middleCols(c0, dh);
        dw.o.middleCols(c0, dh) += dout.transpose() * ai;

        // ai = pi * vi
        Eigen::MatrixXd dpi = dai * vi.transpose();
        Eigen::MatrixXd dvi = pi.transpose() * dai;

        // pi = softmax(qi ki^T * scale)
        Eigen::MatrixXd dsi = softmax_backward(pi, dpi) * scale;
        Eigen::MatrixXd dqi = dsi * ki;
        Eigen::MatrixXd dki = dsi.transpose() * qi;

        dw.q.middleCols(c0, dh) += cache.x.transpose() * dqi;
        dw.k.middleCols(c0, dh) += cache.x.transpose() * dki;
        dw.v.middleCols(c0, dh) += cache.x.transpose() * dvi;

        dx.noalias() += dqi * w.q.middleCols(c0, dh).transpose();
        dx.noalias() += dki * w.k.middleCols(c0, dh).transpose();
        dx.noalias() += dvi * w.v.middleCols(c0, dh).transpose();
    }
    return dx;
}

struct MlpCache {
    Eigen::MatrixXd x;
    Eigen::MatrixXd pre;  // x * up, before the activation
};

/// GELU(X W_up) W_down.
inline Eigen::MatrixXd mlp_forward(const Eigen::MatrixXd& x,
                                   const Eigen::MatrixXd& up,
                                   const Eigen::MatrixXd& down,
                                   MlpCache* cache = nullptr) {
    if (x.cols() != up.rows() || up.cols() != down.rows())
        throw InvalidArgument("mlp: shape mismatch");
    Eigen::MatrixXd pre = x * up;
    Eigen::MatrixXd act = pre.unaryExpr([](double v) { return gelu(v); });
    if (cache != nullptr) {
        cache->x = x;
        cache->pre = std::move(pre);
    }
    return act * down;
}

inline Eigen::MatrixXd mlp_backward(const Eigen::MatrixXd& dout,
                                    const Eigen::MatrixXd& up,
                                    const Eigen::MatrixXd& down,
                                    const MlpCache& cache,
                                    Eigen::MatrixXd& dup,
                                    Eigen::MatrixXd& ddown) {
    Eigen::MatrixXd act =
        cache.pre.unaryExpr([](double v) { return gelu(v); });
    ddown += act.transpose() * dout;
    Eigen::MatrixXd dact = dout * down.transpose();
    Eigen::MatrixXd dpre = dact.cwiseProduct(
        cache.pre.unaryExpr([](double v) { return gelu_grad(v); }));
    dup += cache.x.transpose() * dpre;
    return dpre * up.transpose();
}

// ---------------------------------------------------------------------------
// Encoder: pre-norm residual blocks
// ---------------------------------------------------------------------------

struct BlockCache {
    LayerNormCache ln1, ln2;
    MhsaCache att;
    MlpCache mlp;
};

struct EncoderCache {
    std::vector<BlockCache> block;
};

/// L pre-norm blocks: x <- x + MHSA(LN(x)); x <- x + MLP(LN(x)).
inline Eigen::MatrixXd encoder_forward(const Eigen::MatrixXd& input,
                                       const EncoderWeights& w,
                                       const std::vector<BlockNorms>& norms,
                                       const ModelConfig& cfg,
                                       EncoderCache* cache = nullptr) {
    if (norms.size() != static_cast<std::size_t>(cfg.layers))
        throw InvalidArgument("encoder: norm parameter count != layers");
    Eigen::MatrixXd x = input;
    if (cache != nullptr) cache->block.assign(cfg.layers, {});
    for (int l = 0; l < cfg.layers; ++l) {
        BlockCache* bc = cache != nullptr ? &cache->block[l] : nullptr;
        try {
            Eigen::MatrixXd t = layer_norm(x, norms[l].g1, norms[l].b1,
                                           bc != nullptr ? &bc->ln1 : nullptr);
            x += mhsa_forward(t, w.layer[l], cfg.n_heads,
                              bc != nullptr ? &bc->att : nullptr);
            Eigen::MatrixXd u = layer_norm(x, norms[l].g2, norms[l].b2,
                                           bc != nullptr ? &bc->ln2 : nullptr);
            x += mlp_forward(u, w.layer[l].up, w.layer[l].down,
                             bc != nullptr ? &bc->mlp : nullptr);
        } catch (const NumericError& e) {
            throw NumericError("encoder block " + std::to_string(l + 1) + ": " +
                               e.what());
        }
    }
    return x;
}

struct BlockNormGrads {
    Eigen::VectorXd g1, b1, g2, b2;
};

struct EncoderGrads {
    std::vector<LayerWeights> layer;  // same shapes as the weights
    std::vector<BlockNormGrads> norms;

    static EncoderGrads zero(const EncoderWeights& w) {
        EncoderGrads g;
        g.layer.resize(w.layers);
        g.norms.resize(w.layers);
        for (int l = 0; l < w.layers; ++l) {
            g.layer[l].q = Eigen::MatrixXd::Zero(w.d, w.d);
            g.layer[l].k = Eigen::MatrixXd::Zero(w.d, w.d);
            g.layer[l].v = Eigen::MatrixXd::Zero(w.d, w.d);
            g.layer[l].o = Eigen::MatrixXd::Zero(w.d, w.d);
            g.layer[l].up = Eigen::MatrixXd::Zero(w.d, 4 * w.d);
            g.layer[l].down = Eigen::MatrixXd::Zero(4 * w.d, w.d);
            g.norms[l].g1 = Eigen::VectorXd::Zero(w.d);
            g.norms[l].b1 = Eigen::VectorXd::Zero(w.d);
            g.norms[l].g2 = Eigen::VectorXd::Zero(w.d);
            g.norms[l].b2 = Eigen::VectorXd::Zero(w.d);
        }
        return g;
    }
};

/// Reverse pass through encoder_forward; accumulates into grads and
/// returns the gradient with respect to the encoder input.
inline Eigen::MatrixXd encoder_backward(const Eigen::MatrixXd& dout,
                                        const EncoderWeights& w,
                                        const std::vector<BlockNorms>& norms,
                                        const ModelConfig& cfg,
                                        const EncoderCache& cache,
                                        EncoderGrads& grads) {
    Eigen::MatrixXd dx = dout;
    for (int l = cfg.layers - 1; l >= 0; --l) {
        const BlockCache& bc = cache.block[l];
        // x_out = x_mid + MLP(LN2(x_mid))
        Eigen::MatrixXd du = mlp_backward(dx, w.layer[l].up, w.layer[l].down,
                                          bc.mlp, grads.layer[l].up,
                                          grads.layer[l].down);
        dx += layer_norm_backward(du, norms[l].g2, bc.ln2, &grads.norms[l].g2,
                                  &grads.norms[l].b2);
        // x_mid = x_in + MHSA(LN1(x_in))
        Eigen::MatrixXd dt =
            mhsa_backward(dx, w.layer[l], bc.att, cfg.n_heads, grads.layer[l]);
        dx += layer_norm_backward(dt, norms[l].g1, bc.ln1, &grads.norms[l].g1,
                                  &grads.norms[l].b1);
    }
    return dx;
}

}  // namespace tspt
