// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "tspt/adapters.hpp"
#include "tspt/model.hpp"
#include "tspt/random.hpp"
#include "tspt/segmetrics.hpp"

namespace tspt {

// ---------------------------------------------------------------------------
// Optimizer schedule and state
// ---------------------------------------------------------------------------

struct TrainConfig {
    double lr0 = 1e-3;
    long total_iters = 200;
    double poly_power = 0.9;
    double weight_decay = 1e-5;
    int batch = 4;
    std::uint64_t seed = 7;
};

inline void validate_train_config(const TrainConfig& tc) {
    if (tc.total_iters < 1)
        throw InvalidArgument("train config: total_iters must be >= 1");
    if (tc.batch < 1) throw InvalidArgument("train config: batch must be >= 1");
    if (tc.lr0 <= 0) throw InvalidArgument("train config: lr0 must be > 0");
    if (tc.weight_decay < 0)
        throw InvalidArgument("train config: weight_decay must be >= 0");
}

/// lr0 * (1 - t/T)^power: nonincreasing, exactly zero at t = T.
inline double poly_lr(double lr0, long t, long total_iters, double power) {
    const double frac =
        1.0 - static_cast<double>(t) / static_cast<double>(total_iters);
    return lr0 * std::pow(std::max(frac, 0.0), power);
}

// ---------------------------------------------------------------------------
// Flat views over the trainable parameters
// ---------------------------------------------------------------------------

struct ParamRef {
    std::string name;
    double* data = nullptr;
    std::size_t size = 0;
    std::size_t offset = 0;
};

/// Named, ordered views into the trainable storage. Gradients and
/// optimizer state use the same flat layout.
class ParamRegistry {
public:
    void add(const std::string& name, double* data, std::size_t size) {
        refs_.push_back({name, data, size, total_});
        total_ += size;
    }
    void add(const std::string& name, Eigen::MatrixXd& m) {
        add(name, m.data(), static_cast<std::size_t>(m.size()));
    }
    void add(const std::string& name, Eigen::VectorXd& v) {
        add(name, v.data(), static_cast<std::size_t>(v.size()));
    }
    void add(const std::string& name, Tensor3& t) {
        add(name, t.data.data(), t.data.size());
    }

    std::size_t total() const { return total_; }
    const std::vector<ParamRef>& refs() const { return refs_; }

    std::size_t offset_of(const std::string& name) const {
        for (const auto& r : refs_)
            if (r.name == name) return r.offset;
        throw InvalidArgument("registry: no parameter named \"" + name + "\"");
    }

    double get(std::size_t flat) const {
        const ParamRef& r = locate(flat);
        return r.data[flat - r.offset];
    }
    void set(std::size_t flat, double v) {
        const ParamRef& r = locate(flat);
        r.data[flat - r.offset] = v;
    }

    Eigen::VectorXd gather() const {
        Eigen::VectorXd out(static_cast<Eigen::Index>(total_));
        for (const auto& r : refs_)
            for (std::size_t i = 0; i < r.size; ++i)
                out(static_cast<Eigen::Index>(r.offset + i)) = r.data[i];
        return out;
    }
    void scatter(const Eigen::VectorXd& flat) {
        for (const auto& r : refs_)
            for (std::size_t i = 0; i < r.size; ++i)
                r.data[i] = flat(static_cast<Eigen::Index>(r.offset + i));
    }

private:
    const ParamRef& locate(std::size_t flat) const {
        for (const auto& r : refs_)
            if (flat >= r.offset && flat < r.offset + r.size) return r;
        throw InvalidArgument("registry: flat index out of range");
    }

    std::vector<ParamRef> refs_;
    std::size_t total_ = 0;
};

struct AdamState {
    Eigen::VectorXd m, v;
    long step = 0;

    explicit AdamState(std::size_t n)
        : m(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n))),
          v(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n))) {}
};

constexpr double kAdamBeta1 = 0.9;
constexpr double kAdamBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;

/// One Adam update with bias correction and decoupled weight decay, at
/// the poly learning rate for the state's current step. Only registered
/// (trainable) parameters move; with a zero gradient the decay term is
/// the only change.
inline void adam_step(ParamRegistry& reg, const Eigen::VectorXd& grad,
                      AdamState& st, const TrainConfig& tc) {
    if (st.step >= tc.total_iters)
        throw InvalidArgument("adam_step: iteration " + std::to_string(st.step) +
                              " past total_iters");
    const double lr = poly_lr(tc.lr0, st.step, tc.total_iters, tc.poly_power);
    ++st.step;
    const double bc1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(st.step));
    const double bc2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(st.step));
    for (const auto& r : reg.refs()) {
        for (std::size_t i = 0; i < r.size; ++i) {
            const Eigen::Index f = static_cast<Eigen::Index>(r.offset + i);
            const double g = grad(f);
            st.m(f) = kAdamBeta1 * st.m(f) + (1.0 - kAdamBeta1) * g;
            st.v(f) = kAdamBeta2 * st.v(f) + (1.0 - kAdamBeta2) * g * g;
            const double mhat = st.m(f) / bc1;
            const double vhat = st.v(f) / bc2;
            r.data[i] -= lr * (mhat / (std::sqrt(vhat) + kAdamEps) +
                               tc.weight_decay * r.data[i]);
        }
    }
}

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

struct FdReport {
    double max_rel = 0.0;        // coords where |grad| or |fd| >= 1e-8
    double max_abs_small = 0.0;  // coords where both are below 1e-8
    std::size_t worst_coord = 0;
    double worst_analytic = 0.0;
    double worst_fd = 0.0;
};

/// Central differences (f(x+h) - f(x-h)) / 2h per registered coordinate,
/// compared against the supplied analytic gradient. Coordinates where
/// both values are below 1e-8 in magnitude are compared absolutely.
inline FdReport finite_diff_check(const std::function<double()>& loss,
                                  ParamRegistry& reg,
                                  const Eigen::VectorXd& analytic, double h) {
    if (h <= 0) throw InvalidArgument("finite_diff_check: h must be > 0");
    if (analytic.size() != static_cast<Eigen::Index>(reg.total()))
        throw InvalidArgument("finite_diff_check: gradient size mismatch");
    FdReport rep;
    for (std::size_t c = 0; c < reg.total(); ++c) {
        const double saved = reg.get(c);
        reg.set(c, saved + h);
        const double fp = loss();
        reg.set(c, saved - h);
        const double fm = loss();
        reg.set(c, saved);
        const double fd = (fp - fm) / (2.0 * h);
        const double g = analytic(static_cast<Eigen::Index>(c));
        const double scale = std::max(std::abs(fd), std::abs(g));
        if (scale < 1e-8) {
            rep.max_abs_small = std::max(rep.max_abs_small, std::abs(fd - g));
            continue;
        }
        const double rel = std::abs(fd - g) / scale;
        if (rel > rep.max_rel) {
            rep.max_rel = rel;
            rep.worst_coord = c;
            rep.worst_analytic = g;
            rep.worst_fd = fd;
        }
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Toy task data
// ---------------------------------------------------------------------------

constexpr int kVoxelGrid = 4;  // binary-voxel-toy predicts a 4x4x4 volume

struct ToyData {
    std::vector<Eigen::MatrixXd> inputs;  // each seq_len x d
    Eigen::VectorXd targets;              // regression targets
    std::vector<Mask3D> masks;            // voxel-task targets
};

inline ToyData make_toy_data(const ModelConfig& cfg, int n_samples,
                             std::uint64_t seed) {
    ToyData data;
    Rng rng(seed);
    data.inputs.reserve(n_samples);
    for (int s = 0; s < n_samples; ++s)
        data.inputs.push_back(random_matrix(cfg.seq_len, cfg.d, rng));
    data.targets = random_vector(n_samples, rng);
    data.masks.reserve(n_samples);
    for (int s = 0; s < n_samples; ++s) {
        Mask3D m(kVoxelGrid, kVoxelGrid, kVoxelGrid);
        for (auto& v : m.vox) v = (rng() & 1u) ? 1 : 0;
        if (m.foreground_count() == 0) m.vox[0] = 1;
        data.masks.push_back(std::move(m));
    }
    return data;
}

// ---------------------------------------------------------------------------
// The desk-scale model: frozen encoder + adapter + norms + task head
// ---------------------------------------------------------------------------

namespace detail {

constexpr std::uint64_t kLoraSeedMix = 0x6c6f7261ULL;   // decorrelates A init
constexpr std::uint64_t kDataSeedMix = 0x64617461ULL;   // decorrelates data

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace detail

class ToyModel {
public:
    /// Builds the frozen base encoder from the seed, attaches the chosen
    /// adapter, and registers every trainable parameter.
    static ToyModel build(const ModelConfig& cfg, Method method, int rank,
                          std::uint64_t seed) {
        ToyModel m(cfg, seed);
        m.method_ = method;
        m.rank_ = rank;
        switch (method) {
            case Method::LoraPT:
                m.lorapt_ = build_lorapt(tensorize(m.base_), rank);
                break;
            case Method::Lora:
                m.matset_ = build_matrix_lora(m.base_, rank,
                                              seed ^ detail::kLoraSeedMix);
                break;
            case Method::Pissa:
                m.matset_ = build_pissa(m.base_, rank);
                break;
        }
        m.register_params();
        return m;
    }

    /// No adapter: the base weights are used directly and only the norms
    /// and head train. Reference point for initialization neutrality.
    static ToyModel build_raw(const ModelConfig& cfg, std::uint64_t seed) {
        ToyModel m(cfg, seed);
        m.register_params();
        return m;
    }

    const ModelConfig& config() const { return cfg_; }
    ParamRegistry& registry() { return reg_; }
    const EncoderWeights& base_weights() const { return base_; }
    const LoRAPTAdapter* lorapt() const {
        return lorapt_ ? &*lorapt_ : nullptr;
    }
    const MatrixAdapterSet* matrix_adapters() const {
        return matset_ ? &*matset_ : nullptr;
    }
    long long adapter_param_count() const {
        if (lorapt_) return lorapt_->trainable_count();
        if (matset_) return matset_->trainable_count();
        return 0;
    }

    EncoderWeights effective() const {
        if (lorapt_) return lorapt_->effective_weights();
        if (matset_) return matset_->effective_weights();
        return base_;
    }

    Eigen::MatrixXd forward(const Eigen::MatrixXd& input) const {
        const EncoderWeights w = effective();
        return encoder_forward(input, w, norms_, cfg_);
    }

    double batch_loss(const ToyData& data,
                      const std::vector<int>& batch) const {
        return loss_impl(data, batch, nullptr);
    }

    /// Loss plus the gradient for every registered parameter, flat in
    /// registry order. Frozen tensors receive no gradient by
    /// construction.
    double batch_loss_and_grad(const ToyData& data,
                               const std::vector<int>& batch,
                               Eigen::VectorXd& grad) const {
        grad = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(reg_.total()));
        return loss_impl(data, batch, &grad);
    }

private:
    ToyModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
        validate_config(cfg);
        Rng rng(seed);
        const double s = 1.0 / std::sqrt(static_cast<double>(cfg.d));
        base_.d = cfg.d;
        base_.layers = cfg.layers;
        base_.layer.resize(cfg.layers);
        for (auto& lw : base_.layer) {
            lw.q = random_matrix(cfg.d, cfg.d, rng, s);
            lw.k = random_matrix(cfg.d, cfg.d, rng, s);
            lw.v = random_matrix(cfg.d, cfg.d, rng, s);
            lw.o = random_matrix(cfg.d, cfg.d, rng, s);
            lw.up = random_matrix(cfg.d, 4 * cfg.d, rng, s);
            lw.down = random_matrix(4 * cfg.d, cfg.d, rng, s);
        }
        norms_.resize(cfg.layers);
        for (auto& n : norms_) {
            n.g1 = Eigen::VectorXd::Ones(cfg.d);
            n.b1 = Eigen::VectorXd::Zero(cfg.d);
            n.g2 = Eigen::VectorXd::Ones(cfg.d);
            n.b2 = Eigen::VectorXd::Zero(cfg.d);
        }
        out_dim_ = cfg.task == Task::Regression
                       ? 1
                       : kVoxelGrid * kVoxelGrid * kVoxelGrid;
        head_w_ = random_matrix(cfg.d, out_dim_, rng, s);
        head_b_ = Eigen::VectorXd::Zero(out_dim_);
    }

    void register_params() {
        if (lorapt_) {
            auto add_factors = [&](const char* tag, PrincipalFactors& p) {
                reg_.add(std::string(tag) + ".u", p.u);
                reg_.add(std::string(tag) + ".s", p.s_tubes);
                reg_.add(std::string(tag) + ".v", p.v);
            };
            add_factors("sa", lorapt_->sa);
            add_factors("up", lorapt_->up);
            add_factors("down", lorapt_->down);
        } else if (matset_) {
            for (auto& item : matset_->items) {
                if (item.method == Method::Lora) {
                    reg_.add(item.name + ".a", item.a);
                    reg_.add(item.name + ".b", item.b);
                } else {
                    reg_.add(item.name + ".u", item.u);
                    reg_.add(item.name + ".sigma", item.sigma);
                    reg_.add(item.name + ".v", item.v);
                }
            }
        }
        for (int l = 0; l < cfg_.layers; ++l) {
            const std::string p = "ln." + std::to_string(l + 1) + ".";
            reg_.add(p + "g1", norms_[l].g1);
            reg_.add(p + "b1", norms_[l].b1);
            reg_.add(p + "g2", norms_[l].g2);
            reg_.add(p + "b2", norms_[l].b2);
        }
        reg_.add("head.w", head_w_);
        reg_.add("head.b", head_b_);
    }

    double loss_impl(const ToyData& data, const std::vector<int>& batch,
                     Eigen::VectorXd* grad) const {
        if (batch.empty()) throw InvalidArgument("loss: empty batch");
        const EncoderWeights w = effective();
        const double inv_b = 1.0 / static_cast<double>(batch.size());

        EncoderGrads enc_grads = EncoderGrads::zero(w);
        Eigen::MatrixXd dhead_w = Eigen::MatrixXd::Zero(cfg_.d, out_dim_);
        Eigen::VectorXd dhead_b = Eigen::VectorXd::Zero(out_dim_);

        double loss = 0.0;
        if (cfg_.task == Task::Regression) {
            for (int idx : batch) {
                EncoderCache cache;
                Eigen::MatrixXd enc =
                    encoder_forward(data.inputs[idx], w, norms_, cfg_,
                                    grad != nullptr ? &cache : nullptr);
                Eigen::RowVectorXd pooled = enc.colwise().mean();
                const double yhat = pooled * head_w_.col(0) + head_b_(0);
                const double err = yhat - data.targets(idx);
                loss += err * err * inv_b;
                if (grad != nullptr) {
                    const double dyhat = 2.0 * err * inv_b;
                    dhead_w.col(0) += dyhat * pooled.transpose();
                    dhead_b(0) += dyhat;
                    Eigen::RowVectorXd dpooled =
                        dyhat * head_w_.col(0).transpose();
                    Eigen::MatrixXd denc =
                        Eigen::VectorXd::Constant(cfg_.seq_len,
                                                  1.0 / cfg_.seq_len) *
                        dpooled;
                    encoder_backward(denc, w, norms_, cfg_, cache, enc_grads);
                }
            }
        } else {
            std::vector<ProbVolume> preds;
            std::vector<Mask3D> targets;
            std::vector<EncoderCache> caches(batch.size());
            std::vector<Eigen::RowVectorXd> pooleds(batch.size());
            std::vector<Eigen::RowVectorXd> probs(batch.size());
            for (std::size_t s = 0; s < batch.size(); ++s) {
                const int idx = batch[s];
                Eigen::MatrixXd enc =
                    encoder_forward(data.inputs[idx], w, norms_, cfg_,
                                    grad != nullptr ? &caches[s] : nullptr);
                pooleds[s] = enc.colwise().mean();
                Eigen::RowVectorXd logits =
                    pooleds[s] * head_w_ + head_b_.transpose();
                probs[s] = logits.unaryExpr(
                    [](double x) { return detail::sigmoid(x); });
                ProbVolume pv(kVoxelGrid, kVoxelGrid, kVoxelGrid);
                for (int i = 0; i < out_dim_; ++i) pv.values[i] = probs[s](i);
                preds.push_back(std::move(pv));
                targets.push_back(data.masks[idx]);
            }
            std::vector<std::vector<double>> dpred;
            loss = dice_loss(preds, targets, grad != nullptr ? &dpred : nullptr);
            if (grad != nullptr) {
                for (std::size_t s = 0; s < batch.size(); ++s) {
                    Eigen::RowVectorXd dlogits(out_dim_);
                    for (int i = 0; i < out_dim_; ++i) {
                        const double p = probs[s](i);
                        dlogits(i) = dpred[s][i] * p * (1.0 - p);
                    }
                    dhead_w += pooleds[s].transpose() * dlogits;
                    dhead_b += dlogits.transpose();
                    Eigen::RowVectorXd dpooled = dlogits * head_w_.transpose();
                    Eigen::MatrixXd denc =
                        Eigen::VectorXd::Constant(cfg_.seq_len,
                                                  1.0 / cfg_.seq_len) *
                        dpooled;
                    encoder_backward(denc, w, norms_, cfg_, caches[s],
                                     enc_grads);
                }
            }
        }

        if (!std::isfinite(loss))
            throw NumericError("loss is not finite");
        if (grad != nullptr)
            assemble_grad(enc_grads, dhead_w, dhead_b, *grad);
        return loss;
    }

    void write_grad(Eigen::VectorXd& flat, const std::string& name,
                    const double* src, std::size_t n) const {
        const std::size_t off = reg_.offset_of(name);
        for (std::size_t i = 0; i < n; ++i)
            flat(static_cast<Eigen::Index>(off + i)) = src[i];
    }

    void assemble_grad(const EncoderGrads& enc, const Eigen::MatrixXd& dhw,
                       const Eigen::VectorXd& dhb,
                       Eigen::VectorXd& flat) const {
        if (lorapt_) {
            // Stack the per-matrix gradients exactly like tensorize, then
            // chain through W = residual + U * S * V^T. The t-product is
            // linear, so each factor's gradient is a t-product with the
            // transposes of the other factors; the S gradient is projected
            // onto the diagonal tubes (the only entries that exist as
            // parameters).
            StackedTensors g;
            g.d = cfg_.d;
            g.layers = cfg_.layers;
            g.w_sa = Tensor3(cfg_.d, cfg_.d, 4 * cfg_.layers);
            g.w_up = Tensor3(cfg_.d, 4 * cfg_.d, cfg_.layers);
            g.w_down = Tensor3(4 * cfg_.d, cfg_.d, cfg_.layers);
            for (int l = 0; l < cfg_.layers; ++l) {
                g.w_sa.slice(4 * l + 0) = enc.layer[l].q;
                g.w_sa.slice(4 * l + 1) = enc.layer[l].k;
                g.w_sa.slice(4 * l + 2) = enc.layer[l].v;
                g.w_sa.slice(4 * l + 3) = enc.layer[l].o;
                g.w_up.slice(l) = enc.layer[l].up;
                g.w_down.slice(l) = enc.layer[l].down;
            }
            chain_lorapt(g.w_sa, lorapt_->sa, "sa", flat);
            chain_lorapt(g.w_up, lorapt_->up, "up", flat);
            chain_lorapt(g.w_down, lorapt_->down, "down", flat);
        } else if (matset_) {
            std::size_t idx = 0;
            for (int l = 0; l < cfg_.layers; ++l) {
                const Eigen::MatrixXd* mats[6] = {
                    &enc.layer[l].q, &enc.layer[l].k,  &enc.layer[l].v,
                    &enc.layer[l].o, &enc.layer[l].up, &enc.layer[l].down};
                for (const Eigen::MatrixXd* gm : mats) {
                    const MatrixAdapter& item = matset_->items[idx++];
                    if (item.method == Method::Lora) {
                        Eigen::MatrixXd da = *gm * item.b.transpose();
                        Eigen::MatrixXd db = item.a.transpose() * *gm;
                        write_grad(flat, item.name + ".a", da.data(),
                                   da.size());
                        write_grad(flat, item.name + ".b", db.data(),
                                   db.size());
                    } else {
                        Eigen::MatrixXd du =
                            *gm * item.v * item.sigma.asDiagonal();
                        Eigen::VectorXd dsigma =
                            (item.u.transpose() * *gm * item.v).diagonal();
                        Eigen::MatrixXd dv =
                            gm->transpose() * item.u * item.sigma.asDiagonal();
                        write_grad(flat, item.name + ".u", du.data(),
                                   du.size());
                        write_grad(flat, item.name + ".sigma", dsigma.data(),
                                   dsigma.size());
                        write_grad(flat, item.name + ".v", dv.data(),
                                   dv.size());
                    }
                }
            }
        }
        for (int l = 0; l < cfg_.layers; ++l) {
            const std::string p = "ln." + std::to_string(l + 1) + ".";
            write_grad(flat, p + "g1", enc.norms[l].g1.data(),
                       enc.norms[l].g1.size());
            write_grad(flat, p + "b1", enc.norms[l].b1.data(),
                       enc.norms[l].b1.size());
            write_grad(flat, p + "g2", enc.norms[l].g2.data(),
                       enc.norms[l].g2.size());
            write_grad(flat, p + "b2", enc.norms[l].b2.data(),
                       enc.norms[l].b2.size());
        }
        write_grad(flat, "head.w", dhw.data(), dhw.size());
        write_grad(flat, "head.b", dhb.data(), dhb.size());
    }

    void chain_lorapt(const Tensor3& g, const PrincipalFactors& p,
                      const std::string& tag, Eigen::VectorXd& flat) const {
        const Tensor3 s = f_diagonal_from_tubes(p.s_tubes);
        const Tensor3 svt = tprod(s, ttranspose(p.v));       // r x n2 x n3
        const Tensor3 du = tprod(g, ttranspose(svt));        // n1 x r x n3
        const Tensor3 dsvt = tprod(ttranspose(p.u), g);      // r x n2 x n3
        const Tensor3 ds_full = tprod(dsvt, p.v);            // r x r x n3
        const Tensor3 dv = ttranspose(tprod(ttranspose(s), dsvt));

        const int r = static_cast<int>(p.s_tubes.rows());
        Eigen::MatrixXd ds(r, p.s_tubes.cols());
        for (int j = 0; j < r; ++j)
            for (int k = 0; k < ds.cols(); ++k) ds(j, k) = ds_full(j, j, k);

        write_grad(flat, tag + ".u", du.data.data(), du.data.size());
        write_grad(flat, tag + ".s", ds.data(), ds.size());
        write_grad(flat, tag + ".v", dv.data.data(), dv.data.size());
    }

    ModelConfig cfg_;
    Method method_ = Method::LoraPT;
    int rank_ = 0;
    EncoderWeights base_;
    std::optional<LoRAPTAdapter> lorapt_;
    std::optional<MatrixAdapterSet> matset_;
    std::vector<BlockNorms> norms_;
    Eigen::MatrixXd head_w_;
    Eigen::VectorXd head_b_;
    int out_dim_ = 1;
    ParamRegistry reg_;
};

// ---------------------------------------------------------------------------
// Toy training runs
// ---------------------------------------------------------------------------

struct TrainResult {
    double initial_loss = 0.0;
    double final_loss = 0.0;
    std::vector<double> losses;  // full-dataset loss after each step
    long long adapter_params = 0;
};

inline std::vector<int> all_indices(int n) {
    std::vector<int> idx(n);
    for (int i = 0; i < n; ++i) idx[i] = i;
    return idx;
}

/// Seeded training run: minibatches cycle through the dataset in order,
/// one Adam step per iteration. Deterministic for a fixed seed.
inline TrainResult run_toy_training(const ModelConfig& cfg, Method method,
                                    int rank, const TrainConfig& tc) {
    validate_train_config(tc);
    const int n_samples = std::max(8, tc.batch);
    ToyData data = make_toy_data(cfg, n_samples, tc.seed ^ detail::kDataSeedMix);
    ToyModel model = ToyModel::build(cfg, method, rank, tc.seed);

    const std::vector<int> all = all_indices(n_samples);
    TrainResult res;
    res.adapter_params = model.adapter_param_count();
    res.initial_loss = model.batch_loss(data, all);
    res.losses.reserve(tc.total_iters);

    AdamState adam(model.registry().total());
    Eigen::VectorXd grad;
    for (long t = 0; t < tc.total_iters; ++t) {
        std::vector<int> batch(tc.batch);
        for (int i = 0; i < tc.batch; ++i)
            batch[i] = static_cast<int>((t * tc.batch + i) % n_samples);
        model.batch_loss_and_grad(data, batch, grad);
        adam_step(model.registry(), grad, adam, tc);
        res.losses.push_back(model.batch_loss(data, all));
    }
    res.final_loss = res.losses.empty() ? res.initial_loss : res.losses.back();
    return res;
}

struct SweepRow {
    Method method = Method::LoraPT;
    int rank = 0;
    long long params = 0;
    double final_loss = 0.0;
    std::uint64_t seed = 0;
};

inline std::vector<SweepRow> run_rank_sweep(const ModelConfig& cfg,
                                            const TrainConfig& tc,
                                            const std::vector<Method>& methods,
                                            const std::vector<int>& ranks) {
    std::vector<SweepRow> rows;
    for (Method m : methods)
        for (int r : ranks) {
            TrainResult res = run_toy_training(cfg, m, r, tc);
            rows.push_back({m, r, res.adapter_params, res.final_loss, tc.seed});
        }
    return rows;
}

}  // namespace tspt
