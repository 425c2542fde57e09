// SPDX-License-Identifier: Apache-2.0
#include "tspt/model.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "tspt/random.hpp"
#include "tspt/train.hpp"

using tspt::BlockNorms;
using tspt::EncoderWeights;
using tspt::LayerWeights;
using tspt::Method;
using tspt::ModelConfig;
using tspt::Task;
using tspt::ToyModel;

namespace {

LayerWeights random_layer(int d, tspt::Rng& rng) {
    const double s = 1.0 / std::sqrt(static_cast<double>(d));
    LayerWeights lw;
    lw.q = tspt::random_matrix(d, d, rng, s);
    lw.k = tspt::random_matrix(d, d, rng, s);
    lw.v = tspt::random_matrix(d, d, rng, s);
    lw.o = tspt::random_matrix(d, d, rng, s);
    lw.up = tspt::random_matrix(d, 4 * d, rng, s);
    lw.down = tspt::random_matrix(4 * d, d, rng, s);
    return lw;
}

}  // namespace

TEST(Mhsa, SingleHeadReducesToPlainAttention) {
    tspt::Rng rng(71);
    const int d = 4, seq = 3;
    LayerWeights w = random_layer(d, rng);
    Eigen::MatrixXd x = tspt::random_matrix(seq, d, rng);

    Eigen::MatrixXd got = tspt::mhsa_forward(x, w, 1);
    Eigen::MatrixXd probs =
        tspt::softmax_rows(x * w.q * w.k.transpose() * x.transpose() /
                           std::sqrt(static_cast<double>(d)));
    Eigen::MatrixXd want = probs * x * w.v * w.o.transpose();
    EXPECT_LE((got - want).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Mhsa, SingleTokenSoftmaxIsOne) {
    tspt::Rng rng(72);
    const int d = 4;
    LayerWeights w = random_layer(d, rng);
    Eigen::MatrixXd x = tspt::random_matrix(1, d, rng);

    Eigen::MatrixXd got = tspt::mhsa_forward(x, w, 2);
    Eigen::MatrixXd want = Eigen::MatrixXd::Zero(1, d);
    for (int h = 0; h < 2; ++h)
        want += x * w.v.middleCols(h * 2, 2) *
                w.o.middleCols(h * 2, 2).transpose();
    EXPECT_LE((got - want).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Mhsa, MatchesNaiveEvaluator) {
    tspt::Rng rng(73);
    const int d = 4, seq = 3;
    LayerWeights w = random_layer(d, rng);
    Eigen::MatrixXd x = tspt::random_matrix(seq, d, rng);
    Eigen::MatrixXd got = tspt::mhsa_forward(x, w, 2);
    Eigen::MatrixXd want = oracle::naive_mhsa(x, w.q, w.k, w.v, w.o, 2);
    EXPECT_LE((got - want).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Mhsa, NonFiniteScoresRejected) {
    const int d = 2;
    LayerWeights w;
    const double big = 1e200;
    w.q = Eigen::MatrixXd::Constant(d, d, big);
    w.k = Eigen::MatrixXd::Constant(d, d, big);
    w.v = Eigen::MatrixXd::Identity(d, d);
    w.o = Eigen::MatrixXd::Identity(d, d);
    w.up = Eigen::MatrixXd::Zero(d, 4 * d);
    w.down = Eigen::MatrixXd::Zero(4 * d, d);
    Eigen::MatrixXd x = Eigen::MatrixXd::Constant(2, d, big);
    EXPECT_THROW(tspt::mhsa_forward(x, w, 1), tspt::NumericError);
}

TEST(Mlp, ZeroInputGivesZero) {
    tspt::Rng rng(74);
    Eigen::MatrixXd up = tspt::random_matrix(4, 16, rng);
    Eigen::MatrixXd down = tspt::random_matrix(16, 4, rng);
    Eigen::MatrixXd out = tspt::mlp_forward(Eigen::MatrixXd::Zero(3, 4), up, down);
    EXPECT_EQ(out.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Mlp, ZeroDownGivesZero) {
    tspt::Rng rng(75);
    Eigen::MatrixXd x = tspt::random_matrix(3, 4, rng);
    Eigen::MatrixXd up = tspt::random_matrix(4, 16, rng);
    Eigen::MatrixXd out =
        tspt::mlp_forward(x, up, Eigen::MatrixXd::Zero(16, 4));
    EXPECT_EQ(out.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Mlp, MatchesNaiveEvaluator) {
    tspt::Rng rng(76);
    Eigen::MatrixXd x = tspt::random_matrix(3, 4, rng);
    Eigen::MatrixXd up = tspt::random_matrix(4, 16, rng);
    Eigen::MatrixXd down = tspt::random_matrix(16, 4, rng);
    Eigen::MatrixXd got = tspt::mlp_forward(x, up, down);
    Eigen::MatrixXd want = oracle::naive_mlp(x, up, down);
    EXPECT_LE((got - want).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Encoder, ZeroLayersIsIdentity) {
    tspt::Rng rng(77);
    ModelConfig cfg;
    cfg.d = 4;
    cfg.n_heads = 2;
    cfg.layers = 0;
    cfg.seq_len = 3;
    EncoderWeights w;
    w.d = 4;
    w.layers = 0;
    Eigen::MatrixXd x = tspt::random_matrix(3, 4, rng);
    Eigen::MatrixXd out = tspt::encoder_forward(x, w, {}, cfg);
    EXPECT_EQ((out - x).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Encoder, ZeroWeightsBlockIsIdentity) {
    ModelConfig cfg;
    cfg.d = 4;
    cfg.n_heads = 2;
    cfg.layers = 1;
    cfg.seq_len = 3;
    EncoderWeights w;
    w.d = 4;
    w.layers = 1;
    w.layer.resize(1);
    w.layer[0].q = Eigen::MatrixXd::Zero(4, 4);
    w.layer[0].k = Eigen::MatrixXd::Zero(4, 4);
    w.layer[0].v = Eigen::MatrixXd::Zero(4, 4);
    w.layer[0].o = Eigen::MatrixXd::Zero(4, 4);
    w.layer[0].up = Eigen::MatrixXd::Zero(4, 16);
    w.layer[0].down = Eigen::MatrixXd::Zero(16, 4);
    std::vector<BlockNorms> norms(1);
    norms[0].g1 = Eigen::VectorXd::Ones(4);
    norms[0].b1 = Eigen::VectorXd::Zero(4);
    norms[0].g2 = Eigen::VectorXd::Ones(4);
    norms[0].b2 = Eigen::VectorXd::Zero(4);

    tspt::Rng rng(78);
    Eigen::MatrixXd x = tspt::random_matrix(3, 4, rng);
    Eigen::MatrixXd out = tspt::encoder_forward(x, w, norms, cfg);
    EXPECT_LE((out - x).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Encoder, NumericErrorNamesTheBlock) {
    ModelConfig cfg;
    cfg.d = 2;
    cfg.n_heads = 1;
    cfg.layers = 2;
    cfg.seq_len = 2;
    EncoderWeights w;
    w.d = 2;
    w.layers = 2;
    w.layer.resize(2);
    for (auto& lw : w.layer) {
        lw.q = Eigen::MatrixXd::Zero(2, 2);
        lw.k = Eigen::MatrixXd::Zero(2, 2);
        lw.v = Eigen::MatrixXd::Zero(2, 2);
        lw.o = Eigen::MatrixXd::Zero(2, 2);
        lw.up = Eigen::MatrixXd::Zero(2, 8);
        lw.down = Eigen::MatrixXd::Zero(8, 2);
    }
    const double big = 1e200;
    w.layer[1].q = Eigen::MatrixXd::Constant(2, 2, big);
    w.layer[1].k = Eigen::MatrixXd::Constant(2, 2, big);
    std::vector<BlockNorms> norms(2);
    for (auto& n : norms) {
        n.g1 = Eigen::VectorXd::Constant(2, big);  // blow up the scores
        n.b1 = Eigen::VectorXd::Zero(2);
        n.g2 = Eigen::VectorXd::Ones(2);
        n.b2 = Eigen::VectorXd::Zero(2);
    }
    tspt::Rng rng(99);
    Eigen::MatrixXd x = tspt::random_matrix(2, 2, rng);
    try {
        tspt::encoder_forward(x, w, norms, cfg);
        FAIL() << "expected NumericError";
    } catch (const tspt::NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("block 2"), std::string::npos)
            << e.what();
    }
}

TEST(Encoder, MatchesNaiveReimplementation) {
    tspt::Rng rng(79);
    ModelConfig cfg;
    cfg.d = 8;
    cfg.n_heads = 2;
    cfg.layers = 2;
    cfg.seq_len = 3;
    EncoderWeights w;
    w.d = 8;
    w.layers = 2;
    w.layer.push_back(random_layer(8, rng));
    w.layer.push_back(random_layer(8, rng));
    std::vector<BlockNorms> norms(2);
    for (auto& n : norms) {
        n.g1 = tspt::random_vector(8, rng);
        n.b1 = tspt::random_vector(8, rng);
        n.g2 = tspt::random_vector(8, rng);
        n.b2 = tspt::random_vector(8, rng);
    }
    Eigen::MatrixXd x = tspt::random_matrix(3, 8, rng);

    Eigen::MatrixXd got = tspt::encoder_forward(x, w, norms, cfg);

    Eigen::MatrixXd ref = x;
    for (int l = 0; l < 2; ++l) {
        Eigen::MatrixXd t = oracle::naive_layer_norm(ref, norms[l].g1, norms[l].b1);
        ref += oracle::naive_mhsa(t, w.layer[l].q, w.layer[l].k, w.layer[l].v,
                                  w.layer[l].o, cfg.n_heads);
        Eigen::MatrixXd u = oracle::naive_layer_norm(ref, norms[l].g2, norms[l].b2);
        ref += oracle::naive_mlp(u, w.layer[l].up, w.layer[l].down);
    }
    EXPECT_LE((got - ref).cwiseAbs().maxCoeff(), 1e-10);
}

// ---------------------------------------------------------------------------
// Gradients
// ---------------------------------------------------------------------------

TEST(FiniteDiff, QuadraticLoss) {
    Eigen::VectorXd x = Eigen::VectorXd::LinSpaced(5, -1.0, 2.0);
    tspt::ParamRegistry reg;
    reg.add("x", x);
    auto loss = [&] { return 0.5 * x.squaredNorm(); };
    Eigen::VectorXd analytic = x;  // d/dx of ||x||^2 / 2
    tspt::FdReport rep = tspt::finite_diff_check(loss, reg, analytic, 1e-5);
    EXPECT_LE(rep.max_rel, 1e-9);
}

TEST(FiniteDiff, LinearLoss) {
    Eigen::VectorXd x = Eigen::VectorXd::Zero(4);
    Eigen::VectorXd c(4);
    c << 1.0, -2.0, 3.0, 0.5;
    tspt::ParamRegistry reg;
    reg.add("x", x);
    auto loss = [&] { return c.dot(x); };
    tspt::FdReport rep = tspt::finite_diff_check(loss, reg, c, 1e-5);
    EXPECT_LE(rep.max_rel, 1e-9);
}

TEST(Gradients, ZeroUpstreamGivesZeroParameterGrads) {
    // With head weights and bias zeroed, the regression loss only sees
    // the (constant) targets, so every adapter gradient must vanish.
    ModelConfig cfg;
    cfg.task = Task::Regression;
    ToyModel model = ToyModel::build(cfg, Method::LoraPT, 1, 5);
    tspt::ToyData data = tspt::make_toy_data(cfg, 4, 6);
    data.targets.setZero();

    const std::size_t off_w = model.registry().offset_of("head.w");
    const std::size_t off_b = model.registry().offset_of("head.b");
    for (std::size_t i = 0; i < static_cast<std::size_t>(cfg.d); ++i)
        model.registry().set(off_w + i, 0.0);
    model.registry().set(off_b, 0.0);

    Eigen::VectorXd grad;
    model.batch_loss_and_grad(data, {0, 1, 2, 3}, grad);
    const std::size_t adapter_span = model.registry().offset_of("ln.1.g1");
    for (std::size_t i = 0; i < adapter_span; ++i)
        EXPECT_EQ(grad(static_cast<Eigen::Index>(i)), 0.0) << "coord " << i;
}

TEST(Gradients, SingleSliceRankOneMatchesMatrixChainRule) {
    // n3 = 1, r = 1: the t-product chain rule collapses to the matrix
    // case W = u s v^T, so dL/du = G v s, dL/ds = u^T G v, dL/dv = G^T u s.
    tspt::Rng rng(80);
    tspt::PrincipalFactors p;
    p.u = tspt::random_tensor(5, 1, 1, rng);
    p.s_tubes = Eigen::MatrixXd::Constant(1, 1, 1.7);
    p.v = tspt::random_tensor(4, 1, 1, rng);

    tspt::Tensor3 g3 = tspt::random_tensor(5, 4, 1, rng);
    Eigen::MatrixXd g = g3.slice(0);
    Eigen::VectorXd u = p.u.slice(0);
    Eigen::VectorXd v = p.v.slice(0);
    const double s = 1.7;

    // Library route.
    const tspt::Tensor3 st = tspt::f_diagonal_from_tubes(p.s_tubes);
    const tspt::Tensor3 svt = tspt::tprod(st, tspt::ttranspose(p.v));
    const tspt::Tensor3 du = tspt::tprod(g3, tspt::ttranspose(svt));
    const tspt::Tensor3 dsvt = tspt::tprod(tspt::ttranspose(p.u), g3);
    const tspt::Tensor3 ds = tspt::tprod(dsvt, p.v);
    const tspt::Tensor3 dv =
        tspt::ttranspose(tspt::tprod(tspt::ttranspose(st), dsvt));

    Eigen::VectorXd du_want = g * v * s;
    Eigen::VectorXd dv_want = g.transpose() * u * s;
    const double ds_want = u.transpose() * g * v;

    EXPECT_LE((Eigen::VectorXd(du.slice(0)) - du_want).cwiseAbs().maxCoeff(),
              1e-12);
    EXPECT_LE((Eigen::VectorXd(dv.slice(0)) - dv_want).cwiseAbs().maxCoeff(),
              1e-12);
    EXPECT_NEAR(ds(0, 0, 0), ds_want, 1e-12);
}

// Full finite-difference sweep over every trainable coordinate of the
// tiny configuration, for all three adapter methods and both tasks.
TEST(Gradients, FiniteDifferenceAgreementAllMethods) {
    ModelConfig cfg;  // d=8, heads=2, layers=2, seq_len=4
    for (Task task : {Task::Regression, Task::BinaryVoxelToy}) {
        cfg.task = task;
        tspt::ToyData data =
            tspt::make_toy_data(cfg, 4, 90 + static_cast<int>(task));
        const std::vector<int> batch = {0, 1};
        struct Case {
            Method method;
            int rank;
        };
        for (const Case& c : {Case{Method::LoraPT, 1}, Case{Method::Lora, 2},
                              Case{Method::Pissa, 2}}) {
            ToyModel model = ToyModel::build(cfg, c.method, c.rank, 91);
            Eigen::VectorXd grad;
            model.batch_loss_and_grad(data, batch, grad);
            auto loss = [&] { return model.batch_loss(data, batch); };
            tspt::FdReport rep =
                tspt::finite_diff_check(loss, model.registry(), grad, 1e-5);
            EXPECT_LE(rep.max_rel, 1e-5)
                << to_string(c.method) << " task=" << to_string(task)
                << " worst coord " << rep.worst_coord << ": analytic "
                << rep.worst_analytic << " vs fd " << rep.worst_fd;
            EXPECT_LE(rep.max_abs_small, 1e-8);
        }
    }
}

TEST(DiceLossGradient, MatchesFiniteDifferences) {
    tspt::Rng rng(92);
    tspt::ProbVolume p(4, 4, 4);
    std::uniform_real_distribution<double> uni(0.05, 0.95);
    for (auto& v : p.values) v = uni(rng);
    tspt::Mask3D m(4, 4, 4);
    for (auto& v : m.vox) v = (rng() & 1u) ? 1 : 0;

    std::vector<tspt::ProbVolume> preds = {p};
    std::vector<tspt::Mask3D> masks = {m};
    std::vector<std::vector<double>> grad;
    tspt::dice_loss(preds, masks, &grad);

    const double h = 1e-6;
    for (std::size_t i = 0; i < p.values.size(); i += 7) {
        auto plus = preds, minus = preds;
        plus[0].values[i] += h;
        minus[0].values[i] -= h;
        const double fd =
            (tspt::dice_loss(plus, masks) - tspt::dice_loss(minus, masks)) /
            (2.0 * h);
        EXPECT_NEAR(fd, grad[0][i], 1e-6 * std::max(1.0, std::abs(fd)));
    }
}
