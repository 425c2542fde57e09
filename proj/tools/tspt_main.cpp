// SPDX-License-Identifier: Apache-2.0
//
// tspt: inspect and build checkpoint/adapter containers, run the property
// suites, train the desk-scale toy model, and compute segmentation
// metrics. Exit codes: 0 success, 1 verification or numeric failure,
// 2 malformed input, 3 invalid arguments, 4 undefined metric.
#include <CLI11.hpp>

#include <cstdint>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "tspt/container.hpp"
#include "tspt/segmetrics.hpp"
#include "tspt/train.hpp"
#include "tspt/verify.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitMalformed = 2;
constexpr int kExitBadArgs = 3;
constexpr int kExitUndefinedMetric = 4;

tspt::Dtype parse_dtype(const std::string& s) {
    if (s == "f32") return tspt::Dtype::F32;
    if (s == "f64") return tspt::Dtype::F64;
    throw tspt::InvalidArgument("--dtype must be f32 or f64");
}

std::string fmt(double v) {
    std::ostringstream os;
    os.precision(9);
    os << v;
    return os.str();
}

// ---------------------------------------------------------------------------
// Toy experiment configuration: plain "key = value" lines, '#' comments.
// Keys: d, n_heads, layers, seq_len, rank, method, lr0, total_iters,
// batch, seed, task.
// ---------------------------------------------------------------------------

struct ToyRunConfig {
    tspt::ModelConfig model;
    tspt::TrainConfig train;
    tspt::Method method = tspt::Method::LoraPT;
    int rank = 1;
};

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

ToyRunConfig parse_toy_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw tspt::FormatError("cannot open config file " + path);
    ToyRunConfig cfg;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw tspt::FormatError(path + ":" + std::to_string(lineno) +
                                    ": expected key = value");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        try {
            if (key == "d") cfg.model.d = std::stoi(value);
            else if (key == "n_heads") cfg.model.n_heads = std::stoi(value);
            else if (key == "layers") cfg.model.layers = std::stoi(value);
            else if (key == "seq_len") cfg.model.seq_len = std::stoi(value);
            else if (key == "rank") cfg.rank = std::stoi(value);
            else if (key == "method") cfg.method = tspt::method_from_string(value);
            else if (key == "lr0") cfg.train.lr0 = std::stod(value);
            else if (key == "total_iters") cfg.train.total_iters = std::stol(value);
            else if (key == "batch") cfg.train.batch = std::stoi(value);
            else if (key == "seed") cfg.train.seed = std::stoull(value);
            else if (key == "task") cfg.model.task = tspt::task_from_string(value);
            else
                throw tspt::FormatError(path + ":" + std::to_string(lineno) +
                                        ": unknown key \"" + key + "\"");
        } catch (const tspt::FormatError&) {
            throw;
        } catch (const tspt::InvalidArgument& e) {
            throw tspt::FormatError(path + ":" + std::to_string(lineno) + ": " +
                                    e.what());
        } catch (const std::exception&) {
            throw tspt::FormatError(path + ":" + std::to_string(lineno) +
                                    ": bad value for \"" + key + "\"");
        }
    }
    try {
        tspt::validate_config(cfg.model);
        tspt::validate_train_config(cfg.train);
        if (cfg.rank < 1 || cfg.rank > cfg.model.d)
            throw tspt::InvalidArgument("rank out of range [1, d]");
    } catch (const tspt::InvalidArgument& e) {
        throw tspt::FormatError(path + ": " + e.what());
    }
    return cfg;
}

// ---------------------------------------------------------------------------
// Subcommand bodies
// ---------------------------------------------------------------------------

int cmd_inspect(const std::string& path) {
    tspt::Container c = tspt::Container::load(path);
    std::cout << "container: " << path << "\n";
    std::cout << "meta: " << c.meta.dump() << "\n";
    std::cout << "arrays (" << c.arrays.size() << "):\n";
    for (const auto& a : c.arrays) {
        std::cout << "  " << a.name << "  dtype=" << to_string(a.dtype)
                  << " shape=[";
        for (std::size_t i = 0; i < a.shape.size(); ++i)
            std::cout << (i ? "," : "") << a.shape[i];
        std::cout << "] offset=" << a.offset << " nbytes=" << a.nbytes << "\n";
    }
    return kExitOk;
}

int cmd_init_encoder(int d, int layers, std::uint64_t seed,
                     const std::string& out, tspt::Dtype dt) {
    if (d < 1 || layers < 1)
        throw tspt::InvalidArgument("--d and --layers must be >= 1");
    tspt::Rng rng(seed);
    tspt::EncoderWeights w;
    w.d = d;
    w.layers = layers;
    w.layer.resize(layers);
    const double s = 1.0 / std::sqrt(static_cast<double>(d));
    for (auto& lw : w.layer) {
        lw.q = tspt::random_matrix(d, d, rng, s);
        lw.k = tspt::random_matrix(d, d, rng, s);
        lw.v = tspt::random_matrix(d, d, rng, s);
        lw.o = tspt::random_matrix(d, d, rng, s);
        lw.up = tspt::random_matrix(d, 4 * d, rng, s);
        lw.down = tspt::random_matrix(4 * d, d, rng, s);
    }
    tspt::write_checkpoint(out, w, dt);
    std::cout << "wrote checkpoint " << out << " (d=" << d
              << ", layers=" << layers << ")\n";
    return kExitOk;
}

void print_tensor_summary(const char* name, const tspt::Tensor3& t,
                          const tspt::Tensor3& residual) {
    tspt::ComplexTensor3 f = tspt::fft_mode3(t);
    double sigma_max = 0.0;
    double sigma_min = std::numeric_limits<double>::infinity();
    for (int k = 0; k < t.n3; ++k) {
        Eigen::MatrixXcd slice = f.slice(k);
        Eigen::JacobiSVD<Eigen::MatrixXcd> svd(slice);
        sigma_max = std::max(sigma_max, svd.singularValues().maxCoeff());
        sigma_min = std::min(sigma_min, svd.singularValues().minCoeff());
    }
    const double total = tspt::fnorm(t);
    const double res = tspt::fnorm(residual);
    const double retained =
        total > 0 ? 1.0 - (res * res) / (total * total) : 1.0;
    std::cout << name << ": shape " << t.shape() << ", Fourier sigma in ["
              << fmt(sigma_min) << ", " << fmt(sigma_max)
              << "], retained energy " << fmt(retained) << "\n";
}

int cmd_decompose(const std::string& in, int rank, const std::string& out,
                  tspt::Dtype dt) {
    tspt::EncoderWeights w = tspt::read_checkpoint(in);
    if (rank < 1 || rank > w.d) {
        std::cerr << "error: rank " << rank << " out of range [1, " << w.d
                  << "]\n";
        return kExitBadArgs;
    }
    tspt::StackedTensors s = tspt::tensorize(w);
    tspt::LoRAPTAdapter a = tspt::build_lorapt(s, rank);
    a.extras = w.extras;
    print_tensor_summary("w_sa", s.w_sa, a.residual_sa);
    print_tensor_summary("w_up", s.w_up, a.residual_up);
    print_tensor_summary("w_down", s.w_down, a.residual_down);
    std::cout << "trainable parameters: " << a.trainable_count() << "\n";
    tspt::write_adapter(out, a, dt);
    std::cout << "wrote adapter " << out << " (rank=" << rank << ")\n";
    return kExitOk;
}

int cmd_merge(const std::string& adapter, const std::string& out,
              tspt::Dtype dt) {
    tspt::LoRAPTAdapter a = tspt::read_adapter(adapter);
    tspt::EncoderWeights w = a.effective_weights();
    tspt::write_checkpoint(out, w, dt);
    std::cout << "wrote checkpoint " << out << " (d=" << w.d
              << ", layers=" << w.layers << ")\n";
    return kExitOk;
}

int cmd_count_params(const std::string& method, int d, int layers, int rank) {
    const long long n =
        tspt::param_count(tspt::method_from_string(method), d, layers, rank);
    std::cout << n << "\n";
    return kExitOk;
}

int cmd_verify(const std::string& suite, std::uint64_t seed) {
    std::vector<tspt::PropertyResult> results;
    if (suite == "tprod") results = tspt::run_tprod_suite(seed);
    else if (suite == "tsvd") results = tspt::run_tsvd_suite(seed);
    else if (suite == "grad") results = tspt::run_grad_suite(seed);
    else {
        std::cerr << "error: unknown suite \"" << suite
                  << "\" (expected tprod, tsvd, or grad)\n";
        return kExitBadArgs;
    }
    bool all_pass = true;
    for (const auto& r : results) {
        std::cout << (r.pass ? "[PASS] " : "[FAIL] ") << r.name << " (worst "
                  << fmt(r.worst) << ", bound " << fmt(r.bound) << ")";
        if (!r.detail.empty()) std::cout << " -- " << r.detail;
        std::cout << "\n";
        all_pass = all_pass && r.pass;
    }
    if (!all_pass) {
        std::cerr << "verification failed for seed " << seed << "\n";
        return kExitFailure;
    }
    return kExitOk;
}

int cmd_train_toy(const std::string& config_path) {
    ToyRunConfig cfg = parse_toy_config(config_path);
    std::cout << "method=" << to_string(cfg.method) << " rank=" << cfg.rank
              << " task=" << to_string(cfg.model.task) << " adapter_params="
              << tspt::param_count(cfg.method, cfg.model.d, cfg.model.layers,
                                   cfg.rank)
              << "\n";
    tspt::TrainResult res =
        tspt::run_toy_training(cfg.model, cfg.method, cfg.rank, cfg.train);
    std::cout << "initial_loss=" << fmt(res.initial_loss) << "\n";
    const long stride = std::max<long>(1, cfg.train.total_iters / 10);
    for (std::size_t i = 0; i < res.losses.size(); ++i)
        if ((static_cast<long>(i) + 1) % stride == 0)
            std::cout << "step " << (i + 1) << ": loss=" << fmt(res.losses[i])
                      << "\n";
    std::cout << "final_loss=" << fmt(res.final_loss) << "\n";
    return kExitOk;
}

int cmd_rank_sweep(const std::string& config_path, const std::string& ranks_csv,
                   const std::string& methods_csv, const std::string& out_path) {
    ToyRunConfig cfg = parse_toy_config(config_path);

    std::vector<int> ranks;
    {
        std::stringstream ss(ranks_csv);
        std::string tok;
        while (std::getline(ss, tok, ',')) {
            tok = trim(tok);
            if (tok.empty()) continue;
            int r = 0;
            try {
                r = std::stoi(tok);
            } catch (const std::exception&) {
                throw tspt::InvalidArgument("--ranks: bad entry \"" + tok + "\"");
            }
            if (r < 1 || r > cfg.model.d)
                throw tspt::InvalidArgument("--ranks: rank " + tok +
                                            " out of range [1, d]");
            ranks.push_back(r);
        }
        if (ranks.empty()) throw tspt::InvalidArgument("--ranks: no ranks given");
    }

    std::vector<tspt::Method> methods;
    if (methods_csv.empty()) {
        methods.push_back(cfg.method);
    } else {
        std::stringstream ss(methods_csv);
        std::string tok;
        while (std::getline(ss, tok, ',')) {
            tok = trim(tok);
            if (!tok.empty()) methods.push_back(tspt::method_from_string(tok));
        }
        if (methods.empty())
            throw tspt::InvalidArgument("--methods: no methods given");
    }

    const auto rows = tspt::run_rank_sweep(cfg.model, cfg.train, methods, ranks);
    std::ostringstream csv;
    csv << "method,rank,params,final_loss,seed\n";
    for (const auto& row : rows)
        csv << to_string(row.method) << "," << row.rank << "," << row.params
            << "," << fmt(row.final_loss) << "," << row.seed << "\n";
    if (out_path.empty()) {
        std::cout << csv.str();
    } else {
        std::ofstream out(out_path);
        if (!out) throw tspt::FormatError("cannot open " + out_path);
        out << csv.str();
        std::cout << "wrote " << rows.size() << " rows to " << out_path << "\n";
    }
    return kExitOk;
}

int cmd_seg_metrics(const std::string& pred_path, const std::string& gt_path,
                    double postprocess_mm3, bool postprocess) {
    tspt::Mask3D pred = tspt::read_mask(pred_path);
    tspt::Mask3D gt = tspt::read_mask(gt_path);
    if (postprocess) pred = tspt::remove_small_components(pred, postprocess_mm3);
    const double d = tspt::dice(pred, gt);
    try {
        const double h = tspt::hd95(pred, gt);
        std::cout << "dice=" << fmt(d) << " hd95=" << fmt(h) << "\n";
    } catch (const tspt::UndefinedMetric& e) {
        std::cout << "dice=" << fmt(d) << " hd95=undefined\n";
        std::cerr << "error: " << e.what() << "\n";
        return kExitUndefinedMetric;
    }
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"FFT-based t-SVD weight decomposition and desk-scale "
                 "adapter training"};
    app.require_subcommand(1);

    std::string inspect_path;
    auto* inspect =
        app.add_subcommand("inspect", "validate and describe a container file");
    inspect->add_option("file", inspect_path, "container path")->required();

    int ie_d = 8, ie_layers = 2;
    std::uint64_t ie_seed = 7;
    std::string ie_out, ie_dtype = "f32";
    auto* init_enc = app.add_subcommand(
        "init-encoder", "write a seeded random encoder checkpoint");
    init_enc->add_option("--d", ie_d, "hidden dimension");
    init_enc->add_option("--layers", ie_layers, "transformer layer count");
    init_enc->add_option("--seed", ie_seed, "rng seed");
    init_enc->add_option("--out", ie_out, "output path")->required();
    init_enc->add_option("--dtype", ie_dtype, "f32 or f64");

    std::string dc_in, dc_out, dc_dtype = "f32";
    int dc_rank = 1;
    auto* decompose = app.add_subcommand(
        "decompose", "split a checkpoint into principal factors + residuals");
    decompose->add_option("--in", dc_in, "input checkpoint")->required();
    decompose->add_option("--rank", dc_rank, "truncation rank")->required();
    decompose->add_option("--out", dc_out, "output adapter")->required();
    decompose->add_option("--dtype", dc_dtype, "f32 or f64");

    std::string mg_adapter, mg_out, mg_dtype = "f32";
    auto* merge = app.add_subcommand(
        "merge", "reconstruct effective weights from an adapter");
    merge->add_option("--adapter", mg_adapter, "adapter path")->required();
    merge->add_option("--out", mg_out, "output checkpoint")->required();
    merge->add_option("--dtype", mg_dtype, "f32 or f64");

    std::string cp_method;
    int cp_d = 768, cp_layers = 12, cp_rank = 1;
    auto* count =
        app.add_subcommand("count-params", "trainable adapter parameter count");
    count->add_option("--method", cp_method, "lora-pt, lora, or pissa")
        ->required();
    count->add_option("--d", cp_d, "hidden dimension");
    count->add_option("--layers", cp_layers, "layer count");
    count->add_option("--rank", cp_rank, "rank")->required();

    std::string vf_suite;
    std::uint64_t vf_seed = 7;
    auto* verify = app.add_subcommand("verify", "run a seeded property suite");
    verify->add_option("--suite", vf_suite, "tprod, tsvd, or grad")->required();
    verify->add_option("--seed", vf_seed, "rng seed");

    std::string tt_config;
    auto* train =
        app.add_subcommand("train-toy", "train the desk-scale toy model");
    train->add_option("--config", tt_config, "key=value config file")
        ->required();

    std::string rs_config, rs_ranks, rs_methods, rs_out;
    auto* sweep = app.add_subcommand(
        "rank-sweep", "toy training across a rank grid, CSV output");
    sweep->add_option("--config", rs_config, "key=value config file")
        ->required();
    sweep->add_option("--ranks", rs_ranks, "comma-separated ranks")->required();
    sweep->add_option("--methods", rs_methods,
                      "comma-separated methods (default: config's method)");
    sweep->add_option("--out", rs_out, "CSV output path (default stdout)");

    std::string sm_pred, sm_gt;
    double sm_post = 0.0;
    auto* seg = app.add_subcommand(
        "seg-metrics", "dice and hd95 between two mask containers");
    seg->add_option("--pred", sm_pred, "predicted mask container")->required();
    seg->add_option("--gt", sm_gt, "ground-truth mask container")->required();
    auto* post_opt = seg->add_option(
        "--postprocess", sm_post,
        "remove components smaller than this many mm^3 first");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitBadArgs;
    }

    try {
        if (*inspect) return cmd_inspect(inspect_path);
        if (*init_enc)
            return cmd_init_encoder(ie_d, ie_layers, ie_seed, ie_out,
                                    parse_dtype(ie_dtype));
        if (*decompose)
            return cmd_decompose(dc_in, dc_rank, dc_out, parse_dtype(dc_dtype));
        if (*merge) return cmd_merge(mg_adapter, mg_out, parse_dtype(mg_dtype));
        if (*count) return cmd_count_params(cp_method, cp_d, cp_layers, cp_rank);
        if (*verify) return cmd_verify(vf_suite, vf_seed);
        if (*train) return cmd_train_toy(tt_config);
        if (*sweep)
            return cmd_rank_sweep(rs_config, rs_ranks, rs_methods, rs_out);
        if (*seg)
            return cmd_seg_metrics(sm_pred, sm_gt, sm_post, !post_opt->empty());
    } catch (const tspt::FormatError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitMalformed;
    } catch (const tspt::UndefinedMetric& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUndefinedMetric;
    } catch (const tspt::InvalidArgument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitBadArgs;
    } catch (const tspt::NumericError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitFailure;
    } catch (const tspt::DecompositionError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitFailure;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitFailure;
    }
    return kExitOk;
}
