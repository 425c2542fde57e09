// SPDX-License-Identifier: Apache-2.0
//
// Named-array binary container: 8-byte magic "TSPT0001", a little-endian
// u64 header length, a UTF-8 JSON header describing the arrays, then the
// raw little-endian payload with every array 64-byte aligned relative to
// the payload start. Arrays are row-major (last index fastest); Tensor3
// payloads use the slice-major shape [n3, rows, cols].
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "tspt/adapters.hpp"
#include "tspt/errors.hpp"
#include "tspt/segmetrics.hpp"
#include "tspt/tensor3.hpp"

namespace tspt {

static_assert(std::endian::native == std::endian::little,
              "container I/O assumes a little-endian host");

inline constexpr char kContainerMagic[8] = {'T', 'S', 'P', 'T',
                                            '0', '0', '0', '1'};
inline constexpr std::uint64_t kArrayAlignment = 64;

enum class Dtype { F32, F64, U8 };

inline std::string to_string(Dtype d) {
    switch (d) {
        case Dtype::F32: return "f32";
        case Dtype::F64: return "f64";
        case Dtype::U8: return "u8";
    }
    throw InvalidArgument("unknown dtype");
}

inline Dtype dtype_from_string(const std::string& s) {
    if (s == "f32") return Dtype::F32;
    if (s == "f64") return Dtype::F64;
    if (s == "u8") return Dtype::U8;
    throw FormatError("unknown dtype: \"" + s + "\"");
}

inline std::size_t dtype_size(Dtype d) {
    switch (d) {
        case Dtype::F32: return 4;
        case Dtype::F64: return 8;
        case Dtype::U8: return 1;
    }
    return 0;
}

struct ArrayInfo {
    std::string name;
    Dtype dtype = Dtype::F64;
    std::vector<std::int64_t> shape;
    std::uint64_t offset = 0;
    std::uint64_t nbytes = 0;

    std::int64_t element_count() const {
        std::int64_t n = 1;
        for (auto s : shape) n *= s;
        return n;
    }
};

// ---------------------------------------------------------------------------
// Writer
// ---------------------------------------------------------------------------

class ContainerWriter {
public:
    nlohmann::json& meta() { return meta_; }

    void add_f64(const std::string& name, std::vector<std::int64_t> shape,
                 const double* data, std::size_t n) {
        check_count(name, shape, n);
        std::vector<std::uint8_t> bytes(n * sizeof(double));
        std::memcpy(bytes.data(), data, bytes.size());
        push(name, Dtype::F64, std::move(shape), std::move(bytes));
    }

    void add_f32(const std::string& name, std::vector<std::int64_t> shape,
                 const double* data, std::size_t n) {
        check_count(name, shape, n);
        std::vector<std::uint8_t> bytes(n * sizeof(float));
        for (std::size_t i = 0; i < n; ++i) {
            const float v = static_cast<float>(data[i]);
            std::memcpy(bytes.data() + i * sizeof(float), &v, sizeof(float));
        }
        push(name, Dtype::F32, std::move(shape), std::move(bytes));
    }

    void add_real(const std::string& name, std::vector<std::int64_t> shape,
                  const double* data, std::size_t n, Dtype dt) {
        if (dt == Dtype::F64)
            add_f64(name, std::move(shape), data, n);
        else if (dt == Dtype::F32)
            add_f32(name, std::move(shape), data, n);
        else
            throw InvalidArgument("add_real: dtype must be f32 or f64");
    }

    void add_u8(const std::string& name, std::vector<std::int64_t> shape,
                const std::uint8_t* data, std::size_t n) {
        check_count(name, shape, n);
        push(name, Dtype::U8, std::move(shape),
             std::vector<std::uint8_t>(data, data + n));
    }

    /// Row-major serialization of a column-major Eigen matrix.
    void add_matrix(const std::string& name, const Eigen::MatrixXd& m,
                    Dtype dt) {
        std::vector<double> row_major(static_cast<std::size_t>(m.size()));
        std::size_t p = 0;
        for (Eigen::Index i = 0; i < m.rows(); ++i)
            for (Eigen::Index j = 0; j < m.cols(); ++j) row_major[p++] = m(i, j);
        add_real(name, {m.rows(), m.cols()}, row_major.data(), row_major.size(),
                 dt);
    }

    /// Tensor3 is stored exactly as laid out in memory: [n3, n1, n2].
    void add_tensor(const std::string& name, const Tensor3& t, Dtype dt) {
        add_real(name, {t.n3, t.n1, t.n2}, t.data.data(), t.data.size(), dt);
    }

    void write(const std::string& path) const {
        nlohmann::json header;
        header["arrays"] = nlohmann::json::array();
        std::uint64_t cursor = 0;
        std::vector<std::uint64_t> offsets;
        for (const auto& a : pending_) {
            cursor = align_up(cursor);
            offsets.push_back(cursor);
            nlohmann::json j;
            j["name"] = a.info.name;
            j["dtype"] = to_string(a.info.dtype);
            j["shape"] = a.info.shape;
            j["offset"] = cursor;
            j["nbytes"] = a.bytes.size();
            header["arrays"].push_back(std::move(j));
            cursor += a.bytes.size();
        }
        header["meta"] = meta_;
        const std::string text = header.dump();

        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw FormatError("cannot open " + path + " for writing");
        out.write(kContainerMagic, sizeof(kContainerMagic));
        const std::uint64_t hlen = text.size();
        out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
        out.write(text.data(), static_cast<std::streamsize>(text.size()));
        std::uint64_t written = 0;
        for (std::size_t i = 0; i < pending_.size(); ++i) {
            while (written < offsets[i]) {
                out.put('\0');
                ++written;
            }
            out.write(reinterpret_cast<const char*>(pending_[i].bytes.data()),
                      static_cast<std::streamsize>(pending_[i].bytes.size()));
            written += pending_[i].bytes.size();
        }
        if (!out) throw FormatError("write failed for " + path);
    }

private:
    struct Pending {
        ArrayInfo info;
        std::vector<std::uint8_t> bytes;
    };

    static std::uint64_t align_up(std::uint64_t v) {
        return (v + kArrayAlignment - 1) / kArrayAlignment * kArrayAlignment;
    }

    void check_count(const std::string& name,
                     const std::vector<std::int64_t>& shape, std::size_t n) {
        std::int64_t prod = 1;
        for (auto s : shape) {
            if (s < 1) throw InvalidArgument("array " + name + ": bad shape");
            prod *= s;
        }
        if (static_cast<std::size_t>(prod) != n)
            throw InvalidArgument("array " + name +
                                  ": shape does not match element count");
        for (const auto& p : pending_)
            if (p.info.name == name)
                throw InvalidArgument("array " + name + ": duplicate name");
    }

    void push(const std::string& name, Dtype dt,
              std::vector<std::int64_t> shape, std::vector<std::uint8_t> bytes) {
        Pending p;
        p.info.name = name;
        p.info.dtype = dt;
        p.info.shape = std::move(shape);
        p.info.nbytes = bytes.size();
        p.bytes = std::move(bytes);
        pending_.push_back(std::move(p));
    }

    nlohmann::json meta_ = nlohmann::json::object();
    std::vector<Pending> pending_;
};

// ---------------------------------------------------------------------------
// Reader
// ---------------------------------------------------------------------------

class Container {
public:
    std::vector<ArrayInfo> arrays;
    nlohmann::json meta;

    static Container load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw FormatError("cannot open " + path);
        char magic[8];
        in.read(magic, 8);
        if (in.gcount() != 8 || std::memcmp(magic, kContainerMagic, 8) != 0)
            throw FormatError(path + ": bad magic (not a TSPT0001 container)");
        std::uint64_t hlen = 0;
        in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
        if (!in || hlen == 0 || hlen > (1ull << 31))
            throw FormatError(path + ": implausible header length");
        std::string text(hlen, '\0');
        in.read(text.data(), static_cast<std::streamsize>(hlen));
        if (static_cast<std::uint64_t>(in.gcount()) != hlen)
            throw FormatError(path + ": truncated header");

        Container c;
        nlohmann::json header;
        try {
            header = nlohmann::json::parse(text);
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(path + ": header is not valid JSON: " + e.what());
        }
        if (!header.contains("arrays") || !header["arrays"].is_array())
            throw FormatError(path + ": header lacks an arrays list");
        c.meta = header.value("meta", nlohmann::json::object());
        for (const auto& j : header["arrays"]) {
            try {
                ArrayInfo a;
                a.name = j.at("name").get<std::string>();
                a.dtype = dtype_from_string(j.at("dtype").get<std::string>());
                a.shape = j.at("shape").get<std::vector<std::int64_t>>();
                a.offset = j.at("offset").get<std::uint64_t>();
                a.nbytes = j.at("nbytes").get<std::uint64_t>();
                c.arrays.push_back(std::move(a));
            } catch (const nlohmann::json::exception& e) {
                throw FormatError(path + ": malformed array entry: " + e.what());
            }
        }

        c.payload_.assign(std::istreambuf_iterator<char>(in),
                          std::istreambuf_iterator<char>());
        c.validate(path);
        return c;
    }

    const ArrayInfo* find(const std::string& name) const {
        for (const auto& a : arrays)
            if (a.name == name) return &a;
        return nullptr;
    }

    const ArrayInfo& require(const std::string& name) const {
        const ArrayInfo* a = find(name);
        if (a == nullptr) throw FormatError("missing array \"" + name + "\"");
        return *a;
    }

    std::vector<double> as_f64(const std::string& name) const {
        const ArrayInfo& a = require(name);
        const std::uint8_t* base = payload_.data() + a.offset;
        const std::size_t n = static_cast<std::size_t>(a.element_count());
        std::vector<double> out(n);
        switch (a.dtype) {
            case Dtype::F64:
                std::memcpy(out.data(), base, n * sizeof(double));
                break;
            case Dtype::F32:
                for (std::size_t i = 0; i < n; ++i) {
                    float v;
                    std::memcpy(&v, base + i * sizeof(float), sizeof(float));
                    out[i] = static_cast<double>(v);
                }
                break;
            case Dtype::U8:
                for (std::size_t i = 0; i < n; ++i)
                    out[i] = static_cast<double>(base[i]);
                break;
        }
        return out;
    }

    Eigen::MatrixXd as_matrix(const std::string& name) const {
        const ArrayInfo& a = require(name);
        if (a.shape.size() != 2)
            throw FormatError("array \"" + name + "\" is not 2-D");
        const std::vector<double> flat = as_f64(name);
        Eigen::MatrixXd m(a.shape[0], a.shape[1]);
        std::size_t p = 0;
        for (Eigen::Index i = 0; i < m.rows(); ++i)
            for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = flat[p++];
        return m;
    }

    Tensor3 as_tensor(const std::string& name) const {
        const ArrayInfo& a = require(name);
        if (a.shape.size() != 3)
            throw FormatError("array \"" + name + "\" is not 3-D");
        Tensor3 t(static_cast<int>(a.shape[1]), static_cast<int>(a.shape[2]),
                  static_cast<int>(a.shape[0]));
        t.data = as_f64(name);
        return t;
    }

private:
    void validate(const std::string& path) const {
        std::uint64_t prev_end = 0;
        std::map<std::string, int> seen;
        for (const auto& a : arrays) {
            if (a.name.empty()) throw FormatError(path + ": unnamed array");
            if (++seen[a.name] > 1)
                throw FormatError(path + ": duplicate array name " + a.name);
            if (a.offset % kArrayAlignment != 0)
                throw FormatError(path + ": array " + a.name +
                                  " is not 64-byte aligned");
            if (a.offset < prev_end)
                throw FormatError(path + ": arrays overlap or are unordered at " +
                                  a.name);
            const std::uint64_t expect =
                static_cast<std::uint64_t>(a.element_count()) *
                dtype_size(a.dtype);
            if (a.nbytes != expect)
                throw FormatError(path + ": array " + a.name +
                                  " nbytes does not match dtype x shape");
            if (a.offset + a.nbytes > payload_.size())
                throw FormatError(path + ": array " + a.name +
                                  " extends past the payload");
            prev_end = a.offset + a.nbytes;
        }
    }

    std::vector<std::uint8_t> payload_;
};

// ---------------------------------------------------------------------------
// Checkpoint / adapter / mask schemas
// ---------------------------------------------------------------------------

inline const char* kRoleNames[6] = {"q", "k", "v", "o", "up", "down"};

inline void write_checkpoint(const std::string& path, const EncoderWeights& w,
                             Dtype dt = Dtype::F32) {
    validate_encoder(w);
    ContainerWriter cw;
    cw.meta()["kind"] = "checkpoint";
    cw.meta()["d"] = w.d;
    cw.meta()["layers"] = w.layers;
    for (int l = 0; l < w.layers; ++l) {
        const std::string p = "layer." + std::to_string(l + 1) + ".";
        cw.add_matrix(p + "q", w.layer[l].q, dt);
        cw.add_matrix(p + "k", w.layer[l].k, dt);
        cw.add_matrix(p + "v", w.layer[l].v, dt);
        cw.add_matrix(p + "o", w.layer[l].o, dt);
        cw.add_matrix(p + "up", w.layer[l].up, dt);
        cw.add_matrix(p + "down", w.layer[l].down, dt);
    }
    for (const auto& [name, vec] : w.extras)
        cw.add_real(name, {vec.size()}, vec.data(),
                    static_cast<std::size_t>(vec.size()), dt);
    cw.write(path);
}

inline EncoderWeights read_checkpoint(const std::string& path) {
    Container c = Container::load(path);
    if (c.meta.value("kind", "") != "checkpoint")
        throw FormatError(path + ": not a checkpoint container");
    if (!c.meta.contains("d") || !c.meta.contains("layers"))
        throw FormatError(path + ": checkpoint meta lacks d/layers");
    EncoderWeights w;
    w.d = c.meta["d"].get<int>();
    w.layers = c.meta["layers"].get<int>();
    if (w.d < 1 || w.layers < 1)
        throw FormatError(path + ": bad d/layers in meta");
    w.layer.resize(w.layers);
    std::map<std::string, bool> consumed;
    for (int l = 0; l < w.layers; ++l) {
        const std::string p = "layer." + std::to_string(l + 1) + ".";
        w.layer[l].q = c.as_matrix(p + "q");
        w.layer[l].k = c.as_matrix(p + "k");
        w.layer[l].v = c.as_matrix(p + "v");
        w.layer[l].o = c.as_matrix(p + "o");
        w.layer[l].up = c.as_matrix(p + "up");
        w.layer[l].down = c.as_matrix(p + "down");
        for (const char* role : kRoleNames) consumed[p + role] = true;
    }
    for (const auto& a : c.arrays) {
        if (consumed.count(a.name)) continue;
        const std::vector<double> flat = c.as_f64(a.name);
        Eigen::VectorXd v(static_cast<Eigen::Index>(flat.size()));
        for (std::size_t i = 0; i < flat.size(); ++i)
            v(static_cast<Eigen::Index>(i)) = flat[i];
        w.extras[a.name] = std::move(v);
    }
    try {
        validate_encoder(w);
    } catch (const InvalidArgument& e) {
        throw FormatError(path + ": " + e.what());
    }
    return w;
}

inline void write_adapter(const std::string& path, const LoRAPTAdapter& a,
                          Dtype dt = Dtype::F32) {
    ContainerWriter cw;
    cw.meta()["kind"] = "adapter";
    cw.meta()["method"] = "lora-pt";
    cw.meta()["rank"] = a.rank;
    cw.meta()["d"] = a.d;
    cw.meta()["layers"] = a.layers;
    cw.meta()["stack_order"] = to_string(a.stack_order);
    auto emit = [&](const std::string& prefix, const PrincipalFactors& p,
                    const Tensor3& residual) {
        cw.add_tensor(prefix + ".U", p.u, dt);
        cw.add_matrix(prefix + ".S_tubes", p.s_tubes, dt);
        cw.add_tensor(prefix + ".V", p.v, dt);
        cw.add_tensor(prefix + ".residual", residual, dt);
    };
    emit("w_sa", a.sa, a.residual_sa);
    emit("w_up", a.up, a.residual_up);
    emit("w_down", a.down, a.residual_down);
    for (const auto& [name, vec] : a.extras)
        cw.add_real(name, {vec.size()}, vec.data(),
                    static_cast<std::size_t>(vec.size()), dt);
    cw.write(path);
}

inline LoRAPTAdapter read_adapter(const std::string& path) {
    Container c = Container::load(path);
    if (c.meta.value("kind", "") != "adapter")
        throw FormatError(path + ": not an adapter container");
    if (c.meta.value("method", "") != "lora-pt")
        throw FormatError(path + ": unsupported adapter method \"" +
                          c.meta.value("method", "") + "\"");
    LoRAPTAdapter a;
    try {
        a.rank = c.meta.at("rank").get<int>();
        a.d = c.meta.at("d").get<int>();
        a.layers = c.meta.at("layers").get<int>();
        a.stack_order =
            stack_order_from_string(c.meta.at("stack_order").get<std::string>());
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path + ": adapter meta incomplete: " + e.what());
    } catch (const InvalidArgument& e) {
        throw FormatError(path + ": " + e.what());
    }
    std::map<std::string, bool> consumed;
    auto take = [&](const std::string& prefix, PrincipalFactors& p,
                    Tensor3& residual) {
        p.u = c.as_tensor(prefix + ".U");
        p.s_tubes = c.as_matrix(prefix + ".S_tubes");
        p.v = c.as_tensor(prefix + ".V");
        residual = c.as_tensor(prefix + ".residual");
        for (const char* n : {".U", ".S_tubes", ".V", ".residual"})
            consumed[prefix + n] = true;
        if (p.u.n2 != a.rank || p.v.n2 != a.rank ||
            p.s_tubes.rows() != a.rank || p.s_tubes.cols() != p.u.n3 ||
            residual.n1 != p.u.n1 || residual.n2 != p.v.n1 ||
            residual.n3 != p.u.n3)
            throw FormatError(path + ": " + prefix +
                              " arrays inconsistent with meta");
    };
    take("w_sa", a.sa, a.residual_sa);
    take("w_up", a.up, a.residual_up);
    take("w_down", a.down, a.residual_down);
    if (a.residual_sa.n1 != a.d || a.residual_sa.n3 != 4 * a.layers ||
        a.residual_up.n2 != 4 * a.d || a.residual_down.n1 != 4 * a.d)
        throw FormatError(path + ": adapter tensor shapes do not match d/layers");
    for (const auto& arr : c.arrays) {
        if (consumed.count(arr.name)) continue;
        const std::vector<double> flat = c.as_f64(arr.name);
        Eigen::VectorXd v(static_cast<Eigen::Index>(flat.size()));
        for (std::size_t i = 0; i < flat.size(); ++i)
            v(static_cast<Eigen::Index>(i)) = flat[i];
        a.extras[arr.name] = std::move(v);
    }
    return a;
}

/// Masks store voxels as f32 zeros/ones (u8 also accepted on read) under
/// the single array name "mask", with spacing in the meta.
inline void write_mask(const std::string& path, const Mask3D& m,
                       Dtype dt = Dtype::F32) {
    ContainerWriter cw;
    cw.meta()["kind"] = "mask";
    cw.meta()["spacing"] = {m.spacing[0], m.spacing[1], m.spacing[2]};
    const std::vector<std::int64_t> shape = {m.dims[0], m.dims[1], m.dims[2]};
    if (dt == Dtype::U8) {
        cw.add_u8("mask", shape, m.vox.data(), m.vox.size());
    } else {
        std::vector<double> vals(m.vox.size());
        for (std::size_t i = 0; i < m.vox.size(); ++i)
            vals[i] = m.vox[i] ? 1.0 : 0.0;
        cw.add_real("mask", shape, vals.data(), vals.size(), dt);
    }
    cw.write(path);
}

inline Mask3D read_mask(const std::string& path) {
    Container c = Container::load(path);
    if (c.meta.value("kind", "") != "mask")
        throw FormatError(path + ": not a mask container");
    const ArrayInfo& a = c.require("mask");
    if (a.shape.size() != 3) throw FormatError(path + ": mask is not 3-D");
    std::array<double, 3> spacing = {1.0, 1.0, 1.0};
    if (c.meta.contains("spacing")) {
        auto sp = c.meta["spacing"].get<std::vector<double>>();
        if (sp.size() != 3) throw FormatError(path + ": spacing must have 3 entries");
        spacing = {sp[0], sp[1], sp[2]};
    }
    Mask3D m(static_cast<int>(a.shape[0]), static_cast<int>(a.shape[1]),
             static_cast<int>(a.shape[2]), spacing);
    const std::vector<double> vals = c.as_f64("mask");
    for (std::size_t i = 0; i < vals.size(); ++i) {
        if (vals[i] != 0.0 && vals[i] != 1.0)
            throw FormatError(path + ": mask voxels must be 0 or 1");
        m.vox[i] = vals[i] != 0.0 ? 1 : 0;
    }
    return m;
}

}  // namespace tspt
