// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <queue>
#include <string>
#include <vector>

#include "tspt/errors.hpp"

namespace tspt {

/// Dense binary 3D mask with per-axis voxel spacing in millimetres.
/// Voxel (x, y, z) sits at offset (x * ny + y) * nz + z.
struct Mask3D {
    std::array<int, 3> dims{0, 0, 0};
    std::array<double, 3> spacing{1.0, 1.0, 1.0};
    std::vector<std::uint8_t> vox;

    Mask3D() = default;
    Mask3D(int nx, int ny, int nz, std::array<double, 3> sp = {1.0, 1.0, 1.0})
        : dims{nx, ny, nz}, spacing(sp) {
        if (nx < 1 || ny < 1 || nz < 1)
            throw InvalidArgument("Mask3D: dimensions must be positive");
        if (sp[0] <= 0 || sp[1] <= 0 || sp[2] <= 0)
            throw InvalidArgument("Mask3D: spacing must be positive");
        vox.assign(static_cast<std::size_t>(nx) * ny * nz, 0);
    }

    std::size_t index(int x, int y, int z) const {
        return (static_cast<std::size_t>(x) * dims[1] + y) * dims[2] + z;
    }
    bool at(int x, int y, int z) const { return vox[index(x, y, z)] != 0; }
    void set(int x, int y, int z, bool v) { vox[index(x, y, z)] = v ? 1 : 0; }

    std::size_t foreground_count() const {
        std::size_t n = 0;
        for (auto v : vox) n += (v != 0);
        return n;
    }
    double voxel_volume_mm3() const { return spacing[0] * spacing[1] * spacing[2]; }
};

/// Probability volume over the same grid, values in [0, 1].
struct ProbVolume {
    std::array<int, 3> dims{0, 0, 0};
    std::vector<double> values;

    ProbVolume() = default;
    ProbVolume(int nx, int ny, int nz) : dims{nx, ny, nz} {
        if (nx < 1 || ny < 1 || nz < 1)
            throw InvalidArgument("ProbVolume: dimensions must be positive");
        values.assign(static_cast<std::size_t>(nx) * ny * nz, 0.0);
    }
};

namespace detail {

inline void require_same_grid(const Mask3D& a, const Mask3D& b,
                              const char* op) {
    if (a.dims != b.dims)
        throw InvalidArgument(std::string(op) + ": mask dimensions differ");
    if (a.spacing != b.spacing)
        throw InvalidArgument(std::string(op) + ": mask spacings differ");
}

}  // namespace detail

/// Dice overlap 2|A n B| / (|A| + |B|), counted in voxels. Two empty
/// masks compare as identical: the value is defined to be 1.
inline double dice(const Mask3D& a, const Mask3D& b) {
    detail::require_same_grid(a, b, "dice");
    std::size_t inter = 0, ca = 0, cb = 0;
    for (std::size_t i = 0; i < a.vox.size(); ++i) {
        const bool va = a.vox[i] != 0, vb = b.vox[i] != 0;
        inter += (va && vb);
        ca += va;
        cb += vb;
    }
    if (ca + cb == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(ca + cb);
}

/// Foreground voxels with at least one face-adjacent background or
/// out-of-bounds neighbour (6-connectivity surface).
inline std::vector<std::array<int, 3>> boundary_voxels(const Mask3D& m) {
    static constexpr int kFaces[6][3] = {{1, 0, 0},  {-1, 0, 0}, {0, 1, 0},
                                         {0, -1, 0}, {0, 0, 1},  {0, 0, -1}};
    std::vector<std::array<int, 3>> out;
    for (int x = 0; x < m.dims[0]; ++x)
        for (int y = 0; y < m.dims[1]; ++y)
            for (int z = 0; z < m.dims[2]; ++z) {
                if (!m.at(x, y, z)) continue;
                bool surface = false;
                for (const auto& f : kFaces) {
                    const int nx = x + f[0], ny = y + f[1], nz = z + f[2];
                    if (nx < 0 || ny < 0 || nz < 0 || nx >= m.dims[0] ||
                        ny >= m.dims[1] || nz >= m.dims[2] ||
                        !m.at(nx, ny, nz)) {
                        surface = true;
                        break;
                    }
                }
                if (surface) out.push_back({x, y, z});
            }
    return out;
}

namespace detail {

/// 95th-percentile (nearest-rank) of each source boundary point's nearest
/// distance to the target boundary, in millimetres.
inline double directed_hd95(const std::vector<std::array<int, 3>>& from,
                            const std::vector<std::array<int, 3>>& to,
                            const std::array<double, 3>& sp) {
    std::vector<double> dists;
    dists.reserve(from.size());
    for (const auto& p : from) {
        double best = std::numeric_limits<double>::infinity();
        for (const auto& q : to) {
            const double dx = (p[0] - q[0]) * sp[0];
            const double dy = (p[1] - q[1]) * sp[1];
            const double dz = (p[2] - q[2]) * sp[2];
            best = std::min(best, dx * dx + dy * dy + dz * dz);
        }
        dists.push_back(std::sqrt(best));
    }
    std::sort(dists.begin(), dists.end());
    const std::size_t n = dists.size();
    const std::size_t rank = static_cast<std::size_t>(
        std::ceil(0.95 * static_cast<double>(n)));  // 1-based nearest rank
    return dists[std::max<std::size_t>(rank, 1) - 1];
}

}  // namespace detail

/// Robust Hausdorff distance: max of the two directed 95th-percentile
/// boundary distances. Undefined when either mask is empty.
inline double hd95(const Mask3D& a, const Mask3D& b) {
    detail::require_same_grid(a, b, "hd95");
    if (a.foreground_count() == 0 || b.foreground_count() == 0)
        throw UndefinedMetric("hd95: undefined for an empty mask");
    const auto ba = boundary_voxels(a);
    const auto bb = boundary_voxels(b);
    return std::max(detail::directed_hd95(ba, bb, a.spacing),
                    detail::directed_hd95(bb, ba, a.spacing));
}

constexpr double kDiceLossEps = 1e-5;

/// Soft Dice loss over a batch: per sample, 2 sum(y yhat) over
/// (sum y + sum yhat + eps), averaged and negated. Optionally returns
/// d(loss)/d(pred) alongside.
inline double dice_loss(const std::vector<ProbVolume>& pred,
                        const std::vector<Mask3D>& target,
                        std::vector<std::vector<double>>* grad = nullptr) {
    if (pred.empty() || pred.size() != target.size())
        throw InvalidArgument("dice_loss: batch sizes differ or are empty");
    const double n = static_cast<double>(pred.size());
    double loss = 0.0;
    if (grad != nullptr) grad->assign(pred.size(), {});
    for (std::size_t s = 0; s < pred.size(); ++s) {
        const ProbVolume& p = pred[s];
        const Mask3D& t = target[s];
        if (p.dims != t.dims)
            throw InvalidArgument("dice_loss: sample " + std::to_string(s) +
                                  " dims differ");
        double num = 0.0, sum_y = 0.0, sum_p = 0.0;
        for (std::size_t i = 0; i < p.values.size(); ++i) {
            const double y = t.vox[i] != 0 ? 1.0 : 0.0;
            num += 2.0 * y * p.values[i];
            sum_y += y;
            sum_p += p.values[i];
        }
        const double den = sum_y + sum_p + kDiceLossEps;
        loss -= (num / den) / n;
        if (grad != nullptr) {
            auto& g = (*grad)[s];
            g.resize(p.values.size());
            for (std::size_t i = 0; i < p.values.size(); ++i) {
                const double y = t.vox[i] != 0 ? 1.0 : 0.0;
                g[i] = -(2.0 * y * den - num) / (den * den) / n;
            }
        }
    }
    return loss;
}

/// Removes 26-connected foreground components whose physical volume is
/// below min_volume_mm3.
inline Mask3D remove_small_components(const Mask3D& m, double min_volume_mm3) {
    if (min_volume_mm3 < 0)
        throw InvalidArgument("remove_small_components: threshold must be >= 0");
    Mask3D out = m;
    std::vector<std::uint8_t> seen(m.vox.size(), 0);
    const double vol = m.voxel_volume_mm3();
    std::vector<std::size_t> component;
    for (int x = 0; x < m.dims[0]; ++x)
        for (int y = 0; y < m.dims[1]; ++y)
            for (int z = 0; z < m.dims[2]; ++z) {
                const std::size_t start = m.index(x, y, z);
                if (!m.vox[start] || seen[start]) continue;
                component.clear();
                std::queue<std::array<int, 3>> frontier;
                frontier.push({x, y, z});
                seen[start] = 1;
                while (!frontier.empty()) {
                    const auto [cx, cy, cz] = frontier.front();
                    frontier.pop();
                    component.push_back(m.index(cx, cy, cz));
                    for (int dx = -1; dx <= 1; ++dx)
                        for (int dy = -1; dy <= 1; ++dy)
                            for (int dz = -1; dz <= 1; ++dz) {
                                if (dx == 0 && dy == 0 && dz == 0) continue;
                                const int nx = cx + dx, ny = cy + dy,
                                          nz = cz + dz;
                                if (nx < 0 || ny < 0 || nz < 0 ||
                                    nx >= m.dims[0] || ny >= m.dims[1] ||
                                    nz >= m.dims[2])
                                    continue;
                                const std::size_t ni = m.index(nx, ny, nz);
                                if (m.vox[ni] && !seen[ni]) {
                                    seen[ni] = 1;
                                    frontier.push({nx, ny, nz});
                                }
                            }
                }
                if (static_cast<double>(component.size()) * vol <
                    min_volume_mm3)
                    for (std::size_t i : component) out.vox[i] = 0;
            }
    return out;
}

}  // namespace tspt
