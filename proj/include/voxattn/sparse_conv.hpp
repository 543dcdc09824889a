#pragma once

#include <functional>
#include <memory>
#include <unordered_map>
#include <vector>

#include "voxattn/array.hpp"
#include "voxattn/ops.hpp"
#include "voxattn/parallel.hpp"
#include "voxattn/scatter.hpp"
#include "voxattn/tape.hpp"

namespace vx {

// 3x3x1 stencil over the sparse voxel grid: for each active site, the
// neighbor at X/Y offset (dx,dy), same Z, or -1 when that voxel is empty.
// Tap order: t = (dx+1)*3 + (dy+1); tap 8-t is the mirrored offset.
struct NeighborTable {
    i64 m = 0;
    std::vector<i64> nbr;  // m*9
};

inline NeighborTable build_neighbors(const std::vector<VoxelCoord>& coords) {
    NeighborTable t;
    t.m = static_cast<i64>(coords.size());
    std::unordered_map<VoxelCoord, i64, VoxelCoordHash> site_of;
    site_of.reserve(coords.size());
    for (i64 j = 0; j < t.m; ++j) {
        auto [it, inserted] = site_of.try_emplace(coords[static_cast<std::size_t>(j)], j);
        if (!inserted) throw CheckError("build_neighbors: segment table corrupt (duplicate voxel coords)");
    }
    t.nbr.assign(static_cast<std::size_t>(t.m * 9), -1);
    for (i64 j = 0; j < t.m; ++j) {
        const VoxelCoord& c = coords[static_cast<std::size_t>(j)];
        for (i64 dx = -1; dx <= 1; ++dx)
            for (i64 dy = -1; dy <= 1; ++dy) {
                const i64 tap = (dx + 1) * 3 + (dy + 1);
                auto it = site_of.find({c[0] + dx, c[1] + dy, c[2]});
                if (it != site_of.end()) t.nbr[static_cast<std::size_t>(j * 9 + tap)] = it->second;
            }
    }
    return t;
}

// Grouped sparse convolution. h is m x (groups*d); each group g maps its own
// d channels through weight[g, tap, in, out] over the 3x3x1 stencil; absent
// neighbors contribute zero. Output is computed only at active sites.
template <class T>
ArrayT<T> sparse_conv3x3_grouped(TapeT<T>* tape, ArrayT<T> h, std::shared_ptr<const NeighborTable> nt,
                                 ArrayT<T> weight, ArrayT<T> bias) {
    detail::require_rank2("sparse_conv3x3_grouped", h);
    if (weight.rank() != 4 || weight.dim(1) != 9 || weight.dim(2) != weight.dim(3))
        throw ShapeError("sparse_conv3x3_grouped: weight must be [groups,9,d,d], got " + shape_str(weight.shape));
    const i64 groups = weight.dim(0), d = weight.dim(2), m = h.dim(0);
    if (h.dim(1) != groups * d)
        throw ShapeError("sparse_conv3x3_grouped: " + shape_str(h.shape) + " does not match groups*d=" +
                         std::to_string(groups * d));
    if (bias.numel() != groups * d)
        throw ShapeError("sparse_conv3x3_grouped: bias " + shape_str(bias.shape) + " must have groups*d entries");
    if (!nt || nt->m != m) throw ShapeError("sparse_conv3x3_grouped: neighbor table does not cover all sites");
    const i64 c = groups * d;
    auto out = zeros<T>({m, c}, h.requires_grad || weight.requires_grad || bias.requires_grad);
    auto compute = [h, weight, bias, out, nt, groups, d, m, c]() mutable {
        const T* hp = h.ptr();
        const T* wp = weight.ptr();
        const T* bp = bias.ptr();
        T* op = out.ptr();
        parallel_for(m, [&](i64 lo, i64 hi) {
            for (i64 j = lo; j < hi; ++j) {
                T* orow = op + j * c;
                for (i64 t = 0; t < c; ++t) orow[t] = bp[t];
                for (i64 tap = 0; tap < 9; ++tap) {
                    const i64 nj = nt->nbr[static_cast<std::size_t>(j * 9 + tap)];
                    if (nj < 0) continue;
                    const T* hrow = hp + nj * c;
                    for (i64 g = 0; g < groups; ++g) {
                        const T* wg = wp + ((g * 9 + tap) * d) * d;
                        const T* hg = hrow + g * d;
                        T* og = orow + g * d;
                        for (i64 in = 0; in < d; ++in) {
                            const T hv = hg[in];
                            const T* wrow = wg + in * d;
                            for (i64 o = 0; o < d; ++o) og[o] += hv * wrow[o];
                        }
                    }
                }
            }
        });
    };
    compute();
    if (tape) {
        std::function<void()> vjp;
        if (out.requires_grad) {
            vjp = [h, weight, bias, out, nt, groups, d, m, c]() mutable {
                const T* g = out.grad_ptr();
                if (bias.requires_grad) {
                    bias.ensure_grad();
                    T* gb = bias.grad_ptr();
                    for (i64 j = 0; j < m; ++j)
                        for (i64 t = 0; t < c; ++t) gb[t] += g[j * c + t];
                }
                if (weight.requires_grad) {
                    weight.ensure_grad();
                    T* gw = weight.grad_ptr();
                    const T* hp = h.ptr();
                    parallel_for(groups, [&](i64 glo, i64 ghi) {
                        for (i64 grp = glo; grp < ghi; ++grp)
                            for (i64 j = 0; j < m; ++j)
                                for (i64 tap = 0; tap < 9; ++tap) {
                                    const i64 nj = nt->nbr[static_cast<std::size_t>(j * 9 + tap)];
                                    if (nj < 0) continue;
                                    const T* hg = hp + nj * c + grp * d;
                                    const T* gg = g + j * c + grp * d;
                                    T* wg = gw + ((grp * 9 + tap) * d) * d;
                                    for (i64 in = 0; in < d; ++in) {
                                        const T hv = hg[in];
                                        T* wrow = wg + in * d;
                                        for (i64 o = 0; o < d; ++o) wrow[o] += hv * gg[o];
                                    }
                                }
                    });
                }
                if (h.requires_grad) {
                    h.ensure_grad();
                    T* gh = h.grad_ptr();
                    const T* wp = weight.ptr();
                    // dh[j'] collects from sites whose stencil reaches j';
                    // by symmetry those are the mirrored taps of j' itself.
                    parallel_for(m, [&](i64 lo, i64 hi) {
                        for (i64 j = lo; j < hi; ++j) {
                            T* ghrow = gh + j * c;
                            for (i64 tap = 0; tap < 9; ++tap) {
                                const i64 src = nt->nbr[static_cast<std::size_t>(j * 9 + tap)];
                                if (src < 0) continue;
                                const i64 mtap = 8 - tap;
                                const T* gg = g + src * c;
                                for (i64 grp = 0; grp < groups; ++grp) {
                                    const T* wg = wp + ((grp * 9 + mtap) * d) * d;
                                    const T* gsrc = gg + grp * d;
                                    T* ghg = ghrow + grp * d;
                                    for (i64 in = 0; in < d; ++in) {
                                        const T* wrow = wg + in * d;
                                        T s = 0;
                                        for (i64 o = 0; o < d; ++o) s += wrow[o] * gsrc[o];
                                        ghg[in] += s;
                                    }
                                }
                            }
                        }
                    });
                }
            };
        }
        tape->record("sparse_conv3x3_grouped", {h, weight, bias}, out, std::move(vjp), compute);
    }
    return out;
}

}  // namespace vx
