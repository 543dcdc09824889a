#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <unordered_map>
#include <vector>

#include "voxattn/array.hpp"
#include "voxattn/ops.hpp"
#include "voxattn/parallel.hpp"
#include "voxattn/tape.hpp"

namespace vx {

using VoxelCoord = std::array<i64, 3>;

struct VoxelCoordHash {
    std::size_t operator()(const VoxelCoord& c) const {
        std::uint64_t h = 0x9e3779b97f4a7c15ULL;
        for (i64 v : c) {
            std::uint64_t x = static_cast<std::uint64_t>(v) + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
            x ^= x >> 30;
            x *= 0xbf58476d1ce4e5b9ULL;
            x ^= x >> 27;
            h ^= x;
        }
        return static_cast<std::size_t>(h);
    }
};

// Maps each point to a dense segment id (one per occupied voxel). Ids are
// assigned by first occurrence in point order. The CSR view (offsets/order)
// lists each segment's points in ascending point index, which is the
// reduction order every scatter op follows.
struct SegmentTable {
    std::vector<i64> seg_of_point;          // n entries in [0, m)
    std::vector<VoxelCoord> voxel_coords;   // m distinct triples
    std::vector<i64> counts;                // m positive entries
    i64 m = 0;
    std::vector<i64> offsets;               // m+1
    std::vector<i64> order;                 // n point indices grouped by segment

    i64 n() const { return static_cast<i64>(seg_of_point.size()); }

    void build_csr() {
        offsets.assign(static_cast<std::size_t>(m) + 1, 0);
        for (i64 s : seg_of_point) offsets[static_cast<std::size_t>(s) + 1]++;
        for (i64 j = 0; j < m; ++j) offsets[static_cast<std::size_t>(j) + 1] += offsets[static_cast<std::size_t>(j)];
        order.assign(seg_of_point.size(), 0);
        std::vector<i64> cursor(offsets.begin(), offsets.end() - 1);
        for (i64 i = 0; i < n(); ++i) {
            const i64 s = seg_of_point[static_cast<std::size_t>(i)];
            order[static_cast<std::size_t>(cursor[static_cast<std::size_t>(s)]++)] = i;
        }
    }
};

inline SegmentTable build_segments(const std::vector<VoxelCoord>& voxel_of_point) {
    if (voxel_of_point.empty()) throw ShapeError("build_segments: no points");
    SegmentTable t;
    t.seg_of_point.reserve(voxel_of_point.size());
    std::unordered_map<VoxelCoord, i64, VoxelCoordHash> ids;
    ids.reserve(voxel_of_point.size());
    for (const auto& c : voxel_of_point) {
        auto [it, inserted] = ids.try_emplace(c, t.m);
        if (inserted) {
            t.voxel_coords.push_back(c);
            t.counts.push_back(0);
            t.m++;
        }
        t.seg_of_point.push_back(it->second);
        t.counts[static_cast<std::size_t>(it->second)]++;
    }
    t.build_csr();
    return t;
}

namespace detail {

inline void require_segments(const char* op, const SegmentTable& seg) {
    if (seg.m < 1 || seg.n() < 1) throw CheckError(std::string(op) + ": empty segment table");
    if (seg.offsets.size() != static_cast<std::size_t>(seg.m) + 1 || seg.order.size() != seg.seg_of_point.size())
        throw CheckError(std::string(op) + ": segment table missing CSR view");
}

template <class T>
void require_points(const char* op, const ArrayT<T>& x, const SegmentTable& seg) {
    require_segments(op, seg);
    require_rank2(op, x);
    if (x.dim(0) != seg.n())
        throw ShapeError(std::string(op) + ": " + shape_str(x.shape) + " does not cover " + std::to_string(seg.n()) +
                         " points");
}

}  // namespace detail

// out[j] = sum over the segment's points in ascending point index
template <class T>
ArrayT<T> scatter_sum(TapeT<T>* tape, ArrayT<T> x, const SegmentTable& seg) {
    detail::require_points("scatter_sum", x, seg);
    const i64 c = x.dim(1), m = seg.m;
    auto out = zeros<T>({m, c}, x.requires_grad);
    auto segp = std::make_shared<const SegmentTable>(seg);
    auto compute = [x, out, segp, c, m]() mutable {
        const T* xp = x.ptr();
        T* op = out.ptr();
        parallel_for(m, [&](i64 lo, i64 hi) {
            for (i64 j = lo; j < hi; ++j) {
                T* orow = op + j * c;
                std::fill(orow, orow + c, T(0));
                for (i64 idx = segp->offsets[static_cast<std::size_t>(j)]; idx < segp->offsets[static_cast<std::size_t>(j) + 1]; ++idx) {
                    const T* xrow = xp + segp->order[static_cast<std::size_t>(idx)] * c;
                    for (i64 t = 0; t < c; ++t) orow[t] += xrow[t];
                }
            }
        });
    };
    compute();
    if (tape) {
        std::function<void()> vjp;
        if (out.requires_grad) {
            vjp = [x, out, segp, c]() mutable {
                x.ensure_grad();
                const T* g = out.grad_ptr();
                T* gx = x.grad_ptr();
                const i64 n = segp->n();
                parallel_for(n, [&](i64 lo, i64 hi) {
                    for (i64 i = lo; i < hi; ++i) {
                        const T* grow = g + segp->seg_of_point[static_cast<std::size_t>(i)] * c;
                        for (i64 t = 0; t < c; ++t) gx[i * c + t] += grow[t];
                    }
                });
            };
        }
        tape->record("scatter_sum", {x}, out, std::move(vjp), compute);
    }
    return out;
}

// elementwise max per segment; ties keep the lowest point index
template <class T>
ArrayT<T> scatter_max(TapeT<T>* tape, ArrayT<T> x, const SegmentTable& seg) {
    detail::require_points("scatter_max", x, seg);
    const i64 c = x.dim(1), m = seg.m;
    auto out = zeros<T>({m, c}, x.requires_grad);
    auto argmax = std::make_shared<std::vector<i64>>(static_cast<std::size_t>(m * c), i64(-1));
    auto segp = std::make_shared<const SegmentTable>(seg);
    auto compute = [x, out, segp, argmax, c, m]() mutable {
        const T* xp = x.ptr();
        T* op = out.ptr();
        parallel_for(m, [&](i64 lo, i64 hi) {
            for (i64 j = lo; j < hi; ++j) {
                T* orow = op + j * c;
                i64* arow = argmax->data() + j * c;
                bool first = true;
                for (i64 idx = segp->offsets[static_cast<std::size_t>(j)]; idx < segp->offsets[static_cast<std::size_t>(j) + 1]; ++idx) {
                    const i64 i = segp->order[static_cast<std::size_t>(idx)];
                    const T* xrow = xp + i * c;
                    if (first) {
                        for (i64 t = 0; t < c; ++t) {
                            orow[t] = xrow[t];
                            arow[t] = i;
                        }
                        first = false;
                    } else {
                        for (i64 t = 0; t < c; ++t)
                            if (xrow[t] > orow[t]) {
                                orow[t] = xrow[t];
                                arow[t] = i;
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
            vjp = [x, out, argmax, c, m]() mutable {
                x.ensure_grad();
                const T* g = out.grad_ptr();
                T* gx = x.grad_ptr();
                for (i64 j = 0; j < m; ++j)
                    for (i64 t = 0; t < c; ++t) gx[(*argmax)[static_cast<std::size_t>(j * c + t)] * c + t] += g[j * c + t];
            };
        }
        tape->record("scatter_max", {x}, out, std::move(vjp), compute);
    }
    return out;
}

template <class T>
ArrayT<T> scatter_mean(TapeT<T>* tape, ArrayT<T> x, const SegmentTable& seg) {
    detail::require_points("scatter_mean", x, seg);
    const i64 c = x.dim(1), m = seg.m;
    auto out = zeros<T>({m, c}, x.requires_grad);
    auto segp = std::make_shared<const SegmentTable>(seg);
    auto compute = [x, out, segp, c, m]() mutable {
        const T* xp = x.ptr();
        T* op = out.ptr();
        parallel_for(m, [&](i64 lo, i64 hi) {
            for (i64 j = lo; j < hi; ++j) {
                T* orow = op + j * c;
                std::fill(orow, orow + c, T(0));
                for (i64 idx = segp->offsets[static_cast<std::size_t>(j)]; idx < segp->offsets[static_cast<std::size_t>(j) + 1]; ++idx) {
                    const T* xrow = xp + segp->order[static_cast<std::size_t>(idx)] * c;
                    for (i64 t = 0; t < c; ++t) orow[t] += xrow[t];
                }
                const T inv = T(1) / static_cast<T>(segp->counts[static_cast<std::size_t>(j)]);
                for (i64 t = 0; t < c; ++t) orow[t] *= inv;
            }
        });
    };
    compute();
    if (tape) {
        std::function<void()> vjp;
        if (out.requires_grad) {
            vjp = [x, out, segp, c]() mutable {
                x.ensure_grad();
                const T* g = out.grad_ptr();
                T* gx = x.grad_ptr();
                const i64 n = segp->n();
                parallel_for(n, [&](i64 lo, i64 hi) {
                    for (i64 i = lo; i < hi; ++i) {
                        const i64 j = segp->seg_of_point[static_cast<std::size_t>(i)];
                        const T inv = T(1) / static_cast<T>(segp->counts[static_cast<std::size_t>(j)]);
                        for (i64 t = 0; t < c; ++t) gx[i * c + t] += g[j * c + t] * inv;
                    }
                });
            };
        }
        tape->record("scatter_mean", {x}, out, std::move(vjp), compute);
    }
    return out;
}

// Per segment and per column: softmax over that segment's points,
// stabilized by the segment-column max. Output keeps the n x k layout.
template <class T>
ArrayT<T> scatter_softmax(TapeT<T>* tape, ArrayT<T> x, const SegmentTable& seg) {
    detail::require_points("scatter_softmax", x, seg);
    const i64 k = x.dim(1), m = seg.m;
    auto out = zeros<T>(x.shape, x.requires_grad);
    auto segp = std::make_shared<const SegmentTable>(seg);
    auto compute = [x, out, segp, k, m]() mutable {
        const T* xp = x.ptr();
        T* op = out.ptr();
        parallel_for(m, [&](i64 lo, i64 hi) {
            std::vector<T> mx(static_cast<std::size_t>(k)), denom(static_cast<std::size_t>(k));
            for (i64 j = lo; j < hi; ++j) {
                const i64 beg = segp->offsets[static_cast<std::size_t>(j)], end = segp->offsets[static_cast<std::size_t>(j) + 1];
                for (i64 idx = beg; idx < end; ++idx) {
                    const T* xrow = xp + segp->order[static_cast<std::size_t>(idx)] * k;
                    if (idx == beg)
                        for (i64 t = 0; t < k; ++t) mx[static_cast<std::size_t>(t)] = xrow[t];
                    else
                        for (i64 t = 0; t < k; ++t)
                            if (xrow[t] > mx[static_cast<std::size_t>(t)]) mx[static_cast<std::size_t>(t)] = xrow[t];
                }
                std::fill(denom.begin(), denom.end(), T(0));
                for (i64 idx = beg; idx < end; ++idx) {
                    const i64 i = segp->order[static_cast<std::size_t>(idx)];
                    const T* xrow = xp + i * k;
                    T* orow = op + i * k;
                    for (i64 t = 0; t < k; ++t) {
                        orow[t] = std::exp(xrow[t] - mx[static_cast<std::size_t>(t)]);
                        denom[static_cast<std::size_t>(t)] += orow[t];
                    }
                }
                for (i64 idx = beg; idx < end; ++idx) {
                    T* orow = op + segp->order[static_cast<std::size_t>(idx)] * k;
                    for (i64 t = 0; t < k; ++t) orow[t] /= denom[static_cast<std::size_t>(t)];
                }
            }
        });
    };
    compute();
    if (tape) {
        std::function<void()> vjp;
        if (out.requires_grad) {
            vjp = [x, out, segp, k, m]() mutable {
                x.ensure_grad();
                const T* g = out.grad_ptr();
                const T* y = out.ptr();
                T* gx = x.grad_ptr();
                parallel_for(m, [&](i64 lo, i64 hi) {
                    std::vector<T> dot(static_cast<std::size_t>(k));
                    for (i64 j = lo; j < hi; ++j) {
                        const i64 beg = segp->offsets[static_cast<std::size_t>(j)], end = segp->offsets[static_cast<std::size_t>(j) + 1];
                        std::fill(dot.begin(), dot.end(), T(0));
                        for (i64 idx = beg; idx < end; ++idx) {
                            const i64 i = segp->order[static_cast<std::size_t>(idx)];
                            for (i64 t = 0; t < k; ++t) dot[static_cast<std::size_t>(t)] += g[i * k + t] * y[i * k + t];
                        }
                        for (i64 idx = beg; idx < end; ++idx) {
                            const i64 i = segp->order[static_cast<std::size_t>(idx)];
                            for (i64 t = 0; t < k; ++t)
                                gx[i * k + t] += y[i * k + t] * (g[i * k + t] - dot[static_cast<std::size_t>(t)]);
                        }
                    }
                });
            };
        }
        tape->record("scatter_softmax", {x}, out, std::move(vjp), compute);
    }
    return out;
}

// out[i] = h[seg(i)] — broadcast per-segment rows back to points
template <class T>
ArrayT<T> segment_gather(TapeT<T>* tape, ArrayT<T> h, const SegmentTable& seg) {
    detail::require_segments("segment_gather", seg);
    detail::require_rank2("segment_gather", h);
    if (h.dim(0) != seg.m)
        throw ShapeError("segment_gather: " + shape_str(h.shape) + " does not have m=" + std::to_string(seg.m) +
                         " rows");
    const i64 c = h.dim(1), n = seg.n(), m = seg.m;
    auto out = zeros<T>({n, c}, h.requires_grad);
    auto segp = std::make_shared<const SegmentTable>(seg);
    auto compute = [h, out, segp, c, n]() mutable {
        const T* hp = h.ptr();
        T* op = out.ptr();
        parallel_for(n, [&](i64 lo, i64 hi) {
            for (i64 i = lo; i < hi; ++i) {
                const T* hrow = hp + segp->seg_of_point[static_cast<std::size_t>(i)] * c;
                for (i64 t = 0; t < c; ++t) op[i * c + t] = hrow[t];
            }
        });
    };
    compute();
    if (tape) {
        std::function<void()> vjp;
        if (out.requires_grad) {
            vjp = [h, out, segp, c, m]() mutable {
                h.ensure_grad();
                const T* g = out.grad_ptr();
                T* gh = h.grad_ptr();
                parallel_for(m, [&](i64 lo, i64 hi) {
                    for (i64 j = lo; j < hi; ++j) {
                        T* grow = gh + j * c;
                        for (i64 idx = segp->offsets[static_cast<std::size_t>(j)]; idx < segp->offsets[static_cast<std::size_t>(j) + 1]; ++idx) {
                            const T* gout = g + segp->order[static_cast<std::size_t>(idx)] * c;
                            for (i64 t = 0; t < c; ++t) grow[t] += gout[t];
                        }
                    }
                });
            };
        }
        tape->record("segment_gather", {h}, out, std::move(vjp), compute);
    }
    return out;
}

}  // namespace vx
