#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "voxattn/array.hpp"
#include "voxattn/ops.hpp"
#include "voxattn/parallel.hpp"
#include "voxattn/tape.hpp"

// Ops on dense [C,H,W] grids. Same recording pattern as ops.hpp.

namespace vx {

namespace detail {

template <class T>
void require_chw(const char* op, const ArrayT<T>& x) {
    if (x.rank() != 3) throw ShapeError(std::string(op) + ": need [C,H,W], got " + shape_str(x.shape));
}

}  // namespace detail

// Places per-site feature rows into a dense grid at the given flat cells
// (cell = x*W + y). Cells not covered by any site stay zero.
template <class T>
ArrayT<T> rows_to_grid(TapeT<T>* tape, ArrayT<T> rows, std::vector<i64> cells, i64 h, i64 w) {
    detail::require_rank2("rows_to_grid", rows);
    const i64 m = rows.dim(0), c = rows.dim(1);
    if (static_cast<i64>(cells.size()) != m) throw ShapeError("rows_to_grid: one cell per row required");
    std::vector<char> seen(static_cast<std::size_t>(h * w), 0);
    for (i64 v : cells) {
        if (v < 0 || v >= h * w) throw ShapeError("rows_to_grid: cell " + std::to_string(v) + " outside grid");
        if (seen[static_cast<std::size_t>(v)]) throw CheckError("rows_to_grid: duplicate cell");
        seen[static_cast<std::size_t>(v)] = 1;
    }
    auto cellp = std::make_shared<const std::vector<i64>>(std::move(cells));
    auto out = zeros<T>({c, h, w}, rows.requires_grad);
    auto compute = [rows, out, cellp, m, c, h, w]() mutable {
        const T* rp = rows.ptr();
        T* op = out.ptr();
        std::fill(op, op + c * h * w, T(0));
        for (i64 j = 0; j < m; ++j) {
            const i64 cell = (*cellp)[static_cast<std::size_t>(j)];
            for (i64 ch = 0; ch < c; ++ch) op[ch * h * w + cell] = rp[j * c + ch];
        }
    };
    compute();
    if (tape) {
        std::function<void()> vjp;
        if (out.requires_grad) {
            vjp = [rows, out, cellp, m, c, h, w]() mutable {
                rows.ensure_grad();
                const T* g = out.grad_ptr();
                T* gr = rows.grad_ptr();
                for (i64 j = 0; j < m; ++j) {
                    const i64 cell = (*cellp)[static_cast<std::size_t>(j)];
                    for (i64 ch = 0; ch < c; ++ch) gr[j * c + ch] += g[ch * h * w + cell];
                }
            };
        }
        tape->record("rows_to_grid", {rows}, out, std::move(vjp), compute);
    }
    return out;
}

// 3x3 convolution with zero padding, stride 1.
template <class T>
ArrayT<T> conv2d_3x3(TapeT<T>* tape, ArrayT<T> x, ArrayT<T> weight, ArrayT<T> bias) {
    detail::require_chw("conv2d_3x3", x);
    if (weight.rank() != 4 || weight.dim(1) != x.dim(0) || weight.dim(2) != 3 || weight.dim(3) != 3)
        throw ShapeError("conv2d_3x3: weight " + shape_str(weight.shape) + " does not match input " +
                         shape_str(x.shape));
    const i64 cin = x.dim(0), h = x.dim(1), w = x.dim(2), cout = weight.dim(0);
    if (bias.numel() != cout) throw ShapeError("conv2d_3x3: bias " + shape_str(bias.shape) + " needs cout entries");
    auto out = zeros<T>({cout, h, w}, x.requires_grad || weight.requires_grad || bias.requires_grad);
    auto compute = [x, weight, bias, out, cin, cout, h, w]() mutable {
        const T* xp = x.ptr();
        const T* wp = weight.ptr();
        const T* bp = bias.ptr();
        T* op = out.ptr();
        parallel_for(cout, [&](i64 lo, i64 hi) {
            for (i64 oc = lo; oc < hi; ++oc) {
                T* oplane = op + oc * h * w;
                std::fill(oplane, oplane + h * w, bp[oc]);
                for (i64 ic = 0; ic < cin; ++ic) {
                    const T* xplane = xp + ic * h * w;
                    const T* wk = wp + (oc * cin + ic) * 9;
                    for (i64 r = 0; r < h; ++r)
                        for (i64 cc = 0; cc < w; ++cc) {
                            T s = 0;
                            for (i64 dr = -1; dr <= 1; ++dr) {
                                const i64 rr = r + dr;
                                if (rr < 0 || rr >= h) continue;
                                for (i64 dc = -1; dc <= 1; ++dc) {
                                    const i64 ccc = cc + dc;
                                    if (ccc < 0 || ccc >= w) continue;
                                    s += wk[(dr + 1) * 3 + (dc + 1)] * xplane[rr * w + ccc];
                                }
                            }
                            oplane[r * w + cc] += s;
                        }
                }
            }
        });
    };
    compute();
    if (tape) {
        std::function<void()> vjp;
        if (out.requires_grad) {
            vjp = [x, weight, bias, out, cin, cout, h, w]() mutable {
                const T* g = out.grad_ptr();
                if (bias.requires_grad) {
                    bias.ensure_grad();
                    T* gb = bias.grad_ptr();
                    for (i64 oc = 0; oc < cout; ++oc) {
                        const T* gplane = g + oc * h * w;
                        for (i64 i = 0; i < h * w; ++i) gb[oc] += gplane[i];
                    }
                }
                if (weight.requires_grad) {
                    weight.ensure_grad();
                    T* gw = weight.grad_ptr();
                    const T* xp = x.ptr();
                    parallel_for(cout, [&](i64 lo, i64 hi) {
                        for (i64 oc = lo; oc < hi; ++oc) {
                            const T* gplane = g + oc * h * w;
                            for (i64 ic = 0; ic < cin; ++ic) {
                                const T* xplane = xp + ic * h * w;
                                T* wk = gw + (oc * cin + ic) * 9;
                                for (i64 r = 0; r < h; ++r)
                                    for (i64 cc = 0; cc < w; ++cc) {
                                        const T gv = gplane[r * w + cc];
                                        for (i64 dr = -1; dr <= 1; ++dr) {
                                            const i64 rr = r + dr;
                                            if (rr < 0 || rr >= h) continue;
                                            for (i64 dc = -1; dc <= 1; ++dc) {
                                                const i64 ccc = cc + dc;
                                                if (ccc < 0 || ccc >= w) continue;
                                                wk[(dr + 1) * 3 + (dc + 1)] += gv * xplane[rr * w + ccc];
                                            }
                                        }
                                    }
                            }
                        }
                    });
                }
                if (x.requires_grad) {
                    x.ensure_grad();
                    T* gx = x.grad_ptr();
                    const T* wp = weight.ptr();
                    // full correlation with the flipped kernel
                    parallel_for(cin, [&](i64 lo, i64 hi) {
                        for (i64 ic = lo; ic < hi; ++ic) {
                            T* gxplane = gx + ic * h * w;
                            for (i64 oc = 0; oc < cout; ++oc) {
                                const T* gplane = g + oc * h * w;
                                const T* wk = wp + (oc * cin + ic) * 9;
                                for (i64 r = 0; r < h; ++r)
                                    for (i64 cc = 0; cc < w; ++cc) {
                                        T s = 0;
                                        for (i64 dr = -1; dr <= 1; ++dr) {
                                            const i64 rr = r - dr;
                                            if (rr < 0 || rr >= h) continue;
                                            for (i64 dc = -1; dc <= 1; ++dc) {
                                                const i64 ccc = cc - dc;
                                                if (ccc < 0 || ccc >= w) continue;
                                                s += wk[(dr + 1) * 3 + (dc + 1)] * gplane[rr * w + ccc];
                                            }
                                        }
                                        gxplane[r * w + cc] += s;
                                    }
                            }
                        }
                    });
                }
            };
        }
        tape->record("conv2d_3x3", {x, weight, bias}, out, std::move(vjp), compute);
    }
    return out;
}

// 2x2 average pooling; requires even H and W (pad first).
template <class T>
ArrayT<T> avgpool2x2(TapeT<T>* tape, ArrayT<T> x) {
    detail::require_chw("avgpool2x2", x);
    const i64 c = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (h % 2 || w % 2) throw ShapeError("avgpool2x2: spatial dims must be even, got " + shape_str(x.shape));
    const i64 h2 = h / 2, w2 = w / 2;
    auto out = zeros<T>({c, h2, w2}, x.requires_grad);
    auto compute = [x, out, c, h, w, h2, w2]() mutable {
        const T* xp = x.ptr();
        T* op = out.ptr();
        parallel_for(c, [&](i64 lo, i64 hi) {
            for (i64 ch = lo; ch < hi; ++ch) {
                const T* xplane = xp + ch * h * w;
                T* oplane = op + ch * h2 * w2;
                for (i64 r = 0; r < h2; ++r)
                    for (i64 cc = 0; cc < w2; ++cc)
                        oplane[r * w2 + cc] = T(0.25) * (xplane[(2 * r) * w + 2 * cc] + xplane[(2 * r) * w + 2 * cc + 1] +
                                                         xplane[(2 * r + 1) * w + 2 * cc] +
                                                         xplane[(2 * r + 1) * w + 2 * cc + 1]);
            }
        });
    };
    compute();
    if (tape) {
        std::function<void()> vjp;
        if (out.requires_grad) {
            vjp = [x, out, c, h, w, h2, w2]() mutable {
                x.ensure_grad();
                const T* g = out.grad_ptr();
                T* gx = x.grad_ptr();
                for (i64 ch = 0; ch < c; ++ch) {
                    const T* gplane = g + ch * h2 * w2;
                    T* gxplane = gx + ch * h * w;
                    for (i64 r = 0; r < h2; ++r)
                        for (i64 cc = 0; cc < w2; ++cc) {
                            const T gv = T(0.25) * gplane[r * w2 + cc];
                            gxplane[(2 * r) * w + 2 * cc] += gv;
                            gxplane[(2 * r) * w + 2 * cc + 1] += gv;
                            gxplane[(2 * r + 1) * w + 2 * cc] += gv;
                            gxplane[(2 * r + 1) * w + 2 * cc + 1] += gv;
                        }
                }
            };
        }
        tape->record("avgpool2x2", {x}, out, std::move(vjp), compute);
    }
    return out;
}

// Zero padding on the bottom/right edges.
template <class T>
ArrayT<T> pad_hw(TapeT<T>* tape, ArrayT<T> x, i64 pad_h, i64 pad_w) {
    detail::require_chw("pad_hw", x);
    if (pad_h < 0 || pad_w < 0) throw ShapeError("pad_hw: negative padding");
    if (pad_h == 0 && pad_w == 0) return x;
    const i64 c = x.dim(0), h = x.dim(1), w = x.dim(2);
    const i64 h2 = h + pad_h, w2 = w + pad_w;
    auto out = zeros<T>({c, h2, w2}, x.requires_grad);
    auto compute = [x, out, c, h, w, h2, w2]() mutable {
        const T* xp = x.ptr();
        T* op = out.ptr();
        std::fill(op, op + c * h2 * w2, T(0));
        for (i64 ch = 0; ch < c; ++ch)
            for (i64 r = 0; r < h; ++r)
                for (i64 cc = 0; cc < w; ++cc) op[(ch * h2 + r) * w2 + cc] = xp[(ch * h + r) * w + cc];
    };
    compute();
    if (tape) {
        std::function<void()> vjp;
        if (out.requires_grad) {
            vjp = [x, out, c, h, w, h2, w2]() mutable {
                x.ensure_grad();
                const T* g = out.grad_ptr();
                T* gx = x.grad_ptr();
                for (i64 ch = 0; ch < c; ++ch)
                    for (i64 r = 0; r < h; ++r)
                        for (i64 cc = 0; cc < w; ++cc) gx[(ch * h + r) * w + cc] += g[(ch * h2 + r) * w2 + cc];
            };
        }
        tape->record("pad_hw", {x}, out, std::move(vjp), compute);
    }
    return out;
}

// Keeps the top-left h2 x w2 region.
template <class T>
ArrayT<T> crop_hw(TapeT<T>* tape, ArrayT<T> x, i64 h2, i64 w2) {
    detail::require_chw("crop_hw", x);
    const i64 c = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (h2 > h || w2 > w || h2 < 1 || w2 < 1) throw ShapeError("crop_hw: crop outside " + shape_str(x.shape));
    if (h2 == h && w2 == w) return x;
    auto out = zeros<T>({c, h2, w2}, x.requires_grad);
    auto compute = [x, out, c, h, w, h2, w2]() mutable {
        const T* xp = x.ptr();
        T* op = out.ptr();
        for (i64 ch = 0; ch < c; ++ch)
            for (i64 r = 0; r < h2; ++r)
                for (i64 cc = 0; cc < w2; ++cc) op[(ch * h2 + r) * w2 + cc] = xp[(ch * h + r) * w + cc];
    };
    compute();
    if (tape) {
        std::function<void()> vjp;
        if (out.requires_grad) {
            vjp = [x, out, c, h, w, h2, w2]() mutable {
                x.ensure_grad();
                const T* g = out.grad_ptr();
                T* gx = x.grad_ptr();
                for (i64 ch = 0; ch < c; ++ch)
                    for (i64 r = 0; r < h2; ++r)
                        for (i64 cc = 0; cc < w2; ++cc) gx[(ch * h + r) * w + cc] += g[(ch * h2 + r) * w2 + cc];
            };
        }
        tape->record("crop_hw", {x}, out, std::move(vjp), compute);
    }
    return out;
}

template <class T>
ArrayT<T> upsample_nearest2x(TapeT<T>* tape, ArrayT<T> x) {
    detail::require_chw("upsample_nearest2x", x);
    const i64 c = x.dim(0), h = x.dim(1), w = x.dim(2);
    const i64 h2 = h * 2, w2 = w * 2;
    auto out = zeros<T>({c, h2, w2}, x.requires_grad);
    auto compute = [x, out, c, h, w, h2, w2]() mutable {
        const T* xp = x.ptr();
        T* op = out.ptr();
        for (i64 ch = 0; ch < c; ++ch)
            for (i64 r = 0; r < h2; ++r)
                for (i64 cc = 0; cc < w2; ++cc) op[(ch * h2 + r) * w2 + cc] = xp[(ch * h + r / 2) * w + cc / 2];
    };
    compute();
    if (tape) {
        std::function<void()> vjp;
        if (out.requires_grad) {
            vjp = [x, out, c, h, w, h2, w2]() mutable {
                x.ensure_grad();
                const T* g = out.grad_ptr();
                T* gx = x.grad_ptr();
                for (i64 ch = 0; ch < c; ++ch)
                    for (i64 r = 0; r < h2; ++r)
                        for (i64 cc = 0; cc < w2; ++cc) gx[(ch * h + r / 2) * w + cc / 2] += g[(ch * h2 + r) * w2 + cc];
            };
        }
        tape->record("upsample_nearest2x", {x}, out, std::move(vjp), compute);
    }
    return out;
}

template <class T>
ArrayT<T> concat_channels(TapeT<T>* tape, ArrayT<T> a, ArrayT<T> b) {
    detail::require_chw("concat_channels", a);
    detail::require_chw("concat_channels", b);
    if (a.dim(1) != b.dim(1) || a.dim(2) != b.dim(2))
        throw ShapeError("concat_channels: spatial dims differ: " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    const i64 ca = a.dim(0), cb = b.dim(0), h = a.dim(1), w = a.dim(2);
    auto out = zeros<T>({ca + cb, h, w}, a.requires_grad || b.requires_grad);
    auto compute = [a, b, out, ca, cb, h, w]() mutable {
        T* op = out.ptr();
        std::copy(a.ptr(), a.ptr() + ca * h * w, op);
        std::copy(b.ptr(), b.ptr() + cb * h * w, op + ca * h * w);
    };
    compute();
    if (tape) {
        std::function<void()> vjp;
        if (out.requires_grad) {
            vjp = [a, b, out, ca, cb, h, w]() mutable {
                const T* g = out.grad_ptr();
                if (a.requires_grad) {
                    a.ensure_grad();
                    T* ga = a.grad_ptr();
                    for (i64 i = 0; i < ca * h * w; ++i) ga[i] += g[i];
                }
                if (b.requires_grad) {
                    b.ensure_grad();
                    T* gb = b.grad_ptr();
                    const T* gtail = g + ca * h * w;
                    for (i64 i = 0; i < cb * h * w; ++i) gb[i] += gtail[i];
                }
            };
        }
        tape->record("concat_channels", {a, b}, out, std::move(vjp), compute);
    }
    return out;
}

}  // namespace vx
