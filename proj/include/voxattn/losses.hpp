#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <vector>

#include "voxattn/array.hpp"
#include "voxattn/ops.hpp"
#include "voxattn/tape.hpp"

namespace vx {

namespace detail {

template <class T>
T softplus(T z) {
    // log(1 + e^z) without overflow
    return z > T(0) ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
}

template <class T>
T sigmoid(T z) {
    if (z >= T(0)) {
        const T e = std::exp(-z);
        return T(1) / (T(1) + e);
    }
    const T e = std::exp(z);
    return e / (T(1) + e);
}

}  // namespace detail

// out[r] = x[idx[r]]; duplicate indices allowed, their gradients accumulate
// in ascending output-row order.
template <class T>
ArrayT<T> gather_rows(TapeT<T>* tape, ArrayT<T> x, std::vector<i64> idx) {
    detail::require_rank2("gather_rows", x);
    const i64 m = x.dim(0), c = x.dim(1), r = static_cast<i64>(idx.size());
    if (r == 0) throw ShapeError("gather_rows: empty index list");
    for (i64 v : idx)
        if (v < 0 || v >= m) throw ShapeError("gather_rows: index " + std::to_string(v) + " outside " + shape_str(x.shape));
    auto idxp = std::make_shared<const std::vector<i64>>(std::move(idx));
    auto out = zeros<T>({r, c}, x.requires_grad);
    auto compute = [x, out, idxp, r, c]() mutable {
        const T* xp = x.ptr();
        T* op = out.ptr();
        for (i64 i = 0; i < r; ++i) {
            const T* row = xp + (*idxp)[static_cast<std::size_t>(i)] * c;
            for (i64 t = 0; t < c; ++t) op[i * c + t] = row[t];
        }
    };
    compute();
    if (tape) {
        std::function<void()> vjp;
        if (out.requires_grad) {
            vjp = [x, out, idxp, r, c]() mutable {
                x.ensure_grad();
                const T* g = out.grad_ptr();
                T* gx = x.grad_ptr();
                for (i64 i = 0; i < r; ++i) {
                    T* row = gx + (*idxp)[static_cast<std::size_t>(i)] * c;
                    for (i64 t = 0; t < c; ++t) row[t] += g[i * c + t];
                }
            };
        }
        tape->record("gather_rows", {x}, out, std::move(vjp), compute);
    }
    return out;
}

// Focal binary cross-entropy on logits, targets in {0,1}. Reduction is a
// plain ascending-order sum, optionally divided by the element count.
template <class T>
ArrayT<T> focal_bce_loss(TapeT<T>* tape, ArrayT<T> logits, ArrayT<T> targets, double alpha, double gamma, bool mean) {
    detail::require_same_shape("focal_bce_loss", logits, targets);
    const i64 n = logits.numel();
    auto out = zeros<T>({1}, logits.requires_grad);
    const T w = mean ? T(1) / static_cast<T>(n) : T(1);
    const T a = static_cast<T>(alpha), gm = static_cast<T>(gamma);
    auto compute = [logits, targets, out, n, w, a, gm]() mutable {
        const T* zp = logits.ptr();
        const T* tp = targets.ptr();
        T s = 0;
        for (i64 i = 0; i < n; ++i) {
            const T sign = tp[i] > T(0.5) ? T(1) : T(-1);
            const T at = tp[i] > T(0.5) ? a : T(1) - a;
            const T log_pt = -detail::softplus(-sign * zp[i]);
            const T one_m_pt = detail::sigmoid(-sign * zp[i]);
            s += -at * std::pow(one_m_pt, gm) * log_pt;
        }
        out.ptr()[0] = w * s;
    };
    compute();
    if (tape) {
        std::function<void()> vjp;
        if (out.requires_grad) {
            vjp = [logits, targets, out, n, w, a, gm]() mutable {
                logits.ensure_grad();
                const T g = out.grad_ptr()[0];
                const T* zp = logits.ptr();
                const T* tp = targets.ptr();
                T* gz = logits.grad_ptr();
                for (i64 i = 0; i < n; ++i) {
                    const T sign = tp[i] > T(0.5) ? T(1) : T(-1);
                    const T at = tp[i] > T(0.5) ? a : T(1) - a;
                    const T pt = detail::sigmoid(sign * zp[i]);
                    const T one_m_pt = T(1) - pt;
                    const T log_pt = -detail::softplus(-sign * zp[i]);
                    // d/du [-(1-p)^g log p], u = sign*z
                    const T dLdu = -at * std::pow(one_m_pt, gm) * (one_m_pt - gm * pt * log_pt);
                    gz[i] += g * w * sign * dLdu;
                }
            };
        }
        tape->record("focal_bce_loss", {logits, targets}, out, std::move(vjp), compute);
    }
    return out;
}

// Plain binary cross-entropy on logits: softplus(z) - t*z, summed (or meaned).
template <class T>
ArrayT<T> bce_logits_loss(TapeT<T>* tape, ArrayT<T> logits, ArrayT<T> targets, bool mean) {
    detail::require_same_shape("bce_logits_loss", logits, targets);
    const i64 n = logits.numel();
    auto out = zeros<T>({1}, logits.requires_grad);
    const T w = mean ? T(1) / static_cast<T>(n) : T(1);
    auto compute = [logits, targets, out, n, w]() mutable {
        const T* zp = logits.ptr();
        const T* tp = targets.ptr();
        T s = 0;
        for (i64 i = 0; i < n; ++i) s += detail::softplus(zp[i]) - tp[i] * zp[i];
        out.ptr()[0] = w * s;
    };
    compute();
    if (tape) {
        std::function<void()> vjp;
        if (out.requires_grad) {
            vjp = [logits, targets, out, n, w]() mutable {
                logits.ensure_grad();
                const T g = out.grad_ptr()[0];
                const T* zp = logits.ptr();
                const T* tp = targets.ptr();
                T* gz = logits.grad_ptr();
                for (i64 i = 0; i < n; ++i) gz[i] += g * w * (detail::sigmoid(zp[i]) - tp[i]);
            };
        }
        tape->record("bce_logits_loss", {logits, targets}, out, std::move(vjp), compute);
    }
    return out;
}

// Huber-style loss summed over all entries:
// 0.5 d^2/beta for |d| < beta, |d| - 0.5 beta otherwise.
template <class T>
ArrayT<T> smooth_l1_loss(TapeT<T>* tape, ArrayT<T> pred, ArrayT<T> target, double beta) {
    detail::require_same_shape("smooth_l1_loss", pred, target);
    if (beta <= 0) throw ConfigError("smooth_l1_loss: beta must be positive");
    const i64 n = pred.numel();
    const T b = static_cast<T>(beta);
    auto out = zeros<T>({1}, pred.requires_grad);
    auto compute = [pred, target, out, n, b]() mutable {
        const T* pp = pred.ptr();
        const T* tp = target.ptr();
        T s = 0;
        for (i64 i = 0; i < n; ++i) {
            const T d = pp[i] - tp[i];
            const T ad = std::abs(d);
            s += ad < b ? T(0.5) * d * d / b : ad - T(0.5) * b;
        }
        out.ptr()[0] = s;
    };
    compute();
    if (tape) {
        std::function<void()> vjp;
        if (out.requires_grad) {
            vjp = [pred, target, out, n, b]() mutable {
                pred.ensure_grad();
                const T g = out.grad_ptr()[0];
                const T* pp = pred.ptr();
                const T* tp = target.ptr();
                T* gp = pred.grad_ptr();
                for (i64 i = 0; i < n; ++i) {
                    const T d = pp[i] - tp[i];
                    gp[i] += g * (std::abs(d) < b ? d / b : (d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0))));
                }
            };
        }
        tape->record("smooth_l1_loss", {pred, target}, out, std::move(vjp), compute);
    }
    return out;
}

}  // namespace vx
