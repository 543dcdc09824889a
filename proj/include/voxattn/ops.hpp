#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "voxattn/array.hpp"
#include "voxattn/parallel.hpp"
#include "voxattn/tape.hpp"

// Dense primitives. Each op computes its output once through a closure, then
// records that closure on the tape as the replay rule together with a VJP.
// Every reduction loop runs in a fixed ascending order, and parallel kernels
// split only over disjoint output rows, so results are bit-identical across
// thread counts.

namespace vx {

using i64 = std::int64_t;

namespace detail {

// c[m,n] (+)= a[m,k] * b[k,n]
template <class T>
void gemm_nn(const T* a, const T* b, T* c, i64 m, i64 k, i64 n, bool acc) {
    parallel_for(m, [&](i64 lo, i64 hi) {
        for (i64 i = lo; i < hi; ++i) {
            T* crow = c + i * n;
            if (!acc) std::fill(crow, crow + n, T(0));
            const T* arow = a + i * k;
            for (i64 t = 0; t < k; ++t) {
                const T av = arow[t];
                const T* brow = b + t * n;
                for (i64 j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    });
}

// c[m,n] (+)= a[m,k] * b[n,k]^T
template <class T>
void gemm_nt(const T* a, const T* b, T* c, i64 m, i64 k, i64 n, bool acc) {
    parallel_for(m, [&](i64 lo, i64 hi) {
        for (i64 i = lo; i < hi; ++i) {
            const T* arow = a + i * k;
            T* crow = c + i * n;
            for (i64 j = 0; j < n; ++j) {
                const T* brow = b + j * k;
                T s = 0;
                for (i64 t = 0; t < k; ++t) s += arow[t] * brow[t];
                crow[j] = acc ? crow[j] + s : s;
            }
        }
    });
}

// c[k,n] (+)= a[m,k]^T * b[m,n]
template <class T>
void gemm_tn(const T* a, const T* b, T* c, i64 m, i64 k, i64 n, bool acc) {
    parallel_for(k, [&](i64 lo, i64 hi) {
        for (i64 p = lo; p < hi; ++p) {
            T* crow = c + p * n;
            if (!acc) std::fill(crow, crow + n, T(0));
            for (i64 i = 0; i < m; ++i) {
                const T av = a[i * k + p];
                const T* brow = b + i * n;
                for (i64 j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    });
}

template <class T>
void require_rank2(const char* op, const ArrayT<T>& a) {
    if (a.rank() != 2) throw ShapeError(std::string(op) + ": need rank-2 array, got " + shape_str(a.shape));
}

template <class T>
void require_same_shape(const char* op, const ArrayT<T>& a, const ArrayT<T>& b) {
    if (a.shape != b.shape)
        throw ShapeError(std::string(op) + ": shapes differ: " + shape_str(a.shape) + " vs " + shape_str(b.shape));
}

}  // namespace detail

template <class T>
ArrayT<T> matmul(TapeT<T>* tape, ArrayT<T> a, ArrayT<T> b) {
    detail::require_rank2("matmul", a);
    detail::require_rank2("matmul", b);
    if (a.dim(1) != b.dim(0))
        throw ShapeError("matmul: inner dims disagree: " + shape_str(a.shape) + " x " + shape_str(b.shape));
    const i64 m = a.dim(0), k = a.dim(1), n = b.dim(1);
    auto out = zeros<T>({m, n}, a.requires_grad || b.requires_grad);
    auto compute = [a, b, out, m, k, n]() mutable { detail::gemm_nn(a.ptr(), b.ptr(), out.ptr(), m, k, n, false); };
    compute();
    if (tape) {
        std::function<void()> vjp;
        if (out.requires_grad) {
            vjp = [a, b, out, m, k, n]() mutable {
                const T* g = out.grad_ptr();
                if (a.requires_grad) {
                    a.ensure_grad();
                    detail::gemm_nt(g, b.ptr(), a.grad_ptr(), m, n, k, true);
                }
                if (b.requires_grad) {
                    b.ensure_grad();
                    detail::gemm_tn(a.ptr(), g, b.grad_ptr(), m, k, n, true);
                }
            };
        }
        tape->record("matmul", {a, b}, out, std::move(vjp), compute);
    }
    return out;
}

// a[m,k] * b[n,k]^T -> [m,n]
template <class T>
ArrayT<T> matmul_nt(TapeT<T>* tape, ArrayT<T> a, ArrayT<T> b) {
    detail::require_rank2("matmul_nt", a);
    detail::require_rank2("matmul_nt", b);
    if (a.dim(1) != b.dim(1))
        throw ShapeError("matmul_nt: inner dims disagree: " + shape_str(a.shape) + " x " + shape_str(b.shape) + "^T");
    const i64 m = a.dim(0), k = a.dim(1), n = b.dim(0);
    auto out = zeros<T>({m, n}, a.requires_grad || b.requires_grad);
    auto compute = [a, b, out, m, k, n]() mutable { detail::gemm_nt(a.ptr(), b.ptr(), out.ptr(), m, k, n, false); };
    compute();
    if (tape) {
        std::function<void()> vjp;
        if (out.requires_grad) {
            vjp = [a, b, out, m, k, n]() mutable {
                const T* g = out.grad_ptr();
                if (a.requires_grad) {
                    a.ensure_grad();
                    detail::gemm_nn(g, b.ptr(), a.grad_ptr(), m, n, k, true);
                }
                if (b.requires_grad) {
                    b.ensure_grad();
                    detail::gemm_tn(g, a.ptr(), b.grad_ptr(), m, n, k, true);
                }
            };
        }
        tape->record("matmul_nt", {a, b}, out, std::move(vjp), compute);
    }
    return out;
}

template <class T>
ArrayT<T> transpose2d(TapeT<T>* tape, ArrayT<T> x) {
    detail::require_rank2("transpose2d", x);
    const i64 p = x.dim(0), q = x.dim(1);
    auto out = zeros<T>({q, p}, x.requires_grad);
    auto compute = [x, out, p, q]() mutable {
        const T* xp = x.ptr();
        T* op = out.ptr();
        parallel_for(q, [&](i64 lo, i64 hi) {
            for (i64 j = lo; j < hi; ++j)
                for (i64 i = 0; i < p; ++i) op[j * p + i] = xp[i * q + j];
        });
    };
    compute();
    if (tape) {
        std::function<void()> vjp;
        if (out.requires_grad) {
            vjp = [x, out, p, q]() mutable {
                x.ensure_grad();
                const T* g = out.grad_ptr();
                T* gx = x.grad_ptr();
                for (i64 i = 0; i < p; ++i)
                    for (i64 j = 0; j < q; ++j) gx[i * q + j] += g[j * p + i];
            };
        }
        tape->record("transpose2d", {x}, out, std::move(vjp), compute);
    }
    return out;
}

template <class T>
ArrayT<T> add(TapeT<T>* tape, ArrayT<T> a, ArrayT<T> b) {
    detail::require_same_shape("add", a, b);
    auto out = zeros<T>(a.shape, a.requires_grad || b.requires_grad);
    auto compute = [a, b, out]() mutable {
        const T* ap = a.ptr();
        const T* bp = b.ptr();
        T* op = out.ptr();
        const i64 n = out.numel();
        parallel_for(n, [&](i64 lo, i64 hi) {
            for (i64 i = lo; i < hi; ++i) op[i] = ap[i] + bp[i];
        });
    };
    compute();
    if (tape) {
        std::function<void()> vjp;
        if (out.requires_grad) {
            vjp = [a, b, out]() mutable {
                const T* g = out.grad_ptr();
                const i64 n = out.numel();
                if (a.requires_grad) {
                    a.ensure_grad();
                    T* ga = a.grad_ptr();
                    for (i64 i = 0; i < n; ++i) ga[i] += g[i];
                }
                if (b.requires_grad) {
                    b.ensure_grad();
                    T* gb = b.grad_ptr();
                    for (i64 i = 0; i < n; ++i) gb[i] += g[i];
                }
            };
        }
        tape->record("add", {a, b}, out, std::move(vjp), compute);
    }
    return out;
}

template <class T>
ArrayT<T> mul(TapeT<T>* tape, ArrayT<T> a, ArrayT<T> b) {
    detail::require_same_shape("mul", a, b);
    auto out = zeros<T>(a.shape, a.requires_grad || b.requires_grad);
    auto compute = [a, b, out]() mutable {
        const T* ap = a.ptr();
        const T* bp = b.ptr();
        T* op = out.ptr();
        const i64 n = out.numel();
        parallel_for(n, [&](i64 lo, i64 hi) {
            for (i64 i = lo; i < hi; ++i) op[i] = ap[i] * bp[i];
        });
    };
    compute();
    if (tape) {
        std::function<void()> vjp;
        if (out.requires_grad) {
            vjp = [a, b, out]() mutable {
                const T* g = out.grad_ptr();
                const i64 n = out.numel();
                if (a.requires_grad) {
                    a.ensure_grad();
                    T* ga = a.grad_ptr();
                    const T* bp = b.ptr();
                    for (i64 i = 0; i < n; ++i) ga[i] += g[i] * bp[i];
                }
                if (b.requires_grad) {
                    b.ensure_grad();
                    T* gb = b.grad_ptr();
                    const T* ap = a.ptr();
                    for (i64 i = 0; i < n; ++i) gb[i] += g[i] * ap[i];
                }
            };
        }
        tape->record("mul", {a, b}, out, std::move(vjp), compute);
    }
    return out;
}

template <class T>
ArrayT<T> scale(TapeT<T>* tape, ArrayT<T> x, double s) {
    auto out = zeros<T>(x.shape, x.requires_grad);
    const T sv = static_cast<T>(s);
    auto compute = [x, out, sv]() mutable {
        const T* xp = x.ptr();
        T* op = out.ptr();
        const i64 n = out.numel();
        parallel_for(n, [&](i64 lo, i64 hi) {
            for (i64 i = lo; i < hi; ++i) op[i] = sv * xp[i];
        });
    };
    compute();
    if (tape) {
        std::function<void()> vjp;
        if (out.requires_grad) {
            vjp = [x, out, sv]() mutable {
                x.ensure_grad();
                const T* g = out.grad_ptr();
                T* gx = x.grad_ptr();
                const i64 n = out.numel();
                for (i64 i = 0; i < n; ++i) gx[i] += sv * g[i];
            };
        }
        tape->record("scale", {x}, out, std::move(vjp), compute);
    }
    return out;
}

// x[m,n] + b[n] broadcast over rows
template <class T>
ArrayT<T> add_bias(TapeT<T>* tape, ArrayT<T> x, ArrayT<T> b) {
    detail::require_rank2("add_bias", x);
    if (b.rank() != 1 || b.dim(0) != x.dim(1))
        throw ShapeError("add_bias: bias " + shape_str(b.shape) + " does not match " + shape_str(x.shape));
    const i64 m = x.dim(0), n = x.dim(1);
    auto out = zeros<T>(x.shape, x.requires_grad || b.requires_grad);
    auto compute = [x, b, out, m, n]() mutable {
        const T* xp = x.ptr();
        const T* bp = b.ptr();
        T* op = out.ptr();
        parallel_for(m, [&](i64 lo, i64 hi) {
            for (i64 i = lo; i < hi; ++i)
                for (i64 j = 0; j < n; ++j) op[i * n + j] = xp[i * n + j] + bp[j];
        });
    };
    compute();
    if (tape) {
        std::function<void()> vjp;
        if (out.requires_grad) {
            vjp = [x, b, out, m, n]() mutable {
                const T* g = out.grad_ptr();
                if (x.requires_grad) {
                    x.ensure_grad();
                    T* gx = x.grad_ptr();
                    for (i64 i = 0; i < m * n; ++i) gx[i] += g[i];
                }
                if (b.requires_grad) {
                    b.ensure_grad();
                    T* gb = b.grad_ptr();
                    for (i64 i = 0; i < m; ++i)
                        for (i64 j = 0; j < n; ++j) gb[j] += g[i * n + j];
                }
            };
        }
        tape->record("add_bias", {x, b}, out, std::move(vjp), compute);
    }
    return out;
}

template <class T>
ArrayT<T> relu(TapeT<T>* tape, ArrayT<T> x) {
    auto out = zeros<T>(x.shape, x.requires_grad);
    auto compute = [x, out]() mutable {
        const T* xp = x.ptr();
        T* op = out.ptr();
        const i64 n = out.numel();
        parallel_for(n, [&](i64 lo, i64 hi) {
            for (i64 i = lo; i < hi; ++i) op[i] = xp[i] > T(0) ? xp[i] : T(0);
        });
    };
    compute();
    if (tape) {
        std::function<void()> vjp;
        if (out.requires_grad) {
            // subgradient at exactly 0 is 0
            vjp = [x, out]() mutable {
                x.ensure_grad();
                const T* g = out.grad_ptr();
                const T* xp = x.ptr();
                T* gx = x.grad_ptr();
                const i64 n = out.numel();
                for (i64 i = 0; i < n; ++i)
                    if (xp[i] > T(0)) gx[i] += g[i];
            };
        }
        tape->record("relu", {x}, out, std::move(vjp), compute);
    }
    return out;
}

template <class T>
ArrayT<T> sin_elem(TapeT<T>* tape, ArrayT<T> x) {
    auto out = zeros<T>(x.shape, x.requires_grad);
    auto compute = [x, out]() mutable {
        const T* xp = x.ptr();
        T* op = out.ptr();
        const i64 n = out.numel();
        parallel_for(n, [&](i64 lo, i64 hi) {
            for (i64 i = lo; i < hi; ++i) op[i] = std::sin(xp[i]);
        });
    };
    compute();
    if (tape) {
        std::function<void()> vjp;
        if (out.requires_grad) {
            vjp = [x, out]() mutable {
                x.ensure_grad();
                const T* g = out.grad_ptr();
                const T* xp = x.ptr();
                T* gx = x.grad_ptr();
                const i64 n = out.numel();
                for (i64 i = 0; i < n; ++i) gx[i] += g[i] * std::cos(xp[i]);
            };
        }
        tape->record("sin_elem", {x}, out, std::move(vjp), compute);
    }
    return out;
}

// Zero-copy: the output shares the input's data buffer under a new shape.
template <class T>
ArrayT<T> reshape(TapeT<T>* tape, ArrayT<T> x, Shape new_shape) {
    if (numel_of(new_shape) != x.numel())
        throw ShapeError("reshape: " + shape_str(x.shape) + " -> " + shape_str(new_shape) + " changes element count");
    ArrayT<T> out;
    out.shape = std::move(new_shape);
    out.data = x.data;
    out.requires_grad = x.requires_grad;
    out.uid = next_array_uid();
    if (tape) {
        std::function<void()> vjp;
        if (out.requires_grad) {
            vjp = [x, out]() mutable {
                x.ensure_grad();
                const T* g = out.grad_ptr();
                T* gx = x.grad_ptr();
                const i64 n = out.numel();
                for (i64 i = 0; i < n; ++i) gx[i] += g[i];
            };
        }
        tape->record("reshape", {x}, out, std::move(vjp), std::function<void()>());
    }
    return out;
}

template <class T>
ArrayT<T> softmax_lastdim(TapeT<T>* tape, ArrayT<T> x) {
    if (x.rank() < 1) throw ShapeError("softmax_lastdim: need rank >= 1");
    const i64 k = x.shape.back();
    const i64 rows = x.numel() / k;
    auto out = zeros<T>(x.shape, x.requires_grad);
    auto compute = [x, out, rows, k]() mutable {
        const T* xp = x.ptr();
        T* op = out.ptr();
        for (i64 i = 0; i < rows * k; ++i)
            if (std::isnan(static_cast<double>(xp[i]))) throw CheckError("softmax_lastdim: NaN in input");
        parallel_for(rows, [&](i64 lo, i64 hi) {
            for (i64 r = lo; r < hi; ++r) {
                const T* row = xp + r * k;
                T* orow = op + r * k;
                T mx = row[0];
                for (i64 j = 1; j < k; ++j) mx = std::max(mx, row[j]);
                T denom = 0;
                for (i64 j = 0; j < k; ++j) {
                    orow[j] = std::exp(row[j] - mx);
                    denom += orow[j];
                }
                for (i64 j = 0; j < k; ++j) orow[j] /= denom;
            }
        });
    };
    compute();
    if (tape) {
        std::function<void()> vjp;
        if (out.requires_grad) {
            vjp = [x, out, rows, k]() mutable {
                x.ensure_grad();
                const T* g = out.grad_ptr();
                const T* y = out.ptr();
                T* gx = x.grad_ptr();
                parallel_for(rows, [&](i64 lo, i64 hi) {
                    for (i64 r = lo; r < hi; ++r) {
                        const T* yr = y + r * k;
                        const T* gr = g + r * k;
                        T dot = 0;
                        for (i64 j = 0; j < k; ++j) dot += gr[j] * yr[j];
                        T* gxr = gx + r * k;
                        for (i64 j = 0; j < k; ++j) gxr[j] += yr[j] * (gr[j] - dot);
                    }
                });
            };
        }
        tape->record("softmax_lastdim", {x}, out, std::move(vjp), compute);
    }
    return out;
}

// Batch norm over rows of x[n,d]. Running stats are mutated in place on the
// initial training-mode call only; replay never touches them. Normalization
// uses the biased batch variance, the running variance stores the unbiased
// one.
template <class T>
ArrayT<T> batchnorm1d(TapeT<T>* tape, ArrayT<T> x, ArrayT<T> gamma, ArrayT<T> beta,
                      ArrayT<T>& running_mean, ArrayT<T>& running_var, bool training, double momentum = 0.1,
                      double eps = 1e-5) {
    detail::require_rank2("batchnorm1d", x);
    const i64 n = x.dim(0), d = x.dim(1);
    if (gamma.numel() != d || beta.numel() != d || running_mean.numel() != d || running_var.numel() != d)
        throw ShapeError("batchnorm1d: parameter width does not match " + shape_str(x.shape));
    if (training && n < 2) throw CheckError("batchnorm1d: degenerate batch (training mode needs n >= 2 rows)");
    auto out = zeros<T>(x.shape, x.requires_grad || gamma.requires_grad || beta.requires_grad);
    auto inv_std = std::make_shared<std::vector<T>>(static_cast<std::size_t>(d), T(0));
    auto xhat = std::make_shared<std::vector<T>>(static_cast<std::size_t>(n * d), T(0));
    ArrayT<T> rm = running_mean, rv = running_var;
    auto compute = [x, gamma, beta, rm, rv, out, inv_std, xhat, training, momentum, eps, n, d](bool update_stats) mutable {
        const T* xp = x.ptr();
        const T* gp = gamma.ptr();
        const T* bp = beta.ptr();
        T* op = out.ptr();
        std::vector<T> mean(static_cast<std::size_t>(d), T(0)), var(static_cast<std::size_t>(d), T(0));
        if (training) {
            for (i64 i = 0; i < n; ++i)
                for (i64 j = 0; j < d; ++j) mean[static_cast<std::size_t>(j)] += xp[i * d + j];
            for (i64 j = 0; j < d; ++j) mean[static_cast<std::size_t>(j)] /= static_cast<T>(n);
            for (i64 i = 0; i < n; ++i)
                for (i64 j = 0; j < d; ++j) {
                    const T c = xp[i * d + j] - mean[static_cast<std::size_t>(j)];
                    var[static_cast<std::size_t>(j)] += c * c;
                }
            for (i64 j = 0; j < d; ++j) var[static_cast<std::size_t>(j)] /= static_cast<T>(n);
            if (update_stats) {
                T* rmp = rm.ptr();
                T* rvp = rv.ptr();
                const T mom = static_cast<T>(momentum);
                const T unbias = static_cast<T>(n) / static_cast<T>(n - 1);
                for (i64 j = 0; j < d; ++j) {
                    rmp[j] = (T(1) - mom) * rmp[j] + mom * mean[static_cast<std::size_t>(j)];
                    rvp[j] = (T(1) - mom) * rvp[j] + mom * var[static_cast<std::size_t>(j)] * unbias;
                }
            }
        } else {
            const T* rmp = rm.ptr();
            const T* rvp = rv.ptr();
            for (i64 j = 0; j < d; ++j) {
                mean[static_cast<std::size_t>(j)] = rmp[j];
                var[static_cast<std::size_t>(j)] = rvp[j];
            }
        }
        for (i64 j = 0; j < d; ++j)
            (*inv_std)[static_cast<std::size_t>(j)] = T(1) / std::sqrt(var[static_cast<std::size_t>(j)] + static_cast<T>(eps));
        for (i64 i = 0; i < n; ++i)
            for (i64 j = 0; j < d; ++j) {
                const T xh = (xp[i * d + j] - mean[static_cast<std::size_t>(j)]) * (*inv_std)[static_cast<std::size_t>(j)];
                (*xhat)[static_cast<std::size_t>(i * d + j)] = xh;
                op[i * d + j] = gp[j] * xh + bp[j];
            }
    };
    compute(training);
    if (tape) {
        std::function<void()> vjp;
        if (out.requires_grad) {
            vjp = [x, gamma, beta, out, inv_std, xhat, training, n, d]() mutable {
                const T* g = out.grad_ptr();
                const T* gp = gamma.ptr();
                if (gamma.requires_grad) {
                    gamma.ensure_grad();
                    T* gg = gamma.grad_ptr();
                    for (i64 i = 0; i < n; ++i)
                        for (i64 j = 0; j < d; ++j) gg[j] += g[i * d + j] * (*xhat)[static_cast<std::size_t>(i * d + j)];
                }
                if (beta.requires_grad) {
                    beta.ensure_grad();
                    T* gb = beta.grad_ptr();
                    for (i64 i = 0; i < n; ++i)
                        for (i64 j = 0; j < d; ++j) gb[j] += g[i * d + j];
                }
                if (x.requires_grad) {
                    x.ensure_grad();
                    T* gx = x.grad_ptr();
                    if (training) {
                        std::vector<T> mean_g(static_cast<std::size_t>(d), T(0)), mean_gx(static_cast<std::size_t>(d), T(0));
                        for (i64 i = 0; i < n; ++i)
                            for (i64 j = 0; j < d; ++j) {
                                mean_g[static_cast<std::size_t>(j)] += g[i * d + j];
                                mean_gx[static_cast<std::size_t>(j)] += g[i * d + j] * (*xhat)[static_cast<std::size_t>(i * d + j)];
                            }
                        for (i64 j = 0; j < d; ++j) {
                            mean_g[static_cast<std::size_t>(j)] /= static_cast<T>(n);
                            mean_gx[static_cast<std::size_t>(j)] /= static_cast<T>(n);
                        }
                        for (i64 i = 0; i < n; ++i)
                            for (i64 j = 0; j < d; ++j) {
                                const T xh = (*xhat)[static_cast<std::size_t>(i * d + j)];
                                gx[i * d + j] += gp[j] * (*inv_std)[static_cast<std::size_t>(j)] *
                                                 (g[i * d + j] - mean_g[static_cast<std::size_t>(j)] -
                                                  xh * mean_gx[static_cast<std::size_t>(j)]);
                            }
                    } else {
                        for (i64 i = 0; i < n; ++i)
                            for (i64 j = 0; j < d; ++j)
                                gx[i * d + j] += g[i * d + j] * gp[j] * (*inv_std)[static_cast<std::size_t>(j)];
                    }
                }
            };
        }
        tape->record("batchnorm1d", {x, gamma, beta}, out, std::move(vjp),
                     [compute]() mutable { compute(false); });
    }
    return out;
}

template <class T>
ArrayT<T> sum_all(TapeT<T>* tape, ArrayT<T> x) {
    auto out = zeros<T>({1}, x.requires_grad);
    auto compute = [x, out]() mutable {
        const T* xp = x.ptr();
        T s = 0;
        const i64 n = x.numel();
        for (i64 i = 0; i < n; ++i) s += xp[i];
        out.ptr()[0] = s;
    };
    compute();
    if (tape) {
        std::function<void()> vjp;
        if (out.requires_grad) {
            vjp = [x, out]() mutable {
                x.ensure_grad();
                const T g = out.grad_ptr()[0];
                T* gx = x.grad_ptr();
                const i64 n = x.numel();
                for (i64 i = 0; i < n; ++i) gx[i] += g;
            };
        }
        tape->record("sum_all", {x}, out, std::move(vjp), compute);
    }
    return out;
}

template <class T>
ArrayT<T> mean_all(TapeT<T>* tape, ArrayT<T> x) {
    auto out = zeros<T>({1}, x.requires_grad);
    const i64 n = x.numel();
    auto compute = [x, out, n]() mutable {
        const T* xp = x.ptr();
        T s = 0;
        for (i64 i = 0; i < n; ++i) s += xp[i];
        out.ptr()[0] = s / static_cast<T>(n);
    };
    compute();
    if (tape) {
        std::function<void()> vjp;
        if (out.requires_grad) {
            vjp = [x, out, n]() mutable {
                x.ensure_grad();
                const T g = out.grad_ptr()[0] / static_cast<T>(n);
                T* gx = x.grad_ptr();
                for (i64 i = 0; i < n; ++i) gx[i] += g;
            };
        }
        tape->record("mean_all", {x}, out, std::move(vjp), compute);
    }
    return out;
}

// out = sum_i weights[i] * items[i], all items the same shape
template <class T>
ArrayT<T> weighted_sum(TapeT<T>* tape, std::vector<ArrayT<T>> items, std::vector<double> weights) {
    if (items.empty() || items.size() != weights.size())
        throw ShapeError("weighted_sum: needs matching, non-empty items and weights");
    bool rg = false;
    for (const auto& a : items) {
        detail::require_same_shape("weighted_sum", items[0], a);
        rg = rg || a.requires_grad;
    }
    auto out = zeros<T>(items[0].shape, rg);
    const i64 n = out.numel();
    auto compute = [items, weights, out, n]() mutable {
        T* op = out.ptr();
        std::fill(op, op + n, T(0));
        for (std::size_t t = 0; t < items.size(); ++t) {
            const T w = static_cast<T>(weights[t]);
            const T* ip = items[t].ptr();
            for (i64 i = 0; i < n; ++i) op[i] += w * ip[i];
        }
    };
    compute();
    if (tape) {
        std::function<void()> vjp;
        if (out.requires_grad) {
            vjp = [items, weights, out, n]() mutable {
                const T* g = out.grad_ptr();
                for (std::size_t t = 0; t < items.size(); ++t) {
                    if (!items[t].requires_grad) continue;
                    items[t].ensure_grad();
                    T* gi = items[t].grad_ptr();
                    const T w = static_cast<T>(weights[t]);
                    for (i64 i = 0; i < n; ++i) gi[i] += w * g[i];
                }
            };
        }
        tape->record("weighted_sum", items, out, std::move(vjp), compute);
    }
    return out;
}

// H[i, c*d+j] = A[i,c] * V[i,j]  (per-row outer product, flattened)
template <class T>
ArrayT<T> rowwise_outer(TapeT<T>* tape, ArrayT<T> a, ArrayT<T> v) {
    detail::require_rank2("rowwise_outer", a);
    detail::require_rank2("rowwise_outer", v);
    if (a.dim(0) != v.dim(0))
        throw ShapeError("rowwise_outer: row counts differ: " + shape_str(a.shape) + " vs " + shape_str(v.shape));
    const i64 n = a.dim(0), k = a.dim(1), d = v.dim(1);
    auto out = zeros<T>({n, k * d}, a.requires_grad || v.requires_grad);
    auto compute = [a, v, out, n, k, d]() mutable {
        const T* ap = a.ptr();
        const T* vp = v.ptr();
        T* op = out.ptr();
        parallel_for(n, [&](i64 lo, i64 hi) {
            for (i64 i = lo; i < hi; ++i)
                for (i64 c = 0; c < k; ++c) {
                    const T av = ap[i * k + c];
                    for (i64 j = 0; j < d; ++j) op[(i * k + c) * d + j] = av * vp[i * d + j];
                }
        });
    };
    compute();
    if (tape) {
        std::function<void()> vjp;
        if (out.requires_grad) {
            vjp = [a, v, out, n, k, d]() mutable {
                const T* g = out.grad_ptr();
                if (a.requires_grad) {
                    a.ensure_grad();
                    T* ga = a.grad_ptr();
                    const T* vp = v.ptr();
                    parallel_for(n, [&](i64 lo, i64 hi) {
                        for (i64 i = lo; i < hi; ++i)
                            for (i64 c = 0; c < k; ++c) {
                                T s = 0;
                                for (i64 j = 0; j < d; ++j) s += g[(i * k + c) * d + j] * vp[i * d + j];
                                ga[i * k + c] += s;
                            }
                    });
                }
                if (v.requires_grad) {
                    v.ensure_grad();
                    T* gv = v.grad_ptr();
                    const T* ap = a.ptr();
                    parallel_for(n, [&](i64 lo, i64 hi) {
                        for (i64 i = lo; i < hi; ++i)
                            for (i64 j = 0; j < d; ++j) {
                                T s = 0;
                                for (i64 c = 0; c < k; ++c) s += g[(i * k + c) * d + j] * ap[i * k + c];
                                gv[i * d + j] += s;
                            }
                    });
                }
            };
        }
        tape->record("rowwise_outer", {a, v}, out, std::move(vjp), compute);
    }
    return out;
}

// logits[i,c] = sum_j K[i, c*d+j] * Q[i,j]
template <class T>
ArrayT<T> rowwise_kq(TapeT<T>* tape, ArrayT<T> q, ArrayT<T> kk) {
    detail::require_rank2("rowwise_kq", q);
    detail::require_rank2("rowwise_kq", kk);
    const i64 n = q.dim(0), d = q.dim(1);
    if (kk.dim(0) != n || kk.dim(1) % d != 0)
        throw ShapeError("rowwise_kq: " + shape_str(kk.shape) + " incompatible with " + shape_str(q.shape));
    const i64 k = kk.dim(1) / d;
    auto out = zeros<T>({n, k}, q.requires_grad || kk.requires_grad);
    auto compute = [q, kk, out, n, k, d]() mutable {
        const T* qp = q.ptr();
        const T* kp = kk.ptr();
        T* op = out.ptr();
        parallel_for(n, [&](i64 lo, i64 hi) {
            for (i64 i = lo; i < hi; ++i)
                for (i64 c = 0; c < k; ++c) {
                    T s = 0;
                    for (i64 j = 0; j < d; ++j) s += kp[(i * k + c) * d + j] * qp[i * d + j];
                    op[i * k + c] = s;
                }
        });
    };
    compute();
    if (tape) {
        std::function<void()> vjp;
        if (out.requires_grad) {
            vjp = [q, kk, out, n, k, d]() mutable {
                const T* g = out.grad_ptr();
                if (q.requires_grad) {
                    q.ensure_grad();
                    T* gq = q.grad_ptr();
                    const T* kp = kk.ptr();
                    parallel_for(n, [&](i64 lo, i64 hi) {
                        for (i64 i = lo; i < hi; ++i)
                            for (i64 j = 0; j < d; ++j) {
                                T s = 0;
                                for (i64 c = 0; c < k; ++c) s += g[i * k + c] * kp[(i * k + c) * d + j];
                                gq[i * d + j] += s;
                            }
                    });
                }
                if (kk.requires_grad) {
                    kk.ensure_grad();
                    T* gk = kk.grad_ptr();
                    const T* qp = q.ptr();
                    parallel_for(n, [&](i64 lo, i64 hi) {
                        for (i64 i = lo; i < hi; ++i)
                            for (i64 c = 0; c < k; ++c) {
                                const T gv = g[i * k + c];
                                for (i64 j = 0; j < d; ++j) gk[(i * k + c) * d + j] += gv * qp[i * d + j];
                            }
                    });
                }
            };
        }
        tape->record("rowwise_kq", {q, kk}, out, std::move(vjp), compute);
    }
    return out;
}

// out[i,j] = sum_c S[i,c] * V[i, c*d+j]
template <class T>
ArrayT<T> rowwise_mix(TapeT<T>* tape, ArrayT<T> s, ArrayT<T> v) {
    detail::require_rank2("rowwise_mix", s);
    detail::require_rank2("rowwise_mix", v);
    const i64 n = s.dim(0), k = s.dim(1);
    if (v.dim(0) != n || v.dim(1) % k != 0)
        throw ShapeError("rowwise_mix: " + shape_str(v.shape) + " incompatible with " + shape_str(s.shape));
    const i64 d = v.dim(1) / k;
    auto out = zeros<T>({n, d}, s.requires_grad || v.requires_grad);
    auto compute = [s, v, out, n, k, d]() mutable {
        const T* sp = s.ptr();
        const T* vp = v.ptr();
        T* op = out.ptr();
        parallel_for(n, [&](i64 lo, i64 hi) {
            for (i64 i = lo; i < hi; ++i)
                for (i64 j = 0; j < d; ++j) {
                    T acc = 0;
                    for (i64 c = 0; c < k; ++c) acc += sp[i * k + c] * vp[(i * k + c) * d + j];
                    op[i * d + j] = acc;
                }
        });
    };
    compute();
    if (tape) {
        std::function<void()> vjp;
        if (out.requires_grad) {
            vjp = [s, v, out, n, k, d]() mutable {
                const T* g = out.grad_ptr();
                if (s.requires_grad) {
                    s.ensure_grad();
                    T* gs = s.grad_ptr();
                    const T* vp = v.ptr();
                    parallel_for(n, [&](i64 lo, i64 hi) {
                        for (i64 i = lo; i < hi; ++i)
                            for (i64 c = 0; c < k; ++c) {
                                T acc = 0;
                                for (i64 j = 0; j < d; ++j) acc += g[i * d + j] * vp[(i * k + c) * d + j];
                                gs[i * k + c] += acc;
                            }
                    });
                }
                if (v.requires_grad) {
                    v.ensure_grad();
                    T* gv = v.grad_ptr();
                    const T* sp = s.ptr();
                    parallel_for(n, [&](i64 lo, i64 hi) {
                        for (i64 i = lo; i < hi; ++i)
                            for (i64 c = 0; c < k; ++c) {
                                const T sv = sp[i * k + c];
                                for (i64 j = 0; j < d; ++j) gv[(i * k + c) * d + j] += sv * g[i * d + j];
                            }
                    });
                }
            };
        }
        tape->record("rowwise_mix", {s, v}, out, std::move(vjp), compute);
    }
    return out;
}

template <class T>
ArrayT<T> slice_cols(TapeT<T>* tape, ArrayT<T> x, i64 lo, i64 hi) {
    detail::require_rank2("slice_cols", x);
    const i64 n = x.dim(0), c = x.dim(1);
    if (lo < 0 || hi <= lo || hi > c)
        throw ShapeError("slice_cols: range [" + std::to_string(lo) + "," + std::to_string(hi) + ") outside " +
                         shape_str(x.shape));
    const i64 w = hi - lo;
    auto out = zeros<T>({n, w}, x.requires_grad);
    auto compute = [x, out, n, c, lo, w]() mutable {
        const T* xp = x.ptr();
        T* op = out.ptr();
        parallel_for(n, [&](i64 r0, i64 r1) {
            for (i64 i = r0; i < r1; ++i)
                for (i64 j = 0; j < w; ++j) op[i * w + j] = xp[i * c + lo + j];
        });
    };
    compute();
    if (tape) {
        std::function<void()> vjp;
        if (out.requires_grad) {
            vjp = [x, out, n, c, lo, w]() mutable {
                x.ensure_grad();
                const T* g = out.grad_ptr();
                T* gx = x.grad_ptr();
                parallel_for(n, [&](i64 r0, i64 r1) {
                    for (i64 i = r0; i < r1; ++i)
                        for (i64 j = 0; j < w; ++j) gx[i * c + lo + j] += g[i * w + j];
                });
            };
        }
        tape->record("slice_cols", {x}, out, std::move(vjp), compute);
    }
    return out;
}

}  // namespace vx
