#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "voxattn/array.hpp"
#include "voxattn/ops.hpp"
#include "voxattn/tape.hpp"

namespace vx {

// Compares the tape gradient of a scalar-valued function against central
// differences. Returns max over entries of
//   |analytic - numeric| / max(1, |numeric|).
// The input buffer is perturbed in place and restored; f must be a pure
// function of the array values. Two baseline evaluations are compared
// bitwise first, so a non-deterministic f is reported instead of producing
// a meaningless error value.
template <class T>
double grad_check(const std::function<ArrayT<T>(TapeT<T>*, const ArrayT<T>&)>& f, ArrayT<T> x, double eps = 1e-6) {
    ArrayT<T> xd = x;
    xd.requires_grad = false;

    auto probe0 = f(nullptr, xd);
    auto probe1 = f(nullptr, xd);
    if (probe0.numel() != 1 || probe1.numel() != 1) throw ShapeError("grad_check: f must be scalar-valued");
    if (probe0[0] != probe1[0]) throw CheckError("grad_check: f is not deterministic across calls");

    ArrayT<T> xg = x;
    xg.requires_grad = true;
    xg.uid = next_array_uid();
    TapeT<T> tape;
    auto loss = f(&tape, xg);
    // The grad slot is shared between handles and may hold residue from an
    // earlier backward pass over the same array.
    if (xg.has_grad()) std::fill(xg.grad_vec().begin(), xg.grad_vec().end(), T(0));
    tape.backward(loss);

    const i64 n = x.numel();
    std::vector<double> analytic(static_cast<std::size_t>(n), 0.0);
    if (xg.has_grad())
        for (i64 i = 0; i < n; ++i) analytic[static_cast<std::size_t>(i)] = static_cast<double>(xg.grad_vec()[static_cast<std::size_t>(i)]);

    double max_err = 0.0;
    for (i64 i = 0; i < n; ++i) {
        const T orig = (*x.data)[static_cast<std::size_t>(i)];
        (*x.data)[static_cast<std::size_t>(i)] = orig + static_cast<T>(eps);
        const double fp = static_cast<double>(f(nullptr, xd)[0]);
        (*x.data)[static_cast<std::size_t>(i)] = orig - static_cast<T>(eps);
        const double fm = static_cast<double>(f(nullptr, xd)[0]);
        (*x.data)[static_cast<std::size_t>(i)] = orig;
        const double numeric = (fp - fm) / (2.0 * eps);
        const double err = std::abs(analytic[static_cast<std::size_t>(i)] - numeric) / std::max(1.0, std::abs(numeric));
        max_err = std::max(max_err, err);
    }
    return max_err;
}

}  // namespace vx
