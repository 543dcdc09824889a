#include "voxattn/selfcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <sstream>

#include "voxattn/bev_ops.hpp"
#include "voxattn/gradcheck.hpp"
#include "voxattn/losses.hpp"
#include "voxattn/ops.hpp"
#include "voxattn/rng.hpp"
#include "voxattn/scatter.hpp"
#include "voxattn/sparse_conv.hpp"
#include "voxattn/vsa.hpp"

namespace vx::check {

namespace {

using F = std::function<Array(Tape*, const Array&)>;

std::string fmt(double v) {
    std::ostringstream os;
    os.setf(std::ios::scientific);
    os.precision(3);
    os << v;
    return os.str();
}

void record_case(SuiteResult& r, const std::string& name, bool pass, const std::string& detail) {
    if (pass) {
        r.passed++;
        return;
    }
    r.failed++;
    if (r.first_failure.empty()) r.first_failure = name + ": " + detail;
}

// Runs grad_check on f and books the result. Readouts are weighted so that
// misplaced gradients (wrong transpose, wrong index) cannot cancel out.
void grad_case(SuiteResult& r, const std::string& name, const F& f, Array x, double tol, bool composed = false) {
    double err = 0.0;
    std::string detail;
    try {
        err = grad_check<double>(f, x);
        if (composed)
            r.worst_composed = std::max(r.worst_composed, err);
        else
            r.worst = std::max(r.worst, err);
        if (!(err < tol)) detail = "grad rel err " + fmt(err) + " exceeds " + fmt(tol);
    } catch (const std::exception& e) {
        detail = e.what();
    }
    record_case(r, name, detail.empty(), detail);
}

Array readout(Tape* tape, Array y, Array w) { return sum_all(tape, mul(tape, y, w)); }

// Identity with a deliberately skewed backward rule; only reachable through
// the sabotage flag, which exists to prove the checker can fail.
Array miswired_scale(Tape* tape, Array x) {
    auto out = zeros<double>(x.shape, x.requires_grad);
    auto compute = [x, out]() mutable {
        const double* xp = x.ptr();
        double* op = out.ptr();
        const i64 n = out.numel();
        for (i64 i = 0; i < n; ++i) op[i] = 2.0 * xp[i];
    };
    compute();
    if (tape) {
        std::function<void()> vjp;
        if (out.requires_grad) {
            vjp = [x, out]() mutable {
                x.ensure_grad();
                const double* g = out.grad_ptr();
                double* gx = x.grad_ptr();
                const i64 n = out.numel();
                for (i64 i = 0; i < n; ++i) gx[i] += 2.5 * g[i];
            };
        }
        tape->record("miswired_scale", {x}, out, std::move(vjp), compute);
    }
    return out;
}

Array rand_arr(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
    return uniform_array<double>(rng, std::move(shape), lo, hi);
}

// Values separated by a floor gap so epsilon probes cannot flip an argmax.
Array spaced_arr(Rng& rng, Shape shape) {
    i64 n = 1;
    for (i64 d : shape) n *= d;
    std::vector<double> v(static_cast<std::size_t>(n));
    for (i64 i = 0; i < n; ++i) v[static_cast<std::size_t>(i)] = 0.09 * static_cast<double>(i);
    for (i64 i = n - 1; i > 0; --i) std::swap(v[static_cast<std::size_t>(i)], v[static_cast<std::size_t>(rng.uniform_int(0, i))]);
    for (auto& e : v) e += rng.uniform(0.0, 0.02);
    return from_vector<double>(std::move(shape), std::move(v));
}

SegmentTable random_segments(Rng& rng, i64 n, i64 side) {
    std::vector<VoxelCoord> vox;
    vox.reserve(static_cast<std::size_t>(n));
    for (i64 i = 0; i < n; ++i)
        vox.push_back({rng.uniform_int(0, side - 1), rng.uniform_int(0, side - 1), rng.uniform_int(0, 1)});
    return build_segments(vox);
}

}  // namespace

SuiteResult gradcheck_suite(std::uint64_t seed, bool sabotage, bool quick) {
    SuiteResult r;
    r.name = "gradcheck";
    Rng rng(derive_seed(seed, 11));
    const double tol = 1e-5;

    {
        auto a = rand_arr(rng, {3, 4});
        auto b = rand_arr(rng, {4, 5});
        auto w = rand_arr(rng, {3, 5});
        grad_case(r, "matmul/lhs", [=](Tape* t, const Array& x) { return readout(t, matmul(t, x, b), w); }, a, tol);
        grad_case(r, "matmul/rhs", [=](Tape* t, const Array& x) { return readout(t, matmul(t, a, x), w); }, b, tol);
    }
    {
        auto a = rand_arr(rng, {3, 4});
        auto b = rand_arr(rng, {5, 4});
        auto w = rand_arr(rng, {3, 5});
        grad_case(r, "matmul_nt/lhs", [=](Tape* t, const Array& x) { return readout(t, matmul_nt(t, x, b), w); }, a, tol);
        grad_case(r, "matmul_nt/rhs", [=](Tape* t, const Array& x) { return readout(t, matmul_nt(t, a, x), w); }, b, tol);
    }
    {
        auto a = rand_arr(rng, {4, 6});
        auto w = rand_arr(rng, {6, 4});
        grad_case(r, "transpose2d", [=](Tape* t, const Array& x) { return readout(t, transpose2d(t, x), w); }, a, tol);
    }
    {
        auto a = rand_arr(rng, {3, 5});
        auto b = rand_arr(rng, {3, 5});
        auto w = rand_arr(rng, {3, 5});
        grad_case(r, "add/lhs", [=](Tape* t, const Array& x) { return readout(t, add(t, x, b), w); }, a, tol);
        grad_case(r, "add/rhs", [=](Tape* t, const Array& x) { return readout(t, add(t, a, x), w); }, b, tol);
        grad_case(r, "mul/lhs", [=](Tape* t, const Array& x) { return readout(t, mul(t, x, b), w); }, a, tol);
        grad_case(r, "mul/rhs", [=](Tape* t, const Array& x) { return readout(t, mul(t, a, x), w); }, b, tol);
        grad_case(r, "scale", [=](Tape* t, const Array& x) { return readout(t, scale(t, x, -1.7), w); }, a, tol);
    }
    {
        auto a = rand_arr(rng, {4, 3});
        auto b = rand_arr(rng, {3});
        auto w = rand_arr(rng, {4, 3});
        grad_case(r, "add_bias/input", [=](Tape* t, const Array& x) { return readout(t, add_bias(t, x, b), w); }, a, tol);
        grad_case(r, "add_bias/bias", [=](Tape* t, const Array& x) { return readout(t, add_bias(t, a, x), w); }, b, tol);
    }
    {
        // Inputs kept away from the kink at zero.
        std::vector<double> v;
        for (int i = 0; i < 24; ++i) v.push_back((i % 2 ? 1.0 : -1.0) * rng.uniform(0.05, 1.0));
        auto a = from_vector<double>({4, 6}, std::move(v));
        auto w = rand_arr(rng, {4, 6});
        grad_case(r, "relu", [=](Tape* t, const Array& x) { return readout(t, relu(t, x), w); }, a, tol);
    }
    {
        auto a = rand_arr(rng, {4, 6});
        auto w = rand_arr(rng, {8, 3});
        grad_case(r, "reshape", [=](Tape* t, const Array& x) { return readout(t, reshape(t, x, {8, 3}), w); }, a, tol);
    }
    {
        auto a = rand_arr(rng, {5, 4}, -2.0, 2.0);
        auto w = rand_arr(rng, {5, 4});
        grad_case(r, "softmax_lastdim", [=](Tape* t, const Array& x) { return readout(t, softmax_lastdim(t, x), w); }, a, tol);
    }
    {
        auto a = rand_arr(rng, {3, 7});
        auto w = rand_arr(rng, {3, 3});
        grad_case(r, "slice_cols", [=](Tape* t, const Array& x) { return readout(t, slice_cols(t, x, 2, 5), w); }, a, tol);
    }
    {
        auto a = rand_arr(rng, {3, 4});
        grad_case(r, "sum_all", [=](Tape* t, const Array& x) { return sum_all(t, x); }, a, tol);
        grad_case(r, "mean_all", [=](Tape* t, const Array& x) { return mean_all(t, x); }, a, tol);
    }
    {
        auto a = rand_arr(rng, {2, 3});
        auto b = rand_arr(rng, {2, 3});
        auto c = rand_arr(rng, {2, 3});
        auto w = rand_arr(rng, {2, 3});
        grad_case(r, "weighted_sum",
                  [=](Tape* t, const Array& x) {
                      return readout(t, weighted_sum(t, {b, x, c}, {0.5, -2.0, 3.0}), w);
                  },
                  a, tol);
    }
    {
        auto s = rand_arr(rng, {4, 3});
        auto v = rand_arr(rng, {4, 5});
        auto w = rand_arr(rng, {4, 15});
        grad_case(r, "rowwise_outer/weights", [=](Tape* t, const Array& x) { return readout(t, rowwise_outer(t, x, v), w); }, s, tol);
        grad_case(r, "rowwise_outer/values", [=](Tape* t, const Array& x) { return readout(t, rowwise_outer(t, s, x), w); }, v, tol);
        auto q = rand_arr(rng, {4, 5});
        auto kk = rand_arr(rng, {4, 15});
        auto wl = rand_arr(rng, {4, 3});
        grad_case(r, "rowwise_kq/query", [=](Tape* t, const Array& x) { return readout(t, rowwise_kq(t, x, kk), wl); }, q, tol);
        grad_case(r, "rowwise_kq/keys", [=](Tape* t, const Array& x) { return readout(t, rowwise_kq(t, q, x), wl); }, kk, tol);
        auto wm = rand_arr(rng, {4, 5});
        grad_case(r, "rowwise_mix/weights", [=](Tape* t, const Array& x) { return readout(t, rowwise_mix(t, x, kk), wm); }, s, tol);
        grad_case(r, "rowwise_mix/values", [=](Tape* t, const Array& x) { return readout(t, rowwise_mix(t, s, x), wm); }, kk, tol);
    }
    {
        auto a = rand_arr(rng, {7, 4}, -2.0, 2.0);
        auto gamma = rand_arr(rng, {4}, 0.5, 1.5);
        auto beta = rand_arr(rng, {4});
        auto w = rand_arr(rng, {7, 4});
        auto bn = [=](Tape* t, Array xx, Array gg, Array bb) {
            auto rm = zeros<double>({4});
            auto rv = full<double>({4}, 1.0);
            return readout(t, batchnorm1d(t, xx, gg, bb, rm, rv, true), w);
        };
        grad_case(r, "batchnorm1d/input", [=](Tape* t, const Array& x) { return bn(t, x, gamma, beta); }, a, tol);
        grad_case(r, "batchnorm1d/gamma", [=](Tape* t, const Array& x) { return bn(t, a, x, beta); }, gamma, tol);
        grad_case(r, "batchnorm1d/beta", [=](Tape* t, const Array& x) { return bn(t, a, gamma, x); }, beta, tol);
    }
    {
        Rng srng(derive_seed(seed, 12));
        auto seg = random_segments(srng, 9, 2);
        auto a = rand_arr(rng, {9, 3});
        auto ws = rand_arr(rng, {seg.m, 3});
        auto wp = rand_arr(rng, {9, 3});
        grad_case(r, "scatter_sum", [=](Tape* t, const Array& x) { return readout(t, scatter_sum(t, x, seg), ws); }, a, tol);
        grad_case(r, "scatter_mean", [=](Tape* t, const Array& x) { return readout(t, scatter_mean(t, x, seg), ws); }, a, tol);
        grad_case(r, "scatter_softmax", [=](Tape* t, const Array& x) { return readout(t, scatter_softmax(t, x, seg), wp); }, a, tol);
        auto spaced = spaced_arr(rng, {9, 3});
        grad_case(r, "scatter_max", [=](Tape* t, const Array& x) { return readout(t, scatter_max(t, x, seg), ws); }, spaced, tol);
        auto h = rand_arr(rng, {seg.m, 4});
        auto wg = rand_arr(rng, {9, 4});
        grad_case(r, "segment_gather", [=](Tape* t, const Array& x) { return readout(t, segment_gather(t, x, seg), wg); }, h, tol);
    }
    {
        // 2x2 occupied patch: every site sees present and absent neighbors.
        std::vector<VoxelCoord> coords{{0, 0, 0}, {0, 1, 0}, {1, 0, 0}, {1, 1, 0}};
        auto nt = std::make_shared<const NeighborTable>(build_neighbors(coords));
        const i64 g = 2, d = 3;
        auto h = rand_arr(rng, {4, g * d});
        auto wt = rand_arr(rng, {g, 9, d, d});
        auto b = rand_arr(rng, {g * d});
        auto w = rand_arr(rng, {4, g * d});
        grad_case(r, "sparse_conv/input",
                  [=](Tape* t, const Array& x) { return readout(t, sparse_conv3x3_grouped(t, x, nt, wt, b), w); }, h, tol);
        grad_case(r, "sparse_conv/weight",
                  [=](Tape* t, const Array& x) { return readout(t, sparse_conv3x3_grouped(t, h, nt, x, b), w); }, wt, tol);
        grad_case(r, "sparse_conv/bias",
                  [=](Tape* t, const Array& x) { return readout(t, sparse_conv3x3_grouped(t, h, nt, wt, x), w); }, b, tol);
    }
    {
        auto a = rand_arr(rng, {5, 3});
        std::vector<i64> idx{4, 0, 2, 0};  // duplicate row on purpose
        auto w = rand_arr(rng, {4, 3});
        grad_case(r, "gather_rows", [=](Tape* t, const Array& x) { return readout(t, gather_rows(t, x, idx), w); }, a, tol);
    }
    {
        auto logits = rand_arr(rng, {6, 1}, -2.0, 2.0);
        std::vector<double> tv;
        for (int i = 0; i < 6; ++i) tv.push_back(i % 2 ? 1.0 : 0.0);
        auto targets = from_vector<double>({6, 1}, std::move(tv));
        grad_case(r, "focal_bce/mean", [=](Tape* t, const Array& x) { return focal_bce_loss(t, x, targets, 0.25, 2.0, true); }, logits, tol);
        grad_case(r, "focal_bce/sum", [=](Tape* t, const Array& x) { return focal_bce_loss(t, x, targets, 0.25, 2.0, false); }, logits, tol);
        grad_case(r, "bce_logits", [=](Tape* t, const Array& x) { return bce_logits_loss(t, x, targets, true); }, logits, tol);
    }
    {
        // Residuals kept clear of the quadratic/linear switch at |d| = beta.
        const double beta = 1.0 / 9.0;
        auto target = rand_arr(rng, {4, 3});
        std::vector<double> pv(12);
        for (int i = 0; i < 12; ++i) {
            const double inner = rng.uniform(0.0, 0.5 * beta);
            const double outer = rng.uniform(2.0 * beta, 1.0);
            const double diff = (i % 3 == 0) ? inner : outer;
            pv[static_cast<std::size_t>(i)] = target[i] + (i % 2 ? diff : -diff);
        }
        auto pred = from_vector<double>({4, 3}, std::move(pv));
        grad_case(r, "smooth_l1", [=](Tape* t, const Array& x) { return smooth_l1_loss(t, x, target, beta); }, pred, tol);
    }
    {
        auto rows = rand_arr(rng, {3, 2});
        std::vector<i64> cells{5, 0, 11};
        auto w = rand_arr(rng, {2, 3, 4});
        grad_case(r, "rows_to_grid", [=](Tape* t, const Array& x) { return readout(t, rows_to_grid(t, x, cells, 3, 4), w); }, rows, tol);
    }
    {
        auto x0 = rand_arr(rng, {2, 4, 5});
        auto wt = rand_arr(rng, {3, 2, 3, 3});
        auto b = rand_arr(rng, {3});
        auto w = rand_arr(rng, {3, 4, 5});
        grad_case(r, "conv2d/input", [=](Tape* t, const Array& x) { return readout(t, conv2d_3x3(t, x, wt, b), w); }, x0, tol);
        grad_case(r, "conv2d/weight", [=](Tape* t, const Array& x) { return readout(t, conv2d_3x3(t, x0, x, b), w); }, wt, tol);
        grad_case(r, "conv2d/bias", [=](Tape* t, const Array& x) { return readout(t, conv2d_3x3(t, x0, wt, x), w); }, b, tol);
    }
    {
        auto a = rand_arr(rng, {2, 4, 6});
        auto wp = rand_arr(rng, {2, 2, 3});
        grad_case(r, "avgpool2x2", [=](Tape* t, const Array& x) { return readout(t, avgpool2x2(t, x), wp); }, a, tol);
        auto wpad = rand_arr(rng, {2, 5, 7});
        grad_case(r, "pad_hw", [=](Tape* t, const Array& x) { return readout(t, pad_hw(t, x, 1, 1), wpad); }, a, tol);
        auto wcrop = rand_arr(rng, {2, 3, 5});
        grad_case(r, "crop_hw", [=](Tape* t, const Array& x) { return readout(t, crop_hw(t, x, 3, 5), wcrop); }, a, tol);
        auto wup = rand_arr(rng, {2, 8, 12});
        grad_case(r, "upsample_nearest2x", [=](Tape* t, const Array& x) { return readout(t, upsample_nearest2x(t, x), wup); }, a, tol);
        auto b = rand_arr(rng, {3, 4, 6});
        auto wc = rand_arr(rng, {5, 4, 6});
        grad_case(r, "concat_channels/lhs", [=](Tape* t, const Array& x) { return readout(t, concat_channels(t, x, b), wc); }, a, tol);
        grad_case(r, "concat_channels/rhs", [=](Tape* t, const Array& x) { return readout(t, concat_channels(t, a, x), wc); }, b, tol);
    }

    if (sabotage) {
        auto a = rand_arr(rng, {3, 3});
        auto w = rand_arr(rng, {3, 3});
        grad_case(r, "sabotage-vjp", [=](Tape* t, const Array& x) { return readout(t, miswired_scale(t, x), w); }, a, tol);
    }

    // Composed block: every parameter plus the input, finite differences
    // through attention, grouped conv, softmax and batch norm at once.
    {
        Rng brng(derive_seed(seed, 23));
        const i64 n = 30;
        std::vector<VoxelCoord> vox;
        std::vector<double> local;
        for (i64 i = 0; i < n; ++i) {
            vox.push_back({brng.uniform_int(0, 2), brng.uniform_int(0, 2), 0});
            for (int a = 0; a < 3; ++a) local.push_back(brng.uniform(-0.5, 0.5));
        }
        auto seg = build_segments(vox);
        const i64 d_in = quick ? 4 : 5, k = quick ? 2 : 3, d = quick ? 4 : 6, d_out = quick ? 3 : 4;
        auto p = make_vsa_params<double>(brng, d_in, k, d, d_out, 4);
        std::vector<NamedParam> params;
        std::vector<NamedParam> buffers;
        p.collect("block.", params, buffers);
        auto x0 = rand_arr(brng, {n, d_in});
        auto w = rand_arr(brng, {n, d_out});
        const double btol = 1e-4;
        grad_case(r, "block/input",
                  [&p, &local, &seg, w](Tape* t, const Array& x) {
                      Array xx = x;
                      return readout(t, vsa_block(t, xx, local, seg, p, true), w);
                  },
                  x0, btol, true);
        for (auto& np : params)
            grad_case(r, "block/" + np.name,
                      [&p, &local, &seg, x0, w](Tape* t, const Array&) {
                          Array xx = x0;
                          return readout(t, vsa_block(t, xx, local, seg, p, true), w);
                      },
                      np.array, btol, true);
    }

    return r;
}

SuiteResult scatter_suite(std::uint64_t seed, bool quick) {
    SuiteResult r;
    r.name = "scatter";
    const int trials = quick ? 6 : 24;
    for (int t = 0; t < trials; ++t) {
        Rng rng(derive_seed(seed, 30000 + static_cast<std::uint64_t>(t)));
        const i64 n = rng.uniform_int(1, quick ? 120 : 400);
        const i64 side = rng.uniform_int(1, 4);
        const i64 c = rng.uniform_int(1, 6);
        auto seg = random_segments(rng, n, side);
        auto x = rand_arr(rng, {n, c}, -2.0, 2.0);
        const i64 m = seg.m;
        const std::string where = " (trial " + std::to_string(t) + ", n=" + std::to_string(n) +
                                  ", m=" + std::to_string(m) + ", cols=" + std::to_string(c) + ")";

        std::vector<double> osum(static_cast<std::size_t>(m * c), 0.0);
        std::vector<double> omax(static_cast<std::size_t>(m * c), -std::numeric_limits<double>::infinity());
        for (i64 i = 0; i < n; ++i) {
            const i64 s = seg.seg_of_point[static_cast<std::size_t>(i)];
            for (i64 j = 0; j < c; ++j) {
                osum[static_cast<std::size_t>(s * c + j)] += x[i * c + j];
                omax[static_cast<std::size_t>(s * c + j)] = std::max(omax[static_cast<std::size_t>(s * c + j)], x[i * c + j]);
            }
        }

        auto ysum = scatter_sum<double>(nullptr, x, seg);
        auto ymax = scatter_max<double>(nullptr, x, seg);
        auto ymean = scatter_mean<double>(nullptr, x, seg);
        double esum = 0, emax = 0, emean = 0;
        for (i64 i = 0; i < m * c; ++i) {
            esum = std::max(esum, std::abs(ysum[i] - osum[static_cast<std::size_t>(i)]));
            emax = std::max(emax, std::abs(ymax[i] - omax[static_cast<std::size_t>(i)]));
            const double cnt = static_cast<double>(seg.counts[static_cast<std::size_t>(i / c)]);
            emean = std::max(emean, std::abs(ymean[i] - osum[static_cast<std::size_t>(i)] / cnt));
        }
        r.worst = std::max({r.worst, esum, emax, emean});
        record_case(r, "scatter_sum", esum <= 1e-12, "max abs err " + fmt(esum) + where);
        record_case(r, "scatter_max", emax <= 1e-12, "max abs err " + fmt(emax) + where);
        record_case(r, "scatter_mean", emean <= 1e-12, "max abs err " + fmt(emean) + where);

        auto ysoft = scatter_softmax<double>(nullptr, x, seg);
        double esoft = 0;
        for (i64 v = 0; v < m; ++v) {
            const i64 lo = seg.offsets[static_cast<std::size_t>(v)], hi = seg.offsets[static_cast<std::size_t>(v) + 1];
            for (i64 j = 0; j < c; ++j) {
                double mx = -std::numeric_limits<double>::infinity();
                for (i64 q = lo; q < hi; ++q)
                    mx = std::max(mx, x[seg.order[static_cast<std::size_t>(q)] * c + j]);
                double z = 0;
                for (i64 q = lo; q < hi; ++q)
                    z += std::exp(x[seg.order[static_cast<std::size_t>(q)] * c + j] - mx);
                for (i64 q = lo; q < hi; ++q) {
                    const i64 i = seg.order[static_cast<std::size_t>(q)];
                    const double want = std::exp(x[i * c + j] - mx) / z;
                    esoft = std::max(esoft, std::abs(ysoft[i * c + j] - want));
                }
            }
        }
        r.worst = std::max(r.worst, esoft);
        record_case(r, "scatter_softmax", esoft <= 1e-12, "max abs err " + fmt(esoft) + where);

        auto h = rand_arr(rng, {m, c});
        auto yg = segment_gather<double>(nullptr, h, seg);
        double egather = 0;
        for (i64 i = 0; i < n; ++i)
            for (i64 j = 0; j < c; ++j)
                egather = std::max(egather, std::abs(yg[i * c + j] - h[seg.seg_of_point[static_cast<std::size_t>(i)] * c + j]));
        record_case(r, "segment_gather", egather == 0.0, "max abs err " + fmt(egather) + where);

        // Point order must not matter: permute, rebuild, match rows by coord.
        std::vector<i64> pi(static_cast<std::size_t>(n));
        for (i64 i = 0; i < n; ++i) pi[static_cast<std::size_t>(i)] = i;
        for (i64 i = n - 1; i > 0; --i) std::swap(pi[static_cast<std::size_t>(i)], pi[static_cast<std::size_t>(rng.uniform_int(0, i))]);
        std::vector<VoxelCoord> vox2;
        std::vector<double> xv2;
        vox2.reserve(static_cast<std::size_t>(n));
        for (i64 i = 0; i < n; ++i) {
            const i64 src = pi[static_cast<std::size_t>(i)];
            vox2.push_back(seg.voxel_coords[static_cast<std::size_t>(seg.seg_of_point[static_cast<std::size_t>(src)])]);
            for (i64 j = 0; j < c; ++j) xv2.push_back(x[src * c + j]);
        }
        auto seg2 = build_segments(vox2);
        auto x2 = from_vector<double>({n, c}, std::move(xv2));
        auto ysum2 = scatter_sum<double>(nullptr, x2, seg2);
        std::unordered_map<VoxelCoord, i64, VoxelCoordHash> row2;
        for (i64 v = 0; v < seg2.m; ++v) row2[seg2.voxel_coords[static_cast<std::size_t>(v)]] = v;
        double eperm = 0;
        for (i64 v = 0; v < m; ++v) {
            const i64 v2 = row2.at(seg.voxel_coords[static_cast<std::size_t>(v)]);
            for (i64 j = 0; j < c; ++j)
                eperm = std::max(eperm, std::abs(ysum[v * c + j] - ysum2[v2 * c + j]));
        }
        auto ysoft2 = scatter_softmax<double>(nullptr, x2, seg2);
        for (i64 i = 0; i < n; ++i)
            for (i64 j = 0; j < c; ++j)
                eperm = std::max(eperm, std::abs(ysoft2[i * c + j] - ysoft[pi[static_cast<std::size_t>(i)] * c + j]));
        r.worst = std::max(r.worst, eperm);
        record_case(r, "permutation", eperm <= 1e-12, "max abs err " + fmt(eperm) + where);
    }
    return r;
}

SuiteResult vsa_suite(std::uint64_t seed, int instances) {
    SuiteResult r;
    r.name = "vsa";
    const i64 kset[4] = {1, 4, 8, 16};
    const i64 dset[2] = {4, 16};
    for (int t = 0; t < instances; ++t) {
        Rng rng(derive_seed(seed, 40000 + static_cast<std::uint64_t>(t)));
        const i64 k = kset[t % 4];
        const i64 d = dset[(t / 4) % 2];
        const bool big = (t % 16) == 15;
        const i64 n = big ? rng.uniform_int(2500, 5000) : rng.uniform_int(20, 600);
        const i64 d_in = (t % 3 == 0) ? d : rng.uniform_int(3, 12);
        const i64 l_pe = (t % 2 == 0) ? 4 : 8;
        const i64 side = std::max<i64>(1, static_cast<i64>(std::llround(std::sqrt(static_cast<double>(n) / 6.0))));
        auto seg = random_segments(rng, n, side);
        std::vector<double> local;
        local.reserve(static_cast<std::size_t>(3 * n));
        for (i64 i = 0; i < 3 * n; ++i) local.push_back(rng.uniform(-0.5, 0.5));
        auto x = rand_arr(rng, {n, d_in});
        auto p = make_vsa_params<double>(rng, d_in, k, d, d, l_pe);

        const std::string where = "instance " + std::to_string(t) + " (n=" + std::to_string(n) +
                                  ", m=" + std::to_string(seg.m) + ", k=" + std::to_string(k) +
                                  ", d=" + std::to_string(d) + ", d_in=" + std::to_string(d_in) + ")";
        try {
            auto pe = fourier_pe<double>(local, l_pe);
            auto xp = add<double>(nullptr, x, matmul<double>(nullptr, pe, p.pe_proj));
            auto h = vsa_encode<double>(nullptr, xp, p, seg);
            auto hh = conv_ffn<double>(nullptr, h, p);
            auto dec = vsa_decode<double>(nullptr, xp, hh, p, seg);
            auto ref = naive_vsa_oracle<double>(x, local, seg, p);
            double err = 0;
            for (i64 i = 0; i < n * d; ++i) err = std::max(err, std::abs(dec[i] - ref[i]));
            r.worst = std::max(r.worst, err);
            record_case(r, "vsa-oracle", err < 1e-12, "max abs err " + fmt(err) + " on " + where);
        } catch (const std::exception& e) {
            record_case(r, "vsa-oracle", false, std::string(e.what()) + " on " + where);
        }
    }
    return r;
}

SuiteResult softmax_suite(std::uint64_t seed, int layouts) {
    SuiteResult r;
    r.name = "softmax";
    for (int t = 0; t < layouts; ++t) {
        Rng rng(derive_seed(seed, 70000 + static_cast<std::uint64_t>(t)));
        const i64 n = rng.uniform_int(1, 40);
        const i64 k = rng.uniform_int(1, 8);
        const i64 side = rng.uniform_int(1, 4);
        auto seg = random_segments(rng, n, side);
        const double span = (t % 17 == 0) ? 1000.0 : 5.0;  // periodically stress the max-shift
        auto x = rand_arr(rng, {n, k}, -span, span);
        auto y = scatter_softmax<double>(nullptr, x, seg);
        double err = 0;
        bool finite = true;
        for (i64 v = 0; v < seg.m; ++v) {
            const i64 lo = seg.offsets[static_cast<std::size_t>(v)], hi = seg.offsets[static_cast<std::size_t>(v) + 1];
            for (i64 j = 0; j < k; ++j) {
                double sum = 0;
                for (i64 q = lo; q < hi; ++q) {
                    const double w = y[seg.order[static_cast<std::size_t>(q)] * k + j];
                    if (!std::isfinite(w)) finite = false;
                    sum += w;
                }
                err = std::max(err, std::abs(sum - 1.0));
            }
        }
        r.worst = std::max(r.worst, err);
        record_case(r, "softmax-normalization", finite && err <= 1e-12,
                    std::string(finite ? "segment sum off by " + fmt(err) : "non-finite weight") + " (layout " +
                        std::to_string(t) + ", n=" + std::to_string(n) + ", m=" + std::to_string(seg.m) +
                        ", k=" + std::to_string(k) + ", span=" + fmt(span) + ")");
    }
    return r;
}

std::vector<SuiteResult> run_suites(const Options& opt) {
    std::vector<SuiteResult> out;
    auto want = [&](const char* name) {
        return opt.filter.empty() || std::string(name).find(opt.filter) != std::string::npos;
    };
    if (want("gradcheck") || opt.sabotage_vjp) out.push_back(gradcheck_suite(opt.seed, opt.sabotage_vjp, opt.quick));
    if (want("scatter")) out.push_back(scatter_suite(opt.seed, opt.quick));
    if (want("vsa")) out.push_back(vsa_suite(opt.seed, opt.quick ? 12 : 50));
    if (want("softmax")) out.push_back(softmax_suite(opt.seed, opt.quick ? 500 : 10000));
    if (out.empty()) throw ConfigError("selftest: filter '" + opt.filter + "' matches no suite");
    return out;
}

}  // namespace vx::check
