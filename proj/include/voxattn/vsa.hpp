#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "voxattn/ops.hpp"
#include "voxattn/rng.hpp"
#include "voxattn/scatter.hpp"
#include "voxattn/sparse_conv.hpp"

namespace vx {

// Per axis: frequencies 2^j for j in [0, l_pe/2), emitted as interleaved
// sin(2^j pi x), cos(2^j pi x) pairs; axes concatenated x,y,z. Width 3*l_pe.
template <class T>
ArrayT<T> fourier_pe(const std::vector<double>& local_xyz, i64 l_pe) {
    if (l_pe < 2 || l_pe % 2 != 0) throw ConfigError("fourier_pe: bandwidth must be even and >= 2");
    if (local_xyz.size() % 3 != 0) throw ShapeError("fourier_pe: coordinate buffer must hold n*3 values");
    const i64 n = static_cast<i64>(local_xyz.size() / 3);
    if (n == 0) throw ShapeError("fourier_pe: no points");
    const i64 half = l_pe / 2;
    auto out = zeros<T>({n, 3 * l_pe});
    T* op = out.ptr();
    parallel_for(n, [&](i64 lo, i64 hi) {
        for (i64 i = lo; i < hi; ++i)
            for (i64 a = 0; a < 3; ++a) {
                const double x = local_xyz[static_cast<std::size_t>(i * 3 + a)];
                double f = 1.0;
                for (i64 j = 0; j < half; ++j) {
                    const double arg = f * 3.14159265358979323846 * x;
                    op[i * 3 * l_pe + a * l_pe + 2 * j] = static_cast<T>(std::sin(arg));
                    op[i * 3 * l_pe + a * l_pe + 2 * j + 1] = static_cast<T>(std::cos(arg));
                    f *= 2.0;
                }
            }
    });
    return out;
}

template <class T>
struct VsaParamsT {
    i64 d_in = 0, k = 0, d = 0, d_out = 0, l_pe = 0;

    ArrayT<T> latents;             // k x d
    ArrayT<T> w_key, w_value;      // d_in x d
    ArrayT<T> w_query;             // d_in x d
    ArrayT<T> w_kdec, w_vdec;      // d x d, shared across slots
    ArrayT<T> w_out;               // d x d_out
    ArrayT<T> ffn_w1, ffn_w2;      // k x 9 x d x d
    ArrayT<T> ffn_b1, ffn_b2;      // k*d
    ArrayT<T> pe_proj;             // (3*l_pe) x d_in
    ArrayT<T> w_res;               // d_in x d_out, allocated only when d_in != d_out
    ArrayT<T> bn_gamma, bn_beta;   // d_out
    ArrayT<T> bn_mean, bn_var;     // d_out running stats

    void collect(const std::string& prefix, std::vector<NamedParamT<T>>& params,
                 std::vector<NamedParamT<T>>& buffers) {
        params.push_back({prefix + "latents", latents});
        params.push_back({prefix + "w_key", w_key});
        params.push_back({prefix + "w_value", w_value});
        params.push_back({prefix + "w_query", w_query});
        params.push_back({prefix + "w_kdec", w_kdec});
        params.push_back({prefix + "w_vdec", w_vdec});
        params.push_back({prefix + "w_out", w_out});
        params.push_back({prefix + "ffn_w1", ffn_w1});
        params.push_back({prefix + "ffn_w2", ffn_w2});
        params.push_back({prefix + "ffn_b1", ffn_b1});
        params.push_back({prefix + "ffn_b2", ffn_b2});
        params.push_back({prefix + "pe_proj", pe_proj});
        if (w_res.valid()) params.push_back({prefix + "w_res", w_res});
        params.push_back({prefix + "bn_gamma", bn_gamma});
        params.push_back({prefix + "bn_beta", bn_beta});
        buffers.push_back({prefix + "bn_mean", bn_mean});
        buffers.push_back({prefix + "bn_var", bn_var});
    }
};

template <class T>
VsaParamsT<T> make_vsa_params(Rng& rng, i64 d_in, i64 k, i64 d, i64 d_out, i64 l_pe) {
    if (d_in < 1 || k < 1 || d < 1 || d_out < 1) throw ConfigError("make_vsa_params: dims must be positive");
    if (l_pe < 2 || l_pe % 2 != 0) throw ConfigError("make_vsa_params: bandwidth must be even and >= 2");
    VsaParamsT<T> p;
    p.d_in = d_in;
    p.k = k;
    p.d = d;
    p.d_out = d_out;
    p.l_pe = l_pe;
    auto lin = [&rng](i64 fan_in, Shape shape) {
        const T b = static_cast<T>(1.0 / std::sqrt(static_cast<double>(fan_in)));
        return uniform_array<T>(rng, std::move(shape), -b, b, true);
    };
    p.latents = normal_array<T>(rng, {k, d}, T(0), T(0.02), true);
    p.w_key = lin(d_in, {d_in, d});
    p.w_value = lin(d_in, {d_in, d});
    p.w_query = lin(d_in, {d_in, d});
    p.w_kdec = lin(d, {d, d});
    p.w_vdec = lin(d, {d, d});
    p.w_out = lin(d, {d, d_out});
    p.ffn_w1 = lin(9 * d, {k, 9, d, d});
    p.ffn_w2 = lin(9 * d, {k, 9, d, d});
    p.ffn_b1 = zeros<T>({k * d}, true);
    p.ffn_b2 = zeros<T>({k * d}, true);
    p.pe_proj = lin(3 * l_pe, {3 * l_pe, d_in});
    if (d_in != d_out) p.w_res = lin(d_in, {d_in, d_out});
    p.bn_gamma = full<T>({d_out}, T(1), true);
    p.bn_beta = zeros<T>({d_out}, true);
    p.bn_mean = zeros<T>({d_out});
    p.bn_var = full<T>({d_out}, T(1));
    return p;
}

template <class T>
struct HiddenFeaturesT {
    ArrayT<T> per_voxel;  // m x (k*d)
    i64 k = 0, d = 0;
    std::shared_ptr<const std::vector<VoxelCoord>> coords;
};

template <class T>
HiddenFeaturesT<T> vsa_encode(TapeT<T>* tape, ArrayT<T> x, const VsaParamsT<T>& p, const SegmentTable& seg) {
    detail::require_points("vsa_encode", x, seg);
    if (x.dim(1) != p.d_in) throw ShapeError("vsa_encode: input width " + shape_str(x.shape));
    auto keys = matmul(tape, x, p.w_key);
    auto values = matmul(tape, x, p.w_value);
    auto logits = matmul_nt(tape, keys, p.latents);
    auto weights = scatter_softmax(tape, logits, seg);
    auto outer = rowwise_outer(tape, weights, values);
    HiddenFeaturesT<T> h;
    h.per_voxel = scatter_sum(tape, outer, seg);
    h.k = p.k;
    h.d = p.d;
    h.coords = std::make_shared<const std::vector<VoxelCoord>>(seg.voxel_coords);
    return h;
}

template <class T>
HiddenFeaturesT<T> conv_ffn(TapeT<T>* tape, const HiddenFeaturesT<T>& h, const VsaParamsT<T>& p) {
    if (!h.coords || h.per_voxel.dim(0) != static_cast<i64>(h.coords->size()))
        throw ShapeError("conv_ffn: hidden features do not cover the voxel coords");
    auto nt = std::make_shared<const NeighborTable>(build_neighbors(*h.coords));
    auto t = relu(tape, sparse_conv3x3_grouped(tape, h.per_voxel, nt, p.ffn_w1, p.ffn_b1));
    auto u = sparse_conv3x3_grouped(tape, t, nt, p.ffn_w2, p.ffn_b2);
    HiddenFeaturesT<T> out;
    out.per_voxel = add(tape, h.per_voxel, u);
    out.k = h.k;
    out.d = h.d;
    out.coords = h.coords;
    return out;
}

template <class T>
ArrayT<T> vsa_decode(TapeT<T>* tape, ArrayT<T> x, const HiddenFeaturesT<T>& h_hat, const VsaParamsT<T>& p,
                     const SegmentTable& seg) {
    detail::require_points("vsa_decode", x, seg);
    if (h_hat.per_voxel.dim(0) != seg.m) throw ShapeError("vsa_decode: hidden features do not cover all voxels");
    const i64 n = x.dim(0);
    auto gathered = segment_gather(tape, h_hat.per_voxel, seg);
    auto flat = reshape(tape, gathered, {n * p.k, p.d});
    auto kdec = reshape(tape, matmul(tape, flat, p.w_kdec), {n, p.k * p.d});
    auto vdec = reshape(tape, matmul(tape, flat, p.w_vdec), {n, p.k * p.d});
    auto q = matmul(tape, x, p.w_query);
    auto logits = rowwise_kq(tape, q, kdec);
    auto weights = softmax_lastdim(tape, logits);
    return rowwise_mix(tape, weights, vdec);
}

// x' = x + pe_proj(fourier_pe(local)); residual wraps the attention path:
// out = batchnorm(res(x') + w_out(decode(conv_ffn(encode(x'))))).
template <class T>
ArrayT<T> vsa_block(TapeT<T>* tape, ArrayT<T> x, const std::vector<double>& pc_local, const SegmentTable& seg,
                    VsaParamsT<T>& p, bool training) {
    detail::require_points("vsa_block", x, seg);
    auto pe = fourier_pe<T>(pc_local, p.l_pe);
    if (pe.dim(0) != x.dim(0)) throw ShapeError("vsa_block: coords cover " + std::to_string(pe.dim(0)) +
                                                " points, features " + std::to_string(x.dim(0)));
    auto xp = add(tape, x, matmul(tape, pe, p.pe_proj));
    auto h = vsa_encode(tape, xp, p, seg);
    auto h_hat = conv_ffn(tape, h, p);
    auto decoded = vsa_decode(tape, xp, h_hat, p, seg);
    auto y = matmul(tape, decoded, p.w_out);
    auto res = p.w_res.valid() ? matmul(tape, xp, p.w_res) : xp;
    auto pre = add(tape, res, y);
    return batchnorm1d(tape, pre, p.bn_gamma, p.bn_beta, p.bn_mean, p.bn_var, training);
}

// Reference path: dense per-voxel loops for both attention stages, with the
// grouped spatial convolution applied to the loop-built hidden features.
// Forward values only.
template <class T>
ArrayT<T> naive_vsa_oracle(const ArrayT<T>& x, const std::vector<double>& pc_local, const SegmentTable& seg,
                           const VsaParamsT<T>& p) {
    detail::require_points("naive_vsa_oracle", x, seg);
    const i64 n = x.dim(0), k = p.k, d = p.d, d_in = p.d_in;
    if (x.dim(1) != d_in) throw ShapeError("naive_vsa_oracle: input width " + shape_str(x.shape));

    auto pe = fourier_pe<double>(pc_local, p.l_pe);
    std::vector<double> xp(static_cast<std::size_t>(n * d_in));
    for (i64 i = 0; i < n; ++i)
        for (i64 j = 0; j < d_in; ++j) {
            double s = static_cast<double>(x[i * d_in + j]);
            for (i64 f = 0; f < 3 * p.l_pe; ++f)
                s += static_cast<double>(pe[i * 3 * p.l_pe + f]) * static_cast<double>(p.pe_proj[f * d_in + j]);
            xp[static_cast<std::size_t>(i * d_in + j)] = s;
        }

    std::vector<double> keys(static_cast<std::size_t>(n * d)), values(static_cast<std::size_t>(n * d));
    for (i64 i = 0; i < n; ++i)
        for (i64 j = 0; j < d; ++j) {
            double sk = 0, sv = 0;
            for (i64 c = 0; c < d_in; ++c) {
                const double xv = xp[static_cast<std::size_t>(i * d_in + c)];
                sk += xv * static_cast<double>(p.w_key[c * d + j]);
                sv += xv * static_cast<double>(p.w_value[c * d + j]);
            }
            keys[static_cast<std::size_t>(i * d + j)] = sk;
            values[static_cast<std::size_t>(i * d + j)] = sv;
        }

    auto hr = zeros<T>({seg.m, k * d});
    for (i64 v = 0; v < seg.m; ++v) {
        const i64 lo = seg.offsets[static_cast<std::size_t>(v)], hi = seg.offsets[static_cast<std::size_t>(v) + 1];
        for (i64 c = 0; c < k; ++c) {
            double mx = -std::numeric_limits<double>::infinity();
            std::vector<double> lg(static_cast<std::size_t>(hi - lo));
            for (i64 t = lo; t < hi; ++t) {
                const i64 i = seg.order[static_cast<std::size_t>(t)];
                double s = 0;
                for (i64 j = 0; j < d; ++j)
                    s += keys[static_cast<std::size_t>(i * d + j)] * static_cast<double>(p.latents[c * d + j]);
                lg[static_cast<std::size_t>(t - lo)] = s;
                mx = std::max(mx, s);
            }
            double z = 0;
            for (auto& s : lg) {
                s = std::exp(s - mx);
                z += s;
            }
            for (i64 t = lo; t < hi; ++t) {
                const i64 i = seg.order[static_cast<std::size_t>(t)];
                const double w = lg[static_cast<std::size_t>(t - lo)] / z;
                for (i64 j = 0; j < d; ++j)
                    hr[v * k * d + c * d + j] += static_cast<T>(w * values[static_cast<std::size_t>(i * d + j)]);
            }
        }
    }

    HiddenFeaturesT<T> h;
    h.per_voxel = hr;
    h.k = k;
    h.d = d;
    h.coords = std::make_shared<const std::vector<VoxelCoord>>(seg.voxel_coords);
    auto h_hat = conv_ffn<T>(nullptr, h, p);

    auto out = zeros<T>({n, d});
    for (i64 i = 0; i < n; ++i) {
        const i64 v = seg.seg_of_point[static_cast<std::size_t>(i)];
        std::vector<double> kd(static_cast<std::size_t>(k * d)), vd(static_cast<std::size_t>(k * d));
        for (i64 c = 0; c < k; ++c)
            for (i64 j = 0; j < d; ++j) {
                double sk = 0, sv = 0;
                for (i64 a = 0; a < d; ++a) {
                    const double hv = static_cast<double>(h_hat.per_voxel[v * k * d + c * d + a]);
                    sk += hv * static_cast<double>(p.w_kdec[a * d + j]);
                    sv += hv * static_cast<double>(p.w_vdec[a * d + j]);
                }
                kd[static_cast<std::size_t>(c * d + j)] = sk;
                vd[static_cast<std::size_t>(c * d + j)] = sv;
            }
        std::vector<double> q(static_cast<std::size_t>(d));
        for (i64 j = 0; j < d; ++j) {
            double s = 0;
            for (i64 c = 0; c < d_in; ++c)
                s += xp[static_cast<std::size_t>(i * d_in + c)] * static_cast<double>(p.w_query[c * d + j]);
            q[static_cast<std::size_t>(j)] = s;
        }
        std::vector<double> lg(static_cast<std::size_t>(k));
        double mx = -std::numeric_limits<double>::infinity();
        for (i64 c = 0; c < k; ++c) {
            double s = 0;
            for (i64 j = 0; j < d; ++j)
                s += kd[static_cast<std::size_t>(c * d + j)] * q[static_cast<std::size_t>(j)];
            lg[static_cast<std::size_t>(c)] = s;
            mx = std::max(mx, s);
        }
        double z = 0;
        for (auto& s : lg) {
            s = std::exp(s - mx);
            z += s;
        }
        for (i64 j = 0; j < d; ++j) {
            double acc = 0;
            for (i64 c = 0; c < k; ++c)
                acc += (lg[static_cast<std::size_t>(c)] / z) * vd[static_cast<std::size_t>(c * d + j)];
            out[i * d + j] = static_cast<T>(acc);
        }
    }
    return out;
}

}  // namespace vx
