#include <cmath>

#include "doctest.h"
#include "voxattn/selfcheck.hpp"
#include "voxattn/vsa.hpp"

using namespace vx;

namespace {

constexpr double kPi = 3.14159265358979323846;

SegmentTable grid_segments(Rng& rng, i64 n, i64 side) {
    std::vector<VoxelCoord> vox;
    for (i64 i = 0; i < n; ++i) vox.push_back({rng.uniform_int(0, side - 1), rng.uniform_int(0, side - 1), 0});
    return build_segments(vox);
}

std::vector<double> random_local(Rng& rng, i64 n) {
    std::vector<double> local;
    for (i64 i = 0; i < 3 * n; ++i) local.push_back(rng.uniform(0.0, 1.0));
    return local;
}

}  // namespace

TEST_CASE("positional code interleaves sine and cosine per axis") {
    std::vector<double> xyz = {0.25, 0.0, 1.0};
    auto pe = fourier_pe<double>(xyz, 4);
    REQUIRE(pe.shape == Shape{1, 12});
    // axis 0 block: frequencies 1 and 2 against x=0.25
    CHECK(pe[0] == doctest::Approx(std::sin(kPi * 0.25)).epsilon(1e-15));
    CHECK(pe[1] == doctest::Approx(std::cos(kPi * 0.25)).epsilon(1e-15));
    CHECK(pe[2] == doctest::Approx(std::sin(2 * kPi * 0.25)).epsilon(1e-15));
    CHECK(pe[3] == doctest::Approx(std::cos(2 * kPi * 0.25)).epsilon(1e-15));
    // axis 1 block: sin(0)=0, cos(0)=1 at every frequency
    CHECK(pe[4] == 0.0);
    CHECK(pe[5] == 1.0);
    CHECK(pe[6] == 0.0);
    CHECK(pe[7] == 1.0);
    // axis 2 block: x=1 -> sin(pi)=~0, cos(pi)=-1, sin(2pi)=~0, cos(2pi)=1
    CHECK(pe[8] == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(pe[9] == doctest::Approx(-1.0).epsilon(1e-15));
    CHECK(pe[11] == doctest::Approx(1.0).epsilon(1e-15));

    auto wide = fourier_pe<double>(xyz, 64);
    CHECK(wide.shape == Shape{1, 192});

    CHECK_THROWS_AS(fourier_pe<double>(xyz, 3), ConfigError);
    CHECK_THROWS_AS(fourier_pe<double>(xyz, 0), ConfigError);
    std::vector<double> ragged = {0.1, 0.2};
    CHECK_THROWS_AS(fourier_pe<double>(ragged, 4), ShapeError);
}

TEST_CASE("vectorized attention matches the per-voxel reference") {
    auto r = check::vsa_suite(3, 12);
    INFO(r.first_failure);
    CHECK(r.ok());
    CHECK(r.worst < 1e-12);
}

TEST_CASE("zeroed output projection and positional projection reduce the block to normalized input") {
    Rng rng(31);
    const i64 n = 12, d = 5;
    auto seg = grid_segments(rng, n, 2);
    auto local = random_local(rng, n);
    auto p = make_vsa_params<double>(rng, d, 3, 4, d, 4);  // d_in == d_out: identity residual
    std::fill(p.w_out.data->begin(), p.w_out.data->end(), 0.0);
    std::fill(p.pe_proj.data->begin(), p.pe_proj.data->end(), 0.0);
    auto x = uniform_array<double>(rng, {n, d}, -1, 1);
    auto y = vsa_block<double>(nullptr, x, local, seg, p, true);

    // batch statistics of x itself, biased variance
    for (i64 j = 0; j < d; ++j) {
        double mean = 0;
        for (i64 i = 0; i < n; ++i) mean += x[i * d + j];
        mean /= static_cast<double>(n);
        double var = 0;
        for (i64 i = 0; i < n; ++i) var += (x[i * d + j] - mean) * (x[i * d + j] - mean);
        var /= static_cast<double>(n);
        for (i64 i = 0; i < n; ++i)
            CHECK(y[i * d + j] == doctest::Approx((x[i * d + j] - mean) / std::sqrt(var + 1e-5)).epsilon(1e-12));
    }
}

TEST_CASE("single-point voxels make the encoder softmax trivial") {
    Rng rng(32);
    const i64 n = 4, d_in = 3, k = 2, d = 3;
    // four points, four distinct voxels
    auto seg = build_segments({{0, 0, 0}, {1, 0, 0}, {2, 0, 0}, {3, 0, 0}});
    auto x = uniform_array<double>(rng, {n, d_in}, -1, 1);
    auto p = make_vsa_params<double>(rng, d_in, k, d, d, 4);
    auto values = matmul<double>(nullptr, x, p.w_value);
    auto h = vsa_encode<double>(nullptr, x, p, seg);
    REQUIRE(h.per_voxel.shape == Shape{4, k * d});
    // attention weight over a singleton segment is exactly 1, so every slot
    // holds that point's value row
    for (i64 v = 0; v < 4; ++v)
        for (i64 c = 0; c < k; ++c)
            for (i64 j = 0; j < d; ++j)
                CHECK(h.per_voxel[v * k * d + c * d + j] == doctest::Approx(values[v * d + j]).epsilon(1e-14));
}

TEST_CASE("single-slot decoder mixes with weight one") {
    Rng rng(33);
    const i64 n = 6, d_in = 4, d = 3;
    auto seg = grid_segments(rng, n, 2);
    auto x = uniform_array<double>(rng, {n, d_in}, -1, 1);
    auto p = make_vsa_params<double>(rng, d_in, 1, d, d, 4);
    auto h = vsa_encode<double>(nullptr, x, p, seg);
    auto dec = vsa_decode<double>(nullptr, x, h, p, seg);
    // k = 1: softmax over one logit is 1, so the output is vdec of the
    // point's voxel row
    auto vdec = matmul<double>(nullptr, h.per_voxel, p.w_vdec);
    for (i64 i = 0; i < n; ++i) {
        const i64 v = seg.seg_of_point[static_cast<std::size_t>(i)];
        for (i64 j = 0; j < d; ++j) CHECK(dec[i * d + j] == doctest::Approx(vdec[v * d + j]).epsilon(1e-13));
    }
}

TEST_CASE("zeroed convolution kernels leave only the residual path") {
    Rng rng(34);
    const i64 n = 10, k = 2, d = 3;
    auto seg = grid_segments(rng, n, 2);
    auto x = uniform_array<double>(rng, {n, d}, -1, 1);
    auto p = make_vsa_params<double>(rng, d, k, d, d, 4);
    std::fill(p.ffn_w1.data->begin(), p.ffn_w1.data->end(), 0.0);
    std::fill(p.ffn_w2.data->begin(), p.ffn_w2.data->end(), 0.0);
    auto h = vsa_encode<double>(nullptr, x, p, seg);
    auto out = conv_ffn<double>(nullptr, h, p);
    for (i64 i = 0; i < h.per_voxel.numel(); ++i) CHECK(out.per_voxel[i] == h.per_voxel[i]);
}

TEST_CASE("grouped sparse convolution matches a dense loop with zero padding") {
    Rng rng(35);
    const i64 g = 2, d = 3;
    // fully occupied 2x3 patch in one z-plane
    std::vector<VoxelCoord> coords;
    for (i64 x = 0; x < 2; ++x)
        for (i64 y = 0; y < 3; ++y) coords.push_back({x, y, 0});
    const i64 m = static_cast<i64>(coords.size());
    auto nt = std::make_shared<const NeighborTable>(build_neighbors(coords));
    auto h = uniform_array<double>(rng, {m, g * d}, -1, 1);
    auto wt = uniform_array<double>(rng, {g, 9, d, d}, -1, 1);
    auto b = uniform_array<double>(rng, {g * d}, -1, 1);
    auto out = sparse_conv3x3_grouped<double>(nullptr, h, nt, wt, b);

    auto site_of = [&](i64 x, i64 y) -> i64 {
        for (i64 s = 0; s < m; ++s)
            if (coords[static_cast<std::size_t>(s)][0] == x && coords[static_cast<std::size_t>(s)][1] == y) return s;
        return -1;
    };
    for (i64 s = 0; s < m; ++s)
        for (i64 c = 0; c < g; ++c)
            for (i64 j = 0; j < d; ++j) {
                double acc = b[c * d + j];
                for (i64 dx = -1; dx <= 1; ++dx)
                    for (i64 dy = -1; dy <= 1; ++dy) {
                        const i64 nb = site_of(coords[static_cast<std::size_t>(s)][0] + dx,
                                               coords[static_cast<std::size_t>(s)][1] + dy);
                        if (nb < 0) continue;  // absent neighbor contributes zero
                        const i64 tap = (dx + 1) * 3 + (dy + 1);
                        for (i64 a = 0; a < d; ++a)
                            acc += h[nb * g * d + c * d + a] * wt[((c * 9 + tap) * d + a) * d + j];
                    }
                CHECK(out[s * g * d + c * d + j] == doctest::Approx(acc).epsilon(1e-12));
            }
}

TEST_CASE("duplicate voxel coordinates are reported as corruption") {
    std::vector<VoxelCoord> coords{{0, 0, 0}, {1, 0, 0}, {0, 0, 0}};
    CHECK_THROWS_AS(build_neighbors(coords), CheckError);
}

TEST_CASE("block output is invariant to point order") {
    Rng rng(36);
    const i64 n = 40, d_in = 4, d_out = 6;
    std::vector<VoxelCoord> vox;
    for (i64 i = 0; i < n; ++i) vox.push_back({rng.uniform_int(0, 2), rng.uniform_int(0, 2), 0});
    auto seg = build_segments(vox);
    auto local = random_local(rng, n);
    auto x = uniform_array<double>(rng, {n, d_in}, -1, 1);
    auto p = make_vsa_params<double>(rng, d_in, 2, 4, d_out, 4);
    auto y1 = vsa_block<double>(nullptr, x, local, seg, p, false);

    std::vector<i64> perm(static_cast<std::size_t>(n));
    for (i64 i = 0; i < n; ++i) perm[static_cast<std::size_t>(i)] = i;
    for (i64 i = n - 1; i > 0; --i) std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(rng.uniform_int(0, i))]);
    std::vector<VoxelCoord> vox2;
    std::vector<double> local2, xv2;
    for (i64 i = 0; i < n; ++i) {
        const i64 src = perm[static_cast<std::size_t>(i)];
        vox2.push_back(vox[static_cast<std::size_t>(src)]);
        for (int a = 0; a < 3; ++a) local2.push_back(local[static_cast<std::size_t>(src * 3 + a)]);
        for (i64 j = 0; j < d_in; ++j) xv2.push_back(x[src * d_in + j]);
    }
    auto seg2 = build_segments(vox2);
    auto x2 = from_vector<double>({n, d_in}, std::move(xv2));
    auto y2 = vsa_block<double>(nullptr, x2, local2, seg2, p, false);
    for (i64 i = 0; i < n; ++i)
        for (i64 j = 0; j < d_out; ++j)
            CHECK(y2[i * d_out + j] == doctest::Approx(y1[perm[static_cast<std::size_t>(i)] * d_out + j]).epsilon(1e-8));
}

TEST_CASE("block validates its inputs") {
    Rng rng(37);
    auto seg = grid_segments(rng, 5, 2);
    auto x = uniform_array<double>(rng, {5, 3}, -1, 1);
    auto p = make_vsa_params<double>(rng, 3, 2, 4, 4, 4);
    std::vector<double> short_local(3 * 4, 0.5);
    CHECK_THROWS_AS(vsa_block<double>(nullptr, x, short_local, seg, p, false), ShapeError);
    CHECK_THROWS_AS(make_vsa_params<double>(rng, 3, 2, 4, 4, 5), ConfigError);
    CHECK_THROWS_AS(make_vsa_params<double>(rng, 0, 2, 4, 4, 4), ConfigError);
}
