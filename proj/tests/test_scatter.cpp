#include <cmath>

#include "doctest.h"
#include "voxattn/ops.hpp"
#include "voxattn/scatter.hpp"
#include "voxattn/selfcheck.hpp"

using namespace vx;

namespace {

SegmentTable two_segment_table() {
    // points 0,2,3 -> voxel (0,0,0) = segment 0; points 1,4 -> (1,0,0) = segment 1
    return build_segments({{0, 0, 0}, {1, 0, 0}, {0, 0, 0}, {0, 0, 0}, {1, 0, 0}});
}

}  // namespace

TEST_CASE("build_segments assigns ids by first occurrence and builds the CSR view") {
    auto seg = two_segment_table();
    CHECK(seg.m == 2);
    CHECK(seg.seg_of_point == std::vector<i64>{0, 1, 0, 0, 1});
    CHECK(seg.counts == std::vector<i64>{3, 2});
    CHECK(seg.voxel_coords[0] == VoxelCoord{0, 0, 0});
    CHECK(seg.voxel_coords[1] == VoxelCoord{1, 0, 0});
    CHECK(seg.offsets == std::vector<i64>{0, 3, 5});
    CHECK(seg.order == std::vector<i64>{0, 2, 3, 1, 4});
    CHECK_THROWS_AS(build_segments({}), ShapeError);
}

TEST_CASE("segment reductions match hand-computed values") {
    auto seg = two_segment_table();
    auto x = from_vector<double>({5, 2}, {1, 10, 2, 20, 3, 30, 5, 50, 7, 70});
    auto s = scatter_sum<double>(nullptr, x, seg);
    REQUIRE(s.shape == Shape{2, 2});
    CHECK(s[0] == 9.0);    // 1+3+5
    CHECK(s[1] == 90.0);   // 10+30+50
    CHECK(s[2] == 9.0);    // 2+7
    CHECK(s[3] == 90.0);   // 20+70

    auto mx = scatter_max<double>(nullptr, x, seg);
    CHECK(mx[0] == 5.0);
    CHECK(mx[1] == 50.0);
    CHECK(mx[2] == 7.0);
    CHECK(mx[3] == 70.0);

    auto mean = scatter_mean<double>(nullptr, x, seg);
    CHECK(mean[0] == doctest::Approx(3.0).epsilon(1e-15));
    CHECK(mean[2] == doctest::Approx(4.5).epsilon(1e-15));

    auto h = from_vector<double>({2, 2}, {100, 200, 300, 400});
    auto g = segment_gather<double>(nullptr, h, seg);
    CHECK(g[0] == 100.0);
    CHECK(g[2] == 300.0);
    CHECK(g[4] == 100.0);
    CHECK(g[8] == 300.0);

    auto bad = from_vector<double>({3, 2}, {1, 2, 3, 4, 5, 6});
    CHECK_THROWS_AS(scatter_sum<double>(nullptr, bad, seg), ShapeError);
}

TEST_CASE("scatter_softmax matches the closed form per segment") {
    auto seg = build_segments({{0, 0, 0}, {0, 0, 0}, {1, 1, 0}});
    auto x = from_vector<double>({3, 1}, {0.0, std::log(3.0), 42.0});
    auto y = scatter_softmax<double>(nullptr, x, seg);
    CHECK(y[0] == doctest::Approx(0.25).epsilon(1e-15));
    CHECK(y[1] == doctest::Approx(0.75).epsilon(1e-15));
    CHECK(y[2] == doctest::Approx(1.0).epsilon(1e-15));  // singleton segment
}

TEST_CASE("scatter_max routes the gradient to the first maximal point") {
    auto seg = build_segments({{0, 0, 0}, {0, 0, 0}, {0, 0, 0}});
    auto x = from_vector<double>({3, 1}, {5.0, 5.0, 5.0}, true);
    Tape tape;
    auto y = scatter_max(&tape, x, seg);
    auto loss = sum_all(&tape, y);
    tape.backward(loss);
    CHECK(x.grad_vec()[0] == 1.0);
    CHECK(x.grad_vec()[1] == 0.0);
    CHECK(x.grad_vec()[2] == 0.0);
}

TEST_CASE("scatter_sum backward spreads the segment grad to every member") {
    auto seg = two_segment_table();
    auto x = from_vector<double>({5, 1}, {1, 2, 3, 4, 5}, true);
    Tape tape;
    auto y = scatter_sum(&tape, x, seg);
    auto w = from_vector<double>({2, 1}, {10.0, -3.0});
    auto loss = sum_all(&tape, mul(&tape, y, w));
    tape.backward(loss);
    CHECK(x.grad_vec()[0] == 10.0);
    CHECK(x.grad_vec()[1] == -3.0);
    CHECK(x.grad_vec()[2] == 10.0);
    CHECK(x.grad_vec()[3] == 10.0);
    CHECK(x.grad_vec()[4] == -3.0);
}

TEST_CASE("reductions are invariant to point order") {
    Rng rng(21);
    const i64 n = 60;
    std::vector<VoxelCoord> vox;
    for (i64 i = 0; i < n; ++i) vox.push_back({rng.uniform_int(0, 2), rng.uniform_int(0, 2), 0});
    auto seg = build_segments(vox);
    auto x = uniform_array<double>(rng, {n, 3}, -2, 2);

    std::vector<i64> perm(static_cast<std::size_t>(n));
    for (i64 i = 0; i < n; ++i) perm[static_cast<std::size_t>(i)] = i;
    for (i64 i = n - 1; i > 0; --i) std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(rng.uniform_int(0, i))]);

    std::vector<VoxelCoord> vox2;
    std::vector<double> xv2;
    for (i64 i = 0; i < n; ++i) {
        const i64 src = perm[static_cast<std::size_t>(i)];
        vox2.push_back(vox[static_cast<std::size_t>(src)]);
        for (i64 j = 0; j < 3; ++j) xv2.push_back(x[src * 3 + j]);
    }
    auto seg2 = build_segments(vox2);
    auto x2 = from_vector<double>({n, 3}, std::move(xv2));

    auto y1 = scatter_mean<double>(nullptr, x, seg);
    auto y2 = scatter_mean<double>(nullptr, x2, seg2);
    std::unordered_map<VoxelCoord, i64, VoxelCoordHash> row2;
    for (i64 v = 0; v < seg2.m; ++v) row2[seg2.voxel_coords[static_cast<std::size_t>(v)]] = v;
    REQUIRE(seg.m == seg2.m);
    for (i64 v = 0; v < seg.m; ++v) {
        const i64 w = row2.at(seg.voxel_coords[static_cast<std::size_t>(v)]);
        for (i64 j = 0; j < 3; ++j)
            CHECK(y1[v * 3 + j] == doctest::Approx(y2[w * 3 + j]).epsilon(1e-9));
    }
}

TEST_CASE("scatter suite oracles pass") {
    auto r = check::scatter_suite(9, true);
    INFO(r.first_failure);
    CHECK(r.ok());
}
