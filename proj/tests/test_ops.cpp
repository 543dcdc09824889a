#include <cmath>

#include "doctest.h"
#include "voxattn/gradcheck.hpp"
#include "voxattn/ops.hpp"
#include "voxattn/selfcheck.hpp"

using namespace vx;

TEST_CASE("matmul matches a triple loop") {
    Rng rng(11);
    const i64 m = 7, k = 5, n = 4;
    auto a = uniform_array<double>(rng, {m, k}, -2, 2);
    auto b = uniform_array<double>(rng, {k, n}, -2, 2);
    auto c = matmul<double>(nullptr, a, b);
    REQUIRE(c.shape == Shape{m, n});
    for (i64 i = 0; i < m; ++i)
        for (i64 j = 0; j < n; ++j) {
            double s = 0;
            for (i64 q = 0; q < k; ++q) s += a[i * k + q] * b[q * n + j];
            CHECK(c[i * n + j] == doctest::Approx(s).epsilon(1e-14));
        }
    CHECK_THROWS_AS(matmul<double>(nullptr, a, a), ShapeError);
}

TEST_CASE("matmul_nt equals matmul against the transpose") {
    Rng rng(12);
    auto a = uniform_array<double>(rng, {3, 5}, -1, 1);
    auto b = uniform_array<double>(rng, {4, 5}, -1, 1);
    auto left = matmul_nt<double>(nullptr, a, b);
    auto right = matmul<double>(nullptr, a, transpose2d<double>(nullptr, b));
    REQUIRE(left.shape == Shape{3, 4});
    for (i64 i = 0; i < 12; ++i) CHECK(left[i] == right[i]);
}

TEST_CASE("elementwise ops and bias broadcast") {
    auto a = from_vector<double>({2, 2}, {1, -2, 3, 0.5});
    auto b = from_vector<double>({2, 2}, {2, 3, -1, 4});
    auto sum = add<double>(nullptr, a, b);
    auto prod = mul<double>(nullptr, a, b);
    auto sc = scale<double>(nullptr, a, -2.0);
    CHECK(sum[1] == 1.0);
    CHECK(prod[2] == -3.0);
    CHECK(sc[3] == -1.0);
    auto bias = from_vector<double>({2}, {10, 20});
    auto ab = add_bias<double>(nullptr, a, bias);
    CHECK(ab[0] == 11.0);
    CHECK(ab[3] == 20.5);
    auto r = relu<double>(nullptr, a);
    CHECK(r[1] == 0.0);
    CHECK(r[2] == 3.0);
    auto wrong = from_vector<double>({3}, {1, 2, 3});
    CHECK_THROWS_AS(add<double>(nullptr, a, wrong), ShapeError);
    CHECK_THROWS_AS(add_bias<double>(nullptr, a, wrong), ShapeError);
}

TEST_CASE("reshape shares the data buffer and checks element count") {
    auto a = from_vector<double>({2, 3}, {1, 2, 3, 4, 5, 6});
    auto b = reshape<double>(nullptr, a, {3, 2});
    CHECK(b.shape == Shape{3, 2});
    CHECK(b.data == a.data);
    CHECK_THROWS_AS(reshape<double>(nullptr, a, {4, 2}), ShapeError);
}

TEST_CASE("softmax_lastdim rows sum to one and match the closed form") {
    auto x = from_vector<double>({1, 2}, {0.0, std::log(3.0)});
    auto y = softmax_lastdim<double>(nullptr, x);
    CHECK(y[0] == doctest::Approx(0.25).epsilon(1e-15));
    CHECK(y[1] == doctest::Approx(0.75).epsilon(1e-15));

    auto big = from_vector<double>({1, 3}, {1000.0, 999.0, -1000.0});
    auto yb = softmax_lastdim<double>(nullptr, big);
    double s = 0;
    for (i64 i = 0; i < 3; ++i) {
        CHECK(std::isfinite(yb[i]));
        s += yb[i];
    }
    CHECK(s == doctest::Approx(1.0).epsilon(1e-14));
}

TEST_CASE("batchnorm1d normalizes with biased batch stats and tracks running stats") {
    auto x = from_vector<double>({4, 1}, {1, 2, 3, 6});
    auto gamma = from_vector<double>({1}, {2.0});
    auto beta = from_vector<double>({1}, {0.5});
    auto rm = zeros<double>({1});
    auto rv = full<double>({1}, 1.0);
    auto y = batchnorm1d<double>(nullptr, x, gamma, beta, rm, rv, true);
    const double mean = 3.0, var = (4 + 1 + 0 + 9) / 4.0;
    for (i64 i = 0; i < 4; ++i)
        CHECK(y[i] == doctest::Approx(2.0 * (x[i] - mean) / std::sqrt(var + 1e-5) + 0.5).epsilon(1e-12));
    CHECK(rm[0] == doctest::Approx(0.9 * 0.0 + 0.1 * mean).epsilon(1e-12));
    CHECK(rv[0] == doctest::Approx(0.9 * 1.0 + 0.1 * var).epsilon(1e-12));

    // Eval mode reads the running stats instead of batch stats.
    auto ye = batchnorm1d<double>(nullptr, x, gamma, beta, rm, rv, false);
    for (i64 i = 0; i < 4; ++i)
        CHECK(ye[i] == doctest::Approx(2.0 * (x[i] - rm[0]) / std::sqrt(rv[0] + 1e-5) + 0.5).epsilon(1e-12));

    auto one = from_vector<double>({1, 1}, {1.0});
    CHECK_THROWS_AS(batchnorm1d<double>(nullptr, one, gamma, beta, rm, rv, true), CheckError);
    CHECK_NOTHROW(batchnorm1d<double>(nullptr, one, gamma, beta, rm, rv, false));
}

TEST_CASE("reductions and weighted_sum") {
    auto a = from_vector<double>({2, 2}, {1, 2, 3, 4});
    CHECK(sum_all<double>(nullptr, a)[0] == 10.0);
    CHECK(mean_all<double>(nullptr, a)[0] == 2.5);
    auto b = from_vector<double>({2, 2}, {4, 3, 2, 1});
    auto w = weighted_sum<double>(nullptr, {a, b}, {2.0, -1.0});
    REQUIRE(w.shape == a.shape);
    for (i64 i = 0; i < 4; ++i) CHECK(w[i] == doctest::Approx(2.0 * a[i] - b[i]).epsilon(1e-14));
    CHECK_THROWS_AS(weighted_sum<double>(nullptr, {}, {}), ShapeError);
}

TEST_CASE("rowwise attention kernels match loops") {
    Rng rng(13);
    const i64 n = 5, k = 3, d = 4;
    auto a = uniform_array<double>(rng, {n, k}, -1, 1);
    auto v = uniform_array<double>(rng, {n, d}, -1, 1);
    auto outer = rowwise_outer<double>(nullptr, a, v);
    REQUIRE(outer.shape == Shape{n, k * d});
    for (i64 i = 0; i < n; ++i)
        for (i64 c = 0; c < k; ++c)
            for (i64 j = 0; j < d; ++j)
                CHECK(outer[i * k * d + c * d + j] == doctest::Approx(a[i * k + c] * v[i * d + j]).epsilon(1e-14));

    auto q = uniform_array<double>(rng, {n, d}, -1, 1);
    auto kk = uniform_array<double>(rng, {n, k * d}, -1, 1);
    auto logits = rowwise_kq<double>(nullptr, q, kk);
    REQUIRE(logits.shape == Shape{n, k});
    for (i64 i = 0; i < n; ++i)
        for (i64 c = 0; c < k; ++c) {
            double s = 0;
            for (i64 j = 0; j < d; ++j) s += kk[i * k * d + c * d + j] * q[i * d + j];
            CHECK(logits[i * k + c] == doctest::Approx(s).epsilon(1e-13));
        }

    auto mix = rowwise_mix<double>(nullptr, a, kk);
    REQUIRE(mix.shape == Shape{n, d});
    for (i64 i = 0; i < n; ++i)
        for (i64 j = 0; j < d; ++j) {
            double s = 0;
            for (i64 c = 0; c < k; ++c) s += a[i * k + c] * kk[i * k * d + c * d + j];
            CHECK(mix[i * d + j] == doctest::Approx(s).epsilon(1e-13));
        }
}

TEST_CASE("slice_cols copies the requested band") {
    auto a = from_vector<double>({2, 4}, {0, 1, 2, 3, 10, 11, 12, 13});
    auto s = slice_cols<double>(nullptr, a, 1, 3);
    REQUIRE(s.shape == Shape{2, 2});
    CHECK(s[0] == 1.0);
    CHECK(s[3] == 12.0);
    CHECK_THROWS_AS(slice_cols<double>(nullptr, a, 3, 3), ShapeError);
    CHECK_THROWS_AS(slice_cols<double>(nullptr, a, 2, 5), ShapeError);
}

TEST_CASE("finite differences validate every op's backward rule") {
    auto r = check::gradcheck_suite(5, false, true);
    INFO(r.first_failure);
    CHECK(r.ok());
    CHECK(r.worst < 1e-5);
    CHECK(r.worst_composed < 1e-4);
}

TEST_CASE("gradcheck flags a wrong backward rule") {
    auto r = check::gradcheck_suite(5, true, true);
    CHECK(r.failed == 1);
    CHECK(r.first_failure.find("sabotage") != std::string::npos);
}
