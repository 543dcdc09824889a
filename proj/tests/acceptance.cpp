// Release gate for the library: ten checks covering numerical equivalence,
// gradient correctness, scaling, the feature-extraction contract, and the
// end-to-end toy detector. Each check prints one PASS/FAIL line; the binary
// exits nonzero if any fail.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "voxattn/backbone.hpp"
#include "voxattn/detect.hpp"
#include "voxattn/scene.hpp"
#include "voxattn/selfcheck.hpp"
#include "voxattn/train.hpp"
#include "voxattn/vsa.hpp"

using namespace vx;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Gate {
    int failures = 0;

    void report(int id, bool pass, const std::string& detail) {
        std::printf("[%2d] %s %s\n", id, pass ? "PASS" : "FAIL", detail.c_str());
        std::fflush(stdout);
        if (!pass) failures++;
    }

    template <class Fn>
    void run(int id, Fn&& fn) {
        try {
            fn();
        } catch (const std::exception& e) {
            report(id, false, std::string("unexpected error: ") + e.what());
        }
    }
};

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3g", v);
    return buf;
}

SegmentTable bench_segments(Rng& rng, i64 n) {
    const auto side = static_cast<i64>(std::sqrt(static_cast<double>(n) / 6.0)) + 1;
    std::vector<VoxelCoord> vox;
    vox.reserve(static_cast<std::size_t>(n));
    for (i64 i = 0; i < n; ++i)
        vox.push_back({rng.uniform_int(0, side - 1), rng.uniform_int(0, side - 1), rng.uniform_int(0, 1)});
    return build_segments(vox);
}

double median_forward_ms(i64 n, int repeats, std::uint64_t seed) {
    Rng rng(seed);
    auto seg = bench_segments(rng, n);
    const i64 d = 16, k = 8;
    auto p = make_vsa_params<double>(rng, d, k, d, d, 8);
    auto x = uniform_array<double>(rng, {n, d}, -1, 1);
    std::vector<double> times;
    for (int r = 0; r < repeats + 1; ++r) {
        const auto t0 = Clock::now();
        auto h = vsa_encode<double>(nullptr, x, p, seg);
        auto hh = conv_ffn<double>(nullptr, h, p);
        auto y = vsa_decode<double>(nullptr, x, hh, p, seg);
        const double ms = seconds_since(t0) * 1e3 + (y[0] == 12345.0 ? 1e-9 : 0.0);
        if (r > 0) times.push_back(ms);  // first run warms caches
    }
    std::sort(times.begin(), times.end());
    const std::size_t m = times.size();
    return m % 2 == 1 ? times[m / 2] : 0.5 * (times[m / 2 - 1] + times[m / 2]);
}

std::vector<i64> nms_reference(const std::vector<Box3D>& boxes, const std::vector<double>& scores, double iou_thr,
                               double score_thr) {
    std::vector<i64> cand;
    for (i64 i = 0; i < static_cast<i64>(boxes.size()); ++i)
        if (scores[static_cast<std::size_t>(i)] > score_thr) cand.push_back(i);
    std::sort(cand.begin(), cand.end(), [&](i64 a, i64 b) {
        const double sa = scores[static_cast<std::size_t>(a)], sb = scores[static_cast<std::size_t>(b)];
        return sa != sb ? sa > sb : a < b;
    });
    std::vector<i64> kept;
    for (i64 c : cand) {
        bool ok = true;
        for (i64 k : kept)
            if (iou_bev(boxes[static_cast<std::size_t>(k)], boxes[static_cast<std::size_t>(c)]) > iou_thr) {
                ok = false;
                break;
            }
        if (ok) kept.push_back(c);
    }
    return kept;
}

}  // namespace

int main() {
    Gate gate;
    set_num_threads(1);

    // 1. Vectorized set attention (encode -> sparse FFN -> decode) against the
    //    per-voxel loop reference: 50 randomized instances, f64, < 1e-12.
    gate.run(1, [&] {
        const auto t0 = Clock::now();
        auto r = check::vsa_suite(41, 50);
        const double secs = seconds_since(t0);
        const bool pass = r.ok() && r.worst < 1e-12 && secs < 120.0;
        gate.report(1, pass,
                    "attention pipeline equals per-voxel reference: " + std::to_string(r.passed) +
                        " instances, worst " + fmt(r.worst) + " (tol 1e-12, " + fmt(secs) + "s, limit 120s)" +
                        (r.failed ? " first failure: " + r.first_failure : ""));
    });

    // 2. Central-difference gradient checks: every differentiable primitive
    //    (< 1e-5) plus the composed attention block on a 30-point scene (< 1e-4).
    gate.run(2, [&] {
        const auto t0 = Clock::now();
        auto r = check::gradcheck_suite(42, false, false);
        const double secs = seconds_since(t0);
        const bool pass = r.ok() && r.worst < 1e-5 && r.worst_composed < 1e-4 && secs < 300.0;
        gate.report(2, pass,
                    "gradients match finite differences: " + std::to_string(r.passed) + " cases, primitives worst " +
                        fmt(r.worst) + " (tol 1e-5), composed block worst " + fmt(r.worst_composed) +
                        " (tol 1e-4, " + fmt(secs) + "s, limit 300s)" +
                        (r.failed ? " first failure: " + r.first_failure : ""));
    });

    // 3. Segment softmax normalization over 10^4 randomized layouts.
    gate.run(3, [&] {
        auto r = check::softmax_suite(43, 10000);
        gate.report(3, r.ok() && r.worst < 1e-12,
                    "segment softmax columns sum to one: " + std::to_string(r.passed) + " layouts, worst deviation " +
                        fmt(r.worst) + " (tol 1e-12)" + (r.failed ? " first failure: " + r.first_failure : ""));
    });

    // 4. Near-linear scaling of the forward pass at k=8, d=16: doubling the
    //    point count must scale the median time by a factor in [1.6, 2.5].
    gate.run(4, [&] {
        const auto t0 = Clock::now();
        const double m50 = median_forward_ms(50000, 5, 1001);
        const double m100 = median_forward_ms(100000, 5, 1002);
        const double m200 = median_forward_ms(200000, 5, 1003);
        const double secs = seconds_since(t0);
        const double r1 = m100 / m50, r2 = m200 / m100;
        const bool pass = r1 >= 1.6 && r1 <= 2.5 && r2 >= 1.6 && r2 <= 2.5 && secs < 180.0;
        char buf[256];
        std::snprintf(buf, sizeof buf,
                      "forward time scales linearly: 50k %.0fms, 100k %.0fms, 200k %.0fms, ratios %.2f and %.2f "
                      "(window [1.6, 2.5], %.1fs, limit 180s)",
                      m50, m100, m200, r1, r2, secs);
        gate.report(4, pass, buf);
    });

    // 5. Set-to-set contract: the feature extractor emits exactly one row per
    //    input point on 100 random scenes.
    gate.run(5, [&] {
        SceneSpec spec;
        auto cfg = BackboneConfig::toy(spec.grid);
        Rng rng(44);
        auto params = make_backbone_params(rng, cfg);
        int ok = 0;
        i64 checked = 0;
        for (int s = 0; s < 100; ++s) {
            auto scene = gen_scene_robust(derive_seed(45, static_cast<std::uint64_t>(s)), spec);
            auto y = backbone_forward(nullptr, scene.pc, cfg, params, false);
            checked += scene.pc.n();
            ok += (y.dim(0) == scene.pc.n() && y.dim(1) == cfg.block_dims[3]) ? 1 : 0;
        }
        gate.report(5, ok == 100,
                    "one output row per input point: " + std::to_string(ok) + "/100 scenes (" +
                        std::to_string(checked) + " points total, no drops, no padding)");
    });

    // 6. Permutation equivariance of the full feature extractor: shuffling the
    //    input rows permutes the output rows, within 1e-8 (f64), 20 trials.
    gate.run(6, [&] {
        SceneSpec spec;
        spec.points_per_box_min = 60;
        spec.points_per_box_max = 120;
        spec.clutter_points = 150;
        auto cfg = BackboneConfig::toy(spec.grid);
        Rng rng(46);
        auto params = make_backbone_params(rng, cfg);
        double worst = 0;
        for (int t = 0; t < 20; ++t) {
            auto scene = gen_scene_robust(derive_seed(47, static_cast<std::uint64_t>(t)), spec);
            const i64 n = scene.pc.n();
            auto base = backbone_forward(nullptr, scene.pc, cfg, params, false);
            std::vector<i64> perm(static_cast<std::size_t>(n));
            for (i64 i = 0; i < n; ++i) perm[static_cast<std::size_t>(i)] = i;
            for (i64 i = n - 1; i > 0; --i)
                std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(rng.uniform_int(0, i))]);
            PointCloud shuffled;
            for (i64 i = 0; i < n; ++i) {
                const auto src = static_cast<std::size_t>(perm[static_cast<std::size_t>(i)]);
                shuffled.xyz.insert(shuffled.xyz.end(), {scene.pc.xyz[src * 3], scene.pc.xyz[src * 3 + 1],
                                                         scene.pc.xyz[src * 3 + 2]});
                shuffled.intensity.push_back(scene.pc.intensity[src]);
            }
            auto out = backbone_forward(nullptr, shuffled, cfg, params, false);
            const i64 d = base.dim(1);
            for (i64 i = 0; i < n; ++i)
                for (i64 j = 0; j < d; ++j)
                    worst = std::max(worst, std::abs(out[i * d + j] -
                                                     base[perm[static_cast<std::size_t>(i)] * d + j]));
        }
        gate.report(6, worst < 1e-8,
                    "feature extraction commutes with input permutation: 20 trials, worst deviation " + fmt(worst) +
                        " (tol 1e-8)");
    });

    // 7. Pillar soft-pooling hand values: features {0, ln 3} pool to 0.75*ln 3;
    //    a constant pillar pools to the constant (the mean), both within 1e-12.
    gate.run(7, [&] {
        SceneSpec spec;
        auto cfg = BackboneConfig::toy(spec.grid);
        PointCloud pc;
        for (double x : {0.10, 0.20}) {
            pc.xyz.insert(pc.xyz.end(), {x, -6.3, -1.0});
            pc.intensity.push_back(0.0);
        }
        const double ln3 = std::log(3.0);
        auto feats = from_vector<double>({2, 2}, {0.0, 1.25, ln3, 1.25});
        auto grid = bev_softpool(nullptr, feats, pc, cfg);
        const i64 hw = cfg.bev_h() * cfg.bev_w();
        const double got = grid[0];
        const double want = 0.75 * ln3;
        const double got_const = grid[hw];
        const bool pass = std::abs(got - want) < 1e-12 && std::abs(got_const - 1.25) < 1e-12;
        gate.report(7, pass,
                    "pillar soft-pooling: softmax(0, ln3)-weighted sum gives " + fmt(got) + " (want 0.75*ln3 = " +
                        fmt(want) + "), constant pillar gives " + fmt(got_const) + " (want 1.25), tol 1e-12");
    });

    // 8. End-to-end toy detection with default settings: <= 2000 optimizer
    //    steps, recall >= 0.9 and AP >= 0.8 at BEV IoU 0.5 on 50 held-out
    //    scenes, wall time < 10 minutes, final-step loss < 25% of step 0.
    gate.run(8, [&] {
        TrainToyConfig cfg;
        const auto t0 = Clock::now();
        auto model = make_toy_model(1, cfg.scene);
        auto result = train_toy(model, cfg, 1, "");
        const double secs = seconds_since(t0);
        const auto& ev = result.final_eval;
        const double ratio = result.final_loss / result.step0_loss;
        const bool pass = cfg.steps <= 2000 && ev.recall >= 0.9 && ev.ap >= 0.8 && secs < 600.0 && ratio < 0.25;
        char buf[320];
        std::snprintf(buf, sizeof buf,
                      "toy detector: %lld steps, recall %.3f (need >= 0.9), AP %.3f (need >= 0.8) on %lld boxes / "
                      "50 scenes, loss %.2f -> %.2f (ratio %.3f, need < 0.25), %.0fs (limit 600s)",
                      static_cast<long long>(cfg.steps), ev.recall, ev.ap, static_cast<long long>(ev.n_gt),
                      result.step0_loss, result.final_loss, ratio, secs);
        gate.report(8, pass, buf);
    });

    // 9. Default configuration snapshot: the standard preset must carry the
    //    published constants exactly.
    gate.run(9, [&] {
        BackboneConfig cfg;
        DetectConfig det;
        bool ok = cfg.grid.voxel_size[0] == 0.32 && cfg.grid.voxel_size[1] == 0.32 && cfg.grid.voxel_size[2] == 4.0;
        ok = ok && cfg.block_dims == std::array<i64, 4>{16, 32, 64, 128};
        ok = ok && cfg.latent_k == 8 && cfg.pe_bandwidth == 64 && cfg.pillar_size == 0.36;
        for (int s = 0; s < 4; ++s) {
            const auto g = cfg.stage_grid(s);
            const double f = static_cast<double>(1 << s);
            ok = ok && g.voxel_size[0] == 0.32 * f && g.voxel_size[1] == 0.32 * f &&
                 g.voxel_size[2] == cfg.grid.voxel_size[2];
        }
        ok = ok && det.nms_iou == 0.1 && det.nms_score == 0.3;
        gate.report(9, ok,
                    "default config snapshot: voxel (0.32, 0.32, 4), four stages with x/y doubling, dims "
                    "(16, 32, 64, 128), k=8, positional bandwidth 64, pillar 0.36, nms iou 0.1 / score 0.3");
    });

    // 10. Box residual codec inverts over 10^4 random boxes (< 1e-12), and
    //     greedy suppression equals a quadratic reference on 10^3 random sets.
    gate.run(10, [&] {
        Rng rng(48);
        double worst = 0;
        for (int i = 0; i < 10000; ++i) {
            Box3D anchor;
            anchor.center[0] = rng.uniform(-10, 10);
            anchor.center[1] = rng.uniform(-10, 10);
            anchor.center[2] = rng.uniform(-3, 1);
            anchor.dims[0] = rng.uniform(0.5, 5.0);
            anchor.dims[1] = rng.uniform(0.5, 5.0);
            anchor.dims[2] = rng.uniform(0.5, 3.0);
            anchor.yaw = rng.uniform(-3.14159, 3.14159);
            Box3D gt = anchor;
            gt.center[0] += rng.uniform(-2, 2);
            gt.center[1] += rng.uniform(-2, 2);
            gt.center[2] += rng.uniform(-1, 1);
            for (int a = 0; a < 3; ++a) gt.dims[a] *= std::exp(rng.uniform(-0.5, 0.5));
            gt.yaw = rng.uniform(-3.14159, 3.14159);
            auto rt = decode_box(encode_box(gt, anchor), anchor);
            for (int a = 0; a < 3; ++a) {
                worst = std::max(worst, std::abs(rt.center[a] - gt.center[a]));
                worst = std::max(worst, std::abs(rt.dims[a] - gt.dims[a]));
            }
            worst = std::max(worst, std::abs(rt.yaw - gt.yaw));
        }

        int agree = 0;
        const int sets = 1000;
        for (int s = 0; s < sets; ++s) {
            const int n = 8 + static_cast<int>(rng.uniform_int(0, 24));
            std::vector<Box3D> boxes;
            std::vector<double> scores;
            for (int i = 0; i < n; ++i) {
                Box3D b;
                b.center[0] = rng.uniform(0, 8);
                b.center[1] = rng.uniform(0, 8);
                b.center[2] = 0;
                b.dims[0] = rng.uniform(1, 3);
                b.dims[1] = rng.uniform(1, 3);
                b.dims[2] = 2;
                b.yaw = rng.uniform(-3.14159, 3.14159);
                boxes.push_back(b);
                scores.push_back(rng.uniform(0.0, 1.0));
            }
            const double iou_thr = rng.uniform(0.05, 0.6);
            const double score_thr = rng.uniform(0.0, 0.5);
            agree += nms(boxes, scores, iou_thr, score_thr) ==
                             nms_reference(boxes, scores, iou_thr, score_thr)
                         ? 1
                         : 0;
        }
        const bool pass = worst < 1e-12 && agree == sets;
        gate.report(10, pass,
                    "box codec inverts (10000 boxes, worst " + fmt(worst) + ", tol 1e-12); suppression matches the "
                        "quadratic reference on " + std::to_string(agree) + "/1000 sets");
    });

    if (gate.failures == 0) {
        std::printf("acceptance: all 10 checks passed\n");
        return 0;
    }
    std::printf("acceptance: %d of 10 checks FAILED\n", gate.failures);
    return 1;
}
