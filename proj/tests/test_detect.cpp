#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "voxattn/detect.hpp"
#include "voxattn/rng.hpp"
#include "voxattn/scene.hpp"

using namespace vx;

namespace {

constexpr double kPi = 3.14159265358979323846;

Box3D box(double x, double y, double l, double w, double yaw, double z = 0.0, double h = 2.0) {
    Box3D b;
    b.center[0] = x;
    b.center[1] = y;
    b.center[2] = z;
    b.dims[0] = l;
    b.dims[1] = w;
    b.dims[2] = h;
    b.yaw = yaw;
    return b;
}

double iou_grid_estimate(const Box3D& a, const Box3D& b) {
    double lo[2], hi[2];
    for (int ax = 0; ax < 2; ++ax) {
        const double ra = 0.5 * std::hypot(a.dims[0], a.dims[1]);
        const double rb = 0.5 * std::hypot(b.dims[0], b.dims[1]);
        lo[ax] = std::min(a.center[ax] - ra, b.center[ax] - rb);
        hi[ax] = std::max(a.center[ax] + ra, b.center[ax] + rb);
    }
    const int steps = 700;
    i64 na = 0, nb = 0, nab = 0;
    for (int i = 0; i < steps; ++i)
        for (int j = 0; j < steps; ++j) {
            const double x = lo[0] + (hi[0] - lo[0]) * (i + 0.5) / steps;
            const double y = lo[1] + (hi[1] - lo[1]) * (j + 0.5) / steps;
            const bool ia = point_in_box(x, y, a.center[2], a);
            const bool ib = point_in_box(x, y, b.center[2], b);
            na += ia;
            nb += ib;
            nab += ia && ib;
        }
    const i64 uni = na + nb - nab;
    return uni > 0 ? static_cast<double>(nab) / static_cast<double>(uni) : 0.0;
}

Box3D rand_box(Rng& rng) {
    return box(rng.uniform(0.0, 6.0), rng.uniform(0.0, 6.0), rng.uniform(1.0, 3.0), rng.uniform(1.0, 3.0),
               rng.uniform(-kPi, kPi));
}

std::vector<i64> nms_oracle(const std::vector<Box3D>& boxes, const std::vector<double>& scores, double iou_thr,
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

TEST_CASE("top-down overlap handles the classic configurations") {
    auto a = box(0, 0, 1, 1, 0);
    CHECK(iou_bev(a, a) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(iou_bev(a, box(10, 10, 1, 1, 0)) == 0.0);
    // unit squares offset by half a side: overlap 0.5, union 1.5
    CHECK(iou_bev(a, box(0.5, 0, 1, 1, 0)) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
    // a square against its own 45-degree rotation: octagon overlap, 1/sqrt(2)
    CHECK(iou_bev(a, box(0, 0, 1, 1, kPi / 4)) == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-12));
    // degenerate boxes overlap nothing
    CHECK(iou_bev(box(0, 0, 0, 1, 0), a) == 0.0);

    Rng rng(21);
    for (int t = 0; t < 12; ++t) {
        auto p = rand_box(rng);
        auto q = rand_box(rng);
        const double lib = iou_bev(p, q);
        CHECK(lib == doctest::Approx(iou_bev(q, p)).epsilon(1e-12));
        CHECK(lib == doctest::Approx(iou_grid_estimate(p, q)).epsilon(0.015));
        CHECK(lib >= 0.0);
        CHECK(lib <= 1.0);
    }
}

TEST_CASE("box residual codec inverts exactly") {
    auto anchor = box(1.0, -2.0, 3.9, 1.6, 0.0, -1.0, 1.56);

    auto t0 = encode_box(anchor, anchor);
    for (double v : t0) CHECK(v == 0.0);

    Box3D gt = anchor;
    gt.center[0] += 1.0;
    gt.dims[0] = anchor.dims[0] * 2.0;
    gt.yaw = 0.4;
    auto t = encode_box(gt, anchor);
    CHECK(t[0] == doctest::Approx(1.0 / std::hypot(3.9, 1.6)).epsilon(1e-15));
    CHECK(t[1] == 0.0);
    CHECK(t[3] == doctest::Approx(std::log(2.0)).epsilon(1e-15));
    CHECK(t[6] == doctest::Approx(0.4).epsilon(1e-15));

    Rng rng(22);
    for (int i = 0; i < 20; ++i) {
        auto g = rand_box(rng);
        g.center[2] = rng.uniform(-2.0, 0.0);
        g.dims[2] = rng.uniform(1.0, 2.0);
        auto rt = decode_box(encode_box(g, anchor), anchor);
        for (int a = 0; a < 3; ++a) {
            CHECK(rt.center[a] == doctest::Approx(g.center[a]).epsilon(1e-12));
            CHECK(rt.dims[a] == doctest::Approx(g.dims[a]).epsilon(1e-12));
        }
        CHECK(rt.yaw == doctest::Approx(g.yaw).epsilon(1e-12));
    }

    auto flat = box(0, 0, 0.0, 1, 0);
    CHECK_THROWS_AS(encode_box(flat, anchor), CheckError);
    CHECK_THROWS_AS(decode_box(t0, flat), CheckError);
}

TEST_CASE("anchor lattice covers every pillar twice") {
    const SceneSpec spec;
    DetectConfig cfg;
    const double pillar = 0.36;
    auto anchors = make_anchors(spec.grid, pillar, cfg);
    const i64 bw = 36;
    REQUIRE(static_cast<i64>(anchors.size()) == 36 * 36 * 2);
    for (i64 ix : {i64(0), i64(17), i64(35)})
        for (i64 iy : {i64(3), i64(35)})
            for (int yb = 0; yb < 2; ++yb) {
                const auto& a = anchors[static_cast<std::size_t>((ix * bw + iy) * 2 + yb)];
                CHECK(a.center[0] == doctest::Approx(spec.grid.origin[0] + (ix + 0.5) * pillar).epsilon(1e-12));
                CHECK(a.center[1] == doctest::Approx(spec.grid.origin[1] + (iy + 0.5) * pillar).epsilon(1e-12));
                CHECK(a.center[2] == cfg.anchor_z);
                CHECK(a.dims[0] == cfg.anchor_l);
                CHECK(a.yaw == (yb == 0 ? 0.0 : doctest::Approx(kPi / 2).epsilon(1e-12)));
            }
    CHECK_THROWS_AS(make_anchors(spec.grid, 0.0, cfg), ConfigError);
}

TEST_CASE("anchor assignment agrees with a brute-force rescan") {
    const SceneSpec spec;
    DetectConfig cfg;
    auto anchors = make_anchors(spec.grid, 0.36, cfg);
    std::vector<Box3D> gts = {box(4.0, -2.0, 4.1, 1.7, 0.3, -1.0, 1.5),
                              box(9.0, 3.0, 3.6, 1.6, -1.2, -1.0, 1.5),
                              box(6.0, 5.5, 4.4, 1.8, kPi / 2, -1.0, 1.5)};
    auto m = match_anchors(anchors, gts, cfg);
    REQUIRE(m.label.size() == anchors.size());

    const i64 na = static_cast<i64>(anchors.size()), ng = static_cast<i64>(gts.size());
    std::vector<int> label(static_cast<std::size_t>(na), 0);
    std::vector<i64> gt_of(static_cast<std::size_t>(na), -1);
    std::vector<double> gt_best(static_cast<std::size_t>(ng), 0.0);
    std::vector<i64> gt_arg(static_cast<std::size_t>(ng), -1);
    for (i64 a = 0; a < na; ++a) {
        double best = 0;
        i64 arg = -1;
        for (i64 g = 0; g < ng; ++g) {
            const double iou = iou_bev(anchors[static_cast<std::size_t>(a)], gts[static_cast<std::size_t>(g)]);
            if (iou > best) {
                best = iou;
                arg = g;
            }
            if (iou > gt_best[static_cast<std::size_t>(g)]) {
                gt_best[static_cast<std::size_t>(g)] = iou;
                gt_arg[static_cast<std::size_t>(g)] = a;
            }
        }
        if (best >= cfg.iou_pos) {
            label[static_cast<std::size_t>(a)] = 1;
            gt_of[static_cast<std::size_t>(a)] = arg;
        } else if (best > cfg.iou_neg) {
            label[static_cast<std::size_t>(a)] = -1;
        }
    }
    for (i64 g = 0; g < ng; ++g)
        if (gt_arg[static_cast<std::size_t>(g)] >= 0) {
            label[static_cast<std::size_t>(gt_arg[static_cast<std::size_t>(g)])] = 1;
            gt_of[static_cast<std::size_t>(gt_arg[static_cast<std::size_t>(g)])] = g;
        }
    i64 n_pos = 0;
    for (i64 a = 0; a < na; ++a) {
        CHECK(m.label[static_cast<std::size_t>(a)] == label[static_cast<std::size_t>(a)]);
        CHECK(m.gt_of[static_cast<std::size_t>(a)] == gt_of[static_cast<std::size_t>(a)]);
        n_pos += label[static_cast<std::size_t>(a)] == 1;
    }
    CHECK(m.n_pos == n_pos);
    CHECK(m.n_pos >= ng);  // every box pins at least its best anchor
}

TEST_CASE("point labels follow rotated containment") {
    PointCloud pc;
    // box rotated 90 degrees: local +x of the frame points along world +y
    const auto b = box(0, 0, 4.0, 2.0, kPi / 2, 0.0, 2.0);
    const double probes[4][3] = {{0.0, 1.9, 0.0}, {0.9, 0.0, 0.0}, {1.9, 0.0, 0.0}, {0.0, 0.0, 1.1}};
    for (const auto& p : probes) {
        pc.xyz.insert(pc.xyz.end(), {p[0], p[1], p[2]});
        pc.intensity.push_back(0.0);
    }
    auto lab = point_labels(pc, {b});
    CHECK(lab == std::vector<double>{1.0, 1.0, 0.0, 0.0});
    CHECK(point_labels(pc, {}) == std::vector<double>(4, 0.0));
}

TEST_CASE("loss assembles the weighted pieces over matched anchors") {
    DetectConfig cfg;
    const double ln2 = std::log(2.0);
    auto anchor0 = box(1.0, 1.0, 3.9, 1.6, 0.0, -1.0, 1.56);
    std::vector<Box3D> anchors = {anchor0, box(5, 5, 3.9, 1.6, 0, -1, 1.56), box(9, 9, 3.9, 1.6, 0, -1, 1.56)};
    Box3D gt = anchor0;
    gt.yaw = 0.2;  // positive: direction target 1
    std::vector<Box3D> gts = {gt};

    MatchResult m;
    m.label = {1, 0, -1};
    m.gt_of = {0, -1, -1};
    m.n_pos = 1;

    const double beta = cfg.smooth_l1_beta;
    auto enc = encode_box(gt, anchor0);
    std::vector<double> reg(3 * 7, 0.0);
    for (int j = 0; j < 7; ++j) reg[static_cast<std::size_t>(j)] = enc[static_cast<std::size_t>(j)] + beta / 2.0;

    Tape tape;
    auto cls_logits = zeros<double>({3, 1}, true);
    auto reg_preds = from_vector<double>({3, 7}, std::move(reg), true);
    auto dir_logits = zeros<double>({3, 1}, true);
    auto seg_logits = zeros<double>({2, 1}, true);
    auto lb = total_loss(&tape, cls_logits, reg_preds, dir_logits, seg_logits, m, anchors, gts, {1.0, 0.0}, cfg);

    // zero logits: focal terms are alpha_t * 0.25 * ln2 per element
    const double seg_expect = (0.25 * (0.25 * ln2) + 0.75 * (0.25 * ln2)) / 2.0;  // fg + bg point, meaned
    CHECK(lb.seg == doctest::Approx(seg_expect).epsilon(1e-12));
    const double cls_expect = 0.25 * 0.25 * ln2 + 0.75 * 0.25 * ln2;  // pos + neg, ignored dropped
    CHECK(lb.cls == doctest::Approx(cls_expect).epsilon(1e-12));
    // every residual off by beta/2 (inside the quadratic zone): 7 * beta/8
    CHECK(lb.reg == doctest::Approx(7.0 * beta / 8.0).epsilon(1e-12));
    CHECK(lb.dir == doctest::Approx(ln2).epsilon(1e-12));
    CHECK(lb.n_pos == 1);
    const double total_expect = cfg.w_seg * lb.seg + cfg.w_cls * lb.cls + cfg.w_reg * lb.reg + cfg.w_dir * lb.dir;
    CHECK(lb.total[0] == doctest::Approx(total_expect).epsilon(1e-12));

    // the assembled scalar is differentiable end to end
    tape.backward(lb.total);
    CHECK(cls_logits.has_grad());
    CHECK(reg_preds.has_grad());

    MatchResult none;
    none.label = {0, 0, 0};
    none.gt_of = {-1, -1, -1};
    none.n_pos = 0;
    auto lb0 = total_loss(nullptr, cls_logits, reg_preds, dir_logits, seg_logits, none, anchors, gts, {1.0, 0.0}, cfg);
    CHECK(lb0.reg == 0.0);
    CHECK(lb0.dir == 0.0);
    CHECK(lb0.total[0] == doctest::Approx(cfg.w_seg * lb0.seg + cfg.w_cls * lb0.cls).epsilon(1e-12));

    auto bad = zeros<double>({3, 6});
    CHECK_THROWS_AS(total_loss(nullptr, cls_logits, bad, dir_logits, seg_logits, m, anchors, gts, {1.0, 0.0}, cfg),
                    ShapeError);
}

TEST_CASE("suppression keeps exactly what the quadratic rescan keeps") {
    Rng rng(23);
    for (int t = 0; t < 8; ++t) {
        std::vector<Box3D> boxes;
        std::vector<double> scores;
        const int n = 30 + t * 5;
        for (int i = 0; i < n; ++i) {
            boxes.push_back(rand_box(rng));
            scores.push_back(rng.uniform(0.0, 1.0));
        }
        auto kept = nms(boxes, scores, 0.1, 0.3);
        auto want = nms_oracle(boxes, scores, 0.1, 0.3);
        CHECK(kept == want);
    }

    // pairwise-disjoint boxes: everything above the score bar survives,
    // ordered by score
    std::vector<Box3D> far = {box(0, 0, 1, 1, 0), box(10, 0, 1, 1, 0), box(20, 0, 1, 1, 0)};
    CHECK(nms(far, {0.5, 0.9, 0.2}, 0.1, 0.3) == std::vector<i64>{1, 0});
    // exact score ties break toward the lower index
    CHECK(nms(far, {0.7, 0.7, 0.7}, 0.1, 0.3) == std::vector<i64>{0, 1, 2});
    // identical boxes: only the best survives
    std::vector<Box3D> same = {box(0, 0, 2, 1, 0.3), box(0, 0, 2, 1, 0.3)};
    CHECK(nms(same, {0.4, 0.8}, 0.1, 0.3) == std::vector<i64>{1});
    CHECK_THROWS_AS(nms(same, {0.4}, 0.1, 0.3), ShapeError);
}

TEST_CASE("evaluation scores pooled detections") {
    auto g0 = box(0, 0, 4, 2, 0.2, -1, 1.5);
    auto g1 = box(8, 3, 4, 2, -0.5, -1, 1.5);

    // perfect predictions
    auto perfect = evaluate_detections({{g0, g1}}, {{0.9, 0.8}}, {{g0, g1}}, 0.5);
    CHECK(perfect.recall == 1.0);
    CHECK(perfect.ap == 1.0);
    CHECK(perfect.n_gt == 2);
    CHECK(perfect.n_pred == 2);

    // nothing predicted
    auto none = evaluate_detections({{}}, {{}}, {{g0, g1}}, 0.5);
    CHECK(none.recall == 0.0);
    CHECK(none.ap == 0.0);

    // hit, miss, hit: precision steps 1, 1/2, 2/3 at recall 1/2, 1/2, 1
    auto miss = box(20, 20, 4, 2, 0, -1, 1.5);
    auto mixed = evaluate_detections({{g0, miss, g1}}, {{0.9, 0.8, 0.7}}, {{g0, g1}}, 0.5);
    CHECK(mixed.recall == 1.0);
    CHECK(mixed.ap == doctest::Approx((6.0 * 1.0 + 5.0 * 2.0 / 3.0) / 11.0).epsilon(1e-12));

    // a second detection on an already-claimed box is a false positive
    auto dup = evaluate_detections({{g0, g0}}, {{0.9, 0.8}}, {{g0}}, 0.5);
    CHECK(dup.recall == 1.0);
    CHECK(dup.ap == 1.0);  // recall hits 1.0 on the first, duplicate only lowers later precision

    CHECK_THROWS_AS(evaluate_detections({{g0}}, {{0.9}}, {{}}, 0.5), CheckError);
    CHECK_THROWS_AS(evaluate_detections({{g0}}, {{0.9, 0.1}}, {{g0}}, 0.5), ShapeError);
    CHECK_THROWS_AS(evaluate_detections({{g0}}, {{0.9}}, {{g0}, {g1}}, 0.5), ShapeError);
}

TEST_CASE("detector config rejects inconsistent settings") {
    DetectConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    auto bad = cfg;
    bad.iou_neg = 0.7;  // above iou_pos
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = cfg;
    bad.anchor_l = 0.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = cfg;
    bad.smooth_l1_beta = 0.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = cfg;
    bad.nms_iou = 1.5;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}
