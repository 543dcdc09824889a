#include "voxattn/detect.hpp"

#include <algorithm>
#include <cmath>

namespace vx {

void DetectConfig::validate() const {
    if (!(anchor_l > 0) || !(anchor_w > 0) || !(anchor_h > 0))
        throw ConfigError("detect: anchor dims must be positive");
    if (!(iou_neg >= 0) || !(iou_neg < iou_pos) || !(iou_pos <= 1))
        throw ConfigError("detect: need 0 <= iou_neg < iou_pos <= 1");
    if (!(focal_gamma >= 0) || !(focal_alpha > 0) || !(focal_alpha < 1))
        throw ConfigError("detect: bad focal parameters");
    if (!(smooth_l1_beta > 0)) throw ConfigError("detect: smooth_l1_beta must be positive");
    if (w_cls < 0 || w_reg < 0 || w_dir < 0 || w_seg < 0) throw ConfigError("detect: loss weights must be >= 0");
    if (!(nms_iou >= 0) || !(nms_iou <= 1) || !(nms_score >= 0) || !(nms_score <= 1))
        throw ConfigError("detect: nms thresholds must lie in [0,1]");
}

namespace {

struct P2 {
    double x, y;
};

std::array<P2, 4> box_corners(const Box3D& b) {
    const double c = std::cos(b.yaw), s = std::sin(b.yaw);
    const double hl = 0.5 * b.dims[0], hw = 0.5 * b.dims[1];
    const double lx[4] = {hl, -hl, -hl, hl};
    const double ly[4] = {hw, hw, -hw, -hw};  // counterclockwise
    std::array<P2, 4> out;
    for (int i = 0; i < 4; ++i)
        out[static_cast<std::size_t>(i)] = {b.center[0] + c * lx[i] - s * ly[i],
                                            b.center[1] + s * lx[i] + c * ly[i]};
    return out;
}

double edge_side(const P2& a, const P2& b, const P2& p) {
    return (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x);
}

std::vector<P2> clip_edge(const std::vector<P2>& poly, const P2& a, const P2& b) {
    std::vector<P2> out;
    out.reserve(poly.size() + 1);
    const std::size_t n = poly.size();
    for (std::size_t i = 0; i < n; ++i) {
        const P2& p = poly[i];
        const P2& q = poly[(i + 1) % n];
        const double dp = edge_side(a, b, p), dq = edge_side(a, b, q);
        if (dp >= 0) out.push_back(p);
        if ((dp > 0 && dq < 0) || (dp < 0 && dq > 0)) {
            const double t = dp / (dp - dq);
            out.push_back({p.x + t * (q.x - p.x), p.y + t * (q.y - p.y)});
        }
    }
    return out;
}

double poly_area(const std::vector<P2>& p) {
    double s = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const std::size_t j = (i + 1) % p.size();
        s += p[i].x * p[j].y - p[j].x * p[i].y;
    }
    return 0.5 * s;
}

double circumradius(const Box3D& b) { return 0.5 * std::hypot(b.dims[0], b.dims[1]); }

bool bev_disjoint(const Box3D& a, const Box3D& b) {
    const double dx = a.center[0] - b.center[0], dy = a.center[1] - b.center[1];
    const double r = circumradius(a) + circumradius(b);
    return dx * dx + dy * dy > r * r;
}

}  // namespace

double iou_bev(const Box3D& a, const Box3D& b) {
    const double area_a = a.dims[0] * a.dims[1], area_b = b.dims[0] * b.dims[1];
    if (!(area_a > 0) || !(area_b > 0)) return 0;
    const auto ca = box_corners(a);
    const auto cb = box_corners(b);
    std::vector<P2> poly(ca.begin(), ca.end());
    for (int e = 0; e < 4 && !poly.empty(); ++e)
        poly = clip_edge(poly, cb[static_cast<std::size_t>(e)], cb[static_cast<std::size_t>((e + 1) % 4)]);
    if (poly.size() < 3) return 0;
    const double inter = poly_area(poly);
    if (!(inter > 0)) return 0;
    return std::clamp(inter / (area_a + area_b - inter), 0.0, 1.0);
}

std::array<double, 7> encode_box(const Box3D& gt, const Box3D& anchor) {
    for (int a = 0; a < 3; ++a)
        if (!(gt.dims[a] > 0) || !(anchor.dims[a] > 0)) throw CheckError("box codec: non-positive dims");
    const double da = std::hypot(anchor.dims[0], anchor.dims[1]);
    return {(gt.center[0] - anchor.center[0]) / da,
            (gt.center[1] - anchor.center[1]) / da,
            (gt.center[2] - anchor.center[2]) / anchor.dims[2],
            std::log(gt.dims[0] / anchor.dims[0]),
            std::log(gt.dims[1] / anchor.dims[1]),
            std::log(gt.dims[2] / anchor.dims[2]),
            gt.yaw - anchor.yaw};
}

Box3D decode_box(const std::array<double, 7>& t, const Box3D& anchor) {
    for (int a = 0; a < 3; ++a)
        if (!(anchor.dims[a] > 0)) throw CheckError("box codec: non-positive dims");
    const double da = std::hypot(anchor.dims[0], anchor.dims[1]);
    Box3D b;
    b.center[0] = anchor.center[0] + t[0] * da;
    b.center[1] = anchor.center[1] + t[1] * da;
    b.center[2] = anchor.center[2] + t[2] * anchor.dims[2];
    b.dims[0] = anchor.dims[0] * std::exp(t[3]);
    b.dims[1] = anchor.dims[1] * std::exp(t[4]);
    b.dims[2] = anchor.dims[2] * std::exp(t[5]);
    b.yaw = anchor.yaw + t[6];
    b.class_id = anchor.class_id;
    return b;
}

std::vector<Box3D> make_anchors(const VoxelGridSpec& grid, double pillar, const DetectConfig& cfg) {
    cfg.validate();
    grid.validate();
    if (!(pillar > 0)) throw ConfigError("make_anchors: pillar must be positive");
    const auto pg = grid.with_voxel_size(pillar, pillar, grid.extent[2]);
    const i64 h = pg.cells(0), w = pg.cells(1);
    std::vector<Box3D> out;
    out.reserve(static_cast<std::size_t>(h * w * 2));
    for (i64 ix = 0; ix < h; ++ix)
        for (i64 iy = 0; iy < w; ++iy)
            for (int yb = 0; yb < 2; ++yb) {
                Box3D a;
                a.center[0] = grid.origin[0] + (static_cast<double>(ix) + 0.5) * pillar;
                a.center[1] = grid.origin[1] + (static_cast<double>(iy) + 0.5) * pillar;
                a.center[2] = cfg.anchor_z;
                a.dims[0] = cfg.anchor_l;
                a.dims[1] = cfg.anchor_w;
                a.dims[2] = cfg.anchor_h;
                a.yaw = yb == 0 ? 0.0 : 1.5707963267948966;
                out.push_back(a);
            }
    return out;
}

MatchResult match_anchors(const std::vector<Box3D>& anchors, const std::vector<Box3D>& gts,
                          const DetectConfig& cfg) {
    cfg.validate();
    const i64 na = static_cast<i64>(anchors.size());
    const i64 ng = static_cast<i64>(gts.size());
    MatchResult r;
    r.label.assign(static_cast<std::size_t>(na), 0);
    r.gt_of.assign(static_cast<std::size_t>(na), -1);
    std::vector<double> best_iou(static_cast<std::size_t>(na), 0.0);
    std::vector<i64> best_gt(static_cast<std::size_t>(na), -1);
    std::vector<double> gt_best_iou(static_cast<std::size_t>(ng), 0.0);
    std::vector<i64> gt_best_anchor(static_cast<std::size_t>(ng), -1);
    for (i64 a = 0; a < na; ++a)
        for (i64 g = 0; g < ng; ++g) {
            if (bev_disjoint(anchors[static_cast<std::size_t>(a)], gts[static_cast<std::size_t>(g)])) continue;
            const double iou = iou_bev(anchors[static_cast<std::size_t>(a)], gts[static_cast<std::size_t>(g)]);
            if (iou > best_iou[static_cast<std::size_t>(a)]) {
                best_iou[static_cast<std::size_t>(a)] = iou;
                best_gt[static_cast<std::size_t>(a)] = g;
            }
            if (iou > gt_best_iou[static_cast<std::size_t>(g)]) {
                gt_best_iou[static_cast<std::size_t>(g)] = iou;
                gt_best_anchor[static_cast<std::size_t>(g)] = a;
            }
        }
    for (i64 a = 0; a < na; ++a) {
        if (best_iou[static_cast<std::size_t>(a)] >= cfg.iou_pos) {
            r.label[static_cast<std::size_t>(a)] = 1;
            r.gt_of[static_cast<std::size_t>(a)] = best_gt[static_cast<std::size_t>(a)];
        } else if (best_iou[static_cast<std::size_t>(a)] > cfg.iou_neg) {
            r.label[static_cast<std::size_t>(a)] = -1;
        }
    }
    for (i64 g = 0; g < ng; ++g) {
        if (gt_best_anchor[static_cast<std::size_t>(g)] < 0) continue;  // no overlapping anchor at all
        const auto a = static_cast<std::size_t>(gt_best_anchor[static_cast<std::size_t>(g)]);
        r.label[a] = 1;
        r.gt_of[a] = g;
    }
    for (i64 a = 0; a < na; ++a)
        if (r.label[static_cast<std::size_t>(a)] == 1) r.n_pos++;
    return r;
}

std::vector<double> point_labels(const PointCloud& pc, const std::vector<Box3D>& gts) {
    const i64 n = pc.n();
    std::vector<double> out(static_cast<std::size_t>(n), 0.0);
    for (i64 i = 0; i < n; ++i) {
        const double x = pc.xyz[static_cast<std::size_t>(i * 3 + 0)];
        const double y = pc.xyz[static_cast<std::size_t>(i * 3 + 1)];
        const double z = pc.xyz[static_cast<std::size_t>(i * 3 + 2)];
        for (const auto& b : gts)
            if (point_in_box(x, y, z, b)) {
                out[static_cast<std::size_t>(i)] = 1.0;
                break;
            }
    }
    return out;
}

LossBreakdown total_loss(Tape* tape, Array cls_logits, Array reg_preds, Array dir_logits, Array seg_logits,
                         const MatchResult& match, const std::vector<Box3D>& anchors,
                         const std::vector<Box3D>& gts, const std::vector<double>& point_fg,
                         const DetectConfig& cfg) {
    cfg.validate();
    const i64 na = static_cast<i64>(match.label.size());
    if (cls_logits.rank() != 2 || cls_logits.dim(0) != na || cls_logits.dim(1) != 1)
        throw ShapeError("total_loss: cls logits " + shape_str(cls_logits.shape));
    if (reg_preds.rank() != 2 || reg_preds.dim(0) != na || reg_preds.dim(1) != 7)
        throw ShapeError("total_loss: reg predictions " + shape_str(reg_preds.shape));
    if (dir_logits.rank() != 2 || dir_logits.dim(0) != na || dir_logits.dim(1) != 1)
        throw ShapeError("total_loss: dir logits " + shape_str(dir_logits.shape));
    if (seg_logits.rank() != 2 || seg_logits.dim(1) != 1 ||
        seg_logits.dim(0) != static_cast<i64>(point_fg.size()))
        throw ShapeError("total_loss: segmentation logits " + shape_str(seg_logits.shape));
    if (static_cast<i64>(anchors.size()) != na) throw ShapeError("total_loss: anchor count mismatch");

    const double np = static_cast<double>(std::max<i64>(1, match.n_pos));
    std::vector<Array> terms;
    std::vector<double> weights;

    auto seg_t = from_vector<double>({seg_logits.dim(0), 1}, point_fg);
    auto l_seg = focal_bce_loss(tape, seg_logits, seg_t, cfg.focal_alpha, cfg.focal_gamma, true);
    terms.push_back(l_seg);
    weights.push_back(cfg.w_seg);

    std::vector<i64> keep;
    std::vector<double> cls_t;
    std::vector<i64> pos;
    for (i64 a = 0; a < na; ++a) {
        const int lab = match.label[static_cast<std::size_t>(a)];
        if (lab >= 0) {
            keep.push_back(a);
            cls_t.push_back(lab == 1 ? 1.0 : 0.0);
        }
        if (lab == 1) pos.push_back(a);
    }

    Array l_cls, l_reg, l_dir;
    if (!keep.empty()) {
        auto sel = gather_rows(tape, cls_logits, keep);
        auto tgt = from_vector<double>({static_cast<i64>(keep.size()), 1}, std::move(cls_t));
        l_cls = focal_bce_loss(tape, sel, tgt, cfg.focal_alpha, cfg.focal_gamma, false);
        terms.push_back(l_cls);
        weights.push_back(cfg.w_cls / np);
    }
    if (!pos.empty()) {
        std::vector<double> reg_t(pos.size() * 7);
        std::vector<double> dir_t(pos.size());
        for (std::size_t i = 0; i < pos.size(); ++i) {
            const auto a = static_cast<std::size_t>(pos[i]);
            const i64 g = match.gt_of[a];
            if (g < 0 || g >= static_cast<i64>(gts.size())) throw CheckError("total_loss: positive without target");
            const auto t = encode_box(gts[static_cast<std::size_t>(g)], anchors[a]);
            for (int j = 0; j < 7; ++j) reg_t[i * 7 + static_cast<std::size_t>(j)] = t[static_cast<std::size_t>(j)];
            dir_t[i] = gts[static_cast<std::size_t>(g)].yaw > 0 ? 1.0 : 0.0;
        }
        auto reg_sel = gather_rows(tape, reg_preds, pos);
        auto reg_tgt = from_vector<double>({static_cast<i64>(pos.size()), 7}, std::move(reg_t));
        // The yaw residual enters through the sine of the error, so a target
        // flipped by pi pulls the same way; the direction head owns the half-turn.
        auto lin_p = slice_cols(tape, reg_sel, 0, 6);
        auto lin_t = slice_cols(tape, reg_tgt, 0, 6);
        auto yaw_e = sin_elem(tape, add(tape, slice_cols(tape, reg_sel, 6, 7),
                                        scale(tape, slice_cols(tape, reg_tgt, 6, 7), -1.0)));
        auto yaw_z = zeros<double>({static_cast<i64>(pos.size()), 1});
        l_reg = add(tape, smooth_l1_loss(tape, lin_p, lin_t, cfg.smooth_l1_beta),
                    smooth_l1_loss(tape, yaw_e, yaw_z, cfg.smooth_l1_beta));
        terms.push_back(l_reg);
        weights.push_back(cfg.w_reg / np);

        auto dir_sel = gather_rows(tape, dir_logits, pos);
        auto dir_tgt = from_vector<double>({static_cast<i64>(pos.size()), 1}, std::move(dir_t));
        l_dir = bce_logits_loss(tape, dir_sel, dir_tgt, false);
        terms.push_back(l_dir);
        weights.push_back(cfg.w_dir / np);
    }

    LossBreakdown out;
    out.total = weighted_sum(tape, std::move(terms), std::move(weights));
    out.seg = l_seg[0];
    out.cls = l_cls.valid() ? l_cls[0] : 0.0;
    out.reg = l_reg.valid() ? l_reg[0] : 0.0;
    out.dir = l_dir.valid() ? l_dir[0] : 0.0;
    out.n_pos = match.n_pos;
    return out;
}

std::vector<i64> nms(const std::vector<Box3D>& boxes, const std::vector<double>& scores, double iou_thr,
                     double score_thr) {
    if (boxes.size() != scores.size()) throw ShapeError("nms: box and score counts differ");
    std::vector<i64> cand;
    for (i64 i = 0; i < static_cast<i64>(boxes.size()); ++i)
        if (scores[static_cast<std::size_t>(i)] > score_thr) cand.push_back(i);
    std::sort(cand.begin(), cand.end(), [&](i64 a, i64 b) {
        const double sa = scores[static_cast<std::size_t>(a)], sb = scores[static_cast<std::size_t>(b)];
        return sa != sb ? sa > sb : a < b;
    });
    std::vector<char> dead(boxes.size(), 0);
    std::vector<i64> kept;
    for (std::size_t i = 0; i < cand.size(); ++i) {
        const auto a = static_cast<std::size_t>(cand[i]);
        if (dead[a]) continue;
        kept.push_back(cand[i]);
        for (std::size_t j = i + 1; j < cand.size(); ++j) {
            const auto b = static_cast<std::size_t>(cand[j]);
            if (dead[b] || bev_disjoint(boxes[a], boxes[b])) continue;
            if (iou_bev(boxes[a], boxes[b]) > iou_thr) dead[b] = 1;
        }
    }
    return kept;
}

EvalResult evaluate_detections(const std::vector<std::vector<Box3D>>& preds,
                               const std::vector<std::vector<double>>& scores,
                               const std::vector<std::vector<Box3D>>& gts, double iou_thr) {
    if (preds.size() != scores.size() || preds.size() != gts.size())
        throw ShapeError("evaluate: scene counts differ");
    struct Pred {
        double score;
        i64 scene, idx;
    };
    std::vector<Pred> all;
    i64 total_gt = 0;
    for (std::size_t s = 0; s < preds.size(); ++s) {
        if (preds[s].size() != scores[s].size()) throw ShapeError("evaluate: box and score counts differ");
        total_gt += static_cast<i64>(gts[s].size());
        for (std::size_t i = 0; i < preds[s].size(); ++i)
            all.push_back({scores[s][i], static_cast<i64>(s), static_cast<i64>(i)});
    }
    if (total_gt == 0) throw CheckError("evaluate: no ground-truth boxes");
    std::sort(all.begin(), all.end(), [](const Pred& a, const Pred& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.scene != b.scene) return a.scene < b.scene;
        return a.idx < b.idx;
    });
    std::vector<std::vector<char>> matched(gts.size());
    for (std::size_t s = 0; s < gts.size(); ++s) matched[s].assign(gts[s].size(), 0);
    std::vector<double> precision, recall;
    i64 tp = 0, fp = 0;
    for (const auto& p : all) {
        const auto s = static_cast<std::size_t>(p.scene);
        double best = 0;
        i64 best_g = -1;
        for (std::size_t g = 0; g < gts[s].size(); ++g) {
            const double iou = iou_bev(preds[s][static_cast<std::size_t>(p.idx)], gts[s][g]);
            if (iou > best) {
                best = iou;
                best_g = static_cast<i64>(g);
            }
        }
        if (best >= iou_thr && best_g >= 0 && !matched[s][static_cast<std::size_t>(best_g)]) {
            matched[s][static_cast<std::size_t>(best_g)] = 1;
            tp++;
        } else {
            fp++;
        }
        precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
        recall.push_back(static_cast<double>(tp) / static_cast<double>(total_gt));
    }
    EvalResult r;
    r.n_gt = total_gt;
    r.n_pred = static_cast<i64>(all.size());
    r.recall = all.empty() ? 0.0 : recall.back();
    double ap = 0;
    for (int j = 0; j <= 10; ++j) {
        const double level = static_cast<double>(j) / 10.0;
        double pmax = 0;
        for (std::size_t i = 0; i < precision.size(); ++i)
            if (recall[i] >= level) pmax = std::max(pmax, precision[i]);
        ap += pmax;
    }
    r.ap = ap / 11.0;
    return r;
}

}  // namespace vx
