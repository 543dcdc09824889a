#pragma once

#include <array>
#include <vector>

#include "voxattn/losses.hpp"
#include "voxattn/pcio.hpp"

namespace vx {

struct DetectConfig {
    double anchor_l = 3.9, anchor_w = 1.6, anchor_h = 1.56;
    double anchor_z = -1.0;
    double iou_neg = 0.45, iou_pos = 0.6;
    double focal_alpha = 0.25, focal_gamma = 2.0;
    double smooth_l1_beta = 1.0 / 9.0;
    double w_cls = 1.0, w_reg = 2.0, w_dir = 0.2, w_seg = 1.0;
    double nms_iou = 0.1, nms_score = 0.3;

    void validate() const;
};

// Rotated top-down overlap via convex polygon clipping; symmetric, in [0,1],
// zero for degenerate boxes.
double iou_bev(const Box3D& a, const Box3D& b);

// Residuals (dx/d_a, dy/d_a, dz/h_a, log l/l_a, log w/w_a, log h/h_a, dyaw)
// with d_a the anchor's diagonal; decode inverts encode exactly.
std::array<double, 7> encode_box(const Box3D& gt, const Box3D& anchor);
Box3D decode_box(const std::array<double, 7>& t, const Box3D& anchor);

// Two anchors per BEV cell (yaw 0 and pi/2) at pillar centers. Anchor index
// (cell_x * bev_w + cell_y) * 2 + yaw_bin matches the head's output rows.
std::vector<Box3D> make_anchors(const VoxelGridSpec& grid, double pillar, const DetectConfig& cfg);

struct MatchResult {
    std::vector<int> label;  // 1 positive, 0 negative, -1 ignored
    std::vector<i64> gt_of;  // gt index for positives, -1 otherwise
    i64 n_pos = 0;
};

MatchResult match_anchors(const std::vector<Box3D>& anchors, const std::vector<Box3D>& gts,
                          const DetectConfig& cfg);

// 1.0 for points inside any labeled box, else 0.0.
std::vector<double> point_labels(const PointCloud& pc, const std::vector<Box3D>& gts);

struct LossBreakdown {
    Array total;  // scalar, on tape
    double seg = 0, cls = 0, reg = 0, dir = 0;
    i64 n_pos = 0;
};

// total = w_seg*seg + (w_cls*cls + w_reg*reg + w_dir*dir) / max(n_pos, 1)
// seg: mean focal over points; cls: focal summed over non-ignored anchors;
// reg: smooth-L1 summed over positives' residuals; dir: bce summed over
// positives (target = gt yaw > 0).
LossBreakdown total_loss(Tape* tape, Array cls_logits, Array reg_preds, Array dir_logits, Array seg_logits,
                         const MatchResult& match, const std::vector<Box3D>& anchors,
                         const std::vector<Box3D>& gts, const std::vector<double>& point_fg,
                         const DetectConfig& cfg);

// Greedy descending-score suppression; candidates need score > score_thr,
// ties broken by index.
std::vector<i64> nms(const std::vector<Box3D>& boxes, const std::vector<double>& scores, double iou_thr,
                     double score_thr);

struct EvalResult {
    double recall = 0, ap = 0;
    i64 n_gt = 0, n_pred = 0;
};

// Pooled recall and 11-point interpolated AP at the given overlap threshold.
EvalResult evaluate_detections(const std::vector<std::vector<Box3D>>& preds,
                               const std::vector<std::vector<double>>& scores,
                               const std::vector<std::vector<Box3D>>& gts, double iou_thr);

}  // namespace vx
