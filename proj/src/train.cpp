#include "voxattn/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace vx {

AdamW::AdamW(std::vector<NamedParam> params, double lr_in, double weight_decay_in)
    : lr(lr_in), weight_decay(weight_decay_in), params_(std::move(params)) {
    if (!(lr > 0)) throw ConfigError("adamw: lr must be positive");
    if (weight_decay < 0) throw ConfigError("adamw: weight_decay must be >= 0");
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const auto& p : params_) {
        m_.emplace_back(static_cast<std::size_t>(p.array.numel()), 0.0);
        v_.emplace_back(static_cast<std::size_t>(p.array.numel()), 0.0);
    }
}

void AdamW::step() {
    t_++;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
    for (std::size_t pi = 0; pi < params_.size(); ++pi) {
        auto& p = params_[pi].array;
        const bool decay = p.rank() >= 2;
        double* w = p.ptr();
        const i64 n = p.numel();
        auto& m = m_[pi];
        auto& v = v_[pi];
        const bool has_g = p.has_grad();
        double* g = has_g ? p.grad_ptr() : nullptr;
        for (i64 i = 0; i < n; ++i) {
            const double gi = has_g ? g[i] : 0.0;
            const auto u = static_cast<std::size_t>(i);
            m[u] = beta1 * m[u] + (1.0 - beta1) * gi;
            v[u] = beta2 * v[u] + (1.0 - beta2) * gi * gi;
            double upd = (m[u] / bc1) / (std::sqrt(v[u] / bc2) + eps);
            if (decay) upd += weight_decay * w[i];
            w[i] -= lr * upd;
        }
        if (has_g) std::fill(g, g + n, 0.0);
    }
}

void ToyModel::collect(std::vector<NamedParam>& params, std::vector<NamedParam>& buffers) {
    backbone.collect("backbone.", params, buffers);
    bev.collect("bev.", params, buffers);
    params.push_back({"seg_head.w", seg_w});
    params.push_back({"seg_head.b", seg_b});
    params.push_back({"box_head.w", head_w});
    params.push_back({"box_head.b", head_b});
}

ToyModel make_toy_model(std::uint64_t seed, const SceneSpec& scene) {
    scene.validate();
    ToyModel m;
    m.scene = scene;
    m.cfg = BackboneConfig::toy(scene.grid);
    m.det.anchor_z = scene.grid.origin[2] + 0.78;
    m.det.validate();
    Rng rng(derive_seed(seed, 7001));
    m.backbone = make_backbone_params(rng, m.cfg);
    const i64 d_last = m.cfg.block_dims[3];
    m.bev = make_bev_cnn_params(rng, d_last, m.cfg.bev_branch_channels);
    const double bs = 1.0 / std::sqrt(static_cast<double>(d_last));
    m.seg_w = uniform_array<double>(rng, {d_last, 1}, -bs, bs, true);
    m.seg_b = zeros<double>({1}, true);
    const i64 hc = 2 * m.cfg.bev_branch_channels;
    const double bh = 1.0 / std::sqrt(static_cast<double>(hc));
    m.head_w = uniform_array<double>(rng, {hc, 18}, -bh, bh, true);
    m.head_b = zeros<double>({18}, true);
    (*m.head_b.data)[0] = (*m.head_b.data)[9] = -std::log(9.0);  // rare-foreground prior
    m.anchors = make_anchors(m.cfg.grid, m.cfg.pillar_size, m.det);
    return m;
}

HeadOutputs toy_forward(Tape* tape, ToyModel& model, const PointCloud& pc, bool training) {
    auto feats = backbone_forward(tape, pc, model.cfg, model.backbone, training);
    HeadOutputs out;
    out.seg = add_bias(tape, matmul(tape, feats, model.seg_w), model.seg_b);
    // The box branch reads the point features through a gradient barrier: the
    // trunk is shaped by the dense per-point objectness task alone, which keeps
    // the anchor losses from churning the shared representation.
    auto detached = from_vector<double>(feats.shape, *feats.data);
    auto grid = bev_softpool(tape, detached, pc, model.cfg);
    auto fused = bev_cnn(tape, grid, model.bev, training);
    const i64 c = fused.dim(0), h = fused.dim(1), w = fused.dim(2);
    auto rows = transpose2d(tape, reshape(tape, fused, {c, h * w}));
    auto head = add_bias(tape, matmul(tape, rows, model.head_w), model.head_b);
    auto per_anchor = reshape(tape, head, {h * w * 2, 9});
    out.cls = slice_cols(tape, per_anchor, 0, 1);
    out.reg = slice_cols(tape, per_anchor, 1, 8);
    out.dir = slice_cols(tape, per_anchor, 8, 9);
    return out;
}

Detections predict_scene(ToyModel& model, const PointCloud& pc) {
    Detections det;
    if (pc.n() == 0) return det;
    auto out = toy_forward(nullptr, model, pc, false);
    const i64 na = out.cls.dim(0);
    if (na != static_cast<i64>(model.anchors.size())) throw CheckError("predict: anchor count mismatch");

    // Detection score = geometric mean of the anchor classifier and the strongest
    // point-level foreground logit among the pillars under the anchor's footprint;
    // anchors whose footprint covers no points score 0.
    const auto pg = model.cfg.grid.with_voxel_size(model.cfg.pillar_size, model.cfg.pillar_size,
                                                   model.cfg.grid.extent[2]);
    const auto vox = voxelize(pc, pg);
    const i64 bw = model.cfg.bev_w();
    constexpr double kEmpty = -1e300;
    std::vector<double> cell_obj(static_cast<std::size_t>(model.cfg.bev_h() * bw), kEmpty);
    for (i64 i = 0; i < pc.n(); ++i) {
        const auto& c = vox[static_cast<std::size_t>(i)];
        auto& o = cell_obj[static_cast<std::size_t>(c[0] * bw + c[1])];
        o = std::max(o, out.seg[i]);
    }
    std::vector<i64> occupied;
    std::vector<double> cx, cy;
    for (i64 cell = 0; cell < static_cast<i64>(cell_obj.size()); ++cell)
        if (cell_obj[static_cast<std::size_t>(cell)] != kEmpty) {
            occupied.push_back(cell);
            cx.push_back(model.cfg.grid.origin[0] + (static_cast<double>(cell / bw) + 0.5) * model.cfg.pillar_size);
            cy.push_back(model.cfg.grid.origin[1] + (static_cast<double>(cell % bw) + 0.5) * model.cfg.pillar_size);
        }

    std::vector<double> score(static_cast<std::size_t>(na));
    std::vector<Box3D> boxes(static_cast<std::size_t>(na));
    for (i64 a = 0; a < na; ++a) {
        const auto& anchor = model.anchors[static_cast<std::size_t>(a)];
        double o = kEmpty;
        for (std::size_t j = 0; j < occupied.size(); ++j)
            if (point_in_box(cx[j], cy[j], anchor.center[2], anchor))
                o = std::max(o, cell_obj[static_cast<std::size_t>(occupied[j])]);
        const double p_obj = o == kEmpty ? 0.0 : detail::sigmoid(o);
        score[static_cast<std::size_t>(a)] = std::sqrt(detail::sigmoid(out.cls[a]) * p_obj);
        std::array<double, 7> t;
        for (int j = 0; j < 7; ++j) t[static_cast<std::size_t>(j)] = out.reg[a * 7 + j];
        boxes[static_cast<std::size_t>(a)] = decode_box(t, model.anchors[static_cast<std::size_t>(a)]);
    }
    for (i64 kept : nms(boxes, score, model.det.nms_iou, model.det.nms_score)) {
        det.boxes.push_back(boxes[static_cast<std::size_t>(kept)]);
        det.scores.push_back(score[static_cast<std::size_t>(kept)]);
    }
    return det;
}

void TrainToyConfig::validate() const {
    if (steps < 1) throw ConfigError("train: steps must be >= 1");
    if (!(lr > 0)) throw ConfigError("train: lr must be positive");
    if (weight_decay < 0) throw ConfigError("train: weight_decay must be >= 0");
    if (eval_every < 0) throw ConfigError("train: eval_every must be >= 0");
    if (eval_scenes < 1 || final_eval_scenes < 1) throw ConfigError("train: eval scene counts must be >= 1");
    scene.validate();
}

TrainToyConfig TrainToyConfig::from_config(const KvConfig& cfg) {
    TrainToyConfig t;
    t.scene = SceneSpec::from_config(cfg);
    t.steps = cfg.get_int("steps", t.steps);
    t.lr = cfg.get_double("lr", t.lr);
    t.weight_decay = cfg.get_double("weight_decay", t.weight_decay);
    t.eval_every = cfg.get_int("eval_every", t.eval_every);
    t.eval_scenes = cfg.get_int("eval_scenes", t.eval_scenes);
    t.final_eval_scenes = cfg.get_int("final_eval_scenes", t.final_eval_scenes);
    t.validate();
    return t;
}

EvalResult evaluate_model(ToyModel& model, i64 n_scenes, std::uint64_t seed_base) {
    std::vector<std::vector<Box3D>> preds, gts;
    std::vector<std::vector<double>> scores;
    for (i64 i = 0; i < n_scenes; ++i) {
        auto scene = gen_scene_robust(derive_seed(seed_base, static_cast<std::uint64_t>(i)), model.scene);
        auto det = predict_scene(model, scene.pc);
        preds.push_back(std::move(det.boxes));
        scores.push_back(std::move(det.scores));
        gts.push_back(std::move(scene.boxes));
    }
    return evaluate_detections(preds, scores, gts, 0.5);
}

TrainResult train_toy(ToyModel& model, const TrainToyConfig& cfg, std::uint64_t seed,
                      const std::string& metrics_path) {
    cfg.validate();
    std::vector<NamedParam> params, buffers;
    model.collect(params, buffers);
    AdamW opt(params, cfg.lr, cfg.weight_decay);
    std::ofstream mf;
    if (!metrics_path.empty()) {
        mf.open(metrics_path);
        if (!mf) throw IoError("cannot open " + metrics_path + " for writing");
        mf << "# step total seg cls reg dir recall\n";
    }
    TrainResult result;
    double last_recall = -1.0;
    for (i64 step = 0; step < cfg.steps; ++step) {
        auto scene = gen_scene_robust(derive_seed(seed, 100000 + static_cast<std::uint64_t>(step)), cfg.scene);
        Tape tape;
        auto outs = toy_forward(&tape, model, scene.pc, true);
        auto match = match_anchors(model.anchors, scene.boxes, model.det);
        auto fg = point_labels(scene.pc, scene.boxes);
        auto loss =
            total_loss(&tape, outs.cls, outs.reg, outs.dir, outs.seg, match, model.anchors, scene.boxes, fg, model.det);
        const double lv = loss.total[0];
        if (!std::isfinite(lv))
            throw CheckError("train_toy: loss became non-finite at step " + std::to_string(step) +
                             " (lower lr or check inputs)");
        tape.backward(loss.total);
        opt.step();
        if (step == 0) result.step0_loss = lv;
        result.final_loss = lv;
        if (cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0) {
            auto ev = evaluate_model(model, cfg.eval_scenes, derive_seed(seed, 500000));
            last_recall = ev.recall;
        }
        const double np = static_cast<double>(std::max<i64>(1, loss.n_pos));
        MetricsRow row{step, lv, loss.seg, loss.cls / np, loss.reg / np, loss.dir / np, last_recall};
        result.history.push_back(row);
        if (mf)
            mf << row.step << ' ' << row.total << ' ' << row.seg << ' ' << row.cls << ' ' << row.reg << ' '
               << row.dir << ' ' << row.recall << '\n';
    }
    result.final_eval = evaluate_model(model, cfg.final_eval_scenes, derive_seed(seed, 900000));
    if (mf && !mf.flush()) throw IoError("failed writing " + metrics_path);
    return result;
}

namespace {

void append_kv(std::ostringstream& os, const char* key, double v) {
    os << key << '=';
    os.precision(17);
    os << v << '\n';
}

}  // namespace

Checkpoint model_checkpoint(ToyModel& model) {
    std::ostringstream os;
    const auto& s = model.scene;
    append_kv(os, "grid_origin_x", s.grid.origin[0]);
    append_kv(os, "grid_origin_y", s.grid.origin[1]);
    append_kv(os, "grid_origin_z", s.grid.origin[2]);
    append_kv(os, "grid_extent_x", s.grid.extent[0]);
    append_kv(os, "grid_extent_y", s.grid.extent[1]);
    append_kv(os, "grid_extent_z", s.grid.extent[2]);
    os << "box_count_min=" << s.box_count_min << '\n';
    os << "box_count_max=" << s.box_count_max << '\n';
    os << "points_per_box_min=" << s.points_per_box_min << '\n';
    os << "points_per_box_max=" << s.points_per_box_max << '\n';
    os << "clutter_points=" << s.clutter_points << '\n';
    append_kv(os, "dims_min_l", s.dims_min[0]);
    append_kv(os, "dims_min_w", s.dims_min[1]);
    append_kv(os, "dims_min_h", s.dims_min[2]);
    append_kv(os, "dims_max_l", s.dims_max[0]);
    append_kv(os, "dims_max_w", s.dims_max[1]);
    append_kv(os, "dims_max_h", s.dims_max[2]);
    append_kv(os, "yaw_range", s.yaw_range);
    append_kv(os, "z_jitter", s.z_jitter);
    append_kv(os, "margin", s.margin);
    Checkpoint ck;
    ck.config_text = os.str();
    std::vector<NamedParam> params, buffers;
    model.collect(params, buffers);
    for (const auto& p : params) ck.put(p.name, p.array);
    for (const auto& b : buffers) ck.put(b.name, b.array);
    return ck;
}

ToyModel model_from_checkpoint(const Checkpoint& ck) {
    auto kv = KvConfig::from_string(ck.config_text, "<checkpoint>");
    auto scene = SceneSpec::from_config(kv);
    ToyModel model = make_toy_model(1, scene);
    std::vector<NamedParam> params, buffers;
    model.collect(params, buffers);
    load_named(ck, params);
    load_named(ck, buffers);
    return model;
}

}  // namespace vx
