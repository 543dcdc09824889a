#include "voxattn/scene.hpp"

#include <algorithm>
#include <cmath>

namespace vx {

namespace {

constexpr double kPi = 3.14159265358979323846;

double wrap_yaw(double yaw) {
    while (yaw <= -kPi) yaw += 2 * kPi;
    while (yaw > kPi) yaw -= 2 * kPi;
    return yaw;
}

}  // namespace

void SceneSpec::validate() const {
    grid.validate();
    if (box_count_min < 0 || box_count_max < box_count_min) throw ConfigError("scene: bad box_count range");
    if (points_per_box_min < 1 || points_per_box_max < points_per_box_min)
        throw ConfigError("scene: bad points_per_box range");
    if (clutter_points < 0) throw ConfigError("scene: clutter_points must be >= 0");
    for (int a = 0; a < 3; ++a)
        if (!(dims_min[a] > 0) || dims_max[a] < dims_min[a]) throw ConfigError("scene: bad dims range");
    if (!(yaw_range > 0) || yaw_range > kPi) throw ConfigError("scene: yaw_range must be in (0, pi]");
    if (z_jitter < 0) throw ConfigError("scene: z_jitter must be >= 0");
    const double circum = 0.5 * std::hypot(dims_max[0], dims_max[1]);
    if (margin < circum) throw ConfigError("scene: margin smaller than the largest box circumradius");
    for (int a = 0; a < 2; ++a)
        if (grid.extent[a] <= 2 * margin) throw ConfigError("scene: grid too small for the configured margin");
    if (grid.extent[2] <= dims_max[2]) throw ConfigError("scene: grid z-extent cannot hold the tallest box");
}

SceneSpec SceneSpec::from_config(const KvConfig& cfg) {
    SceneSpec s;
    s.grid.origin[0] = cfg.get_double("grid_origin_x", s.grid.origin[0]);
    s.grid.origin[1] = cfg.get_double("grid_origin_y", s.grid.origin[1]);
    s.grid.origin[2] = cfg.get_double("grid_origin_z", s.grid.origin[2]);
    s.grid.extent[0] = cfg.get_double("grid_extent_x", s.grid.extent[0]);
    s.grid.extent[1] = cfg.get_double("grid_extent_y", s.grid.extent[1]);
    s.grid.extent[2] = cfg.get_double("grid_extent_z", s.grid.extent[2]);
    s.box_count_min = cfg.get_int("box_count_min", s.box_count_min);
    s.box_count_max = cfg.get_int("box_count_max", s.box_count_max);
    s.points_per_box_min = cfg.get_int("points_per_box_min", s.points_per_box_min);
    s.points_per_box_max = cfg.get_int("points_per_box_max", s.points_per_box_max);
    s.clutter_points = cfg.get_int("clutter_points", s.clutter_points);
    s.dims_min[0] = cfg.get_double("dims_min_l", s.dims_min[0]);
    s.dims_min[1] = cfg.get_double("dims_min_w", s.dims_min[1]);
    s.dims_min[2] = cfg.get_double("dims_min_h", s.dims_min[2]);
    s.dims_max[0] = cfg.get_double("dims_max_l", s.dims_max[0]);
    s.dims_max[1] = cfg.get_double("dims_max_w", s.dims_max[1]);
    s.dims_max[2] = cfg.get_double("dims_max_h", s.dims_max[2]);
    s.yaw_range = cfg.get_double("yaw_range", s.yaw_range);
    s.z_jitter = cfg.get_double("z_jitter", s.z_jitter);
    s.margin = cfg.get_double("margin", s.margin);
    s.validate();
    return s;
}

Scene gen_synthetic_scene(std::uint64_t seed, const SceneSpec& spec) {
    spec.validate();
    Rng rng(seed);
    Scene scene;
    const auto& g = spec.grid;

    const i64 nb = rng.uniform_int(spec.box_count_min, spec.box_count_max);
    constexpr int kRetryBudget = 1000;
    for (i64 b = 0; b < nb; ++b) {
        bool placed = false;
        for (int attempt = 0; attempt < kRetryBudget && !placed; ++attempt) {
            Box3D box;
            for (int a = 0; a < 3; ++a) box.dims[a] = rng.uniform(spec.dims_min[a], spec.dims_max[a]);
            box.yaw = wrap_yaw(rng.uniform(-spec.yaw_range, spec.yaw_range));
            box.center[0] = rng.uniform(g.origin[0] + spec.margin, g.origin[0] + g.extent[0] - spec.margin);
            box.center[1] = rng.uniform(g.origin[1] + spec.margin, g.origin[1] + g.extent[1] - spec.margin);
            const double zlo = g.origin[2] + box.dims[2] * 0.5 + 0.01;
            const double zhi = g.origin[2] + g.extent[2] - box.dims[2] * 0.5 - 0.01;
            box.center[2] = std::clamp(g.origin[2] + box.dims[2] * 0.5 + rng.normal(0.0, spec.z_jitter), zlo, zhi);
            const double r = 0.5 * std::hypot(box.dims[0], box.dims[1]);
            bool clear = true;
            for (const auto& other : scene.boxes) {
                const double ro = 0.5 * std::hypot(other.dims[0], other.dims[1]);
                const double dist = std::hypot(box.center[0] - other.center[0], box.center[1] - other.center[1]);
                if (dist <= r + ro + 0.3) {
                    clear = false;
                    break;
                }
            }
            if (clear) {
                scene.boxes.push_back(box);
                placed = true;
            }
        }
        if (!placed) throw CheckError("gen_synthetic_scene: retry budget exhausted placing box (infeasible spec)");
    }

    // surface-sampled box points; face picked proportionally to its area
    for (const auto& box : scene.boxes) {
        const double l = box.dims[0], w = box.dims[1], h = box.dims[2];
        const double areas[6] = {l * w, l * w, l * h, l * h, w * h, w * h};  // z-, z+, y-, y+, x-, x+
        double total = 0;
        for (double a : areas) total += a;
        const i64 cnt = rng.uniform_int(spec.points_per_box_min, spec.points_per_box_max);
        const double cy = std::cos(box.yaw), sy = std::sin(box.yaw);
        for (i64 p = 0; p < cnt; ++p) {
            double pick = rng.uniform(0.0, total);
            int face = 0;
            while (face < 5 && pick > areas[face]) {
                pick -= areas[face];
                ++face;
            }
            const double u = rng.uniform(-0.5, 0.5), v = rng.uniform(-0.5, 0.5);
            double lx, ly, lz;
            switch (face) {
                case 0: lx = u * l; ly = v * w; lz = -0.5 * h; break;
                case 1: lx = u * l; ly = v * w; lz = 0.5 * h; break;
                case 2: lx = u * l; ly = -0.5 * w; lz = v * h; break;
                case 3: lx = u * l; ly = 0.5 * w; lz = v * h; break;
                case 4: lx = -0.5 * l; ly = u * w; lz = v * h; break;
                default: lx = 0.5 * l; ly = u * w; lz = v * h; break;
            }
            scene.pc.xyz.push_back(box.center[0] + cy * lx - sy * ly);
            scene.pc.xyz.push_back(box.center[1] + sy * lx + cy * ly);
            scene.pc.xyz.push_back(box.center[2] + lz);
            scene.pc.intensity.push_back(rng.uniform(0.0, 1.0));
        }
    }

    const double eps = 1e-6;
    for (i64 p = 0; p < spec.clutter_points; ++p) {
        bool placed = false;
        for (int attempt = 0; attempt < kRetryBudget && !placed; ++attempt) {
            const double x = rng.uniform(g.origin[0] + eps, g.origin[0] + g.extent[0] - eps);
            const double y = rng.uniform(g.origin[1] + eps, g.origin[1] + g.extent[1] - eps);
            const double z = rng.uniform(g.origin[2] + eps, g.origin[2] + g.extent[2] - eps);
            bool outside = true;
            for (const auto& box : scene.boxes)
                if (point_in_box(x, y, z, box)) {
                    outside = false;
                    break;
                }
            if (outside) {
                scene.pc.xyz.push_back(x);
                scene.pc.xyz.push_back(y);
                scene.pc.xyz.push_back(z);
                scene.pc.intensity.push_back(rng.uniform(0.0, 1.0));
                placed = true;
            }
        }
        if (!placed) throw CheckError("gen_synthetic_scene: retry budget exhausted placing clutter (infeasible spec)");
    }

    if (scene.pc.n() == 0) throw CheckError("gen_synthetic_scene: spec produced an empty scene");
    return scene;
}

Scene gen_scene_robust(std::uint64_t seed, const SceneSpec& spec, int max_tries) {
    for (int t = 1; t < max_tries; ++t) {
        try {
            return gen_synthetic_scene(seed, spec);
        } catch (const CheckError&) {
            seed = derive_seed(seed, 1);
        }
    }
    return gen_synthetic_scene(seed, spec);  // final try propagates its error
}

}  // namespace vx
