#include "voxattn/backbone.hpp"

#include <cmath>

namespace vx {

void MlpParams::collect(const std::string& prefix, std::vector<NamedParam>& params,
                        std::vector<NamedParam>& buffers) {
    params.push_back({prefix + "w", w});
    params.push_back({prefix + "b", b});
    params.push_back({prefix + "bn_gamma", bn_gamma});
    params.push_back({prefix + "bn_beta", bn_beta});
    buffers.push_back({prefix + "bn_mean", bn_mean});
    buffers.push_back({prefix + "bn_var", bn_var});
}

MlpParams make_mlp_params(Rng& rng, i64 d_in, i64 d_out) {
    if (d_in < 1 || d_out < 1) throw ConfigError("make_mlp_params: dims must be positive");
    MlpParams p;
    p.d_in = d_in;
    p.d_out = d_out;
    const double b = 1.0 / std::sqrt(static_cast<double>(d_in));
    p.w = uniform_array<double>(rng, {d_in, d_out}, -b, b, true);
    p.b = zeros<double>({d_out}, true);
    p.bn_gamma = full<double>({d_out}, 1.0, true);
    p.bn_beta = zeros<double>({d_out}, true);
    p.bn_mean = zeros<double>({d_out});
    p.bn_var = full<double>({d_out}, 1.0);
    return p;
}

Array mlp_forward(Tape* tape, Array x, MlpParams& p, bool training) {
    auto y = add_bias(tape, matmul(tape, x, p.w), p.b);
    y = batchnorm1d(tape, y, p.bn_gamma, p.bn_beta, p.bn_mean, p.bn_var, training);
    return relu(tape, y);
}

void BackboneConfig::validate() const {
    grid.validate();
    for (std::size_t s = 1; s < block_dims.size(); ++s)
        if (block_dims[s] <= block_dims[s - 1]) throw ConfigError("backbone: block dims must strictly increase");
    for (auto d : block_dims)
        if (d < 1) throw ConfigError("backbone: block dims must be positive");
    if (latent_k < 1) throw ConfigError("backbone: latent_k must be >= 1");
    if (pe_bandwidth < 2 || pe_bandwidth % 2 != 0) throw ConfigError("backbone: pe_bandwidth must be even and >= 2");
    if (!(pillar_size > 0)) throw ConfigError("backbone: pillar_size must be positive");
    if (bev_branch_channels < 1) throw ConfigError("backbone: bev_branch_channels must be >= 1");
    stage_grid(3).validate();
    for (int a = 0; a < 2; ++a)
        if (stage_grid(3).cells(a) < 1) throw ConfigError("backbone: grid extent too small for four doubling stages");
}

VoxelGridSpec BackboneConfig::stage_grid(int stage) const {
    if (stage < 0 || stage > 3) throw ConfigError("backbone: stage must be in [0,3]");
    const double f = static_cast<double>(1 << stage);
    return grid.with_voxel_size(grid.voxel_size[0] * f, grid.voxel_size[1] * f, grid.voxel_size[2]);
}

i64 BackboneConfig::bev_h() const { return grid.with_voxel_size(pillar_size, pillar_size, grid.extent[2]).cells(0); }
i64 BackboneConfig::bev_w() const { return grid.with_voxel_size(pillar_size, pillar_size, grid.extent[2]).cells(1); }

BackboneConfig BackboneConfig::toy(const VoxelGridSpec& scene_grid) {
    BackboneConfig cfg;
    cfg.grid = scene_grid.with_voxel_size(0.32, 0.32, scene_grid.extent[2]);
    cfg.block_dims = {16, 24, 32, 48};
    cfg.latent_k = 4;
    cfg.pe_bandwidth = 16;
    cfg.bev_branch_channels = 16;
    cfg.validate();
    return cfg;
}

void BackboneParams::collect(const std::string& prefix, std::vector<NamedParam>& params,
                             std::vector<NamedParam>& buffers) {
    for (int s = 0; s < 4; ++s) {
        const std::string stage = prefix + "stage" + std::to_string(s) + ".";
        mlps[static_cast<std::size_t>(s)].collect(stage + "mlp.", params, buffers);
        blocks[static_cast<std::size_t>(s)].collect(stage + "vsa.", params, buffers);
    }
}

BackboneParams make_backbone_params(Rng& rng, const BackboneConfig& cfg) {
    cfg.validate();
    BackboneParams p;
    i64 d_prev = 4;
    for (int s = 0; s < 4; ++s) {
        const i64 d = cfg.block_dims[static_cast<std::size_t>(s)];
        p.mlps[static_cast<std::size_t>(s)] = make_mlp_params(rng, d_prev, d);
        p.blocks[static_cast<std::size_t>(s)] =
            make_vsa_params<double>(rng, d, cfg.latent_k, d, d, cfg.pe_bandwidth);
        d_prev = d;
    }
    return p;
}

Array backbone_forward(Tape* tape, const PointCloud& pc, const BackboneConfig& cfg, BackboneParams& params,
                       bool training) {
    cfg.validate();
    const i64 n = pc.n();
    if (n == 0) throw CheckError("backbone: empty point cloud");
    Array x;
    for (int s = 0; s < 4; ++s) {
        const auto grid = cfg.stage_grid(s);
        const auto seg = build_segments(voxelize(pc, grid));
        const auto local = local_coords(pc, grid);
        if (s == 0) {
            std::vector<double> v(static_cast<std::size_t>(n) * 4);
            for (i64 i = 0; i < n; ++i) {
                v[static_cast<std::size_t>(i * 4 + 0)] = local[static_cast<std::size_t>(i * 3 + 0)];
                v[static_cast<std::size_t>(i * 4 + 1)] = local[static_cast<std::size_t>(i * 3 + 1)];
                v[static_cast<std::size_t>(i * 4 + 2)] = local[static_cast<std::size_t>(i * 3 + 2)];
                v[static_cast<std::size_t>(i * 4 + 3)] = pc.intensity[static_cast<std::size_t>(i)];
            }
            x = from_vector<double>({n, 4}, std::move(v));
        }
        x = mlp_forward(tape, x, params.mlps[static_cast<std::size_t>(s)], training);
        x = vsa_block(tape, x, local, seg, params.blocks[static_cast<std::size_t>(s)], training);
    }
    return x;
}

Array bev_softpool(Tape* tape, Array feats, const PointCloud& pc, const BackboneConfig& cfg) {
    if (feats.rank() != 2 || feats.dim(0) != pc.n())
        throw ShapeError("bev_softpool: features " + shape_str(feats.shape) + " do not cover " +
                         std::to_string(pc.n()) + " points");
    const auto pg = cfg.grid.with_voxel_size(cfg.pillar_size, cfg.pillar_size, cfg.grid.extent[2]);
    const auto seg = build_segments(voxelize(pc, pg));
    auto w = scatter_softmax(tape, feats, seg);
    auto pooled = scatter_sum(tape, mul(tape, w, feats), seg);
    const i64 bw = cfg.bev_w();
    std::vector<i64> cells(static_cast<std::size_t>(seg.m));
    for (i64 j = 0; j < seg.m; ++j) {
        const auto& c = seg.voxel_coords[static_cast<std::size_t>(j)];
        cells[static_cast<std::size_t>(j)] = c[0] * bw + c[1];
    }
    return rows_to_grid(tape, pooled, cells, cfg.bev_h(), bw);
}

void ConvBnParams::collect(const std::string& prefix, std::vector<NamedParam>& params,
                           std::vector<NamedParam>& buffers) {
    params.push_back({prefix + "w", w});
    params.push_back({prefix + "b", b});
    params.push_back({prefix + "bn_gamma", bn_gamma});
    params.push_back({prefix + "bn_beta", bn_beta});
    buffers.push_back({prefix + "bn_mean", bn_mean});
    buffers.push_back({prefix + "bn_var", bn_var});
}

void BevCnnParams::collect(const std::string& prefix, std::vector<NamedParam>& params,
                           std::vector<NamedParam>& buffers) {
    for (int i = 0; i < 3; ++i) full[static_cast<std::size_t>(i)].collect(prefix + "full" + std::to_string(i) + ".",
                                                                          params, buffers);
    for (int i = 0; i < 3; ++i) down[static_cast<std::size_t>(i)].collect(prefix + "down" + std::to_string(i) + ".",
                                                                          params, buffers);
}

namespace {

ConvBnParams make_conv_bn(Rng& rng, i64 c_in, i64 c_out) {
    ConvBnParams p;
    const double b = 1.0 / std::sqrt(static_cast<double>(9 * c_in));
    p.w = uniform_array<double>(rng, {c_out, c_in, 3, 3}, -b, b, true);
    p.b = zeros<double>({c_out}, true);
    p.bn_gamma = full<double>({c_out}, 1.0, true);
    p.bn_beta = zeros<double>({c_out}, true);
    p.bn_mean = zeros<double>({c_out});
    p.bn_var = full<double>({c_out}, 1.0);
    return p;
}

Array bn2d(Tape* tape, Array x, ConvBnParams& p, bool training) {
    const i64 c = x.dim(0), h = x.dim(1), w = x.dim(2);
    auto rows = transpose2d(tape, reshape(tape, x, {c, h * w}));
    rows = batchnorm1d(tape, rows, p.bn_gamma, p.bn_beta, p.bn_mean, p.bn_var, training);
    return reshape(tape, transpose2d(tape, rows), {c, h, w});
}

Array conv_bn_relu(Tape* tape, Array x, ConvBnParams& p, bool training) {
    return relu(tape, bn2d(tape, conv2d_3x3(tape, x, p.w, p.b), p, training));
}

}  // namespace

BevCnnParams make_bev_cnn_params(Rng& rng, i64 c_in, i64 c_branch) {
    if (c_in < 1 || c_branch < 1) throw ConfigError("make_bev_cnn_params: channel counts must be positive");
    BevCnnParams p;
    p.full[0] = make_conv_bn(rng, c_in, c_branch);
    p.full[1] = make_conv_bn(rng, c_branch, c_branch);
    p.full[2] = make_conv_bn(rng, c_branch, c_branch);
    p.down[0] = make_conv_bn(rng, c_in, c_branch);
    p.down[1] = make_conv_bn(rng, c_branch, c_branch);
    p.down[2] = make_conv_bn(rng, c_branch, c_branch);
    return p;
}

Array bev_cnn(Tape* tape, Array grid_chw, BevCnnParams& p, bool training) {
    if (grid_chw.rank() != 3) throw ShapeError("bev_cnn: expected [c,h,w], got " + shape_str(grid_chw.shape));
    const i64 h = grid_chw.dim(1), w = grid_chw.dim(2);
    auto a = grid_chw;
    for (auto& cp : p.full) a = conv_bn_relu(tape, a, cp, training);
    auto b = pad_hw(tape, grid_chw, h % 2, w % 2);
    b = avgpool2x2(tape, b);
    for (auto& cp : p.down) b = conv_bn_relu(tape, b, cp, training);
    b = upsample_nearest2x(tape, b);
    b = crop_hw(tape, b, h, w);
    return concat_channels(tape, a, b);
}

}  // namespace vx
