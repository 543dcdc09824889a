#pragma once

#include <array>
#include <string>
#include <vector>

#include "voxattn/bev_ops.hpp"
#include "voxattn/pcio.hpp"
#include "voxattn/vsa.hpp"

namespace vx {

struct MlpParams {
    i64 d_in = 0, d_out = 0;
    Array w, b;
    Array bn_gamma, bn_beta, bn_mean, bn_var;
    void collect(const std::string& prefix, std::vector<NamedParam>& params, std::vector<NamedParam>& buffers);
};

MlpParams make_mlp_params(Rng& rng, i64 d_in, i64 d_out);
Array mlp_forward(Tape* tape, Array x, MlpParams& p, bool training);

// Defaults follow the library's standard car-grid preset; the toy preset is
// a reduced configuration for the synthetic training task.
struct BackboneConfig {
    VoxelGridSpec grid{{0.0, -40.0, -3.0}, {70.4, 80.0, 4.0}, {0.32, 0.32, 4.0}};
    std::array<i64, 4> block_dims{16, 32, 64, 128};
    i64 latent_k = 8;
    i64 pe_bandwidth = 64;
    double pillar_size = 0.36;
    i64 bev_branch_channels = 64;

    void validate() const;
    VoxelGridSpec stage_grid(int stage) const;  // X/Y voxel size doubled per stage, Z held fixed
    i64 bev_h() const;
    i64 bev_w() const;
    static BackboneConfig toy(const VoxelGridSpec& scene_grid);
};

struct BackboneParams {
    std::array<MlpParams, 4> mlps;
    std::array<VsaParamsT<double>, 4> blocks;
    void collect(const std::string& prefix, std::vector<NamedParam>& params, std::vector<NamedParam>& buffers);
};

BackboneParams make_backbone_params(Rng& rng, const BackboneConfig& cfg);

// Stage s: MLP lifts features to block_dims[s], then a set-attention block at
// that stage's voxel size. The first stage consumes per-point
// (local_x, local_y, local_z, intensity) at the base grid. Output n x dims[3].
Array backbone_forward(Tape* tape, const PointCloud& pc, const BackboneConfig& cfg, BackboneParams& params,
                       bool training);

// Channel-wise softmax-weighted sum per pillar, painted onto a dense
// [d, bev_h, bev_w] map; empty pillars stay zero.
Array bev_softpool(Tape* tape, Array feats, const PointCloud& pc, const BackboneConfig& cfg);

struct ConvBnParams {
    Array w, b;
    Array bn_gamma, bn_beta, bn_mean, bn_var;
    void collect(const std::string& prefix, std::vector<NamedParam>& params, std::vector<NamedParam>& buffers);
};

struct BevCnnParams {
    std::array<ConvBnParams, 3> full;
    std::array<ConvBnParams, 3> down;
    void collect(const std::string& prefix, std::vector<NamedParam>& params, std::vector<NamedParam>& buffers);
};

BevCnnParams make_bev_cnn_params(Rng& rng, i64 c_in, i64 c_branch);

// Two branches over the BEV map: three 3x3 conv+norm+ReLU at full resolution,
// and the same stack after a 2x downsample, upsampled back and cropped to the
// input size (odd inputs are padded, never rejected). Channels concatenate.
Array bev_cnn(Tape* tape, Array grid_chw, BevCnnParams& p, bool training);

}  // namespace vx
