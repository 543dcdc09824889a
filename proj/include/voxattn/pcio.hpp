#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "voxattn/error.hpp"
#include "voxattn/scatter.hpp"

namespace vx {

struct PointCloud {
    std::vector<double> xyz;        // n*3
    std::vector<double> intensity;  // n
    i64 n() const { return static_cast<i64>(intensity.size()); }
};

struct VoxelGridSpec {
    double origin[3];
    double extent[3];
    double voxel_size[3];

    void validate() const {
        for (int a = 0; a < 3; ++a) {
            if (!(voxel_size[a] > 0)) throw ConfigError("grid: voxel_size must be positive");
            if (!(extent[a] > 0)) throw ConfigError("grid: extent must be positive");
        }
    }
    i64 cells(int axis) const;
    VoxelGridSpec with_voxel_size(double sx, double sy, double sz) const {
        VoxelGridSpec g = *this;
        g.voxel_size[0] = sx;
        g.voxel_size[1] = sy;
        g.voxel_size[2] = sz;
        return g;
    }
};

struct Box3D {
    double center[3];
    double dims[3];  // l, w, h
    double yaw = 0;
    int class_id = 0;
};

PointCloud read_kitti_bin(const std::string& path);
void write_kitti_bin(const std::string& path, const PointCloud& pc);
PointCloud read_points_text(const std::string& path);
void write_points_text(const std::string& path, const PointCloud& pc);

std::vector<Box3D> read_boxes_text(const std::string& path);       // x y z l w h yaw
void write_boxes_text(const std::string& path, const std::vector<Box3D>& boxes);
void write_detections_text(const std::string& path, const std::vector<Box3D>& boxes,
                           const std::vector<double>& scores);  // x y z l w h yaw score

PointCloud crop_range(const PointCloud& pc, const VoxelGridSpec& spec);
std::vector<VoxelCoord> voxelize(const PointCloud& pc, const VoxelGridSpec& spec);
std::vector<double> local_coords(const PointCloud& pc, const VoxelGridSpec& spec);  // n*3 in [0,1)

bool point_in_box(double px, double py, double pz, const Box3D& box);

}  // namespace vx
