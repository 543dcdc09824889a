#include "voxattn/pcio.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace vx {

i64 VoxelGridSpec::cells(int axis) const {
    return static_cast<i64>(std::ceil(extent[axis] / voxel_size[axis] - 1e-9));
}

PointCloud read_kitti_bin(const std::string& path) {
    std::ifstream f(path, std::ios::binary | std::ios::ate);
    if (!f) throw IoError("cannot open " + path);
    const auto size = static_cast<std::int64_t>(f.tellg());
    if (size == 0) throw FormatError(path + ": empty point file");
    if (size % 16 != 0) throw FormatError(path + ": size " + std::to_string(size) + " is not a multiple of 16 bytes");
    f.seekg(0);
    std::vector<float> raw(static_cast<std::size_t>(size / 4));
    f.read(reinterpret_cast<char*>(raw.data()), size);
    if (!f) throw IoError(path + ": short read");
    PointCloud pc;
    const i64 n = size / 16;
    pc.xyz.resize(static_cast<std::size_t>(n * 3));
    pc.intensity.resize(static_cast<std::size_t>(n));
    for (i64 i = 0; i < n; ++i) {
        pc.xyz[static_cast<std::size_t>(i * 3 + 0)] = raw[static_cast<std::size_t>(i * 4 + 0)];
        pc.xyz[static_cast<std::size_t>(i * 3 + 1)] = raw[static_cast<std::size_t>(i * 4 + 1)];
        pc.xyz[static_cast<std::size_t>(i * 3 + 2)] = raw[static_cast<std::size_t>(i * 4 + 2)];
        pc.intensity[static_cast<std::size_t>(i)] = raw[static_cast<std::size_t>(i * 4 + 3)];
    }
    return pc;
}

void write_kitti_bin(const std::string& path, const PointCloud& pc) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path + " for writing");
    const i64 n = pc.n();
    std::vector<float> raw(static_cast<std::size_t>(n * 4));
    for (i64 i = 0; i < n; ++i) {
        raw[static_cast<std::size_t>(i * 4 + 0)] = static_cast<float>(pc.xyz[static_cast<std::size_t>(i * 3 + 0)]);
        raw[static_cast<std::size_t>(i * 4 + 1)] = static_cast<float>(pc.xyz[static_cast<std::size_t>(i * 3 + 1)]);
        raw[static_cast<std::size_t>(i * 4 + 2)] = static_cast<float>(pc.xyz[static_cast<std::size_t>(i * 3 + 2)]);
        raw[static_cast<std::size_t>(i * 4 + 3)] = static_cast<float>(pc.intensity[static_cast<std::size_t>(i)]);
    }
    f.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size() * 4));
    if (!f) throw IoError(path + ": short write");
}

namespace {

// strips '#' comments; returns false for blank lines
bool payload_of(const std::string& line, std::string& out) {
    const auto hash = line.find('#');
    out = hash == std::string::npos ? line : line.substr(0, hash);
    for (char c : out)
        if (!std::isspace(static_cast<unsigned char>(c))) return true;
    return false;
}

}  // namespace

PointCloud read_points_text(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open " + path);
    PointCloud pc;
    std::string line, payload;
    i64 lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (!payload_of(line, payload)) continue;
        std::istringstream ss(payload);
        double x, y, z, inten;
        if (!(ss >> x >> y >> z >> inten))
            throw FormatError(path + ":" + std::to_string(lineno) + ": expected 'x y z intensity'");
        pc.xyz.push_back(x);
        pc.xyz.push_back(y);
        pc.xyz.push_back(z);
        pc.intensity.push_back(inten);
    }
    if (pc.n() == 0) throw FormatError(path + ": no points");
    return pc;
}

void write_points_text(const std::string& path, const PointCloud& pc) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot open " + path + " for writing");
    f << "# x y z intensity\n";
    char buf[160];
    for (i64 i = 0; i < pc.n(); ++i) {
        std::snprintf(buf, sizeof(buf), "%.9g %.9g %.9g %.9g\n", pc.xyz[static_cast<std::size_t>(i * 3)],
                      pc.xyz[static_cast<std::size_t>(i * 3 + 1)], pc.xyz[static_cast<std::size_t>(i * 3 + 2)],
                      pc.intensity[static_cast<std::size_t>(i)]);
        f << buf;
    }
    if (!f) throw IoError(path + ": short write");
}

std::vector<Box3D> read_boxes_text(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open " + path);
    std::vector<Box3D> boxes;
    std::string line, payload;
    i64 lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (!payload_of(line, payload)) continue;
        std::istringstream ss(payload);
        Box3D b;
        if (!(ss >> b.center[0] >> b.center[1] >> b.center[2] >> b.dims[0] >> b.dims[1] >> b.dims[2] >> b.yaw))
            throw FormatError(path + ":" + std::to_string(lineno) + ": expected 'x y z l w h yaw'");
        boxes.push_back(b);
    }
    return boxes;
}

void write_boxes_text(const std::string& path, const std::vector<Box3D>& boxes) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot open " + path + " for writing");
    f << "# x y z l w h yaw\n";
    char buf[220];
    for (const auto& b : boxes) {
        std::snprintf(buf, sizeof(buf), "%.9g %.9g %.9g %.9g %.9g %.9g %.9g\n", b.center[0], b.center[1], b.center[2],
                      b.dims[0], b.dims[1], b.dims[2], b.yaw);
        f << buf;
    }
    if (!f) throw IoError(path + ": short write");
}

void write_detections_text(const std::string& path, const std::vector<Box3D>& boxes,
                           const std::vector<double>& scores) {
    if (boxes.size() != scores.size()) throw ShapeError("write_detections_text: one score per box required");
    std::ofstream f(path);
    if (!f) throw IoError("cannot open " + path + " for writing");
    f << "# x y z l w h yaw score\n";
    char buf[240];
    for (std::size_t i = 0; i < boxes.size(); ++i) {
        const auto& b = boxes[i];
        std::snprintf(buf, sizeof(buf), "%.9g %.9g %.9g %.9g %.9g %.9g %.9g %.9g\n", b.center[0], b.center[1],
                      b.center[2], b.dims[0], b.dims[1], b.dims[2], b.yaw, scores[i]);
        f << buf;
    }
    if (!f) throw IoError(path + ": short write");
}

PointCloud crop_range(const PointCloud& pc, const VoxelGridSpec& spec) {
    spec.validate();
    PointCloud out;
    for (i64 i = 0; i < pc.n(); ++i) {
        bool inside = true;
        for (int a = 0; a < 3; ++a) {
            const double v = pc.xyz[static_cast<std::size_t>(i * 3 + a)];
            if (v < spec.origin[a] || v >= spec.origin[a] + spec.extent[a]) {
                inside = false;
                break;
            }
        }
        if (!inside) continue;
        for (int a = 0; a < 3; ++a) out.xyz.push_back(pc.xyz[static_cast<std::size_t>(i * 3 + a)]);
        out.intensity.push_back(pc.intensity[static_cast<std::size_t>(i)]);
    }
    if (out.n() == 0) throw CheckError("crop_range: no points remain inside the grid range");
    return out;
}

std::vector<VoxelCoord> voxelize(const PointCloud& pc, const VoxelGridSpec& spec) {
    spec.validate();
    std::vector<VoxelCoord> out(static_cast<std::size_t>(pc.n()));
    for (i64 i = 0; i < pc.n(); ++i) {
        VoxelCoord c;
        for (int a = 0; a < 3; ++a) {
            const double v = pc.xyz[static_cast<std::size_t>(i * 3 + a)];
            if (v < spec.origin[a] || v >= spec.origin[a] + spec.extent[a])
                throw CheckError("voxelize: point " + std::to_string(i) + " outside the grid range");
            c[static_cast<std::size_t>(a)] = static_cast<i64>(std::floor((v - spec.origin[a]) / spec.voxel_size[a]));
        }
        out[static_cast<std::size_t>(i)] = c;
    }
    return out;
}

std::vector<double> local_coords(const PointCloud& pc, const VoxelGridSpec& spec) {
    spec.validate();
    std::vector<double> out(static_cast<std::size_t>(pc.n() * 3));
    for (i64 i = 0; i < pc.n(); ++i)
        for (int a = 0; a < 3; ++a) {
            const double v = pc.xyz[static_cast<std::size_t>(i * 3 + a)];
            if (v < spec.origin[a] || v >= spec.origin[a] + spec.extent[a])
                throw CheckError("local_coords: point " + std::to_string(i) + " outside the grid range");
            const double u = (v - spec.origin[a]) / spec.voxel_size[a];
            double frac = u - std::floor(u);
            if (frac >= 1.0) frac = std::nextafter(1.0, 0.0);
            out[static_cast<std::size_t>(i * 3 + a)] = frac;
        }
    return out;
}

bool point_in_box(double px, double py, double pz, const Box3D& box) {
    const double dx = px - box.center[0], dy = py - box.center[1], dz = pz - box.center[2];
    if (std::abs(dz) > box.dims[2] * 0.5) return false;
    const double c = std::cos(box.yaw), s = std::sin(box.yaw);
    const double lx = c * dx + s * dy;
    const double ly = -s * dx + c * dy;
    return std::abs(lx) <= box.dims[0] * 0.5 && std::abs(ly) <= box.dims[1] * 0.5;
}

}  // namespace vx
