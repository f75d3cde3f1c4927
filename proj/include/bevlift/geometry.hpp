// Copyright (c) 2026 The bevlift Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "bevlift/tensor.hpp"

namespace bev {

using Vec3 = std::array<double, 3>;

// Conventions used throughout: the world frame is right-handed with x right,
// y up (the height axis), z forward. The camera frame matches (x right,
// y up, z = optical axis), so extrinsics are proper rotations and the image
// v axis runs along camera +y. Renderer and sampler share this convention.

/// Pinhole camera: K (3x3 intrinsics, pixels) and E (4x4 world-to-camera).
struct Camera {
    std::array<double, 9> k{};   // row-major
    std::array<double, 16> e{};  // row-major
    int image_h = 0;
    int image_w = 0;

    /// Throws unless K is upper-triangular with positive diagonal and E's
    /// rotation block is orthonormal with det +1 (within 1e-6).
    void validate() const;
};

struct CameraRig {
    std::vector<Camera> cameras;
};

/// Convenience constructor: camera at `position` with heading `yaw` (radians
/// about +y, 0 = facing +z) and `pitch` (radians, positive tilts down).
Camera make_camera(double fx, double fy, double cx, double cy, int image_h, int image_w,
                   const Vec3& position, double yaw, double pitch);

/// Axis-aligned voxel volume. dims = (X, Y, Z) = (width, height, depth)
/// counts; voxel centers sit at min + (index + 0.5) * cell, strictly inside
/// the bounds.
struct VoxelGridSpec {
    int nx = 1, ny = 1, nz = 1;
    Vec3 lo{0, 0, 0};
    Vec3 hi{1, 1, 1};

    double cell_x() const { return (hi[0] - lo[0]) / nx; }
    double cell_y() const { return (hi[1] - lo[1]) / ny; }
    double cell_z() const { return (hi[2] - lo[2]) / nz; }
    std::int64_t num_voxels() const {
        return static_cast<std::int64_t>(nx) * ny * nz;
    }
    /// Flat voxel order is (x-major, then y, then z), matching the
    /// [d, X, Y, Z] layout of the lifted grid.
    std::int64_t voxel_index(int ix, int iy, int iz) const {
        return (static_cast<std::int64_t>(ix) * ny + iy) * nz + iz;
    }
    Vec3 center(int ix, int iy, int iz) const {
        return {lo[0] + (ix + 0.5) * cell_x(), lo[1] + (iy + 0.5) * cell_y(),
                lo[2] + (iz + 0.5) * cell_z()};
    }
    void validate() const;
};

struct Projection {
    double u = 0.0;
    double v = 0.0;
    double depth = 0.0;
    bool degenerate = false;  // |depth| < 1e-9; u, v meaningless
};

/// Perspective projection q = K E p with division by camera-frame depth.
/// The depth is returned unnormalised; callers decide front/behind.
Projection project(const Camera& cam, const Vec3& p);

/// Per-voxel, per-camera continuous feature-grid coordinates with validity
/// flags. Immutable after construction; pure data shared by training and
/// evaluation.
struct SamplingMap {
    int num_cameras = 0;
    std::int64_t num_voxels = 0;
    int feature_h = 0;
    int feature_w = 0;
    double stride = 0.0;
    // layout: [camera][voxel]
    std::vector<float> rows;
    std::vector<float> cols;
    std::vector<std::uint8_t> valid;

    std::int64_t at(int cam, std::int64_t voxel) const { return cam * num_voxels + voxel; }
};

/// Projects every voxel center into every camera and rescales pixels to
/// feature-grid units (cell-center convention: feature cell j covers pixels
/// [j*s, (j+1)*s), center (j+0.5)*s, so coord = pixel/s - 0.5). A sample is
/// valid iff the camera-frame depth is positive and the pixel lands inside
/// the image rectangle. Requires one uniform stride across both axes and all
/// cameras.
SamplingMap build_sampling_map(const CameraRig& rig, const VoxelGridSpec& grid, int feature_h,
                               int feature_w);

/// Same, for an explicit list of 3-d points (voxel order = list order).
SamplingMap build_sampling_map(const CameraRig& rig, const std::vector<Vec3>& points, int image_h,
                               int image_w, int feature_h, int feature_w);

/// Parameter-free 2d-to-3d lifting: each voxel receives the mean of the
/// bilinear samples over its valid cameras (zero when none are valid).
/// features: N maps [d, H_f, W_f]; result: [d, X, Y, Z] with the voxel order
/// of VoxelGridSpec. Differentiable with respect to the features.
Tensor lift(const std::vector<Tensor>& features, const SamplingMap& map, const VoxelGridSpec& grid);

} // namespace bev
