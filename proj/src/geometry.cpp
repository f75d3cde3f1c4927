// Copyright (c) 2026 The bevlift Authors
// SPDX-License-Identifier: Apache-2.0

#include "bevlift/geometry.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "bevlift/ops.hpp"

namespace bev {

namespace {

constexpr double kDegenerateDepth = 1e-9;

Vec3 cross(const Vec3& a, const Vec3& b) {
    return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}

Vec3 normalize(const Vec3& a) {
    const double n = std::sqrt(a[0] * a[0] + a[1] * a[1] + a[2] * a[2]);
    return {a[0] / n, a[1] / n, a[2] / n};
}

} // namespace

void Camera::validate() const {
    if (image_h <= 0 || image_w <= 0)
        throw std::invalid_argument("camera: image size must be positive");
    if (k[3] != 0.0 || k[6] != 0.0 || k[7] != 0.0)
        throw std::invalid_argument("camera: intrinsics must be upper-triangular");
    if (k[0] <= 0.0 || k[4] <= 0.0 || k[8] <= 0.0)
        throw std::invalid_argument("camera: intrinsics diagonal must be positive");
    // rotation block: R R^T = I and det = +1 within 1e-6
    const double* r = e.data();
    auto row = [&](int i) { return Vec3{r[i * 4 + 0], r[i * 4 + 1], r[i * 4 + 2]}; };
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j) {
            const Vec3 a = row(i), b = row(j);
            const double dot = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
            const double want = i == j ? 1.0 : 0.0;
            if (std::abs(dot - want) > 1e-6)
                throw std::invalid_argument("camera: extrinsics rotation block is not orthonormal");
        }
    }
    const Vec3 r0 = row(0), r1 = row(1), r2 = row(2);
    const Vec3 c12 = cross(r1, r2);
    const double det = r0[0] * c12[0] + r0[1] * c12[1] + r0[2] * c12[2];
    if (std::abs(det - 1.0) > 1e-6)
        throw std::invalid_argument("camera: extrinsics rotation block has det != +1");
}

Camera make_camera(double fx, double fy, double cx, double cy, int image_h, int image_w,
                   const Vec3& position, double yaw, double pitch) {
    Camera cam;
    cam.image_h = image_h;
    cam.image_w = image_w;
    cam.k = {fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0};

    const Vec3 forward = {std::sin(yaw) * std::cos(pitch), -std::sin(pitch),
                          std::cos(yaw) * std::cos(pitch)};
    const Vec3 right = normalize(cross(Vec3{0.0, 1.0, 0.0}, forward));
    const Vec3 up = cross(forward, right);

    const Vec3 rows[3] = {right, up, forward};
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j) cam.e[static_cast<std::size_t>(i * 4 + j)] = rows[i][static_cast<std::size_t>(j)];
        cam.e[static_cast<std::size_t>(i * 4 + 3)] =
            -(rows[i][0] * position[0] + rows[i][1] * position[1] + rows[i][2] * position[2]);
    }
    cam.e[15] = 1.0;
    return cam;
}

void VoxelGridSpec::validate() const {
    if (nx <= 0 || ny <= 0 || nz <= 0)
        throw std::invalid_argument("voxel grid: dims must be positive");
    if (hi[0] <= lo[0] || hi[1] <= lo[1] || hi[2] <= lo[2])
        throw std::invalid_argument("voxel grid: bounds must have positive extent");
}

Projection project(const Camera& cam, const Vec3& p) {
    const double* e = cam.e.data();
    const double xc = e[0] * p[0] + e[1] * p[1] + e[2] * p[2] + e[3];
    const double yc = e[4] * p[0] + e[5] * p[1] + e[6] * p[2] + e[7];
    const double zc = e[8] * p[0] + e[9] * p[1] + e[10] * p[2] + e[11];

    Projection out;
    out.depth = zc;
    if (std::abs(zc) < kDegenerateDepth) {
        out.degenerate = true;
        return out;
    }
    const double* k = cam.k.data();
    out.u = (k[0] * xc + k[1] * yc + k[2] * zc) / zc;
    out.v = (k[4] * yc + k[5] * zc) / zc;
    return out;
}

SamplingMap build_sampling_map(const CameraRig& rig, const std::vector<Vec3>& points, int image_h,
                               int image_w, int feature_h, int feature_w) {
    if (rig.cameras.empty()) throw std::invalid_argument("sampling map: rig has no cameras");
    if (feature_h <= 0 || feature_w <= 0)
        throw std::invalid_argument("sampling map: feature size must be positive");

    const double stride_h = static_cast<double>(image_h) / feature_h;
    const double stride_w = static_cast<double>(image_w) / feature_w;
    if (std::abs(stride_h - stride_w) > 1e-9)
        throw std::invalid_argument("sampling map: non-uniform stride (" + std::to_string(stride_h) +
                                    " vs " + std::to_string(stride_w) + ")");
    for (const auto& cam : rig.cameras) {
        if (cam.image_h != image_h || cam.image_w != image_w)
            throw std::invalid_argument("sampling map: cameras disagree on image size");
    }
    const double stride = stride_h;

    SamplingMap map;
    map.num_cameras = static_cast<int>(rig.cameras.size());
    map.num_voxels = static_cast<std::int64_t>(points.size());
    map.feature_h = feature_h;
    map.feature_w = feature_w;
    map.stride = stride;
    const std::int64_t total = map.num_cameras * map.num_voxels;
    map.rows.assign(static_cast<std::size_t>(total), 0.0f);
    map.cols.assign(static_cast<std::size_t>(total), 0.0f);
    map.valid.assign(static_cast<std::size_t>(total), 0);

    for (int c = 0; c < map.num_cameras; ++c) {
        const Camera& cam = rig.cameras[static_cast<std::size_t>(c)];
        for (std::int64_t i = 0; i < map.num_voxels; ++i) {
            const Projection pr = project(cam, points[static_cast<std::size_t>(i)]);
            if (pr.degenerate || pr.depth <= 0.0) continue;
            if (pr.u < 0.0 || pr.u >= image_w || pr.v < 0.0 || pr.v >= image_h) continue;
            const std::int64_t at = map.at(c, i);
            map.rows[static_cast<std::size_t>(at)] = static_cast<float>(pr.v / stride - 0.5);
            map.cols[static_cast<std::size_t>(at)] = static_cast<float>(pr.u / stride - 0.5);
            map.valid[static_cast<std::size_t>(at)] = 1;
        }
    }
    return map;
}

SamplingMap build_sampling_map(const CameraRig& rig, const VoxelGridSpec& grid, int feature_h,
                               int feature_w) {
    grid.validate();
    if (rig.cameras.empty()) throw std::invalid_argument("sampling map: rig has no cameras");
    std::vector<Vec3> centers;
    centers.reserve(static_cast<std::size_t>(grid.num_voxels()));
    for (int ix = 0; ix < grid.nx; ++ix)
        for (int iy = 0; iy < grid.ny; ++iy)
            for (int iz = 0; iz < grid.nz; ++iz) centers.push_back(grid.center(ix, iy, iz));
    return build_sampling_map(rig, centers, rig.cameras[0].image_h, rig.cameras[0].image_w,
                              feature_h, feature_w);
}

Tensor lift(const std::vector<Tensor>& features, const SamplingMap& map, const VoxelGridSpec& grid) {
    if (static_cast<int>(features.size()) != map.num_cameras)
        throw std::invalid_argument("lift: got " + std::to_string(features.size()) +
                                    " feature maps for " + std::to_string(map.num_cameras) +
                                    " cameras");
    if (grid.num_voxels() != map.num_voxels)
        throw std::invalid_argument("lift: sampling map voxel count does not match grid");
    const int d = features[0].dim(0);
    for (const auto& f : features) {
        if (f.rank() != 3 || f.dim(0) != d || f.dim(1) != map.feature_h || f.dim(2) != map.feature_w)
            throw std::invalid_argument("lift: feature map shape " + shape_str(f.shape()) +
                                        " does not match [d=" + std::to_string(d) + ", " +
                                        std::to_string(map.feature_h) + ", " +
                                        std::to_string(map.feature_w) + "]");
    }

    const int fh = map.feature_h, fw = map.feature_w;
    const std::int64_t nvox = map.num_voxels;
    const int ncam = map.num_cameras;

    // channel-last copies of the feature maps for contiguous gathers
    std::vector<std::vector<float>> fcl(static_cast<std::size_t>(ncam));
    for (int c = 0; c < ncam; ++c) {
        fcl[static_cast<std::size_t>(c)].resize(static_cast<std::size_t>(d) * fh * fw);
        detail::permute_copy(features[static_cast<std::size_t>(c)].ptr(),
                             fcl[static_cast<std::size_t>(c)].data(), {d, fh, fw}, {1, 2, 0});
    }

    std::vector<float> out_cl(static_cast<std::size_t>(nvox * d), 0.0f);
    for (std::int64_t vox = 0; vox < nvox; ++vox) {
        float* acc = out_cl.data() + vox * d;
        int n_valid = 0;
        for (int c = 0; c < ncam; ++c) {
            const std::int64_t at = map.at(c, vox);
            if (!map.valid[static_cast<std::size_t>(at)]) continue;
            ++n_valid;
            const float r = map.rows[static_cast<std::size_t>(at)];
            const float cc = map.cols[static_cast<std::size_t>(at)];
            if (r < 0.0f || r > static_cast<float>(fh - 1) || cc < 0.0f ||
                cc > static_cast<float>(fw - 1))
                continue;  // zero-padding band inside a valid camera
            const int r0 = std::min(static_cast<int>(r), fh - 1);
            const int c0 = std::min(static_cast<int>(cc), fw - 1);
            const int r1 = std::min(r0 + 1, fh - 1);
            const int c1 = std::min(c0 + 1, fw - 1);
            const float dr = r - static_cast<float>(r0), dc = cc - static_cast<float>(c0);
            const float w00 = (1.0f - dr) * (1.0f - dc), w01 = (1.0f - dr) * dc;
            const float w10 = dr * (1.0f - dc), w11 = dr * dc;
            const float* f = fcl[static_cast<std::size_t>(c)].data();
            const float* p00 = f + (static_cast<std::int64_t>(r0) * fw + c0) * d;
            const float* p01 = f + (static_cast<std::int64_t>(r0) * fw + c1) * d;
            const float* p10 = f + (static_cast<std::int64_t>(r1) * fw + c0) * d;
            const float* p11 = f + (static_cast<std::int64_t>(r1) * fw + c1) * d;
            for (int ch = 0; ch < d; ++ch)
                acc[ch] += w00 * p00[ch] + w01 * p01[ch] + w10 * p10[ch] + w11 * p11[ch];
        }
        if (n_valid > 1) {
            const float inv = 1.0f / static_cast<float>(n_valid);
            for (int ch = 0; ch < d; ++ch) acc[ch] *= inv;
        }
    }

    Tensor out({d, grid.nx, grid.ny, grid.nz});
    // out_cl is [X, Y, Z, d]; move channels to the front
    detail::permute_copy(out_cl.data(), out.ptr(), {grid.nx, grid.ny, grid.nz, d}, {3, 0, 1, 2});

    // The backward closure may outlive the caller's SamplingMap.
    auto map_copy = std::make_shared<SamplingMap>(map);
    autodiff::attach<float>(out, "lift", features, [features, map_copy, d, fh, fw, nvox, ncam](TensorImpl<float>& o) {
        const SamplingMap& map = *map_copy;
        // grad arrives as [d, X, Y, Z]; gather per voxel from channel-last
        std::vector<float> g_cl(static_cast<std::size_t>(nvox * d));
        Shape gshape = o.shape;
        detail::permute_copy(o.grad.data(), g_cl.data(), gshape, {1, 2, 3, 0});

        // per-voxel valid counts are recomputed; cheap next to the scatter
        std::vector<float> gf_cl(static_cast<std::size_t>(d) * fh * fw);
        for (int c = 0; c < ncam; ++c) {
            auto fi = features[static_cast<std::size_t>(c)].impl();
            if (!fi->needs_grad) continue;
            autodiff::ensure_grad(*fi);
            std::fill(gf_cl.begin(), gf_cl.end(), 0.0f);
            for (std::int64_t vox = 0; vox < nvox; ++vox) {
                int n_valid = 0;
                for (int c2 = 0; c2 < ncam; ++c2)
                    n_valid += map.valid[static_cast<std::size_t>(map.at(c2, vox))];
                const std::int64_t at = map.at(c, vox);
                if (!map.valid[static_cast<std::size_t>(at)] || n_valid == 0) continue;
                const float r = map.rows[static_cast<std::size_t>(at)];
                const float cc = map.cols[static_cast<std::size_t>(at)];
                if (r < 0.0f || r > static_cast<float>(fh - 1) || cc < 0.0f ||
                    cc > static_cast<float>(fw - 1))
                    continue;
                const int r0 = std::min(static_cast<int>(r), fh - 1);
                const int c0 = std::min(static_cast<int>(cc), fw - 1);
                const int r1 = std::min(r0 + 1, fh - 1);
                const int c1 = std::min(c0 + 1, fw - 1);
                const float dr = r - static_cast<float>(r0), dc = cc - static_cast<float>(c0);
                const float inv = 1.0f / static_cast<float>(n_valid);
                const float w00 = (1.0f - dr) * (1.0f - dc) * inv, w01 = (1.0f - dr) * dc * inv;
                const float w10 = dr * (1.0f - dc) * inv, w11 = dr * dc * inv;
                const float* gv = g_cl.data() + vox * d;
                float* p00 = gf_cl.data() + (static_cast<std::int64_t>(r0) * fw + c0) * d;
                float* p01 = gf_cl.data() + (static_cast<std::int64_t>(r0) * fw + c1) * d;
                float* p10 = gf_cl.data() + (static_cast<std::int64_t>(r1) * fw + c0) * d;
                float* p11 = gf_cl.data() + (static_cast<std::int64_t>(r1) * fw + c1) * d;
                for (int ch = 0; ch < d; ++ch) {
                    const float g = gv[ch];
                    p00[ch] += w00 * g;
                    p01[ch] += w01 * g;
                    p10[ch] += w10 * g;
                    p11[ch] += w11 * g;
                }
            }
            // back to [d, H_f, W_f], accumulating
            detail::permute_copy(gf_cl.data(), fi->grad.data(), {d, fh, fw}, {1, 2, 0}, true);
        }
    });
    return out;
}

} // namespace bev
