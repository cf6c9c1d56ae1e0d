// Copyright Contributors to the refsplat Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <vector>

namespace refsplat {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;

/// Unit quaternions are stored as Vec4 in (w, x, y, z) order.
using Quat = Vec4;

/// Marks a missing depth sample in every depth raster.
inline constexpr double kInvalidDepth = -1.0;

inline bool
is_valid_depth(double d) {
    return d >= 0.0;
}

// ---------------------------------------------------------------------------
// Quaternion helpers

Quat identity_quat();
Quat normalized_quat(const Quat &q);
/// Rotation matrix of q / |q|.
Mat3 quat_to_rotation(const Quat &q);
Quat rotation_to_quat(const Mat3 &R);
/// Hamilton product a * b.
Quat quat_multiply(const Quat &a, const Quat &b);
Quat quat_conjugate(const Quat &q);
/// Flip q onto the hemisphere of `reference` (q and -q encode the same rotation).
Quat quat_align_sign(const Quat &q, const Quat &reference);

// ---------------------------------------------------------------------------
// Rasters

/// Row-major H x W x C grid.
template <typename T> struct Raster {
    int width    = 0;
    int height   = 0;
    int channels = 1;
    std::vector<T> data;

    Raster() = default;
    Raster(int w, int h, int c = 1, T fill = T{})
        : width(w), height(h), channels(c),
          data(static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * c, fill) {}

    std::size_t
    index(int x, int y, int c = 0) const {
        return (static_cast<std::size_t>(y) * width + x) * channels + c;
    }
    T &
    at(int x, int y, int c = 0) {
        return data[index(x, y, c)];
    }
    const T &
    at(int x, int y, int c = 0) const {
        return data[index(x, y, c)];
    }
    std::size_t
    pixel_count() const {
        return static_cast<std::size_t>(width) * height;
    }
    bool
    same_shape(int w, int h) const {
        return width == w && height == h;
    }
};

using Image    = Raster<double>; // channels = 3, values in [0,1]
using DepthMap = Raster<double>; // channels = 1, kInvalidDepth where missing
using Mask     = Raster<std::uint8_t>;

/// Bilinear sample with pixel centers at integer coordinates. Returns
/// kInvalidDepth when the point is outside [-0.5, W-0.5) x [-0.5, H-0.5) or
/// any contributing sample is invalid.
double sample_depth_bilinear(const DepthMap &depth, const Vec2 &pixel);

// ---------------------------------------------------------------------------
// Gaussians

struct Gaussian {
    Vec3 mu        = Vec3::Zero();
    Quat rot       = identity_quat();
    Vec3 scale     = Vec3::Ones();
    double opacity = 1.0;
    Vec3 color     = Vec3::Zero();
    std::int64_t lineage_id = 0;
};

/// R diag(scale^2) R^T.
Mat3 covariance_of(const Gaussian &g);

/// Checks the Gaussian invariants (unit quaternion, positive scale, opacity and
/// color in [0,1]); throws NumericalError naming the violated field.
void validate(const Gaussian &g);

/// Per human Gaussian, whether it was observed in each reference frame.
struct PerGaussianVisibility {
    int num_refs = 0;
    std::vector<std::uint8_t> flags; // gaussian-major, num_refs per gaussian

    bool
    visible(std::size_t gaussian, int ref) const {
        return flags[gaussian * num_refs + ref] != 0;
    }
    std::size_t
    size() const {
        return num_refs == 0 ? 0 : flags.size() / num_refs;
    }
};

/// Human Gaussians replicated across B reference frames plus a shared static
/// background. frames[i][k] for all i describe the same lineage id (index
/// alignment is stronger than multiset equality and is what every mutation
/// preserves).
struct GaussianFrameSet {
    std::vector<double> ref_times;
    std::vector<std::vector<Gaussian>> frames;
    std::vector<Gaussian> background;
    /// child lineage id -> source lineage id (only densified Gaussians appear).
    std::map<std::int64_t, std::int64_t> lineage;
    PerGaussianVisibility visibility;
    /// Per human Gaussian: the keypoint row of the VisibilityMatrix that seeded it.
    std::vector<int> seed_keypoint;

    int
    num_refs() const {
        return static_cast<int>(frames.size());
    }
    std::size_t
    num_human() const {
        return frames.empty() ? 0 : frames.front().size();
    }

    /// Follows the lineage map to the root source of `id`.
    std::int64_t source_of(std::int64_t id) const;

    /// Throws InvalidStateError unless all frames carry identical lineage ids,
    /// ref_times are strictly increasing in [0,1] and side tables have the right size.
    void check_synchronized() const;
};

// ---------------------------------------------------------------------------
// Cameras and priors

struct Camera {
    Mat3 K     = Mat3::Identity();
    Mat4 E     = Mat4::Identity(); // world -> camera
    int width  = 0;
    int height = 0;

    Mat3
    rotation() const {
        return E.block<3, 3>(0, 0);
    }
    Vec3
    translation() const {
        return E.block<3, 1>(0, 3);
    }
    Vec3 to_camera(const Vec3 &world) const;
    Vec3 to_world(const Vec3 &cam) const;
    Vec3 center() const;
    /// Pixel coordinates of a camera-space point (z must be positive).
    Vec2 project_camera(const Vec3 &cam) const;
    /// World point on the ray through `pixel` at camera-space depth z.
    Vec3 unproject(const Vec2 &pixel, double z) const;

    /// Throws DataError(field) when K is not upper triangular with positive
    /// focal lengths or the rotation block is not orthonormal within 1e-9.
    void validate() const;
};

struct FramePriors {
    double t = 0.0;
    Image image;
    Mask mask;
    DepthMap depth_com;
    DepthMap depth_hum;
    std::vector<Vec3> sparse_points;
};

struct KeypointObservation {
    double t     = 0.0;
    Vec2 pixel   = Vec2::Zero();
    bool visible = false;
};

struct KeypointTrack {
    int kp_id   = 0;
    int part_id = 0; // 0 = not on any body part
    Vec2 uv     = Vec2::Zero();
    std::vector<KeypointObservation> obs; // one entry per frame
};

/// vis(k, f) is set when track k is visible in frame f.
struct VisibilityMatrix {
    int keypoints = 0;
    int frames    = 0;
    std::vector<std::uint8_t> vis;

    VisibilityMatrix() = default;
    VisibilityMatrix(int k, int f) : keypoints(k), frames(f), vis(static_cast<std::size_t>(k) * f, 0) {}

    bool
    operator()(int k, int f) const {
        return vis[static_cast<std::size_t>(k) * frames + f] != 0;
    }
    void
    set(int k, int f, bool v) {
        vis[static_cast<std::size_t>(k) * frames + f] = v ? 1 : 0;
    }
};

VisibilityMatrix visibility_of(std::span<const KeypointTrack> tracks, int num_frames);

struct PriorBundle {
    std::vector<Camera> cameras;
    std::vector<FramePriors> frames;
    std::vector<KeypointTrack> tracks;

    std::size_t
    num_frames() const {
        return frames.size();
    }
};

/// Normalized timestamp of frame `index` in a sequence of `count` frames.
double frame_time(int index, int count);

/// Frames reserved for evaluation: every 8th frame starting at index 4.
bool is_held_out(int frame_index);

} // namespace refsplat
