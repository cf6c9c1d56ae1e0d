// Copyright Contributors to the refsplat Project
// SPDX-License-Identifier: Apache-2.0

#include "refsplat/scene_model.hpp"

#include "refsplat/errors.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <string>

namespace refsplat {

Quat
identity_quat() {
    return Quat(1.0, 0.0, 0.0, 0.0);
}

Quat
normalized_quat(const Quat &q) {
    const double n = q.norm();
    if (!(n > 0.0) || !std::isfinite(n)) {
        throw NumericalError("cannot normalize a zero or non-finite quaternion");
    }
    return q / n;
}

Mat3
quat_to_rotation(const Quat &qIn) {
    const Quat q = normalized_quat(qIn);
    const double w = q[0], x = q[1], y = q[2], z = q[3];
    Mat3 R;
    R << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y), //
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x), //
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
    return R;
}

Quat
rotation_to_quat(const Mat3 &R) {
    Eigen::Quaterniond q(R);
    q.normalize();
    Quat out(q.w(), q.x(), q.y(), q.z());
    if (out[0] < 0.0) {
        out = -out;
    }
    return out;
}

Quat
quat_multiply(const Quat &a, const Quat &b) {
    return Quat(a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
                a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
                a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
                a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0]);
}

Quat
quat_conjugate(const Quat &q) {
    return Quat(q[0], -q[1], -q[2], -q[3]);
}

Quat
quat_align_sign(const Quat &q, const Quat &reference) {
    return q.dot(reference) < 0.0 ? Quat(-q) : q;
}

double
sample_depth_bilinear(const DepthMap &depth, const Vec2 &pixel) {
    const double px = pixel.x();
    const double py = pixel.y();
    if (!(px >= -0.5 && py >= -0.5 && px < depth.width - 0.5 && py < depth.height - 0.5)) {
        return kInvalidDepth;
    }
    const double cx = std::clamp(px, 0.0, static_cast<double>(depth.width - 1));
    const double cy = std::clamp(py, 0.0, static_cast<double>(depth.height - 1));
    const int x0    = std::min(static_cast<int>(std::floor(cx)), depth.width - 1);
    const int y0    = std::min(static_cast<int>(std::floor(cy)), depth.height - 1);
    const int x1    = std::min(x0 + 1, depth.width - 1);
    const int y1    = std::min(y0 + 1, depth.height - 1);
    const double fx = cx - x0;
    const double fy = cy - y0;

    double acc = 0.0;
    const int xs[2]    = {x0, x1};
    const int ys[2]    = {y0, y1};
    const double wx[2] = {1.0 - fx, fx};
    const double wy[2] = {1.0 - fy, fy};
    for (int j = 0; j < 2; ++j) {
        for (int i = 0; i < 2; ++i) {
            const double w = wx[i] * wy[j];
            if (w == 0.0) {
                continue;
            }
            const double d = depth.at(xs[i], ys[j]);
            if (!is_valid_depth(d)) {
                return kInvalidDepth;
            }
            acc += w * d;
        }
    }
    return acc;
}

Mat3
covariance_of(const Gaussian &g) {
    const Mat3 R = quat_to_rotation(g.rot);
    const Vec3 s2 = g.scale.array().square();
    return R * s2.asDiagonal() * R.transpose();
}

void
validate(const Gaussian &g) {
    if (std::abs(g.rot.norm() - 1.0) > 1e-9) {
        throw NumericalError("gaussian " + std::to_string(g.lineage_id) + ": rot is not unit norm");
    }
    if (!(g.scale.array() > 0.0).all()) {
        throw NumericalError("gaussian " + std::to_string(g.lineage_id) + ": scale must be positive");
    }
    if (!(g.opacity >= 0.0 && g.opacity <= 1.0)) {
        throw NumericalError("gaussian " + std::to_string(g.lineage_id) + ": opacity outside [0,1]");
    }
    if (!((g.color.array() >= 0.0).all() && (g.color.array() <= 1.0).all())) {
        throw NumericalError("gaussian " + std::to_string(g.lineage_id) + ": color outside [0,1]");
    }
}

std::int64_t
GaussianFrameSet::source_of(std::int64_t id) const {
    // Lineage chains are short (one hop per densification round).
    for (std::size_t guard = 0; guard <= lineage.size(); ++guard) {
        auto it = lineage.find(id);
        if (it == lineage.end()) {
            return id;
        }
        id = it->second;
    }
    throw InvalidStateError("lineage map contains a cycle");
}

void
GaussianFrameSet::check_synchronized() const {
    for (std::size_t i = 0; i < ref_times.size(); ++i) {
        if (ref_times[i] < 0.0 || ref_times[i] > 1.0) {
            throw InvalidStateError("ref_times must lie in [0,1]");
        }
        if (i > 0 && !(ref_times[i] > ref_times[i - 1])) {
            throw InvalidStateError("ref_times must be strictly increasing");
        }
    }
    if (frames.size() != ref_times.size()) {
        throw InvalidStateError("frame count does not match ref_times");
    }
    const std::size_t n = num_human();
    for (const auto &frame : frames) {
        if (frame.size() != n) {
            throw InvalidStateError("reference frames hold different Gaussian counts");
        }
    }
    for (std::size_t k = 0; k < n; ++k) {
        for (const auto &frame : frames) {
            if (frame[k].lineage_id != frames.front()[k].lineage_id) {
                throw InvalidStateError("reference frames disagree on lineage id at index " +
                                        std::to_string(k));
            }
        }
    }
    if (visibility.num_refs != num_refs() || visibility.size() != n) {
        throw InvalidStateError("per-Gaussian visibility does not match the frame set");
    }
    if (seed_keypoint.size() != n) {
        throw InvalidStateError("seed keypoint table does not match the frame set");
    }
}

Vec3
Camera::to_camera(const Vec3 &world) const {
    return rotation() * world + translation();
}

Vec3
Camera::to_world(const Vec3 &cam) const {
    return rotation().transpose() * (cam - translation());
}

Vec3
Camera::center() const {
    return -rotation().transpose() * translation();
}

Vec2
Camera::project_camera(const Vec3 &cam) const {
    const Vec3 h = K * cam;
    return Vec2(h.x() / h.z(), h.y() / h.z());
}

Vec3
Camera::unproject(const Vec2 &pixel, double z) const {
    const Vec3 ray = K.inverse() * Vec3(pixel.x(), pixel.y(), 1.0);
    return to_world(ray * z);
}

void
Camera::validate() const {
    if (K(1, 0) != 0.0 || K(2, 0) != 0.0 || K(2, 1) != 0.0 || K(2, 2) != 1.0) {
        throw DataError("camera", "K", "intrinsics must be upper triangular with K[2][2] = 1");
    }
    if (!(K(0, 0) > 0.0 && K(1, 1) > 0.0)) {
        throw DataError("camera", "K", "focal lengths must be positive");
    }
    const Mat3 R = rotation();
    if ((R * R.transpose() - Mat3::Identity()).cwiseAbs().maxCoeff() > 1e-9 || R.determinant() < 0.0) {
        throw DataError("camera", "E", "rotation block is not orthonormal");
    }
    if (E.row(3) != Eigen::RowVector4d(0, 0, 0, 1)) {
        throw DataError("camera", "E", "last row must be (0,0,0,1)");
    }
    if (width <= 0 || height <= 0) {
        throw DataError("camera", "width/height", "image size must be positive");
    }
}

VisibilityMatrix
visibility_of(std::span<const KeypointTrack> tracks, int num_frames) {
    VisibilityMatrix m(static_cast<int>(tracks.size()), num_frames);
    for (std::size_t k = 0; k < tracks.size(); ++k) {
        const auto &obs = tracks[k].obs;
        for (int f = 0; f < num_frames && f < static_cast<int>(obs.size()); ++f) {
            m.set(static_cast<int>(k), f, obs[f].visible);
        }
    }
    return m;
}

double
frame_time(int index, int count) {
    return count <= 1 ? 0.0 : static_cast<double>(index) / static_cast<double>(count - 1);
}

bool
is_held_out(int frame_index) {
    return frame_index % 8 == 4;
}

} // namespace refsplat
