// Copyright Contributors to the refsplat Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "refsplat/scene_model.hpp"

#include <json.hpp>

#include <cstdint>
#include <string>
#include <vector>

namespace refsplat {

enum class MotionType { Static, RigidTranslation, SinusoidalBend, TwoSegmentArticulation };

/// "static", "rigid-translation", "sinusoidal-bend", "two-segment-articulation".
MotionType parse_motion(const std::string &name);
std::string motion_name(MotionType motion);

/// A two-part cylindrical figure (lower part id 1, upper part id 2) standing in
/// front of a textured wall and floor, seen by a camera on a horizontal arc.
struct SynthConfig {
    int frames        = 16;
    int width         = 64;
    int height        = 64;
    MotionType motion = MotionType::SinusoidalBend;
    int human_lattice = 16; // points per part side; 2 * lattice^2 human points
    int background_points = 2000;
    double focal          = 88.0;
    double orbit_degrees  = 30.0; // total arc swept over the sequence
    double orbit_radius   = 4.0;
    double camera_height  = 1.0;
    double motion_amplitude = 0.5; // translation distance, bend tip offset, or joint angle in radians
    double depth_scale      = 2.0; // planted D_com affine: true = scale * D_com + shift
    double depth_shift      = 0.5;
    double depth_noise      = 0.01;
    double outlier_fraction = 0.0; // of D_com pixels replaced by uniform values
    double keypoint_dropout = 0.0; // of keypoint observations hidden at random
    int sparse_points_per_frame = 150;
    std::uint64_t seed = 0;

    /// Defaults for a motion type; the static preset also holds the camera still.
    static SynthConfig preset(MotionType motion);

    /// Throws ConfigError for fractions outside [0,1) or fewer than 2 frames.
    void validate() const;
};

struct GroundTruth {
    std::vector<std::vector<Vec3>> human_positions; // [frame][point]; point index = keypoint id
    std::vector<std::vector<Gaussian>> human;        // [frame][point]
    std::vector<Gaussian> background;
    std::vector<DepthMap> depth; // median scene depth, invalid where alpha never reaches 0.5
    double hum_scale = 1.0;      // planted D_hum affine: true = hum_scale * D_hum + hum_shift
    double hum_shift = 0.0;

    nlohmann::json to_json(const SynthConfig &config) const;
};

/// Largest displacement of any human point from its first-frame position.
double motion_magnitude(const GroundTruth &truth);

struct SynthScene {
    PriorBundle bundle;
    GroundTruth truth;
};

SynthScene generate(const SynthConfig &config);

/// World-to-camera transform of a camera at `center` looking at `target` with
/// +y world up (x right, y down, z forward in camera space).
Mat4 look_at(const Vec3 &center, const Vec3 &target);

} // namespace refsplat
