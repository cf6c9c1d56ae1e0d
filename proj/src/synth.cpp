// Copyright Contributors to the refsplat Project
// SPDX-License-Identifier: Apache-2.0

#include "refsplat/synth.hpp"

#include "refsplat/errors.hpp"
#include "refsplat/rasterizer.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

namespace refsplat {

using nlohmann::json;

namespace {

constexpr double kPi          = std::numbers::pi;
constexpr double kHumanRadius = 0.25;
constexpr double kHumanSigma  = 0.07;
constexpr double kPartHeight  = 1.0;
constexpr double kOpacity     = 0.99;
constexpr double kFlatness    = 0.15; // wall and floor splat thickness relative to sigma
constexpr double kWallZ       = -2.5;
constexpr double kFloorFrontZ = 3.0;
constexpr double kHalfWidth   = 5.5;
constexpr double kWallTop     = 4.0;
constexpr double kOcclusionPx = 1.5;
constexpr double kSurfaceTolerance = 0.5 * kHumanSigma;

struct HumanPoint {
    int part = 1;
    double u = 0.0;
    double v = 0.0;
    Vec3 rest;
    Vec3 color;
};

std::vector<HumanPoint>
human_points(int n) {
    std::vector<HumanPoint> pts(static_cast<std::size_t>(2 * n * n));
    for (int part = 1; part <= 2; ++part) {
        for (int row = 0; row < n; ++row) {
            for (int col = 0; col < n; ++col) {
                HumanPoint p;
                p.part             = part;
                p.u                = (col + 0.5) / n;
                p.v                = (row + 0.5) / n;
                const double theta = 2.0 * kPi * p.u;
                const double y     = (part - 1) * kPartHeight + p.v * kPartHeight;
                p.rest             = Vec3(kHumanRadius * std::sin(theta), y, kHumanRadius * std::cos(theta));
                if (part == 1) {
                    p.color = Vec3(0.2 + 0.15 * std::cos(theta), 0.35 + 0.3 * p.v, 0.8 - 0.1 * std::sin(theta));
                } else {
                    p.color = Vec3(0.85 - 0.1 * p.v, 0.3 + 0.25 * p.v, 0.25 + 0.15 * std::sin(theta));
                }
                pts[static_cast<std::size_t>((part - 1) * n * n + row * n + col)] = p;
            }
        }
    }
    return pts;
}

Vec3
move(const HumanPoint &p, double t, MotionType motion, double amp) {
    Vec3 x = p.rest;
    switch (motion) {
    case MotionType::Static:
        break;
    case MotionType::RigidTranslation:
        x.x() += amp * t;
        break;
    case MotionType::SinusoidalBend: {
        const double h = x.y() / (2.0 * kPartHeight);
        x.x() += amp * std::sin(2.0 * kPi * t) * h * h;
        break;
    }
    case MotionType::TwoSegmentArticulation:
        if (p.part == 2) {
            const double a = amp * std::sin(kPi * t);
            const Vec3 j(0.0, kPartHeight, 0.0);
            const Vec3 d = x - j;
            x = j + Vec3(std::cos(a) * d.x() - std::sin(a) * d.y(), std::sin(a) * d.x() + std::cos(a) * d.y(), d.z());
        }
        break;
    }
    return x;
}

Vec3
wall_color(double x, double y) {
    return Vec3(0.55 + 0.25 * std::sin(1.3 * x), 0.5 + 0.2 * std::sin(1.7 * y + 0.5), 0.45 + 0.2 * std::cos(0.9 * x + 1.1 * y));
}

Vec3
floor_color(double x, double z) {
    return Vec3(0.4 + 0.15 * std::cos(1.1 * x), 0.45 + 0.2 * std::sin(0.8 * z), 0.3 + 0.1 * std::sin(1.5 * x + 0.7 * z));
}

std::vector<Gaussian>
background_gaussians(int count, std::int64_t firstId) {
    const double wallArea  = 2.0 * kHalfWidth * kWallTop;
    const double floorArea = 2.0 * kHalfWidth * (kFloorFrontZ - kWallZ);
    const double h         = std::sqrt((wallArea + floorArea) / std::max(count, 1));
    const double sigma     = 0.7 * h;
    std::vector<Gaussian> out;
    auto add = [&](const Vec3 &p, const Vec3 &c, int normalAxis) {
        Gaussian g;
        g.mu                = p;
        g.scale             = Vec3::Constant(sigma);
        g.scale[normalAxis] = kFlatness * sigma;
        g.opacity    = kOpacity;
        g.color      = c.cwiseMax(0.0).cwiseMin(1.0);
        g.lineage_id = firstId + static_cast<std::int64_t>(out.size());
        out.push_back(g);
    };
    for (double y = 0.5 * h; y < kWallTop; y += h) {
        for (double x = -kHalfWidth; x <= kHalfWidth; x += h) {
            add(Vec3(x, y, kWallZ), wall_color(x, y), 2);
        }
    }
    for (double z = kWallZ + h; z <= kFloorFrontZ; z += h) {
        for (double x = -kHalfWidth; x <= kHalfWidth; x += h) {
            add(Vec3(x, 0.0, z), floor_color(x, z), 1);
        }
    }
    return out;
}

} // namespace

MotionType
parse_motion(const std::string &name) {
    if (name == "static") {
        return MotionType::Static;
    }
    if (name == "rigid-translation") {
        return MotionType::RigidTranslation;
    }
    if (name == "sinusoidal-bend") {
        return MotionType::SinusoidalBend;
    }
    if (name == "two-segment-articulation") {
        return MotionType::TwoSegmentArticulation;
    }
    throw ConfigError("unknown motion type '" + name + "'");
}

std::string
motion_name(MotionType m) {
    switch (m) {
    case MotionType::Static:
        return "static";
    case MotionType::RigidTranslation:
        return "rigid-translation";
    case MotionType::SinusoidalBend:
        return "sinusoidal-bend";
    case MotionType::TwoSegmentArticulation:
        return "two-segment-articulation";
    }
    return "static";
}

SynthConfig
SynthConfig::preset(MotionType motion) {
    SynthConfig c;
    c.motion = motion;
    if (motion == MotionType::Static) {
        c.orbit_degrees = 0.0;
    }
    return c;
}

void
SynthConfig::validate() const {
    if (frames < 2) {
        throw ConfigError("synth.frames must be at least 2");
    }
    if (width < 8 || height < 8) {
        throw ConfigError("synth image size must be at least 8x8");
    }
    if (human_lattice < 2 || background_points < 1 || sparse_points_per_frame < 0) {
        throw ConfigError("synth point counts out of range");
    }
    for (double f : {outlier_fraction, keypoint_dropout}) {
        if (!(f >= 0.0 && f < 1.0)) {
            throw ConfigError("synth fractions must lie in [0,1)");
        }
    }
    if (!(focal > 0.0) || !(orbit_radius > 0.0) || !(depth_scale > 0.0) || depth_noise < 0.0) {
        throw ConfigError("synth focal, orbit radius and depth scale must be positive");
    }
}

Mat4
look_at(const Vec3 &center, const Vec3 &target) {
    const Vec3 forward = (target - center).normalized();
    const Vec3 right   = forward.cross(Vec3::UnitY()).normalized();
    const Vec3 down    = forward.cross(right);
    Mat3 R;
    R.row(0) = right.transpose();
    R.row(1) = down.transpose();
    R.row(2) = forward.transpose();
    Mat4 E               = Mat4::Identity();
    E.block<3, 3>(0, 0)  = R;
    E.block<3, 1>(0, 3)  = -R * center;
    return E;
}

double
motion_magnitude(const GroundTruth &truth) {
    double m = 0.0;
    for (const auto &frame : truth.human_positions) {
        for (std::size_t k = 0; k < frame.size(); ++k) {
            m = std::max(m, (frame[k] - truth.human_positions.front()[k]).norm());
        }
    }
    return m;
}

json
GroundTruth::to_json(const SynthConfig &c) const {
    json pos = json::array();
    for (const auto &frame : human_positions) {
        json f = json::array();
        for (const auto &p : frame) {
            f.push_back({p.x(), p.y(), p.z()});
        }
        pos.push_back(f);
    }
    return {{"motion", motion_name(c.motion)},
            {"frames", c.frames},
            {"seed", c.seed},
            {"depth_affine", {{"scale", c.depth_scale}, {"shift", c.depth_shift}}},
            {"human_depth_affine", {{"scale", hum_scale}, {"shift", hum_shift}}},
            {"motion_magnitude", motion_magnitude(*this)},
            {"human_count", human_positions.empty() ? 0 : human_positions.front().size()},
            {"background_count", background.size()},
            {"human_positions", pos}};
}

SynthScene
generate(const SynthConfig &c) {
    c.validate();
    std::mt19937_64 rng(c.seed * 0x9e3779b97f4a7c15ULL + 17);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    std::normal_distribution<double> normal(0.0, 1.0);

    SynthScene out;
    auto &truth = out.truth;
    auto &b     = out.bundle;

    const auto points = human_points(c.human_lattice);
    const std::size_t H = points.size();
    truth.background    = background_gaussians(c.background_points, static_cast<std::int64_t>(H));
    truth.hum_scale     = 0.5 + uni(rng);
    truth.hum_shift     = uni(rng);

    const Vec3 target(0.0, kPartHeight, 0.0);
    Mat3 K   = Mat3::Identity();
    K(0, 0)  = c.focal;
    K(1, 1)  = c.focal;
    K(0, 2)  = 0.5 * c.width - 0.5;
    K(1, 2)  = 0.5 * c.height - 0.5;

    for (int f = 0; f < c.frames; ++f) {
        const double t   = frame_time(f, c.frames);
        const double phi = (-0.5 * c.orbit_degrees + c.orbit_degrees * t) * kPi / 180.0;
        Camera cam;
        cam.K      = K;
        cam.E      = look_at(Vec3(c.orbit_radius * std::sin(phi), c.camera_height, c.orbit_radius * std::cos(phi)), target);
        cam.width  = c.width;
        cam.height = c.height;
        b.cameras.push_back(cam);

        std::vector<Vec3> pos(H);
        std::vector<Gaussian> human(H);
        for (std::size_t k = 0; k < H; ++k) {
            pos[k]             = move(points[k], t, c.motion, c.motion_amplitude);
            human[k].mu        = pos[k];
            human[k].scale     = Vec3::Constant(kHumanSigma);
            human[k].opacity   = kOpacity;
            human[k].color     = points[k].color.cwiseMax(0.0).cwiseMin(1.0);
            human[k].lineage_id = static_cast<std::int64_t>(k);
        }
        truth.human_positions.push_back(pos);
        truth.human.push_back(human);

        std::vector<Gaussian> scene = human;
        scene.insert(scene.end(), truth.background.begin(), truth.background.end());
        const RenderOutput full = render_gaussians(scene, cam);
        const RenderOutput hum  = render_gaussians(human, cam);
        const DepthMap depth    = full.median_depth;
        const DepthMap hdepth   = hum.median_depth;
        truth.depth.push_back(depth);

        FramePriors fr;
        fr.t     = t;
        fr.image = full.rgb;
        fr.mask  = Mask(c.width, c.height, 1, 0);
        // The mask covers the visible human only: pixels where the human is the front surface.
        for (std::size_t p = 0; p < fr.mask.data.size(); ++p) {
            const bool front = is_valid_depth(depth.data[p]) && depth.data[p] >= hdepth.data[p] - 1e-9;
            fr.mask.data[p]  = hum.alpha.data[p] > 0.5 && front ? 255 : 0;
        }

        fr.depth_com = DepthMap(c.width, c.height, 1, kInvalidDepth);
        double comMax = 0.0;
        for (std::size_t p = 0; p < depth.data.size(); ++p) {
            if (is_valid_depth(depth.data[p])) {
                const double v     = (depth.data[p] - c.depth_shift) / c.depth_scale + c.depth_noise * normal(rng);
                fr.depth_com.data[p] = std::max(v, 0.0);
                comMax             = std::max(comMax, fr.depth_com.data[p]);
            }
        }
        for (auto &v : fr.depth_com.data) {
            if (is_valid_depth(v) && uni(rng) < c.outlier_fraction) {
                v = comMax * uni(rng);
            }
        }

        fr.depth_hum = DepthMap(c.width, c.height, 1, kInvalidDepth);
        for (std::size_t p = 0; p < hdepth.data.size(); ++p) {
            if (fr.mask.data[p] != 0 && is_valid_depth(hdepth.data[p])) {
                fr.depth_hum.data[p] = std::max((hdepth.data[p] - truth.hum_shift) / truth.hum_scale, 0.0);
            }
        }

        // Sparse points: background pixel centers lifted through the true depth.
        std::vector<int> candidates;
        for (int p = 0; p < static_cast<int>(depth.data.size()); ++p) {
            if (fr.mask.data[p] == 0 && hum.alpha.data[p] < 0.01 && is_valid_depth(depth.data[p])) {
                candidates.push_back(p);
            }
        }
        const std::size_t take = std::min<std::size_t>(candidates.size(), static_cast<std::size_t>(c.sparse_points_per_frame));
        for (std::size_t i = 0; i < take; ++i) {
            std::uniform_int_distribution<std::size_t> pick(i, candidates.size() - 1);
            std::swap(candidates[i], candidates[pick(rng)]);
            const int p = candidates[i];
            const Vec2 px(p % c.width, p / c.width);
            fr.sparse_points.push_back(cam.unproject(px, depth.data[p]));
        }
        b.frames.push_back(std::move(fr));
    }

    // Keypoint tracks: projected human points with occlusion, mask and dropout tests.
    b.tracks.resize(H);
    for (std::size_t k = 0; k < H; ++k) {
        auto &tr   = b.tracks[k];
        tr.kp_id   = static_cast<int>(k);
        tr.part_id = points[k].part;
        tr.uv      = Vec2(points[k].u, points[k].v);
        tr.obs.resize(c.frames);
    }
    for (int f = 0; f < c.frames; ++f) {
        const Camera &cam = b.cameras[f];
        const auto &mask  = b.frames[f].mask;
        std::vector<Vec2> px(H);
        std::vector<double> z(H);
        for (std::size_t k = 0; k < H; ++k) {
            const Vec3 cp = cam.to_camera(truth.human_positions[f][k]);
            z[k]          = cp.z();
            px[k]         = cam.project_camera(cp);
        }
        // Surface depth of the human alone, for the z-buffer half of the occlusion test.
        std::vector<Gaussian> human = truth.human[f];
        const DepthMap hdepth       = render_gaussians(human, cam).median_depth;
        const double margin         = 2.0 * kHumanSigma;
        for (std::size_t k = 0; k < H; ++k) {
            auto &o   = b.tracks[k].obs[f];
            o.t       = b.frames[f].t;
            o.pixel   = px[k];
            o.visible = false;
            if (!(z[k] > 0.0) || !(px[k].x() >= 0.0 && px[k].x() <= c.width - 1.0 && px[k].y() >= 0.0 &&
                                   px[k].y() <= c.height - 1.0)) {
                continue;
            }
            // Detections exist only where the 2x2 pixel neighborhood lies inside the mask.
            const int x0 = static_cast<int>(std::floor(px[k].x()));
            const int y0 = static_cast<int>(std::floor(px[k].y()));
            bool inMask  = true;
            for (int dy = 0; dy <= 1; ++dy) {
                for (int dx = 0; dx <= 1; ++dx) {
                    const int xx = std::min(x0 + dx, c.width - 1), yy = std::min(y0 + dy, c.height - 1);
                    inMask       = inMask && mask.at(xx, yy) != 0;
                }
            }
            if (!inMask) {
                continue;
            }
            bool occluded = false;
            for (std::size_t j = 0; j < H && !occluded; ++j) {
                occluded = j != k && (px[j] - px[k]).norm() < kOcclusionPx && z[j] < z[k] - margin;
            }
            // The detection must sit on the visible surface, which also rejects grazing silhouette points.
            const double surface = sample_depth_bilinear(hdepth, px[k]);
            occluded = occluded || !is_valid_depth(surface) || std::abs(z[k] - surface) > kSurfaceTolerance;
            const bool dropped   = uni(rng) < c.keypoint_dropout;
            o.visible            = !occluded && !dropped;
        }
    }
    return out;
}

} // namespace refsplat
