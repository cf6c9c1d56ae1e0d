// Copyright Contributors to the refsplat Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "refsplat/rasterizer.hpp"
#include "refsplat/scene_model.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

namespace refsplat::test {

/// Camera at the origin looking down +z, principal point at the image center.
inline Camera
front_camera(int w, int h, double f) {
    Camera c;
    c.K       = Mat3::Identity();
    c.K(0, 0) = f;
    c.K(1, 1) = f;
    c.K(0, 2) = 0.5 * w - 0.5;
    c.K(1, 2) = 0.5 * h - 0.5;
    c.width   = w;
    c.height  = h;
    return c;
}

inline Quat
random_quat(std::mt19937_64 &rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    Quat q(n(rng), n(rng), n(rng), n(rng));
    return q / q.norm();
}

/// Gaussians in front of front_camera(16, 16, 16), mostly on screen.
inline std::vector<Gaussian>
random_scene(std::size_t count, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<Gaussian> out(count);
    for (std::size_t i = 0; i < count; ++i) {
        Gaussian &g = out[i];
        const double z = 2.0 + 2.0 * u(rng);
        g.mu           = Vec3((u(rng) - 0.5) * 0.8 * z, (u(rng) - 0.5) * 0.8 * z, z);
        g.rot          = random_quat(rng);
        g.scale        = Vec3(0.1 + 0.2 * u(rng), 0.1 + 0.2 * u(rng), 0.1 + 0.2 * u(rng));
        g.opacity      = 0.2 + 0.6 * u(rng);
        g.color        = Vec3(u(rng), u(rng), u(rng));
        g.lineage_id   = static_cast<std::int64_t>(i);
    }
    return out;
}

/// Central difference of f at x along every coordinate.
inline std::vector<double>
central_differences(std::vector<double> x, const std::function<double(const std::vector<double> &)> &f, double h) {
    std::vector<double> g(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double x0 = x[i];
        x[i]            = x0 + h;
        const double fp = f(x);
        x[i]            = x0 - h;
        const double fm = f(x);
        x[i]            = x0;
        g[i]            = (fp - fm) / (2.0 * h);
    }
    return g;
}

/// |a - b| / max(|a|, |b|, floor): relative where gradients are sizable,
/// absolute (scaled by 1/floor) where both are tiny.
inline double
relative_error(double a, double b, double floor = 1e-2) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

inline double
max_relative_error(const std::vector<double> &a, const std::vector<double> &b, double floor = 1e-2) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        m = std::max(m, relative_error(a[i], b[i], floor));
    }
    return m;
}

inline Image
random_image(int w, int h, std::uint64_t seed, int channels = 3) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Image img(w, h, channels);
    for (auto &v : img.data) {
        v = u(rng);
    }
    return img;
}

/// Flattens (mu, rot, scale, opacity, color) of every Gaussian, 14 per Gaussian.
inline std::vector<double>
pack(const std::vector<Gaussian> &gs) {
    std::vector<double> x;
    for (const auto &g : gs) {
        x.insert(x.end(), g.mu.data(), g.mu.data() + 3);
        x.insert(x.end(), g.rot.data(), g.rot.data() + 4);
        x.insert(x.end(), g.scale.data(), g.scale.data() + 3);
        x.push_back(g.opacity);
        x.insert(x.end(), g.color.data(), g.color.data() + 3);
    }
    return x;
}

inline std::vector<Gaussian>
unpack(const std::vector<double> &x, std::vector<Gaussian> gs) {
    std::size_t k = 0;
    for (auto &g : gs) {
        for (int i = 0; i < 3; ++i) g.mu[i] = x[k++];
        for (int i = 0; i < 4; ++i) g.rot[i] = x[k++];
        for (int i = 0; i < 3; ++i) g.scale[i] = x[k++];
        g.opacity = x[k++];
        for (int i = 0; i < 3; ++i) g.color[i] = x[k++];
    }
    return gs;
}

inline std::vector<double>
pack(const GaussianGradients &gr) {
    std::vector<double> x;
    for (std::size_t i = 0; i < gr.size(); ++i) {
        x.insert(x.end(), gr.mu[i].data(), gr.mu[i].data() + 3);
        x.insert(x.end(), gr.rot[i].data(), gr.rot[i].data() + 4);
        x.insert(x.end(), gr.scale[i].data(), gr.scale[i].data() + 3);
        x.push_back(gr.opacity[i]);
        x.insert(x.end(), gr.color[i].data(), gr.color[i].data() + 3);
    }
    return x;
}

/// B reference frames of N related human Gaussians plus a few background ones.
/// Slot (k, i) is invisible with probability `hidden`, but every Gaussian keeps
/// at least one visible slot.
inline GaussianFrameSet
random_frame_set(int B, std::size_t N, std::uint64_t seed, double hidden = 0.0) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const auto base = random_scene(N, seed + 100);
    GaussianFrameSet fs;
    for (int i = 0; i < B; ++i) {
        fs.ref_times.push_back(B == 1 ? 0.0 : static_cast<double>(i) / (B - 1));
        auto frame = base;
        for (auto &g : frame) {
            g.mu += Vec3(u(rng) - 0.5, u(rng) - 0.5, u(rng) - 0.5) * 0.2;
            g.rot   = random_quat(rng);
            g.scale = g.scale.cwiseProduct(Vec3(0.8 + 0.4 * u(rng), 0.8 + 0.4 * u(rng), 0.8 + 0.4 * u(rng)));
        }
        fs.frames.push_back(frame);
    }
    fs.background = random_scene(3, seed + 200);
    for (std::size_t k = 0; k < fs.background.size(); ++k) {
        fs.background[k].lineage_id = static_cast<std::int64_t>(N + k);
    }
    fs.visibility.num_refs = B;
    fs.visibility.flags.assign(N * B, 1);
    for (std::size_t k = 0; k < N; ++k) {
        for (int i = 1; i < B; ++i) {
            fs.visibility.flags[k * B + i] = u(rng) < hidden ? 0 : 1;
        }
        if (u(rng) < hidden && B > 1) {
            fs.visibility.flags[k * B] = 0;
            fs.visibility.flags[k * B + 1] = 1;
        }
        fs.seed_keypoint.push_back(static_cast<int>(k));
    }
    return fs;
}

} // namespace refsplat::test
