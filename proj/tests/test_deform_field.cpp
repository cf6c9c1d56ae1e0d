// Copyright Contributors to the refsplat Project
// SPDX-License-Identifier: Apache-2.0

#include "test_util.hpp"

#include "refsplat/deform_field.hpp"
#include "refsplat/errors.hpp"

#include <gtest/gtest.h>

using namespace refsplat;
using namespace refsplat::test;

namespace {

DeformOutput
random_net_output(int B, Eigen::Index n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    DeformOutput o = DeformOutput::zeros(B, n);
    for (Eigen::Index k = 0; k < n; ++k) {
        double sum = 0.0;
        for (int i = 0; i < B; ++i) {
            o.w(i, k) = 0.1 + u(rng);
            sum += o.w(i, k);
        }
        o.w.col(k) /= sum;
    }
    for (auto *m : {&o.dx, &o.dr, &o.ds}) {
        for (auto &v : m->reshaped()) {
            v = 0.1 * (u(rng) - 0.5);
        }
    }
    return o;
}

struct Probe {
    std::vector<Vec3> mu, scale, color;
    std::vector<Quat> rot;
    std::vector<double> opacity;

    Probe(std::size_t n, std::uint64_t seed) : mu(n), scale(n), color(n), rot(n), opacity(n) {
        std::mt19937_64 rng(seed);
        std::normal_distribution<double> g(0.0, 1.0);
        for (std::size_t k = 0; k < n; ++k) {
            mu[k]      = Vec3(g(rng), g(rng), g(rng));
            scale[k]   = Vec3(g(rng), g(rng), g(rng));
            color[k]   = Vec3(g(rng), g(rng), g(rng));
            rot[k]     = Quat(g(rng), g(rng), g(rng), g(rng));
            opacity[k] = g(rng);
        }
    }

    double
    loss(const DeformedHuman &d) const {
        double s = 0.0;
        for (std::size_t k = 0; k < mu.size(); ++k) {
            const Gaussian &x = d.gaussians[k];
            s += mu[k].dot(x.mu) + scale[k].dot(x.scale) + color[k].dot(x.color) + rot[k].dot(x.rot) +
                 opacity[k] * x.opacity;
        }
        return s;
    }
};

/// mu, rot, scale of every reference frame, then opacity and color of frame 0.
std::vector<double>
pack_frames(const GaussianFrameSet &fs) {
    std::vector<double> x;
    for (const auto &frame : fs.frames) {
        for (const auto &g : frame) {
            x.insert(x.end(), g.mu.data(), g.mu.data() + 3);
            x.insert(x.end(), g.rot.data(), g.rot.data() + 4);
            x.insert(x.end(), g.scale.data(), g.scale.data() + 3);
        }
    }
    for (const auto &g : fs.frames[0]) {
        x.push_back(g.opacity);
        x.insert(x.end(), g.color.data(), g.color.data() + 3);
    }
    return x;
}

GaussianFrameSet
unpack_frames(const std::vector<double> &x, GaussianFrameSet fs) {
    std::size_t k = 0;
    for (auto &frame : fs.frames) {
        for (auto &g : frame) {
            for (int i = 0; i < 3; ++i) g.mu[i] = x[k++];
            for (int i = 0; i < 4; ++i) g.rot[i] = x[k++];
            for (int i = 0; i < 3; ++i) g.scale[i] = x[k++];
        }
    }
    for (auto &g : fs.frames[0]) {
        g.opacity = x[k++];
        for (int i = 0; i < 3; ++i) g.color[i] = x[k++];
    }
    return fs;
}

std::vector<double>
pack_grads(const FrameSetGradients &g) {
    std::vector<double> x;
    for (std::size_t i = 0; i < g.mu.size(); ++i) {
        for (std::size_t k = 0; k < g.mu[i].size(); ++k) {
            x.insert(x.end(), g.mu[i][k].data(), g.mu[i][k].data() + 3);
            x.insert(x.end(), g.rot[i][k].data(), g.rot[i][k].data() + 4);
            x.insert(x.end(), g.scale[i][k].data(), g.scale[i][k].data() + 3);
        }
    }
    for (std::size_t k = 0; k < g.opacity.size(); ++k) {
        x.push_back(g.opacity[k]);
        x.insert(x.end(), g.color[k].data(), g.color[k].data() + 3);
    }
    return x;
}

BlendBackward
backward_of(const GaussianFrameSet &fs, const DeformedHuman &d, const Probe &p) {
    return blend_backward(fs, d, p.mu, p.rot, p.scale, p.opacity, p.color);
}

} // namespace

TEST(DeformField, OneHotWeightsReproduceTheReferenceFrame) {
    const auto fs = random_frame_set(3, 6, 1);
    for (int i = 0; i < 3; ++i) {
        DeformOutput net = DeformOutput::zeros(3, 6);
        net.w.row(i).setOnes();
        const auto d = deform_with(fs, net, 0.3);
        for (std::size_t k = 0; k < 6; ++k) {
            EXPECT_LE((d.gaussians[k].mu - fs.frames[i][k].mu).norm(), 1e-12);
            EXPECT_LE((d.gaussians[k].scale - fs.frames[i][k].scale).norm(), 1e-12);
            const Quat q = normalized_quat(fs.frames[i][k].rot);
            EXPECT_NEAR(std::abs(d.gaussians[k].rot.dot(q)), 1.0, 1e-12);
            EXPECT_DOUBLE_EQ(d.gaussians[k].opacity, fs.frames[0][k].opacity);
        }
    }
}

TEST(DeformField, UniformBlendOfIdenticalFramesIsTheFrame) {
    auto fs = random_frame_set(4, 5, 2);
    for (auto &f : fs.frames) {
        f = fs.frames[0];
    }
    DeformOutput net = DeformOutput::zeros(4, 5);
    net.w.setConstant(0.25);
    const auto u = deform_with(fs, net, 0.5);
    for (std::size_t k = 0; k < 5; ++k) {
        EXPECT_LE((u.gaussians[k].mu - fs.frames[0][k].mu).norm(), 1e-12);
        EXPECT_LE((u.gaussians[k].scale - fs.frames[0][k].scale).norm(), 1e-12);
    }
}

TEST(DeformField, RotationsAreUnitQuaternions) {
    const auto fs = random_frame_set(3, 20, 3);
    const auto d  = deform_with(fs, random_net_output(3, 20, 4), 0.7);
    for (const auto &g : d.gaussians) {
        EXPECT_NEAR(g.rot.norm(), 1.0, 1e-9);
        EXPECT_GT(g.scale.minCoeff(), 0.0);
    }
}

TEST(DeformField, InvisibleSlotsTakeTheMeanOfVisibleSlots) {
    auto fs = random_frame_set(3, 2, 5);
    fs.visibility.flags = {1, 0, 1, 0, 1, 0};
    const auto xbar     = effective_reference_positions(fs);
    const Vec3 mean0    = 0.5 * (fs.frames[0][0].mu + fs.frames[2][0].mu);
    EXPECT_LE((xbar.block<3, 1>(3, 0) - mean0).norm(), 1e-15);
    EXPECT_LE((xbar.block<3, 1>(0, 1) - fs.frames[1][1].mu).norm(), 1e-15);
    EXPECT_LE((xbar.block<3, 1>(6, 1) - fs.frames[1][1].mu).norm(), 1e-15);
    fs.visibility.flags = {1, 1, 1, 0, 0, 0};
    EXPECT_THROW(effective_reference_positions(fs), InvalidStateError);
}

TEST(DeformField, TimestampOutsideUnitIntervalThrows) {
    const auto fs = random_frame_set(2, 3, 6);
    EXPECT_THROW(deform_with(fs, DeformOutput::zeros(2, 3), 1.5), RangeError);
    EXPECT_THROW(deform_with(fs, DeformOutput::zeros(2, 3), -0.1), RangeError);
}

TEST(BlendBackward, MatchesCentralDifferencesForReferenceParameters) {
    for (double hidden : {0.0, 0.4}) {
        const auto fs  = random_frame_set(3, 8, 7, hidden);
        const auto net = random_net_output(3, 8, 8);
        const Probe p(8, 9);
        const auto d        = deform_with(fs, net, 0.4);
        const auto analytic = pack_grads(backward_of(fs, d, p).frames);
        const auto numeric  = central_differences(
            pack_frames(fs),
            [&](const std::vector<double> &x) { return p.loss(deform_with(unpack_frames(x, fs), net, 0.4)); }, 1e-6);
        EXPECT_LE(max_relative_error(analytic, numeric), 1e-6) << "hidden fraction " << hidden;
    }
}

TEST(BlendBackward, MatchesCentralDifferencesForNetworkOutputs) {
    const auto fs  = random_frame_set(3, 6, 10, 0.3);
    const auto net = random_net_output(3, 6, 11);
    const Probe p(6, 12);
    const auto back = backward_of(fs, deform_with(fs, net, 0.6), p);
    for (auto member : {&DeformOutput::w, &DeformOutput::dx, &DeformOutput::dr, &DeformOutput::ds}) {
        const Eigen::MatrixXd &m = net.*member;
        std::vector<double> x(m.data(), m.data() + m.size());
        const auto numeric = central_differences(
            x,
            [&](const std::vector<double> &v) {
                DeformOutput probe = net;
                (probe.*member)    = Eigen::Map<const Eigen::MatrixXd>(v.data(), m.rows(), m.cols());
                return p.loss(deform_with(fs, probe, 0.6));
            },
            1e-6);
        const Eigen::MatrixXd &g = back.net.*member;
        EXPECT_LE(max_relative_error(std::vector<double>(g.data(), g.data() + g.size()), numeric), 1e-6);
    }
}

TEST(WeightPenalty, ValueAndGradient) {
    Eigen::MatrixXd w(2, 3);
    w << 0.2, 0.5, 0.9, 0.8, 0.5, 0.1;
    PerGaussianVisibility vis;
    vis.num_refs = 2;
    vis.flags    = {1, 0, 1, 1, 0, 1};
    const std::vector<std::uint8_t> atT{1, 0, 1};
    Eigen::MatrixXd dW;
    const double v = weight_penalty(w, vis, atT, &dW);
    // (1 - M) is 1 for (k0,i1), (k1,i0), (k1,i1), (k2,i0).
    EXPECT_NEAR(v, 0.8 * 0.8 + 0.5 * 0.5 + 0.5 * 0.5 + 0.9 * 0.9, 1e-15);
    EXPECT_NEAR(dW(1, 0), 1.6, 1e-15);
    EXPECT_NEAR(dW(0, 0), 0.0, 1e-15);
    EXPECT_NEAR(dW(0, 2), 1.8, 1e-15);
}

TEST(WeightPenalty, VisibilityAtFrameFollowsSeedKeypoints) {
    auto fs            = random_frame_set(2, 3, 13);
    fs.seed_keypoint   = {2, -1, 0};
    VisibilityMatrix m(3, 2);
    m.set(2, 1, true);
    m.set(0, 1, false);
    const auto flags = visible_at_frame(fs, m, 1);
    ASSERT_EQ(flags.size(), 3u);
    EXPECT_EQ(flags[0], 1);
    EXPECT_EQ(flags[2], 0);
}
