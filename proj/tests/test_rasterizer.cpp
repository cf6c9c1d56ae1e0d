// Copyright Contributors to the refsplat Project
// SPDX-License-Identifier: Apache-2.0

#include "test_util.hpp"

#include "refsplat/errors.hpp"
#include "refsplat/rasterizer.hpp"

#include <gtest/gtest.h>

using namespace refsplat;
using namespace refsplat::test;

namespace {

Gaussian
splat_at(const Vec3 &mu, double sigma, double opacity, const Vec3 &color) {
    Gaussian g;
    g.mu      = mu;
    g.scale   = Vec3::Constant(sigma);
    g.opacity = opacity;
    g.color   = color;
    return g;
}

/// Eq. 2-3 for splats covering the pixel center in front-to-back order.
void
composite_by_hand(const std::vector<double> &alpha, const std::vector<Vec3> &colors, const std::vector<double> &depths,
                  Vec3 &rgb, double &depth, double &acc) {
    double T = 1.0;
    rgb      = Vec3::Zero();
    depth    = 0.0;
    for (std::size_t i = 0; i < alpha.size(); ++i) {
        rgb += T * alpha[i] * colors[i];
        depth += T * alpha[i] * depths[i];
        T *= 1.0 - alpha[i];
    }
    acc = 1.0 - T;
}

double
weighted_loss(const RenderOutput &r, const Image &wRgb, const DepthMap &wDepth) {
    double s = 0.0;
    for (std::size_t i = 0; i < r.rgb.data.size(); ++i) {
        s += r.rgb.data[i] * wRgb.data[i];
    }
    for (std::size_t i = 0; i < r.depth.data.size(); ++i) {
        s += r.depth.data[i] * wDepth.data[i];
    }
    return s;
}

} // namespace

TEST(Project, OpticalAxisMapsToPrincipalPoint) {
    Camera cam;
    cam.width  = 4;
    cam.height = 4;
    const std::vector<Gaussian> gs{splat_at(Vec3(0, 0, 1), 0.1, 0.5, Vec3::Zero())};
    const auto p = project(gs, cam);
    ASSERT_EQ(p.size(), 1u);
    EXPECT_NEAR(p[0].mean.x(), 0.0, 1e-12);
    EXPECT_NEAR(p[0].mean.y(), 0.0, 1e-12);
}

TEST(Project, HandPerspectiveDivision) {
    Camera cam;
    cam.K << 100, 0, 50, 0, 100, 50, 0, 0, 1;
    cam.width  = 100;
    cam.height = 100;
    const std::vector<Gaussian> gs{splat_at(Vec3(1, 0, 2), 0.1, 0.5, Vec3::Zero())};
    const auto p = project(gs, cam);
    ASSERT_EQ(p.size(), 1u);
    EXPECT_NEAR(p[0].mean.x(), 100.0, 1e-12);
    EXPECT_NEAR(p[0].mean.y(), 50.0, 1e-12);
    EXPECT_DOUBLE_EQ(p[0].depth, 2.0);
}

TEST(Project, CullsAtNearPlaneAndSortsByDepthThenIndex) {
    const Camera cam = front_camera(8, 8, 8);
    std::vector<Gaussian> gs{splat_at(Vec3(0, 0, 3), 0.1, 0.5, Vec3::Zero()),
                             splat_at(Vec3(0, 0, 0.005), 0.1, 0.5, Vec3::Zero()),
                             splat_at(Vec3(0, 0, 2), 0.1, 0.5, Vec3::Zero()),
                             splat_at(Vec3(0.1, 0, 2), 0.1, 0.5, Vec3::Zero())};
    const auto p = project(gs, cam);
    ASSERT_EQ(p.size(), 3u);
    EXPECT_EQ(p[0].source_index, 2u);
    EXPECT_EQ(p[1].source_index, 3u);
    EXPECT_EQ(p[2].source_index, 0u);
}

TEST(Project, CovarianceMatchesFiniteDifferenceJacobian) {
    const Camera cam = front_camera(32, 32, 30);
    auto gs          = random_scene(10, 3);
    const auto proj  = project(gs, cam);
    for (const auto &p : proj) {
        const Gaussian &g = gs[p.source_index];
        Eigen::Matrix<double, 2, 3> J;
        const double h = 1e-6;
        for (int a = 0; a < 3; ++a) {
            Vec3 d = Vec3::Zero();
            d[a]   = h;
            J.col(a) = (cam.project_camera(cam.to_camera(g.mu + d)) - cam.project_camera(cam.to_camera(g.mu - d))) /
                       (2 * h);
        }
        const Mat2 cov = J * covariance_of(g) * J.transpose();
        for (int i = 0; i < 4; ++i) {
            EXPECT_LE(relative_error(cov.data()[i], p.cov.data()[i], 1e-6), 1e-4);
        }
    }
}

TEST(Project, SlopeClampBoundsGaussiansBesideTheCamera) {
    const Camera cam = front_camera(16, 16, 16);
    const std::vector<Gaussian> gs{splat_at(Vec3(-4.0, 0.0, 0.02), 0.2, 0.9, Vec3::Ones())};
    const RenderOutput r = render_gaussians(gs, cam);
    for (double a : r.alpha.data) {
        EXPECT_EQ(a, 0.0);
    }
}

TEST(Render, EmptyListGivesZeros) {
    const Camera cam = front_camera(5, 4, 5);
    const RenderOutput r = render_gaussians({}, cam);
    for (double v : r.rgb.data) EXPECT_EQ(v, 0.0);
    for (double v : r.depth.data) EXPECT_EQ(v, 0.0);
    for (double v : r.alpha.data) EXPECT_EQ(v, 0.0);
}

TEST(Render, SingleSplatAtPixelCenterUsesClampedAlpha) {
    const Camera cam = front_camera(5, 5, 10);
    const Vec3 c(0.2, 0.5, 0.9);
    const std::vector<Gaussian> gs{splat_at(Vec3(0, 0, 2), 0.1, 1.0, c)};
    const RenderOutput r = render_gaussians(gs, cam);
    for (int ch = 0; ch < 3; ++ch) {
        EXPECT_NEAR(r.rgb.at(2, 2, ch), 0.99 * c[ch], 1e-6);
    }
    EXPECT_NEAR(r.depth.at(2, 2), 0.99 * 2.0, 1e-6);
    EXPECT_NEAR(r.alpha.at(2, 2), 0.99, 1e-6);
}

TEST(Render, SingleSplatOffCenterFollowsGaussianFalloff) {
    const Camera cam = front_camera(7, 7, 10);
    const double sigma = 0.1, z = 2.0, o = 0.7;
    const std::vector<Gaussian> gs{splat_at(Vec3(0, 0, z), sigma, o, Vec3::Ones())};
    const RenderOutput r = render_gaussians(gs, cam);
    // Isotropic screen variance (f sigma / z)^2 plus the 0.3 px^2 dilation.
    const double var = std::pow(10.0 * sigma / z, 2) + 0.3;
    for (int dx = 0; dx <= 2; ++dx) {
        const double alpha = o * std::exp(-0.5 * dx * dx / var);
        EXPECT_NEAR(r.alpha.at(3 + dx, 3), alpha >= 1.0 / 255.0 ? alpha : 0.0, 1e-6);
    }
}

TEST(Render, TwoCoincidentSplatsCompositeFrontToBack) {
    const Camera cam = front_camera(5, 5, 10);
    const Vec3 c1(0.9, 0.1, 0.1), c2(0.1, 0.8, 0.3);
    const double o1 = 0.6, o2 = 0.45;
    const std::vector<Gaussian> gs{splat_at(Vec3(0, 0, 3), 0.1, o2, c2), splat_at(Vec3(0, 0, 2), 0.1, o1, c1)};
    const RenderOutput r = render_gaussians(gs, cam);
    Vec3 rgb;
    double depth = 0.0, acc = 0.0;
    composite_by_hand({std::min(o1, 0.99), std::min(o2, 0.99)}, {c1, c2}, {2.0, 3.0}, rgb, depth, acc);
    for (int ch = 0; ch < 3; ++ch) {
        EXPECT_NEAR(r.rgb.at(2, 2, ch), rgb[ch], 1e-6);
    }
    EXPECT_NEAR(r.rgb.at(2, 2, 0), o1 * c1[0] + (1 - o1) * o2 * c2[0], 1e-6);
    EXPECT_NEAR(r.depth.at(2, 2), depth, 1e-6);
    EXPECT_NEAR(r.alpha.at(2, 2), acc, 1e-6);
}

TEST(Render, AlphaTelescopesAndStaysInRange) {
    const Camera cam = front_camera(16, 16, 16);
    const auto gs    = random_scene(40, 11);
    const RenderOutput r = render_gaussians(gs, cam);
    const auto proj      = project(gs, cam);
    for (int y = 0; y < 16; ++y) {
        for (int x = 0; x < 16; ++x) {
            const std::size_t pix = static_cast<std::size_t>(y) * 16 + x;
            double T              = 1.0;
            for (auto k = r.contrib.offsets[pix]; k < r.contrib.offsets[pix + 1]; ++k) {
                const auto &p  = proj[r.contrib.splats[k]];
                const Mat2 cov = p.cov + 0.3 * Mat2::Identity();
                const Vec2 d   = Vec2(x, y) - p.mean;
                T *= 1.0 - std::min(0.99, p.opacity * std::exp(-0.5 * d.dot(cov.inverse() * d)));
            }
            EXPECT_NEAR(r.alpha.at(x, y), 1.0 - T, 1e-9);
            EXPECT_GE(r.alpha.at(x, y), 0.0);
            EXPECT_LE(r.alpha.at(x, y), 1.0);
            if (r.alpha.at(x, y) == 0.0) {
                EXPECT_EQ(r.depth.at(x, y), 0.0);
            }
        }
    }
}

TEST(Render, StopsWhenTransmittanceIsExhausted) {
    const Camera cam = front_camera(3, 3, 10);
    std::vector<Gaussian> gs;
    for (int i = 0; i < 6; ++i) {
        gs.push_back(splat_at(Vec3(0, 0, 2.0 + i), 0.05, 1.0, Vec3::Ones()));
    }
    const RenderOutput r = render_gaussians(gs, cam);
    // 0.01^2 = 1e-4 is not below the threshold, 0.01^3 is: three splats composite.
    EXPECT_EQ(r.contrib.offsets[5] - r.contrib.offsets[4], 3u);
}

TEST(Render, EqualDepthTiesResolveBySourceIndex) {
    const Camera cam = front_camera(5, 5, 10);
    const std::vector<Gaussian> ab{splat_at(Vec3(0, 0, 2), 0.1, 0.5, Vec3(1, 0, 0)),
                                   splat_at(Vec3(0, 0, 2), 0.1, 0.5, Vec3(0, 1, 0))};
    const RenderOutput r = render_gaussians(ab, cam);
    EXPECT_NEAR(r.rgb.at(2, 2, 0), 0.5, 1e-9);
    EXPECT_NEAR(r.rgb.at(2, 2, 1), 0.25, 1e-9);
}

TEST(Render, ResolutionDoublingKeepsAlphaAtPhysicalPoints) {
    RasterSettings s;
    s.dilation        = 0.0;
    const Camera lo   = front_camera(16, 16, 16);
    const Camera hi   = front_camera(32, 32, 32);
    const auto gs     = random_scene(20, 5);
    const auto pLo    = project(gs, lo, s);
    const auto pHi    = project(gs, hi, s);
    ASSERT_EQ(pLo.size(), pHi.size());
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(-0.5, 15.5);
    for (std::size_t k = 0; k < pLo.size(); ++k) {
        for (int trial = 0; trial < 10; ++trial) {
            const Vec2 q(u(rng), u(rng));
            // Pixel centers sit at integers, so low-res q maps to 2q + 0.5.
            const Vec2 qh = 2.0 * q + Vec2::Constant(0.5);
            const Vec2 dl = q - pLo[k].mean, dh = qh - pHi[k].mean;
            const double aLo = std::exp(-0.5 * dl.dot(pLo[k].cov.inverse() * dl));
            const double aHi = std::exp(-0.5 * dh.dot(pHi[k].cov.inverse() * dh));
            EXPECT_NEAR(aLo, aHi, 1e-6);
        }
    }
}

TEST(RenderBackward, ColorGradientOfSingleSplatIsTransmittanceTimesAlpha) {
    const Camera cam = front_camera(5, 5, 10);
    const std::vector<Gaussian> gs{splat_at(Vec3(0, 0, 2), 0.1, 0.6, Vec3(0.3, 0.3, 0.3))};
    const RenderOutput r = render_gaussians(gs, cam);
    Image dRgb(5, 5, 3, 0.0);
    dRgb.at(2, 2, 1)     = 1.0;
    const auto grads     = render_backward(gs, cam, r, dRgb, DepthMap(5, 5, 1, 0.0));
    EXPECT_NEAR(grads.color[0][1], 0.6, 1e-12);
    EXPECT_EQ(grads.color[0][0], 0.0);
}

TEST(RenderBackward, CulledGaussianHasZeroGradient) {
    const Camera cam = front_camera(8, 8, 8);
    auto gs          = random_scene(5, 2);
    gs.push_back(splat_at(Vec3(0, 0, -1), 0.2, 0.9, Vec3::Ones()));
    const RenderOutput r = render_gaussians(gs, cam);
    const auto grads     = render_backward(gs, cam, r, random_image(8, 8, 1), random_image(8, 8, 2, 1));
    const auto &last     = gs.size() - 1;
    EXPECT_EQ(grads.mu[last].norm(), 0.0);
    EXPECT_EQ(grads.scale[last].norm(), 0.0);
    EXPECT_EQ(grads.opacity[last], 0.0);
}

TEST(RenderBackward, MismatchedForwardRecordThrows) {
    const Camera cam = front_camera(8, 8, 8);
    auto gs          = random_scene(5, 2);
    const RenderOutput r = render_gaussians(gs, cam);
    gs[0].mu.x() += 0.1;
    EXPECT_THROW(render_backward(gs, cam, r, Image(8, 8, 3, 0.0), DepthMap(8, 8, 1, 0.0)), InvalidStateError);
}

TEST(RenderBackward, MatchesCentralDifferencesOnRandomScene) {
    const Camera cam   = front_camera(16, 16, 16);
    const auto gs      = random_scene(20, 7);
    const Image wRgb   = random_image(16, 16, 8);
    const DepthMap wD  = random_image(16, 16, 9, 1);
    const RenderOutput r = render_gaussians(gs, cam);
    const auto analytic  = pack(render_backward(gs, cam, r, wRgb, wD));
    const auto numeric   = central_differences(
        pack(gs), [&](const std::vector<double> &x) { return weighted_loss(render_gaussians(unpack(x, gs), cam), wRgb, wD); },
        1e-5);
    EXPECT_LE(max_relative_error(analytic, numeric), 1e-4);
}
