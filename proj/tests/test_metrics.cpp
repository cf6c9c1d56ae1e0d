// Copyright Contributors to the refsplat Project
// SPDX-License-Identifier: Apache-2.0

#include "test_util.hpp"

#include "refsplat/errors.hpp"
#include "refsplat/metrics.hpp"

#include <gtest/gtest.h>

using namespace refsplat;
using namespace refsplat::test;

TEST(Psnr, IdenticalImagesHitTheCap) {
    const Image a = random_image(12, 9, 1);
    EXPECT_EQ(psnr(a, a), 99.0);
}

TEST(Psnr, UniformZeroAgainstHalf) {
    const Image a(8, 8, 3, 0.0), b(8, 8, 3, 0.5);
    EXPECT_NEAR(psnr(a, b), 10.0 * std::log10(1.0 / 0.25), 1e-12);
    EXPECT_NEAR(psnr(a, b), 6.0206, 1e-4);
}

TEST(Psnr, DimensionMismatchThrows) {
    EXPECT_ANY_THROW(psnr(Image(4, 4, 3), Image(5, 4, 3)));
    EXPECT_ANY_THROW(ssim(Image(4, 4, 3), Image(4, 5, 3)));
}

TEST(Ssim, IdentityIsExactlyOne) {
    const Image a = random_image(16, 16, 2);
    EXPECT_EQ(ssim(a, a), 1.0);
}

TEST(Ssim, IsSymmetric) {
    const Image a = random_image(16, 12, 3), b = random_image(16, 12, 4);
    EXPECT_NEAR(ssim(a, b), ssim(b, a), 1e-9);
    EXPECT_LT(ssim(a, b), 0.5);
}

TEST(Ssim, GradientMatchesCentralDifferences) {
    const Image a = random_image(10, 9, 5), b = random_image(10, 9, 6);
    Image dA;
    ssim_with_grad(a, b, dA);
    const auto numeric = central_differences(
        a.data,
        [&](const std::vector<double> &x) {
            Image p = a;
            p.data  = x;
            return ssim(p, b);
        },
        1e-6);
    EXPECT_LE(max_relative_error(dA.data, numeric, 1e-4), 1e-5);
}

TEST(TrajectoryError, ConstantOffsetsCancelAndMotionErrorsCount) {
    std::vector<std::vector<Vec3>> truth{{Vec3(0, 0, 0), Vec3(1, 0, 0)}, {Vec3(1, 0, 0), Vec3(2, 0, 0)}};
    auto shifted = truth;
    for (auto &frame : shifted) {
        frame[0] += Vec3(0, 3, 0);
        frame[1] += Vec3(0, 0, -2);
    }
    EXPECT_NEAR(centered_trajectory_error(shifted, truth), 0.0, 1e-15);
    // Point 0 stays still instead of moving one unit: centered residuals are +-0.5.
    auto still = truth;
    still[1][0] = Vec3(0, 0, 0);
    EXPECT_NEAR(centered_trajectory_error(still, truth), 0.25, 1e-15);
    // Ignoring frame 1 of point 0 leaves a single sample, which centers to zero.
    const std::vector<std::vector<std::uint8_t>> mask{{1, 1}, {0, 1}};
    EXPECT_NEAR(centered_trajectory_error(still, truth, &mask), 0.0, 1e-15);
    EXPECT_THROW(centered_trajectory_error({}, {}), RangeError);
    EXPECT_THROW(centered_trajectory_error(truth, {truth[0]}), RangeError);
}
