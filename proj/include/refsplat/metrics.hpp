// Copyright Contributors to the refsplat Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "refsplat/scene_model.hpp"

#include <cstdint>
#include <vector>

namespace refsplat {

inline constexpr double kPsnrCap = 99.0;

/// 10 log10(1 / MSE) over all channels; kPsnrCap when MSE < 1e-10.
double psnr(const Image &a, const Image &b);

/// Mean SSIM over pixels and channels: 11x11 Gaussian window (sigma 1.5),
/// zero padding, C1 = 0.01^2, C2 = 0.03^2.
double ssim(const Image &a, const Image &b);

/// SSIM plus its gradient w.r.t. `a`, written to dA.
double ssim_with_grad(const Image &a, const Image &b, Image &dA);

/// Mean over points and frames of |(e_t - mean_t e) - (g_t - mean_t g)|, with
/// both trajectories indexed [frame][point]. A constant per-point offset does
/// not count. With `observed` ([frame][point]) only flagged pairs enter the
/// means and the average. Throws RangeError on mismatched or empty input.
double centered_trajectory_error(const std::vector<std::vector<Vec3>> &estimate,
                                 const std::vector<std::vector<Vec3>> &truth,
                                 const std::vector<std::vector<std::uint8_t>> *observed = nullptr);

} // namespace refsplat
