// Copyright Contributors to the refsplat Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "refsplat/scene_model.hpp"

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace refsplat {

struct RasterSettings {
    double near_plane        = 0.01;
    double dilation          = 0.3; // px^2 added to the diagonal of the 2D covariance
    double alpha_max         = 0.99;
    double alpha_min         = 1.0 / 255.0;
    double transmittance_min = 1e-4;
    double extent_sigmas     = 3.0;
};

struct Projected2DGaussian {
    Vec2 mean = Vec2::Zero(); // pixel coordinates, pixel (x, y) is centered at (x, y)
    Mat2 cov  = Mat2::Zero(); // before dilation
    double depth   = 0.0;     // camera-space z
    Vec3 color     = Vec3::Zero();
    double opacity = 0.0;
    std::size_t source_index = 0;
};

/// Projects and culls (z <= near plane), then sorts by (depth, source_index).
std::vector<Projected2DGaussian>
project(std::span<const Gaussian> gaussians, const Camera &camera, const RasterSettings &settings = {});

/// Per-pixel list of the splats composited there, front to back.
struct ContribRecord {
    std::vector<std::uint32_t> offsets; // pixel_count + 1 entries into `splats`
    std::vector<std::uint32_t> splats;  // indices into the projected list
    std::uint64_t signature = 0;        // fingerprint of the projected inputs
    int width  = 0;
    int height = 0;
};

struct RenderOutput {
    Image rgb;
    DepthMap depth;        // sum of T * alpha * z; divide by alpha for the expected depth
    DepthMap median_depth; // z of the splat where T first drops to 0.5 or below, else invalid
    Raster<double> alpha;
    ContribRecord contrib;
    std::size_t skipped_singular = 0;
};

RenderOutput
render(std::span<const Projected2DGaussian> projected, const Camera &camera, const RasterSettings &settings = {});

/// project() followed by render().
RenderOutput
render_gaussians(std::span<const Gaussian> gaussians, const Camera &camera, const RasterSettings &settings = {});

struct GaussianGradients {
    std::vector<Vec3> mu;
    std::vector<Quat> rot; // w.r.t. the stored (unnormalized) quaternion
    std::vector<Vec3> scale;
    std::vector<double> opacity;
    std::vector<Vec3> color;
    std::vector<Vec2> mean2d; // screen-space gradient, used for densification statistics

    explicit GaussianGradients(std::size_t n = 0);
    std::size_t
    size() const {
        return mu.size();
    }
};

/// Analytic gradients of a scalar loss given dLoss/dRGB (H x W x 3) and
/// dLoss/dDepth (H x W). `forward` must be the render of the same Gaussians
/// and camera; otherwise InvalidStateError is thrown.
GaussianGradients render_backward(std::span<const Gaussian> gaussians,
                                  const Camera &camera,
                                  const RenderOutput &forward,
                                  const Image &dRgb,
                                  const DepthMap &dDepth,
                                  const RasterSettings &settings = {});

} // namespace refsplat
