// Copyright Contributors to the refsplat Project
// SPDX-License-Identifier: Apache-2.0

#include "refsplat/rasterizer.hpp"

#include "refsplat/errors.hpp"
#include "refsplat/hash.hpp"

#include <algorithm>
#include <array>
#include <cmath>

namespace refsplat {

namespace {

using Mat23 = Eigen::Matrix<double, 2, 3>;

/// Ray slopes x/z and y/z are clamped to 1.3x the half field of view before
/// the Jacobian is formed, so Gaussians beside the camera stay bounded.
struct ClampedSlopes {
    double a = 0.0, b = 0.0; // clamped x/z, y/z
    bool free_a = true, free_b = true;
};

ClampedSlopes
clamped_slopes(const Camera &camera, const Vec3 &xc) {
    const Mat3 &K     = camera.K;
    const double limx = 1.3 * std::max(K(0, 2) + 0.5, camera.width - 0.5 - K(0, 2)) / K(0, 0);
    const double limy = 1.3 * std::max(K(1, 2) + 0.5, camera.height - 0.5 - K(1, 2)) / K(1, 1);
    ClampedSlopes c;
    c.a      = xc.x() / xc.z();
    c.b      = xc.y() / xc.z();
    c.free_a = std::abs(c.a) <= limx;
    c.free_b = std::abs(c.b) <= limy;
    c.a      = std::clamp(c.a, -limx, limx);
    c.b      = std::clamp(c.b, -limy, limy);
    return c;
}

/// Jacobian of the pinhole map (x, y, z) -> ((fx x + s y) / z + cx, fy y / z + cy)
/// with the slopes of clamped_slopes.
Mat23
projection_jacobian(const Camera &camera, const Vec3 &xc) {
    const Mat3 &K   = camera.K;
    const double fx = K(0, 0), s = K(0, 1), fy = K(1, 1);
    const double z  = xc.z();
    const auto c    = clamped_slopes(camera, xc);
    Mat23 J;
    J << fx / z, s / z, -(fx * c.a + s * c.b) / z, //
        0.0, fy / z, -fy * c.b / z;
    return J;
}

struct Splat {
    Vec2 mean;
    Mat2 conic;
    double opacity;
    Vec3 color;
    double depth;
    int x0, x1, y0, y1;
    bool valid;
};

Splat
prepare_splat(const Projected2DGaussian &p, const Camera &camera, const RasterSettings &settings) {
    Splat s{};
    s.mean    = p.mean;
    s.opacity = p.opacity;
    s.color   = p.color;
    s.depth   = p.depth;
    const Mat2 cov = p.cov + settings.dilation * Mat2::Identity();
    const double det = cov.determinant();
    if (!(det > 0.0) || !std::isfinite(det) || !(cov(0, 0) > 0.0)) {
        s.valid = false;
        return s;
    }
    s.valid = true;
    s.conic = cov.inverse();
    const double mid    = 0.5 * (cov(0, 0) + cov(1, 1));
    const double lambda = mid + std::sqrt(std::max(0.1, mid * mid - det));
    const double radius = std::ceil(settings.extent_sigmas * std::sqrt(lambda));
    s.x0 = std::max(0, static_cast<int>(std::floor(p.mean.x() - radius)));
    s.x1 = std::min(camera.width - 1, static_cast<int>(std::ceil(p.mean.x() + radius)));
    s.y0 = std::max(0, static_cast<int>(std::floor(p.mean.y() - radius)));
    s.y1 = std::min(camera.height - 1, static_cast<int>(std::ceil(p.mean.y() + radius)));
    return s;
}

std::uint64_t
signature_of(std::span<const Projected2DGaussian> projected, const Camera &camera) {
    Fnv1a h;
    h.value(camera.width);
    h.value(camera.height);
    h.value(projected.size());
    for (const auto &p : projected) {
        h.value(p.source_index);
        h.value(p.mean.x());
        h.value(p.mean.y());
        h.value(p.depth);
        h.value(p.opacity);
    }
    return h.digest();
}

/// Gaussian-space alpha before clamping, and the quadratic-form offset.
inline double
splat_weight(const Splat &s, double px, double py, Vec2 &delta) {
    delta = Vec2(px - s.mean.x(), py - s.mean.y());
    const double power = -0.5 * delta.dot(s.conic * delta);
    return std::exp(power);
}

/// dR/dq_m for the rotation matrix of a unit quaternion (w, x, y, z).
std::array<Mat3, 4>
rotation_partials(const Quat &q) {
    const double w = q[0], x = q[1], y = q[2], z = q[3];
    std::array<Mat3, 4> d;
    d[0] << 0, -2 * z, 2 * y, 2 * z, 0, -2 * x, -2 * y, 2 * x, 0;
    d[1] << 0, 2 * y, 2 * z, 2 * y, -4 * x, -2 * w, 2 * z, 2 * w, -4 * x;
    d[2] << -4 * y, 2 * x, 2 * w, 2 * x, 0, 2 * z, -2 * w, 2 * z, -4 * y;
    d[3] << -4 * z, -2 * w, 2 * x, 2 * w, -4 * z, 2 * y, 2 * x, 2 * y, 0;
    return d;
}

} // namespace

std::vector<Projected2DGaussian>
project(std::span<const Gaussian> gaussians, const Camera &camera, const RasterSettings &settings) {
    std::vector<Projected2DGaussian> out;
    out.reserve(gaussians.size());
    const Mat3 W = camera.rotation();
    for (std::size_t i = 0; i < gaussians.size(); ++i) {
        const Gaussian &g = gaussians[i];
        const Vec3 xc     = camera.to_camera(g.mu);
        if (!(xc.z() > settings.near_plane)) {
            continue;
        }
        const Mat23 M = projection_jacobian(camera, xc) * W;
        Projected2DGaussian p;
        p.mean         = camera.project_camera(xc);
        p.cov          = M * covariance_of(g) * M.transpose();
        p.cov          = 0.5 * (p.cov + p.cov.transpose());
        p.depth        = xc.z();
        p.color        = g.color;
        p.opacity      = g.opacity;
        p.source_index = i;
        out.push_back(p);
    }
    std::stable_sort(out.begin(), out.end(), [](const auto &a, const auto &b) {
        if (a.depth != b.depth) {
            return a.depth < b.depth;
        }
        return a.source_index < b.source_index;
    });
    return out;
}

RenderOutput
render(std::span<const Projected2DGaussian> projected, const Camera &camera, const RasterSettings &settings) {
    const int W = camera.width;
    const int H = camera.height;
    RenderOutput out;
    out.rgb   = Image(W, H, 3, 0.0);
    out.depth        = DepthMap(W, H, 1, 0.0);
    out.median_depth = DepthMap(W, H, 1, kInvalidDepth);
    out.alpha        = Raster<double>(W, H, 1, 0.0);

    std::vector<Splat> splats;
    splats.reserve(projected.size());
    for (const auto &p : projected) {
        splats.push_back(prepare_splat(p, camera, settings));
        if (!splats.back().valid) {
            ++out.skipped_singular;
        }
    }

    // Bin splats per pixel, preserving depth order.
    const std::size_t npix = static_cast<std::size_t>(W) * H;
    std::vector<std::uint32_t> binStart(npix + 1, 0);
    for (const auto &s : splats) {
        if (!s.valid) {
            continue;
        }
        for (int y = s.y0; y <= s.y1; ++y) {
            for (int x = s.x0; x <= s.x1; ++x) {
                ++binStart[static_cast<std::size_t>(y) * W + x + 1];
            }
        }
    }
    for (std::size_t i = 0; i < npix; ++i) {
        binStart[i + 1] += binStart[i];
    }
    std::vector<std::uint32_t> bins(binStart[npix]);
    std::vector<std::uint32_t> cursor(binStart.begin(), binStart.end() - 1);
    for (std::size_t k = 0; k < splats.size(); ++k) {
        const auto &s = splats[k];
        if (!s.valid) {
            continue;
        }
        for (int y = s.y0; y <= s.y1; ++y) {
            for (int x = s.x0; x <= s.x1; ++x) {
                bins[cursor[static_cast<std::size_t>(y) * W + x]++] = static_cast<std::uint32_t>(k);
            }
        }
    }

    auto &contrib = out.contrib;
    contrib.width  = W;
    contrib.height = H;
    contrib.offsets.assign(npix + 1, 0);
    contrib.splats.reserve(bins.size() / 2);
    contrib.signature = signature_of(projected, camera);

    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
            const std::size_t pix = static_cast<std::size_t>(y) * W + x;
            double T              = 1.0;
            Vec3 rgb              = Vec3::Zero();
            double depth          = 0.0;
            double median         = kInvalidDepth;
            for (std::uint32_t b = binStart[pix]; b < binStart[pix + 1]; ++b) {
                const Splat &s = splats[bins[b]];
                Vec2 delta;
                const double g     = splat_weight(s, x, y, delta);
                const double alpha = std::min(settings.alpha_max, s.opacity * g);
                if (alpha < settings.alpha_min) {
                    continue;
                }
                const double wgt = T * alpha;
                rgb += wgt * s.color;
                depth += wgt * s.depth;
                contrib.splats.push_back(bins[b]);
                T *= (1.0 - alpha);
                if (T <= 0.5 && median == kInvalidDepth) {
                    median = s.depth;
                }
                if (T < settings.transmittance_min) {
                    break;
                }
            }
            contrib.offsets[pix + 1] = static_cast<std::uint32_t>(contrib.splats.size());
            for (int c = 0; c < 3; ++c) {
                out.rgb.at(x, y, c) = rgb[c];
            }
            out.depth.at(x, y)        = depth;
            out.median_depth.at(x, y) = median;
            out.alpha.at(x, y)        = 1.0 - T;
        }
    }
    return out;
}

RenderOutput
render_gaussians(std::span<const Gaussian> gaussians, const Camera &camera, const RasterSettings &settings) {
    const auto projected = project(gaussians, camera, settings);
    return render(projected, camera, settings);
}

GaussianGradients::GaussianGradients(std::size_t n)
    : mu(n, Vec3::Zero()), rot(n, Quat::Zero()), scale(n, Vec3::Zero()), opacity(n, 0.0),
      color(n, Vec3::Zero()), mean2d(n, Vec2::Zero()) {}

GaussianGradients
render_backward(std::span<const Gaussian> gaussians,
                const Camera &camera,
                const RenderOutput &forward,
                const Image &dRgb,
                const DepthMap &dDepth,
                const RasterSettings &settings) {
    const int W = camera.width;
    const int H = camera.height;
    const auto projected = project(gaussians, camera, settings);
    const auto &contrib  = forward.contrib;
    if (contrib.width != W || contrib.height != H || contrib.offsets.size() != static_cast<std::size_t>(W) * H + 1 ||
        contrib.signature != signature_of(projected, camera)) {
        throw InvalidStateError("render_backward: forward record does not match these Gaussians and camera");
    }
    if (!dRgb.same_shape(W, H) || dRgb.channels != 3 || !dDepth.same_shape(W, H)) {
        throw InvalidStateError("render_backward: gradient images do not match the camera size");
    }

    std::vector<Splat> splats;
    splats.reserve(projected.size());
    for (const auto &p : projected) {
        splats.push_back(prepare_splat(p, camera, settings));
    }

    // Gradients w.r.t. the 2D splat parameters, indexed like `projected`.
    const std::size_t n2d = projected.size();
    std::vector<Vec2> dMean(n2d, Vec2::Zero());
    std::vector<Mat2> dConic(n2d, Mat2::Zero());
    std::vector<double> dOpacity(n2d, 0.0);
    std::vector<Vec3> dColor(n2d, Vec3::Zero());
    std::vector<double> dDepthSplat(n2d, 0.0);

    std::vector<double> alphas;
    std::vector<double> gvals;
    std::vector<double> trans;
    std::vector<Vec2> deltas;
    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
            const std::size_t pix  = static_cast<std::size_t>(y) * W + x;
            const std::uint32_t b0 = contrib.offsets[pix];
            const std::uint32_t b1 = contrib.offsets[pix + 1];
            if (b0 == b1) {
                continue;
            }
            const Vec3 gRgb(dRgb.at(x, y, 0), dRgb.at(x, y, 1), dRgb.at(x, y, 2));
            const double gD = dDepth.at(x, y);

            alphas.clear();
            gvals.clear();
            trans.clear();
            deltas.clear();
            double T = 1.0;
            for (std::uint32_t b = b0; b < b1; ++b) {
                const Splat &s = splats[contrib.splats[b]];
                Vec2 delta;
                const double g = splat_weight(s, x, y, delta);
                const double a = std::min(settings.alpha_max, s.opacity * g);
                alphas.push_back(a);
                gvals.push_back(g);
                trans.push_back(T);
                deltas.push_back(delta);
                T *= (1.0 - a);
            }

            // Back to front: accRgb/accDepth hold sum_{j>i} T_j a_j c_j.
            Vec3 accRgb    = Vec3::Zero();
            double accDepth = 0.0;
            for (std::int64_t k = static_cast<std::int64_t>(b1 - b0) - 1; k >= 0; --k) {
                const std::uint32_t idx = contrib.splats[b0 + k];
                const Splat &s          = splats[idx];
                const double a          = alphas[k];
                const double Ti         = trans[k];
                const double wgt        = Ti * a;

                dColor[idx] += wgt * gRgb;
                dDepthSplat[idx] += wgt * gD;

                const double dAlpha = Ti * (s.color.dot(gRgb) + s.depth * gD) -
                                      (accRgb.dot(gRgb) + accDepth * gD) / (1.0 - a);
                accRgb += wgt * s.color;
                accDepth += wgt * s.depth;

                if (s.opacity * gvals[k] >= settings.alpha_max) {
                    continue; // clamped: alpha is locally constant
                }
                dOpacity[idx] += gvals[k] * dAlpha;
                const double dPower = a * dAlpha;
                const Vec2 &d       = deltas[k];
                dMean[idx] += dPower * (s.conic * d);
                dConic[idx] += -0.5 * dPower * (d * d.transpose());
            }
        }
    }

    GaussianGradients grads(gaussians.size());
    const Mat3 Wr = camera.rotation();
    for (std::size_t k = 0; k < n2d; ++k) {
        const Splat &s = splats[k];
        if (!s.valid) {
            continue;
        }
        const std::size_t src = projected[k].source_index;
        const Gaussian &g     = gaussians[src];

        grads.color[src]   = dColor[k];
        grads.opacity[src] = dOpacity[k];
        grads.mean2d[src]  = dMean[k];

        // conic = cov2d^{-1}  =>  dL/dcov2d = -conic^T dL/dconic conic^T
        const Mat2 dCov2d = -s.conic.transpose() * dConic[k] * s.conic.transpose();

        const Vec3 xc   = camera.to_camera(g.mu);
        const Mat23 J   = projection_jacobian(camera, xc);
        const Mat23 M   = J * Wr;
        const Mat3 cov3 = covariance_of(g);

        const Mat3 dCov3 = M.transpose() * dCov2d * M;
        const Mat23 dM   = (dCov2d + dCov2d.transpose()) * M * cov3;
        const Mat23 dJ   = dM * Wr.transpose();

        const double fx = camera.K(0, 0), sk = camera.K(0, 1), fy = camera.K(1, 1);
        const double z = xc.z(), z2 = z * z;
        const auto cs   = clamped_slopes(camera, xc);
        // d(slope)/d(x, y, z), zero for a clamped slope.
        const double dax = cs.free_a ? 1.0 / z : 0.0, daz = cs.free_a ? -cs.a / z : 0.0;
        const double dby = cs.free_b ? 1.0 / z : 0.0, dbz = cs.free_b ? -cs.b / z : 0.0;
        Vec3 dXc = J.transpose() * dMean[k];
        dXc.z() += dDepthSplat[k];
        // Entries of J that depend on the camera-space point.
        dXc.x() += dJ(0, 2) * (-fx * dax / z);
        dXc.y() += dJ(0, 2) * (-sk * dby / z) + dJ(1, 2) * (-fy * dby / z);
        dXc.z() += dJ(0, 0) * (-fx / z2) + dJ(0, 1) * (-sk / z2) + dJ(1, 1) * (-fy / z2) +
                   dJ(0, 2) * ((fx * cs.a + sk * cs.b) / z2 - (fx * daz + sk * dbz) / z) +
                   dJ(1, 2) * (fy * cs.b / z2 - fy * dbz / z);
        grads.mu[src] = Wr.transpose() * dXc;

        // cov3 = R S^2 R^T
        const Quat qn = normalized_quat(g.rot);
        const Mat3 R  = quat_to_rotation(qn);
        const Vec3 s2 = g.scale.array().square();
        for (int a = 0; a < 3; ++a) {
            const Vec3 r = R.col(a);
            grads.scale[src][a] = 2.0 * g.scale[a] * r.dot(dCov3 * r);
        }
        const Mat3 dR = (dCov3 + dCov3.transpose()) * R * s2.asDiagonal();
        const auto partials = rotation_partials(qn);
        Quat dQn;
        for (int m = 0; m < 4; ++m) {
            dQn[m] = (dR.array() * partials[m].array()).sum();
        }
        const double qnorm = g.rot.norm();
        grads.rot[src]     = (dQn - qn * qn.dot(dQn)) / qnorm;
    }
    return grads;
}

} // namespace refsplat
