// Copyright Contributors to the refsplat Project
// SPDX-License-Identifier: Apache-2.0

#include "refsplat/deform_field.hpp"

#include "refsplat/errors.hpp"

#include <cmath>

namespace refsplat {

Eigen::MatrixXd
effective_reference_positions(const GaussianFrameSet &fs) {
    const int B          = fs.num_refs();
    const std::size_t N  = fs.num_human();
    Eigen::MatrixXd xbar(3 * B, static_cast<Eigen::Index>(N));
    for (std::size_t k = 0; k < N; ++k) {
        Vec3 sum  = Vec3::Zero();
        int count = 0;
        for (int i = 0; i < B; ++i) {
            if (fs.visibility.visible(k, i)) {
                sum += fs.frames[i][k].mu;
                ++count;
            }
        }
        if (count == 0) {
            throw InvalidStateError("human Gaussian " + std::to_string(fs.frames[0][k].lineage_id) +
                                    " is invisible in every reference frame");
        }
        const Vec3 mean = sum / count;
        for (int i = 0; i < B; ++i) {
            xbar.block<3, 1>(3 * i, k) = fs.visibility.visible(k, i) ? fs.frames[i][k].mu : mean;
        }
    }
    return xbar;
}

DeformedHuman
deform_at(const GaussianFrameSet &fs, const DeformNetParams &params, double t, DeformTape *tape) {
    if (!(t >= 0.0 && t <= 1.0)) {
        throw RangeError("deform_at: t = " + std::to_string(t) + " is outside [0,1]");
    }
    if (params.arch.num_refs != fs.num_refs()) {
        throw NumericalError("deform_at: network expects " + std::to_string(params.arch.num_refs) +
                             " reference frames, frame set has " + std::to_string(fs.num_refs()));
    }
    const Eigen::MatrixXd xbar = effective_reference_positions(fs);
    const Eigen::VectorXd times = Eigen::VectorXd::Constant(xbar.cols(), t);
    DeformOutput net            = deform_forward(params, xbar, times, tape);
    return deform_with(fs, net, t);
}

DeformedHuman
deform_with(const GaussianFrameSet &fs, const DeformOutput &net, double t) {
    if (!(t >= 0.0 && t <= 1.0)) {
        throw RangeError("deform_with: t = " + std::to_string(t) + " is outside [0,1]");
    }
    const int B         = fs.num_refs();
    const std::size_t N = fs.num_human();
    if (net.w.rows() != B || static_cast<std::size_t>(net.count()) != N) {
        throw NumericalError("deform_with: network output shape does not match the frame set");
    }
    DeformedHuman out;
    out.t    = t;
    out.net  = net;
    out.xbar = effective_reference_positions(fs);
    out.gaussians.resize(N);
    out.ref_quats.resize(N * B);
    out.ref_quat_norm.resize(N * B);
    out.ref_quat_sign.resize(N * B);
    out.blend_norm.resize(N);
    out.log_scales.resize(3 * B, static_cast<Eigen::Index>(N));

    for (std::size_t k = 0; k < N; ++k) {
        const auto n = static_cast<Eigen::Index>(k);
        Vec3 mu      = Vec3::Zero();
        Quat qsum    = Quat::Zero();
        Vec3 logS    = Vec3::Zero();
        Quat anchor;
        for (int i = 0; i < B; ++i) {
            const double w  = net.w(i, n);
            const Gaussian &ref = fs.frames[i][k];
            mu += w * (out.xbar.block<3, 1>(3 * i, n) + net.dx.block<3, 1>(3 * i, n));

            const Quat raw     = ref.rot + net.dr.block<4, 1>(4 * i, n);
            const double qnorm = raw.norm();
            if (!(qnorm > 0.0)) {
                throw NumericalError("deform_with: degenerate rotation for Gaussian " + std::to_string(ref.lineage_id));
            }
            Quat q = raw / qnorm;
            if (i == 0) {
                anchor = q;
            }
            const double sign               = q.dot(anchor) < 0.0 ? -1.0 : 1.0;
            out.ref_quats[k * B + i]        = sign * q;
            out.ref_quat_norm[k * B + i]    = qnorm;
            out.ref_quat_sign[k * B + i]    = sign;
            qsum += w * sign * q;

            const Vec3 ls = ref.scale.array().log().matrix() + net.ds.block<3, 1>(3 * i, n);
            out.log_scales.block<3, 1>(3 * i, n) = ls;
            logS += w * ls;
        }
        const double bn = qsum.norm();
        if (!(bn > 0.0)) {
            throw NumericalError("deform_with: blended rotation vanished");
        }
        out.blend_norm[k] = bn;

        Gaussian g   = fs.frames[0][k];
        g.mu         = mu;
        g.rot        = qsum / bn;
        g.scale      = logS.array().exp();
        out.gaussians[k] = g;
    }
    return out;
}

std::vector<Gaussian>
scene_gaussians(const GaussianFrameSet &fs, const DeformedHuman &deformed) {
    std::vector<Gaussian> all;
    all.reserve(deformed.gaussians.size() + fs.background.size());
    all.insert(all.end(), deformed.gaussians.begin(), deformed.gaussians.end());
    all.insert(all.end(), fs.background.begin(), fs.background.end());
    return all;
}

FrameSetGradients::FrameSetGradients(int numRefs, std::size_t n)
    : mu(numRefs, std::vector<Vec3>(n, Vec3::Zero())), rot(numRefs, std::vector<Quat>(n, Quat::Zero())),
      scale(numRefs, std::vector<Vec3>(n, Vec3::Zero())), opacity(n, 0.0), color(n, Vec3::Zero()) {}

BlendBackward
blend_backward(const GaussianFrameSet &fs,
               const DeformedHuman &d,
               std::span<const Vec3> dMu,
               std::span<const Quat> dRot,
               std::span<const Vec3> dScale,
               std::span<const double> dOpacity,
               std::span<const Vec3> dColor) {
    const int B         = fs.num_refs();
    const std::size_t N = fs.num_human();
    if (dMu.size() != N || dRot.size() != N || dScale.size() != N || dOpacity.size() != N || dColor.size() != N ||
        d.gaussians.size() != N) {
        throw InvalidStateError("blend_backward: gradient arrays do not match the deformed set");
    }
    BlendBackward res{FrameSetGradients(B, N), DeformOutput::zeros(B, static_cast<Eigen::Index>(N))};
    auto &gf = res.frames;
    auto &gn = res.net;

    for (std::size_t k = 0; k < N; ++k) {
        const auto n = static_cast<Eigen::Index>(k);
        gf.opacity[k] = dOpacity[k];
        gf.color[k]   = dColor[k];

        // Position: x* = sum_i w_i (xbar_i + dx_i); substituted slots route to visible ones.
        int visibleCount = 0;
        for (int i = 0; i < B; ++i) {
            visibleCount += fs.visibility.visible(k, i) ? 1 : 0;
        }
        for (int i = 0; i < B; ++i) {
            const double w  = d.net.w(i, n);
            const Vec3 slot = d.xbar.block<3, 1>(3 * i, n) + d.net.dx.block<3, 1>(3 * i, n);
            gn.w(i, n) += slot.dot(dMu[k]);
            gn.dx.block<3, 1>(3 * i, n) = w * dMu[k];
            if (fs.visibility.visible(k, i)) {
                gf.mu[i][k] += w * dMu[k];
            } else {
                for (int j = 0; j < B; ++j) {
                    if (fs.visibility.visible(k, j)) {
                        gf.mu[j][k] += (w / visibleCount) * dMu[k];
                    }
                }
            }
        }

        // Rotation: q* = u/|u|, u = sum_i w_i s_i q_i, q_i = v_i/|v_i|, v_i = rbar_i + dr_i.
        const Quat &qStar = d.gaussians[k].rot;
        const Quat dU     = (dRot[k] - qStar * qStar.dot(dRot[k])) / d.blend_norm[k];
        for (int i = 0; i < B; ++i) {
            const Quat &qi   = d.ref_quats[k * B + i]; // already includes the sign
            const double sgn = d.ref_quat_sign[k * B + i];
            gn.w(i, n) += qi.dot(dU);
            const Quat dQi = sgn * d.net.w(i, n) * dU; // w.r.t. the unsigned normalized quaternion
            const Quat qUnsigned = sgn * qi;
            const Quat dV = (dQi - qUnsigned * qUnsigned.dot(dQi)) / d.ref_quat_norm[k * B + i];
            gf.rot[i][k]                  = dV;
            gn.dr.block<4, 1>(4 * i, n)   = dV;
        }

        // Scale: s* = exp(m), m = sum_i w_i (log sbar_i + ds_i).
        const Vec3 dM = dScale[k].cwiseProduct(d.gaussians[k].scale);
        for (int i = 0; i < B; ++i) {
            const double w = d.net.w(i, n);
            gn.w(i, n) += d.log_scales.block<3, 1>(3 * i, n).dot(dM);
            gn.ds.block<3, 1>(3 * i, n) = w * dM;
            gf.scale[i][k] = (w * dM).cwiseQuotient(fs.frames[i][k].scale);
        }
    }
    return res;
}

double
weight_penalty(const Eigen::MatrixXd &w, const PerGaussianVisibility &refVis, std::span<const std::uint8_t> visibleAtT,
               Eigen::MatrixXd *dW) {
    if (static_cast<std::size_t>(w.cols()) != visibleAtT.size() || w.rows() != refVis.num_refs ||
        refVis.size() != visibleAtT.size()) {
        throw InvalidStateError("weight_penalty: shape mismatch");
    }
    if (dW != nullptr) {
        dW->setZero(w.rows(), w.cols());
    }
    double total = 0.0;
    for (Eigen::Index n = 0; n < w.cols(); ++n) {
        for (Eigen::Index i = 0; i < w.rows(); ++i) {
            const bool both = visibleAtT[n] != 0 && refVis.visible(static_cast<std::size_t>(n), static_cast<int>(i));
            if (both) {
                continue;
            }
            total += w(i, n) * w(i, n);
            if (dW != nullptr) {
                (*dW)(i, n) = 2.0 * w(i, n);
            }
        }
    }
    return total;
}

std::vector<std::uint8_t>
visible_at_frame(const GaussianFrameSet &fs, const VisibilityMatrix &vis, int frame) {
    std::vector<std::uint8_t> out(fs.num_human(), 0);
    for (std::size_t k = 0; k < out.size(); ++k) {
        const int row = fs.seed_keypoint[k];
        out[k]        = (row >= 0 && row < vis.keypoints && vis(row, frame)) ? 1 : 0;
    }
    return out;
}

double
weight_regularization(const GaussianFrameSet &fs, const DeformNetParams &params, std::span<const double> timestamps,
                      const VisibilityMatrix &vis) {
    if (static_cast<int>(timestamps.size()) != vis.frames) {
        throw InvalidStateError("weight_regularization: one visibility column per timestamp is required");
    }
    double total = 0.0;
    for (std::size_t j = 0; j < timestamps.size(); ++j) {
        const DeformedHuman d = deform_at(fs, params, timestamps[j]);
        const auto visible    = visible_at_frame(fs, vis, static_cast<int>(j));
        total += weight_penalty(d.net.w, fs.visibility, visible);
    }
    return total;
}

} // namespace refsplat
