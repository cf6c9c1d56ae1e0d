// Copyright Contributors to the refsplat Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "refsplat/deform_net.hpp"
#include "refsplat/scene_model.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace refsplat {

/// Human Gaussians blended to one timestamp, plus what the backward pass needs.
struct DeformedHuman {
    double t = 0.0;
    std::vector<Gaussian> gaussians;
    DeformOutput net;
    Eigen::MatrixXd xbar;              // 3B x N reference positions after mean substitution
    std::vector<Quat> ref_quats;       // N*B, normalized and sign-aligned to reference 0
    std::vector<double> ref_quat_norm; // N*B, |rbar + dr| before normalization
    std::vector<double> ref_quat_sign; // N*B, +1 or -1
    std::vector<double> blend_norm;    // N, |sum w q| before normalization
    Eigen::MatrixXd log_scales;        // 3B x N, log(sbar) + ds
};

/// Reference positions with every slot invisible in its reference frame
/// replaced by the mean of that Gaussian's visible slots.
Eigen::MatrixXd effective_reference_positions(const GaussianFrameSet &frameSet);

/// Evaluates the network at t and blends. Throws RangeError for t outside [0,1].
DeformedHuman deform_at(const GaussianFrameSet &frameSet, const DeformNetParams &params, double t,
                        DeformTape *tape = nullptr);

/// Blends with externally supplied network outputs.
DeformedHuman deform_with(const GaussianFrameSet &frameSet, const DeformOutput &net, double t);

/// Deformed human Gaussians followed by the (unchanged) background.
std::vector<Gaussian> scene_gaussians(const GaussianFrameSet &frameSet, const DeformedHuman &deformed);

struct FrameSetGradients {
    std::vector<std::vector<Vec3>> mu;    // [ref][gaussian]
    std::vector<std::vector<Quat>> rot;   // [ref][gaussian]
    std::vector<std::vector<Vec3>> scale; // [ref][gaussian], w.r.t. the linear scale
    std::vector<double> opacity;          // reference 0 only
    std::vector<Vec3> color;              // reference 0 only

    FrameSetGradients(int numRefs, std::size_t n);
};

struct BlendBackward {
    FrameSetGradients frames;
    DeformOutput net; // dLoss/d(network outputs)
};

/// Chains gradients w.r.t. the deformed Gaussians back to the reference
/// parameters and to the network outputs.
BlendBackward blend_backward(const GaussianFrameSet &frameSet,
                             const DeformedHuman &deformed,
                             std::span<const Vec3> dMu,
                             std::span<const Quat> dRot,
                             std::span<const Vec3> dScale,
                             std::span<const double> dOpacity,
                             std::span<const Vec3> dColor);

/// sum_i sum_x (1 - M_{t_i,t}(x)) w_i(x,t)^2 for one timestamp. visibleAtT holds
/// one flag per human Gaussian. dW (same shape as w) receives the gradient when set.
double weight_penalty(const Eigen::MatrixXd &w, const PerGaussianVisibility &refVis,
                      std::span<const std::uint8_t> visibleAtT, Eigen::MatrixXd *dW = nullptr);

/// Per-Gaussian visibility flags for column `frame` of `vis`, looked up through
/// each Gaussian's seed keypoint.
std::vector<std::uint8_t> visible_at_frame(const GaussianFrameSet &frameSet, const VisibilityMatrix &vis, int frame);

/// L_weight summed over timestamps; column j of `vis` belongs to timestamps[j].
double weight_regularization(const GaussianFrameSet &frameSet, const DeformNetParams &params,
                             std::span<const double> timestamps, const VisibilityMatrix &vis);

} // namespace refsplat
