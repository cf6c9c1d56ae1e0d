// Copyright Contributors to the refsplat Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "refsplat/deform_field.hpp"
#include "refsplat/rasterizer.hpp"
#include "refsplat/shape_init.hpp"

#include <json.hpp>

#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace refsplat {

struct LearningRates {
    double position_init  = 1.6e-4; // multiplied by the scene extent
    double position_final = 1.6e-6;
    double rotation       = 1e-3;
    double scale          = 5e-3;
    double opacity        = 5e-2;
    double color          = 2.5e-3;
    double net            = 1e-4;
};

struct LossWeights {
    double color  = 0.8;
    double dssim  = 0.2;
    double depth  = 0.05;
    double rigid  = 0.01;
    double weight = 0.01;
    double freeze = 1.0;
};

struct DensifyConfig {
    bool enabled          = true;
    int interval          = 500;
    double stop_fraction  = 0.6; // of iters_total
    double grad_threshold = 2e-4;
    double prune_opacity  = 5e-3;
    double split_fraction = 0.01; // clone when max scale <= split_fraction * extent
    int k_nn              = 8;
};

struct TrainConfig {
    int iters_total     = 10000;
    int iters_prefit    = 5000;
    bool prefit_enabled = true;
    LearningRates lr;
    LossWeights weights;
    PrefitConfig prefit; // loss weights of the pre-fit; its iteration count and rate come from above
    int n_freeze     = 10;
    DensifyConfig densify;
    int rigid_neighbors = 8;
    std::uint64_t seed  = 0;
    int checkpoint_interval = 1000;
    std::string checkpoint_dir; // empty disables checkpoint files
    RasterSettings raster;

    /// Throws ConfigError for non-positive rates or iters_prefit >= iters_total.
    void validate() const;
};

struct LossBreakdown {
    double color  = 0.0;
    double dssim  = 0.0;
    double depth  = 0.0;
    double rigid  = 0.0;
    double freeze = 0.0;
    double weight = 0.0;
    double total  = 0.0;
};

/// Neighbor pairs and rest lengths fixed from the first reference frame.
struct RigidGraph {
    std::vector<std::pair<int, int>> edges;
    std::vector<double> rest;
};

RigidGraph build_rigid_graph(std::span<const Vec3> positions, int k);

/// Mean over edges of (|x_i - x_j| - rest)^2; grad (one entry per position) is
/// overwritten when set.
double rigid_loss(const RigidGraph &graph, std::span<const Vec3> positions, std::vector<Vec3> *grad = nullptr);

/// 1 - min(epoch, nFreeze) / nFreeze.
double freeze_coefficient(int epoch, int nFreeze);

/// Deformed positions of the source Gaussians at every training column,
/// captured when joint training starts.
struct FreezeTargets {
    std::map<std::int64_t, std::size_t> root_index;
    std::vector<std::vector<Vec3>> positions; // [column][root]
};

FreezeTargets cache_freeze_targets(const GaussianFrameSet &frameSet, const DeformNetParams &params,
                                   std::span<const double> times);

/// zeta * sum_x |x*_t - target(SRC(x))|^2; zero (and no gradient) when zeta == 0.
double freeze_loss(const GaussianFrameSet &frameSet, std::span<const Vec3> deformed, const FreezeTargets &targets,
                   int column, double zeta, std::vector<Vec3> *grad = nullptr);

struct LossInputs {
    const RenderOutput *rendered     = nullptr;
    const Image *image               = nullptr;
    const DepthMap *depth_star       = nullptr;
    const GaussianFrameSet *frame_set = nullptr;
    const DeformedHuman *deformed    = nullptr;
    const RigidGraph *rigid          = nullptr;
    const FreezeTargets *freeze      = nullptr; // optional
    std::span<const std::uint8_t> visible_at_t;
    int column = 0;
    int epoch  = 0;
};

struct LossGradients {
    Image dRgb;
    DepthMap dDepth;
    std::vector<Vec3> dMu; // w.r.t. deformed human positions (rigid and freeze terms)
    Eigen::MatrixXd dW;    // w.r.t. blend weights (weight term)
};

/// Weighted sum of color, D-SSIM, depth, rigid, freeze and weight terms.
LossBreakdown loss_total(const LossInputs &in, const TrainConfig &config, int nFreeze,
                         LossGradients *grads = nullptr);

/// Per human Gaussian accumulators between density-control events.
struct DensifyStats {
    std::vector<double> grad_sum;
    std::vector<int> count;
    Eigen::MatrixXd weight_sum; // B x N, picks the triggering reference frame

    static DensifyStats zeros(int numRefs, std::size_t n);
};

struct DensifyResult {
    std::vector<std::int64_t> origin; // new human index -> old index, -1 for new children
    int cloned  = 0;
    int split   = 0;
    int pruned  = 0;
    int fallbacks = 0; // identity transports after a degenerate neighbor fit
};

/// Clone, split and prune human Gaussians identically in every reference frame.
DensifyResult densify_sync(GaussianFrameSet &frameSet, const DensifyStats &stats, const DensifyConfig &config,
                           double sceneExtent, std::mt19937_64 &rng);

/// 1.1 x the largest camera-center distance from the mean center; 1 when degenerate.
double scene_extent(std::span<const Camera> cameras);

/// Deforms to t and renders human plus background.
RenderOutput render_at(const GaussianFrameSet &frameSet, const DeformNetParams &params, const Camera &camera,
                       double t, const RasterSettings &settings = {});

struct IterationRecord {
    int iteration = 0; // global, phase 1 first
    int phase     = 1;
    int frame     = 0; // bundle frame index
    LossBreakdown loss;
    std::size_t human_count      = 0;
    std::size_t background_count = 0;
};

struct FrameMetric {
    int frame  = 0;
    double t   = 0.0;
    double psnr = 0.0;
    double ssim = 0.0;
};

struct DensifyEvent {
    int iteration = 0;
    DensifyResult result;
    std::size_t human_count = 0;
};

struct TrainReport {
    std::vector<IterationRecord> iterations;
    std::vector<DensifyEvent> densify;
    std::vector<FrameMetric> held_out;
    double mean_psnr = 0.0;
    double mean_ssim = 0.0;
    double prefit_final_loss = 0.0;
};

/// One JSON object per line: iterations, density events, then held-out metrics.
std::string report_jsonl(const TrainReport &report);

struct TrainResult {
    GaussianFrameSet frame_set;
    DeformNetParams params;
    TrainReport report;
};

using IterationCallback = std::function<void(const IterationRecord &)>;

/// Phase 1 (pre-fit, unless init.prefit_done or disabled) then joint training.
/// Held-out frames are evaluated at the end.
TrainResult train(const PriorBundle &bundle, InitResult init, const TrainConfig &config,
                  const IterationCallback &onIteration = {});

/// PSNR/SSIM of renders at every held-out frame of the bundle.
std::vector<FrameMetric> evaluate_held_out(const PriorBundle &bundle, const GaussianFrameSet &frameSet,
                                           const DeformNetParams &params, const RasterSettings &settings = {});

} // namespace refsplat
