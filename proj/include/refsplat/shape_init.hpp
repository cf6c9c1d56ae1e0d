// Copyright Contributors to the refsplat Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "refsplat/deform_net.hpp"
#include "refsplat/scene_model.hpp"

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace refsplat {

// ---------------------------------------------------------------------------
// Depth alignment

struct RansacConfig {
    int iterations          = 2000;
    double threshold_factor = 0.02; // inlier threshold = factor * median(D_sparse)
    int irls_iterations     = 10;
    double min_inlier_ratio = 0.2;
    std::uint64_t seed      = 0;
};

struct ScaleShift {
    double scale        = 1.0;
    double shift        = 0.0;
    double inlier_ratio = 0.0;
    bool degenerate     = false; // inlier_ratio below RansacConfig::min_inlier_ratio
};

/// A generic-depth value paired with the metric depth of a sparse point at the same pixel.
struct DepthSample {
    double com    = 0.0;
    double sparse = 0.0;
};

/// Robust fit of sparse ~ scale * com + shift. The result does not depend on
/// sample order. Throws DataError for fewer than two samples or when every
/// sample has the same generic depth.
ScaleShift ransac_scale_shift(std::span<const DepthSample> samples, const RansacConfig &config = {});

/// Pairs each sparse point that projects inside the image (in front of the
/// camera, onto a valid D_com) with its camera-space depth.
std::vector<DepthSample> sparse_depth_samples(const DepthMap &depthCom, const Camera &camera,
                                              std::span<const Vec3> sparsePoints);

/// Linear-interpolated quantile (the (n-1)q convention). `values` must be nonempty.
double quantile(std::vector<double> values, double q);

struct AffineFit {
    double a = 1.0;
    double b = 0.0;
};

/// Least-squares (a, b) with target ~ a * source + b over three quantile pairs.
AffineFit affine_from_quantiles(const std::array<double, 3> &source, const std::array<double, 3> &target);

/// Matches the 0.1/0.5/0.9 quantiles of depth_hum under the mask to those of
/// depth_com_star under the mask. Throws DataError when fewer than 10 masked
/// pixels carry valid depth in either map.
AffineFit quantile_affine(const DepthMap &depthHum, const DepthMap &depthComStar, const Mask &mask);

/// scale * d + shift at every valid pixel; invalid pixels stay invalid.
DepthMap affine_depth(const DepthMap &depth, double scale, double shift);

/// D* = M * hum + (1 - M) * com, selecting per pixel; sentinels propagate.
DepthMap compose_depth(const Mask &mask, const DepthMap &humStar, const DepthMap &comStar);

struct DepthAlignment {
    double s_star       = 1.0;
    double t_star       = 0.0;
    double a_star       = 1.0;
    double b_star       = 0.0;
    double inlier_ratio = 0.0;
    bool degenerate     = false;
};

struct AlignedFrame {
    DepthAlignment alignment;
    DepthMap depth_star;
};

AlignedFrame align_frame_depth(const FramePriors &frame, const Camera &camera, const RansacConfig &config = {});

// ---------------------------------------------------------------------------
// Keypoints

/// Resamples the tracks of every part onto an n x n uv lattice at cell centers.
/// Node ids are (part - 1) * n * n + row * n + col. A node copies an exactly
/// matching track; otherwise its pixel is the inverse-distance blend of the
/// four nearest visible tracks of that part and it is visible when its nearest
/// track is. Tracks with part_id 0 are ignored.
std::vector<KeypointTrack> keypoint_lattice(std::span<const KeypointTrack> tracks, int n);

/// Keypoint id of lattice node (part, row, col).
int lattice_id(int part, int row, int col, int n);

struct LiftedKeypoints {
    std::vector<std::vector<Vec3>> points; // [column][keypoint]
    VisibilityMatrix vis;                  // keypoints x columns
};

/// Lifts every track at the bundle frames listed in `frames` (one column each);
/// depthStar and cameras are parallel to `frames`. A keypoint whose depth sample
/// is invalid becomes invisible. Throws DataError for a visible pixel outside
/// the image.
LiftedKeypoints lift_keypoints(std::span<const KeypointTrack> tracks, std::span<const DepthMap> depthStar,
                               std::span<const Camera> cameras, std::span<const int> frames);

// ---------------------------------------------------------------------------
// Rotations

/// R minimizing sum |R (a_i - abar) - (b_i - bbar)|^2 with det R = +1. Columns
/// are points. Throws NumericalError for fewer than 3 points or collinear input.
Mat3 procrustes_rotation_matrix(const Eigen::Matrix3Xd &a, const Eigen::Matrix3Xd &b);
Quat procrustes_rotation(const Eigen::Matrix3Xd &a, const Eigen::Matrix3Xd &b);

struct Similarity {
    Mat3 rotation = Mat3::Identity();
    double scale  = 1.0;
};

/// Rotation and isotropic scale mapping the centered cloud a onto b.
Similarity fit_similarity(const Eigen::Matrix3Xd &a, const Eigen::Matrix3Xd &b);

/// Indices of the k nearest points to points[query] among `candidates`, nearest
/// first, ties by index; the query itself is excluded.
std::vector<int> nearest_neighbors(std::span<const Vec3> points, int query, std::span<const int> candidates, int k);

// ---------------------------------------------------------------------------
// Reference frames

struct RefFrameSelection {
    std::vector<int> indices; // 0-based, strictly increasing
    double cost = 0.0;
};

inline constexpr double kMaxReferenceTuples = 1e7;

/// L_ref of one candidate tuple (0-based frame indices).
double reference_cost(const VisibilityMatrix &vis, std::span<const int> indices, double lambdaRef, int nNeigh);

/// Exhaustive minimization of reference_cost over all increasing B-tuples of
/// the T columns of `vis`. Costs within 1e-12 of the best count as ties, which
/// go to the widest span (last minus first index), then to the
/// lexicographically smallest tuple. Throws ConfigError when
/// C(T, B) exceeds kMaxReferenceTuples or B is outside [1, T].
RefFrameSelection select_reference_frames(const VisibilityMatrix &vis, int T, int B, double lambdaRef, int nNeigh);

// ---------------------------------------------------------------------------
// Deformation pre-fit

/// Lifted per-frame targets for every keypoint row of a VisibilityMatrix.
struct DeformTargets {
    std::vector<double> times;                // per column
    std::vector<std::vector<Vec3>> positions; // [column][keypoint]
    std::vector<std::vector<Quat>> rotations; // [column][keypoint]
    Vec3 scale = Vec3::Ones();                // constant target scale
    VisibilityMatrix vis;
};

struct PrefitConfig {
    int iterations       = 5000;
    double learning_rate = 1e-4;
    double lambda_pos    = 1.0;
    double lambda_rot    = 0.1;
    double lambda_scale  = 0.1;
    double lambda_weight = 0.01;
    std::uint64_t seed   = 0;
};

struct DeformLoss {
    double position = 0.0;
    double rotation = 0.0;
    double scale    = 0.0;
    double weight   = 0.0;
    double total    = 0.0;
    std::size_t pairs = 0; // masked (Gaussian, reference) terms
};

/// L_deform (plus lambda_weight * L_weight) for one target column. When
/// upstream is set it receives the gradient w.r.t. the network outputs.
DeformLoss deform_loss_at(const GaussianFrameSet &frameSet, const DeformOutput &net, const DeformTargets &targets,
                          int column, const PrefitConfig &config, DeformOutput *upstream = nullptr);

/// Sum of deform_loss_at over all columns.
DeformLoss deform_loss(const GaussianFrameSet &frameSet, const DeformNetParams &params, const DeformTargets &targets,
                       const PrefitConfig &config);

struct PrefitReport {
    std::vector<double> loss_history; // per iteration, the loss of the sampled column
    std::vector<int> columns;         // per iteration, the sampled column
    DeformLoss final_loss;            // over all columns
};

/// Optimizes the network only, one target column per iteration with the
/// columns visited in seeded random order per pass.
PrefitReport prefit_deformation(const GaussianFrameSet &frameSet, DeformNetParams &params,
                                const DeformTargets &targets, const PrefitConfig &config);

/// Mean |x*_t - target| over visible (Gaussian, column) pairs.
double mean_position_error(const GaussianFrameSet &frameSet, const DeformNetParams &params,
                           const DeformTargets &targets);

// ---------------------------------------------------------------------------
// Full initialization

struct InitConfig {
    int num_refs              = 4;
    double lambda_ref         = 0.2;
    int n_neigh               = 3;
    int lattice_size          = 16;
    int rotation_neighbors    = 8;
    double human_opacity      = 0.9;
    double background_opacity = 0.9;
    int background_neighbors  = 3;
    RansacConfig ransac;
    NetArchitecture arch;
    std::uint64_t seed = 0;
};

struct InitResult {
    std::vector<int> train_frames;     // bundle frame index per column
    std::vector<AlignedFrame> aligned; // per column
    std::vector<KeypointTrack> lattice;
    LiftedKeypoints lifted;
    RefFrameSelection selection; // column indices
    GaussianFrameSet frame_set;
    DeformNetParams params;
    DeformTargets targets;
    double sigma0 = 0.0;
    bool prefit_done = false;
};

/// Depth alignment, lattice resampling, lifting, reference selection, frame-set
/// and background construction and network initialization. Held-out frames
/// are excluded. Does not run the pre-fit.
InitResult initialize(const PriorBundle &bundle, const InitConfig &config);

} // namespace refsplat
