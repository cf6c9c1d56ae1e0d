// Copyright Contributors to the refsplat Project
// SPDX-License-Identifier: Apache-2.0

#include "refsplat/shape_init.hpp"

#include "refsplat/deform_field.hpp"
#include "refsplat/errors.hpp"
#include "refsplat/hash.hpp"
#include "refsplat/optim.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <set>

namespace refsplat {

namespace {

struct LineFit {
    double slope     = 0.0;
    double intercept = 0.0;
    bool ok          = false;
};

/// Weighted least squares sparse ~ slope * com + intercept.
LineFit
weighted_line(std::span<const DepthSample> s, std::span<const double> w) {
    double sw = 0.0, sx = 0.0, sy = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        sw += w[i];
        sx += w[i] * s[i].com;
        sy += w[i] * s[i].sparse;
    }
    if (!(sw > 0.0)) {
        return {};
    }
    const double mx = sx / sw, my = sy / sw;
    double sxx = 0.0, sxy = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        const double dx = s[i].com - mx;
        sxx += w[i] * dx * dx;
        sxy += w[i] * dx * (s[i].sparse - my);
    }
    if (!(sxx > 0.0)) {
        return {};
    }
    LineFit f;
    f.slope     = sxy / sxx;
    f.intercept = my - f.slope * mx;
    f.ok        = true;
    return f;
}

double
sample_image_channel(const Image &img, const Vec2 &p, int c) {
    const double x  = std::clamp(p.x(), 0.0, static_cast<double>(img.width - 1));
    const double y  = std::clamp(p.y(), 0.0, static_cast<double>(img.height - 1));
    const int x0    = std::min(static_cast<int>(std::floor(x)), img.width - 1);
    const int y0    = std::min(static_cast<int>(std::floor(y)), img.height - 1);
    const int x1    = std::min(x0 + 1, img.width - 1);
    const int y1    = std::min(y0 + 1, img.height - 1);
    const double fx = x - x0, fy = y - y0;
    return (1 - fx) * (1 - fy) * img.at(x0, y0, c) + fx * (1 - fy) * img.at(x1, y0, c) +
           (1 - fx) * fy * img.at(x0, y1, c) + fx * fy * img.at(x1, y1, c);
}

Vec3
sample_image(const Image &img, const Vec2 &p) {
    return Vec3(sample_image_channel(img, p, 0), sample_image_channel(img, p, 1), sample_image_channel(img, p, 2));
}

bool
inside_image(const Vec2 &p, int width, int height) {
    return p.x() >= -0.5 && p.x() < width - 0.5 && p.y() >= -0.5 && p.y() < height - 0.5;
}

double
binomial(int n, int k) {
    double r = 1.0;
    for (int i = 1; i <= k; ++i) {
        r = r * (n - k + i) / i;
    }
    return r;
}

using Bitset = std::vector<std::uint64_t>;

std::vector<Bitset>
column_sets(const VisibilityMatrix &vis) {
    const std::size_t words = (static_cast<std::size_t>(vis.keypoints) + 63) / 64;
    std::vector<Bitset> sets(vis.frames, Bitset(words, 0));
    for (int k = 0; k < vis.keypoints; ++k) {
        for (int f = 0; f < vis.frames; ++f) {
            if (vis(k, f)) {
                sets[f][k / 64] |= (std::uint64_t{1} << (k % 64));
            }
        }
    }
    return sets;
}

double
cost_from_sets(const std::vector<Bitset> &sets, int keypoints, int T, std::span<const int> idx, double lambdaRef,
               int nNeigh) {
    const int B = static_cast<int>(idx.size());
    double variance = 0.0;
    if (B >= 2) {
        double mean = 0.0;
        for (int j = 0; j + 1 < B; ++j) {
            mean += idx[j + 1] - idx[j];
        }
        mean /= (B - 1);
        for (int j = 0; j + 1 < B; ++j) {
            const double d = (idx[j + 1] - idx[j]) - mean;
            variance += d * d;
        }
        variance /= (B - 1);
    }
    double coverage = 0.0;
    const std::size_t words = sets.empty() ? 0 : sets.front().size();
    for (int i = 0; i < B; ++i) {
        std::size_t count = 0;
        for (std::size_t w = 0; w < words; ++w) {
            std::uint64_t acc = 0;
            for (int j = i; j < std::min(i + nNeigh, B); ++j) {
                acc |= sets[idx[j]][w];
            }
            count += static_cast<std::size_t>(std::popcount(acc));
        }
        coverage += static_cast<double>(count);
    }
    return variance / T - lambdaRef / keypoints * coverage;
}

} // namespace

// ---------------------------------------------------------------------------
// Depth alignment

ScaleShift
ransac_scale_shift(std::span<const DepthSample> input, const RansacConfig &config) {
    if (input.size() < 2) {
        throw DataError("sparse_points", "count", "depth alignment needs at least 2 samples, got " +
                                                      std::to_string(input.size()));
    }
    std::vector<DepthSample> s(input.begin(), input.end());
    std::sort(s.begin(), s.end(), [](const DepthSample &a, const DepthSample &b) {
        return a.com != b.com ? a.com < b.com : a.sparse < b.sparse;
    });
    if (s.front().com == s.back().com) {
        throw DataError("depth_com", "rank", "all samples share one generic depth; scale is undetermined");
    }

    Fnv1a h;
    h.value(config.seed);
    for (const auto &x : s) {
        h.value(x.com);
        h.value(x.sparse);
    }
    std::mt19937_64 rng(h.digest());
    std::uniform_int_distribution<std::size_t> pick(0, s.size() - 1);

    std::vector<double> sparse(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
        sparse[i] = s[i].sparse;
    }
    const double threshold = config.threshold_factor * std::abs(quantile(sparse, 0.5));

    auto count_inliers = [&](double a, double b) {
        std::size_t n = 0;
        for (const auto &x : s) {
            n += std::abs(a * x.com + b - x.sparse) <= threshold ? 1 : 0;
        }
        return n;
    };

    std::size_t best = 0;
    double bestA = 0.0, bestB = 0.0;
    bool found = false;
    for (int it = 0; it < config.iterations; ++it) {
        const std::size_t i = pick(rng);
        const std::size_t j = pick(rng);
        const double dc     = s[j].com - s[i].com;
        if (i == j || dc == 0.0) {
            continue;
        }
        const double a = (s[j].sparse - s[i].sparse) / dc;
        if (!(a > 0.0)) {
            continue;
        }
        const double b        = s[i].sparse - a * s[i].com;
        const std::size_t cnt = count_inliers(a, b);
        if (!found || cnt > best) {
            best  = cnt;
            bestA = a;
            bestB = b;
            found = true;
        }
    }
    if (!found) {
        throw DataError("depth_com", "rank", "no non-degenerate positive-scale hypothesis found");
    }

    std::vector<DepthSample> inliers;
    for (const auto &x : s) {
        if (std::abs(bestA * x.com + bestB - x.sparse) <= threshold) {
            inliers.push_back(x);
        }
    }
    double a = bestA, b = bestB;
    std::vector<double> w(inliers.size(), 1.0);
    LineFit fit = weighted_line(inliers, w);
    if (fit.ok) {
        a = fit.slope;
        b = fit.intercept;
        for (int it = 0; it < config.irls_iterations; ++it) {
            for (std::size_t i = 0; i < inliers.size(); ++i) {
                w[i] = 1.0 / std::max(std::abs(a * inliers[i].com + b - inliers[i].sparse), 1e-9);
            }
            fit = weighted_line(inliers, w);
            if (!fit.ok) {
                break;
            }
            a = fit.slope;
            b = fit.intercept;
        }
    }
    if (!(a > 0.0) || !std::isfinite(b)) {
        throw NumericalError("depth alignment refit produced a non-positive scale");
    }
    ScaleShift out;
    out.scale        = a;
    out.shift        = b;
    out.inlier_ratio = static_cast<double>(count_inliers(a, b)) / static_cast<double>(s.size());
    out.degenerate   = out.inlier_ratio < config.min_inlier_ratio;
    return out;
}

std::vector<DepthSample>
sparse_depth_samples(const DepthMap &depthCom, const Camera &camera, std::span<const Vec3> sparsePoints) {
    std::vector<DepthSample> out;
    out.reserve(sparsePoints.size());
    for (const auto &p : sparsePoints) {
        const Vec3 c = camera.to_camera(p);
        if (!(c.z() > 0.0)) {
            continue;
        }
        const double d = sample_depth_bilinear(depthCom, camera.project_camera(c));
        if (is_valid_depth(d)) {
            out.push_back({d, c.z()});
        }
    }
    return out;
}

double
quantile(std::vector<double> values, double q) {
    if (values.empty()) {
        throw DataError("depth", "quantile", "no values");
    }
    std::sort(values.begin(), values.end());
    const double h  = (static_cast<double>(values.size()) - 1.0) * q;
    const auto lo   = static_cast<std::size_t>(std::floor(h));
    const auto hi   = std::min(lo + 1, values.size() - 1);
    return values[lo] + (h - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

AffineFit
affine_from_quantiles(const std::array<double, 3> &src, const std::array<double, 3> &dst) {
    const double mx = (src[0] + src[1] + src[2]) / 3.0;
    const double my = (dst[0] + dst[1] + dst[2]) / 3.0;
    double sxx = 0.0, sxy = 0.0;
    for (int i = 0; i < 3; ++i) {
        sxx += (src[i] - mx) * (src[i] - mx);
        sxy += (src[i] - mx) * (dst[i] - my);
    }
    if (!(sxx > 0.0)) {
        throw DataError("depth_hum", "quantiles", "source quantiles coincide; affine is undetermined");
    }
    AffineFit f;
    f.a = sxy / sxx;
    f.b = my - f.a * mx;
    return f;
}

AffineFit
quantile_affine(const DepthMap &depthHum, const DepthMap &depthComStar, const Mask &mask) {
    if (!depthHum.same_shape(mask.width, mask.height) || !depthComStar.same_shape(mask.width, mask.height)) {
        throw DataError("depth_hum", "dimensions", "depth maps and mask differ in size");
    }
    std::vector<double> src, dst;
    for (std::size_t i = 0; i < mask.pixel_count(); ++i) {
        if (mask.data[i] == 0) {
            continue;
        }
        if (is_valid_depth(depthHum.data[i])) {
            src.push_back(depthHum.data[i]);
        }
        if (is_valid_depth(depthComStar.data[i])) {
            dst.push_back(depthComStar.data[i]);
        }
    }
    if (src.size() < 10 || dst.size() < 10) {
        throw DataError("mask", "count", "quantile alignment needs at least 10 masked pixels with valid depth");
    }
    const std::array<double, 3> qs{0.1, 0.5, 0.9};
    std::array<double, 3> a{}, b{};
    for (int i = 0; i < 3; ++i) {
        a[i] = quantile(src, qs[i]);
        b[i] = quantile(dst, qs[i]);
    }
    return affine_from_quantiles(a, b);
}

DepthMap
affine_depth(const DepthMap &depth, double scale, double shift) {
    DepthMap out = depth;
    for (auto &d : out.data) {
        if (is_valid_depth(d)) {
            d = scale * d + shift;
            if (!is_valid_depth(d)) {
                d = kInvalidDepth;
            }
        }
    }
    return out;
}

DepthMap
compose_depth(const Mask &mask, const DepthMap &humStar, const DepthMap &comStar) {
    if (!humStar.same_shape(mask.width, mask.height) || !comStar.same_shape(mask.width, mask.height)) {
        throw DataError("depth", "dimensions", "compose_depth inputs differ in size");
    }
    DepthMap out(mask.width, mask.height, 1, kInvalidDepth);
    for (std::size_t i = 0; i < mask.pixel_count(); ++i) {
        out.data[i] = mask.data[i] != 0 ? humStar.data[i] : comStar.data[i];
    }
    return out;
}

AlignedFrame
align_frame_depth(const FramePriors &frame, const Camera &camera, const RansacConfig &config) {
    const auto samples  = sparse_depth_samples(frame.depth_com, camera, frame.sparse_points);
    const ScaleShift ss = ransac_scale_shift(samples, config);
    const DepthMap com  = affine_depth(frame.depth_com, ss.scale, ss.shift);
    const AffineFit hum = quantile_affine(frame.depth_hum, com, frame.mask);
    if (!(hum.a > 0.0)) {
        throw NumericalError("human depth alignment produced a non-positive scale");
    }
    AlignedFrame out;
    out.alignment  = {ss.scale, ss.shift, hum.a, hum.b, ss.inlier_ratio, ss.degenerate};
    out.depth_star = compose_depth(frame.mask, affine_depth(frame.depth_hum, hum.a, hum.b), com);
    return out;
}

// ---------------------------------------------------------------------------
// Keypoints

int
lattice_id(int part, int row, int col, int n) {
    return (part - 1) * n * n + row * n + col;
}

std::vector<KeypointTrack>
keypoint_lattice(std::span<const KeypointTrack> tracks, int n) {
    if (n < 1) {
        throw ConfigError("lattice size must be at least 1");
    }
    std::map<int, std::vector<const KeypointTrack *>> parts;
    std::size_t frames = 0;
    bool first         = true;
    for (const auto &t : tracks) {
        if (t.part_id == 0) {
            continue;
        }
        if (t.part_id < 0) {
            throw DataError("keypoints.json", "part_id", "negative part id in track " + std::to_string(t.kp_id));
        }
        if (first) {
            frames = t.obs.size();
            first  = false;
        } else if (t.obs.size() != frames) {
            throw DataError("keypoints.json", "obs", "tracks disagree on the number of frames");
        }
        parts[t.part_id].push_back(&t);
    }

    std::vector<KeypointTrack> out;
    for (const auto &[part, members] : parts) {
        for (int row = 0; row < n; ++row) {
            for (int col = 0; col < n; ++col) {
                KeypointTrack node;
                node.kp_id   = lattice_id(part, row, col, n);
                node.part_id = part;
                node.uv      = Vec2((col + 0.5) / n, (row + 0.5) / n);

                std::vector<std::pair<double, const KeypointTrack *>> byDist;
                byDist.reserve(members.size());
                for (const auto *m : members) {
                    byDist.emplace_back((m->uv - node.uv).norm(), m);
                }
                std::stable_sort(byDist.begin(), byDist.end(),
                                 [](const auto &a, const auto &b) { return a.first < b.first; });
                if (byDist.front().first < 1e-9) {
                    node.obs = byDist.front().second->obs;
                    out.push_back(std::move(node));
                    continue;
                }
                node.obs.resize(frames);
                for (std::size_t f = 0; f < frames; ++f) {
                    auto &o = node.obs[f];
                    o.t     = byDist.front().second->obs[f].t;
                    if (!byDist.front().second->obs[f].visible) {
                        continue;
                    }
                    Vec2 acc    = Vec2::Zero();
                    double wsum = 0.0;
                    int used    = 0;
                    for (const auto &[d, m] : byDist) {
                        if (!m->obs[f].visible) {
                            continue;
                        }
                        const double w = 1.0 / d;
                        acc += w * m->obs[f].pixel;
                        wsum += w;
                        if (++used == 4) {
                            break;
                        }
                    }
                    o.pixel   = acc / wsum;
                    o.visible = true;
                }
                out.push_back(std::move(node));
            }
        }
    }
    return out;
}

LiftedKeypoints
lift_keypoints(std::span<const KeypointTrack> tracks, std::span<const DepthMap> depthStar,
               std::span<const Camera> cameras, std::span<const int> frames) {
    if (depthStar.size() != frames.size() || cameras.size() != frames.size()) {
        throw InvalidStateError("lift_keypoints: depth maps and cameras must be parallel to the frame list");
    }
    const int K = static_cast<int>(tracks.size());
    const int F = static_cast<int>(frames.size());
    LiftedKeypoints out;
    out.vis = VisibilityMatrix(K, F);
    out.points.assign(F, std::vector<Vec3>(K, Vec3::Zero()));
    for (int j = 0; j < F; ++j) {
        const Camera &cam   = cameras[j];
        const DepthMap &dep = depthStar[j];
        if (!dep.same_shape(cam.width, cam.height)) {
            throw DataError("frame_" + std::to_string(frames[j]), "depth", "depth size differs from the camera");
        }
        for (int k = 0; k < K; ++k) {
            const auto &track = tracks[k];
            if (frames[j] < 0 || static_cast<std::size_t>(frames[j]) >= track.obs.size()) {
                throw DataError("keypoints.json", "obs", "track " + std::to_string(track.kp_id) + " has no frame " +
                                                             std::to_string(frames[j]));
            }
            const auto &o = track.obs[frames[j]];
            if (!o.visible) {
                continue;
            }
            if (!inside_image(o.pixel, cam.width, cam.height)) {
                throw DataError("keypoints.json", "pixel", "track " + std::to_string(track.kp_id) +
                                                               " is visible outside the image in frame " +
                                                               std::to_string(frames[j]));
            }
            const double d = sample_depth_bilinear(dep, o.pixel);
            if (!is_valid_depth(d) || d <= 0.0) {
                continue;
            }
            out.points[j][k] = cam.unproject(o.pixel, d);
            out.vis.set(k, j, true);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Rotations

namespace {

struct CrossCovariance {
    Eigen::JacobiSVD<Mat3> svd;
    double varA = 0.0;
};

CrossCovariance
cross_covariance(const Eigen::Matrix3Xd &a, const Eigen::Matrix3Xd &b) {
    if (a.cols() != b.cols()) {
        throw NumericalError("procrustes: point clouds differ in size");
    }
    if (a.cols() < 3) {
        throw NumericalError("procrustes: at least 3 points are required");
    }
    const Vec3 ma             = a.rowwise().mean();
    const Vec3 mb             = b.rowwise().mean();
    const Eigen::Matrix3Xd ca = a.colwise() - ma;
    const Eigen::Matrix3Xd cb = b.colwise() - mb;
    const Mat3 H              = ca * cb.transpose();
    CrossCovariance out{Eigen::JacobiSVD<Mat3>(H, Eigen::ComputeFullU | Eigen::ComputeFullV), ca.squaredNorm()};
    const auto &sv = out.svd.singularValues();
    if (!(sv(0) > 0.0) || sv(1) <= 1e-12 * sv(0)) {
        throw NumericalError("procrustes: degenerate geometry (collinear or coincident points)");
    }
    return out;
}

} // namespace

Mat3
procrustes_rotation_matrix(const Eigen::Matrix3Xd &a, const Eigen::Matrix3Xd &b) {
    const auto cc  = cross_covariance(a, b);
    const Mat3 &U  = cc.svd.matrixU();
    const Mat3 &V  = cc.svd.matrixV();
    const double d = (V * U.transpose()).determinant() < 0.0 ? -1.0 : 1.0;
    return V * Eigen::Vector3d(1.0, 1.0, d).asDiagonal() * U.transpose();
}

Quat
procrustes_rotation(const Eigen::Matrix3Xd &a, const Eigen::Matrix3Xd &b) {
    return rotation_to_quat(procrustes_rotation_matrix(a, b));
}

Similarity
fit_similarity(const Eigen::Matrix3Xd &a, const Eigen::Matrix3Xd &b) {
    const auto cc  = cross_covariance(a, b);
    const Mat3 &U  = cc.svd.matrixU();
    const Mat3 &V  = cc.svd.matrixV();
    const double d = (V * U.transpose()).determinant() < 0.0 ? -1.0 : 1.0;
    Similarity s;
    s.rotation     = V * Eigen::Vector3d(1.0, 1.0, d).asDiagonal() * U.transpose();
    const auto &sv = cc.svd.singularValues();
    s.scale        = (sv(0) + sv(1) + d * sv(2)) / cc.varA;
    if (!(s.scale > 0.0) || !std::isfinite(s.scale)) {
        throw NumericalError("fit_similarity: non-positive scale");
    }
    return s;
}

std::vector<int>
nearest_neighbors(std::span<const Vec3> points, int query, std::span<const int> candidates, int k) {
    std::vector<std::pair<double, int>> d;
    d.reserve(candidates.size());
    for (int c : candidates) {
        if (c != query) {
            d.emplace_back((points[c] - points[query]).squaredNorm(), c);
        }
    }
    const auto take = std::min<std::size_t>(static_cast<std::size_t>(std::max(k, 0)), d.size());
    std::partial_sort(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(take), d.end());
    std::vector<int> out(take);
    for (std::size_t i = 0; i < take; ++i) {
        out[i] = d[i].second;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reference frames

double
reference_cost(const VisibilityMatrix &vis, std::span<const int> indices, double lambdaRef, int nNeigh) {
    if (vis.keypoints <= 0 || vis.frames <= 0) {
        throw DataError("keypoints.json", "visibility", "visibility matrix is empty");
    }
    for (std::size_t j = 0; j < indices.size(); ++j) {
        if (indices[j] < 0 || indices[j] >= vis.frames || (j > 0 && indices[j] <= indices[j - 1])) {
            throw RangeError("reference_cost: indices must be strictly increasing frame columns");
        }
    }
    return cost_from_sets(column_sets(vis), vis.keypoints, vis.frames, indices, lambdaRef, nNeigh);
}

RefFrameSelection
select_reference_frames(const VisibilityMatrix &vis, int T, int B, double lambdaRef, int nNeigh) {
    if (T != vis.frames) {
        throw ConfigError("select_reference_frames: T = " + std::to_string(T) + " but visibility has " +
                          std::to_string(vis.frames) + " frames");
    }
    if (B < 1 || B > T) {
        throw ConfigError("select_reference_frames: need 1 <= B <= T, got B = " + std::to_string(B));
    }
    if (nNeigh < 1) {
        throw ConfigError("select_reference_frames: N_neigh must be at least 1");
    }
    if (vis.keypoints <= 0) {
        throw DataError("keypoints.json", "visibility", "visibility matrix is empty");
    }
    if (binomial(T, B) > kMaxReferenceTuples) {
        throw ConfigError("select_reference_frames: C(" + std::to_string(T) + ", " + std::to_string(B) +
                          ") exceeds the exhaustive-search bound of 1e7 tuples");
    }
    const auto sets = column_sets(vis);
    std::vector<int> idx(B);
    std::iota(idx.begin(), idx.end(), 0);
    RefFrameSelection best;
    bool have = false;
    while (true) {
        const double c = cost_from_sets(sets, vis.keypoints, T, idx, lambdaRef, nNeigh);
        const bool tie = have && std::abs(c - best.cost) <= 1e-12;
        if (!have || c < best.cost - 1e-12 ||
            (tie && idx.back() - idx.front() > best.indices.back() - best.indices.front())) {
            best.cost    = c;
            best.indices = idx;
            have         = true;
        }
        int i = B - 1;
        while (i >= 0 && idx[i] == T - B + i) {
            --i;
        }
        if (i < 0) {
            break;
        }
        ++idx[i];
        for (int j = i + 1; j < B; ++j) {
            idx[j] = idx[j - 1] + 1;
        }
    }
    return best;
}

// ---------------------------------------------------------------------------
// Deformation pre-fit

DeformLoss
deform_loss_at(const GaussianFrameSet &fs, const DeformOutput &net, const DeformTargets &targets, int column,
               const PrefitConfig &config, DeformOutput *upstream) {
    const int B         = fs.num_refs();
    const std::size_t N = fs.num_human();
    if (static_cast<std::size_t>(net.count()) != N || net.w.rows() != B) {
        throw InvalidStateError("deform_loss_at: network output does not match the frame set");
    }
    if (column < 0 || column >= targets.vis.frames) {
        throw RangeError("deform_loss_at: column out of range");
    }
    if (upstream != nullptr) {
        *upstream = DeformOutput::zeros(B, static_cast<Eigen::Index>(N));
    }
    DeformLoss L;
    const auto visible = visible_at_frame(fs, targets.vis, column);
    for (std::size_t k = 0; k < N; ++k) {
        if (visible[k] == 0) {
            continue;
        }
        const auto n       = static_cast<Eigen::Index>(k);
        const int row      = fs.seed_keypoint[k];
        const Vec3 &xTgt   = targets.positions[column][row];
        const Quat &rTgt   = targets.rotations[column][row];
        for (int i = 0; i < B; ++i) {
            if (!fs.visibility.visible(k, i)) {
                continue;
            }
            const Gaussian &ref = fs.frames[i][k];
            ++L.pairs;

            const Vec3 dp = ref.mu + net.dx.block<3, 1>(3 * i, n) - xTgt;
            L.position += config.lambda_pos * dp.squaredNorm();

            const Quat v       = ref.rot + net.dr.block<4, 1>(4 * i, n);
            const double vn    = v.norm();
            const Quat q       = v / vn;
            const double sgn   = q.dot(rTgt) < 0.0 ? -1.0 : 1.0;
            const Quat dq      = sgn * q - rTgt;
            L.rotation += config.lambda_rot * dq.squaredNorm();

            const Vec3 ls = ref.scale.array().log().matrix() + net.ds.block<3, 1>(3 * i, n);
            const Vec3 s  = ls.array().exp();
            const Vec3 ds = s - targets.scale;
            L.scale += config.lambda_scale * ds.squaredNorm();

            if (upstream != nullptr) {
                upstream->dx.block<3, 1>(3 * i, n) += 2.0 * config.lambda_pos * dp;
                const Quat gq = 2.0 * config.lambda_rot * sgn * dq;
                upstream->dr.block<4, 1>(4 * i, n) += (gq - q * q.dot(gq)) / vn;
                upstream->ds.block<3, 1>(3 * i, n) += 2.0 * config.lambda_scale * ds.cwiseProduct(s);
            }
        }
    }
    Eigen::MatrixXd dW;
    L.weight = config.lambda_weight *
               weight_penalty(net.w, fs.visibility, visible, upstream != nullptr ? &dW : nullptr);
    if (upstream != nullptr) {
        upstream->w += config.lambda_weight * dW;
    }
    L.total = L.position + L.rotation + L.scale + L.weight;
    return L;
}

DeformLoss
deform_loss(const GaussianFrameSet &fs, const DeformNetParams &params, const DeformTargets &targets,
            const PrefitConfig &config) {
    const Eigen::MatrixXd xbar = effective_reference_positions(fs);
    DeformLoss sum;
    for (int c = 0; c < targets.vis.frames; ++c) {
        const Eigen::VectorXd times = Eigen::VectorXd::Constant(xbar.cols(), targets.times[c]);
        const DeformOutput net      = deform_forward(params, xbar, times);
        const DeformLoss L          = deform_loss_at(fs, net, targets, c, config);
        sum.position += L.position;
        sum.rotation += L.rotation;
        sum.scale += L.scale;
        sum.weight += L.weight;
        sum.total += L.total;
        sum.pairs += L.pairs;
    }
    return sum;
}

PrefitReport
prefit_deformation(const GaussianFrameSet &fs, DeformNetParams &params, const DeformTargets &targets,
                   const PrefitConfig &config) {
    if (targets.vis.frames <= 0 || static_cast<int>(targets.times.size()) != targets.vis.frames) {
        throw InvalidStateError("prefit_deformation: targets carry no frames");
    }
    PrefitReport report;
    report.loss_history.reserve(static_cast<std::size_t>(std::max(config.iterations, 0)));
    const Eigen::MatrixXd xbar = effective_reference_positions(fs);
    std::mt19937_64 rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
    std::vector<int> order(targets.vis.frames);
    std::iota(order.begin(), order.end(), 0);
    Adam adam;
    Eigen::VectorXd flat = params.flatten();
    for (int it = 0; it < config.iterations; ++it) {
        const int slot = it % targets.vis.frames;
        if (slot == 0) {
            std::shuffle(order.begin(), order.end(), rng);
        }
        const int column            = order[slot];
        const Eigen::VectorXd times = Eigen::VectorXd::Constant(xbar.cols(), targets.times[column]);
        DeformTape tape;
        const DeformOutput net = deform_forward(params, xbar, times, &tape);
        DeformOutput upstream;
        const DeformLoss L = deform_loss_at(fs, net, targets, column, config, &upstream);
        if (!std::isfinite(L.total)) {
            throw NumericalError("prefit_deformation: non-finite loss at iteration " + std::to_string(it));
        }
        report.loss_history.push_back(L.total);
        report.columns.push_back(column);
        const DeformBackwardResult back = deform_backward(params, tape, upstream);
        adam.begin_step();
        adam.update("net", flat, back.grad.flatten(), config.learning_rate);
        params.assign(flat);
    }
    report.final_loss = deform_loss(fs, params, targets, config);
    return report;
}

double
mean_position_error(const GaussianFrameSet &fs, const DeformNetParams &params, const DeformTargets &targets) {
    double sum        = 0.0;
    std::size_t count = 0;
    for (int c = 0; c < targets.vis.frames; ++c) {
        const DeformedHuman d = deform_at(fs, params, targets.times[c]);
        for (std::size_t k = 0; k < fs.num_human(); ++k) {
            const int row = fs.seed_keypoint[k];
            if (targets.vis(row, c)) {
                sum += (d.gaussians[k].mu - targets.positions[c][row]).norm();
                ++count;
            }
        }
    }
    return count == 0 ? 0.0 : sum / static_cast<double>(count);
}

// ---------------------------------------------------------------------------
// Full initialization

InitResult
initialize(const PriorBundle &bundle, const InitConfig &config) {
    const int F = static_cast<int>(bundle.num_frames());
    if (static_cast<int>(bundle.cameras.size()) != F) {
        throw DataError("cameras.json", "count", "camera count differs from frame count");
    }
    InitResult r;
    for (int f = 0; f < F; ++f) {
        if (!is_held_out(f)) {
            r.train_frames.push_back(f);
        }
    }
    const int C = static_cast<int>(r.train_frames.size());
    if (config.num_refs < 1 || config.num_refs > C) {
        throw ConfigError("num_refs = " + std::to_string(config.num_refs) + " but only " + std::to_string(C) +
                          " training frames are available");
    }

    // Depth alignment and lifting.
    std::vector<DepthMap> depthStar;
    std::vector<Camera> cams;
    for (int f : r.train_frames) {
        RansacConfig rc = config.ransac;
        rc.seed ^= static_cast<std::uint64_t>(f);
        r.aligned.push_back(align_frame_depth(bundle.frames[f], bundle.cameras[f], rc));
        depthStar.push_back(r.aligned.back().depth_star);
        cams.push_back(bundle.cameras[f]);
    }
    r.lattice = keypoint_lattice(bundle.tracks, config.lattice_size);
    if (r.lattice.empty()) {
        throw DataError("keypoints.json", "part_id", "no tracks carry a body-part id");
    }
    r.lifted     = lift_keypoints(r.lattice, depthStar, cams, r.train_frames);
    const auto &P = r.lifted.points;
    const auto &V = r.lifted.vis;
    const int K   = V.keypoints;

    r.selection = select_reference_frames(V, C, config.num_refs, config.lambda_ref, config.n_neigh);
    const int B = config.num_refs;

    // Constant initial scale from the first training frame.
    std::vector<int> vis0;
    for (int k = 0; k < K; ++k) {
        if (V(k, 0)) {
            vis0.push_back(k);
        }
    }
    std::vector<double> nn;
    for (int k : vis0) {
        const auto near = nearest_neighbors(P[0], k, vis0, 1);
        if (!near.empty()) {
            nn.push_back((P[0][near[0]] - P[0][k]).norm());
        }
    }
    if (nn.empty()) {
        throw DataError("keypoints.json", "visible", "fewer than two keypoints are visible in the first frame");
    }
    r.sigma0 = std::max(0.5 * quantile(nn, 0.5), 1e-6);

    // Per-frame rotation targets from neighbor constellations.
    std::vector<std::vector<Quat>> rot(C, std::vector<Quat>(K, identity_quat()));
    for (int k = 0; k < K; ++k) {
        int anchor = -1;
        for (int c = 0; c < C && anchor < 0; ++c) {
            anchor = V(k, c) ? c : -1;
        }
        if (anchor < 0) {
            continue;
        }
        std::vector<int> cand;
        for (int j = 0; j < K; ++j) {
            if (V(j, anchor)) {
                cand.push_back(j);
            }
        }
        std::vector<int> hood = nearest_neighbors(P[anchor], k, cand, config.rotation_neighbors);
        hood.insert(hood.begin(), k);
        for (int c = 0; c < C; ++c) {
            std::vector<int> common;
            for (int j : hood) {
                if (V(j, c)) {
                    common.push_back(j);
                }
            }
            Quat q = c > 0 ? rot[c - 1][k] : identity_quat();
            if (common.size() >= 3) {
                Eigen::Matrix3Xd a(3, common.size()), b(3, common.size());
                for (std::size_t m = 0; m < common.size(); ++m) {
                    a.col(static_cast<Eigen::Index>(m)) = P[anchor][common[m]];
                    b.col(static_cast<Eigen::Index>(m)) = P[c][common[m]];
                }
                try {
                    q = procrustes_rotation(a, b);
                } catch (const NumericalError &) {
                }
            }
            rot[c][k] = q;
        }
    }

    // Human Gaussians: one per keypoint seen in at least one reference frame.
    auto &fs = r.frame_set;
    for (int c : r.selection.indices) {
        fs.ref_times.push_back(bundle.frames[r.train_frames[c]].t);
    }
    fs.frames.assign(B, {});
    fs.visibility.num_refs = B;
    std::int64_t nextId    = 0;
    for (int k = 0; k < K; ++k) {
        int firstRef = -1;
        Vec3 mean    = Vec3::Zero();
        int count    = 0;
        for (int i = 0; i < B; ++i) {
            if (V(k, r.selection.indices[i])) {
                firstRef = firstRef < 0 ? i : firstRef;
                mean += P[r.selection.indices[i]][k];
                ++count;
            }
        }
        if (count == 0) {
            continue;
        }
        mean /= count;
        const int colorCol  = r.selection.indices[firstRef];
        const int colorFrm  = r.train_frames[colorCol];
        const Vec2 pixel    = r.lattice[k].obs[colorFrm].pixel;
        const Vec3 color    = sample_image(bundle.frames[colorFrm].image, pixel).cwiseMax(0.0).cwiseMin(1.0);
        for (int i = 0; i < B; ++i) {
            const int col = r.selection.indices[i];
            const bool v  = V(k, col);
            Gaussian g;
            g.mu         = v ? P[col][k] : mean;
            g.rot        = rot[col][k];
            g.scale      = Vec3::Constant(r.sigma0);
            g.opacity    = config.human_opacity;
            g.color      = color;
            g.lineage_id = nextId;
            fs.frames[i].push_back(g);
            fs.visibility.flags.push_back(v ? 1 : 0);
        }
        fs.seed_keypoint.push_back(k);
        ++nextId;
    }
    if (fs.num_human() == 0) {
        throw DataError("keypoints.json", "visible", "no keypoint is visible in any reference frame");
    }

    // Background from the union of sparse points of the training frames.
    std::vector<Vec3> pts;
    std::set<std::array<double, 3>> seen;
    for (int f : r.train_frames) {
        for (const auto &p : bundle.frames[f].sparse_points) {
            if (seen.insert({p.x(), p.y(), p.z()}).second) {
                pts.push_back(p);
            }
        }
    }
    std::vector<int> all(pts.size());
    std::iota(all.begin(), all.end(), 0);
    for (std::size_t m = 0; m < pts.size(); ++m) {
        Vec3 color = Vec3::Constant(0.5);
        bool found = false;
        for (int pass = 0; pass < 2 && !found; ++pass) {
            for (int f : r.train_frames) {
                const Camera &cam = bundle.cameras[f];
                const Vec3 c      = cam.to_camera(pts[m]);
                if (!(c.z() > 0.0)) {
                    continue;
                }
                const Vec2 px = cam.project_camera(c);
                if (!inside_image(px, cam.width, cam.height)) {
                    continue;
                }
                const int x = std::clamp(static_cast<int>(std::lround(px.x())), 0, cam.width - 1);
                const int y = std::clamp(static_cast<int>(std::lround(px.y())), 0, cam.height - 1);
                if (pass == 0 && bundle.frames[f].mask.at(x, y) != 0) {
                    continue;
                }
                const auto &img = bundle.frames[f].image;
                color           = Vec3(img.at(x, y, 0), img.at(x, y, 1), img.at(x, y, 2));
                found           = true;
                break;
            }
        }
        double scale = r.sigma0;
        const auto near = nearest_neighbors(pts, static_cast<int>(m), all, config.background_neighbors);
        if (!near.empty()) {
            double acc = 0.0;
            for (int j : near) {
                acc += (pts[j] - pts[m]).squaredNorm();
            }
            scale = std::max(std::sqrt(acc / static_cast<double>(near.size())), 1e-4);
        }
        Gaussian g;
        g.mu         = pts[m];
        g.scale      = Vec3::Constant(scale);
        g.opacity    = config.background_opacity;
        g.color      = color.cwiseMax(0.0).cwiseMin(1.0);
        g.lineage_id = nextId++;
        fs.background.push_back(g);
    }
    fs.check_synchronized();

    NetArchitecture arch = config.arch;
    arch.num_refs        = B;
    r.params             = DeformNetParams::initialize(arch, config.seed);

    r.targets.vis       = V;
    r.targets.positions = P;
    r.targets.rotations = rot;
    r.targets.scale     = Vec3::Constant(r.sigma0);
    for (int f : r.train_frames) {
        r.targets.times.push_back(bundle.frames[f].t);
    }
    return r;
}

} // namespace refsplat
