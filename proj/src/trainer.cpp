// Copyright Contributors to the refsplat Project
// SPDX-License-Identifier: Apache-2.0

#include "refsplat/trainer.hpp"

#include "refsplat/errors.hpp"
#include "refsplat/io.hpp"
#include "refsplat/metrics.hpp"
#include "refsplat/optim.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

namespace refsplat {

using nlohmann::json;

void
TrainConfig::validate() const {
    const double rates[] = {lr.position_init, lr.position_final, lr.rotation, lr.scale, lr.opacity, lr.color, lr.net};
    for (double r : rates) {
        if (!(r > 0.0)) {
            throw ConfigError("train: every learning rate must be positive");
        }
    }
    if (iters_prefit < 0 || iters_prefit >= iters_total) {
        throw ConfigError("train: need 0 <= iters_prefit < iters_total, got " + std::to_string(iters_prefit) +
                          " and " + std::to_string(iters_total));
    }
    if (n_freeze < 1) {
        throw ConfigError("train: n_freeze must be at least 1");
    }
    if (densify.interval < 1 || densify.k_nn < 1) {
        throw ConfigError("train: densify interval and k_nn must be positive");
    }
    if (rigid_neighbors < 1) {
        throw ConfigError("train: rigid_neighbors must be positive");
    }
}

// ---------------------------------------------------------------------------
// Loss terms

RigidGraph
build_rigid_graph(std::span<const Vec3> positions, int k) {
    RigidGraph g;
    std::vector<int> all(positions.size());
    std::iota(all.begin(), all.end(), 0);
    for (int i = 0; i < static_cast<int>(positions.size()); ++i) {
        for (int j : nearest_neighbors(positions, i, all, k)) {
            g.edges.emplace_back(i, j);
            g.rest.push_back((positions[i] - positions[j]).norm());
        }
    }
    return g;
}

double
rigid_loss(const RigidGraph &graph, std::span<const Vec3> x, std::vector<Vec3> *grad) {
    if (grad != nullptr) {
        grad->assign(x.size(), Vec3::Zero());
    }
    if (graph.edges.empty()) {
        return 0.0;
    }
    const double inv = 1.0 / static_cast<double>(graph.edges.size());
    double total     = 0.0;
    for (std::size_t e = 0; e < graph.edges.size(); ++e) {
        const auto [i, j] = graph.edges[e];
        const Vec3 d      = x[i] - x[j];
        const double len  = d.norm();
        const double r    = len - graph.rest[e];
        total += r * r;
        if (grad != nullptr && len > 0.0) {
            const Vec3 g = (2.0 * r * inv / len) * d;
            (*grad)[i] += g;
            (*grad)[j] -= g;
        }
    }
    return total * inv;
}

double
freeze_coefficient(int epoch, int nFreeze) {
    if (nFreeze < 1) {
        throw ConfigError("n_freeze must be at least 1");
    }
    return 1.0 - static_cast<double>(std::min(std::max(epoch, 0), nFreeze)) / static_cast<double>(nFreeze);
}

FreezeTargets
cache_freeze_targets(const GaussianFrameSet &fs, const DeformNetParams &params, std::span<const double> times) {
    FreezeTargets ft;
    std::vector<std::size_t> slot(fs.num_human());
    for (std::size_t k = 0; k < fs.num_human(); ++k) {
        const std::int64_t root = fs.source_of(fs.frames[0][k].lineage_id);
        auto [it, fresh]        = ft.root_index.emplace(root, ft.root_index.size());
        slot[k]                 = it->second;
        (void)fresh;
    }
    for (double t : times) {
        const DeformedHuman d = deform_at(fs, params, t);
        std::vector<Vec3> col(ft.root_index.size(), Vec3::Zero());
        for (std::size_t k = 0; k < fs.num_human(); ++k) {
            col[slot[k]] = d.gaussians[k].mu;
        }
        ft.positions.push_back(std::move(col));
    }
    return ft;
}

double
freeze_loss(const GaussianFrameSet &fs, std::span<const Vec3> deformed, const FreezeTargets &targets, int column,
            double zeta, std::vector<Vec3> *grad) {
    if (grad != nullptr) {
        grad->assign(deformed.size(), Vec3::Zero());
    }
    if (zeta == 0.0) {
        return 0.0;
    }
    if (column < 0 || column >= static_cast<int>(targets.positions.size())) {
        throw RangeError("freeze_loss: column out of range");
    }
    double total = 0.0;
    for (std::size_t k = 0; k < deformed.size(); ++k) {
        const auto it = targets.root_index.find(fs.source_of(fs.frames[0][k].lineage_id));
        if (it == targets.root_index.end()) {
            continue;
        }
        const Vec3 d = deformed[k] - targets.positions[column][it->second];
        total += d.squaredNorm();
        if (grad != nullptr) {
            (*grad)[k] = 2.0 * zeta * d;
        }
    }
    return zeta * total;
}

LossBreakdown
loss_total(const LossInputs &in, const TrainConfig &config, int nFreeze, LossGradients *grads) {
    const RenderOutput &r = *in.rendered;
    const Image &img      = *in.image;
    if (!img.same_shape(r.rgb.width, r.rgb.height) || img.channels != r.rgb.channels ||
        !in.depth_star->same_shape(r.depth.width, r.depth.height)) {
        throw DataError("priors", "dimensions", "rendered and prior rasters differ in size");
    }
    const auto &w = config.weights;
    LossBreakdown L;

    if (grads != nullptr) {
        grads->dRgb   = Image(img.width, img.height, img.channels, 0.0);
        grads->dDepth = DepthMap(img.width, img.height, 1, 0.0);
    }

    const double invN = 1.0 / static_cast<double>(img.data.size());
    for (std::size_t i = 0; i < img.data.size(); ++i) {
        const double d = r.rgb.data[i] - img.data[i];
        L.color += std::abs(d);
        if (grads != nullptr) {
            grads->dRgb.data[i] = w.color * invN * static_cast<double>((d > 0.0) - (d < 0.0));
        }
    }
    L.color *= invN;

    Image dSsim;
    const double s = grads != nullptr ? ssim_with_grad(r.rgb, img, dSsim) : ssim(r.rgb, img);
    L.dssim        = 1.0 - s;
    if (grads != nullptr) {
        for (std::size_t i = 0; i < dSsim.data.size(); ++i) {
            grads->dRgb.data[i] -= w.dssim * dSsim.data[i];
        }
    }

    std::size_t gated = 0;
    const auto &dstar = *in.depth_star;
    for (std::size_t p = 0; p < dstar.pixel_count(); ++p) {
        gated += (r.alpha.data[p] > 0.5 && is_valid_depth(dstar.data[p])) ? 1 : 0;
    }
    if (gated > 0) {
        const double inv = 1.0 / static_cast<double>(gated);
        for (std::size_t p = 0; p < dstar.pixel_count(); ++p) {
            if (!(r.alpha.data[p] > 0.5 && is_valid_depth(dstar.data[p]))) {
                continue;
            }
            const double d = r.depth.data[p] - dstar.data[p];
            L.depth += std::abs(d) * inv;
            if (grads != nullptr) {
                grads->dDepth.data[p] = w.depth * inv * static_cast<double>((d > 0.0) - (d < 0.0));
            }
        }
    }

    const auto &human = in.deformed->gaussians;
    std::vector<Vec3> pos(human.size());
    for (std::size_t k = 0; k < human.size(); ++k) {
        pos[k] = human[k].mu;
    }
    std::vector<Vec3> gRigid, gFreeze;
    L.rigid = in.rigid != nullptr ? rigid_loss(*in.rigid, pos, grads != nullptr ? &gRigid : nullptr) : 0.0;
    if (in.freeze != nullptr) {
        const double zeta = freeze_coefficient(in.epoch, nFreeze);
        L.freeze = freeze_loss(*in.frame_set, pos, *in.freeze, in.column, zeta, grads != nullptr ? &gFreeze : nullptr);
    }
    Eigen::MatrixXd dW;
    L.weight = weight_penalty(in.deformed->net.w, in.frame_set->visibility, in.visible_at_t,
                              grads != nullptr ? &dW : nullptr);

    if (grads != nullptr) {
        grads->dMu.assign(human.size(), Vec3::Zero());
        for (std::size_t k = 0; k < human.size(); ++k) {
            if (!gRigid.empty()) {
                grads->dMu[k] += w.rigid * gRigid[k];
            }
            if (!gFreeze.empty()) {
                grads->dMu[k] += w.freeze * gFreeze[k];
            }
        }
        grads->dW = w.weight * dW;
    }
    L.total = w.color * L.color + w.dssim * L.dssim + w.depth * L.depth + w.rigid * L.rigid + w.freeze * L.freeze +
              w.weight * L.weight;
    return L;
}

// ---------------------------------------------------------------------------
// Density control

DensifyStats
DensifyStats::zeros(int numRefs, std::size_t n) {
    DensifyStats s;
    s.grad_sum.assign(n, 0.0);
    s.count.assign(n, 0);
    s.weight_sum = Eigen::MatrixXd::Zero(numRefs, static_cast<Eigen::Index>(n));
    return s;
}

DensifyResult
densify_sync(GaussianFrameSet &fs, const DensifyStats &stats, const DensifyConfig &config, double sceneExtent,
             std::mt19937_64 &rng) {
    const int B         = fs.num_refs();
    const std::size_t N = fs.num_human();
    if (stats.grad_sum.size() != N || stats.count.size() != N ||
        static_cast<std::size_t>(stats.weight_sum.cols()) != N || stats.weight_sum.rows() != B) {
        throw InvalidStateError("densify_sync: statistics do not cover the human Gaussians");
    }
    fs.check_synchronized();
    DensifyResult res;

    std::vector<int> action(N, 0); // 1 clone, 2 split
    std::vector<int> trigger(N, 0);
    for (std::size_t k = 0; k < N; ++k) {
        const double avg = stats.count[k] > 0 ? stats.grad_sum[k] / stats.count[k] : 0.0;
        if (!(avg > config.grad_threshold)) {
            continue;
        }
        Eigen::Index f = 0;
        stats.weight_sum.col(static_cast<Eigen::Index>(k)).maxCoeff(&f);
        trigger[k]      = static_cast<int>(f);
        const double sz = fs.frames[f][k].scale.maxCoeff();
        action[k]       = sz <= config.split_fraction * sceneExtent ? 1 : 2;
    }

    std::int64_t nextId = 0;
    for (const auto &g : fs.frames[0]) {
        nextId = std::max(nextId, g.lineage_id + 1);
    }
    for (const auto &g : fs.background) {
        nextId = std::max(nextId, g.lineage_id + 1);
    }
    for (const auto &[c, p] : fs.lineage) {
        nextId = std::max({nextId, c + 1, p + 1});
    }

    std::vector<std::vector<Gaussian>> frames(B);
    std::vector<std::uint8_t> flags;
    std::vector<int> seeds;
    std::vector<std::int64_t> origin;
    auto append = [&](std::size_t parent, std::int64_t from, const std::vector<Gaussian> &perFrame) {
        for (int i = 0; i < B; ++i) {
            frames[i].push_back(perFrame[i]);
            flags.push_back(fs.visibility.flags[parent * B + i]);
        }
        seeds.push_back(fs.seed_keypoint[parent]);
        origin.push_back(from);
    };

    std::vector<Gaussian> tmp(B);
    for (std::size_t k = 0; k < N; ++k) {
        if (action[k] != 2) {
            for (int i = 0; i < B; ++i) {
                tmp[i] = fs.frames[i][k];
            }
            append(k, static_cast<std::int64_t>(k), tmp);
        }
    }
    for (std::size_t k = 0; k < N; ++k) {
        if (action[k] != 1) {
            continue;
        }
        const std::int64_t id = nextId++;
        for (int i = 0; i < B; ++i) {
            tmp[i]            = fs.frames[i][k];
            tmp[i].lineage_id = id;
        }
        fs.lineage[id] = fs.frames[0][k].lineage_id;
        append(k, -1, tmp);
        ++res.cloned;
    }

    std::vector<int> all(N);
    std::iota(all.begin(), all.end(), 0);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (std::size_t k = 0; k < N; ++k) {
        if (action[k] != 2) {
            continue;
        }
        const int f         = trigger[k];
        const Gaussian &par = fs.frames[f][k];
        std::vector<Vec3> posF(N);
        for (std::size_t j = 0; j < N; ++j) {
            posF[j] = fs.frames[f][j].mu;
        }
        std::vector<int> hood = nearest_neighbors(posF, static_cast<int>(k), all, config.k_nn);
        hood.insert(hood.begin(), static_cast<int>(k));
        std::vector<Similarity> transport(B);
        for (int i = 0; i < B; ++i) {
            if (i == f) {
                continue;
            }
            Eigen::Matrix3Xd a(3, hood.size()), b(3, hood.size());
            for (std::size_t m = 0; m < hood.size(); ++m) {
                a.col(static_cast<Eigen::Index>(m)) = fs.frames[f][hood[m]].mu;
                b.col(static_cast<Eigen::Index>(m)) = fs.frames[i][hood[m]].mu;
            }
            try {
                transport[i] = fit_similarity(a, b);
            } catch (const NumericalError &) {
                transport[i] = Similarity{};
                ++res.fallbacks;
            }
        }
        const Mat3 R = quat_to_rotation(par.rot);
        for (int c = 0; c < 2; ++c) {
            const Vec3 z(normal(rng), normal(rng), normal(rng));
            const Vec3 offF       = R * par.scale.cwiseProduct(z);
            const std::int64_t id = nextId++;
            for (int i = 0; i < B; ++i) {
                const Vec3 off = i == f ? offF : Vec3(transport[i].scale * (transport[i].rotation * offF));
                tmp[i]            = fs.frames[i][k];
                tmp[i].mu        += off;
                tmp[i].scale     /= 1.6;
                tmp[i].lineage_id = id;
            }
            fs.lineage[id] = fs.frames[0][k].lineage_id;
            append(k, -1, tmp);
        }
        ++res.split;
    }

    // Prune by the shared opacity, in every frame at once.
    std::vector<std::vector<Gaussian>> kept(B);
    std::vector<std::uint8_t> keptFlags;
    std::vector<int> keptSeeds;
    std::vector<std::int64_t> keptOrigin;
    for (std::size_t n = 0; n < origin.size(); ++n) {
        if (frames[0][n].opacity < config.prune_opacity) {
            ++res.pruned;
            continue;
        }
        for (int i = 0; i < B; ++i) {
            kept[i].push_back(frames[i][n]);
            keptFlags.push_back(flags[n * B + i]);
        }
        keptSeeds.push_back(seeds[n]);
        keptOrigin.push_back(origin[n]);
    }
    if (kept[0].empty()) {
        throw NumericalError("densify_sync: pruning would remove every human Gaussian");
    }
    fs.frames           = std::move(kept);
    fs.visibility.flags = std::move(keptFlags);
    fs.seed_keypoint    = std::move(keptSeeds);
    res.origin          = std::move(keptOrigin);
    fs.check_synchronized();
    return res;
}

double
scene_extent(std::span<const Camera> cameras) {
    if (cameras.empty()) {
        return 1.0;
    }
    Vec3 mean = Vec3::Zero();
    for (const auto &c : cameras) {
        mean += c.center();
    }
    mean /= static_cast<double>(cameras.size());
    double r = 0.0;
    for (const auto &c : cameras) {
        r = std::max(r, (c.center() - mean).norm());
    }
    return r > 1e-6 ? 1.1 * r : 1.0;
}

RenderOutput
render_at(const GaussianFrameSet &fs, const DeformNetParams &params, const Camera &camera, double t,
          const RasterSettings &settings) {
    const DeformedHuman d = deform_at(fs, params, t);
    const auto scene      = scene_gaussians(fs, d);
    return render_gaussians(scene, camera, settings);
}

// ---------------------------------------------------------------------------
// Parameter packing

namespace {

double
logit(double p) {
    p = std::clamp(p, 1e-6, 1.0 - 1e-6);
    return std::log(p / (1.0 - p));
}

double
sigmoid(double x) {
    return 1.0 / (1.0 + std::exp(-x));
}

/// Optimizer view of one Gaussian array: positions, raw quaternions, log
/// scales, opacity logits and colors, flattened entry-major.
struct Group {
    Eigen::VectorXd mu, rot, scale, opacity, color;
};

Group
pack_gaussians(const std::vector<const Gaussian *> &gs) {
    Group g;
    const auto n = static_cast<Eigen::Index>(gs.size());
    g.mu.resize(3 * n);
    g.rot.resize(4 * n);
    g.scale.resize(3 * n);
    g.opacity.resize(n);
    g.color.resize(3 * n);
    for (Eigen::Index k = 0; k < n; ++k) {
        const Gaussian &x        = *gs[k];
        g.mu.segment<3>(3 * k)    = x.mu;
        g.rot.segment<4>(4 * k)   = x.rot;
        g.scale.segment<3>(3 * k) = x.scale.array().log();
        g.opacity(k)              = logit(x.opacity);
        g.color.segment<3>(3 * k) = x.color;
    }
    return g;
}

void
unpack_gaussians(const Group &g, const std::vector<Gaussian *> &gs, bool appearance) {
    for (Eigen::Index k = 0; k < static_cast<Eigen::Index>(gs.size()); ++k) {
        Gaussian &x = *gs[k];
        x.mu        = g.mu.segment<3>(3 * k);
        x.rot       = normalized_quat(g.rot.segment<4>(4 * k));
        x.scale     = g.scale.segment<3>(3 * k).array().exp();
        if (appearance) {
            x.opacity = sigmoid(g.opacity(k));
            x.color   = g.color.segment<3>(3 * k).cwiseMax(0.0).cwiseMin(1.0);
        }
    }
}

std::vector<std::int64_t>
expand_origin(const std::vector<std::int64_t> &origin, int B, std::size_t oldN) {
    std::vector<std::int64_t> out;
    out.reserve(origin.size() * B);
    for (int i = 0; i < B; ++i) {
        for (std::int64_t o : origin) {
            out.push_back(o < 0 ? -1 : static_cast<std::int64_t>(i * oldN) + o);
        }
    }
    return out;
}

json
loss_json(const LossBreakdown &l) {
    return {{"color", l.color}, {"dssim", l.dssim},   {"depth", l.depth}, {"rigid", l.rigid},
            {"freeze", l.freeze}, {"weight", l.weight}, {"total", l.total}};
}

} // namespace

std::string
report_jsonl(const TrainReport &r) {
    std::string out;
    for (const auto &it : r.iterations) {
        json j = {{"type", "iteration"},        {"iteration", it.iteration}, {"phase", it.phase},
                  {"frame", it.frame},          {"loss", loss_json(it.loss)}, {"human_count", it.human_count},
                  {"background_count", it.background_count}};
        out += j.dump() + "\n";
    }
    for (const auto &d : r.densify) {
        json j = {{"type", "densify"},          {"iteration", d.iteration},       {"cloned", d.result.cloned},
                  {"split", d.result.split},    {"pruned", d.result.pruned},      {"fallbacks", d.result.fallbacks},
                  {"human_count", d.human_count}};
        out += j.dump() + "\n";
    }
    for (const auto &m : r.held_out) {
        json j = {{"type", "held_out"}, {"frame", m.frame}, {"t", m.t}, {"psnr", m.psnr}, {"ssim", m.ssim}};
        out += j.dump() + "\n";
    }
    json s = {{"type", "summary"},
              {"mean_psnr", r.mean_psnr},
              {"mean_ssim", r.mean_ssim},
              {"prefit_final_loss", r.prefit_final_loss}};
    out += s.dump() + "\n";
    return out;
}

std::vector<FrameMetric>
evaluate_held_out(const PriorBundle &bundle, const GaussianFrameSet &fs, const DeformNetParams &params,
                  const RasterSettings &settings) {
    std::vector<FrameMetric> out;
    for (int f = 0; f < static_cast<int>(bundle.num_frames()); ++f) {
        if (!is_held_out(f)) {
            continue;
        }
        const RenderOutput r = render_at(fs, params, bundle.cameras[f], bundle.frames[f].t, settings);
        out.push_back({f, bundle.frames[f].t, psnr(r.rgb, bundle.frames[f].image), ssim(r.rgb, bundle.frames[f].image)});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Training loop

TrainResult
train(const PriorBundle &bundle, InitResult init, const TrainConfig &config, const IterationCallback &onIteration) {
    config.validate();
    TrainResult out;
    GaussianFrameSet &fs   = out.frame_set;
    DeformNetParams &net   = out.params;
    TrainReport &report    = out.report;
    fs                     = std::move(init.frame_set);
    net                    = std::move(init.params);
    fs.check_synchronized();

    const int C = static_cast<int>(init.train_frames.size());
    if (C == 0 || static_cast<int>(init.aligned.size()) != C || init.lifted.vis.frames != C) {
        throw InvalidStateError("train: initialization does not cover the training frames");
    }
    std::vector<double> times(C);
    std::vector<Camera> cams(C);
    for (int c = 0; c < C; ++c) {
        times[c] = bundle.frames[init.train_frames[c]].t;
        cams[c]  = bundle.cameras[init.train_frames[c]];
    }

    // Phase 1.
    if (config.prefit_enabled && !init.prefit_done && config.iters_prefit > 0) {
        PrefitConfig pc  = config.prefit;
        pc.iterations    = config.iters_prefit;
        pc.learning_rate = config.lr.net;
        pc.seed          = config.seed;
        const PrefitReport pr = prefit_deformation(fs, net, init.targets, pc);
        for (std::size_t i = 0; i < pr.loss_history.size(); ++i) {
            IterationRecord rec;
            rec.iteration        = static_cast<int>(i);
            rec.phase            = 1;
            rec.frame            = init.train_frames[pr.columns[i]];
            rec.loss.total       = pr.loss_history[i];
            rec.human_count      = fs.num_human();
            rec.background_count = fs.background.size();
            report.iterations.push_back(rec);
            if (onIteration) {
                onIteration(rec);
            }
        }
        report.prefit_final_loss = pr.final_loss.total;
    }
    // Lifted targets outside the reference frames are not used past this point.
    init.targets.positions.clear();
    init.targets.rotations.clear();

    // Phase 2.
    const double extent       = scene_extent(cams);
    const FreezeTargets freeze = cache_freeze_targets(fs, net, times);
    auto rigidFrom            = [&]() {
        const Eigen::MatrixXd xbar = effective_reference_positions(fs);
        std::vector<Vec3> p(fs.num_human());
        for (std::size_t k = 0; k < p.size(); ++k) {
            p[k] = xbar.block<3, 1>(0, static_cast<Eigen::Index>(k));
        }
        return build_rigid_graph(p, config.rigid_neighbors);
    };
    RigidGraph rigid = rigidFrom();

    Adam adam;
    std::mt19937_64 rng(config.seed);
    std::vector<int> order(C);
    std::iota(order.begin(), order.end(), 0);
    DensifyStats stats = DensifyStats::zeros(fs.num_refs(), fs.num_human());
    const int phase2   = config.iters_total - config.iters_prefit;
    std::string lastGood;

    for (int it = 0; it < phase2; ++it) {
        const int global = config.iters_prefit + it;
        const int epoch  = it / C;
        const int slot   = it % C;
        if (slot == 0) {
            std::shuffle(order.begin(), order.end(), rng);
        }
        const int col     = order[slot];
        const int frame   = init.train_frames[col];
        const Camera &cam = cams[col];
        const int B       = fs.num_refs();
        const std::size_t N = fs.num_human();

        DeformTape tape;
        const DeformedHuman deformed = deform_at(fs, net, times[col], &tape);
        const auto scene             = scene_gaussians(fs, deformed);
        const RenderOutput rendered  = render_gaussians(scene, cam, config.raster);
        const auto visible           = visible_at_frame(fs, init.lifted.vis, col);

        LossInputs in;
        in.rendered     = &rendered;
        in.image        = &bundle.frames[frame].image;
        in.depth_star   = &init.aligned[col].depth_star;
        in.frame_set    = &fs;
        in.deformed     = &deformed;
        in.rigid        = &rigid;
        in.freeze       = &freeze;
        in.visible_at_t = visible;
        in.column       = col;
        in.epoch        = epoch;
        LossGradients lg;
        const LossBreakdown L = loss_total(in, config, config.n_freeze, &lg);
        if (!std::isfinite(L.total)) {
            throw NumericalError("train: non-finite loss at iteration " + std::to_string(global) +
                                 "; last good checkpoint: " + (lastGood.empty() ? "none" : lastGood));
        }

        const GaussianGradients gg = render_backward(scene, cam, rendered, lg.dRgb, lg.dDepth, config.raster);
        std::vector<Vec3> dMu(gg.mu.begin(), gg.mu.begin() + static_cast<std::ptrdiff_t>(N));
        for (std::size_t k = 0; k < N; ++k) {
            dMu[k] += lg.dMu[k];
        }
        const auto sub = [N](const auto &v) { return std::span(v.data(), N); };
        BlendBackward bb = blend_backward(fs, deformed, dMu, sub(gg.rot), sub(gg.scale), sub(gg.opacity), sub(gg.color));
        bb.net.w += lg.dW;
        const DeformBackwardResult nb = deform_backward(net, tape, bb.net);

        for (std::size_t k = 0; k < N; ++k) {
            const Vec2 &g2 = gg.mean2d[k];
            const double n = std::hypot(g2.x() * 0.5 * cam.width, g2.y() * 0.5 * cam.height);
            if (n > 0.0) {
                stats.grad_sum[k] += n;
                stats.count[k] += 1;
            }
        }
        stats.weight_sum += deformed.net.w;

        // Optimizer step.
        adam.begin_step();
        const double r     = phase2 > 1 ? static_cast<double>(it) / (phase2 - 1) : 0.0;
        const double lrPos = extent * std::exp((1.0 - r) * std::log(config.lr.position_init) +
                                               r * std::log(config.lr.position_final));
        {
            std::vector<const Gaussian *> hc;
            std::vector<Gaussian *> hm;
            for (int i = 0; i < B; ++i) {
                for (std::size_t k = 0; k < N; ++k) {
                    hc.push_back(&fs.frames[i][k]);
                    hm.push_back(&fs.frames[i][k]);
                }
            }
            Group h = pack_gaussians(hc);
            Group gH;
            gH.mu.setZero(h.mu.size());
            gH.rot.setZero(h.rot.size());
            gH.scale.setZero(h.scale.size());
            for (int i = 0; i < B; ++i) {
                for (std::size_t k = 0; k < N; ++k) {
                    const auto e = static_cast<Eigen::Index>(i * N + k);
                    gH.mu.segment<3>(3 * e)    = bb.frames.mu[i][k];
                    gH.rot.segment<4>(4 * e)   = bb.frames.rot[i][k];
                    gH.scale.segment<3>(3 * e) = bb.frames.scale[i][k].cwiseProduct(fs.frames[i][k].scale);
                }
            }
            Eigen::VectorXd op(N), gOp(N), colr(3 * N), gCol(3 * N);
            for (std::size_t k = 0; k < N; ++k) {
                const auto e            = static_cast<Eigen::Index>(k);
                const double o          = fs.frames[0][k].opacity;
                op(e)                   = logit(o);
                gOp(e)                  = bb.frames.opacity[k] * o * (1.0 - o);
                colr.segment<3>(3 * e)  = fs.frames[0][k].color;
                gCol.segment<3>(3 * e)  = bb.frames.color[k];
            }
            adam.update("human_mu", h.mu, gH.mu, lrPos);
            adam.update("human_rot", h.rot, gH.rot, config.lr.rotation);
            adam.update("human_scale", h.scale, gH.scale, config.lr.scale);
            adam.update("human_opacity", op, gOp, config.lr.opacity);
            adam.update("human_color", colr, gCol, config.lr.color);
            unpack_gaussians(h, hm, false);
            for (std::size_t k = 0; k < N; ++k) {
                const auto e    = static_cast<Eigen::Index>(k);
                const double o  = sigmoid(op(e));
                const Vec3 c    = colr.segment<3>(3 * e).cwiseMax(0.0).cwiseMin(1.0);
                for (int i = 0; i < B; ++i) {
                    fs.frames[i][k].opacity = o;
                    fs.frames[i][k].color   = c;
                }
            }
        }
        if (!fs.background.empty()) {
            const std::size_t M = fs.background.size();
            std::vector<const Gaussian *> bc;
            std::vector<Gaussian *> bm;
            for (auto &g : fs.background) {
                bc.push_back(&g);
                bm.push_back(&g);
            }
            Group b = pack_gaussians(bc);
            Group gB;
            gB.mu.resize(3 * M);
            gB.rot.resize(4 * M);
            gB.scale.resize(3 * M);
            gB.opacity.resize(M);
            gB.color.resize(3 * M);
            for (std::size_t m = 0; m < M; ++m) {
                const auto e              = static_cast<Eigen::Index>(m);
                const std::size_t s       = N + m;
                const Gaussian &g         = fs.background[m];
                gB.mu.segment<3>(3 * e)    = gg.mu[s];
                gB.rot.segment<4>(4 * e)   = gg.rot[s];
                gB.scale.segment<3>(3 * e) = gg.scale[s].cwiseProduct(g.scale);
                gB.opacity(e)             = gg.opacity[s] * g.opacity * (1.0 - g.opacity);
                gB.color.segment<3>(3 * e) = gg.color[s];
            }
            adam.update("bg_mu", b.mu, gB.mu, lrPos);
            adam.update("bg_rot", b.rot, gB.rot, config.lr.rotation);
            adam.update("bg_scale", b.scale, gB.scale, config.lr.scale);
            adam.update("bg_opacity", b.opacity, gB.opacity, config.lr.opacity);
            adam.update("bg_color", b.color, gB.color, config.lr.color);
            unpack_gaussians(b, bm, true);
        }
        {
            Eigen::VectorXd flat = net.flatten();
            adam.update("net", flat, nb.grad.flatten(), config.lr.net);
            net.assign(flat);
        }

        IterationRecord rec;
        rec.iteration        = global;
        rec.phase            = 2;
        rec.frame            = frame;
        rec.loss             = L;
        rec.human_count      = fs.num_human();
        rec.background_count = fs.background.size();
        report.iterations.push_back(rec);
        if (onIteration) {
            onIteration(rec);
        }

        if (config.densify.enabled && (it + 1) % config.densify.interval == 0 &&
            global + 1 < config.densify.stop_fraction * config.iters_total) {
            const std::size_t oldN = fs.num_human();
            DensifyResult dr       = densify_sync(fs, stats, config.densify, extent, rng);
            const auto full        = expand_origin(dr.origin, B, oldN);
            adam.remap("human_mu", full, 3);
            adam.remap("human_rot", full, 4);
            adam.remap("human_scale", full, 3);
            adam.remap("human_opacity", dr.origin, 1);
            adam.remap("human_color", dr.origin, 3);
            rigid = rigidFrom();
            stats = DensifyStats::zeros(fs.num_refs(), fs.num_human());
            report.densify.push_back({global, std::move(dr), fs.num_human()});
        }

        if (!config.checkpoint_dir.empty() && config.checkpoint_interval > 0 &&
            (global + 1) % config.checkpoint_interval == 0) {
            char name[40];
            std::snprintf(name, sizeof(name), "ckpt_%06d.bin", global + 1);
            const fs::path p = fs::path(config.checkpoint_dir) / name;
            fs::create_directories(p.parent_path());
            save_checkpoint(p, fs, net, json{{"iteration", global + 1}, {"prefit_done", true}});
            lastGood = p.string();
        }
    }

    report.held_out = evaluate_held_out(bundle, fs, net, config.raster);
    for (const auto &m : report.held_out) {
        report.mean_psnr += m.psnr;
        report.mean_ssim += m.ssim;
    }
    if (!report.held_out.empty()) {
        report.mean_psnr /= static_cast<double>(report.held_out.size());
        report.mean_ssim /= static_cast<double>(report.held_out.size());
    }
    return out;
}

} // namespace refsplat
