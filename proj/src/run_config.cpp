// Copyright Contributors to the refsplat Project
// SPDX-License-Identifier: Apache-2.0

#include "refsplat/run_config.hpp"

#include "refsplat/errors.hpp"
#include "refsplat/hash.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace refsplat {

using nlohmann::json;

namespace {

struct Binding {
    std::string key;
    std::string help;
    std::function<json()> get;
    std::function<void(const json &)> set;
};

template <typename T>
bool
accepts(const json &j) {
    if constexpr (std::is_same_v<T, bool>) {
        return j.is_boolean();
    } else if constexpr (std::is_same_v<T, std::uint64_t>) {
        return j.is_number_unsigned() || (j.is_number_integer() && j.get<std::int64_t>() >= 0);
    } else if constexpr (std::is_integral_v<T>) {
        return j.is_number_integer();
    } else if constexpr (std::is_floating_point_v<T>) {
        return j.is_number();
    } else {
        return j.is_string();
    }
}

template <typename T>
void
bind_option(std::vector<Binding> &out, const std::string &key, T &field, const std::string &help) {
    out.push_back({key, help, [&field] { return json(field); },
                   [&field, key](const json &j) {
                       if (!accepts<T>(j)) {
                           throw ConfigError("option '" + key + "' has the wrong type: " + j.dump());
                       }
                       field = j.get<T>();
                   }});
}

std::vector<Binding>
bindings(RunConfig &c) {
    std::vector<Binding> b;
    bind_option(b, "seed", c.seed, "seed for generation, RANSAC, initialization and training");

    auto &s = c.synth;
    bind_option(b, "synth.frames", s.frames, "number of frames T");
    bind_option(b, "synth.width", s.width, "image width in pixels");
    bind_option(b, "synth.height", s.height, "image height in pixels");
    b.push_back({"synth.motion", "static | rigid-translation | sinusoidal-bend | two-segment-articulation",
                 [&s] { return json(motion_name(s.motion)); },
                 [&s](const json &j) {
                     if (!j.is_string()) {
                         throw ConfigError("option 'synth.motion' must be a string");
                     }
                     s.motion = parse_motion(j.get<std::string>());
                 }});
    bind_option(b, "synth.human_lattice", s.human_lattice, "human points per part side (2 n^2 points)");
    bind_option(b, "synth.background_points", s.background_points, "approximate background Gaussian count");
    bind_option(b, "synth.focal", s.focal, "focal length in pixels");
    bind_option(b, "synth.orbit_degrees", s.orbit_degrees, "camera arc swept over the sequence");
    bind_option(b, "synth.orbit_radius", s.orbit_radius, "camera distance from the vertical axis");
    bind_option(b, "synth.camera_height", s.camera_height, "camera height");
    bind_option(b, "synth.motion_amplitude", s.motion_amplitude, "translation, bend offset or joint angle");
    bind_option(b, "synth.depth_scale", s.depth_scale, "planted generic-depth scale s");
    bind_option(b, "synth.depth_shift", s.depth_shift, "planted generic-depth shift t");
    bind_option(b, "synth.depth_noise", s.depth_noise, "generic-depth noise sigma");
    bind_option(b, "synth.outlier_fraction", s.outlier_fraction, "fraction of generic-depth outliers");
    bind_option(b, "synth.keypoint_dropout", s.keypoint_dropout, "fraction of keypoint observations dropped");
    bind_option(b, "synth.sparse_points_per_frame", s.sparse_points_per_frame, "sparse points per frame");

    auto &i = c.init;
    bind_option(b, "init.num_refs", i.num_refs, "reference frames B");
    bind_option(b, "init.lambda_ref", i.lambda_ref, "coverage weight of the reference selection cost");
    bind_option(b, "init.n_neigh", i.n_neigh, "coverage window of the reference selection cost");
    bind_option(b, "init.lattice_size", i.lattice_size, "keypoint lattice per part side");
    bind_option(b, "init.rotation_neighbors", i.rotation_neighbors, "neighbors of the rotation targets");
    bind_option(b, "init.human_opacity", i.human_opacity, "initial human opacity");
    bind_option(b, "init.background_opacity", i.background_opacity, "initial background opacity");
    bind_option(b, "init.background_neighbors", i.background_neighbors, "neighbors of the background scale");
    bind_option(b, "init.ransac.iterations", i.ransac.iterations, "RANSAC hypotheses");
    bind_option(b, "init.ransac.threshold_factor", i.ransac.threshold_factor, "inlier threshold over the median sparse depth");
    bind_option(b, "init.ransac.irls_iterations", i.ransac.irls_iterations, "IRLS refinement iterations");
    bind_option(b, "init.ransac.min_inlier_ratio", i.ransac.min_inlier_ratio, "inlier ratio below which a fit is degenerate");

    auto &a = i.arch;
    bind_option(b, "net.depth", a.depth, "hidden layers");
    bind_option(b, "net.width", a.width, "hidden units");
    bind_option(b, "net.skip_after", a.skip_after, "hidden layer followed by the input skip, -1 disables");
    bind_option(b, "net.pos_frequencies", a.encoding.pos_frequencies, "position encoding frequencies");
    bind_option(b, "net.time_frequencies", a.encoding.time_frequencies, "time encoding frequencies");

    auto &t = c.train;
    bind_option(b, "train.iters_total", t.iters_total, "total iterations, pre-fit included");
    bind_option(b, "train.iters_prefit", t.iters_prefit, "deformation pre-fit iterations");
    bind_option(b, "train.prefit_enabled", t.prefit_enabled, "run the deformation pre-fit");
    bind_option(b, "train.lr.position_init", t.lr.position_init, "initial position rate, times scene extent");
    bind_option(b, "train.lr.position_final", t.lr.position_final, "final position rate, times scene extent");
    bind_option(b, "train.lr.rotation", t.lr.rotation, "rotation rate");
    bind_option(b, "train.lr.scale", t.lr.scale, "log-scale rate");
    bind_option(b, "train.lr.opacity", t.lr.opacity, "logit-opacity rate");
    bind_option(b, "train.lr.color", t.lr.color, "color rate");
    bind_option(b, "train.lr.net", t.lr.net, "network rate");
    bind_option(b, "train.weights.color", t.weights.color, "L1 color weight");
    bind_option(b, "train.weights.dssim", t.weights.dssim, "D-SSIM weight");
    bind_option(b, "train.weights.depth", t.weights.depth, "depth weight");
    bind_option(b, "train.weights.rigid", t.weights.rigid, "rigidity weight");
    bind_option(b, "train.weights.weight", t.weights.weight, "blend-weight regularizer weight");
    bind_option(b, "train.weights.freeze", t.weights.freeze, "freeze loss weight");
    bind_option(b, "train.prefit.lambda_pos", t.prefit.lambda_pos, "pre-fit position weight");
    bind_option(b, "train.prefit.lambda_rot", t.prefit.lambda_rot, "pre-fit rotation weight");
    bind_option(b, "train.prefit.lambda_scale", t.prefit.lambda_scale, "pre-fit scale weight");
    bind_option(b, "train.prefit.lambda_weight", t.prefit.lambda_weight, "pre-fit blend-weight regularizer weight");
    bind_option(b, "train.n_freeze", t.n_freeze, "epochs of the freeze warm-up");
    bind_option(b, "train.densify.enabled", t.densify.enabled, "run density control");
    bind_option(b, "train.densify.interval", t.densify.interval, "iterations between density control events");
    bind_option(b, "train.densify.stop_fraction", t.densify.stop_fraction, "fraction of iters_total after which density control stops");
    bind_option(b, "train.densify.grad_threshold", t.densify.grad_threshold, "mean screen-space gradient threshold");
    bind_option(b, "train.densify.prune_opacity", t.densify.prune_opacity, "prune below this opacity");
    bind_option(b, "train.densify.split_fraction", t.densify.split_fraction, "clone/split scale threshold over scene extent");
    bind_option(b, "train.densify.k_nn", t.densify.k_nn, "neighbors of the cross-frame transport");
    bind_option(b, "train.rigid_neighbors", t.rigid_neighbors, "neighbors of the rigidity graph");
    bind_option(b, "train.checkpoint_interval", t.checkpoint_interval, "iterations between checkpoints, 0 disables");
    bind_option(b, "train.raster.dilation", t.raster.dilation, "screen-space covariance dilation in px^2");

    bind_option(b, "render.times", c.render.times, "render timestamps, comma-separated");

    bind_option(b, "paths.runs", c.paths.runs, "root directory of run directories");
    bind_option(b, "paths.bundle", c.paths.bundle, "input bundle directory");
    bind_option(b, "paths.checkpoint", c.paths.checkpoint, "input checkpoint");
    bind_option(b, "paths.rendered", c.paths.rendered, "eval: directory of rendered frames to score");
    return b;
}

} // namespace

RunConfig::RunConfig() {
    init.arch.depth      = 4;
    init.arch.width      = 64;
    init.arch.skip_after = 2;
    train.iters_total    = 3000;
    train.iters_prefit   = 1000;
}

void
RunConfig::finalize() {
    synth.seed       = seed;
    init.seed        = seed;
    init.ransac.seed = seed;
    train.seed       = seed;
    train.prefit.seed = seed;
    init.arch.num_refs = init.num_refs;
    synth.validate();
    init.arch.validate();
    train.validate();
    parse_times(render.times);
}

json
RunConfig::to_json() const {
    json out = json::object();
    for (const auto &b : bindings(const_cast<RunConfig &>(*this))) {
        out[b.key] = b.get();
    }
    return out;
}

void
RunConfig::apply(const json &flat) {
    if (!flat.is_object()) {
        throw ConfigError("configuration must be a JSON object of dotted keys");
    }
    auto all = bindings(*this);
    for (const auto &[key, value] : flat.items()) {
        auto it = std::find_if(all.begin(), all.end(), [&](const Binding &b) { return b.key == key; });
        if (it == all.end()) {
            throw ConfigError("unknown configuration key '" + key + "'");
        }
        it->set(value);
    }
}

std::string
RunConfig::hash() const {
    Fnv1a h;
    const json flat = to_json();
    for (const auto &[key, value] : flat.items()) {
        if (key.rfind("paths.", 0) == 0) {
            continue;
        }
        h.text(key);
        h.text("=");
        h.text(value.dump());
        h.text(";");
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h.digest()));
    return buf;
}

std::vector<OptionInfo>
run_config_options() {
    RunConfig defaults;
    std::vector<OptionInfo> out;
    for (const auto &b : bindings(defaults)) {
        out.push_back({b.key, b.help, b.get()});
    }
    return out;
}

RunConfig
load_run_config(const std::string &path) {
    std::ifstream in(path);
    if (!in) {
        throw DataError(path, "", "cannot open configuration file");
    }
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception &e) {
        throw DataError(path, "", std::string("malformed JSON: ") + e.what());
    }
    RunConfig c;
    c.apply(j);
    return c;
}

json
parse_option_value(const std::string &text) {
    try {
        return json::parse(text);
    } catch (const json::exception &) {
        return json(text);
    }
}

std::vector<double>
parse_times(const std::string &text) {
    std::vector<double> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        std::size_t used = 0;
        double v         = 0.0;
        try {
            v = std::stod(item, &used);
        } catch (const std::exception &) {
            used = 0;
        }
        if (used == 0 || item.find_first_not_of(" \t", used) != std::string::npos || !(v >= 0.0 && v <= 1.0)) {
            throw ConfigError("render.times: '" + item + "' is not a timestamp in [0,1]");
        }
        out.push_back(v);
    }
    if (out.empty()) {
        throw ConfigError("render.times is empty");
    }
    return out;
}

} // namespace refsplat
