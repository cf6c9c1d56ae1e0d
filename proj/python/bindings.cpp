// Copyright Contributors to the refsplat Project
// SPDX-License-Identifier: Apache-2.0

#include "refsplat/errors.hpp"
#include "refsplat/io.hpp"
#include "refsplat/metrics.hpp"
#include "refsplat/run_config.hpp"
#include "refsplat/shape_init.hpp"
#include "refsplat/synth.hpp"
#include "refsplat/trainer.hpp"

#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <fstream>

namespace py = pybind11;
using namespace refsplat;
using nlohmann::json;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

/// H x W x C array into a raster.
Image
to_image(const Array &a) {
    if (a.ndim() != 3) {
        throw RangeError("expected an H x W x C array");
    }
    Image img(static_cast<int>(a.shape(1)), static_cast<int>(a.shape(0)), static_cast<int>(a.shape(2)));
    std::copy(a.data(), a.data() + a.size(), img.data.begin());
    return img;
}

Array
to_array(const Raster<double> &r, bool squeeze) {
    std::vector<py::ssize_t> shape{r.height, r.width};
    if (!squeeze || r.channels != 1) {
        shape.push_back(r.channels);
    }
    Array out(shape);
    std::copy(r.data.begin(), r.data.end(), out.mutable_data());
    return out;
}

RunConfig
config_from(const std::string &flatJson) {
    RunConfig c;
    c.apply(json::parse(flatJson));
    c.finalize();
    return c;
}

py::dict
render_checkpoint(const std::string &checkpoint, const std::string &bundleDir, double t, int frame) {
    const PriorBundle bundle = load_bundle(bundleDir);
    const Checkpoint ck      = load_checkpoint(checkpoint);
    if (frame < 0 || frame >= static_cast<int>(bundle.num_frames())) {
        throw RangeError("frame " + std::to_string(frame) + " is outside the bundle");
    }
    const RenderOutput r = render_at(ck.frame_set, ck.params, bundle.cameras[frame], t);
    py::dict out;
    out["rgb"]          = to_array(r.rgb, false);
    out["depth"]        = to_array(r.depth, true);
    out["alpha"]        = to_array(r.alpha, true);
    out["median_depth"] = to_array(r.median_depth, true);
    return out;
}

std::string
run_synth(const std::string &flatJson, const std::string &directory) {
    const RunConfig c       = config_from(flatJson);
    const SynthScene scene  = generate(c.synth);
    save_bundle(scene.bundle, directory);
    json summary = scene.truth.to_json(c.synth);
    summary["motion_magnitude"] = motion_magnitude(scene.truth);
    std::ofstream(fs::path(directory) / "ground_truth.json") << summary.dump(2) << "\n";
    return summary.dump();
}

std::string
run_training(const std::string &flatJson, const std::string &bundleDir, const std::string &checkpoint) {
    const RunConfig c        = config_from(flatJson);
    const PriorBundle bundle = load_bundle(bundleDir);
    InitResult init          = initialize(bundle, c.init);
    const json selection     = init.selection.indices;
    const TrainResult result = train(bundle, std::move(init), c.train);
    save_checkpoint(checkpoint, result.frame_set, result.params, {{"stage", "train"}, {"prefit_done", true}});
    json held = json::array();
    for (const auto &m : result.report.held_out) {
        held.push_back({{"frame", m.frame}, {"t", m.t}, {"psnr", m.psnr}, {"ssim", m.ssim}});
    }
    return json{{"selection", selection},
                {"held_out", held},
                {"mean_psnr", result.report.mean_psnr},
                {"mean_ssim", result.report.mean_ssim},
                {"human_gaussians", result.frame_set.num_human()}}
        .dump();
}

} // namespace

PYBIND11_MODULE(_refsplat, m) {
    m.doc() = "Multi-reference-frame dynamic Gaussian splatting.";

    auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
    py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
    py::register_exception<DataError>(m, "DataError", base.ptr());
    py::register_exception<NumericalError>(m, "NumericalError", base.ptr());
    py::register_exception<InvalidStateError>(m, "InvalidStateError", base.ptr());
    py::register_exception<RangeError>(m, "RangeError", base.ptr());

    m.def(
        "psnr", [](const Array &a, const Array &b) { return psnr(to_image(a), to_image(b)); }, py::arg("a"),
        py::arg("b"), "PSNR in dB of two H x W x C images in [0,1], capped at 99.");
    m.def(
        "ssim", [](const Array &a, const Array &b) { return ssim(to_image(a), to_image(b)); }, py::arg("a"),
        py::arg("b"), "Mean SSIM with an 11x11 Gaussian window, sigma 1.5.");

    m.def(
        "ransac_scale_shift",
        [](const Array &com, const Array &sparse, int iterations, double thresholdFactor, std::uint64_t seed) {
            if (com.size() != sparse.size()) {
                throw RangeError("com and sparse must have the same length");
            }
            std::vector<DepthSample> s(static_cast<std::size_t>(com.size()));
            for (std::size_t i = 0; i < s.size(); ++i) {
                s[i] = {com.data()[i], sparse.data()[i]};
            }
            RansacConfig rc;
            rc.iterations       = iterations;
            rc.threshold_factor = thresholdFactor;
            rc.seed             = seed;
            const ScaleShift r  = ransac_scale_shift(s, rc);
            py::dict out;
            out["scale"]        = r.scale;
            out["shift"]        = r.shift;
            out["inlier_ratio"] = r.inlier_ratio;
            out["degenerate"]   = r.degenerate;
            return out;
        },
        py::arg("com"), py::arg("sparse"), py::arg("iterations") = 2000, py::arg("threshold_factor") = 0.02,
        py::arg("seed") = 0, "Robust fit of sparse ~ scale * com + shift.");

    m.def(
        "procrustes_rotation",
        [](const Eigen::Matrix3Xd &a, const Eigen::Matrix3Xd &b) { return Mat3(procrustes_rotation_matrix(a, b)); },
        py::arg("a"), py::arg("b"), "Proper rotation R minimizing |R (a - mean a) - (b - mean b)| for 3 x N clouds.");

    m.def(
        "select_reference_frames",
        [](const py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast> &vis, int numRefs,
           double lambdaRef, int nNeigh) {
            if (vis.ndim() != 2) {
                throw RangeError("visibility must be a K x T array");
            }
            VisibilityMatrix v(static_cast<int>(vis.shape(0)), static_cast<int>(vis.shape(1)));
            std::copy(vis.data(), vis.data() + vis.size(), v.vis.begin());
            const auto sel = select_reference_frames(v, v.frames, numRefs, lambdaRef, nNeigh);
            return py::make_tuple(sel.indices, sel.cost);
        },
        py::arg("visibility"), py::arg("num_refs"), py::arg("lambda_ref") = 0.2, py::arg("n_neigh") = 3,
        "Exhaustive reference-frame search; returns (0-based columns, cost).");

    m.def("freeze_coefficient", &freeze_coefficient, py::arg("epoch"), py::arg("n_freeze"));

    m.def("_config_defaults", [] { return RunConfig().to_json().dump(); });
    m.def("_config_help", [] {
        json out = json::object();
        for (const auto &o : run_config_options()) {
            out[o.key] = o.help;
        }
        return out.dump();
    });
    m.def("_config_hash", [](const std::string &flatJson) { return config_from(flatJson).hash(); });
    m.def("_synth", &run_synth, py::arg("config"), py::arg("directory"));
    m.def("_train", &run_training, py::arg("config"), py::arg("bundle"), py::arg("checkpoint"),
          py::call_guard<py::gil_scoped_release>());
    m.def("render", &render_checkpoint, py::arg("checkpoint"), py::arg("bundle"), py::arg("t"), py::arg("frame") = 0,
          "Renders a checkpoint at time t from the camera of bundle frame `frame`.");
    m.def(
        "read_png", [](const std::string &path) { return to_array(read_png(path), false); }, py::arg("path"));
}
