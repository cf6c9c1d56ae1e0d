// Copyright Contributors to the refsplat Project
// SPDX-License-Identifier: Apache-2.0

#include "refsplat/errors.hpp"
#include "refsplat/io.hpp"
#include "refsplat/metrics.hpp"
#include "refsplat/run_config.hpp"
#include "refsplat/shape_init.hpp"
#include "refsplat/synth.hpp"
#include "refsplat/trainer.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>

using namespace refsplat;
using nlohmann::json;

namespace {

struct Context {
    RunConfig config;
    fs::path run;
};

void
write_json(const fs::path &path, const json &j) {
    std::ofstream out(path);
    if (!out) {
        throw DataError(path.string(), "", "cannot write file");
    }
    out << j.dump(2) << "\n";
}

void
write_text(const fs::path &path, const std::string &text) {
    std::ofstream out(path);
    if (!out) {
        throw DataError(path.string(), "", "cannot write file");
    }
    out << text;
}

fs::path
bundle_dir(const Context &c) {
    return c.config.paths.bundle.empty() ? c.run / "bundle" : fs::path(c.config.paths.bundle);
}

fs::path
checkpoint_in(const Context &c, const char *fallback) {
    return c.config.paths.checkpoint.empty() ? c.run / fallback : fs::path(c.config.paths.checkpoint);
}

/// Alpha-normalized depth, invalid where the accumulated alpha is at most 0.5.
DepthMap
surface_depth(const RenderOutput &r) {
    DepthMap d(r.depth.width, r.depth.height, 1, kInvalidDepth);
    for (std::size_t p = 0; p < d.data.size(); ++p) {
        if (r.alpha.data[p] > 0.5) {
            d.data[p] = r.depth.data[p] / r.alpha.data[p];
        }
    }
    return d;
}

json
cmd_synth(const Context &c) {
    const SynthScene scene = generate(c.config.synth);
    const fs::path dir     = bundle_dir(c);
    save_bundle(scene.bundle, dir);
    write_json(dir / "ground_truth.json", scene.truth.to_json(c.config.synth));
    return {{"bundle", dir.string()}, {"frames", scene.bundle.frames.size()},
            {"motion_magnitude", motion_magnitude(scene.truth)}};
}

json
cmd_align_depth(const Context &c) {
    const PriorBundle bundle = load_bundle(bundle_dir(c));
    const fs::path out       = c.run / "depth_star";
    fs::create_directories(out);
    json frames = json::array();
    for (std::size_t f = 0; f < bundle.frames.size(); ++f) {
        RansacConfig rc = c.config.init.ransac;
        rc.seed ^= static_cast<std::uint64_t>(f);
        const AlignedFrame a = align_frame_depth(bundle.frames[f], bundle.cameras[f], rc);
        write_f32(a.depth_star, frame_path(out, static_cast<int>(f), "f32"));
        frames.push_back({{"frame", f},
                          {"s_star", a.alignment.s_star},
                          {"t_star", a.alignment.t_star},
                          {"a_star", a.alignment.a_star},
                          {"b_star", a.alignment.b_star},
                          {"inlier_ratio", a.alignment.inlier_ratio},
                          {"degenerate", a.alignment.degenerate}});
    }
    write_json(c.run / "align_report.json", {{"frames", frames}});
    return {{"depth_star", out.string()}, {"report", (c.run / "align_report.json").string()}};
}

json
selection_json(const InitResult &init) {
    json frames = json::array();
    for (int col : init.selection.indices) {
        frames.push_back(init.train_frames[col]);
    }
    return {{"columns", init.selection.indices}, {"frames", frames}, {"cost", init.selection.cost},
            {"ref_times", init.frame_set.ref_times}};
}

json
cmd_init(const Context &c) {
    const PriorBundle bundle = load_bundle(bundle_dir(c));
    InitResult init          = initialize(bundle, c.config.init);
    const TrainConfig &tc    = c.config.train;
    double prefitLoss        = 0.0;
    if (tc.prefit_enabled && tc.iters_prefit > 0) {
        PrefitConfig pc   = tc.prefit;
        pc.iterations     = tc.iters_prefit;
        pc.learning_rate  = tc.lr.net;
        const auto report = prefit_deformation(init.frame_set, init.params, init.targets, pc);
        prefitLoss        = report.final_loss.total;
        init.prefit_done  = true;
    }
    const json meta = {{"stage", "init"},
                       {"prefit_done", init.prefit_done},
                       {"prefit_final_loss", prefitLoss},
                       {"selection", selection_json(init)},
                       {"config_hash", c.config.hash()}};
    const fs::path ckpt = c.run / "init.ckpt";
    save_checkpoint(ckpt, init.frame_set, init.params, meta);
    write_json(c.run / "selection.json", meta["selection"]);
    return {{"checkpoint", ckpt.string()}, {"selection", meta["selection"]}, {"prefit_done", init.prefit_done}};
}

json
cmd_train(const Context &c) {
    const PriorBundle bundle = load_bundle(bundle_dir(c));
    InitResult init          = initialize(bundle, c.config.init);
    const Checkpoint ck      = load_checkpoint(checkpoint_in(c, "init.ckpt"));
    init.frame_set           = ck.frame_set;
    init.params              = ck.params;
    init.prefit_done         = ck.meta.value("prefit_done", false);

    TrainConfig tc    = c.config.train;
    tc.checkpoint_dir = (c.run / "checkpoints").string();
    const TrainResult result = train(bundle, std::move(init), tc);

    const fs::path ckpt = c.run / "final.ckpt";
    save_checkpoint(ckpt, result.frame_set, result.params,
                    {{"stage", "train"}, {"prefit_done", true}, {"config_hash", c.config.hash()}});
    write_text(c.run / "train_report.jsonl", report_jsonl(result.report));
    return {{"checkpoint", ckpt.string()},
            {"report", (c.run / "train_report.jsonl").string()},
            {"mean_psnr", result.report.mean_psnr},
            {"mean_ssim", result.report.mean_ssim}};
}

/// Camera of the bundle frame whose timestamp is nearest to t.
const Camera &
nearest_camera(const PriorBundle &bundle, double t) {
    std::size_t best = 0;
    for (std::size_t f = 1; f < bundle.frames.size(); ++f) {
        if (std::abs(bundle.frames[f].t - t) < std::abs(bundle.frames[best].t - t)) {
            best = f;
        }
    }
    return bundle.cameras.at(best);
}

json
cmd_render(const Context &c) {
    const PriorBundle bundle = load_bundle(bundle_dir(c));
    const Checkpoint ck      = load_checkpoint(checkpoint_in(c, "final.ckpt"));
    const fs::path out       = c.run / "render";
    fs::create_directories(out);
    json files = json::array();
    for (double t : parse_times(c.config.render.times)) {
        char stem[32];
        std::snprintf(stem, sizeof(stem), "t_%.6f", t);
        const RenderOutput r = render_at(ck.frame_set, ck.params, nearest_camera(bundle, t), t, c.config.train.raster);
        write_png(r.rgb, out / (std::string(stem) + ".png"));
        write_f32(surface_depth(r), out / (std::string(stem) + ".f32"));
        files.push_back({{"t", t}, {"image", (out / (std::string(stem) + ".png")).string()}});
    }
    return {{"render", files}};
}

json
cmd_eval(const Context &c) {
    const PriorBundle bundle = load_bundle(bundle_dir(c));
    const int T              = static_cast<int>(bundle.frames.size());
    std::vector<FrameMetric> metrics;
    if (!c.config.paths.rendered.empty()) {
        for (int f = 0; f < T; ++f) {
            if (!is_held_out(f)) {
                continue;
            }
            const Image img = read_png(frame_path(c.config.paths.rendered, f, "png"));
            metrics.push_back({f, bundle.frames[f].t, psnr(img, bundle.frames[f].image),
                               ssim(img, bundle.frames[f].image)});
        }
    } else {
        const Checkpoint ck = load_checkpoint(checkpoint_in(c, "final.ckpt"));
        metrics             = evaluate_held_out(bundle, ck.frame_set, ck.params, c.config.train.raster);
    }
    json frames = json::array();
    double mp = 0.0, ms = 0.0;
    for (const auto &m : metrics) {
        frames.push_back({{"frame", m.frame}, {"t", m.t}, {"psnr", m.psnr}, {"ssim", m.ssim}});
        mp += m.psnr;
        ms += m.ssim;
    }
    const double n = std::max<double>(1.0, static_cast<double>(metrics.size()));
    const json out = {{"frames", frames}, {"mean_psnr", mp / n}, {"mean_ssim", ms / n}};
    write_json(c.run / "eval.json", out);
    return out;
}

int
exit_code(ErrorKind kind) {
    switch (kind) {
    case ErrorKind::Config:
    case ErrorKind::Range:
        return 2;
    case ErrorKind::Data:
        return 3;
    case ErrorKind::Numerical:
    case ErrorKind::InvalidState:
        return 4;
    }
    return 4;
}

const char *
kind_name(ErrorKind kind) {
    switch (kind) {
    case ErrorKind::Config:
        return "config";
    case ErrorKind::Range:
        return "range";
    case ErrorKind::Data:
        return "data";
    case ErrorKind::Numerical:
        return "numerical";
    case ErrorKind::InvalidState:
        return "invalid_state";
    }
    return "unknown";
}

int
fail(const std::string &kind, const std::string &message, int code, json extra = json::object()) {
    extra["error"]   = kind;
    extra["message"] = message;
    std::cerr << extra.dump() << std::endl;
    return code;
}

} // namespace

int
main(int argc, char **argv) {
    CLI::App app{"Multi-reference-frame dynamic Gaussian splatting."};
    app.require_subcommand(1);
    app.fallthrough();

    std::string configPath;
    app.add_option("--config", configPath, "JSON file of flat dotted keys");

    std::map<std::string, std::string> overrides;
    std::map<std::string, bool> textual;
    for (const auto &opt : run_config_options()) {
        textual[opt.key] = opt.default_value.is_string();
        app.add_option("--" + opt.key, overrides[opt.key], opt.help + " (default: " + opt.default_value.dump() + ")");
    }

    using Handler = json (*)(const Context &);
    const std::vector<std::tuple<std::string, std::string, Handler>> commands = {
        {"synth", "generate a synthetic bundle and ground_truth.json", cmd_synth},
        {"align-depth", "write aligned depth rasters and an alignment report", cmd_align_depth},
        {"init", "initialize reference frames and pre-fit the deformation network", cmd_init},
        {"train", "jointly optimize Gaussians and the deformation network", cmd_train},
        {"render", "render RGB and depth at render.times", cmd_render},
        {"eval", "score held-out frames with PSNR and SSIM", cmd_eval},
    };
    std::vector<CLI::App *> subs;
    for (const auto &[name, help, fn] : commands) {
        subs.push_back(app.add_subcommand(name, help));
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp &e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp &e) {
        return app.exit(e);
    } catch (const CLI::ParseError &e) {
        return fail("config", e.what(), 2);
    }

    try {
        Context ctx;
        if (!configPath.empty()) {
            ctx.config = load_run_config(configPath);
        }
        json flags = json::object();
        for (const auto &[key, value] : overrides) {
            if (app.count("--" + key) > 0) {
                flags[key] = textual[key] ? json(value) : parse_option_value(value);
            }
        }
        ctx.config.apply(flags);
        ctx.config.finalize();
        ctx.run = fs::path(ctx.config.paths.runs) / ctx.config.hash();
        fs::create_directories(ctx.run);
        write_json(ctx.run / "config.json", ctx.config.to_json());

        for (std::size_t i = 0; i < subs.size(); ++i) {
            if (subs[i]->parsed()) {
                json out   = std::get<2>(commands[i])(ctx);
                out["run"] = ctx.run.string();
                std::cout << out.dump() << std::endl;
            }
        }
        return 0;
    } catch (const DataError &e) {
        return fail("data", e.what(), 3, {{"path", e.path}, {"field", e.field}});
    } catch (const Error &e) {
        return fail(kind_name(e.kind()), e.what(), exit_code(e.kind()));
    } catch (const fs::filesystem_error &e) {
        return fail("data", e.what(), 3, {{"path", e.path1().string()}});
    } catch (const std::exception &e) {
        return fail("internal", e.what(), 1);
    }
}
