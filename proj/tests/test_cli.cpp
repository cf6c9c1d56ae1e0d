// Copyright Contributors to the refsplat Project
// SPDX-License-Identifier: Apache-2.0

#include "refsplat/deform_net.hpp"
#include "refsplat/io.hpp"
#include "refsplat/metrics.hpp"
#include "refsplat/rasterizer.hpp"
#include "refsplat/run_config.hpp"

#include <gtest/gtest.h>
#include <json.hpp>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace refsplat;
using nlohmann::json;

namespace {

const fs::path kTmp = fs::path(REFSPLAT_TEST_TMP) / "cli";

struct Result {
    int code = -1;
    std::string out;
    std::string err;
};

std::string
slurp(const fs::path &path) {
    std::ifstream in(path, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

Result
run_cli(const std::string &args) {
    fs::create_directories(kTmp);
    const fs::path out = kTmp / "stdout.txt", err = kTmp / "stderr.txt";
    const std::string cmd = std::string("\"") + REFSPLAT_CLI_PATH + "\" " + args + " > \"" + out.string() +
                            "\" 2> \"" + err.string() + "\"";
    const int status = std::system(cmd.c_str());
    Result r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out  = slurp(out);
    r.err  = slurp(err);
    return r;
}

/// The single JSON line a failing command writes to stderr.
json
error_line(const Result &r) {
    EXPECT_EQ(std::count(r.err.begin(), r.err.end(), '\n'), 1) << r.err;
    return json::parse(r.err);
}

const std::string kSmall = " --synth.human_lattice 8 --synth.background_points 600 --synth.sparse_points_per_frame 80"
                           " --init.lattice_size 8 --net.depth 2 --net.width 16 --net.skip_after 1"
                           " --net.pos_frequencies 3 --net.time_frequencies 3";

} // namespace

TEST(Cli, UnknownFlagIsAConfigError) {
    const Result r = run_cli("synth --train.no_such_key 3");
    EXPECT_EQ(r.code, 2);
    EXPECT_EQ(error_line(r)["error"], "config");
}

TEST(Cli, UnknownConfigFileKeyIsAConfigError) {
    fs::create_directories(kTmp);
    std::ofstream(kTmp / "bad.json") << R"({"train.itres_total": 5})";
    const Result r = run_cli("synth --config \"" + (kTmp / "bad.json").string() + "\"");
    EXPECT_EQ(r.code, 2);
    const json e = error_line(r);
    EXPECT_EQ(e["error"], "config");
    EXPECT_NE(e["message"].get<std::string>().find("train.itres_total"), std::string::npos);
}

TEST(Cli, WrongValueTypeAndMissingSubcommand) {
    EXPECT_EQ(run_cli("synth --synth.frames many").code, 2);
    EXPECT_EQ(run_cli("--seed 3").code, 2);
    EXPECT_EQ(run_cli("render --render.times 0,2").code, 2);
}

TEST(Cli, MissingBundleIsADataError) {
    const Result r = run_cli("align-depth --paths.runs \"" + (kTmp / "runs").string() + "\" --paths.bundle \"" +
                             (kTmp / "does_not_exist").string() + "\"");
    EXPECT_EQ(r.code, 3);
    const json e = error_line(r);
    EXPECT_EQ(e["error"], "data");
    EXPECT_TRUE(e.contains("path"));
}

TEST(Cli, HelpListsDefaults) {
    const Result r = run_cli("--help");
    EXPECT_EQ(r.code, 0);
    for (const auto &opt : run_config_options()) {
        EXPECT_NE(r.out.find("--" + opt.key), std::string::npos) << opt.key;
    }
    EXPECT_NE(r.out.find("default: 3000"), std::string::npos);
}

TEST(Cli, PipelineProducesEveryArtifact) {
    const std::string args = " --paths.runs \"" + (kTmp / "pipeline").string() + "\"" + kSmall +
                             " --train.iters_total 60 --train.iters_prefit 20 --train.densify.interval 20";
    const Result s = run_cli("synth" + args);
    ASSERT_EQ(s.code, 0) << s.err;
    const fs::path run = json::parse(s.out)["run"].get<std::string>();
    EXPECT_TRUE(fs::exists(run / "config.json"));
    EXPECT_TRUE(fs::exists(run / "bundle" / "ground_truth.json"));
    const PriorBundle bundle = load_bundle(run / "bundle");
    const int T              = static_cast<int>(bundle.frames.size());

    const Result a = run_cli("align-depth" + args);
    ASSERT_EQ(a.code, 0) << a.err;
    const json report = json::parse(slurp(run / "align_report.json"));
    ASSERT_EQ(report["frames"].size(), static_cast<std::size_t>(T));
    for (const auto &f : report["frames"]) {
        EXPECT_NEAR(f["s_star"].get<double>(), 2.0, 0.05);
    }
    EXPECT_TRUE(fs::exists(frame_path(run / "depth_star", T - 1, "f32")));

    const Result i = run_cli("init" + args);
    ASSERT_EQ(i.code, 0) << i.err;
    const json sel = json::parse(slurp(run / "selection.json"));
    EXPECT_EQ(sel["frames"].size(), 4u);
    const Checkpoint init = load_checkpoint(run / "init.ckpt");
    EXPECT_EQ(init.frame_set.num_refs(), 4);
    EXPECT_TRUE(init.meta["prefit_done"].get<bool>());

    const Result t = run_cli("train" + args);
    ASSERT_EQ(t.code, 0) << t.err;
    EXPECT_TRUE(fs::exists(run / "final.ckpt"));
    std::istringstream lines(slurp(run / "train_report.jsonl"));
    std::string line;
    int iterations = 0;
    while (std::getline(lines, line)) {
        ASSERT_TRUE(json::accept(line)) << line;
        iterations += json::parse(line)["type"] == "iteration";
    }
    // init already ran the pre-fit, so train runs the joint phase only.
    EXPECT_EQ(iterations, 40);

    const Result r = run_cli("render" + args);
    ASSERT_EQ(r.code, 0) << r.err;
    const json rendered = json::parse(r.out)["render"];
    ASSERT_EQ(rendered.size(), 3u);
    const std::string mid = rendered[1]["image"].get<std::string>();
    const Image midImage  = read_png(mid);
    EXPECT_EQ(midImage.width, bundle.frames[0].image.width);
    const std::string before = slurp(mid);
    ASSERT_EQ(run_cli("render" + args).code, 0);
    EXPECT_EQ(slurp(mid), before);

    const Result e = run_cli("eval" + args);
    ASSERT_EQ(e.code, 0) << e.err;
    const json ev = json::parse(slurp(run / "eval.json"));
    EXPECT_EQ(ev["frames"].size(), 2u);
    EXPECT_GT(ev["mean_psnr"].get<double>(), 10.0);
    EXPECT_LE(ev["mean_ssim"].get<double>(), 1.0);
}

TEST(Cli, SynthIsByteIdenticalAcrossRuns) {
    const std::string a = " --paths.runs \"" + (kTmp / "idem_a").string() + "\" --synth.frames 9" + kSmall;
    const std::string b = " --paths.runs \"" + (kTmp / "idem_b").string() + "\" --synth.frames 9" + kSmall;
    const Result ra = run_cli("synth" + a), rb = run_cli("synth" + b);
    ASSERT_EQ(ra.code, 0) << ra.err;
    ASSERT_EQ(rb.code, 0) << rb.err;
    const fs::path da = json::parse(ra.out)["bundle"].get<std::string>();
    const fs::path db = json::parse(rb.out)["bundle"].get<std::string>();
    int compared = 0;
    for (const auto &entry : fs::directory_iterator(da)) {
        EXPECT_EQ(slurp(entry.path()), slurp(db / entry.path().filename())) << entry.path().filename();
        ++compared;
    }
    EXPECT_GT(compared, 9 * 4);
}

TEST(Cli, EvalOfGroundTruthAgainstItselfHitsTheCap) {
    const std::string args = " --paths.runs \"" + (kTmp / "self").string() + "\" --synth.frames 9" + kSmall;
    const Result s = run_cli("synth" + args);
    ASSERT_EQ(s.code, 0) << s.err;
    const fs::path bundleDir = json::parse(s.out)["bundle"].get<std::string>();
    const fs::path rendered  = kTmp / "self_rendered";
    fs::create_directories(rendered);
    for (int f : {4}) {
        fs::copy_file(frame_path(bundleDir, f, "image.png"), frame_path(rendered, f, "png"),
                      fs::copy_options::overwrite_existing);
    }
    const Result e = run_cli("eval" + args + " --paths.rendered \"" + rendered.string() + "\"");
    ASSERT_EQ(e.code, 0) << e.err;
    const json out = json::parse(e.out);
    ASSERT_EQ(out["frames"].size(), 1u);
    EXPECT_EQ(out["mean_psnr"].get<double>(), 99.0);
    EXPECT_EQ(out["mean_ssim"].get<double>(), 1.0);
}

TEST(Cli, IdentityDeformationRendersTheUniformBlend) {
    const std::string args = " --paths.runs \"" + (kTmp / "blend").string() + "\" --synth.frames 9" + kSmall +
                             " --init.num_refs 2 --train.prefit_enabled false";
    const Result s = run_cli("synth" + args);
    ASSERT_EQ(s.code, 0) << s.err;
    const fs::path run       = json::parse(s.out)["run"].get<std::string>();
    const fs::path bundleDir = run / "bundle";
    ASSERT_EQ(run_cli("init" + args).code, 0);

    const Result r = run_cli("render" + args + " --render.times 0.5 --paths.bundle \"" + bundleDir.string() +
                             "\" --paths.checkpoint \"" + (run / "init.ckpt").string() + "\"");
    ASSERT_EQ(r.code, 0) << r.err;
    const fs::path png = json::parse(r.out)["render"][0]["image"].get<std::string>();

    // Oracle: average the two reference frames by hand and render the result.
    const Checkpoint ck = load_checkpoint(run / "init.ckpt");
    ASSERT_EQ(ck.frame_set.num_refs(), 2);
    const auto &fsr = ck.frame_set;
    std::vector<Gaussian> blended;
    for (std::size_t k = 0; k < fsr.num_human(); ++k) {
        const Gaussian &a = fsr.frames[0][k], &b = fsr.frames[1][k];
        const bool va = fsr.visibility.visible(k, 0), vb = fsr.visibility.visible(k, 1);
        Gaussian g = a;
        g.mu       = va && vb ? Vec3(0.5 * (a.mu + b.mu)) : (va ? a.mu : b.mu);
        const Quat q = a.rot + quat_align_sign(b.rot, a.rot);
        g.rot        = q / q.norm();
        g.scale      = (0.5 * (a.scale.array().log() + b.scale.array().log())).exp().matrix();
        blended.push_back(g);
    }
    blended.insert(blended.end(), fsr.background.begin(), fsr.background.end());
    const PriorBundle bundle = load_bundle(bundleDir);
    ASSERT_DOUBLE_EQ(bundle.frames[4].t, 0.5);
    const RenderOutput want = render_gaussians(blended, bundle.cameras[4], RunConfig().train.raster);

    const Image got = read_png(png);
    ASSERT_EQ(got.data.size(), want.rgb.data.size());
    double worst = 0.0;
    for (std::size_t i = 0; i < got.data.size(); ++i) {
        const double quantized = std::round(std::clamp(want.rgb.data[i], 0.0, 1.0) * 255.0) / 255.0;
        worst                  = std::max(worst, std::abs(got.data[i] - quantized));
    }
    EXPECT_LE(worst, 1e-5);

    fs::path f32 = png;
    f32.replace_extension(".f32");
    const DepthMap depth = read_f32(f32);
    double worstDepth    = 0.0;
    int valid            = 0;
    for (std::size_t p = 0; p < depth.data.size(); ++p) {
        const double alpha = want.alpha.data[p];
        const double ref   = alpha > 0.5 ? want.depth.data[p] / alpha : kInvalidDepth;
        worstDepth         = std::max(worstDepth, std::abs(depth.data[p] - ref));
        valid += alpha > 0.5;
    }
    EXPECT_GT(valid, 0);
    EXPECT_LE(worstDepth, 1e-5);
}
