// Copyright Contributors to the refsplat Project
// SPDX-License-Identifier: Apache-2.0

#include "test_util.hpp"

#include "refsplat/errors.hpp"
#include "refsplat/io.hpp"
#include "refsplat/synth.hpp"

#include <gtest/gtest.h>

#include <fstream>

using namespace refsplat;
using namespace refsplat::test;

namespace {

fs::path
scratch(const std::string &name) {
    const fs::path dir = fs::path(REFSPLAT_TEST_TMP) / "io" / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

PriorBundle
small_bundle() {
    SynthConfig c           = SynthConfig::preset(MotionType::RigidTranslation);
    c.frames                = 4;
    c.width                 = 24;
    c.height                = 20;
    c.focal                 = 33.0;
    c.human_lattice         = 4;
    c.background_points     = 200;
    c.sparse_points_per_frame = 10;
    return generate(c).bundle;
}

template <class F>
DataError
data_error_of(F &&f) {
    try {
        f();
    } catch (const DataError &e) {
        return e;
    }
    ADD_FAILURE() << "expected a DataError";
    return DataError("", "", "");
}

} // namespace

TEST(Png, RoundTripQuantizesToEightBits) {
    const auto dir  = scratch("png");
    const Image img = random_image(7, 5, 1);
    write_png(img, dir / "a.png");
    const Image back = read_png(dir / "a.png");
    ASSERT_TRUE(back.same_shape(7, 5));
    for (std::size_t i = 0; i < img.data.size(); ++i) {
        EXPECT_NEAR(back.data[i], img.data[i], 0.5 / 255.0 + 1e-12);
    }
}

TEST(Pgm, RoundTripIsExact) {
    const auto dir = scratch("pgm");
    Mask m(6, 3, 1, 0);
    m.at(2, 1) = 255;
    m.at(5, 2) = 7;
    write_pgm(m, dir / "m.pgm");
    EXPECT_EQ(read_pgm(dir / "m.pgm").data, m.data);
    std::ofstream(dir / "bad.pgm") << "P2\n1 1\n255\n0\n";
    EXPECT_EQ(data_error_of([&] { read_pgm(dir / "bad.pgm"); }).field, "magic");
}

TEST(F32, RoundTripAtFloatPrecisionAndSidecarChecks) {
    const auto dir = scratch("f32");
    DepthMap d(5, 4, 1, 1.25);
    d.at(1, 1) = kInvalidDepth;
    d.at(3, 2) = 3.1;
    write_f32(d, dir / "d.f32");
    EXPECT_TRUE(fs::exists(f32_sidecar(dir / "d.f32")));
    const DepthMap back = read_f32(dir / "d.f32");
    for (std::size_t p = 0; p < d.data.size(); ++p) {
        EXPECT_NEAR(back.data[p], d.data[p], 1e-6);
    }
    EXPECT_EQ(back.at(1, 1), kInvalidDepth);
    std::ofstream(f32_sidecar(dir / "d.f32")) << R"({"width": 6, "height": 4})";
    EXPECT_EQ(data_error_of([&] { read_f32(dir / "d.f32"); }).field, "size");
}

TEST(Bundle, SaveLoadRoundTrip) {
    const auto dir = scratch("bundle");
    const auto b   = small_bundle();
    save_bundle(b, dir);
    const auto back = load_bundle(dir);
    ASSERT_EQ(back.frames.size(), b.frames.size());
    for (std::size_t f = 0; f < b.frames.size(); ++f) {
        EXPECT_EQ(back.cameras[f].K, b.cameras[f].K);
        EXPECT_EQ(back.cameras[f].E, b.cameras[f].E);
        EXPECT_DOUBLE_EQ(back.frames[f].t, b.frames[f].t);
        EXPECT_EQ(back.frames[f].mask.data, b.frames[f].mask.data);
        ASSERT_EQ(back.frames[f].sparse_points.size(), b.frames[f].sparse_points.size());
        for (std::size_t p = 0; p < b.frames[f].depth_com.data.size(); ++p) {
            EXPECT_NEAR(back.frames[f].depth_com.data[p], b.frames[f].depth_com.data[p], 1e-5);
        }
    }
    ASSERT_EQ(back.tracks.size(), b.tracks.size());
    for (std::size_t k = 0; k < b.tracks.size(); ++k) {
        EXPECT_EQ(back.tracks[k].kp_id, b.tracks[k].kp_id);
        EXPECT_EQ(back.tracks[k].part_id, b.tracks[k].part_id);
        for (std::size_t f = 0; f < b.frames.size(); ++f) {
            EXPECT_EQ(back.tracks[k].obs[f].visible, b.tracks[k].obs[f].visible);
            EXPECT_EQ(back.tracks[k].obs[f].pixel, b.tracks[k].obs[f].pixel);
        }
    }
}

TEST(Bundle, ErrorsNameTheFileAndField) {
    const auto dir = scratch("broken");
    EXPECT_EQ(data_error_of([&] { load_bundle(dir / "missing"); }).field, "directory");
    save_bundle(small_bundle(), dir);
    fs::remove(frame_path(dir, 2, "image.png"));
    const auto e = data_error_of([&] { load_bundle(dir); });
    EXPECT_NE(e.path.find("image.png"), std::string::npos);
    EXPECT_EQ(e.field, "file");

    save_bundle(small_bundle(), dir);
    std::ofstream(dir / "cameras.json") << "{ not json";
    EXPECT_EQ(data_error_of([&] { load_bundle(dir); }).field, "json");
}

TEST(Bundle, ValidationCatchesCrossFieldViolations) {
    auto b = small_bundle();
    EXPECT_NO_THROW(validate_bundle(b));

    auto bad = b;
    bad.frames[1].mask = Mask(3, 3, 1, 0);
    EXPECT_EQ(data_error_of([&] { validate_bundle(bad); }).field, "dimensions");

    bad = b;
    bad.frames[0].mask.data.assign(bad.frames[0].mask.data.size(), 0);
    EXPECT_EQ(data_error_of([&] { validate_bundle(bad); }).field, "mask");

    bad = b;
    bad.tracks[0].obs[0] = {bad.frames[0].t, Vec2(-3, 2), true};
    EXPECT_EQ(data_error_of([&] { validate_bundle(bad); }).field, "pixel");

    bad = b;
    bad.tracks[0].obs.pop_back();
    EXPECT_EQ(data_error_of([&] { validate_bundle(bad); }).field, "obs");
}

TEST(Checkpoint, RoundTripIsExact) {
    const auto dir = scratch("ckpt");
    auto fsIn      = random_frame_set(3, 7, 4, 0.3);
    fsIn.lineage   = {{100, 2}, {101, 100}};
    NetArchitecture arch;
    arch.num_refs                 = 3;
    arch.depth                    = 2;
    arch.width                    = 8;
    arch.skip_after               = 1;
    arch.encoding.pos_frequencies = 2;
    arch.encoding.time_frequencies = 2;
    const auto params = DeformNetParams::initialize(arch, 5);
    save_checkpoint(dir / "c.bin", fsIn, params, {{"stage", "test"}});
    const auto c = load_checkpoint(dir / "c.bin");
    EXPECT_EQ(c.meta.at("stage"), "test");
    EXPECT_EQ(c.frame_set.ref_times, fsIn.ref_times);
    EXPECT_EQ(c.frame_set.lineage, fsIn.lineage);
    EXPECT_EQ(c.frame_set.visibility.flags, fsIn.visibility.flags);
    EXPECT_EQ(c.frame_set.seed_keypoint, fsIn.seed_keypoint);
    EXPECT_EQ(pack(c.frame_set.background), pack(fsIn.background));
    for (int i = 0; i < 3; ++i) {
        EXPECT_EQ(pack(c.frame_set.frames[i]), pack(fsIn.frames[i]));
    }
    EXPECT_EQ(c.params.flatten(), params.flatten());
    EXPECT_EQ(c.params.arch.width, 8);
}

TEST(Checkpoint, CorruptionIsReported) {
    const auto dir = scratch("ckpt_bad");
    NetArchitecture arch;
    arch.num_refs = 2;
    arch.depth    = 1;
    arch.width    = 4;
    arch.skip_after = -1;
    save_checkpoint(dir / "c.bin", random_frame_set(2, 3, 1), DeformNetParams::initialize(arch, 1));
    const auto size = fs::file_size(dir / "c.bin");

    fs::copy_file(dir / "c.bin", dir / "trunc.bin");
    fs::resize_file(dir / "trunc.bin", size - 8);
    EXPECT_EQ(data_error_of([&] { load_checkpoint(dir / "trunc.bin"); }).field, "value_count");

    std::ofstream(dir / "magic.bin") << "NOTACKPT0000000000";
    EXPECT_EQ(data_error_of([&] { load_checkpoint(dir / "magic.bin"); }).field, "magic");
    EXPECT_EQ(data_error_of([&] { load_checkpoint(dir / "none.bin"); }).field, "file");
}
