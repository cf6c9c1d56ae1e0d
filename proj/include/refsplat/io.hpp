// Copyright Contributors to the refsplat Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "refsplat/deform_net.hpp"
#include "refsplat/scene_model.hpp"

#include <json.hpp>

#include <filesystem>
#include <string>

namespace refsplat {

namespace fs = std::filesystem;

/// 8-bit RGB PNG; values are clamped to [0,1] and rounded.
void write_png(const Image &image, const fs::path &path);
Image read_png(const fs::path &path);

/// Binary 8-bit PGM (P5).
void write_pgm(const Mask &mask, const fs::path &path);
Mask read_pgm(const fs::path &path);

/// Raw little-endian float32 raster plus a sidecar `<stem>.json` holding
/// {"width", "height"}; e.g. frame_00000.depth_com.f32 and frame_00000.depth_com.json.
void write_f32(const DepthMap &depth, const fs::path &path);
DepthMap read_f32(const fs::path &path);
fs::path f32_sidecar(const fs::path &path);

/// File name of a per-frame artifact, e.g. frame_path(dir, 3, "image.png").
fs::path frame_path(const fs::path &dir, int frame, const std::string &suffix);

/// Writes cameras.json, keypoints.json, sparse_points.json and the per-frame rasters.
void save_bundle(const PriorBundle &bundle, const fs::path &dir);

/// Loads and validates a bundle directory. Errors are DataError carrying the
/// offending file and field.
PriorBundle load_bundle(const fs::path &dir);

/// Checks the cross-field bundle invariants; `dir` is only used in messages.
void validate_bundle(const PriorBundle &bundle, const fs::path &dir = {});

struct Checkpoint {
    GaussianFrameSet frame_set;
    DeformNetParams params;
    nlohmann::json meta = nlohmann::json::object();
};

/// Layout: 8-byte magic "RSPLCKPT", little-endian u64 header length, UTF-8
/// JSON header (counts, shapes, ids, lineage, visibility, meta), then packed
/// little-endian float64 values.
void save_checkpoint(const fs::path &path, const GaussianFrameSet &frameSet, const DeformNetParams &params,
                     const nlohmann::json &meta = nlohmann::json::object());
Checkpoint load_checkpoint(const fs::path &path);

} // namespace refsplat
