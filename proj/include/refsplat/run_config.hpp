// Copyright Contributors to the refsplat Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "refsplat/shape_init.hpp"
#include "refsplat/synth.hpp"
#include "refsplat/trainer.hpp"

#include <json.hpp>

#include <functional>
#include <string>
#include <vector>

namespace refsplat {

struct PathConfig {
    std::string runs = "runs"; // root of the hashed run directories
    std::string bundle;        // input bundle; defaults to <run>/bundle
    std::string checkpoint;    // input checkpoint; defaults to the previous stage's output
    std::string rendered;      // eval: directory of frame_%05d.png to score instead of rendering
};

struct RenderConfig {
    std::string times = "0,0.5,1"; // comma-separated timestamps in [0,1]
};

struct RunConfig {
    std::uint64_t seed = 0; // copied into synth, init, RANSAC, prefit and train seeds
    SynthConfig synth;
    InitConfig init;
    TrainConfig train;
    RenderConfig render;
    PathConfig paths;

    /// Desk-scale defaults: a small network and a short schedule.
    RunConfig();

    /// Propagates `seed` and the network architecture into the nested configs.
    void finalize();

    /// Flat dotted-key view of every option.
    nlohmann::json to_json() const;

    /// Applies flat dotted keys. Throws ConfigError for unknown keys or values of the wrong type.
    void apply(const nlohmann::json &flat);

    /// FNV-1a over the non-path options, 16 hex digits.
    std::string hash() const;
};

struct OptionInfo {
    std::string key;
    std::string help;
    nlohmann::json default_value;
};

/// Every key with its description and default, in registration order.
std::vector<OptionInfo> run_config_options();

/// Reads a JSON object of flat dotted keys. Throws DataError for unreadable
/// files and ConfigError for unknown keys.
RunConfig load_run_config(const std::string &path);

/// Parses a command-line value: JSON when it parses, otherwise a string.
nlohmann::json parse_option_value(const std::string &text);

/// Comma-separated list of doubles. Throws ConfigError on malformed entries.
std::vector<double> parse_times(const std::string &text);

} // namespace refsplat
