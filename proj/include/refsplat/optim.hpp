// Copyright Contributors to the refsplat Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace refsplat {

struct AdamConfig {
    double beta1   = 0.9;
    double beta2   = 0.999;
    double epsilon = 1e-15;
};

/// One Adam instance over named parameter groups, each with its own rate.
class Adam {
  public:
    explicit Adam(AdamConfig config = {}) : mConfig(config) {}

    /// Applies one update to `params` in place. Groups are created on first use
    /// and resized with zero moments if the parameter count changes.
    void update(const std::string &group, Eigen::Ref<Eigen::VectorXd> params, const Eigen::VectorXd &grad, double lr);

    /// Call once per optimizer step, before the group updates of that step.
    void
    begin_step() {
        ++mStep;
    }
    std::int64_t
    step() const {
        return mStep;
    }

    /// Reorders a group's moments after its parameters were rebuilt. origin[n]
    /// is the old entry that new entry n continues, or -1 for a fresh entry;
    /// `stride` scalars belong to each entry.
    void remap(const std::string &group, const std::vector<std::int64_t> &origin, int stride);

  private:
    struct Moments {
        Eigen::VectorXd m;
        Eigen::VectorXd v;
    };
    AdamConfig mConfig;
    std::int64_t mStep = 0;
    std::map<std::string, Moments> mGroups;
};

} // namespace refsplat
