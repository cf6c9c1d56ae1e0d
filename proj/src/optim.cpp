// Copyright Contributors to the refsplat Project
// SPDX-License-Identifier: Apache-2.0

#include "refsplat/optim.hpp"

#include "refsplat/errors.hpp"

#include <cmath>

namespace refsplat {

void
Adam::update(const std::string &group, Eigen::Ref<Eigen::VectorXd> params, const Eigen::VectorXd &grad, double lr) {
    if (grad.size() != params.size()) {
        throw InvalidStateError("Adam::update: gradient size differs from parameter size in group " + group);
    }
    if (mStep == 0) {
        throw InvalidStateError("Adam::update called before begin_step()");
    }
    auto &mom = mGroups[group];
    if (mom.m.size() != params.size()) {
        mom.m = Eigen::VectorXd::Zero(params.size());
        mom.v = Eigen::VectorXd::Zero(params.size());
    }
    const double b1 = mConfig.beta1, b2 = mConfig.beta2;
    mom.m = b1 * mom.m + (1.0 - b1) * grad;
    mom.v = b2 * mom.v + (1.0 - b2) * grad.cwiseAbs2();
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(mStep));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(mStep));
    params.array() -= lr * (mom.m.array() / c1) / ((mom.v.array() / c2).sqrt() + mConfig.epsilon);
}

void
Adam::remap(const std::string &group, const std::vector<std::int64_t> &origin, int stride) {
    auto it = mGroups.find(group);
    if (it == mGroups.end()) {
        return;
    }
    Moments fresh;
    const auto n = static_cast<Eigen::Index>(origin.size()) * stride;
    fresh.m      = Eigen::VectorXd::Zero(n);
    fresh.v      = Eigen::VectorXd::Zero(n);
    for (std::size_t k = 0; k < origin.size(); ++k) {
        const std::int64_t src = origin[k];
        if (src < 0) {
            continue;
        }
        if ((src + 1) * stride > it->second.m.size()) {
            throw InvalidStateError("Adam::remap: origin index out of range in group " + group);
        }
        fresh.m.segment(static_cast<Eigen::Index>(k) * stride, stride) = it->second.m.segment(src * stride, stride);
        fresh.v.segment(static_cast<Eigen::Index>(k) * stride, stride) = it->second.v.segment(src * stride, stride);
    }
    it->second = std::move(fresh);
}

} // namespace refsplat
