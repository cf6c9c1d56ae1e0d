// Copyright Contributors to the refsplat Project
// SPDX-License-Identifier: Apache-2.0

#include "test_util.hpp"

#include "refsplat/deform_net.hpp"
#include "refsplat/errors.hpp"

#include <gtest/gtest.h>

#include <numbers>

using namespace refsplat;
using namespace refsplat::test;

namespace {

NetArchitecture
small_arch(int refs = 2) {
    NetArchitecture a;
    a.num_refs                  = refs;
    a.depth                     = 3;
    a.width                     = 16;
    a.skip_after                = 1;
    a.encoding.pos_frequencies  = 2;
    a.encoding.time_frequencies = 2;
    return a;
}

/// Initialized net with every parameter, heads included, randomized.
DeformNetParams
random_net(const NetArchitecture &a, std::uint64_t seed) {
    DeformNetParams p = DeformNetParams::initialize(a, seed);
    std::mt19937_64 rng(seed + 1);
    std::normal_distribution<double> n(0.0, 0.3);
    Eigen::VectorXd flat = p.flatten();
    for (auto &v : flat) {
        v += n(rng);
    }
    p.assign(flat);
    return p;
}

DeformOutput
random_upstream(int refs, Eigen::Index n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g(0.0, 1.0);
    DeformOutput u = DeformOutput::zeros(refs, n);
    for (auto *m : {&u.w, &u.dx, &u.dr, &u.ds}) {
        for (auto &v : m->reshaped()) {
            v = g(rng);
        }
    }
    return u;
}

double
contract(const DeformOutput &a, const DeformOutput &b) {
    return (a.w.array() * b.w.array()).sum() + (a.dx.array() * b.dx.array()).sum() +
           (a.dr.array() * b.dr.array()).sum() + (a.ds.array() * b.ds.array()).sum();
}

Eigen::MatrixXd
random_inputs(int refs, Eigen::Index n, std::uint64_t seed, Eigen::VectorXd &times) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    Eigen::MatrixXd x(3 * refs, n);
    for (auto &v : x.reshaped()) {
        v = u(rng);
    }
    times.resize(n);
    for (auto &t : times) {
        t = 0.5 * (u(rng) + 1.0);
    }
    return x;
}

} // namespace

TEST(Encode, InterleavesSinCosOverOctaves) {
    const auto e = encode(0.3, 3);
    ASSERT_EQ(e.size(), 6);
    for (int k = 0; k < 3; ++k) {
        const double a = std::pow(2.0, k) * std::numbers::pi * 0.3;
        EXPECT_NEAR(e[2 * k], std::sin(a), 1e-15);
        EXPECT_NEAR(e[2 * k + 1], std::cos(a), 1e-15);
    }
}

TEST(DeformNet, ZeroHeadsGiveIdentityDeformationAndUniformWeights) {
    const auto a = small_arch(3);
    const auto p = DeformNetParams::initialize(a, 4);
    Eigen::VectorXd t;
    const auto x   = random_inputs(3, 7, 1, t);
    const auto out = deform_forward(p, x, t);
    EXPECT_LE((out.w.array() - 1.0 / 3.0).abs().maxCoeff(), 1e-15);
    EXPECT_EQ(out.dx.norm(), 0.0);
    EXPECT_EQ(out.dr.norm(), 0.0);
    EXPECT_EQ(out.ds.norm(), 0.0);
}

TEST(DeformNet, InitializationIsSeeded) {
    const auto a = small_arch();
    EXPECT_EQ(DeformNetParams::initialize(a, 9).flatten(), DeformNetParams::initialize(a, 9).flatten());
    EXPECT_NE(DeformNetParams::initialize(a, 9).flatten(), DeformNetParams::initialize(a, 10).flatten());
}

TEST(DeformNet, WeightsSumToOneOnRandomInputs) {
    const auto a = small_arch(4);
    const auto p = random_net(a, 2);
    Eigen::VectorXd t;
    const auto x   = random_inputs(4, 10000, 3, t);
    const auto out = deform_forward(p, x, t);
    EXPECT_LE((out.w.colwise().sum().array() - 1.0).abs().maxCoeff(), 1e-6);
    EXPECT_GE(out.w.minCoeff(), 0.0);
}

TEST(DeformNet, BackwardMatchesCentralDifferences) {
    const auto a = small_arch(2);
    auto p       = random_net(a, 5);
    ASSERT_GE(p.parameter_count(), 500u);
    Eigen::VectorXd t;
    const auto x  = random_inputs(2, 6, 6, t);
    const auto up = random_upstream(2, 6, 7);

    DeformTape tape;
    const auto out  = deform_forward(p, x, t, &tape);
    const auto back = deform_backward(p, tape, up);
    const Eigen::VectorXd analytic = back.grad.flatten();

    const Eigen::VectorXd base = p.flatten();
    std::vector<double> b(base.data(), base.data() + base.size());
    DeformNetParams probe = p;
    const auto numeric    = central_differences(
        b,
        [&](const std::vector<double> &v) {
            probe.assign(Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size())));
            return contract(deform_forward(probe, x, t), up);
        },
        1e-5);
    std::vector<double> an(analytic.data(), analytic.data() + analytic.size());
    EXPECT_LE(max_relative_error(an, numeric), 1e-4);
    (void)out;
}

TEST(DeformNet, StopGradientPathIsExactlyZero) {
    const auto a = small_arch(2);
    const auto p = random_net(a, 8);
    Eigen::VectorXd t;
    const auto x = random_inputs(2, 5, 9, t);
    DeformTape tape;
    deform_forward(p, x, t, &tape);
    const auto back = deform_backward(p, tape, random_upstream(2, 5, 10));
    ASSERT_EQ(back.xbar_grad.rows(), 6);
    EXPECT_TRUE((back.xbar_grad.array() == 0.0).all());
    EXPECT_GT(back.input_grad.norm(), 0.0);
}

TEST(DeformNet, TapeIsSingleUseAndTiedToParameterVersion) {
    const auto a = small_arch(2);
    auto p       = random_net(a, 11);
    Eigen::VectorXd t;
    const auto x  = random_inputs(2, 3, 12, t);
    const auto up = random_upstream(2, 3, 13);

    DeformTape tape;
    deform_forward(p, x, t, &tape);
    EXPECT_TRUE(tape.valid());
    deform_backward(p, tape, up);
    EXPECT_FALSE(tape.valid());
    EXPECT_THROW(deform_backward(p, tape, up), InvalidStateError);

    DeformTape stale;
    deform_forward(p, x, t, &stale);
    p.touch();
    EXPECT_THROW(deform_backward(p, stale, up), InvalidStateError);
}

TEST(DeformNet, ArchitectureValidation) {
    NetArchitecture a = small_arch();
    a.width           = 0;
    EXPECT_THROW(a.validate(), ConfigError);
    auto p = DeformNetParams::initialize(small_arch(), 1);
    p.head_dx.weight.resize(2, 16);
    EXPECT_THROW(p.check_shapes(), NumericalError);
}
