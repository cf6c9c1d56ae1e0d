// Copyright Contributors to the refsplat Project
// SPDX-License-Identifier: Apache-2.0

#include "refsplat/metrics.hpp"

#include "refsplat/errors.hpp"

#include <array>
#include <cmath>

namespace refsplat {

namespace {

constexpr int kRadius = 5;
constexpr double kC1  = 0.01 * 0.01;
constexpr double kC2  = 0.03 * 0.03;

std::array<double, 2 * kRadius + 1>
gaussian_window() {
    std::array<double, 2 * kRadius + 1> g{};
    double sum = 0.0;
    for (int i = -kRadius; i <= kRadius; ++i) {
        g[i + kRadius] = std::exp(-(i * i) / (2.0 * 1.5 * 1.5));
        sum += g[i + kRadius];
    }
    for (auto &v : g) {
        v /= sum;
    }
    return g;
}

using Plane = Eigen::MatrixXd; // height x width

/// Separable 'same' filtering with zero padding. Self-adjoint for this kernel.
Plane
blur(const Plane &in) {
    static const auto g = gaussian_window();
    const Eigen::Index H = in.rows(), W = in.cols();
    Plane tmp = Plane::Zero(H, W);
    for (Eigen::Index y = 0; y < H; ++y) {
        for (Eigen::Index x = 0; x < W; ++x) {
            double acc = 0.0;
            for (int k = -kRadius; k <= kRadius; ++k) {
                const Eigen::Index xx = x + k;
                if (xx >= 0 && xx < W) {
                    acc += g[k + kRadius] * in(y, xx);
                }
            }
            tmp(y, x) = acc;
        }
    }
    Plane out = Plane::Zero(H, W);
    for (Eigen::Index y = 0; y < H; ++y) {
        for (Eigen::Index x = 0; x < W; ++x) {
            double acc = 0.0;
            for (int k = -kRadius; k <= kRadius; ++k) {
                const Eigen::Index yy = y + k;
                if (yy >= 0 && yy < H) {
                    acc += g[k + kRadius] * tmp(yy, x);
                }
            }
            out(y, x) = acc;
        }
    }
    return out;
}

Plane
channel(const Image &img, int c) {
    Plane p(img.height, img.width);
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x) {
            p(y, x) = img.at(x, y, c);
        }
    }
    return p;
}

void
check_pair(const Image &a, const Image &b) {
    if (a.width != b.width || a.height != b.height || a.channels != b.channels) {
        throw DataError("image", "dimensions", "metric inputs differ in size");
    }
}

double
ssim_impl(const Image &a, const Image &b, Image *dA) {
    check_pair(a, b);
    const double norm = 1.0 / (static_cast<double>(a.pixel_count()) * a.channels);
    if (dA != nullptr) {
        *dA = Image(a.width, a.height, a.channels, 0.0);
    }
    double total = 0.0;
    for (int c = 0; c < a.channels; ++c) {
        const Plane x   = channel(a, c);
        const Plane y   = channel(b, c);
        const Plane mx  = blur(x);
        const Plane my  = blur(y);
        const Plane exx = blur(x.cwiseProduct(x));
        const Plane eyy = blur(y.cwiseProduct(y));
        const Plane exy = blur(x.cwiseProduct(y));

        Plane gMu  = Plane::Zero(x.rows(), x.cols());
        Plane gExx = Plane::Zero(x.rows(), x.cols());
        Plane gExy = Plane::Zero(x.rows(), x.cols());
        for (Eigen::Index i = 0; i < x.size(); ++i) {
            const double mux = mx.data()[i], muy = my.data()[i];
            // Written so that identical inputs produce bit-identical numerator and denominator.
            const double muxy = mux * muy;
            const double sxx  = exx.data()[i] - mux * mux;
            const double syy  = eyy.data()[i] - muy * muy;
            const double sxy  = exy.data()[i] - muxy;
            const double n1 = muxy + muxy + kC1;
            const double n2 = sxy + sxy + kC2;
            const double d1 = mux * mux + muy * muy + kC1;
            const double d2 = sxx + syy + kC2;
            const double s  = (n1 * n2) / (d1 * d2);
            total += s;
            if (dA != nullptr) {
                gMu.data()[i] = norm * s * (2.0 * muy / n1 - 2.0 * muy / n2 - 2.0 * mux / d1 + 2.0 * mux / d2);
                gExx.data()[i] = norm * (-s / d2);
                gExy.data()[i] = norm * (2.0 * s / n2);
            }
        }
        if (dA != nullptr) {
            const Plane g = blur(gMu) + 2.0 * x.cwiseProduct(blur(gExx)) + y.cwiseProduct(blur(gExy));
            for (int yy = 0; yy < a.height; ++yy) {
                for (int xx = 0; xx < a.width; ++xx) {
                    dA->at(xx, yy, c) = g(yy, xx);
                }
            }
        }
    }
    return total * norm;
}

} // namespace

double
psnr(const Image &a, const Image &b) {
    check_pair(a, b);
    double sse = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const double d = a.data[i] - b.data[i];
        sse += d * d;
    }
    const double mse = sse / static_cast<double>(a.data.size());
    if (mse < 1e-10) {
        return kPsnrCap;
    }
    return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

double
ssim(const Image &a, const Image &b) {
    return ssim_impl(a, b, nullptr);
}

double
ssim_with_grad(const Image &a, const Image &b, Image &dA) {
    return ssim_impl(a, b, &dA);
}

double
centered_trajectory_error(const std::vector<std::vector<Vec3>> &estimate, const std::vector<std::vector<Vec3>> &truth,
                          const std::vector<std::vector<std::uint8_t>> *observed) {
    if (estimate.empty() || estimate.size() != truth.size() || (observed && observed->size() != truth.size())) {
        throw RangeError("centered_trajectory_error: frame counts differ or are zero");
    }
    const std::size_t T = estimate.size();
    const std::size_t N = estimate[0].size();
    for (std::size_t t = 0; t < T; ++t) {
        if (estimate[t].size() != N || truth[t].size() != N || (observed && (*observed)[t].size() != N)) {
            throw RangeError("centered_trajectory_error: point counts differ across frames");
        }
    }
    auto seen = [&](std::size_t t, std::size_t k) { return observed == nullptr || (*observed)[t][k] != 0; };
    double sum        = 0.0;
    std::size_t count = 0;
    for (std::size_t k = 0; k < N; ++k) {
        Vec3 offset   = Vec3::Zero();
        std::size_t m = 0;
        for (std::size_t t = 0; t < T; ++t) {
            if (seen(t, k)) {
                offset += estimate[t][k] - truth[t][k];
                ++m;
            }
        }
        if (m == 0) {
            continue;
        }
        offset /= static_cast<double>(m);
        for (std::size_t t = 0; t < T; ++t) {
            if (seen(t, k)) {
                sum += (estimate[t][k] - truth[t][k] - offset).norm();
            }
        }
        count += m;
    }
    if (count == 0) {
        throw RangeError("centered_trajectory_error: no observed points");
    }
    return sum / static_cast<double>(count);
}

} // namespace refsplat
