// Copyright Contributors to the refsplat Project
// SPDX-License-Identifier: Apache-2.0

#include "refsplat/deform_net.hpp"

#include "refsplat/errors.hpp"

#include <cmath>
#include <numbers>
#include <random>
#include <string>

namespace refsplat {

Eigen::VectorXd
encode(double r, int frequencies) {
    Eigen::VectorXd out(2 * frequencies);
    double freq = std::numbers::pi;
    for (int k = 0; k < frequencies; ++k) {
        out[2 * k]     = std::sin(freq * r);
        out[2 * k + 1] = std::cos(freq * r);
        freq *= 2.0;
    }
    return out;
}

int
NetArchitecture::input_dim() const {
    return num_refs * 3 * 2 * encoding.pos_frequencies + 2 * encoding.time_frequencies;
}

int
NetArchitecture::skip_target() const {
    return (skip_after >= 0 && skip_after + 1 < depth) ? skip_after + 1 : -1;
}

void
NetArchitecture::validate() const {
    if (num_refs < 1) {
        throw ConfigError("net: num_refs must be >= 1");
    }
    if (depth < 1 || width < 1) {
        throw ConfigError("net: depth and width must be >= 1");
    }
    if (encoding.pos_frequencies < 1 || encoding.time_frequencies < 1) {
        throw ConfigError("net: encoding frequency counts must be >= 1");
    }
}

DeformOutput
DeformOutput::zeros(int numRefs, Eigen::Index n) {
    DeformOutput o;
    o.w  = Eigen::MatrixXd::Zero(numRefs, n);
    o.dx = Eigen::MatrixXd::Zero(3 * numRefs, n);
    o.dr = Eigen::MatrixXd::Zero(4 * numRefs, n);
    o.ds = Eigen::MatrixXd::Zero(3 * numRefs, n);
    return o;
}

namespace {

DenseLayer
uniform_layer(int out, int in, std::mt19937_64 &rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    DenseLayer layer;
    layer.weight.resize(out, in);
    layer.bias.resize(out);
    for (Eigen::Index i = 0; i < layer.weight.size(); ++i) {
        layer.weight.data()[i] = dist(rng);
    }
    for (Eigen::Index i = 0; i < layer.bias.size(); ++i) {
        layer.bias[i] = dist(rng);
    }
    return layer;
}

DenseLayer
zero_layer(int out, int in) {
    return DenseLayer{Eigen::MatrixXd::Zero(out, in), Eigen::VectorXd::Zero(out)};
}

int
layer_input_dim(const NetArchitecture &arch, int layer) {
    if (layer == 0) {
        return arch.input_dim();
    }
    return layer == arch.skip_target() ? arch.width + arch.input_dim() : arch.width;
}

template <typename F>
void
for_each_layer(DeformNetParams &p, F &&f) {
    for (auto &l : p.hidden) {
        f(l);
    }
    f(p.head_w);
    f(p.head_dx);
    f(p.head_dr);
    f(p.head_ds);
}

template <typename F>
void
for_each_layer(const DeformNetParams &p, F &&f) {
    for (const auto &l : p.hidden) {
        f(l);
    }
    f(p.head_w);
    f(p.head_dx);
    f(p.head_dr);
    f(p.head_ds);
}

void
check_head(const DenseLayer &head, int rows, int width, const char *name) {
    if (head.weight.rows() != rows || head.weight.cols() != width || head.bias.size() != rows) {
        throw NumericalError(std::string("deform net head '") + name + "' has shape " +
                             std::to_string(head.weight.rows()) + "x" + std::to_string(head.weight.cols()) +
                             ", expected " + std::to_string(rows) + "x" + std::to_string(width));
    }
}

} // namespace

DeformNetParams
DeformNetParams::initialize(const NetArchitecture &arch, std::uint64_t seed) {
    arch.validate();
    std::mt19937_64 rng(seed);
    DeformNetParams p;
    p.arch = arch;
    for (int l = 0; l < arch.depth; ++l) {
        p.hidden.push_back(uniform_layer(arch.width, layer_input_dim(arch, l), rng));
    }
    const int B = arch.num_refs;
    p.head_w  = zero_layer(B, arch.width);
    p.head_dx = zero_layer(3 * B, arch.width);
    p.head_dr = zero_layer(4 * B, arch.width);
    p.head_ds = zero_layer(3 * B, arch.width);
    p.touch();
    return p;
}

DeformNetParams
DeformNetParams::zeros_like(const DeformNetParams &other) {
    DeformNetParams p = other;
    for_each_layer(p, [](DenseLayer &l) {
        l.weight.setZero();
        l.bias.setZero();
    });
    p.touch();
    return p;
}

std::size_t
DeformNetParams::parameter_count() const {
    std::size_t n = 0;
    for_each_layer(*this, [&](const DenseLayer &l) { n += l.weight.size() + l.bias.size(); });
    return n;
}

Eigen::VectorXd
DeformNetParams::flatten() const {
    Eigen::VectorXd flat(parameter_count());
    Eigen::Index at = 0;
    for_each_layer(*this, [&](const DenseLayer &l) {
        flat.segment(at, l.weight.size()) = l.weight.reshaped();
        at += l.weight.size();
        flat.segment(at, l.bias.size()) = l.bias;
        at += l.bias.size();
    });
    return flat;
}

void
DeformNetParams::assign(const Eigen::VectorXd &flat) {
    if (static_cast<std::size_t>(flat.size()) != parameter_count()) {
        throw InvalidStateError("DeformNetParams::assign: size mismatch");
    }
    Eigen::Index at = 0;
    for_each_layer(*this, [&](DenseLayer &l) {
        l.weight.reshaped() = flat.segment(at, l.weight.size());
        at += l.weight.size();
        l.bias = flat.segment(at, l.bias.size());
        at += l.bias.size();
    });
    touch();
}

void
DeformNetParams::check_shapes() const {
    arch.validate();
    if (static_cast<int>(hidden.size()) != arch.depth) {
        throw NumericalError("deform net has " + std::to_string(hidden.size()) + " hidden layers, expected " +
                             std::to_string(arch.depth));
    }
    for (int l = 0; l < arch.depth; ++l) {
        if (hidden[l].weight.rows() != arch.width || hidden[l].weight.cols() != layer_input_dim(arch, l) ||
            hidden[l].bias.size() != arch.width) {
            throw NumericalError("deform net hidden layer " + std::to_string(l) + " has the wrong shape");
        }
    }
    const int B = arch.num_refs;
    check_head(head_w, B, arch.width, "w");
    check_head(head_dx, 3 * B, arch.width, "dx");
    check_head(head_dr, 4 * B, arch.width, "dr");
    check_head(head_ds, 3 * B, arch.width, "ds");
}

Eigen::MatrixXd
encode_inputs(const NetArchitecture &arch, const Eigen::MatrixXd &xbar, const Eigen::VectorXd &times) {
    const int B = arch.num_refs;
    if (xbar.rows() != 3 * B) {
        throw NumericalError("deform net input has " + std::to_string(xbar.rows()) + " position rows, expected " +
                             std::to_string(3 * B));
    }
    if (times.size() != xbar.cols()) {
        throw NumericalError("deform net: one timestamp per sample is required");
    }
    const int Lp = arch.encoding.pos_frequencies;
    const int Lt = arch.encoding.time_frequencies;
    Eigen::MatrixXd in(arch.input_dim(), xbar.cols());
    for (Eigen::Index n = 0; n < xbar.cols(); ++n) {
        Eigen::Index row = 0;
        for (int r = 0; r < 3 * B; ++r) {
            in.col(n).segment(row, 2 * Lp) = encode(xbar(r, n), Lp);
            row += 2 * Lp;
        }
        in.col(n).segment(row, 2 * Lt) = encode(times[n], Lt);
    }
    return in;
}

DeformOutput
deform_forward(const DeformNetParams &params, const Eigen::MatrixXd &xbar, const Eigen::VectorXd &times,
               DeformTape *tape) {
    params.check_shapes();
    const auto &arch = params.arch;
    Eigen::MatrixXd input = encode_inputs(arch, xbar, times);
    const Eigen::Index N  = input.cols();
    const int skip        = arch.skip_target();

    std::vector<Eigen::MatrixXd> hidden;
    hidden.reserve(arch.depth);
    Eigen::MatrixXd h;
    for (int l = 0; l < arch.depth; ++l) {
        const DenseLayer &layer = params.hidden[l];
        Eigen::MatrixXd z;
        if (l == 0) {
            z = layer.weight * input;
        } else if (l == skip) {
            z = layer.weight.leftCols(arch.width) * h + layer.weight.rightCols(input.rows()) * input;
        } else {
            z = layer.weight * h;
        }
        z.colwise() += layer.bias;
        h = z.cwiseMax(0.0);
        hidden.push_back(h);
    }

    DeformOutput out;
    Eigen::MatrixXd logits = params.head_w.weight * h;
    logits.colwise() += params.head_w.bias;
    out.w.resize(logits.rows(), N);
    for (Eigen::Index n = 0; n < N; ++n) {
        const double m        = logits.col(n).maxCoeff();
        Eigen::VectorXd e     = (logits.col(n).array() - m).exp();
        out.w.col(n)          = e / e.sum();
    }
    out.dx = params.head_dx.weight * h;
    out.dx.colwise() += params.head_dx.bias;
    out.dr = params.head_dr.weight * h;
    out.dr.colwise() += params.head_dr.bias;
    out.ds = params.head_ds.weight * h;
    out.ds.colwise() += params.head_ds.bias;

    if (tape != nullptr) {
        tape->mVersion  = params.version();
        tape->mConsumed = false;
        tape->mInput    = std::move(input);
        tape->mHidden   = std::move(hidden);
        tape->mWeights  = out.w;
    }
    return out;
}

DeformBackwardResult
deform_backward(const DeformNetParams &params, DeformTape &tape, const DeformOutput &upstream) {
    if (tape.mVersion == 0) {
        throw InvalidStateError("deform_backward: tape was never recorded");
    }
    if (tape.mConsumed) {
        throw InvalidStateError("deform_backward: tape was already consumed");
    }
    if (tape.mVersion != params.version()) {
        throw InvalidStateError("deform_backward: parameters changed since the forward pass");
    }
    const auto &arch    = params.arch;
    const Eigen::Index N = tape.mInput.cols();
    if (upstream.w.cols() != N || upstream.dx.cols() != N || upstream.dr.cols() != N || upstream.ds.cols() != N ||
        upstream.w.rows() != arch.num_refs) {
        throw InvalidStateError("deform_backward: upstream gradient shape does not match the tape");
    }
    tape.mConsumed = true;

    DeformBackwardResult res{DeformNetParams::zeros_like(params), Eigen::MatrixXd::Zero(tape.mInput.rows(), N),
                             Eigen::MatrixXd::Zero(3 * arch.num_refs, N)};
    auto &g = res.grad;

    // softmax: dlogit = w * (dw - <w, dw>)
    const Eigen::MatrixXd &w = tape.mWeights;
    Eigen::MatrixXd dLogits  = upstream.w;
    for (Eigen::Index n = 0; n < N; ++n) {
        const double inner = w.col(n).dot(upstream.w.col(n));
        dLogits.col(n)     = w.col(n).cwiseProduct((upstream.w.col(n).array() - inner).matrix());
    }

    const Eigen::MatrixXd &hLast = tape.mHidden.back();
    auto headBackward = [&](const DenseLayer &head, DenseLayer &grad, const Eigen::MatrixXd &dOut,
                            Eigen::MatrixXd &dh) {
        grad.weight.noalias() += dOut * hLast.transpose();
        grad.bias += dOut.rowwise().sum();
        dh.noalias() += head.weight.transpose() * dOut;
    };
    Eigen::MatrixXd dh = Eigen::MatrixXd::Zero(arch.width, N);
    headBackward(params.head_w, g.head_w, dLogits, dh);
    headBackward(params.head_dx, g.head_dx, upstream.dx, dh);
    headBackward(params.head_dr, g.head_dr, upstream.dr, dh);
    headBackward(params.head_ds, g.head_ds, upstream.ds, dh);

    const int skip = arch.skip_target();
    for (int l = arch.depth - 1; l >= 0; --l) {
        const Eigen::MatrixXd dz = (tape.mHidden[l].array() > 0.0).select(dh, 0.0);
        const DenseLayer &layer  = params.hidden[l];
        DenseLayer &gl           = g.hidden[l];
        gl.bias                  = dz.rowwise().sum();
        if (l == 0) {
            gl.weight.noalias() = dz * tape.mInput.transpose();
            res.input_grad.noalias() += layer.weight.transpose() * dz;
        } else if (l == skip) {
            const Eigen::MatrixXd &hPrev = tape.mHidden[l - 1];
            gl.weight.leftCols(arch.width).noalias()               = dz * hPrev.transpose();
            gl.weight.rightCols(tape.mInput.rows()).noalias()      = dz * tape.mInput.transpose();
            res.input_grad.noalias() += layer.weight.rightCols(tape.mInput.rows()).transpose() * dz;
            dh = layer.weight.leftCols(arch.width).transpose() * dz;
        } else {
            gl.weight.noalias() = dz * tape.mHidden[l - 1].transpose();
            dh                  = layer.weight.transpose() * dz;
        }
    }
    // Reference positions enter through sg(), so xbar_grad stays zero.
    return res;
}

} // namespace refsplat
