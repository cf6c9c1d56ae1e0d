// Copyright Contributors to the refsplat Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <vector>

namespace refsplat {

struct EncodingConfig {
    int pos_frequencies  = 10;
    int time_frequencies = 10;
};

/// Frequency encoding (sin(2^k pi r), cos(2^k pi r)) for k = 0..L-1, interleaved.
Eigen::VectorXd encode(double r, int frequencies);

struct NetArchitecture {
    int num_refs = 4;   // B
    int depth    = 8;   // hidden layers
    int width    = 256; // hidden units
    /// Hidden layer whose output is concatenated with the encoded input before
    /// the next layer; negative disables the skip.
    int skip_after = 4;
    EncodingConfig encoding;

    int input_dim() const;
    int skip_target() const; // layer that receives the concatenation, or -1
    void validate() const;
};

struct DenseLayer {
    Eigen::MatrixXd weight; // out x in
    Eigen::VectorXd bias;
};

/// Per-sample network outputs for a batch of N Gaussians. Column n belongs to
/// sample n; reference frame i occupies rows [3i, 3i+3) of dx and ds and
/// [4i, 4i+4) of dr.
struct DeformOutput {
    Eigen::MatrixXd w;  // B x N, softmax weights
    Eigen::MatrixXd dx; // 3B x N
    Eigen::MatrixXd dr; // 4B x N
    Eigen::MatrixXd ds; // 3B x N (log-scale offsets)

    Eigen::Index
    count() const {
        return w.cols();
    }
    static DeformOutput zeros(int numRefs, Eigen::Index n);
};

/// Weights of the deformation MLP. Any code that mutates the tensors must call
/// touch() so outstanding tapes are invalidated.
class DeformNetParams {
  public:
    NetArchitecture arch;
    std::vector<DenseLayer> hidden;
    DenseLayer head_w;
    DenseLayer head_dx;
    DenseLayer head_dr;
    DenseLayer head_ds;

    /// Hidden layers: uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)); heads zero.
    static DeformNetParams initialize(const NetArchitecture &arch, std::uint64_t seed);
    /// Same shapes, all zeros. Used as the gradient container.
    static DeformNetParams zeros_like(const DeformNetParams &other);

    std::size_t parameter_count() const;
    Eigen::VectorXd flatten() const;
    void assign(const Eigen::VectorXd &flat);

    void
    touch() {
        mVersion = ++sVersionCounter;
    }
    std::uint64_t
    version() const {
        return mVersion;
    }

    /// Throws NumericalError naming the head whose shape disagrees with arch.
    void check_shapes() const;

  private:
    std::uint64_t mVersion = ++sVersionCounter;
    static inline std::uint64_t sVersionCounter = 0;
};

struct DeformBackwardResult;
class DeformTape;

DeformOutput deform_forward(const DeformNetParams &, const Eigen::MatrixXd &, const Eigen::VectorXd &,
                            DeformTape *);
DeformBackwardResult deform_backward(const DeformNetParams &, DeformTape &, const DeformOutput &);

/// Activations recorded by forward() for a single backward() call.
class DeformTape {
  public:
    bool
    valid() const {
        return mVersion != 0 && !mConsumed;
    }

  private:
    friend DeformOutput deform_forward(const DeformNetParams &, const Eigen::MatrixXd &,
                                       const Eigen::VectorXd &, DeformTape *);
    friend DeformBackwardResult deform_backward(const DeformNetParams &, DeformTape &, const DeformOutput &);
    std::uint64_t mVersion = 0;
    bool mConsumed         = false;
    Eigen::MatrixXd mInput;
    std::vector<Eigen::MatrixXd> mHidden; // post-ReLU output of every hidden layer
    Eigen::MatrixXd mWeights;
};

/// Encodes sg(xbar) (3B x N reference positions) and per-sample times.
Eigen::MatrixXd encode_inputs(const NetArchitecture &arch, const Eigen::MatrixXd &xbar, const Eigen::VectorXd &times);

/// Batched evaluation. `xbar` is treated as a constant (stop-gradient).
DeformOutput deform_forward(const DeformNetParams &params,
                            const Eigen::MatrixXd &xbar,
                            const Eigen::VectorXd &times,
                            DeformTape *tape = nullptr);

struct DeformBackwardResult {
    DeformNetParams grad;
    Eigen::MatrixXd input_grad; // w.r.t. the encoded input features
    Eigen::MatrixXd xbar_grad;  // always zero: xbar enters through sg()
};

/// Reverse pass for upstream gradients shaped like DeformOutput. Throws
/// InvalidStateError when the tape was already used or the parameters changed.
DeformBackwardResult deform_backward(const DeformNetParams &params, DeformTape &tape, const DeformOutput &upstream);

} // namespace refsplat
