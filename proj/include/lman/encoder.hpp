#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "lman/dataset.hpp"
#include "lman/tensor.hpp"

namespace lman {

/// Shape of the spatio-temporal graph encoder and its classifier head.
struct EncoderConfig {
    std::size_t blocks = 2;         // [graph conv -> relu -> temporal conv -> relu] repeats
    std::size_t width = 32;         // hidden channels
    std::size_t feature_dim = 128;  // c
    std::size_t kernel = 3;         // temporal kernel width, odd
    std::size_t num_classes = 11;   // N_c

    void validate() const;
    bool operator==(const EncoderConfig&) const = default;
};

/// Head/thigh graph: both thighs connect to the head, plus self-loops.
struct SkeletonGraph {
    using Matrix3 = std::array<std::array<double, kJoints>, kJoints>;
    Matrix3 adjacency{};   // binary, with self-loops
    Matrix3 normalized{};  // D^-1/2 (A) D^-1/2

    static SkeletonGraph head_and_thighs();
    /// Builds from a binary adjacency without self-loops; self-loops are added.
    static SkeletonGraph from_edges(const Matrix3& edges);
};

/// Parameters of one encoder. Tensor order:
///   block{b}.graph.weight [w, in], block{b}.graph.bias [w],
///   block{b}.temporal.weight [w, w, k], block{b}.temporal.bias [w],
///   projection.weight [c, w], projection.bias [c].
template <typename Scalar>
struct EncoderParams {
    EncoderConfig config;
    SkeletonGraph graph = SkeletonGraph::head_and_thighs();
    ParameterSet<Scalar> tensors;

    static EncoderParams zeros(const EncoderConfig& config);

    Tensor<Scalar>& graph_weight(std::size_t b) { return tensors[4 * b]; }
    Tensor<Scalar>& graph_bias(std::size_t b) { return tensors[4 * b + 1]; }
    Tensor<Scalar>& temporal_weight(std::size_t b) { return tensors[4 * b + 2]; }
    Tensor<Scalar>& temporal_bias(std::size_t b) { return tensors[4 * b + 3]; }
    Tensor<Scalar>& projection_weight() { return tensors[4 * config.blocks]; }
    Tensor<Scalar>& projection_bias() { return tensors[4 * config.blocks + 1]; }
    const Tensor<Scalar>& graph_weight(std::size_t b) const { return tensors[4 * b]; }
    const Tensor<Scalar>& graph_bias(std::size_t b) const { return tensors[4 * b + 1]; }
    const Tensor<Scalar>& temporal_weight(std::size_t b) const { return tensors[4 * b + 2]; }
    const Tensor<Scalar>& temporal_bias(std::size_t b) const { return tensors[4 * b + 3]; }
    const Tensor<Scalar>& projection_weight() const { return tensors[4 * config.blocks]; }
    const Tensor<Scalar>& projection_bias() const { return tensors[4 * config.blocks + 1]; }
};

/// Affine map c -> N_c followed by softmax.
template <typename Scalar>
struct DecoderParams {
    ParameterSet<Scalar> tensors;  // decoder.weight [N_c, c], decoder.bias [N_c]

    static DecoderParams zeros(std::size_t num_classes, std::size_t feature_dim);

    std::size_t num_classes() const { return tensors[0].shape[0]; }
    std::size_t feature_dim() const { return tensors[0].shape[1]; }
    Tensor<Scalar>& weight() { return tensors[0]; }
    Tensor<Scalar>& bias() { return tensors[1]; }
    const Tensor<Scalar>& weight() const { return tensors[0]; }
    const Tensor<Scalar>& bias() const { return tensors[1]; }
};

/// Intermediate activations kept for the backward pass.
template <typename Scalar>
struct EncoderTrace {
    std::size_t frames = 0;
    std::vector<std::vector<Scalar>> block_input;   // [in][T][V]
    std::vector<std::vector<Scalar>> aggregated;    // input mixed over joints
    std::vector<std::vector<Scalar>> graph_pre;     // before relu
    std::vector<std::vector<Scalar>> temporal_pre;  // before relu
    std::vector<Scalar> pooled;
    std::vector<Scalar> embedding;  // before normalization
    Scalar norm = 0;
    std::vector<Scalar> feature;
};

/// L2-normalized feature of a skeleton sequence of any length >= kernel.
/// Throws RejectionError on non-finite input, StructuralError when too short.
template <typename Scalar>
std::vector<Scalar> encode(const EncoderParams<Scalar>& params, const SkeletonSequence& x,
                           EncoderTrace<Scalar>* trace = nullptr);

/// Accumulates d(loss)/d(params) into `grads` given d(loss)/d(feature).
template <typename Scalar>
void encode_backward(const EncoderParams<Scalar>& params, const EncoderTrace<Scalar>& trace,
                     std::span<const Scalar> feature_grad, ParameterSet<Scalar>& grads);

template <typename Scalar>
struct EncoderPair {
    EncoderParams<Scalar> short_term;
    EncoderParams<Scalar> long_term;
    DecoderParams<Scalar> decoder;
};

/// Fan-in-scaled uniform weights for the short-term encoder; the long-term
/// encoder starts as an exact copy. Decoder weights are fan-in uniform, its bias zero.
template <typename Scalar>
EncoderPair<Scalar> init_encoders(const EncoderConfig& config, std::uint64_t seed);

/// target <- v * target + (1 - v) * online, element-wise. v in [0, 1).
template <typename Scalar>
void momentum_update(ParameterSet<Scalar>& target, const ParameterSet<Scalar>& online, double v);

template <typename Scalar>
void momentum_update(EncoderParams<Scalar>& target, const EncoderParams<Scalar>& online, double v) {
    momentum_update(target.tensors, online.tensors, v);
}

template <typename Scalar>
std::vector<Scalar> decoder_logits(const DecoderParams<Scalar>& decoder, std::span<const Scalar> feature);

/// Softmax over the decoder logits.
template <typename Scalar>
std::vector<Scalar> classify(const DecoderParams<Scalar>& decoder, std::span<const Scalar> feature);

/// Accumulates decoder gradients for d(loss)/d(logits) and returns d(loss)/d(feature).
template <typename Scalar>
std::vector<Scalar> decoder_backward(const DecoderParams<Scalar>& decoder, std::span<const Scalar> feature,
                                     std::span<const Scalar> logits_grad, ParameterSet<Scalar>& grads);

template <typename Scalar>
std::vector<Scalar> softmax(std::span<const Scalar> logits);

/// Index of the largest entry; ties go to the lowest index.
template <typename Scalar>
std::size_t argmax(std::span<const Scalar> values);

}  // namespace lman
