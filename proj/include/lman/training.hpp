#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <type_traits>
#include <vector>

#include "json.hpp"
#include "lman/config.hpp"
#include "lman/dataset.hpp"
#include "lman/encoder.hpp"
#include "lman/inference.hpp"
#include "lman/losses.hpp"
#include "lman/memory.hpp"

namespace lman {

/// Which contrastive term fills the auxiliary slot of the objective.
enum class AuxiliaryLoss { mal, scl };

std::string to_string(AuxiliaryLoss loss);
AuxiliaryLoss parse_auxiliary_loss(const std::string& text);

struct TrainConfig {
    std::size_t window = 6;       // T, frames per short-term sample
    std::size_t scale = 10;       // S, long-term window = S * T frames
    std::size_t stride = 1;       // training window stride
    std::size_t eval_stride = 0;  // test window stride, 0 means T
    std::size_t memory_slots = 65536;  // K
    EncoderConfig encoder;             // c = encoder.feature_dim
    double momentum = 0.99;            // v, long-term encoder tracking
    double learning_rate = 0.005;
    double weight_decay = 1e-4;
    double optimizer_momentum = 0.0;   // classical SGD momentum, 0 disables
    std::size_t batch_size = 64;
    std::size_t epochs = 50;
    std::uint64_t seed = 0;
    bool use_recall = true;
    bool use_mal = true;
    AuxiliaryLoss auxiliary = AuxiliaryLoss::mal;
    LossConfig loss;
    bool purity_required = true;
    bool center = false;
    bool standardize = true;      // fit per-coordinate input statistics on the training windows
    double scl_jitter = 0.01;     // m
    double scl_min_crop = 0.8;    // shortest temporal crop, fraction of T

    static TrainConfig reference_defaults();
    /// K=512, c=32, batch 16, width 16, lr 0.05, 30 epochs, mal_weight 0.01, centering on.
    static TrainConfig desk_profile();
    /// `profile = reference|desk` picks the base, then individual keys override.
    static TrainConfig from(const KeyValueConfig& cfg);

    std::size_t effective_eval_stride() const { return eval_stride == 0 ? window : eval_stride; }
    void validate() const;

    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
    bool operator==(const TrainConfig&) const = default;
};

/// Windowed data for one train/test split.
struct PreparedData {
    LabelMap labels;
    std::vector<ShortTermSample> train_short;
    std::vector<LongTermSample> train_long;  // aligned with train_short
    std::vector<ShortTermSample> test;
    std::size_t dropped_without_long = 0;    // train windows with no usable long window
};

/// Subjects listed in `test_subjects` are held out; `train_subjects` defaults
/// to everyone else. With neither given, the last 7/25 of the sorted subjects
/// (at least one) are held out.
SplitSpec resolve_split(const RecordingSet& data, const std::vector<std::string>& train_subjects,
                        const std::vector<std::string>& test_subjects);

PreparedData prepare_data(const RecordingSet& data, const SplitSpec& split, const TrainConfig& config);

/// The input normalization a fresh model trained on `data` uses: fitted
/// statistics when config.standardize, otherwise centering (if enabled) only.
InputNormalization fit_input_normalization(const PreparedData& data, const TrainConfig& config);

/// Jitter + random temporal crop padded back to the original length.
SkeletonSequence augment_view(const SkeletonSequence& x, double jitter, double min_crop, std::mt19937_64& rng);

template <typename Scalar>
struct TrainState {
    TrainConfig config;
    LabelMap labels;
    EncoderParams<Scalar> short_encoder;
    EncoderParams<Scalar> long_encoder;
    DecoderParams<Scalar> decoder;
    MemoryQueue<Scalar> memory;
    ParameterSet<Scalar> encoder_velocity;  // optimizer state
    ParameterSet<Scalar> decoder_velocity;
    InputNormalization input;  // frozen; applied to every encoder input
    std::mt19937_64 rng;
    std::size_t epoch = 0;
    std::size_t step = 0;

    /// Identity input statistics (centering still follows config.center).
    static TrainState initial(const TrainConfig& config, const LabelMap& labels);
    /// Same, with input statistics fitted on `data` per config.standardize.
    static TrainState initial(const TrainConfig& config, const PreparedData& data);
};

struct BatchItem {
    const ShortTermSample* short_sample = nullptr;
    const LongTermSample* long_sample = nullptr;
};

struct StepMetrics {
    double ce = 0;
    double aux = 0;
    double total = 0;
    std::size_t correct = 0;
    std::size_t count = 0;
};

/// Gradients of one step. The long-term encoder and memory entries exist to
/// make the stop-gradient observable; the backward pass never writes them.
template <typename Scalar>
struct StepGradients {
    ParameterSet<Scalar> short_encoder;
    ParameterSet<Scalar> decoder;
    ParameterSet<Scalar> long_encoder;
    std::vector<Scalar> memory_slots;

    static StepGradients zeros_for(const TrainState<Scalar>& state);
};

/// Forward (and, with `grads`, backward) for one batch against the current
/// queue. Does not modify parameters or memory; consumes RNG only for SCL views.
template <typename Scalar>
StepMetrics compute_step(TrainState<Scalar>& state, const std::vector<BatchItem>& batch,
                         std::type_identity_t<StepGradients<Scalar>>* grads = nullptr);

/// theta <- theta - lr * (g + wd * theta), with optional classical momentum.
template <typename Scalar>
void sgd_update(ParameterSet<Scalar>& params, const ParameterSet<Scalar>& grads, ParameterSet<Scalar>& velocity,
                double learning_rate, double weight_decay, double momentum);

/// One full update: gradient step on E_S and decoder, momentum update of E_L,
/// then FIFO enqueue of the batch's long-term features.
/// Throws NumericError on a non-finite loss.
template <typename Scalar>
StepMetrics train_step(TrainState<Scalar>& state, const std::vector<BatchItem>& batch,
                       std::type_identity_t<StepGradients<Scalar>>* grads_out = nullptr);

template <typename Scalar>
FrozenModel<Scalar> freeze(const TrainState<Scalar>& state);

/// Fraction of samples predicted correctly by the frozen model.
template <typename Scalar>
double accuracy(const FrozenModel<Scalar>& model, const std::vector<ShortTermSample>& samples);

struct EpochRecord {
    std::size_t epoch = 0;
    StepMetrics train;           // summed over the epoch's steps (ce/aux/total are means)
    double train_accuracy = 0;
    double test_accuracy = 0;
    std::size_t test_samples = 0;
};

/// Two metrics-log lines per epoch: split "train" and split "test".
std::vector<std::string> metrics_lines(const EpochRecord& record);

/// Runs `epochs` more epochs on `state`. `on_epoch` is called after each.
template <typename Scalar>
std::vector<EpochRecord> train_epochs(TrainState<Scalar>& state, const PreparedData& data, std::size_t epochs,
                                      const std::function<void(const EpochRecord&)>& on_epoch = {});

struct TrainResult {
    TrainState<float> state;
    std::vector<EpochRecord> history;
    std::vector<std::string> metrics_log;
};

/// Fresh initialization followed by config.epochs epochs.
TrainResult train(const TrainConfig& config, const PreparedData& data,
                  const std::function<void(const EpochRecord&)>& on_epoch = {});

// ---------------------------------------------------------------------------
// Checkpoints: one JSON header line, then little-endian float32 payloads.

inline constexpr int kCheckpointVersion = 1;

std::vector<std::uint8_t> serialize_checkpoint(const TrainState<float>& state);
TrainState<float> deserialize_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const TrainState<float>& state, const std::filesystem::path& path);
TrainState<float> load_checkpoint(const std::filesystem::path& path);

}  // namespace lman
