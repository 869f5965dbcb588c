#pragma once

#include <atomic>
#include <functional>
#include <cstddef>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "lman/dataset.hpp"
#include "lman/encoder.hpp"
#include "lman/memory.hpp"

namespace lman {

/// Everything needed to classify a short window. Immutable once built.
template <typename Scalar>
struct FrozenModel {
    EncoderParams<Scalar> encoder;
    DecoderParams<Scalar> decoder;
    MemoryQueue<Scalar> memory;
    std::size_t window = 6;  // T
    bool use_recall = true;
    InputNormalization input;
    LabelMap labels;
};

template <typename Scalar>
struct Prediction {
    std::size_t label = 0;
    std::vector<Scalar> probs;
};

/// argmax classify(E_S(x) + recall(M, E_S(x))); recall is skipped when the
/// model was trained without it, and is the zero vector for an empty queue.
template <typename Scalar>
Prediction<Scalar> predict(const FrozenModel<Scalar>& model, const SkeletonSequence& x);

/// Milliseconds from first frame of a window to its prediction.
double latency_estimate(std::size_t frames, double frame_period_ms, double inference_ms);

struct StreamConfig {
    double prediction_stride_ms = 180.0;
    double frame_hz = 30.0;      // used to timestamp frames that carry no "t"
    std::ostream* log = nullptr;  // per-prediction wall time, when set
};

/// One client's sliding window over NDJSON frames.
///
/// Input lines:  {"t": <ms>, "joints": [[x,y,z],[x,y,z],[x,y,z]]}
/// Output lines: {"t": <ms>, "class": <id>, "name": <gesture>, "probs": [...]}
///               {"error": <message>} for a rejected line
///
/// The first prediction is made as soon as the window holds T frames, later
/// ones whenever at least prediction_stride_ms has elapsed since the last.
class StreamSession {
public:
    StreamSession(const FrozenModel<float>& model, StreamConfig config);

    /// Zero or one response line for one input line.
    std::optional<std::string> handle_line(std::string_view line);

    std::size_t frames_received() const noexcept { return received_; }
    std::size_t predictions_emitted() const noexcept { return emitted_; }
    const std::optional<Prediction<float>>& last_prediction() const noexcept { return last_; }

private:
    const FrozenModel<float>& model_;
    StreamConfig config_;
    std::vector<JointPositions> buffer_;  // ring of the last T frames
    std::size_t next_ = 0;
    std::size_t received_ = 0;
    std::size_t emitted_ = 0;
    std::optional<double> last_prediction_t_;
    std::optional<Prediction<float>> last_;
};

/// Serves one session over a byte stream until end of input.
void stream_serve(const FrozenModel<float>& model, const StreamConfig& config, std::istream& in, std::ostream& out);

/// Listens on 127.0.0.1:`port` (0 picks a free port) and serves each
/// connection as an independent session on its own thread. `on_listen`
/// receives the bound port. Returns when `stop` becomes true.
void serve_tcp(const FrozenModel<float>& model, const StreamConfig& config, int port, const std::atomic<bool>& stop,
               const std::function<void(int)>& on_listen = {});

}  // namespace lman
