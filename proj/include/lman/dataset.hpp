#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lman/config.hpp"

namespace lman {

inline constexpr std::size_t kChannels = 3;  // x, y, z
inline constexpr std::size_t kJoints = 3;    // head, left thigh, right thigh

enum Joint : std::size_t { kHead = 0, kLeftThigh = 1, kRightThigh = 2 };

/// Joint positions of one frame, indexed [joint][axis], in meters.
using JointPositions = std::array<std::array<double, kChannels>, kJoints>;

struct Frame {
    std::string recording_id;
    std::string subject_id;
    std::int64_t frame_index = 0;
    JointPositions joints{};
    int label = 0;

    bool operator==(const Frame&) const = default;
};

struct Recording {
    std::string recording_id;
    std::string subject_id;
    std::vector<Frame> frames;  // sorted by frame_index, gapless

    bool operator==(const Recording&) const = default;
};

/// A [C x T x V] block of joint coordinates.
class SkeletonSequence {
public:
    SkeletonSequence() = default;
    explicit SkeletonSequence(std::size_t frames) : frames_(frames), values_(kChannels * frames * kJoints, 0.0) {}

    static SkeletonSequence from_frames(std::span<const Frame> frames);

    std::size_t frames() const noexcept { return frames_; }
    double& at(std::size_t channel, std::size_t t, std::size_t joint) {
        return values_[(channel * frames_ + t) * kJoints + joint];
    }
    double at(std::size_t channel, std::size_t t, std::size_t joint) const {
        return values_[(channel * frames_ + t) * kJoints + joint];
    }
    const std::vector<double>& values() const noexcept { return values_; }
    std::vector<double>& values() noexcept { return values_; }

    bool all_finite() const;

    bool operator==(const SkeletonSequence&) const = default;

private:
    std::size_t frames_ = 0;
    std::vector<double> values_;
};

/// Subtracts the per-channel mean over all frames and joints.
SkeletonSequence mean_centered(const SkeletonSequence& seq);

struct ShortTermSample {
    SkeletonSequence data;
    int label = 0;
    std::string recording_id;
    std::string subject_id;
    std::size_t start_frame = 0;
};

struct LongTermSample {
    SkeletonSequence data;
    int label = 0;
    std::size_t center_sample_index = 0;
    std::size_t start_frame = 0;
};

/// Fixed per-coordinate affine applied to every window before it reaches an
/// encoder: optional per-sample mean-centering, then (x - mean) / scale for
/// each (channel, joint) pair. Statistics are fitted once on training windows
/// and frozen, like an input batch-norm evaluated with running statistics.
struct InputNormalization {
    static constexpr std::size_t kCoordinates = kChannels * kJoints;

    bool center = false;
    std::array<double, kCoordinates> mean{};
    std::array<double, kCoordinates> scale = [] {
        std::array<double, kCoordinates> ones{};
        ones.fill(1.0);
        return ones;
    }();

    static InputNormalization identity(bool center = false);
    /// Per-coordinate mean and population std over all frames of `samples`
    /// (after centering, when enabled). Degenerate coordinates keep scale 1.
    static InputNormalization fit(const std::vector<ShortTermSample>& samples, bool center);

    SkeletonSequence apply(const SkeletonSequence& x) const;
    bool operator==(const InputNormalization&) const = default;
};

class LabelMap {
public:
    LabelMap() = default;
    explicit LabelMap(std::vector<std::string> names);

    /// class_0 ... class_{n-1}
    static LabelMap numbered(std::size_t n);
    /// Reads `label_id,gesture_name` lines.
    static LabelMap load(const std::filesystem::path& path);
    void save(const std::filesystem::path& path) const;

    std::size_t size() const noexcept { return names_.size(); }
    const std::string& name(std::size_t label) const { return names_.at(label); }
    const std::vector<std::string>& names() const noexcept { return names_; }

    bool operator==(const LabelMap&) const = default;

private:
    std::vector<std::string> names_;
};

struct RecordingSet {
    std::vector<Recording> recordings;
    LabelMap labels;

    std::size_t frame_count() const;
    std::set<std::string> subjects() const;
};

/// Sidecar label-map path for a frames file: `<frames>.labels`.
std::filesystem::path label_map_path(const std::filesystem::path& frames_path);

/// Parses a frames file (and its label map, when present).
RecordingSet load_recordings(const std::filesystem::path& path);
void write_recordings(const std::filesystem::path& path, const RecordingSet& set);

/// Label-pure windows of `length` frames, start indices advancing by `stride`.
std::vector<ShortTermSample> split_windows(const Recording& recording, std::size_t length, std::size_t stride);

/// The `scale * T` contiguous frames around sample `index`, shifted to fit
/// inside the recording. Absent when the recording is too short or, with
/// `purity_required`, when any frame carries a different label.
std::optional<LongTermSample> build_long_term(std::span<const ShortTermSample> samples, const Recording& recording,
                                              std::size_t index, std::size_t scale, bool purity_required);

struct SplitSpec {
    std::set<std::string> train_subjects;
    std::set<std::string> test_subjects;
};

/// Throws ConfigError when the subject sets overlap or a sample's subject is in neither.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_subjects(std::span<const ShortTermSample> samples,
                                                                           const SplitSpec& spec);

// ---------------------------------------------------------------------------
// Synthetic gestures

struct SynthesisConfig {
    std::vector<std::string> classes{"standing", "walking", "jogging", "jumping", "squatting"};
    int subjects = 5;
    int frames_per_class = 600;
    double frame_hz = 30.0;
    double noise = 0.003;              // sigma of per-coordinate Gaussian jitter, m
    double subject_variation = 0.08;   // relative spread of per-subject scale/tempo/amplitude
    double room_spread = 0.05;         // half-width of the per-subject standing spot, m
    double walk_freq = 1.0, walk_amp = 0.12;
    double jog_freq = 1.6, jog_amp = 0.20;
    double jump_freq = 1.5, jump_amp = 0.25;
    double squat_freq = 0.4, squat_amp = 0.35;

    /// Reads the keys above from a flat config; unknown class names throw ConfigError.
    static SynthesisConfig from(const KeyValueConfig& cfg);
    void validate() const;
};

const std::vector<std::string>& builtin_gesture_names();

RecordingSet synthesize_recordings(const SynthesisConfig& config, std::uint64_t seed);
void synthesize_gestures(const SynthesisConfig& config, std::uint64_t seed, const std::filesystem::path& path);

}  // namespace lman
