#include "lman/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <sstream>

#include "lman/error.hpp"

namespace lman {

namespace {

template <typename T>
bool parse_number(const std::string& text, T& out) {
    const char* first = text.data();
    const char* last = first + text.size();
    auto [ptr, ec] = std::from_chars(first, last, out);
    return ec == std::errc() && ptr == last;
}

void append_number(std::string& out, double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    out.append(buf, ptr);
}

bool pure_range(std::span<const Frame> frames, std::size_t begin, std::size_t end, int label) {
    return std::all_of(frames.begin() + static_cast<std::ptrdiff_t>(begin),
                       frames.begin() + static_cast<std::ptrdiff_t>(end),
                       [label](const Frame& f) { return f.label == label; });
}

}  // namespace

// ---------------------------------------------------------------------------
// SkeletonSequence

SkeletonSequence SkeletonSequence::from_frames(std::span<const Frame> frames) {
    SkeletonSequence seq(frames.size());
    for (std::size_t t = 0; t < frames.size(); ++t) {
        for (std::size_t v = 0; v < kJoints; ++v) {
            for (std::size_t c = 0; c < kChannels; ++c) seq.at(c, t, v) = frames[t].joints[v][c];
        }
    }
    return seq;
}

bool SkeletonSequence::all_finite() const {
    return std::all_of(values_.begin(), values_.end(), [](double x) { return std::isfinite(x); });
}

SkeletonSequence mean_centered(const SkeletonSequence& seq) {
    SkeletonSequence out = seq;
    const double count = static_cast<double>(seq.frames() * kJoints);
    if (count == 0) return out;
    for (std::size_t c = 0; c < kChannels; ++c) {
        double mean = 0;
        for (std::size_t t = 0; t < seq.frames(); ++t) {
            for (std::size_t v = 0; v < kJoints; ++v) mean += seq.at(c, t, v);
        }
        mean /= count;
        for (std::size_t t = 0; t < seq.frames(); ++t) {
            for (std::size_t v = 0; v < kJoints; ++v) out.at(c, t, v) -= mean;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// InputNormalization

InputNormalization InputNormalization::identity(bool center) {
    InputNormalization n;
    n.center = center;
    return n;
}

InputNormalization InputNormalization::fit(const std::vector<ShortTermSample>& samples, bool center) {
    InputNormalization n = identity(center);
    std::array<double, kCoordinates> sum{}, sq{};
    double count = 0;
    for (const auto& s : samples) {
        const SkeletonSequence x = center ? mean_centered(s.data) : s.data;
        for (std::size_t c = 0; c < kChannels; ++c) {
            for (std::size_t t = 0; t < x.frames(); ++t) {
                for (std::size_t v = 0; v < kJoints; ++v) {
                    const double value = x.at(c, t, v);
                    sum[c * kJoints + v] += value;
                    sq[c * kJoints + v] += value * value;
                }
            }
        }
        count += static_cast<double>(x.frames());
    }
    if (count == 0) throw ConfigError("input normalization: no training frames to fit on");
    for (std::size_t k = 0; k < kCoordinates; ++k) {
        n.mean[k] = sum[k] / count;
        const double var = std::max(0.0, sq[k] / count - n.mean[k] * n.mean[k]);
        n.scale[k] = std::sqrt(var) > 1e-9 ? std::sqrt(var) : 1.0;
    }
    return n;
}

SkeletonSequence InputNormalization::apply(const SkeletonSequence& x) const {
    SkeletonSequence out = center ? mean_centered(x) : x;
    for (std::size_t c = 0; c < kChannels; ++c) {
        for (std::size_t t = 0; t < out.frames(); ++t) {
            for (std::size_t v = 0; v < kJoints; ++v) {
                auto& value = out.at(c, t, v);
                value = (value - mean[c * kJoints + v]) / scale[c * kJoints + v];
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// LabelMap

LabelMap::LabelMap(std::vector<std::string> names) : names_(std::move(names)) {
    if (names_.empty()) throw ConfigError("label map must contain at least one class");
}

LabelMap LabelMap::numbered(std::size_t n) {
    std::vector<std::string> names;
    for (std::size_t i = 0; i < n; ++i) names.push_back("class_" + std::to_string(i));
    LabelMap map;
    map.names_ = std::move(names);
    return map;
}

LabelMap LabelMap::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open label map: " + path.string());
    std::map<int, std::string> entries;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::string t = trim(line);
        if (t.empty() || t.front() == '#') continue;
        const auto comma = t.find(',');
        int id = 0;
        if (comma == std::string::npos || !parse_number(trim(t.substr(0, comma)), id) || id < 0) {
            throw ParseError(line_no, "expected label_id,gesture_name in " + path.string());
        }
        if (!entries.emplace(id, trim(t.substr(comma + 1))).second) {
            throw ParseError(line_no, "duplicate label id " + std::to_string(id));
        }
    }
    std::vector<std::string> names;
    for (const auto& [id, name] : entries) {
        if (id != static_cast<int>(names.size())) {
            throw IntegrityError("label map " + path.string() + ": ids must be 0..N-1 without gaps");
        }
        names.push_back(name);
    }
    LabelMap map;
    map.names_ = std::move(names);
    return map;
}

void LabelMap::save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot write label map: " + path.string());
    for (std::size_t i = 0; i < names_.size(); ++i) out << i << ',' << names_[i] << '\n';
}

// ---------------------------------------------------------------------------
// Frames file

std::size_t RecordingSet::frame_count() const {
    std::size_t n = 0;
    for (const auto& r : recordings) n += r.frames.size();
    return n;
}

std::set<std::string> RecordingSet::subjects() const {
    std::set<std::string> out;
    for (const auto& r : recordings) out.insert(r.subject_id);
    return out;
}

std::filesystem::path label_map_path(const std::filesystem::path& frames_path) {
    auto p = frames_path;
    p += ".labels";
    return p;
}

RecordingSet load_recordings(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open frames file: " + path.string());

    std::optional<LabelMap> labels;
    if (std::filesystem::exists(label_map_path(path))) labels = LabelMap::load(label_map_path(path));

    RecordingSet set;
    std::map<std::string, std::size_t> by_id;
    int max_label = -1;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (trim(line).empty() || line.front() == '#') continue;
        const auto fields = split(line, ',');
        if (fields.size() != 13) {
            throw ParseError(line_no, "expected 13 comma-separated fields, got " + std::to_string(fields.size()));
        }
        Frame f;
        f.recording_id = trim(fields[0]);
        f.subject_id = trim(fields[1]);
        if (f.recording_id.empty() || f.subject_id.empty()) throw ParseError(line_no, "empty recording or subject id");
        if (!parse_number(trim(fields[2]), f.frame_index) || f.frame_index < 0) {
            throw ParseError(line_no, "frame_index must be a non-negative integer");
        }
        if (!parse_number(trim(fields[3]), f.label) || f.label < 0) {
            throw ParseError(line_no, "label_id must be a non-negative integer");
        }
        if (labels && static_cast<std::size_t>(f.label) >= labels->size()) {
            throw RejectionError(line_no, "label_id " + std::to_string(f.label) + " not in label map");
        }
        for (std::size_t k = 0; k < kJoints * kChannels; ++k) {
            const std::string field = trim(fields[4 + k]);
            double value = 0;
            if (!parse_number(field, value)) throw ParseError(line_no, "bad coordinate '" + field + "'");
            if (!std::isfinite(value)) throw RejectionError(line_no, "non-finite coordinate '" + field + "'");
            f.joints[k / kChannels][k % kChannels] = value;
        }
        max_label = std::max(max_label, f.label);

        auto [it, inserted] = by_id.emplace(f.recording_id, set.recordings.size());
        if (inserted) set.recordings.push_back(Recording{f.recording_id, f.subject_id, {}});
        Recording& rec = set.recordings[it->second];
        if (rec.subject_id != f.subject_id) {
            throw IntegrityError("recording " + rec.recording_id + " has frames from several subjects (line " +
                                 std::to_string(line_no) + ")");
        }
        rec.frames.push_back(std::move(f));
    }

    for (auto& rec : set.recordings) {
        std::stable_sort(rec.frames.begin(), rec.frames.end(),
                         [](const Frame& a, const Frame& b) { return a.frame_index < b.frame_index; });
        for (std::size_t k = 1; k < rec.frames.size(); ++k) {
            if (rec.frames[k].frame_index != rec.frames[k - 1].frame_index + 1) {
                throw IntegrityError("recording " + rec.recording_id + ": frame_index " +
                                     std::to_string(rec.frames[k - 1].frame_index) + " followed by " +
                                     std::to_string(rec.frames[k].frame_index));
            }
        }
    }
    set.labels = labels ? *labels : LabelMap::numbered(static_cast<std::size_t>(max_label + 1));
    return set;
}

void write_recordings(const std::filesystem::path& path, const RecordingSet& set) {
    std::string text = "# recording_id,subject_id,frame_index,label_id,hx,hy,hz,lx,ly,lz,rx,ry,rz\n";
    for (const auto& rec : set.recordings) {
        for (const auto& f : rec.frames) {
            text += rec.recording_id;
            text += ',';
            text += rec.subject_id;
            text += ',';
            text += std::to_string(f.frame_index);
            text += ',';
            text += std::to_string(f.label);
            for (const auto& joint : f.joints) {
                for (double v : joint) {
                    text += ',';
                    append_number(text, v);
                }
            }
            text += '\n';
        }
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot write frames file: " + path.string());
    out << text;
    if (set.labels.size() > 0) set.labels.save(label_map_path(path));
}

// ---------------------------------------------------------------------------
// Windowing

std::vector<ShortTermSample> split_windows(const Recording& recording, std::size_t length, std::size_t stride) {
    if (length == 0 || stride == 0) throw ConfigError("split_windows: length and stride must be positive");
    std::vector<ShortTermSample> out;
    const std::span<const Frame> frames(recording.frames);
    for (std::size_t start = 0; start + length <= frames.size(); start += stride) {
        const int label = frames[start].label;
        if (!pure_range(frames, start, start + length, label)) continue;
        out.push_back(ShortTermSample{SkeletonSequence::from_frames(frames.subspan(start, length)), label,
                                      recording.recording_id, recording.subject_id, start});
    }
    return out;
}

std::optional<LongTermSample> build_long_term(std::span<const ShortTermSample> samples, const Recording& recording,
                                              std::size_t index, std::size_t scale, bool purity_required) {
    if (index >= samples.size()) throw StructuralError("build_long_term: sample index out of range");
    if (scale == 0) throw ConfigError("build_long_term: scale must be positive");
    const ShortTermSample& sample = samples[index];
    if (sample.recording_id != recording.recording_id) {
        throw StructuralError("build_long_term: sample does not belong to recording " + recording.recording_id);
    }
    const std::size_t length = sample.data.frames();
    const std::size_t total = scale * length;
    const std::size_t n = recording.frames.size();
    if (n < total) return std::nullopt;

    const auto half = static_cast<std::ptrdiff_t>(scale / 2);
    std::ptrdiff_t begin = static_cast<std::ptrdiff_t>(sample.start_frame) - half * static_cast<std::ptrdiff_t>(length);
    begin = std::clamp<std::ptrdiff_t>(begin, 0, static_cast<std::ptrdiff_t>(n - total));
    const auto first = static_cast<std::size_t>(begin);

    const std::span<const Frame> frames(recording.frames);
    if (purity_required && !pure_range(frames, first, first + total, sample.label)) return std::nullopt;
    return LongTermSample{SkeletonSequence::from_frames(frames.subspan(first, total)), sample.label, index, first};
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_subjects(std::span<const ShortTermSample> samples,
                                                                           const SplitSpec& spec) {
    for (const auto& s : spec.train_subjects) {
        if (spec.test_subjects.contains(s)) throw ConfigError("subject '" + s + "' is in both train and test sets");
    }
    std::vector<std::size_t> train, test;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto& subject = samples[i].subject_id;
        if (spec.train_subjects.contains(subject)) {
            train.push_back(i);
        } else if (spec.test_subjects.contains(subject)) {
            test.push_back(i);
        } else {
            throw ConfigError("subject '" + subject + "' is in neither train nor test set");
        }
    }
    return {std::move(train), std::move(test)};
}

// ---------------------------------------------------------------------------
// Synthetic gestures

const std::vector<std::string>& builtin_gesture_names() {
    static const std::vector<std::string> names{"standing", "walking", "jogging", "jumping", "squatting"};
    return names;
}

SynthesisConfig SynthesisConfig::from(const KeyValueConfig& cfg) {
    SynthesisConfig s;
    if (cfg.contains("classes")) s.classes = cfg.get_list("classes");
    s.subjects = static_cast<int>(cfg.get_int("subjects", s.subjects));
    s.frames_per_class = static_cast<int>(cfg.get_int("frames_per_class", s.frames_per_class));
    s.frame_hz = cfg.get_double("frame_hz", s.frame_hz);
    s.noise = cfg.get_double("noise", s.noise);
    s.subject_variation = cfg.get_double("subject_variation", s.subject_variation);
    s.room_spread = cfg.get_double("room_spread", s.room_spread);
    s.walk_freq = cfg.get_double("walk_freq", s.walk_freq);
    s.walk_amp = cfg.get_double("walk_amp", s.walk_amp);
    s.jog_freq = cfg.get_double("jog_freq", s.jog_freq);
    s.jog_amp = cfg.get_double("jog_amp", s.jog_amp);
    s.jump_freq = cfg.get_double("jump_freq", s.jump_freq);
    s.jump_amp = cfg.get_double("jump_amp", s.jump_amp);
    s.squat_freq = cfg.get_double("squat_freq", s.squat_freq);
    s.squat_amp = cfg.get_double("squat_amp", s.squat_amp);
    s.validate();
    return s;
}

void SynthesisConfig::validate() const {
    const auto& known = builtin_gesture_names();
    for (const auto& c : classes) {
        if (std::find(known.begin(), known.end(), c) == known.end()) {
            throw ConfigError("unknown gesture class '" + c + "'");
        }
    }
    if (classes.size() < 2) throw ConfigError("synthesis needs at least two classes");
    if (std::set<std::string>(classes.begin(), classes.end()).size() != classes.size()) {
        throw ConfigError("synthesis classes must be distinct");
    }
    if (subjects < 1) throw ConfigError("synthesis needs at least one subject");
    if (frames_per_class < 1) throw ConfigError("frames_per_class must be positive");
    if (!(frame_hz > 0)) throw ConfigError("frame_hz must be positive");
    if (noise < 0) throw ConfigError("noise must be non-negative");
    if (subject_variation < 0 || subject_variation >= 1) throw ConfigError("subject_variation must lie in [0, 1)");
    if (room_spread < 0) throw ConfigError("room_spread must be non-negative");
    for (double f : {walk_freq, jog_freq, jump_freq, squat_freq}) {
        if (!(f > 0)) throw ConfigError("gesture frequencies must be positive");
    }
    for (double a : {walk_amp, jog_amp, jump_amp, squat_amp}) {
        if (!(a >= 0)) throw ConfigError("gesture amplitudes must be non-negative");
    }
}

namespace {

struct SubjectTraits {
    double scale;      // body size
    double tempo;      // frequency multiplier
    double vigor;      // amplitude multiplier
    double x0, z0;     // standing position in the room
};

JointPositions gesture_pose(const std::string& gesture, const SynthesisConfig& cfg, const SubjectTraits& who,
                            double seconds, double phase) {
    constexpr double kTwoPi = 2.0 * std::numbers::pi;
    const double head_y = 1.65 * who.scale;
    const double thigh_y = 0.80 * who.scale;
    const double hip = 0.10 * who.scale;
    JointPositions p{};
    p[kHead] = {who.x0, head_y, who.z0};
    p[kLeftThigh] = {who.x0 - hip, thigh_y, who.z0 + 0.08};
    p[kRightThigh] = {who.x0 + hip, thigh_y, who.z0 + 0.08};

    auto stepping = [&](double freq, double amp, double bob) {
        const double theta = kTwoPi * freq * who.tempo * seconds + phase;
        const double a = amp * who.vigor;
        const double s = std::sin(theta);
        p[kLeftThigh][1] += a * s;
        p[kLeftThigh][2] += 0.5 * a * s;
        p[kRightThigh][1] -= a * s;
        p[kRightThigh][2] -= 0.5 * a * s;
        p[kHead][1] += bob * a * std::cos(2.0 * theta);
    };

    // Every moving profile keeps moving (or stays displaced) through its whole
    // cycle, so no window of it looks like standing still.
    if (gesture == "standing") {
        // stationary: only sensor noise moves the joints
    } else if (gesture == "walking") {
        stepping(cfg.walk_freq, cfg.walk_amp, 0.1);
    } else if (gesture == "jogging") {
        stepping(cfg.jog_freq, cfg.jog_amp, 0.4);
    } else if (gesture == "jumping") {
        // in-phase bounce of all joints
        const double theta = kTwoPi * cfg.jump_freq * who.tempo * seconds + phase;
        const double lift = cfg.jump_amp * who.vigor * 0.5 * (1.0 - std::cos(theta));
        for (auto& joint : p) joint[1] += lift;
    } else if (gesture == "squatting") {
        // oscillates between a half and a deep squat; the head drops more than the thighs
        const double theta = kTwoPi * cfg.squat_freq * who.tempo * seconds + phase;
        const double dip = cfg.squat_amp * who.vigor * (0.6 - 0.4 * std::cos(theta));
        p[kHead][1] -= dip;
        p[kHead][2] += 0.2 * dip;
        p[kLeftThigh][1] -= 0.4 * dip;
        p[kRightThigh][1] -= 0.4 * dip;
        p[kLeftThigh][2] += 0.5 * dip;
        p[kRightThigh][2] += 0.5 * dip;
    } else {
        throw ConfigError("unknown gesture class '" + gesture + "'");
    }
    return p;
}

}  // namespace

RecordingSet synthesize_recordings(const SynthesisConfig& config, std::uint64_t seed) {
    config.validate();
    std::mt19937_64 rng(seed);
    RecordingSet set;
    set.labels = LabelMap(config.classes);
    const double var = config.subject_variation;

    for (int s = 0; s < config.subjects; ++s) {
        char sid[16];
        std::snprintf(sid, sizeof(sid), "s%02d", s + 1);
        std::uniform_real_distribution<double> spread(1.0 - var, 1.0 + var);
        std::uniform_real_distribution<double> room(-config.room_spread, config.room_spread);
        SubjectTraits who{};
        who.scale = spread(rng);
        who.tempo = spread(rng);
        who.vigor = spread(rng);
        who.x0 = room(rng);
        who.z0 = room(rng);

        Recording rec{std::string(sid) + "_r0", sid, {}};
        std::int64_t frame_index = 0;
        for (std::size_t label = 0; label < config.classes.size(); ++label) {
            const double phase = std::uniform_real_distribution<double>(0.0, 2.0 * std::numbers::pi)(rng);
            for (int k = 0; k < config.frames_per_class; ++k) {
                const double seconds = k / config.frame_hz;
                Frame f;
                f.recording_id = rec.recording_id;
                f.subject_id = rec.subject_id;
                f.frame_index = frame_index++;
                f.label = static_cast<int>(label);
                f.joints = gesture_pose(config.classes[label], config, who, seconds, phase);
                if (config.noise > 0) {
                    std::normal_distribution<double> jitter(0.0, config.noise);
                    for (auto& joint : f.joints) {
                        for (double& x : joint) x += jitter(rng);
                    }
                }
                rec.frames.push_back(std::move(f));
            }
        }
        set.recordings.push_back(std::move(rec));
    }
    return set;
}

void synthesize_gestures(const SynthesisConfig& config, std::uint64_t seed, const std::filesystem::path& path) {
    write_recordings(path, synthesize_recordings(config, seed));
}

}  // namespace lman
