#include <cmath>
#include <numeric>
#include <random>
#include <string>

#include "doctest.h"
#include "lman/dataset.hpp"
#include "lman/error.hpp"
#include "support.hpp"

using namespace lman;
using namespace lman::test;

namespace {

std::string frame_line(const std::string& rec, const std::string& subject, int index, int label,
                       const std::string& first_coord = "0.1") {
    return rec + "," + subject + "," + std::to_string(index) + "," + std::to_string(label) + "," + first_coord +
           ",1.6,0.0,-0.1,0.8,0.08,0.1,0.8,0.08\n";
}

// One recording whose frame t carries labels[t]; joints encode t so windows are traceable.
Recording labelled_recording(const std::vector<int>& labels, const std::string& id = "r0") {
    Recording rec{id, "s1", {}};
    for (std::size_t t = 0; t < labels.size(); ++t) {
        Frame f;
        f.recording_id = id;
        f.subject_id = "s1";
        f.frame_index = static_cast<std::int64_t>(t);
        f.label = labels[t];
        for (std::size_t v = 0; v < kJoints; ++v) {
            for (std::size_t c = 0; c < kChannels; ++c) f.joints[v][c] = static_cast<double>(t) + 0.1 * v + 0.01 * c;
        }
        rec.frames.push_back(f);
    }
    return rec;
}

std::vector<std::size_t> starts_of(const std::vector<ShortTermSample>& samples) {
    std::vector<std::size_t> out;
    for (const auto& s : samples) out.push_back(s.start_frame);
    return out;
}

std::size_t first_frame(const SkeletonSequence& x) { return static_cast<std::size_t>(std::floor(x.at(0, 0, 0))); }

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
    const double n = static_cast<double>(a.size());
    const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
    const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
    double sab = 0, saa = 0, sbb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    return sab / std::sqrt(saa * sbb);
}

}  // namespace

TEST_CASE("load_recordings: empty file, comments, grouping and sorting") {
    TempDir dir;
    write_text(dir / "empty.csv", "");
    CHECK(load_recordings(dir / "empty.csv").recordings.empty());

    std::string text = "# header\n";
    text += frame_line("b", "s2", 1, 1);
    text += frame_line("a", "s1", 0, 0);
    text += "\n";
    text += frame_line("b", "s2", 0, 1);
    text += frame_line("a", "s1", 1, 2);
    write_text(dir / "f.csv", text);
    const auto set = load_recordings(dir / "f.csv");
    REQUIRE(set.recordings.size() == 2);
    CHECK(set.recordings[0].recording_id == "b");
    CHECK(set.recordings[0].frames[0].frame_index == 0);
    CHECK(set.recordings[0].frames[1].frame_index == 1);
    CHECK(set.subjects() == std::set<std::string>{"s1", "s2"});
    CHECK(set.labels.size() == 3);  // numbered from the largest label seen
    CHECK(set.labels.name(2) == "class_2");
}

TEST_CASE("load_recordings: writer round trip") {
    TempDir dir;
    RecordingSet set;
    set.labels = LabelMap({"standing", "walking"});
    auto rec = labelled_recording(std::vector<int>(60, 1), "only");
    rec.frames[7].joints[2][1] = -0.123456789012345678;
    set.recordings.push_back(rec);
    write_recordings(dir / "rt.csv", set);
    const auto back = load_recordings(dir / "rt.csv");
    REQUIRE(back.recordings.size() == 1);
    CHECK(back.recordings[0].frames.size() == 60);
    for (std::size_t t = 0; t < 60; ++t) CHECK(back.recordings[0].frames[t].frame_index == static_cast<long>(t));
    CHECK(back.recordings[0].frames == set.recordings[0].frames);
    CHECK(back.labels == set.labels);
}

TEST_CASE("load_recordings: errors carry the offending line") {
    TempDir dir;
    std::string text;
    for (int k = 0; k < 4; ++k) text += frame_line("r", "s", k, 0);
    text += frame_line("r", "s", 4, 0, "NaN");
    write_text(dir / "nan.csv", text);
    try {
        load_recordings(dir / "nan.csv");
        FAIL("expected a rejection");
    } catch (const RejectionError& e) {
        CHECK(e.line() == 5);
    }

    write_text(dir / "short.csv", frame_line("r", "s", 0, 0) + "r,s,1,0,0.1,0.2\n");
    try {
        load_recordings(dir / "short.csv");
        FAIL("expected a parse error");
    } catch (const ParseError& e) {
        CHECK(e.line() == 2);
    }

    write_text(dir / "word.csv", frame_line("r", "s", 0, 0, "abc"));
    CHECK_THROWS_AS(load_recordings(dir / "word.csv"), ParseError);
    write_text(dir / "neg.csv", frame_line("r", "s", -1, 0));
    CHECK_THROWS_AS(load_recordings(dir / "neg.csv"), ParseError);

    write_text(dir / "gap.csv", frame_line("r", "s", 0, 0) + frame_line("r", "s", 2, 0));
    CHECK_THROWS_AS(load_recordings(dir / "gap.csv"), IntegrityError);
    write_text(dir / "dup.csv", frame_line("r", "s", 0, 0) + frame_line("r", "s", 0, 0));
    CHECK_THROWS_AS(load_recordings(dir / "dup.csv"), IntegrityError);

    write_text(dir / "lab.csv", frame_line("r", "s", 0, 3));
    write_text(dir / "lab.csv.labels", "0,a\n1,b\n");
    CHECK_THROWS_AS(load_recordings(dir / "lab.csv"), RejectionError);

    CHECK_THROWS_AS(load_recordings(dir / "missing.csv"), ConfigError);
}

TEST_CASE("split_windows: stated examples") {
    const auto a = split_windows(labelled_recording({0, 0, 0, 0}), 2, 2);
    CHECK(starts_of(a) == std::vector<std::size_t>{0, 2});
    for (const auto& s : a) CHECK(s.label == 0);

    const auto b = split_windows(labelled_recording({0, 0, 0, 1, 1, 1}), 3, 1);
    CHECK(starts_of(b) == std::vector<std::size_t>{0, 3});
    CHECK(b[1].label == 1);
    CHECK(first_frame(b[1].data) == 3);
    CHECK(b[1].data.frames() == 3);

    CHECK(split_windows(labelled_recording({0, 1, 0}), 3, 1).empty());
    CHECK(split_windows(labelled_recording({0, 0}), 3, 1).empty());
    CHECK_THROWS_AS(split_windows(labelled_recording({0, 0}), 0, 1), ConfigError);
}

TEST_CASE("split_windows: stride 1 emits exactly the pure starts") {
    std::mt19937_64 rng(4);
    std::uniform_int_distribution<std::size_t> length(0, 50), window(1, 6);
    std::uniform_int_distribution<int> label(0, 2), keep(0, 3);
    for (int trial = 0; trial < 300; ++trial) {
        std::vector<int> labels(length(rng));
        int current = label(rng);
        for (auto& y : labels) {
            if (keep(rng) == 0) current = label(rng);  // runs make pure windows common
            y = current;
        }
        const std::size_t T = window(rng);
        std::vector<std::size_t> expected;
        for (std::size_t j = 0; j + T <= labels.size(); ++j) {
            bool pure = true;
            for (std::size_t t = j; t < j + T; ++t) pure = pure && labels[t] == labels[j];
            if (pure) expected.push_back(j);
        }
        const auto got = split_windows(labelled_recording(labels), T, 1);
        CHECK(starts_of(got) == expected);
        for (const auto& s : got) {
            for (std::size_t t = 0; t < T; ++t) CHECK(labels[s.start_frame + t] == s.label);
        }
    }
}

TEST_CASE("build_long_term: centering, clamping, purity") {
    const auto rec = labelled_recording(std::vector<int>(30, 0));
    const auto samples = split_windows(rec, 3, 3);  // starts 0, 3, 6, ...

    const auto same = build_long_term(samples, rec, 2, 1, true);
    REQUIRE(same);
    CHECK(same->data == samples[2].data);

    const auto two = build_long_term(samples, rec, 2, 2, true);  // start 6, S=2
    REQUIRE(two);
    CHECK(two->start_frame == 3);
    CHECK(two->data.frames() == 6);
    CHECK(first_frame(two->data) == 3);
    CHECK(two->center_sample_index == 2);

    const auto left = build_long_term(samples, rec, 0, 4, true);
    REQUIRE(left);
    CHECK(left->start_frame == 0);
    CHECK(left->data.frames() == 12);

    const auto right = build_long_term(samples, rec, samples.size() - 1, 4, true);
    REQUIRE(right);
    CHECK(right->start_frame == 18);

    CHECK_FALSE(build_long_term(samples, rec, 0, 11, true));  // needs 33 of 30 frames

    std::vector<int> labels(30, 0);
    for (std::size_t t = 15; t < 30; ++t) labels[t] = 1;
    const auto mixed = labelled_recording(labels);
    const auto mixed_samples = split_windows(mixed, 3, 3);
    CHECK_FALSE(build_long_term(mixed_samples, mixed, 4, 4, true));  // start 12 spans [6, 18)
    const auto lenient = build_long_term(mixed_samples, mixed, 4, 4, false);
    REQUIRE(lenient);
    CHECK(lenient->label == 0);

    // every long window has S*T frames and stays inside its recording
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto w = build_long_term(samples, rec, i, 5, true);
        REQUIRE(w);
        CHECK(w->data.frames() == 15);
        CHECK(w->start_frame + 15 <= rec.frames.size());
    }
    CHECK_THROWS_AS(build_long_term(samples, labelled_recording({0, 0, 0}, "other"), 0, 1, true), StructuralError);
}

TEST_CASE("split_subjects") {
    std::vector<ShortTermSample> samples(4);
    samples[0].subject_id = "s1";
    samples[1].subject_id = "s2";
    samples[2].subject_id = "s1";
    samples[3].subject_id = "s2";
    const auto [train, test] = split_subjects(samples, SplitSpec{{"s1"}, {"s2"}});
    CHECK(train == std::vector<std::size_t>{0, 2});
    CHECK(test == std::vector<std::size_t>{1, 3});
    CHECK_THROWS_AS(split_subjects(samples, SplitSpec{{"s1", "s2"}, {"s2"}}), ConfigError);
    CHECK_THROWS_AS(split_subjects(samples, SplitSpec{{"s1"}, {}}), ConfigError);

    SynthesisConfig cfg;
    cfg.subjects = 25;
    cfg.frames_per_class = 40;
    const auto set = synthesize_recordings(cfg, 3);
    std::vector<ShortTermSample> all;
    for (const auto& rec : set.recordings) {
        auto w = split_windows(rec, 6, 6);
        all.insert(all.end(), w.begin(), w.end());
    }
    SplitSpec spec;
    std::size_t k = 0;
    for (const auto& s : set.subjects()) (k++ < 18 ? spec.train_subjects : spec.test_subjects).insert(s);
    const auto [tr, te] = split_subjects(all, spec);
    CHECK(tr.size() + te.size() == all.size());
    for (auto i : tr) CHECK(spec.train_subjects.contains(all[i].subject_id));
    for (auto i : te) CHECK(spec.test_subjects.contains(all[i].subject_id));
}

TEST_CASE("synthesis: noise-free standing, anti-phase walking, determinism") {
    SynthesisConfig cfg;
    cfg.noise = 0.0;
    cfg.subjects = 2;
    cfg.frames_per_class = 90;
    const auto set = synthesize_recordings(cfg, 1);
    REQUIRE(set.recordings.size() == 2);
    CHECK(set.labels.names() == cfg.classes);
    CHECK(set.frame_count() == 2 * 5 * 90);
    for (const auto& rec : set.recordings) {
        const Frame* first = nullptr;
        std::vector<double> left, right;
        for (const auto& f : rec.frames) {
            if (f.label == 0) {
                if (!first) first = &f;
                CHECK(f.joints == first->joints);
            } else if (f.label == 1) {
                left.push_back(f.joints[kLeftThigh][1]);
                right.push_back(f.joints[kRightThigh][1]);
            }
        }
        CHECK(pearson(left, right) < 0);
    }

    TempDir dir;
    SynthesisConfig noisy;
    noisy.subjects = 2;
    noisy.frames_per_class = 50;
    synthesize_gestures(noisy, 7, dir / "a.csv");
    synthesize_gestures(noisy, 7, dir / "b.csv");
    CHECK(read_text(dir / "a.csv") == read_text(dir / "b.csv"));
    synthesize_gestures(noisy, 8, dir / "c.csv");
    CHECK(read_text(dir / "a.csv") != read_text(dir / "c.csv"));

    const auto back = load_recordings(dir / "a.csv");
    CHECK(back.recordings == synthesize_recordings(noisy, 7).recordings);
    CHECK(back.labels == LabelMap(noisy.classes));
}

TEST_CASE("synthesis: configuration checks") {
    SynthesisConfig cfg;
    cfg.classes = {"standing", "moonwalk"};
    CHECK_THROWS_AS(synthesize_recordings(cfg, 0), ConfigError);
    cfg.classes = {"standing"};
    CHECK_THROWS_AS(synthesize_recordings(cfg, 0), ConfigError);
    cfg = SynthesisConfig{};
    cfg.subjects = 0;
    CHECK_THROWS_AS(synthesize_recordings(cfg, 0), ConfigError);
    cfg = SynthesisConfig{};
    cfg.noise = -1;
    CHECK_THROWS_AS(synthesize_recordings(cfg, 0), ConfigError);

    const auto kv = KeyValueConfig::from_string("classes = walking, jogging\nsubjects = 3\nnoise = 0.02\n");
    const auto parsed = SynthesisConfig::from(kv);
    CHECK(parsed.classes == std::vector<std::string>{"walking", "jogging"});
    CHECK(parsed.subjects == 3);
    CHECK(parsed.noise == 0.02);
}

TEST_CASE("input normalization: identity, fitted statistics, centering") {
    std::mt19937_64 rng(6);
    const auto x = random_sequence(6, rng);
    CHECK(InputNormalization::identity().apply(x) == x);
    CHECK(InputNormalization::identity(true).apply(x) == mean_centered(x));

    std::vector<ShortTermSample> samples(20);
    for (auto& s : samples) {
        s.data = random_sequence(6, rng, 0.3);
        for (std::size_t t = 0; t < 6; ++t) s.data.at(1, t, 0) += 1.7;  // a constant offset on head y
    }
    const auto norm = InputNormalization::fit(samples, false);
    double sum[9] = {}, sq[9] = {};
    double n = 0;
    for (const auto& s : samples) {
        const auto y = norm.apply(s.data);
        for (std::size_t c = 0; c < kChannels; ++c) {
            for (std::size_t t = 0; t < 6; ++t) {
                for (std::size_t v = 0; v < kJoints; ++v) {
                    sum[c * kJoints + v] += y.at(c, t, v);
                    sq[c * kJoints + v] += y.at(c, t, v) * y.at(c, t, v);
                }
            }
        }
        n += 6;
    }
    for (int k = 0; k < 9; ++k) {
        CHECK(std::abs(sum[k] / n) < 1e-12);
        CHECK(sq[k] / n == doctest::Approx(1.0).epsilon(1e-12));
    }

    // a coordinate that never moves keeps scale 1
    std::vector<ShortTermSample> flat(3);
    for (auto& s : flat) s.data = SkeletonSequence(6);
    const auto still = InputNormalization::fit(flat, false);
    for (double s : still.scale) CHECK(s == 1.0);
    CHECK_THROWS_AS(InputNormalization::fit({}, false), ConfigError);
}
