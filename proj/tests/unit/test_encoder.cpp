#include <cmath>
#include <random>

#include "doctest.h"
#include "lman/encoder.hpp"
#include "lman/error.hpp"
#include "support.hpp"

using namespace lman;
using namespace lman::test;

namespace {

// Random non-zero weights everywhere, so no gradient path is trivially dead.
EncoderParams<double> random_encoder(const EncoderConfig& cfg, std::mt19937_64& rng) {
    auto p = EncoderParams<double>::zeros(cfg);
    std::normal_distribution<double> n(0.0, 0.6);
    for (auto& t : p.tensors) {
        for (auto& v : t.values) v = n(rng);
    }
    return p;
}

}  // namespace

TEST_CASE("graph normalization of the head-thigh star") {
    const auto g = SkeletonGraph::head_and_thighs();
    // degrees with self loops: head 3, thighs 2
    CHECK(g.normalized[kHead][kHead] == doctest::Approx(1.0 / 3));
    CHECK(g.normalized[kHead][kLeftThigh] == doctest::Approx(1.0 / std::sqrt(6.0)));
    CHECK(g.normalized[kLeftThigh][kRightThigh] == 0.0);
    CHECK(g.normalized[kRightThigh][kRightThigh] == doctest::Approx(0.5));
}

TEST_CASE("encoder output is unit norm and length agnostic") {
    std::mt19937_64 rng(3);
    const auto cfg = tiny_encoder();
    const auto p = random_encoder(cfg, rng);
    for (std::size_t frames : {3u, 6u, 60u}) {
        const auto f = encode(p, random_sequence(frames, rng));
        REQUIRE(f.size() == cfg.feature_dim);
        double sq = 0;
        for (double v : f) sq += v * v;
        CHECK(std::sqrt(sq) == doctest::Approx(1.0).epsilon(1e-12));
    }
    CHECK_THROWS_AS(encode(p, random_sequence(2, rng)), StructuralError);
    auto bad = random_sequence(6, rng);
    bad.at(1, 2, 0) = std::nan("");
    CHECK_THROWS_AS(encode(p, bad), RejectionError);
}

TEST_CASE("encoder is deterministic") {
    std::mt19937_64 rng(4);
    const auto p = random_encoder(tiny_encoder(), rng);
    const auto x = random_sequence(6, rng);
    CHECK(encode(p, x) == encode(p, x));
}

TEST_CASE("encoder gradient matches central differences") {
    std::mt19937_64 rng(11);
    const auto cfg = tiny_encoder();
    for (int trial = 0; trial < 5; ++trial) {
        auto p = random_encoder(cfg, rng);
        REQUIRE(parameter_count(p.tensors) <= 500);
        const auto x = random_sequence(6, rng);
        const auto r = random_unit<double>(cfg.feature_dim, rng);
        auto loss = [&] {
            const auto f = encode(p, x);
            double s = 0;
            for (std::size_t k = 0; k < f.size(); ++k) s += r[k] * f[k];
            return s;
        };
        EncoderTrace<double> trace;
        encode(p, x, &trace);
        auto grads = zeros_like(p.tensors);
        encode_backward<double>(p, trace, r, grads);
        const auto analytic = flatten(grads);

        std::vector<double> numeric;
        for (auto& t : p.tensors) {
            const auto g = numeric_gradient(t.values, loss);
            numeric.insert(numeric.end(), g.begin(), g.end());
        }
        CHECK(max_relative_error(analytic, numeric) < 1e-4);
    }
}

TEST_CASE("encoder backward accumulates") {
    std::mt19937_64 rng(12);
    const auto cfg = tiny_encoder();
    const auto p = random_encoder(cfg, rng);
    const auto x = random_sequence(6, rng);
    const auto r = random_unit<double>(cfg.feature_dim, rng);
    EncoderTrace<double> trace;
    encode(p, x, &trace);
    auto once = zeros_like(p.tensors);
    encode_backward<double>(p, trace, r, once);
    auto twice = zeros_like(p.tensors);
    encode_backward<double>(p, trace, r, twice);
    encode_backward<double>(p, trace, r, twice);
    const auto a = flatten(once), b = flatten(twice);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(b[i] == doctest::Approx(2 * a[i]));
}

TEST_CASE("decoder and cross-entropy gradients match central differences") {
    std::mt19937_64 rng(13);
    auto d = DecoderParams<double>::zeros(4, 5);
    std::normal_distribution<double> n(0.0, 0.8);
    for (auto& t : d.tensors) {
        for (auto& v : t.values) v = n(rng);
    }
    std::vector<double> feature(5);
    for (auto& v : feature) v = n(rng);
    const int label = 2;
    auto loss = [&] {
        const auto p = classify<double>(d, feature);
        return -std::log(p[label]);
    };
    const auto probs = classify<double>(d, feature);
    std::vector<double> dlogits(probs.begin(), probs.end());
    dlogits[label] -= 1;
    auto grads = zeros_like(d.tensors);
    const auto dfeature = decoder_backward<double>(d, feature, dlogits, grads);

    std::vector<double> numeric;
    for (auto& t : d.tensors) {
        const auto g = numeric_gradient(t.values, loss);
        numeric.insert(numeric.end(), g.begin(), g.end());
    }
    CHECK(max_relative_error(flatten(grads), numeric) < 1e-4);
    CHECK(max_relative_error(dfeature, numeric_gradient(feature, loss)) < 1e-4);
}

TEST_CASE("softmax is stable and argmax breaks ties low") {
    const std::vector<double> big{1000.0, 1000.0, -1000.0};
    const auto p = softmax<double>(big);
    CHECK(p[0] == doctest::Approx(0.5));
    CHECK(p[2] == 0.0);
    CHECK(argmax<double>(p) == 0);
    const std::vector<float> flat(5, 0.2f);
    CHECK(argmax<float>(flat) == 0);
}

TEST_CASE("initialization: long-term encoder is an exact copy, weights are fan-in bounded") {
    const auto cfg = tiny_encoder();
    const auto pair = init_encoders<float>(cfg, 42);
    CHECK(pair.short_term.tensors == pair.long_term.tensors);
    const float bound = 1.0f / std::sqrt(static_cast<float>(cfg.feature_dim));
    bool any_nonzero = false;
    for (float v : pair.decoder.weight().values) {
        CHECK(std::abs(v) <= bound);
        any_nonzero = any_nonzero || v != 0.0f;
    }
    CHECK(any_nonzero);
    for (float v : pair.decoder.bias().values) CHECK(v == 0.0f);
    const auto again = init_encoders<float>(tiny_encoder(), 42);
    CHECK(again.short_term.tensors == pair.short_term.tensors);
    const auto other = init_encoders<float>(tiny_encoder(), 43);
    CHECK_FALSE(other.short_term.tensors == pair.short_term.tensors);
}

TEST_CASE("momentum update") {
    std::mt19937_64 rng(21);
    const auto cfg = tiny_encoder();
    auto online = random_encoder(cfg, rng);
    auto target = random_encoder(cfg, rng);

    SUBCASE("element-wise recursion") {
        auto expected = target.tensors;
        const double v = 0.9;
        for (std::size_t n = 0; n < expected.size(); ++n) {
            for (std::size_t k = 0; k < expected[n].size(); ++k) {
                expected[n].values[k] = v * expected[n].values[k] + (1 - v) * online.tensors[n].values[k];
            }
        }
        momentum_update(target, online, v);
        const auto a = flatten(target.tensors), b = flatten(expected);
        for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-15));
    }
    SUBCASE("v = 0 copies") {
        momentum_update(target, online, 0.0);
        CHECK(target.tensors == online.tensors);
    }
    SUBCASE("identical encoders are a fixed point") {
        auto copy = online;
        momentum_update(copy, online, 0.99);
        CHECK(copy.tensors == online.tensors);
    }
    SUBCASE("out of range v is rejected") {
        CHECK_THROWS_AS(momentum_update(target, online, 1.0), ConfigError);
        CHECK_THROWS_AS(momentum_update(target, online, -0.1), ConfigError);
    }
}
