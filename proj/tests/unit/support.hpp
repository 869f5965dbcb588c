#pragma once

// Shared fixtures for the unit tests: random instances and finite differences.

#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <random>
#include <vector>

#include "lman/dataset.hpp"
#include "lman/encoder.hpp"
#include "lman/losses.hpp"
#include "lman/memory.hpp"
#include "lman/tensor.hpp"

#include <unistd.h>

namespace lman::test {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    TempDir() {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("lman_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    out << text;
}

inline std::string read_text(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline SkeletonSequence random_sequence(std::size_t frames, std::mt19937_64& rng, double spread = 1.0) {
    SkeletonSequence x(frames);
    std::normal_distribution<double> n(0.0, spread);
    for (auto& v : x.values()) v = n(rng);
    return x;
}

template <typename S>
std::vector<S> random_unit(std::size_t dim, std::mt19937_64& rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    std::vector<double> v(dim);
    double sq = 0;
    for (auto& x : v) {
        x = n(rng);
        sq += x * x;
    }
    std::vector<S> out(dim);
    for (std::size_t k = 0; k < dim; ++k) out[k] = static_cast<S>(v[k] / std::sqrt(sq));
    return out;
}

template <typename S>
Matrix<S> random_unit_rows(std::size_t rows, std::size_t dim, std::mt19937_64& rng) {
    Matrix<S> m(rows, dim);
    for (std::size_t r = 0; r < rows; ++r) {
        const auto u = random_unit<S>(dim, rng);
        std::copy(u.begin(), u.end(), m.row(r).begin());
    }
    return m;
}

template <typename S>
MemoryQueue<S> random_memory(std::size_t capacity, std::size_t dim, std::size_t fill, int classes,
                             std::mt19937_64& rng) {
    MemoryQueue<S> m(capacity, dim);
    std::uniform_int_distribution<int> label(0, classes - 1);
    for (std::size_t k = 0; k < fill; ++k) m.enqueue(random_unit<S>(dim, rng), label(rng));
    return m;
}

/// Central differences of `f` with respect to every entry of `x`.
inline std::vector<double> numeric_gradient(std::vector<double>& x, const std::function<double()>& f,
                                            double eps = 1e-6) {
    std::vector<double> g(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double keep = x[i];
        x[i] = keep + eps;
        const double up = f();
        x[i] = keep - eps;
        const double down = f();
        x[i] = keep;
        g[i] = (up - down) / (2 * eps);
    }
    return g;
}

/// Largest element-wise |a - n| / max(|a|, |n|, floor).
inline double max_relative_error(const std::vector<double>& analytic, const std::vector<double>& numeric,
                                 double floor = 1e-6) {
    double worst = 0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        const double scale = std::max({std::abs(analytic[i]), std::abs(numeric[i]), floor});
        worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / scale);
    }
    return worst;
}

inline std::vector<double> flatten(const ParameterSet<double>& set) {
    std::vector<double> out;
    for (const auto& t : set) out.insert(out.end(), t.values.begin(), t.values.end());
    return out;
}

inline bool all_zero(const ParameterSet<double>& set) {
    for (const auto& t : set) {
        for (double v : t.values) {
            if (v != 0.0) return false;
        }
    }
    return true;
}

inline EncoderConfig tiny_encoder(std::size_t num_classes = 3) {
    EncoderConfig c;
    c.blocks = 2;
    c.width = 4;
    c.feature_dim = 5;
    c.kernel = 3;
    c.num_classes = num_classes;
    return c;
}

// Direct transcription of the loss definitions: plain exp/log, no stabilization,
// long double accumulation, every (anchor, positive, denominator) triple visited.
inline long double mal_oracle(const Matrix<double>& f, const std::vector<int>& y, const MemoryQueue<double>& m,
                       double tau, DenominatorMode mode) {
    long double total = 0;
    for (std::size_t i = 0; i < f.rows(); ++i) {
        std::size_t n_pos = 0, n_den = 0;
        for (std::size_t j = 0; j < m.fill(); ++j) {
            if (m.label(j) == y[i]) ++n_pos;
            if (m.label(j) != y[i] || mode == DenominatorMode::all_but_self) ++n_den;
        }
        if (n_pos == 0 || n_den == 0) continue;
        long double anchor = 0;
        for (std::size_t p = 0; p < m.fill(); ++p) {
            if (m.label(p) != y[i]) continue;
            long double den = 0;
            for (std::size_t a = 0; a < m.fill(); ++a) {
                if (m.label(a) == y[i] && mode == DenominatorMode::negatives_only) continue;
                den += std::exp(static_cast<long double>(dot<double>(f.row(i), m.feature(a))) / tau);
            }
            const long double num = std::exp(static_cast<long double>(dot<double>(f.row(i), m.feature(p))) / tau);
            anchor += std::log(num / den);
        }
        total += -anchor / static_cast<long double>(n_pos);
    }
    return total;
}

inline long double scl_oracle(const Matrix<double>& f, const std::vector<int>& y, double tau) {
    long double total = 0;
    for (std::size_t i = 0; i < f.rows(); ++i) {
        std::size_t n_pos = 0;
        for (std::size_t j = 0; j < f.rows(); ++j) n_pos += (j != i && y[j] == y[i]);
        if (n_pos == 0) continue;
        long double anchor = 0;
        for (std::size_t p = 0; p < f.rows(); ++p) {
            if (p == i || y[p] != y[i]) continue;
            long double den = 0;
            for (std::size_t a = 0; a < f.rows(); ++a) {
                if (a != i) den += std::exp(static_cast<long double>(dot<double>(f.row(i), f.row(a))) / tau);
            }
            anchor += std::log(std::exp(static_cast<long double>(dot<double>(f.row(i), f.row(p))) / tau) / den);
        }
        total += -anchor / static_cast<long double>(n_pos);
    }
    return total;
}

inline std::vector<int> random_labels(std::size_t n, int classes, std::mt19937_64& rng) {
    std::uniform_int_distribution<int> d(0, classes - 1);
    std::vector<int> y(n);
    for (auto& v : y) v = d(rng);
    return y;
}

}  // namespace lman::test
