#include <cmath>
#include <deque>
#include <random>
#include <utility>

#include "doctest.h"
#include "lman/error.hpp"
#include "lman/memory.hpp"
#include "support.hpp"

using namespace lman;
using namespace lman::test;

namespace {

std::vector<double> basis(std::size_t dim, std::size_t k) {
    std::vector<double> v(dim, 0.0);
    v[k] = 1.0;
    return v;
}

// Independent ring-buffer model: a deque capped at K, newest at the back.
struct ReferenceQueue {
    std::size_t capacity;
    std::deque<std::pair<std::vector<double>, int>> items;

    void push(std::vector<double> f, int y) {
        items.emplace_back(std::move(f), y);
        if (items.size() > capacity) items.pop_front();
    }
};

}  // namespace

TEST_CASE("enqueue: first slot, eviction order, fill saturation") {
    MemoryQueue<double> m(2, 3);
    CHECK(m.empty());
    m.enqueue(basis(3, 0), 4);
    CHECK(m.fill() == 1);
    CHECK(m.label(0) == 4);
    CHECK(std::vector<double>(m.feature(0).begin(), m.feature(0).end()) == basis(3, 0));

    m.enqueue(basis(3, 1), 5);
    m.enqueue(basis(3, 2), 6);  // evicts the first
    CHECK(m.fill() == 2);
    std::vector<int> held;
    for (auto slot : m.insertion_order()) held.push_back(m.label(slot));
    CHECK(held == std::vector<int>{5, 6});
}

TEST_CASE("enqueue rejects unnormalized features and bad shapes") {
    MemoryQueue<double> m(4, 2);
    CHECK_THROWS_AS(m.enqueue(std::vector<double>{1.01, 0.0}, 0), ContractError);
    CHECK_THROWS_AS(m.enqueue(std::vector<double>{0.0, 0.0}, 0), ContractError);
    CHECK_THROWS_AS(m.enqueue(std::vector<double>{NAN, 0.0}, 0), ContractError);
    CHECK_THROWS_AS(m.enqueue(std::vector<double>{1.0, 0.0, 0.0}, 0), StructuralError);
    CHECK_NOTHROW(m.enqueue(std::vector<double>{1.0005, 0.0}, 0));  // inside the 1e-3 band
    CHECK_THROWS_AS((MemoryQueue<double>(0, 2)), ConfigError);
}

TEST_CASE("FIFO contents match a reference simulation at every step") {
    std::mt19937_64 rng(11);
    for (std::size_t K : {1u, 2u, 7u, 64u}) {
        CAPTURE(K);
        MemoryQueue<double> m(K, 4);
        ReferenceQueue ref{K, {}};
        std::uniform_int_distribution<int> label(0, 9);
        bool same = true;
        for (int op = 0; op < 10000 && same; ++op) {
            const auto f = random_unit<double>(4, rng);
            const int y = label(rng);
            m.enqueue(f, y);
            ref.push(f, y);
            const auto order = m.insertion_order();
            same = order.size() == ref.items.size() && m.fill() == ref.items.size();
            for (std::size_t k = 0; same && k < order.size(); ++k) {
                const auto stored = m.feature(order[k]);
                same = m.label(order[k]) == ref.items[k].second &&
                       std::equal(stored.begin(), stored.end(), ref.items[k].first.begin());
            }
        }
        CHECK(same);
    }
}

TEST_CASE("address: closed forms") {
    MemoryQueue<double> m(4, 2);
    CHECK_THROWS_AS(address<double>(m, basis(2, 0)), EmptyMemoryError);

    m.enqueue(basis(2, 0), 0);
    const auto one = address<double>(m, basis(2, 1));
    REQUIRE(one.size() == 1);
    CHECK(one[0] == 1.0);

    m.enqueue(basis(2, 1), 1);
    const auto two = address<double>(m, basis(2, 0));  // logits 1 and 0
    CHECK(two[0] == doctest::Approx(std::exp(1.0) / (std::exp(1.0) + 1.0)).epsilon(1e-14));
    CHECK(two[1] == doctest::Approx(1.0 / (std::exp(1.0) + 1.0)).epsilon(1e-14));
    CHECK(two[0] == doctest::Approx(0.7311).epsilon(1e-4));

    MemoryQueue<double> same(5, 3);
    std::mt19937_64 rng(2);
    const auto f = random_unit<double>(3, rng);
    for (int k = 0; k < 5; ++k) same.enqueue(f, k);
    for (double w : address<double>(same, random_unit<double>(3, rng))) CHECK(w == doctest::Approx(0.2).epsilon(1e-14));
}

TEST_CASE("address: weights form a distribution; recall stays in the slot hull") {
    std::mt19937_64 rng(5);
    const std::size_t K = 32, dim = 6;
    std::uniform_int_distribution<std::size_t> fill_of(1, K);
    double worst_sum = 0;
    bool in_range = true, in_hull = true;
    for (int trial = 0; trial < 1000; ++trial) {
        const auto memory = random_memory<double>(K, dim, fill_of(rng), 5, rng);
        const auto q = random_unit<double>(dim, rng);
        const auto a = address<double>(memory, q);
        double sum = 0;
        for (double w : a) {
            sum += w;
            in_range = in_range && w > 0.0 && w <= 1.0;
        }
        worst_sum = std::max(worst_sum, std::abs(sum - 1.0));
        const auto r = recall<double>(memory, a);
        for (std::size_t k = 0; k < dim; ++k) {
            double lo = INFINITY, hi = -INFINITY;
            for (std::size_t j = 0; j < memory.fill(); ++j) {
                lo = std::min(lo, memory.feature(j)[k]);
                hi = std::max(hi, memory.feature(j)[k]);
            }
            in_hull = in_hull && r[k] >= lo - 1e-12 && r[k] <= hi + 1e-12;
        }
    }
    CHECK(worst_sum < 1e-6);
    CHECK(in_range);
    CHECK(in_hull);
}

TEST_CASE("address: shift invariance and agreement with the naive softmax") {
    std::mt19937_64 rng(8);
    const std::size_t dim = 4, n = 9;
    const double alpha = 0.6, beta = 3.0, s = std::sqrt(1 - alpha * alpha);

    // Slots gain a shared extra coordinate alpha; the query's extra coordinate
    // beta then adds alpha*beta to every logit.
    MemoryQueue<double> plain(n, dim), lifted(n, dim + 1);
    for (std::size_t j = 0; j < n; ++j) {
        const auto u = random_unit<double>(dim, rng);
        plain.enqueue(u, 0);
        std::vector<double> up(dim + 1);
        for (std::size_t k = 0; k < dim; ++k) up[k] = s * u[k];
        up[dim] = alpha;
        lifted.enqueue(up, 0);
    }
    const auto q = random_unit<double>(dim, rng);
    std::vector<double> q_up(dim + 1);
    for (std::size_t k = 0; k < dim; ++k) q_up[k] = q[k] / s;
    q_up[dim] = beta;
    const auto a = address<double>(plain, q);
    const auto b = address<double>(lifted, q_up);
    for (std::size_t j = 0; j < n; ++j) CHECK(std::abs(a[j] - b[j]) < 1e-12);

    // Query norms up to 30 put the logits anywhere in [-30, 30].
    std::uniform_real_distribution<double> radius(0.0, 30.0);
    double worst = 0;
    for (int trial = 0; trial < 200; ++trial) {
        const auto memory = random_memory<double>(n, dim, n, 3, rng);
        auto query = random_unit<double>(dim, rng);
        const double r = radius(rng);
        for (auto& v : query) v *= r;
        std::vector<double> naive(n);
        double total = 0;
        for (std::size_t j = 0; j < n; ++j) {
            double logit = 0;
            for (std::size_t k = 0; k < dim; ++k) logit += query[k] * memory.feature(j)[k];
            naive[j] = std::exp(logit);
            total += naive[j];
        }
        const auto stable = address<double>(memory, query);
        for (std::size_t j = 0; j < n; ++j) worst = std::max(worst, std::abs(naive[j] / total - stable[j]));
    }
    CHECK(worst < 1e-10);
}

TEST_CASE("recall: one-hot, antipodal and brute-force sums") {
    MemoryQueue<double> m(3, 2);
    m.enqueue(std::vector<double>{0.6, 0.8}, 0);
    m.enqueue(std::vector<double>{-0.6, -0.8}, 1);
    const auto hot = recall<double>(m, std::vector<double>{0.0, 1.0});
    CHECK(hot == std::vector<double>{-0.6, -0.8});
    const auto zero = recall<double>(m, std::vector<double>{0.5, 0.5});
    CHECK(std::abs(zero[0]) < 1e-15);
    CHECK(std::abs(zero[1]) < 1e-15);
    CHECK_THROWS_AS(recall<double>(m, std::vector<double>{1.0}), StructuralError);

    std::mt19937_64 rng(13);
    const std::size_t K = 16, dim = 7;
    const auto memory = random_memory<double>(K, dim, K, 4, rng);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> a(K);
        double total = 0;
        for (auto& w : a) total += (w = u(rng));
        for (auto& w : a) w /= total;
        const auto r = recall<double>(memory, a);
        for (std::size_t k = 0; k < dim; ++k) {
            long double expected = 0;
            for (std::size_t j = 0; j < K; ++j) expected += static_cast<long double>(a[j]) * memory.feature(j)[k];
            CHECK(std::abs(r[k] - static_cast<double>(expected)) < 1e-12);
        }
    }
}

TEST_CASE("fuse and the cold-start recall") {
    CHECK(fuse<double>(std::vector<double>{1.0, 0.0}, std::vector<double>{0.5, -0.5}) == std::vector<double>{1.5, -0.5});
    const std::vector<double> f{0.6, 0.8};
    CHECK(fuse<double>(f, f) == std::vector<double>{1.2, 1.6});
    CHECK_THROWS_AS(fuse<double>(f, std::vector<double>{1.0}), StructuralError);

    MemoryQueue<double> m(4, 2);
    std::vector<double> weights{1.0};
    const auto cold = recall_for_query<double>(m, f, &weights);
    CHECK(cold == std::vector<double>{0.0, 0.0});
    CHECK(weights.empty());
    CHECK(fuse<double>(f, cold) == f);

    m.enqueue(std::vector<double>{0.0, 1.0}, 2);
    CHECK(recall_for_query<double>(m, f) == std::vector<double>{0.0, 1.0});
}

TEST_CASE("recall_for_query gradient matches central differences; slots stay untouched") {
    std::mt19937_64 rng(17);
    const std::size_t K = 10, dim = 5;
    for (std::size_t fill : {1u, 4u, 10u}) {
        CAPTURE(fill);
        const auto memory = random_memory<double>(K, dim, fill, 3, rng);
        const auto before = memory;
        auto q = random_unit<double>(dim, rng);
        const auto g = random_unit<double>(dim, rng);  // L = g . recall(q)
        auto loss = [&] {
            const auto r = recall_for_query<double>(memory, q);
            double s = 0;
            for (std::size_t k = 0; k < dim; ++k) s += g[k] * r[k];
            return s;
        };
        std::vector<double> a;
        recall_for_query<double>(memory, q, &a);
        const auto analytic = recall_for_query_backward<double>(memory, a, g);
        const auto numeric = numeric_gradient(q, loss);
        CHECK(max_relative_error(analytic, numeric, 1e-8) < 1e-4);
        CHECK(memory == before);
    }
    MemoryQueue<double> empty(3, 2);
    const auto none = recall_for_query_backward<double>(empty, {}, std::vector<double>{1.0, 1.0});
    CHECK(none == std::vector<double>{0.0, 0.0});
}
