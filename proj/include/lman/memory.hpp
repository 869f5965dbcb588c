#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "lman/error.hpp"

namespace lman {

/// FIFO ring buffer of K long-term features with their class labels.
/// Slots are addressed by physical index 0..fill-1; once full, the slot at
/// the write cursor is the oldest and is overwritten next.
template <typename Scalar>
class MemoryQueue {
public:
    static constexpr double kNormTolerance = 1e-3;

    MemoryQueue() = default;
    MemoryQueue(std::size_t capacity, std::size_t dim)
        : capacity_(capacity), dim_(dim), features_(capacity * dim, Scalar(0)), labels_(capacity, -1) {
        if (capacity == 0 || dim == 0) throw ConfigError("memory queue: capacity and dim must be positive");
    }

    /// Stores a detached unit-norm feature; evicts the oldest slot when full.
    void enqueue(std::span<const Scalar> feature, int label) {
        if (feature.size() != dim_) throw StructuralError("enqueue: feature length mismatch");
        if (label < 0) throw ContractError("enqueue: negative label");
        double sq = 0;
        for (Scalar x : feature) sq += static_cast<double>(x) * static_cast<double>(x);
        if (!std::isfinite(sq) || std::abs(std::sqrt(sq) - 1.0) > kNormTolerance) {
            throw ContractError("enqueue: feature is not L2-normalized (norm " + std::to_string(std::sqrt(sq)) + ")");
        }
        std::copy(feature.begin(), feature.end(), features_.begin() + static_cast<std::ptrdiff_t>(head_ * dim_));
        labels_[head_] = label;
        head_ = (head_ + 1) % capacity_;
        fill_ = std::min(fill_ + 1, capacity_);
    }

    std::size_t capacity() const noexcept { return capacity_; }
    std::size_t dim() const noexcept { return dim_; }
    std::size_t fill() const noexcept { return fill_; }
    std::size_t head() const noexcept { return head_; }
    bool empty() const noexcept { return fill_ == 0; }

    std::span<const Scalar> feature(std::size_t slot) const {
        return {features_.data() + slot * dim_, dim_};
    }
    int label(std::size_t slot) const { return labels_[slot]; }

    /// Physical slot indices from oldest to newest.
    std::vector<std::size_t> insertion_order() const {
        std::vector<std::size_t> order;
        order.reserve(fill_);
        const std::size_t first = fill_ < capacity_ ? 0 : head_;
        for (std::size_t k = 0; k < fill_; ++k) order.push_back((first + k) % capacity_);
        return order;
    }

    const std::vector<Scalar>& raw_features() const noexcept { return features_; }
    const std::vector<int>& raw_labels() const noexcept { return labels_; }

    /// Reinstates a persisted queue.
    void restore(std::vector<Scalar> features, std::vector<int> labels, std::size_t fill, std::size_t head) {
        if (features.size() != capacity_ * dim_ || labels.size() != capacity_ || fill > capacity_ ||
            head >= capacity_ || (fill < capacity_ && head != fill)) {
            throw IntegrityError("memory queue: inconsistent persisted state");
        }
        features_ = std::move(features);
        labels_ = std::move(labels);
        fill_ = fill;
        head_ = head;
    }

    bool operator==(const MemoryQueue&) const = default;

private:
    std::size_t capacity_ = 0;
    std::size_t dim_ = 0;
    std::size_t fill_ = 0;
    std::size_t head_ = 0;
    std::vector<Scalar> features_;
    std::vector<int> labels_;
};

/// Softmax over q . m_j for the filled slots (temperature 1).
/// Throws EmptyMemoryError when nothing has been stored yet.
template <typename Scalar>
std::vector<Scalar> address(const MemoryQueue<Scalar>& memory, std::span<const Scalar> query) {
    if (memory.empty()) throw EmptyMemoryError("address: memory queue is empty");
    if (query.size() != memory.dim()) throw StructuralError("address: query length mismatch");
    const std::size_t n = memory.fill();
    std::vector<Scalar> weights(n);
    for (std::size_t j = 0; j < n; ++j) {
        const auto m = memory.feature(j);
        Scalar s = 0;
        for (std::size_t k = 0; k < query.size(); ++k) s += query[k] * m[k];
        weights[j] = s;
    }
    const Scalar peak = *std::max_element(weights.begin(), weights.end());
    Scalar total = 0;
    for (auto& w : weights) {
        w = std::exp(w - peak);
        total += w;
    }
    for (auto& w : weights) w /= total;
    return weights;
}

/// Addressing-weighted sum of the stored features.
template <typename Scalar>
std::vector<Scalar> recall(const MemoryQueue<Scalar>& memory, std::span<const Scalar> weights) {
    if (weights.size() != memory.fill()) throw StructuralError("recall: addressing length does not match fill");
    std::vector<Scalar> out(memory.dim(), Scalar(0));
    for (std::size_t j = 0; j < weights.size(); ++j) {
        const auto m = memory.feature(j);
        for (std::size_t k = 0; k < out.size(); ++k) out[k] += weights[j] * m[k];
    }
    return out;
}

template <typename Scalar>
std::vector<Scalar> fuse(std::span<const Scalar> short_feature, std::span<const Scalar> recalled) {
    if (short_feature.size() != recalled.size()) throw StructuralError("fuse: length mismatch");
    std::vector<Scalar> out(short_feature.size());
    for (std::size_t k = 0; k < out.size(); ++k) out[k] = short_feature[k] + recalled[k];
    return out;
}

/// recall(address(q)); the zero vector while the queue is empty.
/// The addressing vector is written to `weights` when requested.
template <typename Scalar>
std::vector<Scalar> recall_for_query(const MemoryQueue<Scalar>& memory, std::span<const Scalar> query,
                                     std::vector<Scalar>* weights = nullptr) {
    if (query.size() != memory.dim()) throw StructuralError("recall_for_query: query length mismatch");
    if (memory.empty()) {
        if (weights) weights->clear();
        return std::vector<Scalar>(memory.dim(), Scalar(0));
    }
    auto a = address(memory, query);
    auto out = recall<Scalar>(memory, a);
    if (weights) *weights = std::move(a);
    return out;
}

/// d(loss)/d(query) given d(loss)/d(recalled) and the forward addressing.
/// Stored slots are constants: no gradient is produced for them.
template <typename Scalar>
std::vector<Scalar> recall_for_query_backward(const MemoryQueue<Scalar>& memory, std::span<const Scalar> weights,
                                              std::span<const Scalar> recalled_grad) {
    std::vector<Scalar> dq(memory.dim(), Scalar(0));
    if (memory.empty()) return dq;
    if (weights.size() != memory.fill() || recalled_grad.size() != memory.dim()) {
        throw StructuralError("recall_for_query_backward: shape mismatch");
    }
    // F = sum_j a_j m_j, a = softmax(M q): dz_j = a_j (m_j . g - sum_k a_k m_k . g)
    const std::size_t n = weights.size();
    std::vector<Scalar> s(n);
    Scalar mean = 0;
    for (std::size_t j = 0; j < n; ++j) {
        const auto m = memory.feature(j);
        Scalar d = 0;
        for (std::size_t k = 0; k < dq.size(); ++k) d += m[k] * recalled_grad[k];
        s[j] = d;
        mean += weights[j] * d;
    }
    for (std::size_t j = 0; j < n; ++j) {
        const Scalar dz = weights[j] * (s[j] - mean);
        const auto m = memory.feature(j);
        for (std::size_t k = 0; k < dq.size(); ++k) dq[k] += dz * m[k];
    }
    return dq;
}

}  // namespace lman
