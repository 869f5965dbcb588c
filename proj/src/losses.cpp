#include "lman/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "lman/error.hpp"

namespace lman {

std::string to_string(DenominatorMode mode) {
    return mode == DenominatorMode::negatives_only ? "negatives_only" : "all_but_self";
}

DenominatorMode parse_denominator_mode(const std::string& text) {
    if (text == "negatives_only") return DenominatorMode::negatives_only;
    if (text == "all_but_self") return DenominatorMode::all_but_self;
    throw ConfigError("unknown denominator_mode '" + text + "'");
}

void LossConfig::validate() const {
    if (!(temperature > 0)) throw ConfigError("loss: temperature must be positive");
    if (!(mal_weight >= 0)) throw ConfigError("loss: mal_weight must be non-negative");
}

double total_loss(double ce, double aux, const LossConfig& cfg) { return ce + cfg.mal_weight * aux; }

template <typename Scalar>
Scalar cross_entropy(std::span<const Scalar> probs, int label) {
    if (label < 0 || static_cast<std::size_t>(label) >= probs.size()) {
        throw StructuralError("cross_entropy: label out of range");
    }
    return -std::log(std::max(probs[static_cast<std::size_t>(label)], static_cast<Scalar>(kProbabilityFloor)));
}

template <typename Scalar>
std::vector<Scalar> cross_entropy_logits_grad(std::span<const Scalar> probs, int label) {
    if (label < 0 || static_cast<std::size_t>(label) >= probs.size()) {
        throw StructuralError("cross_entropy: label out of range");
    }
    std::vector<Scalar> g(probs.size(), Scalar(0));
    // the clamp is flat below the floor
    if (probs[static_cast<std::size_t>(label)] < static_cast<Scalar>(kProbabilityFloor)) return g;
    for (std::size_t k = 0; k < probs.size(); ++k) g[k] = probs[k];
    g[static_cast<std::size_t>(label)] -= Scalar(1);
    return g;
}

namespace {

template <typename Scalar>
void check_unit_rows(const Matrix<Scalar>& m, const char* who) {
    for (std::size_t i = 0; i < m.rows(); ++i) {
        double sq = 0;
        for (Scalar x : m.row(i)) sq += static_cast<double>(x) * static_cast<double>(x);
        if (!std::isfinite(sq) || std::abs(std::sqrt(sq) - 1.0) > 1e-3) {
            throw ContractError(std::string(who) + ": feature " + std::to_string(i) + " is not L2-normalized");
        }
    }
}

// log sum exp over the selected entries
template <typename Scalar>
Scalar log_sum_exp(const std::vector<Scalar>& z, const std::vector<std::size_t>& idx) {
    Scalar peak = -std::numeric_limits<Scalar>::infinity();
    for (std::size_t j : idx) peak = std::max(peak, z[j]);
    Scalar total = 0;
    for (std::size_t j : idx) total += std::exp(z[j] - peak);
    return peak + std::log(total);
}

}  // namespace

template <typename Scalar>
Scalar memory_augmented_loss(const Matrix<Scalar>& anchors, std::span<const int> labels,
                             const MemoryQueue<Scalar>& memory, const LossConfig& cfg, Matrix<Scalar>* anchor_grad) {
    cfg.validate();
    if (labels.size() != anchors.rows()) throw StructuralError("memory_augmented_loss: label count mismatch");
    if (anchors.rows() > 0 && anchors.cols() != memory.dim()) {
        throw StructuralError("memory_augmented_loss: feature dim mismatch");
    }
    check_unit_rows(anchors, "memory_augmented_loss");
    if (anchor_grad && (anchor_grad->rows() != anchors.rows() || anchor_grad->cols() != anchors.cols())) {
        throw StructuralError("memory_augmented_loss: gradient shape mismatch");
    }

    const std::size_t n = memory.fill();
    const Scalar inv_tau = static_cast<Scalar>(1.0 / cfg.temperature);
    Scalar loss = 0;
    std::vector<Scalar> z(n);
    for (std::size_t i = 0; i < anchors.rows(); ++i) {
        std::vector<std::size_t> positives, denominator;
        for (std::size_t j = 0; j < n; ++j) {
            const bool same = memory.label(j) == labels[i];
            if (same) positives.push_back(j);
            if (!same || cfg.denominator == DenominatorMode::all_but_self) denominator.push_back(j);
        }
        if (positives.empty() || denominator.empty()) continue;

        const auto anchor = anchors.row(i);
        for (std::size_t j = 0; j < n; ++j) z[j] = dot<Scalar>(anchor, memory.feature(j)) * inv_tau;

        const Scalar lse = log_sum_exp(z, denominator);
        Scalar pos_mean = 0;
        for (std::size_t p : positives) pos_mean += z[p];
        const Scalar inv_p = Scalar(1) / static_cast<Scalar>(positives.size());
        pos_mean *= inv_p;
        loss += lse - pos_mean;

        if (anchor_grad) {
            auto g = anchor_grad->row(i);
            for (std::size_t p : positives) {
                const auto m = memory.feature(p);
                for (std::size_t k = 0; k < g.size(); ++k) g[k] -= inv_p * inv_tau * m[k];
            }
            for (std::size_t a : denominator) {
                const Scalar w = std::exp(z[a] - lse) * inv_tau;
                const auto m = memory.feature(a);
                for (std::size_t k = 0; k < g.size(); ++k) g[k] += w * m[k];
            }
        }
    }
    return loss;
}

template <typename Scalar>
Scalar supervised_contrastive_loss(const Matrix<Scalar>& features, std::span<const int> labels, const LossConfig& cfg,
                                   Matrix<Scalar>* grad) {
    cfg.validate();
    const std::size_t n = features.rows();
    if (labels.size() != n) throw StructuralError("supervised_contrastive_loss: label count mismatch");
    check_unit_rows(features, "supervised_contrastive_loss");
    if (grad && (grad->rows() != n || grad->cols() != features.cols())) {
        throw StructuralError("supervised_contrastive_loss: gradient shape mismatch");
    }
    const Scalar inv_tau = static_cast<Scalar>(1.0 / cfg.temperature);
    Scalar loss = 0;
    std::vector<Scalar> z(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<std::size_t> positives, others;
        for (std::size_t j = 0; j < n; ++j) {
            if (j == i) continue;
            others.push_back(j);
            if (labels[j] == labels[i]) positives.push_back(j);
        }
        if (positives.empty()) continue;
        for (std::size_t j : others) z[j] = dot<Scalar>(features.row(i), features.row(j)) * inv_tau;
        const Scalar lse = log_sum_exp(z, others);
        const Scalar inv_p = Scalar(1) / static_cast<Scalar>(positives.size());
        Scalar pos_mean = 0;
        for (std::size_t p : positives) pos_mean += z[p];
        loss += lse - pos_mean * inv_p;

        if (grad) {
            // dL_i/dz_ij = softmax_j - [j positive]/|P|, z_ij = f_i . f_j / tau
            std::vector<Scalar> dz(n, Scalar(0));
            for (std::size_t j : others) dz[j] = std::exp(z[j] - lse);
            for (std::size_t p : positives) dz[p] -= inv_p;
            auto gi = grad->row(i);
            const auto fi = features.row(i);
            for (std::size_t j : others) {
                const Scalar c = dz[j] * inv_tau;
                if (c == Scalar(0)) continue;
                const auto fj = features.row(j);
                auto gj = grad->row(j);
                for (std::size_t k = 0; k < gi.size(); ++k) {
                    gi[k] += c * fj[k];
                    gj[k] += c * fi[k];
                }
            }
        }
    }
    return loss;
}

#define LMAN_INSTANTIATE_LOSSES(S)                                                                               \
    template S cross_entropy<S>(std::span<const S>, int);                                                        \
    template std::vector<S> cross_entropy_logits_grad<S>(std::span<const S>, int);                               \
    template S memory_augmented_loss<S>(const Matrix<S>&, std::span<const int>, const MemoryQueue<S>&,           \
                                        const LossConfig&, Matrix<S>*);                                          \
    template S supervised_contrastive_loss<S>(const Matrix<S>&, std::span<const int>, const LossConfig&, Matrix<S>*);

LMAN_INSTANTIATE_LOSSES(float)
LMAN_INSTANTIATE_LOSSES(double)

}  // namespace lman
