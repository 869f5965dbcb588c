#pragma once

#include <span>
#include <string>
#include <vector>

#include "lman/memory.hpp"
#include "lman/tensor.hpp"

namespace lman {

enum class DenominatorMode {
    negatives_only,  // only slots of other classes, as in the memory augmented loss
    all_but_self,    // every slot (memory has no "self" entry), SupCon style
};

std::string to_string(DenominatorMode mode);
DenominatorMode parse_denominator_mode(const std::string& text);

struct LossConfig {
    double temperature = 0.07;
    double mal_weight = 1.0;
    DenominatorMode denominator = DenominatorMode::negatives_only;

    void validate() const;
    bool operator==(const LossConfig&) const = default;
};

inline constexpr double kProbabilityFloor = 1e-12;

/// -log(max(probs[label], 1e-12)).
template <typename Scalar>
Scalar cross_entropy(std::span<const Scalar> probs, int label);

/// Gradient of cross_entropy(softmax(logits), label) with respect to the logits.
template <typename Scalar>
std::vector<Scalar> cross_entropy_logits_grad(std::span<const Scalar> probs, int label);

/// Memory augmented loss, summed over anchors. Positives are slots sharing the
/// anchor's label; the denominator runs over slots of other labels (or all
/// slots in all_but_self mode). Anchors without positives, or without any
/// denominator term, contribute zero. Gradients are written for anchors only.
template <typename Scalar>
Scalar memory_augmented_loss(const Matrix<Scalar>& anchors, std::span<const int> labels,
                             const MemoryQueue<Scalar>& memory, const LossConfig& cfg,
                             Matrix<Scalar>* anchor_grad = nullptr);

/// Supervised contrastive loss over a multiview batch, summed over anchors.
/// Positives are other members with the same label, the denominator is every
/// member except the anchor.
template <typename Scalar>
Scalar supervised_contrastive_loss(const Matrix<Scalar>& features, std::span<const int> labels, const LossConfig& cfg,
                                   Matrix<Scalar>* grad = nullptr);

/// ce + mal_weight * aux
double total_loss(double ce, double aux, const LossConfig& cfg);

}  // namespace lman
