#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lman/inference.hpp"
#include "lman/tensor.hpp"
#include "lman/training.hpp"

namespace lman {

/// Counts indexed [true class][predicted class].
class ConfusionMatrix {
public:
    ConfusionMatrix() = default;
    explicit ConfusionMatrix(std::size_t num_classes);

    void add(std::size_t truth, std::size_t predicted);

    std::size_t num_classes() const noexcept { return counts_.size(); }
    std::size_t count(std::size_t truth, std::size_t predicted) const { return counts_.at(truth).at(predicted); }
    std::size_t row_total(std::size_t truth) const;
    std::size_t total() const;
    std::size_t correct() const;
    double accuracy() const;

    /// Each non-empty row divided by its sum; empty rows stay zero.
    std::vector<std::vector<double>> normalized() const;
    /// Diagonal of the normalized view; nullopt for classes absent from the test set.
    std::vector<std::optional<double>> recall() const;

    const std::vector<std::vector<std::size_t>>& counts() const noexcept { return counts_; }

private:
    std::vector<std::vector<std::size_t>> counts_;
};

struct Evaluation {
    double accuracy = 0;
    ConfusionMatrix confusion;
    std::vector<std::optional<double>> recall;
    std::vector<std::size_t> predictions;
};

Evaluation evaluate_predictions(std::span<const std::size_t> predicted, std::span<const int> truth,
                                std::size_t num_classes);

/// Throws ConfigError on an empty test set.
template <typename Scalar>
Evaluation evaluate(const FrozenModel<Scalar>& model, const std::vector<ShortTermSample>& test);

/// RFC-4180 row: fields containing a comma, quote or line break are quoted.
void write_csv_row(std::ostream& out, const std::vector<std::string>& fields);
void write_confusion_csv(std::ostream& out, const ConfusionMatrix& confusion, const LabelMap& labels);

// ---------------------------------------------------------------------------
// Ablation grid

struct AblationCell {
    std::string name;  // baseline, +LMAN, +MAL, full
    bool use_recall = false;
    bool use_mal = false;
    std::vector<double> accuracies;  // one per seed
    double mean = 0;
    double delta = 0;  // mean - baseline mean
};

struct AblationResult {
    std::vector<std::uint64_t> seeds;
    std::vector<AblationCell> cells;
};

/// Digest of a config with use_recall/use_mal cleared; equal across the grid.
std::string config_hash_modulo_flags(const TrainConfig& config);

/// Per-run hook: cell name, seed, finished training result.
using RunObserver = std::function<void(const std::string&, std::uint64_t, const TrainResult&)>;

AblationResult run_ablation(const TrainConfig& config, const PreparedData& data, std::span<const std::uint64_t> seeds,
                            const RunObserver& observer = {});
std::string format_ablation_table(const AblationResult& result);

// ---------------------------------------------------------------------------
// MAL vs SCL

struct TTest {
    double t = 0;
    double df = 0;
    double p = 1;
};

/// Two-sample, equal-variance, two-tailed. Needs at least two values per side.
TTest students_t_test(std::span<const double> a, std::span<const double> b);

struct LossComparison {
    std::vector<std::uint64_t> seeds;
    std::vector<double> mal;
    std::vector<double> scl;
    double mal_mean = 0;
    double scl_mean = 0;
    std::optional<TTest> test;
};

LossComparison compare_losses(const TrainConfig& config, const PreparedData& data,
                              std::span<const std::uint64_t> seeds, const RunObserver& observer = {});
std::string format_loss_table(const LossComparison& result);

// ---------------------------------------------------------------------------
// Addressing export

struct AddressingExport {
    std::vector<std::size_t> slots;  // physical slot indices, sorted by slot label
    std::vector<int> slot_labels;
    std::vector<std::size_t> samples;  // indices into the sample list, sorted by label
    std::vector<int> sample_labels;
    Matrix<double> weights;  // [slots x samples]; entry (i, j) = address of sample j on slot i
    double same_class_mass = 0;
    double different_class_mass = 0;
};

/// Random n_slots of the filled slots and n_samples samples, both sorted by label.
/// Throws ConfigError when the memory holds fewer than n_slots entries.
template <typename Scalar>
AddressingExport export_addressing(const FrozenModel<Scalar>& model, const std::vector<ShortTermSample>& samples,
                                   std::size_t n_slots, std::size_t n_samples, std::uint64_t seed);

void write_addressing_csv(std::ostream& out, const AddressingExport& exported, const LabelMap& labels);

}  // namespace lman
