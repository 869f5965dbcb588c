#include "lman/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>

#include <boost/math/distributions/students_t.hpp>
#include <zlib.h>

#include "lman/error.hpp"

namespace lman {

ConfusionMatrix::ConfusionMatrix(std::size_t num_classes)
    : counts_(num_classes, std::vector<std::size_t>(num_classes, 0)) {}

void ConfusionMatrix::add(std::size_t truth, std::size_t predicted) {
    if (truth >= counts_.size() || predicted >= counts_.size()) {
        throw StructuralError("confusion matrix: class index out of range");
    }
    ++counts_[truth][predicted];
}

std::size_t ConfusionMatrix::row_total(std::size_t truth) const {
    const auto& row = counts_.at(truth);
    return std::accumulate(row.begin(), row.end(), std::size_t{0});
}

std::size_t ConfusionMatrix::total() const {
    std::size_t n = 0;
    for (std::size_t r = 0; r < counts_.size(); ++r) n += row_total(r);
    return n;
}

std::size_t ConfusionMatrix::correct() const {
    std::size_t n = 0;
    for (std::size_t r = 0; r < counts_.size(); ++r) n += counts_[r][r];
    return n;
}

double ConfusionMatrix::accuracy() const {
    const std::size_t n = total();
    return n == 0 ? 0.0 : static_cast<double>(correct()) / static_cast<double>(n);
}

std::vector<std::vector<double>> ConfusionMatrix::normalized() const {
    std::vector<std::vector<double>> out(counts_.size(), std::vector<double>(counts_.size(), 0.0));
    for (std::size_t r = 0; r < counts_.size(); ++r) {
        const std::size_t n = row_total(r);
        if (n == 0) continue;
        for (std::size_t c = 0; c < counts_.size(); ++c) {
            out[r][c] = static_cast<double>(counts_[r][c]) / static_cast<double>(n);
        }
    }
    return out;
}

std::vector<std::optional<double>> ConfusionMatrix::recall() const {
    std::vector<std::optional<double>> out(counts_.size());
    for (std::size_t r = 0; r < counts_.size(); ++r) {
        const std::size_t n = row_total(r);
        if (n > 0) out[r] = static_cast<double>(counts_[r][r]) / static_cast<double>(n);
    }
    return out;
}

Evaluation evaluate_predictions(std::span<const std::size_t> predicted, std::span<const int> truth,
                                std::size_t num_classes) {
    if (predicted.size() != truth.size()) throw StructuralError("evaluate: prediction and label counts differ");
    if (truth.empty()) throw ConfigError("evaluate: empty test set");
    Evaluation e;
    e.confusion = ConfusionMatrix(num_classes);
    for (std::size_t i = 0; i < truth.size(); ++i) {
        if (truth[i] < 0) throw StructuralError("evaluate: negative label");
        e.confusion.add(static_cast<std::size_t>(truth[i]), predicted[i]);
    }
    e.accuracy = e.confusion.accuracy();
    e.recall = e.confusion.recall();
    e.predictions.assign(predicted.begin(), predicted.end());
    return e;
}

template <typename Scalar>
Evaluation evaluate(const FrozenModel<Scalar>& model, const std::vector<ShortTermSample>& test) {
    if (test.empty()) throw ConfigError("evaluate: empty test set");
    std::vector<std::size_t> predicted;
    std::vector<int> truth;
    predicted.reserve(test.size());
    truth.reserve(test.size());
    for (const auto& s : test) {
        predicted.push_back(predict(model, s.data).label);
        truth.push_back(s.label);
    }
    return evaluate_predictions(predicted, truth, model.decoder.num_classes());
}

template Evaluation evaluate<float>(const FrozenModel<float>&, const std::vector<ShortTermSample>&);
template Evaluation evaluate<double>(const FrozenModel<double>&, const std::vector<ShortTermSample>&);

void write_csv_row(std::ostream& out, const std::vector<std::string>& fields) {
    for (std::size_t i = 0; i < fields.size(); ++i) {
        if (i) out << ',';
        const std::string& f = fields[i];
        if (f.find_first_of(",\"\r\n") == std::string::npos) {
            out << f;
            continue;
        }
        out << '"';
        for (char ch : f) {
            if (ch == '"') out << '"';
            out << ch;
        }
        out << '"';
    }
    out << "\r\n";
}

namespace {

std::string number(double v) {
    std::ostringstream s;
    s.precision(17);
    s << v;
    return s.str();
}

double mean_of(const std::vector<double>& v) {
    return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

std::string label_name(const LabelMap& labels, std::size_t k) {
    return k < labels.size() ? labels.name(k) : "class_" + std::to_string(k);
}

}  // namespace

void write_confusion_csv(std::ostream& out, const ConfusionMatrix& confusion, const LabelMap& labels) {
    const std::size_t n = confusion.num_classes();
    std::vector<std::string> header{"true\\predicted"};
    for (std::size_t c = 0; c < n; ++c) header.push_back(label_name(labels, c));
    header.push_back("recall");
    write_csv_row(out, header);
    const auto recall = confusion.recall();
    const auto norm = confusion.normalized();
    for (std::size_t r = 0; r < n; ++r) {
        std::vector<std::string> row{label_name(labels, r)};
        for (std::size_t c = 0; c < n; ++c) row.push_back(number(norm[r][c]));
        row.push_back(recall[r] ? number(*recall[r]) : "undefined");
        write_csv_row(out, row);
    }
}

// ---------------------------------------------------------------------------

std::string config_hash_modulo_flags(const TrainConfig& config) {
    auto j = config.to_json();
    j.erase("use_recall");
    j.erase("use_mal");
    const std::string text = j.dump();
    const auto crc = crc32(0L, reinterpret_cast<const Bytef*>(text.data()), static_cast<uInt>(text.size()));
    char buf[9];
    std::snprintf(buf, sizeof buf, "%08lx", static_cast<unsigned long>(crc));
    return buf;
}

namespace {

double final_test_accuracy(const TrainResult& r, const PreparedData& data) {
    if (!r.history.empty()) return r.history.back().test_accuracy;
    return accuracy(freeze(r.state), data.test);
}

}  // namespace

AblationResult run_ablation(const TrainConfig& config, const PreparedData& data, std::span<const std::uint64_t> seeds,
                            const RunObserver& observer) {
    if (seeds.empty()) throw ConfigError("ablation: at least one seed is required");
    AblationResult result;
    result.seeds.assign(seeds.begin(), seeds.end());
    result.cells = {{"baseline", false, false, {}, 0, 0},
                    {"+LMAN", true, false, {}, 0, 0},
                    {"+MAL", false, true, {}, 0, 0},
                    {"full", true, true, {}, 0, 0}};
    for (auto& cell : result.cells) {
        for (const auto seed : seeds) {
            TrainConfig run = config;
            run.use_recall = cell.use_recall;
            run.use_mal = cell.use_mal;
            run.seed = seed;
            const TrainResult trained = train(run, data);
            cell.accuracies.push_back(final_test_accuracy(trained, data));
            if (observer) observer(cell.name, seed, trained);
        }
        cell.mean = mean_of(cell.accuracies);
    }
    for (auto& cell : result.cells) cell.delta = cell.mean - result.cells.front().mean;
    return result;
}

std::string format_ablation_table(const AblationResult& result) {
    std::ostringstream out;
    out << "setting    recall mal  mean_acc  delta    per_seed\n";
    for (const auto& cell : result.cells) {
        char line[128];
        std::snprintf(line, sizeof line, "%-10s %-6s %-4s %7.2f%% %+6.2f   ", cell.name.c_str(),
                      cell.use_recall ? "yes" : "no", cell.use_mal ? "yes" : "no", 100 * cell.mean,
                      100 * cell.delta);
        out << line;
        for (std::size_t k = 0; k < cell.accuracies.size(); ++k) {
            std::snprintf(line, sizeof line, "%s%.2f", k ? " " : "", 100 * cell.accuracies[k]);
            out << line;
        }
        out << '\n';
    }
    return out.str();
}

TTest students_t_test(std::span<const double> a, std::span<const double> b) {
    if (a.size() < 2 || b.size() < 2) throw ConfigError("t-test: need at least two values per group");
    auto moments = [](std::span<const double> x) {
        const double m = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
        double ss = 0;
        for (double v : x) ss += (v - m) * (v - m);
        return std::pair{m, ss};
    };
    const auto [ma, ssa] = moments(a);
    const auto [mb, ssb] = moments(b);
    const double na = static_cast<double>(a.size());
    const double nb = static_cast<double>(b.size());
    TTest r;
    r.df = na + nb - 2;
    const double pooled = (ssa + ssb) / r.df;
    const double se = std::sqrt(pooled * (1 / na + 1 / nb));
    if (se == 0) {
        // identical constant groups are indistinguishable; distinct constants are infinitely separated
        r.t = ma == mb ? 0.0 : std::copysign(std::numeric_limits<double>::infinity(), ma - mb);
        r.p = ma == mb ? 1.0 : 0.0;
        return r;
    }
    r.t = (ma - mb) / se;
    const boost::math::students_t dist(r.df);
    r.p = 2 * boost::math::cdf(boost::math::complement(dist, std::abs(r.t)));
    return r;
}

LossComparison compare_losses(const TrainConfig& config, const PreparedData& data,
                              std::span<const std::uint64_t> seeds, const RunObserver& observer) {
    if (seeds.empty()) throw ConfigError("compare-losses: at least one seed is required");
    LossComparison result;
    result.seeds.assign(seeds.begin(), seeds.end());
    for (const auto seed : seeds) {
        for (const auto aux : {AuxiliaryLoss::mal, AuxiliaryLoss::scl}) {
            TrainConfig run = config;
            run.use_mal = true;
            run.auxiliary = aux;
            run.seed = seed;
            const TrainResult trained = train(run, data);
            (aux == AuxiliaryLoss::mal ? result.mal : result.scl).push_back(final_test_accuracy(trained, data));
            if (observer) observer(to_string(aux), seed, trained);
        }
    }
    result.mal_mean = mean_of(result.mal);
    result.scl_mean = mean_of(result.scl);
    if (seeds.size() >= 2) result.test = students_t_test(result.mal, result.scl);
    return result;
}

std::string format_loss_table(const LossComparison& result) {
    std::ostringstream out;
    out << "loss  mean_acc  per_seed\n";
    auto row = [&out](const char* name, double mean, const std::vector<double>& accs) {
        char line[96];
        std::snprintf(line, sizeof line, "%-5s %7.2f%%  ", name, 100 * mean);
        out << line;
        for (std::size_t k = 0; k < accs.size(); ++k) {
            std::snprintf(line, sizeof line, "%s%.2f", k ? " " : "", 100 * accs[k]);
            out << line;
        }
        out << '\n';
    };
    row("MAL", result.mal_mean, result.mal);
    row("SCL", result.scl_mean, result.scl);
    if (result.test) {
        char line[128];
        std::snprintf(line, sizeof line, "t-test: t=%.4f df=%.0f p=%.4g (two-tailed, equal variance)\n",
                      result.test->t, result.test->df, result.test->p);
        out << line;
    } else {
        out << "t-test: needs at least two seeds\n";
    }
    return out.str();
}

// ---------------------------------------------------------------------------

template <typename Scalar>
AddressingExport export_addressing(const FrozenModel<Scalar>& model, const std::vector<ShortTermSample>& samples,
                                   std::size_t n_slots, std::size_t n_samples, std::uint64_t seed) {
    const std::size_t fill = model.memory.fill();
    if (n_slots == 0 || n_samples == 0) throw ConfigError("export-addressing: slot and sample counts must be positive");
    if (fill < n_slots) {
        throw ConfigError("export-addressing: memory holds " + std::to_string(fill) + " features, fewer than the " +
                          std::to_string(n_slots) + " requested slots");
    }
    if (samples.size() < n_samples) {
        throw ConfigError("export-addressing: only " + std::to_string(samples.size()) + " samples available, " +
                          std::to_string(n_samples) + " requested");
    }
    std::mt19937_64 rng(seed);
    auto pick = [&rng](std::size_t population, std::size_t n) {
        std::vector<std::size_t> idx(population);
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        std::shuffle(idx.begin(), idx.end(), rng);
        idx.resize(n);
        return idx;
    };

    AddressingExport out;
    out.slots = pick(fill, n_slots);
    out.samples = pick(samples.size(), n_samples);
    std::stable_sort(out.slots.begin(), out.slots.end(), [&](std::size_t a, std::size_t b) {
        const int la = model.memory.label(a), lb = model.memory.label(b);
        return la != lb ? la < lb : a < b;
    });
    std::stable_sort(out.samples.begin(), out.samples.end(), [&](std::size_t a, std::size_t b) {
        return samples[a].label != samples[b].label ? samples[a].label < samples[b].label : a < b;
    });
    for (auto s : out.slots) out.slot_labels.push_back(model.memory.label(s));
    for (auto s : out.samples) out.sample_labels.push_back(samples[s].label);

    out.weights = Matrix<double>(n_slots, n_samples);
    double same = 0, diff = 0;
    std::size_t n_same = 0, n_diff = 0;
    for (std::size_t j = 0; j < n_samples; ++j) {
        const auto& x = samples[out.samples[j]].data;
        const auto feature = encode(model.encoder, model.input.apply(x));
        const auto a = address<Scalar>(model.memory, feature);
        for (std::size_t i = 0; i < n_slots; ++i) {
            const double w = static_cast<double>(a[out.slots[i]]);
            out.weights(i, j) = w;
            if (out.slot_labels[i] == out.sample_labels[j]) {
                same += w;
                ++n_same;
            } else {
                diff += w;
                ++n_diff;
            }
        }
    }
    out.same_class_mass = n_same ? same / static_cast<double>(n_same) : 0.0;
    out.different_class_mass = n_diff ? diff / static_cast<double>(n_diff) : 0.0;
    return out;
}

template AddressingExport export_addressing<float>(const FrozenModel<float>&, const std::vector<ShortTermSample>&,
                                                   std::size_t, std::size_t, std::uint64_t);
template AddressingExport export_addressing<double>(const FrozenModel<double>&, const std::vector<ShortTermSample>&,
                                                    std::size_t, std::size_t, std::uint64_t);

void write_addressing_csv(std::ostream& out, const AddressingExport& e, const LabelMap& labels) {
    std::vector<std::string> header{"slot", "slot_label"};
    for (std::size_t j = 0; j < e.samples.size(); ++j) {
        header.push_back("sample_" + std::to_string(e.samples[j]) + ":" +
                         label_name(labels, static_cast<std::size_t>(e.sample_labels[j])));
    }
    write_csv_row(out, header);
    for (std::size_t i = 0; i < e.slots.size(); ++i) {
        std::vector<std::string> row{std::to_string(e.slots[i]),
                                     label_name(labels, static_cast<std::size_t>(e.slot_labels[i]))};
        for (std::size_t j = 0; j < e.samples.size(); ++j) row.push_back(number(e.weights(i, j)));
        write_csv_row(out, row);
    }
}

}  // namespace lman
