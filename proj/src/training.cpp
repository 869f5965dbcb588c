#include "lman/training.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include <zlib.h>

#include "lman/error.hpp"

namespace lman {

std::string to_string(AuxiliaryLoss loss) { return loss == AuxiliaryLoss::mal ? "mal" : "scl"; }

AuxiliaryLoss parse_auxiliary_loss(const std::string& text) {
    if (text == "mal") return AuxiliaryLoss::mal;
    if (text == "scl") return AuxiliaryLoss::scl;
    throw ConfigError("unknown aux_loss '" + text + "' (expected mal or scl)");
}

// ---------------------------------------------------------------------------
// TrainConfig

TrainConfig TrainConfig::reference_defaults() { return TrainConfig{}; }

TrainConfig TrainConfig::desk_profile() {
    TrainConfig c;
    c.memory_slots = 512;
    c.encoder.feature_dim = 32;
    c.encoder.width = 16;
    c.batch_size = 16;
    c.epochs = 30;
    c.learning_rate = 0.05;
    c.loss.mal_weight = 0.01;        // MAL is summed over anchors; CE is a batch mean
    c.center = true;                 // synthetic subjects stand at different spots in the room
    return c;
}

TrainConfig TrainConfig::from(const KeyValueConfig& kv) {
    const std::string profile = kv.get_string("profile", "reference");
    TrainConfig c;
    if (profile == "desk") {
        c = desk_profile();
    } else if (profile != "reference") {
        throw ConfigError("unknown profile '" + profile + "' (expected reference or desk)");
    }
    auto size = [&kv](const std::string& key, std::size_t fallback) {
        const long long v = kv.get_int(key, static_cast<long long>(fallback));
        if (v < 0) throw ConfigError("key '" + key + "' must be non-negative");
        return static_cast<std::size_t>(v);
    };
    c.window = size("T", c.window);
    c.scale = size("S", c.scale);
    c.stride = size("stride", c.stride);
    c.eval_stride = size("eval_stride", c.eval_stride);
    c.memory_slots = size("K", c.memory_slots);
    c.encoder.feature_dim = size("c", c.encoder.feature_dim);
    c.encoder.width = size("width", c.encoder.width);
    c.encoder.blocks = size("blocks", c.encoder.blocks);
    c.encoder.kernel = size("kernel", c.encoder.kernel);
    c.momentum = kv.get_double("v", c.momentum);
    c.learning_rate = kv.get_double("lr", c.learning_rate);
    c.weight_decay = kv.get_double("weight_decay", c.weight_decay);
    c.optimizer_momentum = kv.get_double("optimizer_momentum", c.optimizer_momentum);
    c.batch_size = size("batch", c.batch_size);
    c.epochs = size("epochs", c.epochs);
    c.seed = static_cast<std::uint64_t>(size("seed", static_cast<std::size_t>(c.seed)));
    c.use_recall = kv.get_bool("use_recall", c.use_recall);
    c.use_mal = kv.get_bool("use_mal", c.use_mal);
    c.auxiliary = parse_auxiliary_loss(kv.get_string("aux_loss", to_string(c.auxiliary)));
    c.loss.temperature = kv.get_double("tau", c.loss.temperature);
    c.loss.mal_weight = kv.get_double("mal_weight", c.loss.mal_weight);
    c.loss.denominator = parse_denominator_mode(kv.get_string("denominator_mode", to_string(c.loss.denominator)));
    c.purity_required = kv.get_bool("purity_required", c.purity_required);
    c.center = kv.get_bool("center", c.center);
    c.standardize = kv.get_bool("standardize", c.standardize);
    c.scl_jitter = kv.get_double("scl_jitter", c.scl_jitter);
    c.scl_min_crop = kv.get_double("scl_min_crop", c.scl_min_crop);
    c.validate();
    return c;
}

void TrainConfig::validate() const {
    encoder.validate();
    loss.validate();
    if (window < encoder.kernel) throw ConfigError("T must be at least the temporal kernel width");
    if (scale == 0) throw ConfigError("S must be positive");
    if (stride == 0) throw ConfigError("stride must be positive");
    if (batch_size == 0) throw ConfigError("batch must be positive");
    if (memory_slots == 0) throw ConfigError("K must be positive");
    if (memory_slots < batch_size) {
        throw ConfigError("K (" + std::to_string(memory_slots) + ") is smaller than the batch size (" +
                          std::to_string(batch_size) + "); a batch would evict its own features");
    }
    if (!(momentum >= 0 && momentum < 1)) throw ConfigError("v must lie in [0, 1)");
    if (!(learning_rate > 0)) throw ConfigError("lr must be positive");
    if (!(weight_decay >= 0)) throw ConfigError("weight_decay must be non-negative");
    if (!(optimizer_momentum >= 0 && optimizer_momentum < 1)) throw ConfigError("optimizer_momentum must lie in [0, 1)");
    if (!(scl_jitter >= 0)) throw ConfigError("scl_jitter must be non-negative");
    if (!(scl_min_crop > 0 && scl_min_crop <= 1)) throw ConfigError("scl_min_crop must lie in (0, 1]");
}

nlohmann::json TrainConfig::to_json() const {
    return nlohmann::json{
        {"T", window},
        {"S", scale},
        {"stride", stride},
        {"eval_stride", eval_stride},
        {"K", memory_slots},
        {"c", encoder.feature_dim},
        {"width", encoder.width},
        {"blocks", encoder.blocks},
        {"kernel", encoder.kernel},
        {"num_classes", encoder.num_classes},
        {"v", momentum},
        {"lr", learning_rate},
        {"weight_decay", weight_decay},
        {"optimizer_momentum", optimizer_momentum},
        {"batch", batch_size},
        {"epochs", epochs},
        {"seed", seed},
        {"use_recall", use_recall},
        {"use_mal", use_mal},
        {"aux_loss", to_string(auxiliary)},
        {"tau", loss.temperature},
        {"mal_weight", loss.mal_weight},
        {"denominator_mode", to_string(loss.denominator)},
        {"purity_required", purity_required},
        {"center", center},
        {"standardize", standardize},
        {"scl_jitter", scl_jitter},
        {"scl_min_crop", scl_min_crop},
    };
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
    try {
        TrainConfig c;
        c.window = j.at("T").get<std::size_t>();
        c.scale = j.at("S").get<std::size_t>();
        c.stride = j.at("stride").get<std::size_t>();
        c.eval_stride = j.at("eval_stride").get<std::size_t>();
        c.memory_slots = j.at("K").get<std::size_t>();
        c.encoder.feature_dim = j.at("c").get<std::size_t>();
        c.encoder.width = j.at("width").get<std::size_t>();
        c.encoder.blocks = j.at("blocks").get<std::size_t>();
        c.encoder.kernel = j.at("kernel").get<std::size_t>();
        c.encoder.num_classes = j.at("num_classes").get<std::size_t>();
        c.momentum = j.at("v").get<double>();
        c.learning_rate = j.at("lr").get<double>();
        c.weight_decay = j.at("weight_decay").get<double>();
        c.optimizer_momentum = j.at("optimizer_momentum").get<double>();
        c.batch_size = j.at("batch").get<std::size_t>();
        c.epochs = j.at("epochs").get<std::size_t>();
        c.seed = j.at("seed").get<std::uint64_t>();
        c.use_recall = j.at("use_recall").get<bool>();
        c.use_mal = j.at("use_mal").get<bool>();
        c.auxiliary = parse_auxiliary_loss(j.at("aux_loss").get<std::string>());
        c.loss.temperature = j.at("tau").get<double>();
        c.loss.mal_weight = j.at("mal_weight").get<double>();
        c.loss.denominator = parse_denominator_mode(j.at("denominator_mode").get<std::string>());
        c.purity_required = j.at("purity_required").get<bool>();
        c.center = j.at("center").get<bool>();
        c.standardize = j.at("standardize").get<bool>();
        c.scl_jitter = j.at("scl_jitter").get<double>();
        c.scl_min_crop = j.at("scl_min_crop").get<double>();
        c.validate();
        return c;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("train config: ") + e.what());
    }
}

// ---------------------------------------------------------------------------
// Data preparation

SplitSpec resolve_split(const RecordingSet& data, const std::vector<std::string>& train_subjects,
                        const std::vector<std::string>& test_subjects) {
    const auto all = data.subjects();
    SplitSpec spec;
    spec.train_subjects.insert(train_subjects.begin(), train_subjects.end());
    spec.test_subjects.insert(test_subjects.begin(), test_subjects.end());
    for (const auto& s : spec.train_subjects) {
        if (spec.test_subjects.contains(s)) throw ConfigError("subject '" + s + "' is in both train and test sets");
    }
    if (spec.train_subjects.empty() && spec.test_subjects.empty()) {
        const std::vector<std::string> sorted(all.begin(), all.end());
        const std::size_t held = std::max<std::size_t>(1, (sorted.size() * 7 + 12) / 25);
        for (std::size_t k = 0; k < sorted.size(); ++k) {
            (k + held >= sorted.size() ? spec.test_subjects : spec.train_subjects).insert(sorted[k]);
        }
    } else if (spec.train_subjects.empty()) {
        for (const auto& s : all) {
            if (!spec.test_subjects.contains(s)) spec.train_subjects.insert(s);
        }
    } else if (spec.test_subjects.empty()) {
        for (const auto& s : all) {
            if (!spec.train_subjects.contains(s)) spec.test_subjects.insert(s);
        }
    }
    for (const auto& s : all) {
        if (!spec.train_subjects.contains(s) && !spec.test_subjects.contains(s)) {
            throw ConfigError("subject '" + s + "' is in neither train nor test set");
        }
    }
    return spec;
}

PreparedData prepare_data(const RecordingSet& data, const SplitSpec& split, const TrainConfig& config) {
    config.validate();
    for (const auto& s : split.train_subjects) {
        if (split.test_subjects.contains(s)) throw ConfigError("subject '" + s + "' is in both train and test sets");
    }
    PreparedData out;
    out.labels = data.labels;
    for (const auto& rec : data.recordings) {
        if (split.train_subjects.contains(rec.subject_id)) {
            const auto samples = split_windows(rec, config.window, config.stride);
            for (std::size_t i = 0; i < samples.size(); ++i) {
                auto long_term = build_long_term(samples, rec, i, config.scale, config.purity_required);
                if (!long_term) {
                    ++out.dropped_without_long;
                    continue;
                }
                out.train_short.push_back(samples[i]);
                out.train_long.push_back(std::move(*long_term));
            }
        } else if (split.test_subjects.contains(rec.subject_id)) {
            auto samples = split_windows(rec, config.window, config.effective_eval_stride());
            std::move(samples.begin(), samples.end(), std::back_inserter(out.test));
        } else {
            throw ConfigError("subject '" + rec.subject_id + "' is in neither train nor test set");
        }
    }
    return out;
}

InputNormalization fit_input_normalization(const PreparedData& data, const TrainConfig& config) {
    return config.standardize ? InputNormalization::fit(data.train_short, config.center)
                              : InputNormalization::identity(config.center);
}

SkeletonSequence augment_view(const SkeletonSequence& x, double jitter, double min_crop, std::mt19937_64& rng) {
    const std::size_t T = x.frames();
    const auto shortest = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::ceil(min_crop * static_cast<double>(T))));
    const std::size_t length = std::uniform_int_distribution<std::size_t>(std::min(shortest, T), T)(rng);
    const std::size_t start = std::uniform_int_distribution<std::size_t>(0, T - length)(rng);
    SkeletonSequence out(T);
    std::normal_distribution<double> noise(0.0, jitter);
    for (std::size_t t = 0; t < T; ++t) {
        const std::size_t src = start + std::min(t, length - 1);  // pad by repeating the last cropped frame
        for (std::size_t c = 0; c < kChannels; ++c) {
            for (std::size_t v = 0; v < kJoints; ++v) {
                out.at(c, t, v) = x.at(c, src, v) + (jitter > 0 ? noise(rng) : 0.0);
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// State

template <typename Scalar>
TrainState<Scalar> TrainState<Scalar>::initial(const TrainConfig& config, const LabelMap& labels) {
    TrainState s;
    s.config = config;
    if (labels.size() == 0) throw ConfigError("training needs a non-empty label map");
    s.config.encoder.num_classes = labels.size();
    s.config.validate();
    s.labels = labels;
    auto models = init_encoders<Scalar>(s.config.encoder, s.config.seed);
    s.short_encoder = std::move(models.short_term);
    s.long_encoder = std::move(models.long_term);
    s.decoder = std::move(models.decoder);
    s.memory = MemoryQueue<Scalar>(s.config.memory_slots, s.config.encoder.feature_dim);
    s.encoder_velocity = zeros_like(s.short_encoder.tensors);
    s.decoder_velocity = zeros_like(s.decoder.tensors);
    s.input = InputNormalization::identity(s.config.center);
    s.rng.seed(s.config.seed ^ 0x9e3779b97f4a7c15ULL);
    return s;
}

template <typename Scalar>
TrainState<Scalar> TrainState<Scalar>::initial(const TrainConfig& config, const PreparedData& data) {
    TrainState s = initial(config, data.labels);
    s.input = fit_input_normalization(data, s.config);
    return s;
}

template <typename Scalar>
StepGradients<Scalar> StepGradients<Scalar>::zeros_for(const TrainState<Scalar>& state) {
    return StepGradients{zeros_like(state.short_encoder.tensors), zeros_like(state.decoder.tensors),
                         zeros_like(state.long_encoder.tensors),
                         std::vector<Scalar>(state.memory.capacity() * state.memory.dim(), Scalar(0))};
}

// ---------------------------------------------------------------------------
// Step

template <typename Scalar>
StepMetrics compute_step(TrainState<Scalar>& state, const std::vector<BatchItem>& batch,
                         std::type_identity_t<StepGradients<Scalar>>* grads) {
    const TrainConfig& cfg = state.config;
    const std::size_t B = batch.size();
    const std::size_t c = cfg.encoder.feature_dim;
    StepMetrics metrics;
    metrics.count = B;
    if (B == 0) return metrics;

    std::vector<EncoderTrace<Scalar>> traces(grads ? B : 0);
    std::vector<SkeletonSequence> inputs(B);
    Matrix<Scalar> short_features(B, c);
    std::vector<std::vector<Scalar>> weights(B), fused(B), probs(B);
    std::vector<int> labels(B);

    for (std::size_t i = 0; i < B; ++i) {
        const ShortTermSample& sample = *batch[i].short_sample;
        labels[i] = sample.label;
        inputs[i] = state.input.apply(sample.data);
        const auto f = encode(state.short_encoder, inputs[i], grads ? &traces[i] : nullptr);
        std::copy(f.begin(), f.end(), short_features.row(i).begin());
        if (cfg.use_recall) {
            const auto rec = recall_for_query<Scalar>(state.memory, f, &weights[i]);
            fused[i] = fuse<Scalar>(f, rec);
        } else {
            fused[i] = f;
        }
        probs[i] = classify<Scalar>(state.decoder, fused[i]);
        metrics.ce += static_cast<double>(cross_entropy<Scalar>(probs[i], sample.label));
        if (argmax<Scalar>(probs[i]) == static_cast<std::size_t>(sample.label)) ++metrics.correct;
    }
    metrics.ce /= static_cast<double>(B);

    const Scalar aux_weight = static_cast<Scalar>(cfg.loss.mal_weight);
    Matrix<Scalar> aux_grad;
    Matrix<Scalar> views;
    std::vector<EncoderTrace<Scalar>> view_traces;
    if (cfg.use_mal && cfg.auxiliary == AuxiliaryLoss::mal) {
        if (grads) aux_grad = Matrix<Scalar>(B, c);
        metrics.aux = static_cast<double>(
            memory_augmented_loss(short_features, labels, state.memory, cfg.loss, grads ? &aux_grad : nullptr));
    } else if (cfg.use_mal && cfg.auxiliary == AuxiliaryLoss::scl) {
        views = Matrix<Scalar>(2 * B, c);
        std::vector<int> view_labels(2 * B);
        view_traces.resize(grads ? 2 * B : 0);
        for (std::size_t k = 0; k < 2 * B; ++k) {
            const auto x = augment_view(inputs[k / 2], cfg.scl_jitter, cfg.scl_min_crop, state.rng);
            const auto f = encode(state.short_encoder, x, grads ? &view_traces[k] : nullptr);
            std::copy(f.begin(), f.end(), views.row(k).begin());
            view_labels[k] = labels[k / 2];
        }
        if (grads) aux_grad = Matrix<Scalar>(2 * B, c);
        metrics.aux = static_cast<double>(
            supervised_contrastive_loss(views, view_labels, cfg.loss, grads ? &aux_grad : nullptr));
    }
    metrics.total = total_loss(metrics.ce, metrics.aux, cfg.loss);

    if (!grads) return metrics;

    const Scalar inv_batch = Scalar(1) / static_cast<Scalar>(B);
    for (std::size_t i = 0; i < B; ++i) {
        auto dlogits = cross_entropy_logits_grad<Scalar>(probs[i], labels[i]);
        for (auto& g : dlogits) g *= inv_batch;
        const auto dfused = decoder_backward<Scalar>(state.decoder, fused[i], dlogits, grads->decoder);
        std::vector<Scalar> dfeature = dfused;
        if (cfg.use_recall) {
            const auto dq = recall_for_query_backward<Scalar>(state.memory, weights[i], dfused);
            for (std::size_t k = 0; k < c; ++k) dfeature[k] += dq[k];
        }
        if (cfg.use_mal && cfg.auxiliary == AuxiliaryLoss::mal) {
            const auto g = aux_grad.row(i);
            for (std::size_t k = 0; k < c; ++k) dfeature[k] += aux_weight * g[k];
        }
        encode_backward<Scalar>(state.short_encoder, traces[i], dfeature, grads->short_encoder);
    }
    if (cfg.use_mal && cfg.auxiliary == AuxiliaryLoss::scl) {
        for (std::size_t k = 0; k < 2 * B; ++k) {
            std::vector<Scalar> g(aux_grad.row(k).begin(), aux_grad.row(k).end());
            for (auto& x : g) x *= aux_weight;
            encode_backward<Scalar>(state.short_encoder, view_traces[k], g, grads->short_encoder);
        }
    }
    return metrics;
}

template <typename Scalar>
void sgd_update(ParameterSet<Scalar>& params, const ParameterSet<Scalar>& grads, ParameterSet<Scalar>& velocity,
                double learning_rate, double weight_decay, double momentum) {
    if (!same_shapes(params, grads) || !same_shapes(params, velocity)) {
        throw StructuralError("sgd_update: shape mismatch");
    }
    const Scalar lr = static_cast<Scalar>(learning_rate);
    const Scalar wd = static_cast<Scalar>(weight_decay);
    const Scalar mu = static_cast<Scalar>(momentum);
    for (std::size_t n = 0; n < params.size(); ++n) {
        auto& p = params[n].values;
        const auto& g = grads[n].values;
        auto& buf = velocity[n].values;
        for (std::size_t k = 0; k < p.size(); ++k) {
            const Scalar d = g[k] + wd * p[k];
            if (momentum > 0) {
                buf[k] = mu * buf[k] + d;
                p[k] -= lr * buf[k];
            } else {
                p[k] -= lr * d;
            }
        }
    }
}

template <typename Scalar>
StepMetrics train_step(TrainState<Scalar>& state, const std::vector<BatchItem>& batch,
                       std::type_identity_t<StepGradients<Scalar>>* grads_out) {
    const TrainConfig& cfg = state.config;

    // (1) long-term features from the pre-step E_L; they are only ever enqueued
    std::vector<std::vector<Scalar>> long_features;
    long_features.reserve(batch.size());
    for (const auto& item : batch) {
        if (!item.long_sample) throw StructuralError("train_step: batch item without a long-term sample");
        long_features.push_back(encode(state.long_encoder, state.input.apply(item.long_sample->data)));
    }

    // (2)-(4) forward and backward against the pre-step queue
    auto grads = StepGradients<Scalar>::zeros_for(state);
    const StepMetrics metrics = compute_step(state, batch, &grads);
    if (!std::isfinite(metrics.total)) {
        std::ostringstream msg;
        msg << "non-finite loss at step " << state.step << " (ce=" << metrics.ce << ", aux=" << metrics.aux
            << ", total=" << metrics.total << ")";
        throw NumericError(msg.str());
    }

    // (5) SGD on E_S and the decoder
    sgd_update(state.short_encoder.tensors, grads.short_encoder, state.encoder_velocity, cfg.learning_rate,
               cfg.weight_decay, cfg.optimizer_momentum);
    sgd_update(state.decoder.tensors, grads.decoder, state.decoder_velocity, cfg.learning_rate, cfg.weight_decay,
               cfg.optimizer_momentum);

    // (6) E_L tracks E_S
    momentum_update(state.long_encoder, state.short_encoder, cfg.momentum);

    // (7) FIFO enqueue of detached long-term features
    for (std::size_t i = 0; i < batch.size(); ++i) state.memory.enqueue(long_features[i], batch[i].short_sample->label);

    ++state.step;
    if (grads_out) *grads_out = std::move(grads);
    return metrics;
}

template <typename Scalar>
FrozenModel<Scalar> freeze(const TrainState<Scalar>& state) {
    return FrozenModel<Scalar>{state.short_encoder, state.decoder,       state.memory, state.config.window,
                               state.config.use_recall, state.input,         state.labels};
}

template <typename Scalar>
double accuracy(const FrozenModel<Scalar>& model, const std::vector<ShortTermSample>& samples) {
    if (samples.empty()) return 0.0;
    std::size_t correct = 0;
    for (const auto& s : samples) {
        if (predict(model, s.data).label == static_cast<std::size_t>(s.label)) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(samples.size());
}

std::vector<std::string> metrics_lines(const EpochRecord& r) {
    nlohmann::json train{{"epoch", r.epoch},
                         {"split", "train"},
                         {"ce", r.train.ce},
                         {"aux", r.train.aux},
                         {"loss", r.train.total},
                         {"accuracy", r.train_accuracy},
                         {"samples", r.train.count}};
    nlohmann::json test{{"epoch", r.epoch}, {"split", "test"}, {"accuracy", r.test_accuracy}, {"samples", r.test_samples}};
    return {train.dump(), test.dump()};
}

template <typename Scalar>
std::vector<EpochRecord> train_epochs(TrainState<Scalar>& state, const PreparedData& data, std::size_t epochs,
                                      const std::function<void(const EpochRecord&)>& on_epoch) {
    if (data.train_short.size() != data.train_long.size()) {
        throw StructuralError("train: short and long sample lists are not aligned");
    }
    if (data.labels.size() != state.labels.size()) throw ConfigError("train: label map does not match the model");
    std::vector<EpochRecord> history;
    std::vector<std::size_t> order(data.train_short.size());
    for (std::size_t e = 0; e < epochs; ++e) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::shuffle(order.begin(), order.end(), state.rng);

        EpochRecord record;
        record.epoch = state.epoch + 1;
        double ce = 0, aux = 0, total = 0;
        for (std::size_t first = 0; first < order.size(); first += state.config.batch_size) {
            const std::size_t last = std::min(order.size(), first + state.config.batch_size);
            std::vector<BatchItem> batch;
            batch.reserve(last - first);
            for (std::size_t k = first; k < last; ++k) {
                batch.push_back({&data.train_short[order[k]], &data.train_long[order[k]]});
            }
            const StepMetrics m = train_step(state, batch);
            const double n = static_cast<double>(m.count);
            ce += m.ce * n;
            aux += m.aux * n;
            total += m.total * n;
            record.train.correct += m.correct;
            record.train.count += m.count;
        }
        if (record.train.count > 0) {
            const double n = static_cast<double>(record.train.count);
            record.train.ce = ce / n;
            record.train.aux = aux / n;
            record.train.total = total / n;
            record.train_accuracy = static_cast<double>(record.train.correct) / n;
        }
        record.test_accuracy = accuracy(freeze(state), data.test);
        record.test_samples = data.test.size();
        ++state.epoch;
        if (on_epoch) on_epoch(record);
        history.push_back(record);
    }
    return history;
}

TrainResult train(const TrainConfig& config, const PreparedData& data,
                  const std::function<void(const EpochRecord&)>& on_epoch) {
    TrainResult result{TrainState<float>::initial(config, data), {}, {}};
    result.history = train_epochs(result.state, data, config.epochs, on_epoch);
    for (const auto& r : result.history) {
        for (auto& line : metrics_lines(r)) result.metrics_log.push_back(std::move(line));
    }
    return result;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

const char* const kCheckpointFormat = "lman-checkpoint";

void put_float(std::vector<std::uint8_t>& out, float v) {
    const auto bits = std::bit_cast<std::uint32_t>(v);
    for (int k = 0; k < 4; ++k) out.push_back(static_cast<std::uint8_t>(bits >> (8 * k)));
}

float get_float(const std::uint8_t* p) {
    std::uint32_t bits = 0;
    for (int k = 0; k < 4; ++k) bits |= static_cast<std::uint32_t>(p[k]) << (8 * k);
    return std::bit_cast<float>(bits);
}

struct NamedBlock {
    std::string name;
    std::vector<std::size_t> shape;
    std::vector<float> values;
};

std::vector<NamedBlock> checkpoint_blocks(const TrainState<float>& s) {
    std::vector<NamedBlock> blocks;
    auto add_set = [&blocks](const std::string& prefix, const ParameterSet<float>& set) {
        for (const auto& t : set) blocks.push_back({prefix + t.name, t.shape, t.values});
    };
    add_set("short_encoder/", s.short_encoder.tensors);
    add_set("long_encoder/", s.long_encoder.tensors);
    add_set("decoder/", s.decoder.tensors);
    add_set("optimizer/short_encoder/", s.encoder_velocity);
    add_set("optimizer/decoder/", s.decoder_velocity);
    blocks.push_back({"memory/features", {s.memory.capacity(), s.memory.dim()}, s.memory.raw_features()});
    std::vector<float> labels(s.memory.raw_labels().begin(), s.memory.raw_labels().end());
    blocks.push_back({"memory/labels", {s.memory.capacity()}, std::move(labels)});
    return blocks;
}

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const TrainState<float>& s) {
    const auto blocks = checkpoint_blocks(s);
    std::vector<std::uint8_t> payload;
    nlohmann::json manifest = nlohmann::json::array();
    for (const auto& b : blocks) {
        manifest.push_back({{"name", b.name}, {"shape", b.shape}, {"offset", payload.size()}, {"count", b.values.size()}});
        for (float v : b.values) put_float(payload, v);
    }
    std::ostringstream rng;
    rng << s.rng;
    const auto crc = crc32(0L, payload.data(), static_cast<uInt>(payload.size()));
    nlohmann::json header{
        {"format", kCheckpointFormat},
        {"version", kCheckpointVersion},
        {"config", s.config.to_json()},
        {"labels", s.labels.names()},
        {"epoch", s.epoch},
        {"step", s.step},
        {"rng", rng.str()},
        {"input", {{"center", s.input.center}, {"mean", s.input.mean}, {"scale", s.input.scale}}},
        {"memory", {{"capacity", s.memory.capacity()}, {"dim", s.memory.dim()}, {"fill", s.memory.fill()},
                    {"head", s.memory.head()}}},
        {"tensors", manifest},
        {"payload_bytes", payload.size()},
        {"checksum", static_cast<std::uint32_t>(crc)},
    };
    const std::string text = header.dump() + "\n";
    std::vector<std::uint8_t> out(text.begin(), text.end());
    out.insert(out.end(), payload.begin(), payload.end());
    return out;
}

TrainState<float> deserialize_checkpoint(const std::vector<std::uint8_t>& bytes) {
    const auto newline = std::find(bytes.begin(), bytes.end(), std::uint8_t('\n'));
    if (newline == bytes.end()) throw IntegrityError("checkpoint: missing header");
    nlohmann::json header = nlohmann::json::parse(bytes.begin(), newline, nullptr, false);
    if (header.is_discarded() || !header.is_object()) throw IntegrityError("checkpoint: unreadable header");

    try {
        if (header.value("format", std::string{}) != kCheckpointFormat) throw IntegrityError("checkpoint: not a checkpoint file");
        const int version = header.at("version").get<int>();
        if (version != kCheckpointVersion) {
            throw MigrationError("checkpoint: version " + std::to_string(version) + " is not supported (expected " +
                                 std::to_string(kCheckpointVersion) + ")");
        }
        const std::size_t payload_bytes = header.at("payload_bytes").get<std::size_t>();
        const std::size_t available = static_cast<std::size_t>(bytes.end() - newline - 1);
        if (available != payload_bytes) {
            throw IntegrityError("checkpoint: payload is " + std::to_string(available) + " bytes, header says " +
                                 std::to_string(payload_bytes) + " (truncated or padded file)");
        }
        const std::uint8_t* payload = bytes.data() + (newline - bytes.begin()) + 1;
        const auto crc = crc32(0L, payload, static_cast<uInt>(payload_bytes));
        if (static_cast<std::uint32_t>(crc) != header.at("checksum").get<std::uint32_t>()) {
            throw IntegrityError("checkpoint: checksum mismatch");
        }

        const TrainConfig config = TrainConfig::from_json(header.at("config"));
        const LabelMap labels(header.at("labels").get<std::vector<std::string>>());
        TrainState<float> s = TrainState<float>::initial(config, labels);
        if (!(s.config == config)) throw IntegrityError("checkpoint: config does not match label map");

        auto blocks = checkpoint_blocks(s);
        const auto& manifest = header.at("tensors");
        if (manifest.size() != blocks.size()) throw IntegrityError("checkpoint: unexpected tensor count");
        for (std::size_t k = 0; k < blocks.size(); ++k) {
            const auto& entry = manifest[k];
            auto& b = blocks[k];
            if (entry.at("name").get<std::string>() != b.name ||
                entry.at("shape").get<std::vector<std::size_t>>() != b.shape ||
                entry.at("count").get<std::size_t>() != b.values.size()) {
                throw IntegrityError("checkpoint: tensor manifest mismatch at " + b.name);
            }
            const std::size_t offset = entry.at("offset").get<std::size_t>();
            if (offset + 4 * b.values.size() > payload_bytes) throw IntegrityError("checkpoint: tensor out of bounds");
            for (std::size_t i = 0; i < b.values.size(); ++i) b.values[i] = get_float(payload + offset + 4 * i);
        }

        std::size_t next = 0;
        auto take_set = [&](ParameterSet<float>& set) {
            for (auto& t : set) t.values = std::move(blocks[next++].values);
        };
        take_set(s.short_encoder.tensors);
        take_set(s.long_encoder.tensors);
        take_set(s.decoder.tensors);
        take_set(s.encoder_velocity);
        take_set(s.decoder_velocity);
        std::vector<float> features = std::move(blocks[next++].values);
        std::vector<int> slot_labels;
        for (float v : blocks[next++].values) slot_labels.push_back(static_cast<int>(v));
        const auto& mem = header.at("memory");
        s.memory.restore(std::move(features), std::move(slot_labels), mem.at("fill").get<std::size_t>(),
                         mem.at("head").get<std::size_t>());

        const auto& input = header.at("input");
        s.input.center = input.at("center").get<bool>();
        s.input.mean = input.at("mean").get<std::array<double, InputNormalization::kCoordinates>>();
        s.input.scale = input.at("scale").get<std::array<double, InputNormalization::kCoordinates>>();
        if (s.input.center != s.config.center) throw IntegrityError("checkpoint: input centering disagrees with config");
        for (double v : s.input.scale) {
            if (!(v > 0) || !std::isfinite(v)) throw IntegrityError("checkpoint: invalid input scale");
        }

        s.epoch = header.at("epoch").get<std::size_t>();
        s.step = header.at("step").get<std::size_t>();
        std::istringstream rng(header.at("rng").get<std::string>());
        rng >> s.rng;
        if (!rng) throw IntegrityError("checkpoint: bad RNG state");
        return s;
    } catch (const nlohmann::json::exception& e) {
        throw IntegrityError(std::string("checkpoint: malformed header: ") + e.what());
    }
}

void save_checkpoint(const TrainState<float>& state, const std::filesystem::path& path) {
    const auto bytes = serialize_checkpoint(state);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot write checkpoint: " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IntegrityError("failed writing checkpoint: " + path.string());
}

TrainState<float> load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open checkpoint: " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize_checkpoint(bytes);
}

#define LMAN_INSTANTIATE_TRAINING(S)                                                                               \
    template struct TrainState<S>;                                                                                 \
    template struct StepGradients<S>;                                                                              \
    template StepMetrics compute_step<S>(TrainState<S>&, const std::vector<BatchItem>&, StepGradients<S>*);        \
    template void sgd_update<S>(ParameterSet<S>&, const ParameterSet<S>&, ParameterSet<S>&, double, double, double); \
    template StepMetrics train_step<S>(TrainState<S>&, const std::vector<BatchItem>&, StepGradients<S>*);          \
    template FrozenModel<S> freeze<S>(const TrainState<S>&);                                                       \
    template double accuracy<S>(const FrozenModel<S>&, const std::vector<ShortTermSample>&);                       \
    template std::vector<EpochRecord> train_epochs<S>(TrainState<S>&, const PreparedData&, std::size_t,            \
                                                      const std::function<void(const EpochRecord&)>&);

LMAN_INSTANTIATE_TRAINING(float)
LMAN_INSTANTIATE_TRAINING(double)

}  // namespace lman
