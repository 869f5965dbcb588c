#include "lman/cli.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <csignal>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>

#include "CLI11.hpp"
#include "json.hpp"
#include "lman/dataset.hpp"
#include "lman/error.hpp"
#include "lman/evaluation.hpp"
#include "lman/inference.hpp"
#include "lman/training.hpp"

namespace lman {
namespace {

/// Bad flags or settings: reported with exit code 1.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Settings {
    std::string config_path;
    std::vector<std::string> assignments;

    KeyValueConfig load() const {
        try {
            KeyValueConfig kv = config_path.empty() ? KeyValueConfig{} : KeyValueConfig::from_file(config_path);
            for (const auto& a : assignments) kv.apply_assignment(a);
            return kv;
        } catch (const Error& e) {
            throw UsageError(e.what());
        }
    }
};

void add_settings(CLI::App* cmd, Settings& s) {
    cmd->add_option("--config", s.config_path, "Flat key = value configuration file");
    cmd->add_option("--set", s.assignments, "Override one setting, key=value (repeatable)")->take_all();
}

template <typename F>
auto as_usage(F&& f) {
    try {
        return f();
    } catch (const ConfigError& e) {
        throw UsageError(e.what());
    }
}

std::vector<std::uint64_t> seed_list(const KeyValueConfig& kv, std::vector<std::uint64_t> fallback) {
    const auto items = kv.get_list("seeds");
    if (items.empty()) return fallback;
    std::vector<std::uint64_t> seeds;
    for (const auto& s : items) {
        try {
            std::size_t used = 0;
            const auto v = std::stoull(s, &used);
            if (used != s.size()) throw std::invalid_argument(s);
            seeds.push_back(v);
        } catch (const std::exception&) {
            throw UsageError("seeds: '" + s + "' is not a non-negative integer");
        }
    }
    return seeds;
}

/// Short windows of the listed subjects (all subjects when empty).
std::vector<ShortTermSample> collect_windows(const RecordingSet& data, const std::vector<std::string>& subjects,
                                             std::size_t window, std::size_t stride) {
    const std::set<std::string> wanted(subjects.begin(), subjects.end());
    std::vector<ShortTermSample> out;
    for (const auto& rec : data.recordings) {
        if (!wanted.empty() && !wanted.contains(rec.subject_id)) continue;
        auto w = split_windows(rec, window, stride);
        std::move(w.begin(), w.end(), std::back_inserter(out));
    }
    return out;
}

PreparedData prepare(const RecordingSet& data, const KeyValueConfig& kv, const TrainConfig& config, std::ostream& err) {
    const auto split = as_usage([&] {
        return resolve_split(data, kv.get_list("train_subjects"), kv.get_list("test_subjects"));
    });
    auto prepared = prepare_data(data, split, config);
    err << "train subjects:";
    for (const auto& s : split.train_subjects) err << ' ' << s;
    err << " | test subjects:";
    for (const auto& s : split.test_subjects) err << ' ' << s;
    err << "\ntrain windows: " << prepared.train_short.size() << " (dropped without long window: "
        << prepared.dropped_without_long << "), test windows: " << prepared.test.size() << '\n';
    if (prepared.train_short.empty()) throw ConfigError("no training windows; check T, S and the subject split");
    return prepared;
}

void check_labels(const LabelMap& model, const LabelMap& data) {
    if (!(model == data)) throw ConfigError("label map of the data file does not match the model");
}

std::ofstream open_output(const std::string& path, bool append = false) {
    std::ofstream f(path, append ? std::ios::app : std::ios::trunc);
    if (!f) throw ConfigError("cannot write " + path);
    return f;
}

std::atomic<bool> g_stop{false};

extern "C" void handle_stop_signal(int) { g_stop.store(true); }

std::string fixed(double v, int digits = 4) {
    std::ostringstream s;
    s.setf(std::ios::fixed);
    s.precision(digits);
    s << v;
    return s.str();
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"lman - long-term memory augmented gesture classification toolkit"};
    app.name("lman");
    app.require_subcommand(1);

    // generate
    Settings gen_settings;
    std::string gen_out;
    auto* gen = app.add_subcommand("generate", "Synthesize a gesture recording file (keys: seed, classes, subjects, "
                                               "frames_per_class, frame_hz, noise, subject_variation, *_freq, *_amp)");
    add_settings(gen, gen_settings);
    gen->add_option("--out", gen_out, "Frames file to write (a .labels sidecar is written next to it)")->required();

    // train
    Settings train_settings;
    std::string train_data, train_out, train_metrics, train_resume;
    auto* tr = app.add_subcommand("train", "Train a model (keys: profile, T, S, K, c, width, blocks, v, lr, "
                                           "weight_decay, batch, epochs, seed, use_recall, use_mal, aux_loss, tau, "
                                           "train_subjects, test_subjects, ...)");
    add_settings(tr, train_settings);
    tr->add_option("--data", train_data, "Frames file")->required();
    tr->add_option("--out", train_out, "Checkpoint to write")->required();
    tr->add_option("--metrics", train_metrics, "Also append metrics-log lines to this file");
    tr->add_option("--resume", train_resume, "Continue from a checkpoint until `epochs` total epochs");

    // eval
    Settings eval_settings;
    std::string eval_model, eval_data, eval_confusion;
    auto* ev = app.add_subcommand("eval", "Accuracy, per-class recall and confusion matrix (key: test_subjects)");
    add_settings(ev, eval_settings);
    ev->add_option("--model", eval_model, "Checkpoint")->required();
    ev->add_option("--data", eval_data, "Frames file")->required();
    ev->add_option("--confusion", eval_confusion, "Write the row-normalized confusion matrix as CSV");

    // ablate
    Settings abl_settings;
    std::string abl_data, abl_dir;
    auto* ab = app.add_subcommand("ablate", "Train the four recall/MAL settings over seeds (key: seeds, default 0-4)");
    add_settings(ab, abl_settings);
    ab->add_option("--data", abl_data, "Frames file")->required();
    ab->add_option("--out-dir", abl_dir, "Directory for one metrics log per run");

    // compare-losses
    Settings cmp_settings;
    std::string cmp_data, cmp_dir;
    auto* cmp = app.add_subcommand("compare-losses", "Train with MAL and with SCL over seeds (key: seeds, default 0-2)");
    add_settings(cmp, cmp_settings);
    cmp->add_option("--data", cmp_data, "Frames file")->required();
    cmp->add_option("--out-dir", cmp_dir, "Directory for one metrics log per run");

    // infer
    Settings inf_settings;
    std::string inf_model, inf_data, inf_out;
    auto* inf = app.add_subcommand("infer", "Predict every window of a frames file as NDJSON (keys: test_subjects, "
                                            "infer_stride)");
    add_settings(inf, inf_settings);
    inf->add_option("--model", inf_model, "Checkpoint")->required();
    inf->add_option("--data", inf_data, "Frames file")->required();
    inf->add_option("--out", inf_out, "Write predictions here instead of standard output");

    // serve
    Settings srv_settings;
    std::string srv_model;
    int srv_port = -1;
    bool srv_stdin = false;
    double srv_stride_ms = 180.0, srv_frame_hz = 30.0;
    auto* srv = app.add_subcommand("serve", "Stream NDJSON frames in, predictions out");
    add_settings(srv, srv_settings);
    srv->add_option("--model", srv_model, "Checkpoint")->required();
    auto* port_opt = srv->add_option("--port", srv_port, "Listen on 127.0.0.1:PORT (0 picks a free port)");
    auto* stdin_opt = srv->add_flag("--stdin", srv_stdin, "Serve one session over standard input/output");
    port_opt->excludes(stdin_opt);
    srv->add_option("--stride-ms", srv_stride_ms, "Minimum time between predictions, ms")->capture_default_str();
    srv->add_option("--frame-hz", srv_frame_hz, "Frame rate used for frames without \"t\"")->capture_default_str();

    // export-addressing
    Settings exp_settings;
    std::string exp_model, exp_data, exp_out, exp_meta;
    std::size_t exp_slots = 32, exp_samples = 32;
    std::uint64_t exp_seed = 0;
    auto* ex = app.add_subcommand("export-addressing", "Addressing submatrix of random slots x samples as CSV "
                                                       "(key: test_subjects)");
    add_settings(ex, exp_settings);
    ex->add_option("--model", exp_model, "Checkpoint")->required();
    ex->add_option("--data", exp_data, "Frames file supplying the samples")->required();
    ex->add_option("--out", exp_out, "CSV file to write")->required();
    ex->add_option("--meta", exp_meta, "Write labels and block-mass statistics as JSON");
    ex->add_option("--slots", exp_slots, "Number of memory slots")->capture_default_str();
    ex->add_option("--samples", exp_samples, "Number of samples")->capture_default_str();
    ex->add_option("--seed", exp_seed, "Selection seed")->capture_default_str();

    if (args.empty()) {
        out << app.help();
        return 1;
    }
    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? 0 : 1;
    }

    try {
        if (gen->parsed()) {
            const auto kv = gen_settings.load();
            const auto cfg = as_usage([&] { return SynthesisConfig::from(kv); });
            const auto seed = static_cast<std::uint64_t>(as_usage([&] { return kv.get_int("seed", 0); }));
            const auto set = synthesize_recordings(cfg, seed);
            write_recordings(gen_out, set);
            out << "wrote " << set.frame_count() << " frames, " << set.recordings.size() << " recordings, "
                << set.labels.size() << " classes to " << gen_out << '\n';
        } else if (tr->parsed()) {
            const auto kv = train_settings.load();
            const auto config = as_usage([&] { return TrainConfig::from(kv); });
            const auto data = load_recordings(train_data);
            const auto started = std::chrono::steady_clock::now();
            std::optional<TrainState<float>> resumed;
            if (!train_resume.empty()) resumed = load_checkpoint(train_resume);
            const TrainConfig& effective = resumed ? resumed->config : config;
            const auto prepared = prepare(data, kv, effective, err);
            TrainState<float> state = resumed ? std::move(*resumed) : TrainState<float>::initial(config, prepared);
            check_labels(state.labels, data.labels);
            const std::size_t target = train_resume.empty() || !kv.contains("epochs") ? state.config.epochs
                                                                                     : config.epochs;
            if (target < state.epoch) throw ConfigError("checkpoint is already past the requested epoch count");
            state.config.epochs = target;  // the checkpoint records the run it completes
            std::optional<std::ofstream> metrics;
            if (!train_metrics.empty()) metrics.emplace(open_output(train_metrics, !train_resume.empty()));
            const auto history = train_epochs(state, prepared, target - state.epoch, [&](const EpochRecord& r) {
                for (const auto& line : metrics_lines(r)) {
                    out << line << '\n';
                    if (metrics) *metrics << line << '\n';
                }
                out.flush();
            });
            save_checkpoint(state, train_out);
            const double seconds =
                std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
            err << "trained to epoch " << state.epoch << " in " << fixed(seconds, 1) << " s; checkpoint " << train_out
                << '\n';
            const double acc = history.empty() ? accuracy(freeze(state), prepared.test) : history.back().test_accuracy;
            out << "test accuracy " << fixed(acc) << '\n';
        } else if (ev->parsed()) {
            const auto kv = eval_settings.load();
            const auto state = load_checkpoint(eval_model);
            const auto data = load_recordings(eval_data);
            check_labels(state.labels, data.labels);
            const auto test = collect_windows(data, kv.get_list("test_subjects"), state.config.window,
                                              state.config.effective_eval_stride());
            const auto result = evaluate(freeze(state), test);
            out << "accuracy " << fixed(result.accuracy) << " (" << result.confusion.correct() << '/'
                << result.confusion.total() << ")\n";
            for (std::size_t k = 0; k < result.recall.size(); ++k) {
                out << "recall " << state.labels.name(k) << ' '
                    << (result.recall[k] ? fixed(*result.recall[k]) : std::string("undefined")) << '\n';
            }
            if (!eval_confusion.empty()) {
                auto f = open_output(eval_confusion);
                write_confusion_csv(f, result.confusion, state.labels);
            }
        } else if (ab->parsed() || cmp->parsed()) {
            const bool ablate = ab->parsed();
            const auto kv = (ablate ? abl_settings : cmp_settings).load();
            const auto config = as_usage([&] { return TrainConfig::from(kv); });
            const auto seeds = seed_list(kv, ablate ? std::vector<std::uint64_t>{0, 1, 2, 3, 4}
                                                    : std::vector<std::uint64_t>{0, 1, 2});
            const auto data = load_recordings(ablate ? abl_data : cmp_data);
            const auto prepared = prepare(data, kv, config, err);
            const std::string dir = ablate ? abl_dir : cmp_dir;
            if (!dir.empty()) std::filesystem::create_directories(dir);
            const RunObserver observer = [&](const std::string& name, std::uint64_t seed, const TrainResult& r) {
                err << name << " seed " << seed << ": test accuracy "
                    << fixed(r.history.empty() ? 0.0 : r.history.back().test_accuracy) << '\n';
                if (dir.empty()) return;
                std::string stem = name;
                std::replace(stem.begin(), stem.end(), '+', 'p');
                auto f = open_output((std::filesystem::path(dir) / (stem + "_seed" + std::to_string(seed) + ".jsonl"))
                                         .string());
                for (const auto& line : r.metrics_log) f << line << '\n';
            };
            if (ablate) {
                out << format_ablation_table(run_ablation(config, prepared, seeds, observer));
                out << "config hash (flags excluded): " << config_hash_modulo_flags(config) << '\n';
            } else {
                out << format_loss_table(compare_losses(config, prepared, seeds, observer));
            }
        } else if (inf->parsed()) {
            const auto kv = inf_settings.load();
            const auto state = load_checkpoint(inf_model);
            const auto data = load_recordings(inf_data);
            check_labels(state.labels, data.labels);
            const auto stride = static_cast<std::size_t>(
                as_usage([&] { return kv.get_int("infer_stride", static_cast<long long>(state.config.window)); }));
            if (stride == 0) throw UsageError("infer_stride must be positive");
            const auto model = freeze(state);
            std::optional<std::ofstream> file;
            if (!inf_out.empty()) file.emplace(open_output(inf_out));
            std::ostream& sink = file ? *file : out;
            for (const auto& s : collect_windows(data, kv.get_list("test_subjects"), state.config.window, stride)) {
                const auto p = predict(model, s.data);
                sink << nlohmann::json{{"recording", s.recording_id},
                                       {"start_frame", s.start_frame},
                                       {"label", s.label},
                                       {"class", p.label},
                                       {"name", state.labels.name(p.label)},
                                       {"probs", p.probs}}
                            .dump()
                     << '\n';
            }
        } else if (srv->parsed()) {
            (void)srv_settings.load();
            if (srv_port < 0 && !srv_stdin) throw UsageError("serve: pass --port or --stdin");
            const auto state = load_checkpoint(srv_model);
            const auto model = freeze(state);
            StreamConfig cfg{srv_stride_ms, srv_frame_hz, &err};
            if (srv_stdin) {
                stream_serve(model, cfg, std::cin, out);
            } else {
                std::signal(SIGINT, handle_stop_signal);
                std::signal(SIGTERM, handle_stop_signal);
                serve_tcp(model, cfg, srv_port, g_stop, [&err](int port) {
                    err << "listening on 127.0.0.1:" << port << std::endl;
                });
            }
        } else if (ex->parsed()) {
            const auto kv = exp_settings.load();
            const auto state = load_checkpoint(exp_model);
            const auto data = load_recordings(exp_data);
            check_labels(state.labels, data.labels);
            const auto samples = collect_windows(data, kv.get_list("test_subjects"), state.config.window,
                                                 state.config.effective_eval_stride());
            const auto e = as_usage(
                [&] { return export_addressing(freeze(state), samples, exp_slots, exp_samples, exp_seed); });
            {
                auto f = open_output(exp_out);
                write_addressing_csv(f, e, state.labels);
            }
            if (!exp_meta.empty()) {
                auto f = open_output(exp_meta);
                f << nlohmann::json{{"slots", e.slots},
                                    {"slot_labels", e.slot_labels},
                                    {"samples", e.samples},
                                    {"sample_labels", e.sample_labels},
                                    {"same_class_mass", e.same_class_mass},
                                    {"different_class_mass", e.different_class_mass}}
                         .dump(2)
                  << '\n';
            }
            out << "same-class mean address mass " << e.same_class_mass << ", different-class "
                << e.different_class_mass << '\n';
        }
    } catch (const UsageError& e) {
        err << "usage error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return 2;
    }
    return 0;
}

}  // namespace lman
