#include "lman/inference.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstring>
#include <istream>
#include <mutex>
#include <ostream>
#include <thread>

#include "json.hpp"
#include "lman/error.hpp"

namespace lman {

template <typename Scalar>
Prediction<Scalar> predict(const FrozenModel<Scalar>& model, const SkeletonSequence& x) {
    if (x.frames() != model.window) {
        throw StructuralError("predict: expected " + std::to_string(model.window) + " frames, got " +
                              std::to_string(x.frames()));
    }
    if (!x.all_finite()) throw RejectionError("predict: non-finite joint coordinate");
    const auto feature = encode(model.encoder, model.input.apply(x));
    Prediction<Scalar> out;
    if (model.use_recall) {
        const auto recalled = recall_for_query<Scalar>(model.memory, feature);
        out.probs = classify<Scalar>(model.decoder, fuse<Scalar>(feature, recalled));
    } else {
        out.probs = classify<Scalar>(model.decoder, feature);
    }
    out.label = argmax<Scalar>(out.probs);
    return out;
}

template Prediction<float> predict<float>(const FrozenModel<float>&, const SkeletonSequence&);
template Prediction<double> predict<double>(const FrozenModel<double>&, const SkeletonSequence&);

double latency_estimate(std::size_t frames, double frame_period_ms, double inference_ms) {
    return static_cast<double>(frames) * frame_period_ms + inference_ms;
}

// ---------------------------------------------------------------------------
// Streaming

namespace {

// Timestamps are milliseconds in floating point; 30 Hz periods are not exact.
constexpr double kCadenceSlackMs = 1e-6;

std::mutex& log_mutex() {
    static std::mutex m;
    return m;
}

std::string error_line(const std::string& message) { return nlohmann::json{{"error", message}}.dump(); }

}  // namespace

StreamSession::StreamSession(const FrozenModel<float>& model, StreamConfig config)
    : model_(model), config_(config) {
    if (model_.window == 0) throw ConfigError("stream: model window must be positive");
    if (!(config_.prediction_stride_ms >= 0)) throw ConfigError("stream: stride_ms must be non-negative");
    if (!(config_.frame_hz > 0)) throw ConfigError("stream: frame_hz must be positive");
    buffer_.reserve(model_.window);
}

std::optional<std::string> StreamSession::handle_line(std::string_view line) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ' || line.back() == '\t')) line.remove_suffix(1);
    while (!line.empty() && (line.front() == ' ' || line.front() == '\t')) line.remove_prefix(1);
    if (line.empty()) return std::nullopt;

    const auto msg = nlohmann::json::parse(line, nullptr, false);
    if (msg.is_discarded()) return error_line("malformed frame: not valid JSON");
    if (!msg.is_object()) return error_line("malformed frame: expected a JSON object");
    const auto joints = msg.find("joints");
    if (joints == msg.end() || !joints->is_array()) return error_line("malformed frame: missing \"joints\" array");
    if (joints->size() != kJoints) {
        return error_line("wrong joint count: expected " + std::to_string(kJoints) + ", got " +
                          std::to_string(joints->size()));
    }
    JointPositions frame{};
    for (std::size_t v = 0; v < kJoints; ++v) {
        const auto& joint = (*joints)[v];
        if (!joint.is_array() || joint.size() != kChannels) {
            return error_line("malformed frame: joint " + std::to_string(v) + " must be [x, y, z]");
        }
        for (std::size_t c = 0; c < kChannels; ++c) {
            if (!joint[c].is_number()) return error_line("malformed frame: non-numeric coordinate");
            frame[v][c] = joint[c].get<double>();
            if (!std::isfinite(frame[v][c])) return error_line("malformed frame: non-finite coordinate");
        }
    }
    double t = static_cast<double>(received_) * 1000.0 / config_.frame_hz;
    if (const auto it = msg.find("t"); it != msg.end()) {
        if (!it->is_number()) return error_line("malformed frame: \"t\" must be a number");
        t = it->get<double>();
    }

    const std::size_t T = model_.window;
    if (buffer_.size() < T) {
        buffer_.push_back(frame);
    } else {
        buffer_[next_] = frame;
        next_ = (next_ + 1) % T;
    }
    ++received_;
    if (buffer_.size() < T) return std::nullopt;
    if (last_prediction_t_ && t - *last_prediction_t_ < config_.prediction_stride_ms - kCadenceSlackMs) {
        return std::nullopt;
    }

    SkeletonSequence x(T);
    for (std::size_t k = 0; k < T; ++k) {
        const auto& f = buffer_[(next_ + k) % T];  // oldest first
        for (std::size_t c = 0; c < kChannels; ++c) {
            for (std::size_t v = 0; v < kJoints; ++v) x.at(c, k, v) = f[v][c];
        }
    }
    const auto started = std::chrono::steady_clock::now();
    auto prediction = predict(model_, x);
    const double elapsed_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started).count();
    if (config_.log) {
        std::lock_guard lock(log_mutex());
        *config_.log << "prediction t=" << t << " inference_ms=" << elapsed_ms << '\n';
    }

    last_prediction_t_ = t;
    ++emitted_;
    const std::string name = prediction.label < model_.labels.size() ? model_.labels.name(prediction.label) : "";
    nlohmann::json out{{"t", t}, {"class", prediction.label}, {"name", name}, {"probs", prediction.probs}};
    last_ = std::move(prediction);
    return out.dump();
}

void stream_serve(const FrozenModel<float>& model, const StreamConfig& config, std::istream& in, std::ostream& out) {
    StreamSession session(model, config);
    std::string line;
    while (std::getline(in, line)) {
        if (auto reply = session.handle_line(line)) out << *reply << '\n' << std::flush;
    }
}

namespace {

bool send_all(int fd, const std::string& data) {
    std::size_t sent = 0;
    while (sent < data.size()) {
        const ssize_t n = ::send(fd, data.data() + sent, data.size() - sent, MSG_NOSIGNAL);
        if (n <= 0) return false;
        sent += static_cast<std::size_t>(n);
    }
    return true;
}

void serve_connection(int fd, const FrozenModel<float>& model, const StreamConfig& config,
                      const std::atomic<bool>& stop) {
    StreamSession session(model, config);
    std::string pending;
    char chunk[4096];
    bool open = true;
    while (open && !stop.load()) {
        pollfd p{fd, POLLIN, 0};
        const int ready = ::poll(&p, 1, 100);
        if (ready < 0) break;
        if (ready == 0) continue;
        const ssize_t n = ::recv(fd, chunk, sizeof chunk, 0);
        if (n <= 0) {
            open = false;
        } else {
            pending.append(chunk, static_cast<std::size_t>(n));
        }
        std::size_t start = 0;
        for (std::size_t nl; (nl = pending.find('\n', start)) != std::string::npos; start = nl + 1) {
            if (auto reply = session.handle_line(std::string_view(pending).substr(start, nl - start))) {
                if (!send_all(fd, *reply + "\n")) open = false;
            }
        }
        pending.erase(0, start);
    }
    if (!pending.empty()) {
        if (auto reply = session.handle_line(pending)) send_all(fd, *reply + "\n");
    }
    ::close(fd);
}

}  // namespace

void serve_tcp(const FrozenModel<float>& model, const StreamConfig& config, int port, const std::atomic<bool>& stop,
               const std::function<void(int)>& on_listen) {
    if (port < 0 || port > 65535) throw ConfigError("serve: port out of range");
    const int listener = ::socket(AF_INET, SOCK_STREAM, 0);
    if (listener < 0) throw Error(std::string("serve: socket: ") + std::strerror(errno));
    const int yes = 1;
    ::setsockopt(listener, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof yes);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    addr.sin_port = htons(static_cast<std::uint16_t>(port));
    if (::bind(listener, reinterpret_cast<sockaddr*>(&addr), sizeof addr) < 0 || ::listen(listener, 16) < 0) {
        const std::string why = std::strerror(errno);
        ::close(listener);
        throw Error("serve: cannot listen on port " + std::to_string(port) + ": " + why);
    }
    socklen_t len = sizeof addr;
    ::getsockname(listener, reinterpret_cast<sockaddr*>(&addr), &len);
    if (on_listen) on_listen(ntohs(addr.sin_port));

    std::vector<std::thread> workers;
    while (!stop.load()) {
        pollfd p{listener, POLLIN, 0};
        if (::poll(&p, 1, 100) <= 0) continue;
        const int client = ::accept(listener, nullptr, nullptr);
        if (client < 0) continue;
        workers.emplace_back(serve_connection, client, std::cref(model), std::cref(config), std::cref(stop));
    }
    ::close(listener);
    for (auto& w : workers) w.join();
}

}  // namespace lman
