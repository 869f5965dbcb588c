#include "lman/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <string>

#include "lman/error.hpp"

namespace lman {

void EncoderConfig::validate() const {
    if (blocks == 0 || width == 0 || feature_dim == 0 || num_classes == 0) {
        throw ConfigError("encoder: blocks, width, feature_dim and num_classes must be positive");
    }
    if (kernel == 0 || kernel % 2 == 0) throw ConfigError("encoder: temporal kernel width must be odd");
}

SkeletonGraph SkeletonGraph::from_edges(const Matrix3& edges) {
    SkeletonGraph g;
    for (std::size_t u = 0; u < kJoints; ++u) {
        for (std::size_t v = 0; v < kJoints; ++v) {
            g.adjacency[u][v] = (u == v || edges[u][v] != 0 || edges[v][u] != 0) ? 1.0 : 0.0;
        }
    }
    std::array<double, kJoints> degree{};
    for (std::size_t u = 0; u < kJoints; ++u) {
        for (std::size_t v = 0; v < kJoints; ++v) degree[u] += g.adjacency[u][v];
    }
    for (std::size_t u = 0; u < kJoints; ++u) {
        for (std::size_t v = 0; v < kJoints; ++v) {
            g.normalized[u][v] = g.adjacency[u][v] / std::sqrt(degree[u] * degree[v]);
        }
    }
    return g;
}

SkeletonGraph SkeletonGraph::head_and_thighs() {
    Matrix3 edges{};
    edges[kHead][kLeftThigh] = 1;
    edges[kHead][kRightThigh] = 1;
    return from_edges(edges);
}

template <typename Scalar>
EncoderParams<Scalar> EncoderParams<Scalar>::zeros(const EncoderConfig& config) {
    config.validate();
    EncoderParams p;
    p.config = config;
    const std::size_t w = config.width;
    for (std::size_t b = 0; b < config.blocks; ++b) {
        const std::size_t in = b == 0 ? kChannels : w;
        const std::string prefix = "block" + std::to_string(b);
        p.tensors.emplace_back(prefix + ".graph.weight", std::vector<std::size_t>{w, in});
        p.tensors.emplace_back(prefix + ".graph.bias", std::vector<std::size_t>{w});
        p.tensors.emplace_back(prefix + ".temporal.weight", std::vector<std::size_t>{w, w, config.kernel});
        p.tensors.emplace_back(prefix + ".temporal.bias", std::vector<std::size_t>{w});
    }
    p.tensors.emplace_back("projection.weight", std::vector<std::size_t>{config.feature_dim, w});
    p.tensors.emplace_back("projection.bias", std::vector<std::size_t>{config.feature_dim});
    return p;
}

template <typename Scalar>
DecoderParams<Scalar> DecoderParams<Scalar>::zeros(std::size_t num_classes, std::size_t feature_dim) {
    DecoderParams d;
    d.tensors.emplace_back("decoder.weight", std::vector<std::size_t>{num_classes, feature_dim});
    d.tensors.emplace_back("decoder.bias", std::vector<std::size_t>{num_classes});
    return d;
}

namespace {

constexpr std::size_t V = kJoints;

inline std::size_t at(std::size_t ch, std::size_t t, std::size_t v, std::size_t frames) {
    return (ch * frames + t) * V + v;
}

}  // namespace

template <typename Scalar>
std::vector<Scalar> encode(const EncoderParams<Scalar>& params, const SkeletonSequence& x, EncoderTrace<Scalar>* trace) {
    const EncoderConfig& cfg = params.config;
    const std::size_t T = x.frames();
    if (T < cfg.kernel) {
        throw StructuralError("encode: sequence has " + std::to_string(T) + " frames, need at least " +
                              std::to_string(cfg.kernel));
    }
    if (!x.all_finite()) throw RejectionError("encode: non-finite input coordinate");

    const std::size_t w = cfg.width;
    const std::size_t K = cfg.kernel;
    const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(K / 2);
    const auto& A = params.graph.normalized;

    std::vector<Scalar> h(x.values().size());
    std::transform(x.values().begin(), x.values().end(), h.begin(), [](double v) { return static_cast<Scalar>(v); });

    EncoderTrace<Scalar> local;
    EncoderTrace<Scalar>& tr = trace ? *trace : local;
    tr = EncoderTrace<Scalar>{};
    tr.frames = T;

    for (std::size_t b = 0; b < cfg.blocks; ++b) {
        const std::size_t in = b == 0 ? kChannels : w;
        const auto& Wg = params.graph_weight(b).values;
        const auto& bg = params.graph_bias(b).values;
        const auto& Wt = params.temporal_weight(b).values;
        const auto& bt = params.temporal_bias(b).values;

        std::vector<Scalar> agg(in * T * V, Scalar(0));
        for (std::size_t i = 0; i < in; ++i) {
            for (std::size_t t = 0; t < T; ++t) {
                for (std::size_t v = 0; v < V; ++v) {
                    Scalar s = 0;
                    for (std::size_t u = 0; u < V; ++u) s += h[at(i, t, u, T)] * static_cast<Scalar>(A[u][v]);
                    agg[at(i, t, v, T)] = s;
                }
            }
        }

        std::vector<Scalar> gpre(w * T * V);
        for (std::size_t o = 0; o < w; ++o) {
            for (std::size_t tv = 0; tv < T * V; ++tv) {
                Scalar s = bg[o];
                for (std::size_t i = 0; i < in; ++i) s += Wg[o * in + i] * agg[i * T * V + tv];
                gpre[o * T * V + tv] = s;
            }
        }
        std::vector<Scalar> act(gpre.size());
        std::transform(gpre.begin(), gpre.end(), act.begin(), [](Scalar z) { return z > 0 ? z : Scalar(0); });

        std::vector<Scalar> tpre(w * T * V);
        for (std::size_t o = 0; o < w; ++o) {
            for (std::size_t tv = 0; tv < T * V; ++tv) tpre[o * T * V + tv] = bt[o];
            for (std::size_t i = 0; i < w; ++i) {
                for (std::size_t k = 0; k < K; ++k) {
                    const Scalar wk = Wt[(o * w + i) * K + k];
                    const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(k) - pad;
                    const std::size_t t0 = shift < 0 ? static_cast<std::size_t>(-shift) : 0;
                    const std::size_t t1 = shift > 0 ? T - static_cast<std::size_t>(shift) : T;
                    for (std::size_t t = t0; t < t1; ++t) {
                        const std::size_t src = static_cast<std::size_t>(static_cast<std::ptrdiff_t>(t) + shift);
                        for (std::size_t v = 0; v < V; ++v) tpre[at(o, t, v, T)] += wk * act[at(i, src, v, T)];
                    }
                }
            }
        }

        if (trace) {
            tr.block_input.push_back(std::move(h));
            tr.aggregated.push_back(std::move(agg));
            tr.graph_pre.push_back(std::move(gpre));
        }
        h.resize(tpre.size());
        std::transform(tpre.begin(), tpre.end(), h.begin(), [](Scalar z) { return z > 0 ? z : Scalar(0); });
        if (trace) tr.temporal_pre.push_back(std::move(tpre));
    }

    tr.pooled.assign(w, Scalar(0));
    const Scalar inv_count = Scalar(1) / static_cast<Scalar>(T * V);
    for (std::size_t o = 0; o < w; ++o) {
        Scalar s = 0;
        for (std::size_t tv = 0; tv < T * V; ++tv) s += h[o * T * V + tv];
        tr.pooled[o] = s * inv_count;
    }

    const std::size_t c = cfg.feature_dim;
    const auto& Wp = params.projection_weight().values;
    const auto& bp = params.projection_bias().values;
    tr.embedding.assign(c, Scalar(0));
    Scalar sq = 0;
    for (std::size_t j = 0; j < c; ++j) {
        Scalar s = bp[j];
        for (std::size_t o = 0; o < w; ++o) s += Wp[j * w + o] * tr.pooled[o];
        tr.embedding[j] = s;
        sq += s * s;
    }
    tr.norm = std::sqrt(sq);
    const Scalar denom = std::max(tr.norm, std::numeric_limits<Scalar>::min());
    tr.feature.resize(c);
    for (std::size_t j = 0; j < c; ++j) tr.feature[j] = tr.embedding[j] / denom;
    return tr.feature;
}

template <typename Scalar>
void encode_backward(const EncoderParams<Scalar>& params, const EncoderTrace<Scalar>& tr,
                     std::span<const Scalar> feature_grad, ParameterSet<Scalar>& grads) {
    const EncoderConfig& cfg = params.config;
    if (tr.block_input.size() != cfg.blocks) throw StructuralError("encode_backward: trace was not recorded");
    if (!same_shapes(grads, params.tensors)) throw StructuralError("encode_backward: gradient shape mismatch");
    const std::size_t c = cfg.feature_dim;
    if (feature_grad.size() != c) throw StructuralError("encode_backward: feature gradient length mismatch");

    const std::size_t T = tr.frames;
    const std::size_t w = cfg.width;
    const std::size_t K = cfg.kernel;
    const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(K / 2);
    const auto& A = params.graph.normalized;

    // f = e / |e|  =>  de = (df - f (f . df)) / |e|
    Scalar f_dot = 0;
    for (std::size_t j = 0; j < c; ++j) f_dot += tr.feature[j] * feature_grad[j];
    const Scalar denom = std::max(tr.norm, std::numeric_limits<Scalar>::min());
    std::vector<Scalar> de(c);
    for (std::size_t j = 0; j < c; ++j) de[j] = (feature_grad[j] - tr.feature[j] * f_dot) / denom;

    const std::size_t blocks = cfg.blocks;
    auto& gWp = grads[4 * blocks].values;
    auto& gbp = grads[4 * blocks + 1].values;
    const auto& Wp = params.projection_weight().values;
    std::vector<Scalar> dpooled(w, Scalar(0));
    for (std::size_t j = 0; j < c; ++j) {
        gbp[j] += de[j];
        for (std::size_t o = 0; o < w; ++o) {
            gWp[j * w + o] += de[j] * tr.pooled[o];
            dpooled[o] += Wp[j * w + o] * de[j];
        }
    }

    const Scalar inv_count = Scalar(1) / static_cast<Scalar>(T * V);
    std::vector<Scalar> dout(w * T * V);
    for (std::size_t o = 0; o < w; ++o) {
        for (std::size_t tv = 0; tv < T * V; ++tv) dout[o * T * V + tv] = dpooled[o] * inv_count;
    }

    for (std::size_t bb = blocks; bb-- > 0;) {
        const std::size_t in = bb == 0 ? kChannels : w;
        const auto& Wg = params.graph_weight(bb).values;
        const auto& Wt = params.temporal_weight(bb).values;
        auto& gWg = grads[4 * bb].values;
        auto& gbg = grads[4 * bb + 1].values;
        auto& gWt = grads[4 * bb + 2].values;
        auto& gbt = grads[4 * bb + 3].values;
        const auto& gpre = tr.graph_pre[bb];
        const auto& tpre = tr.temporal_pre[bb];
        const auto& agg = tr.aggregated[bb];

        std::vector<Scalar> dy(w * T * V);
        for (std::size_t k = 0; k < dy.size(); ++k) dy[k] = tpre[k] > 0 ? dout[k] : Scalar(0);

        std::vector<Scalar> act(gpre.size());
        std::transform(gpre.begin(), gpre.end(), act.begin(), [](Scalar z) { return z > 0 ? z : Scalar(0); });

        std::vector<Scalar> dact(w * T * V, Scalar(0));
        for (std::size_t o = 0; o < w; ++o) {
            Scalar sb = 0;
            for (std::size_t tv = 0; tv < T * V; ++tv) sb += dy[o * T * V + tv];
            gbt[o] += sb;
            for (std::size_t i = 0; i < w; ++i) {
                for (std::size_t k = 0; k < K; ++k) {
                    const std::size_t widx = (o * w + i) * K + k;
                    const Scalar wk = Wt[widx];
                    const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(k) - pad;
                    const std::size_t t0 = shift < 0 ? static_cast<std::size_t>(-shift) : 0;
                    const std::size_t t1 = shift > 0 ? T - static_cast<std::size_t>(shift) : T;
                    Scalar sw = 0;
                    for (std::size_t t = t0; t < t1; ++t) {
                        const std::size_t src = static_cast<std::size_t>(static_cast<std::ptrdiff_t>(t) + shift);
                        for (std::size_t v = 0; v < V; ++v) {
                            const Scalar g = dy[at(o, t, v, T)];
                            sw += g * act[at(i, src, v, T)];
                            dact[at(i, src, v, T)] += wk * g;
                        }
                    }
                    gWt[widx] += sw;
                }
            }
        }

        std::vector<Scalar> dz(w * T * V);
        for (std::size_t k = 0; k < dz.size(); ++k) dz[k] = gpre[k] > 0 ? dact[k] : Scalar(0);

        std::vector<Scalar> dagg(in * T * V, Scalar(0));
        for (std::size_t o = 0; o < w; ++o) {
            Scalar sb = 0;
            for (std::size_t tv = 0; tv < T * V; ++tv) sb += dz[o * T * V + tv];
            gbg[o] += sb;
            for (std::size_t i = 0; i < in; ++i) {
                const Scalar wg = Wg[o * in + i];
                Scalar sw = 0;
                for (std::size_t tv = 0; tv < T * V; ++tv) {
                    sw += dz[o * T * V + tv] * agg[i * T * V + tv];
                    dagg[i * T * V + tv] += wg * dz[o * T * V + tv];
                }
                gWg[o * in + i] += sw;
            }
        }

        if (bb == 0) break;
        // agg[i][t][v] = sum_u h[i][t][u] A[u][v]  =>  dh[i][t][u] = sum_v dagg[i][t][v] A[u][v]
        std::vector<Scalar> dh(in * T * V, Scalar(0));
        for (std::size_t i = 0; i < in; ++i) {
            for (std::size_t t = 0; t < T; ++t) {
                for (std::size_t u = 0; u < V; ++u) {
                    Scalar s = 0;
                    for (std::size_t v = 0; v < V; ++v) s += dagg[at(i, t, v, T)] * static_cast<Scalar>(A[u][v]);
                    dh[at(i, t, u, T)] = s;
                }
            }
        }
        // relu mask of the previous block is applied when its dy is formed
        dout = std::move(dh);
    }
}

template <typename Scalar>
EncoderPair<Scalar> init_encoders(const EncoderConfig& config, std::uint64_t seed) {
    config.validate();
    std::mt19937_64 rng(seed);
    auto fill = [&rng](Tensor<Scalar>& t, double bound) {
        std::uniform_real_distribution<double> dist(-bound, bound);
        for (auto& v : t.values) v = static_cast<Scalar>(dist(rng));
    };

    EncoderPair<Scalar> pair{EncoderParams<Scalar>::zeros(config), {},
                             DecoderParams<Scalar>::zeros(config.num_classes, config.feature_dim)};
    auto& enc = pair.short_term;
    for (std::size_t b = 0; b < config.blocks; ++b) {
        const double graph_fan_in = static_cast<double>(b == 0 ? kChannels : config.width);
        const double temporal_fan_in = static_cast<double>(config.width * config.kernel);
        fill(enc.graph_weight(b), std::sqrt(6.0 / graph_fan_in));
        fill(enc.graph_bias(b), 1.0 / std::sqrt(graph_fan_in));
        fill(enc.temporal_weight(b), std::sqrt(6.0 / temporal_fan_in));
        fill(enc.temporal_bias(b), 1.0 / std::sqrt(temporal_fan_in));
    }
    const double proj_fan_in = static_cast<double>(config.width);
    fill(enc.projection_weight(), std::sqrt(3.0 / proj_fan_in));
    fill(enc.projection_bias(), 1.0 / std::sqrt(proj_fan_in));
    pair.long_term = pair.short_term;
    // a zero decoder is a saddle: no gradient would reach the encoder on the first steps
    fill(pair.decoder.weight(), 1.0 / std::sqrt(static_cast<double>(config.feature_dim)));
    return pair;
}

template <typename Scalar>
void momentum_update(ParameterSet<Scalar>& target, const ParameterSet<Scalar>& online, double v) {
    if (!same_shapes(target, online)) throw StructuralError("momentum_update: parameter shapes differ");
    if (!(v >= 0.0 && v < 1.0)) throw ConfigError("momentum_update: coefficient must lie in [0, 1)");
    if (v == 0.0) {
        for (std::size_t n = 0; n < target.size(); ++n) target[n].values = online[n].values;
        return;
    }
    // Written as t + (1 - v)(s - t) so that t == s is an exact fixed point.
    const Scalar step = static_cast<Scalar>(1.0 - v);
    for (std::size_t n = 0; n < target.size(); ++n) {
        auto& t = target[n].values;
        const auto& s = online[n].values;
        for (std::size_t k = 0; k < t.size(); ++k) t[k] += step * (s[k] - t[k]);
    }
}

template <typename Scalar>
std::vector<Scalar> decoder_logits(const DecoderParams<Scalar>& decoder, std::span<const Scalar> feature) {
    const std::size_t n = decoder.num_classes();
    const std::size_t c = decoder.feature_dim();
    if (feature.size() != c) throw StructuralError("decoder: feature length mismatch");
    const auto& W = decoder.weight().values;
    const auto& b = decoder.bias().values;
    std::vector<Scalar> logits(n);
    for (std::size_t k = 0; k < n; ++k) {
        Scalar s = b[k];
        for (std::size_t j = 0; j < c; ++j) s += W[k * c + j] * feature[j];
        logits[k] = s;
    }
    return logits;
}

template <typename Scalar>
std::vector<Scalar> softmax(std::span<const Scalar> logits) {
    std::vector<Scalar> out(logits.size());
    if (logits.empty()) return out;
    const Scalar peak = *std::max_element(logits.begin(), logits.end());
    Scalar total = 0;
    for (std::size_t k = 0; k < logits.size(); ++k) {
        out[k] = std::exp(logits[k] - peak);
        total += out[k];
    }
    for (auto& p : out) p /= total;
    return out;
}

template <typename Scalar>
std::vector<Scalar> classify(const DecoderParams<Scalar>& decoder, std::span<const Scalar> feature) {
    for (Scalar x : feature) {
        if (!std::isfinite(x)) throw RejectionError("classify: non-finite feature");
    }
    const auto logits = decoder_logits(decoder, feature);
    return softmax<Scalar>(logits);
}

template <typename Scalar>
std::vector<Scalar> decoder_backward(const DecoderParams<Scalar>& decoder, std::span<const Scalar> feature,
                                     std::span<const Scalar> logits_grad, ParameterSet<Scalar>& grads) {
    const std::size_t n = decoder.num_classes();
    const std::size_t c = decoder.feature_dim();
    if (feature.size() != c || logits_grad.size() != n || !same_shapes(grads, decoder.tensors)) {
        throw StructuralError("decoder_backward: shape mismatch");
    }
    const auto& W = decoder.weight().values;
    auto& gW = grads[0].values;
    auto& gb = grads[1].values;
    std::vector<Scalar> dfeature(c, Scalar(0));
    for (std::size_t k = 0; k < n; ++k) {
        gb[k] += logits_grad[k];
        for (std::size_t j = 0; j < c; ++j) {
            gW[k * c + j] += logits_grad[k] * feature[j];
            dfeature[j] += W[k * c + j] * logits_grad[k];
        }
    }
    return dfeature;
}

template <typename Scalar>
std::size_t argmax(std::span<const Scalar> values) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < values.size(); ++k) {
        if (values[k] > values[best]) best = k;
    }
    return best;
}

#define LMAN_INSTANTIATE_ENCODER(S)                                                                                   \
    template struct EncoderParams<S>;                                                                                 \
    template struct DecoderParams<S>;                                                                                 \
    template std::vector<S> encode<S>(const EncoderParams<S>&, const SkeletonSequence&, EncoderTrace<S>*);            \
    template void encode_backward<S>(const EncoderParams<S>&, const EncoderTrace<S>&, std::span<const S>,             \
                                     ParameterSet<S>&);                                                               \
    template EncoderPair<S> init_encoders<S>(const EncoderConfig&, std::uint64_t);                                    \
    template void momentum_update<S>(ParameterSet<S>&, const ParameterSet<S>&, double);                               \
    template std::vector<S> decoder_logits<S>(const DecoderParams<S>&, std::span<const S>);                           \
    template std::vector<S> softmax<S>(std::span<const S>);                                                           \
    template std::vector<S> classify<S>(const DecoderParams<S>&, std::span<const S>);                                 \
    template std::vector<S> decoder_backward<S>(const DecoderParams<S>&, std::span<const S>, std::span<const S>,      \
                                                ParameterSet<S>&);                                                    \
    template std::size_t argmax<S>(std::span<const S>);

LMAN_INSTANTIATE_ENCODER(float)
LMAN_INSTANTIATE_ENCODER(double)

}  // namespace lman
