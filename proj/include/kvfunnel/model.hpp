#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "kvfunnel/error.hpp"
#include "kvfunnel/kv_cache.hpp"
#include "kvfunnel/matrix.hpp"

namespace kvfunnel {

using TokenId = std::uint32_t;

struct ModelConfig {
    std::size_t num_layers = 4;
    std::size_t num_heads = 4;
    std::size_t head_dim = 16;
    std::size_t model_dim = 64;
    std::size_t vocab_size = 256;
    std::uint64_t seed = 0;
    std::size_t max_context = 4096;

    void validate() const {
        if (num_layers < 2) throw ParameterError("model.layers must be >= 2");
        if (num_heads < 1) throw ParameterError("model.heads must be >= 1");
        if (head_dim < 2 || head_dim % 2 != 0) {
            throw ParameterError("model.head_dim must be even and >= 2 (rotary pairs)");
        }
        if (vocab_size < 1) throw ParameterError("model.vocab must be >= 1");
        if (max_context < 1) throw ParameterError("model.max_context must be >= 1");
        if (model_dim != num_heads * head_dim) {
            throw ParameterError("model_dim " + std::to_string(model_dim) + " != heads x head_dim (" +
                                 std::to_string(num_heads * head_dim) + ")");
        }
    }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// SplitMix64 stream: state += 0x9E3779B97F4A7C15, then the standard
/// xor-shift-multiply finalizer. Floats take the top 24 bits.
class SplitMix64 {
public:
    explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next() {
        std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    /// Uniform in [0, 1).
    float uniform() { return static_cast<float>(next() >> 40) * 0x1.0p-24f; }

    /// Uniform in [-sqrt(3), sqrt(3)): zero mean, unit variance.
    float symmetric_unit() { return (2.0f * uniform() - 1.0f) * 1.7320508f; }

    std::uint64_t below(std::uint64_t bound) { return next() % bound; }

private:
    std::uint64_t state_;
};

struct LayerWeights {
    Matrix wq, wk, wv, wo;  // d x d each
    friend bool operator==(const LayerWeights&, const LayerWeights&) = default;
};

struct ModelWeights {
    ModelConfig config;
    Matrix embedding;    // vocab x d
    std::vector<LayerWeights> layers;
    Matrix unembedding;  // d x vocab
    friend bool operator==(const ModelWeights&, const ModelWeights&) = default;
};

/// Weights are a pure function of the config (including its seed). Draw
/// order: embedding, then per layer wq, wk, wv, wo, then unembedding, each
/// row-major. Embeddings have unit variance; every projection is scaled by
/// 1/sqrt(d).
inline ModelWeights generate_weights(const ModelConfig& config) {
    config.validate();
    SplitMix64 rng(config.seed);
    const std::size_t d = config.model_dim;
    const float proj_scale = 1.0f / std::sqrt(static_cast<float>(d));
    auto draw = [&rng](std::size_t r, std::size_t c, float scale) {
        Matrix m(r, c);
        for (float& x : m.data()) x = rng.symmetric_unit() * scale;
        return m;
    };
    ModelWeights w;
    w.config = config;
    w.embedding = draw(config.vocab_size, d, 1.0f);
    w.layers.reserve(config.num_layers);
    for (std::size_t l = 0; l < config.num_layers; ++l) {
        LayerWeights lw;
        lw.wq = draw(d, d, proj_scale);
        lw.wk = draw(d, d, proj_scale);
        lw.wv = draw(d, d, proj_scale);
        lw.wo = draw(d, d, proj_scale);
        w.layers.push_back(std::move(lw));
    }
    w.unembedding = draw(d, config.vocab_size, proj_scale);
    return w;
}

namespace detail {

constexpr double kRopeBase = 10000.0;

/// Rotates consecutive pairs of every head slice of `vec` by position-dependent angles.
inline void apply_rope(std::span<float> vec, std::size_t num_heads, std::size_t head_dim, std::size_t position) {
    for (std::size_t h = 0; h < num_heads; ++h) {
        float* x = vec.data() + h * head_dim;
        for (std::size_t i = 0; i < head_dim / 2; ++i) {
            const double freq = std::pow(kRopeBase, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
            const double angle = static_cast<double>(position) * freq;
            const float c = static_cast<float>(std::cos(angle));
            const float s = static_cast<float>(std::sin(angle));
            const float a = x[2 * i];
            const float b = x[2 * i + 1];
            x[2 * i] = a * c - b * s;
            x[2 * i + 1] = a * s + b * c;
        }
    }
}

/// Single-query attention over `count` contiguous key/value rows of width
/// head_dim. Prefill and decode both go through here, which is what makes
/// full-cache decode bit-identical to prefill.
inline void attend(std::span<const float> query, std::span<const float> keys, std::span<const float> values,
                   std::size_t count, std::size_t head_dim, std::span<float> probs, std::span<float> out) {
    const float scale = 1.0f / std::sqrt(static_cast<float>(head_dim));
    for (std::size_t j = 0; j < count; ++j) {
        const float* k = keys.data() + j * head_dim;
        float dot = 0.0f;
        for (std::size_t i = 0; i < head_dim; ++i) dot += query[i] * k[i];
        probs[j] = dot * scale;
    }
    softmax_inplace(probs.first(count));
    std::fill(out.begin(), out.end(), 0.0f);
    for (std::size_t j = 0; j < count; ++j) {
        const float p = probs[j];
        const float* v = values.data() + j * head_dim;
        for (std::size_t i = 0; i < head_dim; ++i) out[i] += p * v[i];
    }
}

inline void check_token(const ModelConfig& config, TokenId t) {
    if (t >= config.vocab_size) {
        throw InputError("token id " + std::to_string(t) + " >= vocab_size " + std::to_string(config.vocab_size));
    }
}

}  // namespace detail

/// Post-softmax attention maps, one n x n matrix per (layer, head), plus
/// logits for every position.
struct ForwardTrace {
    std::vector<std::vector<Matrix>> attention;  // [layer][head]
    Matrix logits;                               // n x vocab
    std::vector<Matrix> hidden;                  // [layer + 1] residual stream, only if requested

    std::size_t num_layers() const { return attention.size(); }
    std::size_t length() const { return attention.empty() || attention[0].empty() ? logits.rows() : attention[0][0].rows(); }
    friend bool operator==(const ForwardTrace&, const ForwardTrace&) = default;
};

/// Full uncompressed keys (post-rotary) and values of one layer, n x d.
struct LayerKV {
    Matrix keys;
    Matrix values;
    friend bool operator==(const LayerKV&, const LayerKV&) = default;
};

struct PrefillResult {
    ForwardTrace trace;
    std::vector<LayerKV> kv;
};

struct PrefillOptions {
    bool keep_hidden = false;
};

inline PrefillResult prefill(const ModelWeights& weights, std::span<const TokenId> tokens, PrefillOptions opts = {}) {
    const ModelConfig& cfg = weights.config;
    const std::size_t n = tokens.size();
    if (n < 1 || n > cfg.max_context) {
        throw InputError("prompt length " + std::to_string(n) + " outside [1, " + std::to_string(cfg.max_context) +
                         "]");
    }
    const std::size_t d = cfg.model_dim;
    const std::size_t dk = cfg.head_dim;

    Matrix h(n, d);
    for (std::size_t t = 0; t < n; ++t) {
        detail::check_token(cfg, tokens[t]);
        auto src = weights.embedding.row(tokens[t]);
        std::copy(src.begin(), src.end(), h.row(t).begin());
    }

    PrefillResult result;
    result.trace.attention.resize(cfg.num_layers);
    result.kv.reserve(cfg.num_layers);
    if (opts.keep_hidden) result.trace.hidden.push_back(h);

    std::vector<float> head_k(n * dk), head_v(n * dk), probs(n);
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
        const LayerWeights& lw = weights.layers[l];
        Matrix q = matmul(h, lw.wq);
        Matrix k = matmul(h, lw.wk);
        Matrix v = matmul(h, lw.wv);
        for (std::size_t t = 0; t < n; ++t) {
            detail::apply_rope(q.row(t), cfg.num_heads, dk, t);
            detail::apply_rope(k.row(t), cfg.num_heads, dk, t);
        }

        Matrix mixed(n, d);
        auto& maps = result.trace.attention[l];
        maps.reserve(cfg.num_heads);
        for (std::size_t hd = 0; hd < cfg.num_heads; ++hd) {
            for (std::size_t t = 0; t < n; ++t) {
                std::copy_n(k.row(t).begin() + hd * dk, dk, head_k.begin() + t * dk);
                std::copy_n(v.row(t).begin() + hd * dk, dk, head_v.begin() + t * dk);
            }
            Matrix attn(n, n);
            for (std::size_t t = 0; t < n; ++t) {
                detail::attend(q.row(t).subspan(hd * dk, dk), head_k, head_v, t + 1, dk, probs,
                               mixed.row(t).subspan(hd * dk, dk));
                std::copy_n(probs.begin(), t + 1, attn.row(t).begin());
            }
            maps.push_back(std::move(attn));
        }

        Matrix o = matmul(mixed, lw.wo);
        for (std::size_t i = 0; i < h.size(); ++i) h.data()[i] += o.data()[i];
        if (opts.keep_hidden) result.trace.hidden.push_back(h);
        result.kv.push_back({std::move(k), std::move(v)});
    }
    result.trace.logits = matmul(h, weights.unembedding);
    return result;
}

/// Uncompressed cache holding every prompt position at every layer and head.
inline CompressedKV full_cache(const ModelConfig& cfg, std::span<const LayerKV> kv) {
    CompressedKV cache;
    const std::size_t n = kv.empty() ? 0 : kv.front().keys.rows();
    cache.prompt_length = n;
    cache.next_position = n;
    cache.head_dim = cfg.head_dim;
    cache.layers.resize(kv.size());
    for (std::size_t l = 0; l < kv.size(); ++l) {
        auto& layer = cache.layers[l];
        layer.budget = n;
        layer.heads.resize(cfg.num_heads);
        for (std::size_t h = 0; h < cfg.num_heads; ++h) {
            auto& head = layer.heads[h];
            head.positions.resize(n);
            head.keys.resize(n * cfg.head_dim);
            head.values.resize(n * cfg.head_dim);
            for (std::size_t t = 0; t < n; ++t) {
                head.positions[t] = t;
                std::copy_n(kv[l].keys.row(t).begin() + h * cfg.head_dim, cfg.head_dim,
                            head.keys.begin() + t * cfg.head_dim);
                std::copy_n(kv[l].values.row(t).begin() + h * cfg.head_dim, cfg.head_dim,
                            head.values.begin() + t * cfg.head_dim);
            }
        }
    }
    return cache;
}

/// One autoregressive step. The new token attends over each head's retained
/// entries plus everything appended since compression; its own key/value is
/// appended first and never evicted. Returns logits over the vocabulary.
inline std::vector<float> decode_step(const ModelWeights& weights, CompressedKV& cache, TokenId token) {
    const ModelConfig& cfg = weights.config;
    if (cache.layers.size() != cfg.num_layers) {
        throw StateError("cache has " + std::to_string(cache.layers.size()) + " layers, model has " +
                         std::to_string(cfg.num_layers));
    }
    for (std::size_t l = 0; l < cache.layers.size(); ++l) {
        if (cache.layers[l].heads.size() != cfg.num_heads) {
            throw StateError("cache layer " + std::to_string(l) + " has wrong head count");
        }
        for (const auto& head : cache.layers[l].heads) {
            if (head.positions.empty()) throw StateError("empty cache at layer " + std::to_string(l));
        }
    }
    detail::check_token(cfg, token);

    const std::size_t d = cfg.model_dim;
    const std::size_t dk = cfg.head_dim;
    const std::size_t pos = cache.next_position;

    Matrix x(1, d);
    auto src = weights.embedding.row(token);
    std::copy(src.begin(), src.end(), x.row(0).begin());

    std::vector<float> probs;
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
        const LayerWeights& lw = weights.layers[l];
        Matrix q = matmul(x, lw.wq);
        Matrix k = matmul(x, lw.wk);
        Matrix v = matmul(x, lw.wv);
        detail::apply_rope(q.row(0), cfg.num_heads, dk, pos);
        detail::apply_rope(k.row(0), cfg.num_heads, dk, pos);

        Matrix mixed(1, d);
        for (std::size_t hd = 0; hd < cfg.num_heads; ++hd) {
            auto& head = cache.layers[l].heads[hd];
            head.positions.push_back(pos);
            head.keys.insert(head.keys.end(), k.row(0).begin() + hd * dk, k.row(0).begin() + (hd + 1) * dk);
            head.values.insert(head.values.end(), v.row(0).begin() + hd * dk, v.row(0).begin() + (hd + 1) * dk);
            const std::size_t count = head.positions.size();
            probs.resize(count);
            detail::attend(q.row(0).subspan(hd * dk, dk), head.keys, head.values, count, dk, probs,
                           mixed.row(0).subspan(hd * dk, dk));
        }
        Matrix o = matmul(mixed, lw.wo);
        for (std::size_t i = 0; i < d; ++i) x.data()[i] += o.data()[i];
    }
    ++cache.next_position;
    Matrix logits = matmul(x, weights.unembedding);
    return {logits.data().begin(), logits.data().end()};
}

/// Greedy pick; ties resolve to the lowest token id.
inline TokenId argmax(std::span<const float> logits) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < logits.size(); ++i) {
        if (logits[i] > logits[best]) best = i;
    }
    return static_cast<TokenId>(best);
}

/// Deterministic pseudo-random prompt.
inline std::vector<TokenId> random_tokens(std::size_t length, std::size_t vocab, std::uint64_t seed) {
    SplitMix64 rng(seed ^ 0x746F6B656E73ULL);
    std::vector<TokenId> out(length);
    for (auto& t : out) t = static_cast<TokenId>(rng.below(vocab));
    return out;
}

}  // namespace kvfunnel
