#pragma once

#include <cstdint>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <string>

#include "kvfunnel/binary_io.hpp"
#include "kvfunnel/model.hpp"

namespace kvfunnel {

// TKVW weight file, all little-endian:
//   "TKVW" u32 version=1
//   u32 layers, heads, head_dim, model_dim, vocab, max_context, seed_lo, seed_hi
//   f32 embedding[vocab*d], then per layer wq, wk, wv, wo [d*d], then unembedding[d*vocab]
inline constexpr std::uint32_t kWeightsVersion = 1;

namespace detail {
inline std::uint32_t narrow_u32(std::size_t v, const char* field) {
    if (v > std::numeric_limits<std::uint32_t>::max()) {
        throw ParameterError(std::string(field) + " does not fit in u32");
    }
    return static_cast<std::uint32_t>(v);
}
}  // namespace detail

inline void write_weights(std::ostream& os, const ModelWeights& w) {
    const ModelConfig& c = w.config;
    binary::write_magic(os, "TKVW");
    binary::write_u32(os, kWeightsVersion);
    binary::write_u32(os, detail::narrow_u32(c.num_layers, "layers"));
    binary::write_u32(os, detail::narrow_u32(c.num_heads, "heads"));
    binary::write_u32(os, detail::narrow_u32(c.head_dim, "head_dim"));
    binary::write_u32(os, detail::narrow_u32(c.model_dim, "model_dim"));
    binary::write_u32(os, detail::narrow_u32(c.vocab_size, "vocab"));
    binary::write_u32(os, detail::narrow_u32(c.max_context, "max_context"));
    binary::write_u32(os, static_cast<std::uint32_t>(c.seed & 0xFFFFFFFFULL));
    binary::write_u32(os, static_cast<std::uint32_t>(c.seed >> 32));
    binary::write_f32s(os, w.embedding.data());
    for (const auto& lw : w.layers) {
        binary::write_f32s(os, lw.wq.data());
        binary::write_f32s(os, lw.wk.data());
        binary::write_f32s(os, lw.wv.data());
        binary::write_f32s(os, lw.wo.data());
    }
    binary::write_f32s(os, w.unembedding.data());
}

inline ModelWeights read_weights(std::istream& is) {
    binary::expect_magic(is, "TKVW");
    const std::uint32_t version = binary::read_u32(is);
    if (version != kWeightsVersion) throw InputError("unsupported TKVW version " + std::to_string(version));
    ModelConfig c;
    c.num_layers = binary::read_u32(is);
    c.num_heads = binary::read_u32(is);
    c.head_dim = binary::read_u32(is);
    c.model_dim = binary::read_u32(is);
    c.vocab_size = binary::read_u32(is);
    c.max_context = binary::read_u32(is);
    const std::uint64_t lo = binary::read_u32(is);
    const std::uint64_t hi = binary::read_u32(is);
    c.seed = lo | (hi << 32);
    try {
        c.validate();
    } catch (const ParameterError& e) {
        throw InputError(std::string("TKVW header invalid: ") + e.what());
    }

    const std::size_t d = c.model_dim;
    ModelWeights w;
    w.config = c;
    w.embedding = Matrix(c.vocab_size, d);
    binary::read_f32s(is, w.embedding.data());
    w.layers.resize(c.num_layers);
    for (auto& lw : w.layers) {
        for (Matrix* m : {&lw.wq, &lw.wk, &lw.wv, &lw.wo}) {
            *m = Matrix(d, d);
            binary::read_f32s(is, m->data());
        }
    }
    w.unembedding = Matrix(d, c.vocab_size);
    binary::read_f32s(is, w.unembedding.data());
    if (is.peek() != std::char_traits<char>::eof()) throw InputError("trailing bytes after TKVW payload");
    return w;
}

inline void save_weights(const std::string& path, const ModelWeights& w) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw InputError("cannot open " + path + " for writing");
    write_weights(os, w);
    if (!os) throw InputError("failed writing " + path);
}

inline ModelWeights load_weights(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw InputError("cannot open " + path);
    return read_weights(is);
}

}  // namespace kvfunnel
