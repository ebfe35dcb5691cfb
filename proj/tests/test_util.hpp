#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "kvfunnel/matrix.hpp"
#include "kvfunnel/model.hpp"

namespace kvfunnel::testing {

inline ModelConfig small_config(std::uint64_t seed = 7, std::size_t layers = 3, std::size_t heads = 2,
                                std::size_t head_dim = 8, std::size_t vocab = 64) {
    ModelConfig c;
    c.num_layers = layers;
    c.num_heads = heads;
    c.head_dim = head_dim;
    c.model_dim = heads * head_dim;
    c.vocab_size = vocab;
    c.seed = seed;
    return c;
}

/// Random causal attention map: row q is a softmax over keys 0..q.
inline Matrix random_causal_map(std::mt19937_64& rng, std::size_t n, float spread = 3.0f) {
    std::normal_distribution<float> dist(0.0f, spread);
    Matrix m(n, n);
    for (std::size_t q = 0; q < n; ++q) {
        auto row = m.row(q).first(q + 1);
        for (float& x : row) x = dist(rng);
        softmax_inplace(row);
    }
    return m;
}

/// Row q uniform over 0..q.
inline Matrix causal_uniform_map(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t q = 0; q < n; ++q)
        for (std::size_t k = 0; k <= q; ++k) m(q, k) = 1.0f / static_cast<float>(q + 1);
    return m;
}

/// Trace made of the given per-layer maps, the same map for every head.
inline ForwardTrace synthetic_trace(const std::vector<Matrix>& layer_maps, std::size_t heads) {
    ForwardTrace t;
    for (const Matrix& m : layer_maps) t.attention.emplace_back(heads, m);
    t.logits = Matrix(layer_maps.front().rows(), 1);
    return t;
}

inline std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

/// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / ("kvfunnel_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

}  // namespace kvfunnel::testing
