#pragma once

#include <cstddef>
#include <vector>

namespace kvfunnel {

/// Retained entries of one attention head. Positions are absolute token
/// indices, ascending and unique; keys/values hold head_dim floats per
/// position in the same order.
struct HeadCache {
    std::vector<std::size_t> positions;
    std::vector<float> keys;
    std::vector<float> values;

    std::size_t size() const { return positions.size(); }
    friend bool operator==(const HeadCache&, const HeadCache&) = default;
};

struct LayerCache {
    std::vector<HeadCache> heads;
    std::size_t budget = 0;  // retained-per-head target used at compression time
    friend bool operator==(const LayerCache&, const LayerCache&) = default;
};

/// Per-layer, per-head retained key/value rows. Entries appended by decode
/// steps sit after the compressed prompt entries.
struct CompressedKV {
    std::vector<LayerCache> layers;
    std::size_t prompt_length = 0;
    std::size_t next_position = 0;
    std::size_t head_dim = 0;

    std::size_t num_layers() const { return layers.size(); }

    /// Total cached (position, head) entries across layers.
    std::size_t total_entries() const {
        std::size_t total = 0;
        for (const auto& l : layers)
            for (const auto& h : l.heads) total += h.size();
        return total;
    }

    friend bool operator==(const CompressedKV&, const CompressedKV&) = default;
};

}  // namespace kvfunnel
