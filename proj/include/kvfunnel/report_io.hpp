#pragma once

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "kvfunnel/analysis.hpp"
#include "kvfunnel/binary_io.hpp"
#include "kvfunnel/model.hpp"

namespace kvfunnel {

/// Six significant digits, C locale. Every float written to CSV/JSON goes through here.
inline std::string format_real(double v) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

inline nlohmann::json json_real(double v) {
    if (!std::isfinite(v)) return nullptr;
    return std::strtod(format_real(v).c_str(), nullptr);
}

// ---- LayerStats ----------------------------------------------------------

inline constexpr const char* kLayerStatsHeader = "layer,entropy,locality_mass,top1_mass,sink_mass";

inline void write_layer_stats_csv(std::ostream& os, const std::vector<LayerStats>& stats) {
    os << kLayerStatsHeader << '\n';
    for (const auto& s : stats) {
        os << s.layer << ',' << format_real(s.entropy) << ',' << format_real(s.locality_mass) << ','
           << format_real(s.top1_mass) << ',' << format_real(s.sink_mass) << '\n';
    }
}

inline nlohmann::json layer_stats_json(const std::vector<LayerStats>& stats) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& s : stats) {
        nlohmann::json j;
        j["layer"] = s.layer;
        j["entropy"] = json_real(s.entropy);
        j["locality_mass"] = json_real(s.locality_mass);
        j["top1_mass"] = json_real(s.top1_mass);
        j["sink_mass"] = json_real(s.sink_mass);
        arr.push_back(std::move(j));
    }
    return arr;
}

// ---- RunReport -----------------------------------------------------------

inline constexpr const char* kRunStepsHeader = "policy,step,max_abs_logit_diff,argmax_agree";
inline constexpr const char* kRunLayersHeader = "policy,layer,budget,retained_mass";

inline void write_run_steps_csv(std::ostream& os, const RunReport& r) {
    os << kRunStepsHeader << '\n';
    for (std::size_t i = 0; i < r.max_abs_logit_diff.size(); ++i) {
        os << r.policy << ',' << i << ',' << format_real(r.max_abs_logit_diff[i]) << ','
           << (r.argmax_agree[i] ? 1 : 0) << '\n';
    }
}

inline void write_run_layers_csv(std::ostream& os, const RunReport& r) {
    os << kRunLayersHeader << '\n';
    for (std::size_t l = 0; l < r.layer_budgets.size(); ++l) {
        os << r.policy << ',' << l << ',' << r.layer_budgets[l] << ',' << format_real(r.retained_mass[l]) << '\n';
    }
}

inline nlohmann::json run_report_json(const RunReport& r) {
    nlohmann::json j;
    j["policy"] = r.policy;
    j["schedule"] = {{"mode", to_string(r.schedule_mode)},
                     {"average_budget", r.average_budget},
                     {"alpha", r.alpha},
                     {"beta", json_real(r.beta)},
                     {"per_layer", r.layer_budgets}};
    j["prompt_length"] = r.prompt_length;
    nlohmann::json diffs = nlohmann::json::array();
    for (double d : r.max_abs_logit_diff) diffs.push_back(json_real(d));
    j["max_abs_logit_diff"] = diffs;
    j["argmax_agree"] = r.argmax_agree;
    nlohmann::json mass = nlohmann::json::array();
    for (double v : r.retained_mass) mass.push_back(json_real(v));
    j["retained_mass"] = mass;
    j["memory"] = {{"full_bytes", r.memory.full_bytes},
                   {"retained_bytes", r.memory.retained_bytes},
                   {"compression_ratio", json_real(r.memory.ratio)}};
    return j;
}

// ---- Attention dump ------------------------------------------------------
//   "ATTN" u32 version=1, u32 layers, u32 heads, u32 n,
//   then f32 A[layer][head][query][key], all little-endian.

inline constexpr std::uint32_t kAttentionDumpVersion = 1;

struct AttentionTensor {
    std::size_t layers = 0, heads = 0, n = 0;
    std::vector<float> data;
    friend bool operator==(const AttentionTensor&, const AttentionTensor&) = default;
};

inline AttentionTensor attention_tensor(const ForwardTrace& trace) {
    AttentionTensor t;
    t.layers = trace.num_layers();
    t.heads = t.layers ? trace.attention[0].size() : 0;
    t.n = trace.length();
    t.data.reserve(t.layers * t.heads * t.n * t.n);
    for (const auto& layer : trace.attention)
        for (const Matrix& m : layer) t.data.insert(t.data.end(), m.data().begin(), m.data().end());
    return t;
}

inline void write_attention_dump(std::ostream& os, const AttentionTensor& t) {
    binary::write_magic(os, "ATTN");
    binary::write_u32(os, kAttentionDumpVersion);
    binary::write_u32(os, static_cast<std::uint32_t>(t.layers));
    binary::write_u32(os, static_cast<std::uint32_t>(t.heads));
    binary::write_u32(os, static_cast<std::uint32_t>(t.n));
    binary::write_f32s(os, t.data);
}

inline AttentionTensor read_attention_dump(std::istream& is) {
    binary::expect_magic(is, "ATTN");
    const std::uint32_t version = binary::read_u32(is);
    if (version != kAttentionDumpVersion) throw InputError("unsupported ATTN version " + std::to_string(version));
    AttentionTensor t;
    t.layers = binary::read_u32(is);
    t.heads = binary::read_u32(is);
    t.n = binary::read_u32(is);
    t.data.resize(t.layers * t.heads * t.n * t.n);
    binary::read_f32s(is, t.data);
    return t;
}

}  // namespace kvfunnel
