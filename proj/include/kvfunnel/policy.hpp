#pragma once

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "kvfunnel/budget.hpp"
#include "kvfunnel/error.hpp"
#include "kvfunnel/kv_cache.hpp"
#include "kvfunnel/matrix.hpp"
#include "kvfunnel/model.hpp"

namespace kvfunnel {

enum class PolicyKind { full, streaming, h2o, snapkv, pyramid };

inline constexpr PolicyKind kAllPolicies[] = {PolicyKind::full, PolicyKind::streaming, PolicyKind::h2o,
                                              PolicyKind::snapkv, PolicyKind::pyramid};

inline const char* to_string(PolicyKind k) {
    switch (k) {
        case PolicyKind::full: return "full";
        case PolicyKind::streaming: return "streaming";
        case PolicyKind::h2o: return "h2o";
        case PolicyKind::snapkv: return "snapkv";
        case PolicyKind::pyramid: return "pyramid";
    }
    return "?";
}

inline PolicyKind parse_policy_kind(std::string_view s) {
    for (PolicyKind k : kAllPolicies) {
        if (s == to_string(k)) return k;
    }
    throw ParameterError("unknown policy kind '" + std::string(s) + "'");
}

inline const char* to_string(PoolMode m) { return m == PoolMode::avg ? "avg" : "max"; }

inline PoolMode parse_pool_mode(std::string_view s) {
    if (s == "avg") return PoolMode::avg;
    if (s == "max") return PoolMode::max;
    throw ParameterError("unknown pool mode '" + std::string(s) + "'");
}

enum class TieBreak { prefer_recent };

struct PolicyConfig {
    PolicyKind kind = PolicyKind::pyramid;
    std::size_t alpha = 8;
    double beta = 20.0;
    std::size_t pool_kernel = 7;
    PoolMode pool_mode = PoolMode::avg;
    TieBreak tie_break = TieBreak::prefer_recent;
    bool group_heads = false;
    std::size_t group_size = 1;  // heads sharing one score vector when group_heads is set

    void validate() const {
        if (alpha < 1) throw ParameterError("policy alpha must be >= 1");
        if (pool_kernel == 0 || pool_kernel % 2 == 0) throw ParameterError("policy pool_kernel must be odd");
        if (group_heads && group_size < 1) throw ParameterError("policy group_size must be >= 1");
    }

    bool uses_pyramid_schedule() const { return kind == PolicyKind::pyramid; }

    friend bool operator==(const PolicyConfig&, const PolicyConfig&) = default;
};

/// Per-token importance scores for one head; non-negative.
using ScoreVector = std::vector<float>;

/// Attention each key position receives from the last `alpha` query rows,
/// then pooled along the key axis. The kernel shrinks to the largest odd
/// size that fits when n is short.
inline ScoreVector score_instruction_window(const Matrix& attn, std::size_t alpha, std::size_t pool_kernel,
                                            PoolMode pool_mode) {
    const std::size_t n = attn.rows();
    if (alpha < 1 || alpha > n) {
        throw ParameterError("instruction window " + std::to_string(alpha) + " outside [1, " + std::to_string(n) +
                             "]");
    }
    std::vector<double> acc(n, 0.0);
    for (std::size_t q = n - alpha; q < n; ++q) {
        auto row = attn.row(q);
        for (std::size_t i = 0; i < n; ++i) acc[i] += row[i];
    }
    ScoreVector summed(acc.begin(), acc.end());
    std::size_t kernel = std::min(pool_kernel, n % 2 == 1 ? n : n - 1);
    return pool_1d(summed, kernel, pool_mode);
}

/// Mean attention each key position receives over all query rows. No pooling.
inline ScoreVector score_all_queries(const Matrix& attn) {
    const std::size_t n = attn.rows();
    std::vector<double> acc(n, 0.0);
    for (std::size_t q = 0; q < n; ++q) {
        auto row = attn.row(q);
        for (std::size_t i = 0; i < n; ++i) acc[i] += row[i];
    }
    ScoreVector out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<float>(acc[i] / static_cast<double>(n));
    return out;
}

/// `forced` plus the k - |forced| best-scoring other positions. Equal
/// scores go to the larger position. Result is ascending.
inline std::vector<std::size_t> select_topk(std::span<const float> scores, std::size_t k,
                                            std::span<const std::size_t> forced,
                                            TieBreak tie_break = TieBreak::prefer_recent) {
    (void)tie_break;  // prefer_recent is the only mode
    const std::size_t n = scores.size();
    if (k > n) throw ParameterError("k=" + std::to_string(k) + " exceeds n=" + std::to_string(n));
    std::vector<char> is_forced(n, 0);
    std::size_t forced_count = 0;
    for (std::size_t p : forced) {
        if (p >= n) throw ParameterError("forced position " + std::to_string(p) + " out of range");
        if (!is_forced[p]) ++forced_count;
        is_forced[p] = 1;
    }
    if (k < forced_count) {
        throw ParameterError("k=" + std::to_string(k) + " smaller than forced set " + std::to_string(forced_count));
    }

    std::vector<std::size_t> candidates;
    candidates.reserve(n - forced_count);
    for (std::size_t i = 0; i < n; ++i) {
        if (!is_forced[i]) candidates.push_back(i);
    }
    const std::size_t take = k - forced_count;
    auto better = [&](std::size_t a, std::size_t b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return a > b;
    };
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(take), candidates.end(),
                      better);

    std::vector<std::size_t> out;
    out.reserve(k);
    for (std::size_t i = 0; i < n; ++i) {
        if (is_forced[i]) out.push_back(i);
    }
    out.insert(out.end(), candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(take));
    std::sort(out.begin(), out.end());
    return out;
}

/// Retained positions per [layer][head] for a policy, without touching K/V.
///
/// Every layer keeps min(schedule.per_layer[l], n) positions per head,
/// always including the last alpha. A layer whose budget covers the whole
/// prompt keeps everything.
inline std::vector<std::vector<std::vector<std::size_t>>> select_positions(const PolicyConfig& policy,
                                                                           const BudgetSchedule& schedule,
                                                                           const ForwardTrace& trace) {
    policy.validate();
    const std::size_t m = trace.num_layers();
    const std::size_t n = trace.length();
    if (schedule.num_layers() != m) {
        throw StateError("schedule has " + std::to_string(schedule.num_layers()) + " layers, trace has " +
                         std::to_string(m));
    }
    if (policy.kind != PolicyKind::full && schedule.alpha != policy.alpha) {
        throw StateError("schedule alpha " + std::to_string(schedule.alpha) + " != policy alpha " +
                         std::to_string(policy.alpha));
    }

    std::vector<std::size_t> all(n);
    std::iota(all.begin(), all.end(), std::size_t{0});

    std::vector<std::vector<std::vector<std::size_t>>> out(m);
    for (std::size_t l = 0; l < m; ++l) {
        const std::size_t heads = trace.attention[l].size();
        const std::size_t budget = schedule.per_layer[l];
        if (policy.kind == PolicyKind::full || budget >= n) {
            out[l].assign(heads, all);
            continue;
        }
        const std::size_t alpha = std::min(policy.alpha, n);
        std::vector<std::size_t> forced(alpha);
        std::iota(forced.begin(), forced.end(), n - alpha);

        if (policy.kind == PolicyKind::streaming) {
            std::vector<std::size_t> keep(budget - alpha);
            std::iota(keep.begin(), keep.end(), std::size_t{0});
            keep.insert(keep.end(), forced.begin(), forced.end());
            out[l].assign(heads, keep);
            continue;
        }

        std::vector<ScoreVector> scores(heads);
        for (std::size_t h = 0; h < heads; ++h) {
            const Matrix& attn = trace.attention[l][h];
            scores[h] = policy.kind == PolicyKind::h2o
                            ? score_all_queries(attn)
                            : score_instruction_window(attn, alpha, policy.pool_kernel, policy.pool_mode);
        }
        if (policy.group_heads && policy.group_size > 1) {
            if (heads % policy.group_size != 0) {
                throw ParameterError("group_size " + std::to_string(policy.group_size) + " does not divide " +
                                     std::to_string(heads) + " heads");
            }
            for (std::size_t g = 0; g < heads; g += policy.group_size) {
                std::vector<double> mean(n, 0.0);
                for (std::size_t h = g; h < g + policy.group_size; ++h)
                    for (std::size_t i = 0; i < n; ++i) mean[i] += scores[h][i];
                ScoreVector shared(n);
                for (std::size_t i = 0; i < n; ++i)
                    shared[i] = static_cast<float>(mean[i] / static_cast<double>(policy.group_size));
                for (std::size_t h = g; h < g + policy.group_size; ++h) scores[h] = shared;
            }
        }
        out[l].resize(heads);
        for (std::size_t h = 0; h < heads; ++h) {
            out[l][h] = select_topk(scores[h], budget, forced, policy.tie_break);
        }
    }
    return out;
}

/// Copies the selected rows out of the full per-layer K/V.
inline CompressedKV gather(const std::vector<std::vector<std::vector<std::size_t>>>& positions,
                           std::span<const LayerKV> kv, std::size_t head_dim, std::span<const std::size_t> budgets) {
    if (positions.size() != kv.size()) throw StateError("position table and KV layer count differ");
    CompressedKV cache;
    cache.head_dim = head_dim;
    cache.prompt_length = kv.empty() ? 0 : kv.front().keys.rows();
    cache.next_position = cache.prompt_length;
    cache.layers.resize(kv.size());
    for (std::size_t l = 0; l < kv.size(); ++l) {
        auto& layer = cache.layers[l];
        layer.budget = std::min(budgets[l], cache.prompt_length);
        layer.heads.resize(positions[l].size());
        for (std::size_t h = 0; h < positions[l].size(); ++h) {
            auto& head = layer.heads[h];
            head.positions = positions[l][h];
            head.keys.reserve(head.positions.size() * head_dim);
            head.values.reserve(head.positions.size() * head_dim);
            for (std::size_t p : head.positions) {
                auto krow = kv[l].keys.row(p).subspan(h * head_dim, head_dim);
                auto vrow = kv[l].values.row(p).subspan(h * head_dim, head_dim);
                head.keys.insert(head.keys.end(), krow.begin(), krow.end());
                head.values.insert(head.values.end(), vrow.begin(), vrow.end());
            }
        }
    }
    return cache;
}

/// Applies a policy to a prefill: scores, selects, and gathers K/V.
inline CompressedKV compress(const PolicyConfig& policy, const BudgetSchedule& schedule, const ForwardTrace& trace,
                             std::span<const LayerKV> full_kv, std::size_t head_dim) {
    if (full_kv.size() != trace.num_layers()) {
        throw StateError("trace has " + std::to_string(trace.num_layers()) + " layers, KV has " +
                         std::to_string(full_kv.size()));
    }
    auto positions = select_positions(policy, schedule, trace);
    std::vector<std::size_t> budgets = schedule.per_layer;
    if (policy.kind == PolicyKind::full) budgets.assign(budgets.size(), trace.length());
    return gather(positions, full_kv, head_dim, budgets);
}

/// The schedule a policy runs under: pyramid for `pyramid`, uniform otherwise.
inline BudgetSchedule schedule_for(const PolicyConfig& policy, std::size_t layers, std::size_t average_budget,
                                   bool renormalize = true) {
    if (policy.uses_pyramid_schedule()) {
        return allocate_pyramid(layers, average_budget, policy.alpha, policy.beta, renormalize);
    }
    return allocate_uniform(layers, average_budget, policy.alpha);
}

}  // namespace kvfunnel
