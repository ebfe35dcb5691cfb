#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "kvfunnel/budget.hpp"
#include "kvfunnel/model.hpp"
#include "kvfunnel/policy.hpp"

namespace kvfunnel {

struct LayerStats {
    std::size_t layer = 0;
    double entropy = 0.0;        // mean row entropy over the causal support, nats
    double locality_mass = 0.0;  // mean mass within `window` positions of the diagonal
    double top1_mass = 0.0;      // mean row maximum
    double sink_mass = 0.0;      // mean mass on position 0
};

/// Shannon entropy (nats) of one probability row; zero entries are skipped.
inline double row_entropy(std::span<const float> row) {
    double h = 0.0;
    for (float p : row) {
        if (p > 0.0f) h -= static_cast<double>(p) * std::log(static_cast<double>(p));
    }
    return h;
}

/// Per-layer attention statistics averaged over heads and query rows.
inline std::vector<LayerStats> layer_stats(const ForwardTrace& trace, std::size_t window) {
    std::vector<LayerStats> out;
    out.reserve(trace.num_layers());
    for (std::size_t l = 0; l < trace.num_layers(); ++l) {
        LayerStats s;
        s.layer = l;
        std::size_t rows = 0;
        for (const Matrix& attn : trace.attention[l]) {
            for (std::size_t q = 0; q < attn.rows(); ++q) {
                auto support = attn.row(q).first(q + 1);
                s.entropy += row_entropy(support);
                double local = 0.0;
                const std::size_t lo = q >= window ? q - window : 0;
                for (std::size_t k = lo; k <= q; ++k) local += support[k];
                s.locality_mass += local;
                s.top1_mass += *std::max_element(support.begin(), support.end());
                s.sink_mass += support[0];
                ++rows;
            }
        }
        if (rows > 0) {
            const double r = static_cast<double>(rows);
            s.entropy /= r;
            s.locality_mass = std::clamp(s.locality_mass / r, 0.0, 1.0);
            s.top1_mass = std::clamp(s.top1_mass / r, 0.0, 1.0);
            s.sink_mass = std::clamp(s.sink_mass / r, 0.0, 1.0);
        }
        out.push_back(s);
    }
    return out;
}

/// Attention mass the last `alpha` query rows place on `positions`,
/// divided by alpha (so 1.0 means nothing was lost).
inline double instruction_window_mass(const Matrix& attn, std::size_t alpha, std::span<const std::size_t> positions) {
    const std::size_t n = attn.rows();
    alpha = std::min(alpha, n);
    double mass = 0.0;
    for (std::size_t q = n - alpha; q < n; ++q) {
        for (std::size_t p : positions) mass += attn(q, p);
    }
    return alpha == 0 ? 0.0 : mass / static_cast<double>(alpha);
}

struct MemoryAccount {
    std::size_t full_bytes = 0;
    std::size_t retained_bytes = 0;
    double ratio = 0.0;
};

/// KV bytes of a full cache of `n` tokens versus the schedule's retained cache.
inline MemoryAccount memory_account(const ModelConfig& config, std::size_t n, const BudgetSchedule& schedule,
                                    std::size_t bytes_per_scalar = 2) {
    if (n < 1) throw ParameterError("context length must be >= 1");
    const std::size_t per_token = config.num_heads * config.head_dim * bytes_per_scalar;
    MemoryAccount acc;
    acc.full_bytes = 2 * config.num_layers * n * per_token;
    std::size_t retained_tokens = 0;
    for (std::size_t b : schedule.per_layer) retained_tokens += std::min(b, n);
    acc.retained_bytes = 2 * retained_tokens * per_token;
    acc.ratio = static_cast<double>(acc.retained_bytes) / static_cast<double>(acc.full_bytes);
    return acc;
}

struct RunReport {
    std::string policy;
    ScheduleMode schedule_mode = ScheduleMode::uniform;
    std::size_t average_budget = 0;
    std::size_t alpha = 0;
    double beta = 0.0;
    std::vector<std::size_t> layer_budgets;
    std::size_t prompt_length = 0;
    std::vector<double> max_abs_logit_diff;  // per decode step
    std::vector<bool> argmax_agree;          // per decode step
    std::vector<double> retained_mass;       // per layer, mean over heads
    MemoryAccount memory;

    double worst_diff() const {
        return max_abs_logit_diff.empty() ? 0.0
                                          : *std::max_element(max_abs_logit_diff.begin(), max_abs_logit_diff.end());
    }
    double agreement_rate() const {
        if (argmax_agree.empty()) return 1.0;
        return static_cast<double>(std::count(argmax_agree.begin(), argmax_agree.end(), true)) /
               static_cast<double>(argmax_agree.size());
    }
    double mean_retained_mass() const {
        if (retained_mass.empty()) return 0.0;
        double s = 0.0;
        for (double v : retained_mass) s += v;
        return s / static_cast<double>(retained_mass.size());
    }
};

struct CompareOptions {
    bool free_running = false;  // policy run continues with its own greedy tokens
    std::size_t bytes_per_scalar = 2;
};

/// Runs FullKV and `policy` from one shared prefill and decodes greedily.
/// By default both runs are fed FullKV's greedy token at each step so the
/// per-step logit difference reflects cache contents only.
inline RunReport compare_vs_full(const ModelWeights& weights, std::span<const TokenId> tokens,
                                 const PolicyConfig& policy, const BudgetSchedule& schedule, std::size_t decode_steps,
                                 CompareOptions opts = {}) {
    if (decode_steps < 1) throw ParameterError("decode_steps must be >= 1");
    const ModelConfig& cfg = weights.config;
    PrefillResult pre = prefill(weights, tokens);
    const std::size_t n = tokens.size();

    auto positions = select_positions(policy, schedule, pre.trace);
    std::vector<std::size_t> budgets = schedule.per_layer;
    if (policy.kind == PolicyKind::full) budgets.assign(budgets.size(), n);
    CompressedKV reference = full_cache(cfg, pre.kv);
    CompressedKV compressed = gather(positions, pre.kv, cfg.head_dim, budgets);

    RunReport report;
    report.policy = to_string(policy.kind);
    report.schedule_mode = schedule.mode;
    report.average_budget = schedule.average_budget;
    report.alpha = schedule.alpha;
    report.beta = schedule.beta;
    report.layer_budgets = budgets;
    report.prompt_length = n;
    report.memory = memory_account(cfg, n, policy.kind == PolicyKind::full ? allocate_uniform(cfg.num_layers, n, 0)
                                                                           : schedule,
                                   opts.bytes_per_scalar);

    report.retained_mass.resize(cfg.num_layers);
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
        double sum = 0.0;
        for (std::size_t h = 0; h < cfg.num_heads; ++h) {
            sum += instruction_window_mass(pre.trace.attention[l][h], policy.alpha, positions[l][h]);
        }
        report.retained_mass[l] = sum / static_cast<double>(cfg.num_heads);
    }

    auto last = pre.trace.logits.row(n - 1);
    TokenId ref_token = argmax(last);
    TokenId policy_token = ref_token;
    for (std::size_t step = 0; step < decode_steps; ++step) {
        std::vector<float> ref_logits = decode_step(weights, reference, ref_token);
        std::vector<float> pol_logits = decode_step(weights, compressed, opts.free_running ? policy_token : ref_token);
        double diff = 0.0;
        for (std::size_t i = 0; i < ref_logits.size(); ++i) {
            diff = std::max(diff, std::fabs(static_cast<double>(ref_logits[i]) - pol_logits[i]));
        }
        report.max_abs_logit_diff.push_back(diff);
        ref_token = argmax(ref_logits);
        policy_token = argmax(pol_logits);
        report.argmax_agree.push_back(ref_token == policy_token);
    }
    return report;
}

}  // namespace kvfunnel
