#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "kvfunnel/error.hpp"

namespace kvfunnel {

enum class ScheduleMode { uniform, pyramid };

inline const char* to_string(ScheduleMode m) { return m == ScheduleMode::uniform ? "uniform" : "pyramid"; }

/// Per-layer retained-token budgets.
///
/// `per_layer[l]` is the number of prompt positions layer l keeps per head,
/// including the alpha instruction tokens: per_layer[l] = alpha + k^l.
/// `raw` holds the unscaled real-valued k^l of the arithmetic sequence
/// (alpha excluded), kept for inspection of the endpoint algebra.
struct BudgetSchedule {
    ScheduleMode mode = ScheduleMode::uniform;
    std::vector<std::size_t> per_layer;
    std::vector<double> raw;
    std::size_t alpha = 0;
    double beta = 1.0;
    std::size_t average_budget = 0;
    std::size_t k_total = 0;
    bool renormalized = true;

    std::size_t num_layers() const { return per_layer.size(); }

    std::size_t sum() const { return std::accumulate(per_layer.begin(), per_layer.end(), std::size_t{0}); }

    double mean() const { return per_layer.empty() ? 0.0 : static_cast<double>(sum()) / per_layer.size(); }

    /// k^0 / k^{m-1} of the real-valued sequence.
    double raw_endpoint_ratio() const { return raw.front() / raw.back(); }

    /// k^0 / k^{m-1} after rounding (alpha excluded); infinity if the top layer keeps nothing beyond alpha.
    double rounded_endpoint_ratio() const {
        const double top = static_cast<double>(per_layer.back() - alpha);
        const double bottom = static_cast<double>(per_layer.front() - alpha);
        if (top == 0.0) return std::numeric_limits<double>::infinity();
        return bottom / top;
    }

    friend bool operator==(const BudgetSchedule&, const BudgetSchedule&) = default;
};

inline BudgetSchedule allocate_uniform(std::size_t m, std::size_t average_budget, std::size_t alpha) {
    if (m < 2) throw ParameterError("layer count must be >= 2, got " + std::to_string(m));
    if (average_budget < alpha) {
        throw ParameterError("average budget " + std::to_string(average_budget) + " < alpha " + std::to_string(alpha));
    }
    BudgetSchedule s;
    s.mode = ScheduleMode::uniform;
    s.per_layer.assign(m, average_budget);
    s.raw.assign(m, static_cast<double>(average_budget - alpha));
    s.alpha = alpha;
    s.average_budget = average_budget;
    s.k_total = m * (average_budget - alpha);
    return s;
}

/// Pyramid schedule. With k_total = m * (average_budget - alpha) the
/// sequence runs linearly from k^0 = 2 k_total / m at the bottom layer to
/// k^{m-1} = k_total / (beta m) at the top. That sequence sums to
/// k_total (1 + 1/(2 beta)), so it is scaled by 2beta / (2beta + 1) onto
/// k_total and rounded to nearest. With `renormalize`, the leftover
/// rounding residual is then settled one token at a time: surplus tokens go
/// to layers 0, 1, ...; a deficit is taken from the highest non-empty layer.
/// Each stage preserves the non-increasing order.
inline BudgetSchedule allocate_pyramid(std::size_t m, std::size_t average_budget, std::size_t alpha, double beta,
                                       bool renormalize = true) {
    if (m < 2) throw ParameterError("layer count must be >= 2, got " + std::to_string(m));
    if (average_budget <= alpha) {
        throw ParameterError("average budget " + std::to_string(average_budget) + " must exceed alpha " +
                             std::to_string(alpha));
    }
    if (!(beta >= 1.0) || !std::isfinite(beta)) {
        throw ParameterError("beta must be a finite value >= 1, got " + std::to_string(beta));
    }

    BudgetSchedule s;
    s.mode = ScheduleMode::pyramid;
    s.alpha = alpha;
    s.beta = beta;
    s.average_budget = average_budget;
    s.k_total = m * (average_budget - alpha);
    s.renormalized = renormalize;

    const double total = static_cast<double>(s.k_total);
    const double md = static_cast<double>(m);
    const double bottom = 2.0 * total / md;
    const double top = total / (beta * md);
    s.raw.resize(m);
    for (std::size_t l = 0; l < m; ++l) {
        s.raw[l] = bottom - (bottom - top) * static_cast<double>(l) / (md - 1.0);
    }
    s.raw.back() = top;

    const double shrink = 2.0 * beta / (2.0 * beta + 1.0);
    std::vector<long long> k(m);
    long long assigned = 0;
    for (std::size_t l = 0; l < m; ++l) {
        k[l] = std::max(0LL, static_cast<long long>(std::floor(s.raw[l] * shrink + 0.5)));
        assigned += k[l];
    }

    if (renormalize) {
        long long residual = static_cast<long long>(s.k_total) - assigned;
        std::size_t next = 0;
        while (residual > 0) {
            ++k[next];
            next = (next + 1) % m;
            --residual;
        }
        while (residual < 0) {
            std::size_t l = m;
            while (l > 0 && k[l - 1] == 0) --l;
            // k_total >= 0 and the sum exceeds it, so a non-empty layer exists.
            --k[l - 1];
            ++residual;
        }
    }

    s.per_layer.resize(m);
    for (std::size_t l = 0; l < m; ++l) s.per_layer[l] = alpha + static_cast<std::size_t>(k[l]);
    return s;
}

}  // namespace kvfunnel
