#include <algorithm>
#include <numeric>
#include <random>
#include <set>

#include <gtest/gtest.h>

#include "kvfunnel/policy.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace kvfunnel;
using kvfunnel::testing::causal_uniform_map;
using kvfunnel::testing::random_causal_map;
using kvfunnel::testing::small_config;
using kvfunnel::testing::synthetic_trace;

using Positions = std::vector<std::size_t>;

TEST(ScoreWindow, SingleInstructionRow) {
    Matrix attn(4, 4);
    attn(0, 0) = 1.0f;
    attn(1, 0) = attn(1, 1) = 0.5f;
    attn(2, 0) = attn(2, 1) = attn(2, 2) = 1.0f / 3.0f;
    attn(3, 0) = 0.1f;
    attn(3, 1) = 0.2f;
    attn(3, 2) = 0.3f;
    attn(3, 3) = 0.4f;
    const auto s = score_instruction_window(attn, 1, 1, PoolMode::avg);
    EXPECT_EQ(s, (ScoreVector{0.1f, 0.2f, 0.3f, 0.4f}));
}

TEST(ScoreWindow, FullWindowIsScaledAllQueryScore) {
    std::mt19937_64 rng(1);
    const Matrix attn = random_causal_map(rng, 12);
    const auto window = score_instruction_window(attn, 12, 1, PoolMode::avg);
    const auto all = score_all_queries(attn);
    for (std::size_t i = 0; i < 12; ++i) EXPECT_NEAR(window[i] / 12.0, all[i], 1e-6);
}

TEST(ScoreWindow, UniformRowsGiveEqualScores) {
    Matrix attn(5, 5, 0.2f);
    const auto s = score_instruction_window(attn, 3, 1, PoolMode::avg);
    for (float v : s) EXPECT_FLOAT_EQ(v, 0.6f);
}

TEST(ScoreWindow, RejectsOversizedWindow) {
    Matrix attn(3, 3, 1.0f / 3.0f);
    EXPECT_THROW(score_instruction_window(attn, 4, 1, PoolMode::avg), ParameterError);
}

TEST(ScoreWindow, KernelShrinksForShortPrompts) {
    Matrix attn = causal_uniform_map(4);
    EXPECT_NO_THROW(score_instruction_window(attn, 2, 7, PoolMode::max));
}

TEST(ScoreAllQueries, SingleToken) {
    EXPECT_EQ(score_all_queries(Matrix(1, 1, 1.0f)), (ScoreVector{1.0f}));
}

TEST(ScoreAllQueries, CausalUniformHarmonicSums) {
    // s_i = (1/n) sum_{q >= i} 1/(q+1); for n = 4: 25/48, 13/48, 7/48, 3/48.
    const auto s = score_all_queries(causal_uniform_map(4));
    EXPECT_NEAR(s[0], 25.0 / 48.0, 1e-6);
    EXPECT_NEAR(s[1], 13.0 / 48.0, 1e-6);
    EXPECT_NEAR(s[2], 7.0 / 48.0, 1e-6);
    EXPECT_NEAR(s[3], 3.0 / 48.0, 1e-6);
}

TEST(ScoreAllQueries, SumsToOne) {
    std::mt19937_64 rng(2);
    for (int t = 0; t < 50; ++t) {
        const auto s = score_all_queries(random_causal_map(rng, 1 + rng() % 64));
        EXPECT_NEAR(std::accumulate(s.begin(), s.end(), 0.0), 1.0, 1e-5);
    }
}

TEST(Scoring, MatchesBruteForceOracles) {
    std::mt19937_64 rng(3);
    for (int t = 0; t < 100; ++t) {
        const std::size_t n = 1 + rng() % 64;
        const Matrix attn = random_causal_map(rng, n);
        const std::size_t alpha = 1 + rng() % n;
        const std::size_t kernel = std::min<std::size_t>(1 + 2 * (rng() % 4), n % 2 ? n : n - 1);
        const bool use_max = rng() % 2;
        const auto got = score_instruction_window(attn, alpha, kernel, use_max ? PoolMode::max : PoolMode::avg);
        const auto want = oracle::window_scores(attn, alpha, kernel, use_max);
        for (std::size_t i = 0; i < n; ++i) ASSERT_NEAR(got[i], want[i], 1e-6);
        const auto h2o = score_all_queries(attn);
        const auto h2o_want = oracle::all_query_scores(attn);
        for (std::size_t i = 0; i < n; ++i) ASSERT_NEAR(h2o[i], h2o_want[i], 1e-6);
    }
}

TEST(SelectTopk, FullBudgetKeepsEverything) {
    const ScoreVector s{0.5f, 0.1f, 0.9f};
    EXPECT_EQ(select_topk(s, 3, Positions{}), (Positions{0, 1, 2}));
}

TEST(SelectTopk, EqualTopScoresBothSelected) {
    const ScoreVector s{5, 1, 5, 0};
    EXPECT_EQ(select_topk(s, 2, Positions{}), (Positions{0, 2}));
}

TEST(SelectTopk, TiesPreferRecentPositions) {
    const ScoreVector s{3, 3, 3, 3};
    const Positions forced{3};
    EXPECT_EQ(select_topk(s, 2, forced), (Positions{2, 3}));
    EXPECT_EQ(oracle::best_subset({3, 3, 3, 3}, 2, forced), (Positions{2, 3}));
}

TEST(SelectTopk, RejectsInfeasibleRequests) {
    const ScoreVector s{1, 2, 3};
    EXPECT_THROW(select_topk(s, 1, Positions{0, 1}), ParameterError);
    EXPECT_THROW(select_topk(s, 4, Positions{}), ParameterError);
    EXPECT_THROW(select_topk(s, 2, Positions{5}), ParameterError);
}

TEST(SelectTopk, MatchesExhaustiveEnumeration) {
    std::mt19937_64 rng(4);
    int checked = 0;
    while (checked < 200) {
        const std::size_t n = 1 + rng() % 32;
        const std::size_t alpha = rng() % (n + 1);
        const std::size_t k = alpha + rng() % (n - alpha + 1);
        if (oracle::binomial(n - alpha, k - alpha) > 20000) continue;
        ScoreVector s(n);
        const bool integral = checked % 2 == 0;
        for (float& v : s) v = integral ? static_cast<float>(rng() % 4) : static_cast<float>(rng() % 100000) / 7.0f;
        Positions forced(alpha);
        std::iota(forced.begin(), forced.end(), n - alpha);
        ASSERT_EQ(select_topk(s, k, forced), oracle::best_subset(s, k, forced)) << "n=" << n << " k=" << k;
        ++checked;
    }
}

TEST(SelectTopk, ScaleInvariant) {
    std::mt19937_64 rng(5);
    for (int t = 0; t < 100; ++t) {
        const std::size_t n = 2 + rng() % 40;
        ScoreVector s(n);
        for (float& v : s) v = static_cast<float>(rng() % 1000) / 997.0f;
        const std::size_t k = 1 + rng() % n;
        const Positions forced{n - 1};
        const auto base = select_topk(s, k, forced);
        for (float c : {0.25f, 2.0f, 1024.0f}) {
            ScoreVector scaled = s;
            for (float& v : scaled) v *= c;
            ASSERT_EQ(select_topk(scaled, k, forced), base);
        }
    }
}

namespace {

std::vector<Matrix> random_layers(std::mt19937_64& rng, std::size_t layers, std::size_t n) {
    std::vector<Matrix> maps;
    for (std::size_t l = 0; l < layers; ++l) maps.push_back(random_causal_map(rng, n));
    return maps;
}

PolicyConfig policy_of(PolicyKind kind, std::size_t alpha = 2, std::size_t kernel = 3) {
    PolicyConfig p;
    p.kind = kind;
    p.alpha = alpha;
    p.pool_kernel = kernel;
    return p;
}

}  // namespace

TEST(SelectPositions, StreamingKeepsSinkAndRecentWindow) {
    std::mt19937_64 rng(6);
    const auto trace = synthetic_trace(random_layers(rng, 3, 10), 2);
    const auto sched = allocate_uniform(3, 4, 2);
    const auto pos = select_positions(policy_of(PolicyKind::streaming), sched, trace);
    for (const auto& layer : pos)
        for (const auto& head : layer) EXPECT_EQ(head, (Positions{0, 1, 8, 9}));
}

TEST(SelectPositions, BudgetCoveringPromptIsNoOp) {
    std::mt19937_64 rng(7);
    const auto trace = synthetic_trace(random_layers(rng, 4, 9), 3);
    Positions all(9);
    std::iota(all.begin(), all.end(), 0);
    for (PolicyKind kind : kAllPolicies) {
        auto p = policy_of(kind);
        p.beta = 4.0;
        // pyramid top layer must also reach n, so give it a large average
        const auto sched = schedule_for(p, 4, kind == PolicyKind::pyramid ? 400 : 9);
        const auto pos = select_positions(p, sched, trace);
        for (const auto& layer : pos)
            for (const auto& head : layer) EXPECT_EQ(head, all) << to_string(kind);
    }
}

TEST(SelectPositions, CardinalityForcedRetentionAndDeterminism) {
    std::mt19937_64 rng(8);
    for (int t = 0; t < 40; ++t) {
        const std::size_t m = 2 + rng() % 4;
        const std::size_t n = 4 + rng() % 60;
        const std::size_t alpha = 1 + rng() % 3;
        const std::size_t avg = alpha + 1 + rng() % n;
        const auto trace = synthetic_trace(random_layers(rng, m, n), 2);
        for (PolicyKind kind : kAllPolicies) {
            auto p = policy_of(kind, alpha, 1 + 2 * (rng() % 3));
            p.beta = 1.0 + (rng() % 30);
            const auto sched = schedule_for(p, m, avg);
            const auto pos = select_positions(p, sched, trace);
            EXPECT_EQ(pos, select_positions(p, sched, trace));
            for (std::size_t l = 0; l < m; ++l) {
                const std::size_t expect = kind == PolicyKind::full ? n : std::min(sched.per_layer[l], n);
                for (const auto& head : pos[l]) {
                    ASSERT_EQ(head.size(), expect) << to_string(kind);
                    ASSERT_TRUE(std::is_sorted(head.begin(), head.end()));
                    ASSERT_EQ(std::set<std::size_t>(head.begin(), head.end()).size(), head.size());
                    for (std::size_t q = n - alpha; q < n; ++q)
                        ASSERT_TRUE(std::binary_search(head.begin(), head.end(), q)) << to_string(kind);
                }
            }
        }
    }
}

TEST(SelectPositions, PyramidBottomLayerKeepsAtLeastSnapKV) {
    std::mt19937_64 rng(9);
    const auto trace = synthetic_trace(random_layers(rng, 4, 200), 2);
    auto snap = policy_of(PolicyKind::snapkv, 4);
    auto pyr = policy_of(PolicyKind::pyramid, 4);
    pyr.beta = 20.0;
    const auto a = select_positions(snap, schedule_for(snap, 4, 32), trace);
    const auto b = select_positions(pyr, schedule_for(pyr, 4, 32), trace);
    EXPECT_GE(b[0][0].size(), a[0][0].size());
    EXPECT_LE(b[3][0].size(), a[3][0].size());
}

TEST(SelectPositions, SelectedSetIsTopkOptimal) {
    std::mt19937_64 rng(10);
    for (int t = 0; t < 200; ++t) {
        const std::size_t n = 3 + rng() % 14;
        const std::size_t alpha = 1 + rng() % 2;
        const Matrix attn = random_causal_map(rng, n);
        const std::size_t k = alpha + rng() % (n - alpha);
        const auto s = score_instruction_window(attn, alpha, 1, PoolMode::avg);
        Positions forced(alpha);
        std::iota(forced.begin(), forced.end(), n - alpha);
        const auto chosen = select_topk(s, k, forced);
        double chosen_sum = 0.0;
        for (std::size_t p : chosen) chosen_sum += s[p];
        // Every size-k superset of forced: enumerate via bitmasks over n.
        for (std::uint32_t mask = 0; mask < (1u << n); ++mask) {
            if (static_cast<std::size_t>(__builtin_popcount(mask)) != k) continue;
            bool ok = true;
            for (std::size_t f : forced) ok &= (mask >> f) & 1u;
            if (!ok) continue;
            double sum = 0.0;
            for (std::size_t i = 0; i < n; ++i)
                if ((mask >> i) & 1u) sum += s[i];
            ASSERT_GE(chosen_sum + 1e-9, sum);
        }
    }
}

TEST(SelectPositions, GroupedHeadsShareSelection) {
    std::mt19937_64 rng(11);
    ForwardTrace trace;
    trace.attention.resize(2);
    for (auto& layer : trace.attention)
        for (int h = 0; h < 4; ++h) layer.push_back(random_causal_map(rng, 30));
    trace.logits = Matrix(30, 1);
    auto p = policy_of(PolicyKind::snapkv, 2);
    p.group_heads = true;
    p.group_size = 2;
    const auto pos = select_positions(p, allocate_uniform(2, 10, 2), trace);
    for (const auto& layer : pos) {
        EXPECT_EQ(layer[0], layer[1]);
        EXPECT_EQ(layer[2], layer[3]);
    }
    p.group_size = 3;
    EXPECT_THROW(select_positions(p, allocate_uniform(2, 10, 2), trace), ParameterError);
}

TEST(SelectPositions, RejectsMismatchedSchedule) {
    std::mt19937_64 rng(12);
    const auto trace = synthetic_trace(random_layers(rng, 3, 10), 1);
    EXPECT_THROW(select_positions(policy_of(PolicyKind::h2o), allocate_uniform(4, 5, 2), trace), StateError);
    EXPECT_THROW(select_positions(policy_of(PolicyKind::h2o, 3), allocate_uniform(3, 5, 2), trace), StateError);
}

TEST(Compress, GathersMatchingKeyValueRows) {
    const auto w = generate_weights(small_config(21, 3, 2, 8, 64));
    const auto tokens = random_tokens(40, 64, 21);
    const auto pre = prefill(w, tokens);
    auto p = policy_of(PolicyKind::pyramid, 4, 7);
    p.beta = 2.0;
    const auto sched = schedule_for(p, 3, 12);
    const auto cache = compress(p, sched, pre.trace, pre.kv, 8);
    ASSERT_EQ(cache.num_layers(), 3u);
    for (std::size_t l = 0; l < 3; ++l) {
        EXPECT_EQ(cache.layers[l].budget, sched.per_layer[l]);
        for (std::size_t h = 0; h < 2; ++h) {
            const auto& head = cache.layers[l].heads[h];
            ASSERT_EQ(head.size(), sched.per_layer[l]);
            for (std::size_t i = 0; i < head.size(); ++i) {
                const std::size_t p_i = head.positions[i];
                for (std::size_t j = 0; j < 8; ++j) {
                    ASSERT_EQ(head.keys[i * 8 + j], pre.kv[l].keys(p_i, h * 8 + j));
                    ASSERT_EQ(head.values[i * 8 + j], pre.kv[l].values(p_i, h * 8 + j));
                }
            }
        }
    }
}

TEST(Compress, FullBudgetDecodeMatchesFullKV) {
    const auto w = generate_weights(small_config(22));
    const auto tokens = random_tokens(30, 64, 22);
    const auto pre = prefill(w, tokens);
    CompressedKV reference = full_cache(w.config, pre.kv);
    for (PolicyKind kind : kAllPolicies) {
        auto p = policy_of(kind, 2);
        p.beta = 3.0;
        CompressedKV cache = compress(p, schedule_for(p, 3, 200), pre.trace, pre.kv, 8);
        CompressedKV ref = reference;
        for (int step = 0; step < 5; ++step) {
            const TokenId t = static_cast<TokenId>(step * 11 % 64);
            ASSERT_EQ(decode_step(w, cache, t), decode_step(w, ref, t)) << to_string(kind);
        }
    }
}

TEST(PolicyKind, ParsesNames) {
    for (PolicyKind k : kAllPolicies) EXPECT_EQ(parse_policy_kind(to_string(k)), k);
    EXPECT_THROW(parse_policy_kind("lru"), ParameterError);
}
