#pragma once

#include <atomic>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "kvfunnel/analysis.hpp"
#include "kvfunnel/budget.hpp"
#include "kvfunnel/harness/run_spec.hpp"
#include "kvfunnel/model.hpp"
#include "kvfunnel/policy.hpp"
#include "kvfunnel/report_io.hpp"
#include "kvfunnel/weights_io.hpp"

namespace kvfunnel::harness {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;

struct CommandContext {
    std::ostream& out;               // human-facing stdout
    std::optional<std::string> out_dir;  // overrides output.dir when set
    std::optional<OutputFormat> format;  // overrides output.format when set
    std::optional<std::size_t> workers;  // overrides run.workers when set

    std::string dir(const RunSpec& s) const { return out_dir.value_or(s.output.dir); }
    OutputFormat fmt(const RunSpec& s) const { return format.value_or(s.output.format); }
    std::size_t threads(const RunSpec& s) const { return workers.value_or(s.run.workers); }
};

namespace detail {

inline std::ofstream open_output(const std::string& dir, const std::string& name) {
    std::filesystem::create_directories(dir);
    const std::string path = (std::filesystem::path(dir) / name).string();
    std::ofstream os(path, std::ios::binary);
    if (!os) throw InputError("cannot open " + path + " for writing");
    return os;
}

inline void write_json(const std::string& dir, const std::string& name, const nlohmann::json& j) {
    auto os = open_output(dir, name);
    os << j.dump(2) << '\n';
}

/// Weights for one seed: loaded from model.weights if given, else generated.
inline ModelWeights model_for_seed(const RunSpec& s, std::uint64_t seed) {
    if (!s.weights_path.empty()) {
        ModelWeights w = load_weights(s.weights_path);
        const ModelConfig& c = w.config;
        if (c.num_layers != s.model.num_layers || c.num_heads != s.model.num_heads ||
            c.head_dim != s.model.head_dim || c.vocab_size != s.model.vocab_size) {
            throw SpecError("model.weights dimensions do not match the [model] section");
        }
        return w;
    }
    ModelConfig c = s.model;
    c.seed = seed;
    return generate_weights(c);
}

/// Prompt for one seed. Random prompts use tokens.seed + seed; token files
/// hold whitespace-separated decimal ids.
inline std::vector<TokenId> tokens_for_seed(const RunSpec& s, std::uint64_t seed) {
    if (s.tokens.kind == TokenSourceKind::random) {
        return random_tokens(s.tokens.length, s.model.vocab_size, s.tokens.seed + seed);
    }
    std::ifstream in(s.tokens.path);
    if (!in) throw InputError("cannot open token file " + s.tokens.path);
    std::vector<TokenId> out;
    std::string word;
    while (in >> word) {
        out.push_back(static_cast<TokenId>(kvfunnel::harness::detail::parse_u64("tokens.path", word)));
    }
    if (s.tokens.length && out.size() > s.tokens.length) out.resize(s.tokens.length);
    if (out.empty()) throw InputError("token file " + s.tokens.path + " is empty");
    if (out.size() > s.model.max_context) throw InputError("token file longer than model.max_context");
    return out;
}

/// Runs `cells` jobs on up to `workers` threads. Results are indexed by
/// cell, so output order never depends on completion order.
template <typename Row>
struct GridResult {
    std::vector<std::optional<Row>> rows;
    std::vector<std::string> errors;  // empty string: success
};

template <typename Row>
GridResult<Row> run_grid(std::size_t cells, std::size_t workers, const std::function<Row(std::size_t)>& job) {
    GridResult<Row> result;
    result.rows.resize(cells);
    result.errors.resize(cells);
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < cells; i = next++) {
            try {
                result.rows[i] = job(i);
            } catch (const std::exception& e) {
                result.errors[i] = e.what();
            }
        }
    };
    const std::size_t count = std::max<std::size_t>(1, std::min(workers, cells));
    if (count == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        pool.reserve(count);
        for (std::size_t t = 0; t < count; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    return result;
}

}  // namespace detail

// ---- allocate ------------------------------------------------------------

/// Prints `layer,budget` rows and a `# sum=... mean=... ratio=...` summary.
/// Writes allocate.csv/json only when an output directory is given on the
/// command line.
inline int cmd_allocate(const RunSpec& s, const CommandContext& ctx) {
    const PolicyConfig policy = s.policy_config();
    const BudgetSchedule sched =
        schedule_for(policy, s.model.num_layers, s.schedule.average_budget, s.schedule.renormalize);

    std::ostringstream body;
    if (ctx.fmt(s) == OutputFormat::csv) {
        body << "layer,budget\n";
        for (std::size_t l = 0; l < sched.per_layer.size(); ++l) body << l << ',' << sched.per_layer[l] << '\n';
        body << "# mode=" << to_string(sched.mode) << " sum=" << sched.sum() << " mean=" << format_real(sched.mean())
             << " raw_ratio=" << format_real(sched.raw_endpoint_ratio())
             << " rounded_ratio=" << format_real(sched.rounded_endpoint_ratio()) << '\n';
    } else {
        nlohmann::json j;
        j["mode"] = to_string(sched.mode);
        j["per_layer"] = sched.per_layer;
        nlohmann::json raw = nlohmann::json::array();
        for (double v : sched.raw) raw.push_back(json_real(v));
        j["raw"] = raw;
        j["alpha"] = sched.alpha;
        j["beta"] = json_real(sched.beta);
        j["k_total"] = sched.k_total;
        j["sum"] = sched.sum();
        j["mean"] = json_real(sched.mean());
        j["raw_ratio"] = json_real(sched.raw_endpoint_ratio());
        j["rounded_ratio"] = json_real(sched.rounded_endpoint_ratio());
        body << j.dump(2) << '\n';
    }
    ctx.out << body.str();
    if (ctx.out_dir) {
        auto os = detail::open_output(*ctx.out_dir, ctx.fmt(s) == OutputFormat::csv ? "allocate.csv" : "allocate.json");
        os << body.str();
    }
    return kExitOk;
}

// ---- run -----------------------------------------------------------------

inline int cmd_run(const RunSpec& s, const CommandContext& ctx) {
    const PolicyConfig policy = s.policy_config();
    const ModelWeights weights = detail::model_for_seed(s, s.model.seed);
    const auto tokens = detail::tokens_for_seed(s, s.model.seed);
    const BudgetSchedule sched =
        schedule_for(policy, s.model.num_layers, s.schedule.average_budget, s.schedule.renormalize);
    const RunReport report = compare_vs_full(weights, tokens, policy, sched, s.run.decode_steps,
                                             {s.run.free_running, s.run.bytes_per_scalar});
    const std::string dir = ctx.dir(s);
    if (ctx.fmt(s) == OutputFormat::csv) {
        auto steps = detail::open_output(dir, "run_steps.csv");
        write_run_steps_csv(steps, report);
        auto layers = detail::open_output(dir, "run_layers.csv");
        write_run_layers_csv(layers, report);
    } else {
        detail::write_json(dir, "run.json", run_report_json(report));
    }
    ctx.out << "policy=" << report.policy << " n=" << report.prompt_length
            << " worst_logit_diff=" << format_real(report.worst_diff())
            << " agreement=" << format_real(report.agreement_rate())
            << " compression_ratio=" << format_real(report.memory.ratio) << '\n';
    return kExitOk;
}

// ---- bench ---------------------------------------------------------------

inline constexpr const char* kBenchHeader =
    "policy,budget,seed,prompt_length,decode_steps,alpha,beta,layer_budget_sum,max_logit_diff,mean_logit_diff,"
    "agreement_rate,mean_retained_mass,full_bytes,retained_bytes,compression_ratio";

struct BenchCell {
    PolicyKind policy;
    std::size_t budget;
    std::uint64_t seed;
};

struct BenchRow {
    BenchCell cell;
    RunReport report;
};

/// Grid order: policies as listed, then budgets, then seeds.
inline std::vector<BenchCell> bench_cells(const RunSpec& s) {
    std::vector<BenchCell> cells;
    for (PolicyKind p : s.sweep.policies)
        for (std::size_t b : s.sweep.budgets)
            for (std::uint64_t seed : s.effective_seeds()) cells.push_back({p, b, seed});
    return cells;
}

inline std::string bench_csv_row(const BenchRow& r) {
    const RunReport& rep = r.report;
    double mean_diff = 0.0;
    for (double d : rep.max_abs_logit_diff) mean_diff += d;
    if (!rep.max_abs_logit_diff.empty()) mean_diff /= static_cast<double>(rep.max_abs_logit_diff.size());
    std::size_t budget_sum = 0;
    for (std::size_t b : rep.layer_budgets) budget_sum += b;
    std::ostringstream os;
    os << to_string(r.cell.policy) << ',' << r.cell.budget << ',' << r.cell.seed << ',' << rep.prompt_length << ','
       << rep.max_abs_logit_diff.size() << ',' << rep.alpha << ','
       << (r.cell.policy == PolicyKind::pyramid ? format_real(rep.beta) : std::string()) << ',' << budget_sum << ','
       << format_real(rep.worst_diff()) << ',' << format_real(mean_diff) << ',' << format_real(rep.agreement_rate())
       << ',' << format_real(rep.mean_retained_mass()) << ',' << rep.memory.full_bytes << ','
       << rep.memory.retained_bytes << ',' << format_real(rep.memory.ratio);
    return os.str();
}

/// One compare_vs_full per (policy, budget, seed). Completed rows are
/// always written; failed cells go to failures.csv and the exit code is 2.
inline int cmd_bench(const RunSpec& s, const CommandContext& ctx) {
    const auto& pols = s.sweep.policies;
    if (!s.schedule.beta && std::find(pols.begin(), pols.end(), PolicyKind::pyramid) != pols.end())
        throw SpecError("schedule.beta is required when sweep.policies includes pyramid");
    const auto cells = bench_cells(s);
    std::map<std::uint64_t, ModelWeights> weights;
    std::map<std::uint64_t, std::vector<TokenId>> prompts;
    std::map<std::uint64_t, std::string> seed_errors;
    for (std::uint64_t seed : s.effective_seeds()) {
        try {
            weights.emplace(seed, detail::model_for_seed(s, seed));
            prompts.emplace(seed, detail::tokens_for_seed(s, seed));
        } catch (const SpecError&) {
            throw;
        } catch (const std::exception& e) {
            seed_errors[seed] = e.what();
        }
    }

    auto grid = detail::run_grid<BenchRow>(cells.size(), ctx.threads(s), [&](std::size_t i) {
        const BenchCell& c = cells[i];
        if (auto it = seed_errors.find(c.seed); it != seed_errors.end()) throw Error(it->second);
        PolicyConfig policy = s.policy_config();
        policy.kind = c.policy;
        const BudgetSchedule sched = schedule_for(policy, s.model.num_layers, c.budget, s.schedule.renormalize);
        return BenchRow{c, compare_vs_full(weights.at(c.seed), prompts.at(c.seed), policy, sched, s.run.decode_steps,
                                           {s.run.free_running, s.run.bytes_per_scalar})};
    });

    const std::string dir = ctx.dir(s);
    std::size_t failed = 0;
    if (ctx.fmt(s) == OutputFormat::csv) {
        auto os = detail::open_output(dir, "bench.csv");
        os << kBenchHeader << '\n';
        for (const auto& row : grid.rows)
            if (row) os << bench_csv_row(*row) << '\n';
    } else {
        nlohmann::json arr = nlohmann::json::array();
        for (const auto& row : grid.rows) {
            if (!row) continue;
            nlohmann::json j = run_report_json(row->report);
            j["budget"] = row->cell.budget;
            j["seed"] = row->cell.seed;
            arr.push_back(std::move(j));
        }
        detail::write_json(dir, "bench.json", arr);
    }
    std::ostringstream manifest;
    manifest << "policy,budget,seed,error\n";
    for (std::size_t i = 0; i < cells.size(); ++i) {
        if (grid.errors[i].empty()) continue;
        ++failed;
        std::string msg = grid.errors[i];
        std::replace(msg.begin(), msg.end(), ',', ';');
        std::replace(msg.begin(), msg.end(), '\n', ' ');
        manifest << to_string(cells[i].policy) << ',' << cells[i].budget << ',' << cells[i].seed << ',' << msg << '\n';
    }
    const auto failures_path = std::filesystem::path(dir) / "failures.csv";
    if (failed) {
        auto os = detail::open_output(dir, "failures.csv");
        os << manifest.str();
    } else {
        std::filesystem::remove(failures_path);
    }
    ctx.out << "bench: " << (cells.size() - failed) << "/" << cells.size() << " cells completed\n";
    return failed ? kExitRuntime : kExitOk;
}

// ---- sweep ---------------------------------------------------------------

inline constexpr const char* kSweepHeader =
    "beta,alpha,seed,budget,k_bottom,k_top,raw_ratio,rounded_ratio,max_logit_diff,mean_logit_diff,agreement_rate,"
    "mean_retained_mass,compression_ratio";

/// Pyramid policy over betas x alphas x seeds at schedule.average_budget.
inline int cmd_sweep(const RunSpec& s, const CommandContext& ctx) {
    struct Cell {
        double beta;
        std::size_t alpha;
        std::uint64_t seed;
    };
    std::vector<Cell> cells;
    for (double b : s.sweep.betas)
        for (std::size_t a : s.effective_alphas())
            for (std::uint64_t seed : s.effective_seeds()) cells.push_back({b, a, seed});

    std::map<std::uint64_t, ModelWeights> weights;
    std::map<std::uint64_t, std::vector<TokenId>> prompts;
    for (std::uint64_t seed : s.effective_seeds()) {
        weights.emplace(seed, detail::model_for_seed(s, seed));
        prompts.emplace(seed, detail::tokens_for_seed(s, seed));
    }

    struct Row {
        BudgetSchedule sched;
        RunReport report;
    };
    auto grid = detail::run_grid<Row>(cells.size(), ctx.threads(s), [&](std::size_t i) {
        const Cell& c = cells[i];
        PolicyConfig policy = s.policy_config();
        policy.kind = PolicyKind::pyramid;
        policy.alpha = c.alpha;
        policy.beta = c.beta;
        BudgetSchedule sched = schedule_for(policy, s.model.num_layers, s.schedule.average_budget,
                                            s.schedule.renormalize);
        RunReport rep = compare_vs_full(weights.at(c.seed), prompts.at(c.seed), policy, sched, s.run.decode_steps,
                                        {s.run.free_running, s.run.bytes_per_scalar});
        return Row{std::move(sched), std::move(rep)};
    });

    const std::string dir = ctx.dir(s);
    std::size_t failed = 0;
    auto os = detail::open_output(dir, "sweep.csv");
    os << kSweepHeader << '\n';
    for (std::size_t i = 0; i < cells.size(); ++i) {
        if (!grid.rows[i]) {
            ++failed;
            ctx.out << "sweep cell beta=" << format_real(cells[i].beta) << " alpha=" << cells[i].alpha
                    << " seed=" << cells[i].seed << " failed: " << grid.errors[i] << '\n';
            continue;
        }
        const auto& [sched, rep] = *grid.rows[i];
        double mean_diff = 0.0;
        for (double d : rep.max_abs_logit_diff) mean_diff += d;
        mean_diff /= static_cast<double>(rep.max_abs_logit_diff.size());
        os << format_real(cells[i].beta) << ',' << cells[i].alpha << ',' << cells[i].seed << ','
           << s.schedule.average_budget << ',' << sched.per_layer.front() << ',' << sched.per_layer.back() << ','
           << format_real(sched.raw_endpoint_ratio()) << ',' << format_real(sched.rounded_endpoint_ratio()) << ','
           << format_real(rep.worst_diff()) << ',' << format_real(mean_diff) << ','
           << format_real(rep.agreement_rate()) << ',' << format_real(rep.mean_retained_mass()) << ','
           << format_real(rep.memory.ratio) << '\n';
    }
    ctx.out << "sweep: " << (cells.size() - failed) << "/" << cells.size() << " cells completed\n";
    return failed ? kExitRuntime : kExitOk;
}

// ---- analyze -------------------------------------------------------------

inline int cmd_analyze(const RunSpec& s, const CommandContext& ctx) {
    const ModelWeights weights = detail::model_for_seed(s, s.model.seed);
    const auto tokens = detail::tokens_for_seed(s, s.model.seed);
    const PrefillResult pre = prefill(weights, tokens);
    const auto stats = layer_stats(pre.trace, s.run.locality_window);
    const std::string dir = ctx.dir(s);
    if (ctx.fmt(s) == OutputFormat::csv) {
        auto os = detail::open_output(dir, "layer_stats.csv");
        write_layer_stats_csv(os, stats);
    } else {
        detail::write_json(dir, "layer_stats.json", layer_stats_json(stats));
    }
    if (s.output.attention_dump) {
        auto os = detail::open_output(dir, "attention.bin");
        write_attention_dump(os, attention_tensor(pre.trace));
    }
    write_layer_stats_csv(ctx.out, stats);
    return kExitOk;
}

}  // namespace kvfunnel::harness
