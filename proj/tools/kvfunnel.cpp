// kvfunnel: schedule inspection, single runs, policy benchmarks, sweeps and
// attention analysis on the seeded toy transformer.
//
// Exit codes: 0 success, 1 usage/spec error, 2 runtime failure.

#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "kvfunnel/harness/commands.hpp"
#include "kvfunnel/harness/run_spec.hpp"

using namespace kvfunnel;
using namespace kvfunnel::harness;

int main(int argc, char** argv) {
    CLI::App app{"KV-cache compression benchmark on a deterministic toy transformer"};
    app.require_subcommand(1);

    std::string spec_path;
    std::string out_dir;
    std::size_t workers = 0;
    std::string format;
    app.add_option("--spec", spec_path, "Run spec file (key=value with [section] headers)")->required();
    app.add_option("--out", out_dir, "Output directory (overrides output.dir)");
    app.add_option("--workers", workers, "Concurrent grid cells (overrides run.workers)")->check(CLI::PositiveNumber);
    app.add_option("--format", format, "Output format (overrides output.format)")->check(CLI::IsMember({"csv", "json"}));

    auto* allocate = app.add_subcommand("allocate", "Print the per-layer budget schedule");
    auto* run = app.add_subcommand("run", "Compare one policy against FullKV");
    auto* bench = app.add_subcommand("bench", "Policy x budget x seed benchmark grid");
    auto* analyze = app.add_subcommand("analyze", "Per-layer attention statistics");
    auto* sweep = app.add_subcommand("sweep", "Pyramid beta x alpha sweep");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    }

    RunSpec spec;
    try {
        spec = load_spec(spec_path);
        apply_env_overrides(spec);
        validate(spec);
    } catch (const Error& e) {
        std::cerr << "spec error: " << e.what() << '\n';
        return kExitUsage;
    }

    CommandContext ctx{std::cout, std::nullopt, std::nullopt, std::nullopt};
    if (!out_dir.empty()) ctx.out_dir = out_dir;
    if (!format.empty()) ctx.format = parse_format(format);
    if (workers > 0) ctx.workers = workers;

    try {
        if (*allocate) return cmd_allocate(spec, ctx);
        if (*run) return cmd_run(spec, ctx);
        if (*bench) return cmd_bench(spec, ctx);
        if (*analyze) return cmd_analyze(spec, ctx);
        if (*sweep) return cmd_sweep(spec, ctx);
    } catch (const SpecError& e) {
        std::cerr << "spec error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitRuntime;
    }
    return kExitUsage;
}
