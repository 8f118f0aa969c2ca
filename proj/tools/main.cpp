// SPDX-License-Identifier: Apache-2.0
//
// Experiment runner: plan inspection, trace generation, schedule simulation
// and parameter sweeps over the offloaded-MoE pipeline model.
#include <cstdlib>
#include <filesystem>
#include <iostream>

#include <CLI11.hpp>

#include "moesim/experiment.hpp"

using namespace moesim;

namespace {

ExperimentConfig load_config(const std::string& path, std::uint64_t seed_override,
                             const std::string& out_override) {
    ExperimentConfig cfg = load_experiment_config(path);
    if (seed_override != 0) cfg.seed = seed_override;
    if (!out_override.empty()) cfg.output_dir = out_override;
    if (const char* env = std::getenv("MOESIM_OUT"); env && out_override.empty())
        cfg.output_dir = env;
    return cfg;
}

int guarded(const std::function<int()>& body) {
    try {
        return body();
    } catch (const MemoryInfeasible& e) {
        std::cerr << "memory infeasible: " << e.what() << "\n";
        if (e.vram_deficit) std::cerr << "  vram deficit: " << e.vram_deficit << " B\n";
        if (e.dram_deficit) std::cerr << "  dram deficit: " << e.dram_deficit << " B\n";
        if (e.disk_deficit) std::cerr << "  disk deficit: " << e.disk_deficit << " B\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Deterministic scheduler and discrete-event simulator for offloaded "
                 "mixture-of-experts inference pipelines"};
    app.require_subcommand(1);

    std::string cfg_path;
    std::string out_dir;
    std::uint64_t seed = 0;
    std::string format = "json";

    auto* plan_cmd = app.add_subcommand("plan", "Solve the pipeline plan and print it");
    plan_cmd->add_option("--config", cfg_path, "experiment config file")->required();
    plan_cmd->add_option("--seed", seed, "workload seed override");

    auto* trace_cmd = app.add_subcommand("trace", "Generate or inspect activation traces");
    auto* trace_gen = trace_cmd->add_subcommand("gen", "Generate a trace file");
    std::string trace_path;
    trace_gen->add_option("--config", cfg_path, "experiment config file")->required();
    trace_gen->add_option("--out", trace_path, "output trace path")->required();
    trace_gen->add_option("--seed", seed, "workload seed override");
    auto* trace_inspect = trace_cmd->add_subcommand("inspect", "Summarize a trace file");
    trace_inspect->add_option("file", trace_path, "trace file")->required();
    trace_inspect->add_option("--format", format, "summary format: json|csv");

    auto* run_cmd = app.add_subcommand("run", "Run the configured variants and write artifacts");
    run_cmd->add_option("--config", cfg_path, "experiment config file")->required();
    run_cmd->add_option("--out", out_dir, "output directory override");
    run_cmd->add_option("--seed", seed, "workload seed override");

    auto* sweep_cmd = app.add_subcommand("sweep", "Throughput sweep over batch-group sizes");
    sweep_cmd->add_option("--config", cfg_path, "experiment config file")->required();
    sweep_cmd->add_option("--out", out_dir, "output directory override");
    sweep_cmd->add_option("--seed", seed, "workload seed override");

    CLI11_PARSE(app, argc, argv);

    if (plan_cmd->parsed()) {
        return guarded([&] {
            const ExperimentConfig cfg = load_config(cfg_path, seed, out_dir);
            const SingleRun run = simulate_variant(cfg, Variant::klotski);
            std::cout << run.plan.to_text();
            std::cout << "simulated throughput: " << run.metrics.throughput_tps << " tok/s\n";
            return 0;
        });
    }
    if (trace_gen->parsed()) {
        return guarded([&] {
            const ExperimentConfig cfg = load_config(cfg_path, seed, out_dir);
            BatchGroupConfig wl = cfg.workload;
            if (!cfg.n_override) {
                const SingleRun run = simulate_variant(cfg, Variant::klotski);
                wl.n_batches = run.plan.n_batches;
            }
            const ActivationTrace trace = generate_trace(cfg.model, wl, cfg.skew, cfg.seed);
            save_trace(trace, trace_path);
            std::cout << "wrote " << trace_path << "\n";
            return 0;
        });
    }
    if (trace_inspect->parsed()) {
        return guarded([&] {
            const ActivationTrace trace = load_trace(trace_path);
            if (format == "csv") {
                std::cout << "layer,mean_distinct_active,top" << trace.top_k << "_share\n";
                const TraceStats stats = compute_trace_stats(trace, trace.top_k);
                for (int j = 0; j < stats.n_layers; ++j)
                    std::cout << j << ',' << stats.mean_distinct_active[j] << ','
                              << stats.topk_share[j] << "\n";
            } else {
                std::cout << "{\"seed\":" << trace.seed << ",\"skew\":\""
                          << trace.skew.to_string() << "\",\"steps\":" << trace.n_steps
                          << ",\"layers\":" << trace.n_layers
                          << ",\"batches\":" << trace.n_batches
                          << ",\"batch_size\":" << trace.batch_size
                          << ",\"top_k\":" << trace.top_k
                          << ",\"experts\":" << trace.n_experts << "}\n";
            }
            return 0;
        });
    }
    if (run_cmd->parsed()) {
        return guarded([&] {
            const ExperimentConfig cfg = load_config(cfg_path, seed, out_dir);
            const ExperimentResult result = run_experiment(cfg);
            for (const auto& vr : result.results)
                std::cout << variant_name(vr.variant) << ": " << vr.metrics.throughput_tps
                          << " tok/s, bubble " << ms_from_ps(vr.metrics.bubble_time) << " ms\n";
            std::cout << "artifacts in " << cfg.output_dir << "\n";
            return 0;
        });
    }
    if (sweep_cmd->parsed()) {
        return guarded([&] {
            const ExperimentConfig cfg = load_config(cfg_path, seed, out_dir);
            const SweepResult result = run_sweep(cfg);
            std::cout << "solved n = " << result.solved_n << "\n";
            for (const auto& pt : result.points)
                std::cout << "bs=" << pt.batch_size << " n=" << pt.n << " -> "
                          << pt.metrics.throughput_tps << " tok/s\n";
            std::cout << "artifacts in " << cfg.output_dir << "\n";
            return 0;
        });
    }
    return 0;
}
