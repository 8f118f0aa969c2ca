// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <string>
#include <vector>

#include "moesim/simulator.hpp"

namespace moesim {

// Experiment runner configuration, ingested from a JSON config file.
// model/hardware accept a preset name, {"file": path} include-by-reference,
// or an inline object.
struct ExperimentConfig {
    ModelSpec model;
    HardwareProfile hardware;
    BatchGroupConfig workload;
    SkewSpec skew = SkewSpec::zipf(1.5);
    std::uint64_t seed = 1;
    std::uint64_t warmup_seed = 0;  // 0 = seed + 1
    std::optional<int> n_override;  // absent = "auto" (solve)
    std::vector<Variant> variants{Variant::klotski};
    std::optional<QuantConfig> quant;
    KvRetentionPolicy kv_retention;
    ExpertLoadModel load_model = ExpertLoadModel::measured;
    std::vector<int> sweep_n;             // sweep subcommand; empty = 1..solved+5
    std::vector<int> batch_candidates;    // nonempty = pick batch_size by dry run
    std::string output_dir = "out";
    bool shared_pcie = false;
    bool export_timelines = true;

    void validate() const;
};

ExperimentConfig load_experiment_config(const std::string& path);

struct VariantResult {
    Variant variant = Variant::klotski;
    RunMetrics metrics;
};

struct ExperimentResult {
    PipelinePlan plan;
    std::vector<VariantResult> results;
    std::vector<std::string> files_written;
};

// plan -> schedule -> simulate for every configured variant; writes metrics
// JSON, comparison CSV, timelines, memory and prefetch-accuracy CSVs.
ExperimentResult run_experiment(const ExperimentConfig& cfg);

struct SweepPoint {
    int n = 1;
    int batch_size = 1;
    RunMetrics metrics;
};

struct SweepResult {
    std::vector<SweepPoint> points;
    int solved_n = 1;
    std::vector<std::string> files_written;
};

// Throughput over a range of batch-group sizes (and optionally batch sizes)
// for the expert-aware schedule.
SweepResult run_sweep(const ExperimentConfig& cfg);

// Convenience single-run path used by tests and bindings: build everything
// for one variant and simulate, no files written.
struct SingleRun {
    PipelinePlan plan;
    RunMetrics metrics;
    std::vector<SimEvent> timeline;
};
SingleRun simulate_variant(const ExperimentConfig& cfg, Variant variant,
                           std::optional<int> n_override = std::nullopt);

std::string metrics_to_json(const RunMetrics& m, Variant v);

}  // namespace moesim
