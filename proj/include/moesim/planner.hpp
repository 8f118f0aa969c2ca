// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "moesim/cost.hpp"
#include "moesim/placement.hpp"
#include "moesim/trace.hpp"

namespace moesim {

// Expected number of cold (non-prefetched) activated experts per layer:
// ceil(mean distinct activated - K), clamped to [0, n_experts - K].
struct QueueLengthEstimate {
    std::vector<int> len_q;
    bool missing_stats_fallback = false;
};

QueueLengthEstimate estimate_queue_lengths(const TraceStats& stats, int K, int n_experts);

// How expert compute mass is assumed to split between hot and cold experts
// when solving for n. best: hot experts absorb every token; worst: hot
// compute is zero and all non-prefetched experts activate.
enum class ExpertLoadModel { best, measured, worst };

struct SolveResult {
    int n = 1;
    int binding_inequality = 0;  // 4..7; 0 when nothing binds (n = 1)
    int binding_layer = 0;
    bool worst_case_infeasible = false;
    duration_ps residual_gap = 0;  // unmet right-hand side at the cap, if infeasible
};

// Smallest integer n satisfying the four pipeline-overlap inequalities,
// evaluated per layer with the max over layers returned. `stats` supplies the
// hot-expert token share for the measured model.
SolveResult solve_min_n(const CostProfile& cost, int K, std::span<const int> len_q,
                        ExpertLoadModel model, const TraceStats* stats = nullptr,
                        int n_cap = 1 << 20);

struct PrefetchFeasibility {
    bool full_moe_overlap = false;   // n * t_cA >= t_io_MoE
    bool hot_subset_overlap = false; // n * t_cA >= t_io_G + K * t_io_E
};

PrefetchFeasibility diagnose_full_prefetch(const CostProfile& cost, int n, int n_experts);

struct PipelinePlan {
    int n_batches = 1;
    int K = 1;
    int batch_size = 1;
    ModelSpec model;    // the plan is self-contained for scheduling
    CostProfile cost;
    PlacementPlan placement;
    std::optional<QuantConfig> quant;
    std::vector<int> len_q;
    SolveResult solve;
    PrefetchFeasibility prefetch_diag;
    ExpertLoadModel load_model = ExpertLoadModel::measured;
    bool kv_capped = false;
    int solved_n_uncapped = 0;
    std::vector<std::string> warnings;

    std::string to_text() const;
};

// Composes build_cost_profile, estimate_queue_lengths, solve_min_n and
// plan_placement. When the solved n would break the memory constraint via
// KV-cache growth, the largest feasible n is used and a warning emitted.
PipelinePlan make_plan(const ModelSpec& spec, const HardwareProfile& profile,
                       const BatchGroupConfig& cfg, const TraceStats& stats,
                       const std::optional<QuantConfig>& quant = std::nullopt,
                       ExpertLoadModel model = ExpertLoadModel::measured,
                       const KvRetentionPolicy& retention = {},
                       std::optional<int> n_override = std::nullopt,
                       const PlacementConfig& pcfg = {});

}  // namespace moesim
