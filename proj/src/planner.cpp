// SPDX-License-Identifier: Apache-2.0
#include "moesim/planner.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace moesim {

QueueLengthEstimate estimate_queue_lengths(const TraceStats& stats, int K, int n_experts) {
    if (K < 0 || K > n_experts) throw ValidationError("estimate_queue_lengths: bad K");
    QueueLengthEstimate est;
    est.len_q.assign(stats.n_layers, n_experts - K);
    for (int j = 0; j < stats.n_layers; ++j) {
        if (j >= static_cast<int>(stats.mean_distinct_active.size())) {
            est.missing_stats_fallback = true;  // worst case stands in
            continue;
        }
        const double q = stats.mean_distinct_active[j] - K;
        int len = static_cast<int>(std::ceil(q - 1e-12));
        len = std::clamp(len, 0, n_experts - K);
        est.len_q[j] = len;
    }
    return est;
}

namespace {

struct Inequality {
    duration_ps n_coeff = 0;  // left-hand side per batch
    duration_ps rhs = 0;
};

// Hot/cold expert compute per batch under the load model. Token shares fold
// into the n coefficient because group compute scales with n.
struct ExpertSplit {
    duration_ps hot_per_batch = 0;
    duration_ps cold_per_batch = 0;
};

ExpertSplit expert_split(const CostProfile& cost, ExpertLoadModel model, double measured_share) {
    const double group = static_cast<double>(cost.top_k) * cost.batch_size *
                         static_cast<double>(cost.t_c_e_per_token);
    double share = 0.0;
    switch (model) {
        case ExpertLoadModel::best: share = 1.0; break;
        case ExpertLoadModel::worst: share = 0.0; break;
        case ExpertLoadModel::measured: share = measured_share; break;
    }
    ExpertSplit s;
    s.hot_per_batch = std::llround(share * group);
    s.cold_per_batch = std::llround((1.0 - share) * group);
    return s;
}

}  // namespace

SolveResult solve_min_n(const CostProfile& cost, int K, std::span<const int> len_q,
                        ExpertLoadModel model, const TraceStats* stats, int n_cap) {
    if (cost.t_c_a + cost.t_c_g <= 0)
        throw ValidationError("solve_min_n: attention+gate compute must be positive");
    if (K < 1 || K > cost.n_experts) throw ValidationError("solve_min_n: bad K");
    if (model == ExpertLoadModel::measured && stats == nullptr)
        throw ConfigError("solve_min_n: measured load model requires trace statistics");

    const int n_layers = len_q.empty() ? 1 : static_cast<int>(len_q.size());
    SolveResult result;
    result.n = 1;
    for (int j = 0; j < n_layers; ++j) {
        int lq;
        switch (model) {
            case ExpertLoadModel::best: lq = 0; break;
            case ExpertLoadModel::worst: lq = cost.n_experts - K; break;
            default:
                lq = j < static_cast<int>(len_q.size()) ? len_q[j] : cost.n_experts - K;
        }
        const double share =
            (stats && j < static_cast<int>(stats->topk_share.size())) ? stats->topk_share[j] : 0.0;
        const ExpertSplit split = expert_split(cost, model, share);

        const Inequality ineqs[4] = {
            {cost.t_c_a, cost.t_io_g},
            {cost.t_c_a + cost.t_c_g, cost.t_io_g + static_cast<duration_ps>(K) * cost.t_io_e},
            {cost.t_c_a + cost.t_c_g + split.hot_per_batch,
             cost.t_io_g + static_cast<duration_ps>(K + 1) * cost.t_io_e},
            {cost.t_c_a + cost.t_c_g + split.hot_per_batch + split.cold_per_batch,
             cost.t_io_g + static_cast<duration_ps>(K + lq) * cost.t_io_e + cost.t_io_a},
        };
        for (int i = 0; i < 4; ++i) {
            const auto& q = ineqs[i];
            int need = 1;
            if (q.rhs > 0) {
                if (q.n_coeff <= 0) {
                    result.worst_case_infeasible = true;
                    result.residual_gap = std::max(result.residual_gap, q.rhs);
                    continue;
                }
                const std::int64_t n64 = ceil_div(q.rhs, q.n_coeff);
                if (n64 > n_cap) {
                    result.worst_case_infeasible = true;
                    result.residual_gap = std::max(
                        result.residual_gap, q.rhs - q.n_coeff * static_cast<duration_ps>(n_cap));
                    need = n_cap;
                } else {
                    need = static_cast<int>(n64);
                }
            }
            if (need > result.n) {
                result.n = need;
                result.binding_inequality = i + 4;  // inequality group numbering
                result.binding_layer = j;
            }
        }
    }
    return result;
}

PrefetchFeasibility diagnose_full_prefetch(const CostProfile& cost, int n, int n_experts) {
    PrefetchFeasibility f;
    duration_ps t_io_moe = cost.t_io_moe;
    if (n_experts != cost.n_experts) {
        const byte_count moe_bytes = cost.gate_transfer_bytes +
                                     static_cast<byte_count>(n_experts) *
                                         cost.expert_transfer_bytes;
        t_io_moe = cost.io_time(moe_bytes, TransferRoute::dram_vram_pinned);
    }
    const duration_ps lhs = static_cast<duration_ps>(n) * cost.t_c_a;
    f.full_moe_overlap = lhs >= t_io_moe;
    f.hot_subset_overlap =
        lhs >= cost.t_io_g + static_cast<duration_ps>(cost.top_k) * cost.t_io_e;
    return f;
}

std::string PipelinePlan::to_text() const {
    std::ostringstream os;
    os << "pipeline plan\n";
    os << "  n_batches: " << n_batches;
    if (kv_capped) os << " (solved " << solved_n_uncapped << ", capped by KV memory)";
    os << "\n  batch_size: " << batch_size << "\n  K: " << K << "\n";
    os << "  load model: "
       << (load_model == ExpertLoadModel::best
               ? "best"
               : load_model == ExpertLoadModel::worst ? "worst" : "measured")
       << "\n";
    os << "  binding inequality: ";
    if (solve.binding_inequality == 0)
        os << "none (n=1 suffices)";
    else
        os << "(" << solve.binding_inequality << ") at layer " << solve.binding_layer;
    os << "\n";
    if (solve.worst_case_infeasible)
        os << "  worst-case infeasible; residual " << ms_from_ps(solve.residual_gap) << " ms\n";
    os << "  full MoE-layer overlap (eq.1): " << (prefetch_diag.full_moe_overlap ? "yes" : "no")
       << "\n";
    os << "  gate+hot overlap (eq.2): " << (prefetch_diag.hot_subset_overlap ? "yes" : "no")
       << "\n";
    os << "  len(Q):";
    for (int q : len_q) os << ' ' << q;
    os << "\n";
    if (quant)
        os << "  quant: " << quant->bits << " bits, group " << quant->group_size << "\n";
    for (const auto& w : warnings) os << "  warning: " << w << "\n";
    os << placement.to_text();
    return os.str();
}

PipelinePlan make_plan(const ModelSpec& spec, const HardwareProfile& profile,
                       const BatchGroupConfig& cfg, const TraceStats& stats,
                       const std::optional<QuantConfig>& quant, ExpertLoadModel model,
                       const KvRetentionPolicy& retention, std::optional<int> n_override,
                       const PlacementConfig& pcfg) {
    PipelinePlan plan;
    plan.batch_size = cfg.batch_size;
    plan.K = spec.top_k;
    plan.model = spec;
    plan.quant = quant;
    plan.load_model = model;

    const CostProfile cost = build_cost_profile(spec, profile, cfg.batch_size, quant);
    plan.cost = cost;
    const QueueLengthEstimate qe = estimate_queue_lengths(stats, plan.K, spec.n_experts_per_layer);
    plan.len_q = qe.len_q;
    if (qe.missing_stats_fallback)
        plan.warnings.push_back("missing per-layer statistics; worst-case queue length assumed");

    if (n_override) {
        plan.solve.n = *n_override;
        if (plan.solve.n < 1) throw ValidationError("make_plan: n override must be >= 1");
    } else {
        plan.solve = solve_min_n(cost, plan.K, plan.len_q, model, &stats);
    }
    plan.solved_n_uncapped = plan.solve.n;
    plan.n_batches = plan.solve.n;
    if (plan.solve.worst_case_infeasible)
        plan.warnings.push_back("no finite n fully overlaps the worst case; bubbles predicted");

    // Feasibility in n is monotone: more batches only add KV and activation
    // bytes. Find the largest feasible n that also keeps KV off the disk tier.
    auto placement_for = [&](int n) -> std::optional<PlacementPlan> {
        BatchGroupConfig c = cfg;
        c.n_batches = n;
        try {
            PlacementPlan p = plan_placement(spec, profile, c, quant, retention, pcfg);
            if (p.kv_tier == Tier::disk) return std::nullopt;
            return p;
        } catch (const MemoryInfeasible&) {
            return std::nullopt;
        }
    };

    std::optional<PlacementPlan> placed = placement_for(plan.n_batches);
    if (!placed) {
        int lo = 1, hi = plan.n_batches;  // find largest feasible below hi
        if (!placement_for(1)) {
            // Nothing fits; surface the underlying deficit.
            BatchGroupConfig c = cfg;
            c.n_batches = 1;
            plan_placement(spec, profile, c, quant, retention, pcfg);
            throw MemoryInfeasible("KV cache for a single batch already requires the disk tier");
        }
        while (lo < hi) {
            const int mid = lo + (hi - lo + 1) / 2;
            if (placement_for(mid))
                lo = mid;
            else
                hi = mid - 1;
        }
        plan.n_batches = lo;
        plan.kv_capped = true;
        plan.warnings.push_back(
            "solved n=" + std::to_string(plan.solved_n_uncapped) +
            " breaks the KV memory budget; capped to n=" + std::to_string(plan.n_batches) +
            " (manual strategy adjustment may help)");
        placed = placement_for(plan.n_batches);
    }
    plan.placement = std::move(*placed);
    plan.prefetch_diag = diagnose_full_prefetch(cost, plan.n_batches, spec.n_experts_per_layer);
    return plan;
}

}  // namespace moesim
