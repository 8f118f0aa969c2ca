// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "moesim/correlation.hpp"
#include "moesim/planner.hpp"

namespace moesim {

enum class Variant { simple, multibatch_full_prefetch, strawman_no_reorder, klotski };
const char* variant_name(Variant v);
Variant variant_from_name(const std::string& name);

// The four GPU-side streams of the engine plus the compute stream; cpu_stage
// is the CPU I/O thread moving disk-resident layers through the DRAM window.
enum class StreamId {
    compute = 0,
    weight_load = 1,
    expert_load = 2,
    cache_load = 3,
    cache_store = 4,
    cpu_stage = 5,
};
constexpr int kNumStreams = 6;
const char* stream_name(StreamId s);

enum class OpKind {
    compute_attention,
    compute_gate,
    compute_expert,
    load_weights,
    load_expert,
    load_cache,
    store_cache,
    load_hidden,
    store_hidden,
    offload_expert,
    offload_weights,
    window_stage,
};
const char* op_kind_name(OpKind k);

enum class Phase { attention, gate, expert, other };

// Memory side effects carried by an op, applied by the simulator's ledger.
struct LedgerEffect {
    enum class When { at_start, at_end };
    When when = When::at_start;
    bool is_alloc = true;
    Tier tier = Tier::vram;
    byte_count bytes = 0;
    std::string tag;
};

struct StreamOp {
    std::int32_t id = -1;
    StreamId stream = StreamId::compute;
    OpKind kind = OpKind::compute_attention;
    Phase phase = Phase::other;
    std::int16_t step = -1;
    std::int16_t layer = -1;
    std::int16_t batch = -1;
    std::int16_t expert = -1;
    TensorClass cls = TensorClass::expert;
    std::vector<std::int32_t> deps;
    byte_count payload_bytes = 0;
    std::int64_t token_count = 0;
    TransferRoute route = TransferRoute::dram_vram_pinned;
    bool hot = false;
    std::int32_t reorder_group = -1;  // cold expert computes sharing one pick pool
    std::vector<LedgerEffect> ledger;
};

struct LayerPrefetchRecord {
    int step = 0;
    int layer = 0;
    std::vector<int> prefetched;
    std::vector<int> activated;
    std::vector<int> hottest;  // true top-K by routed tokens
    bool used_fallback = false;
};

struct Schedule {
    Variant variant = Variant::klotski;
    int n_steps = 0;
    int n_layers = 0;
    int n_batches = 0;
    int batch_size = 0;
    int top_k = 0;
    int n_experts = 0;
    std::vector<StreamOp> ops;  // id == index
    std::array<std::vector<std::int32_t>, kNumStreams> streams;
    std::vector<std::pair<int, int>> sync_points;  // weight-stream sync markers (step, layer)
    std::vector<LayerPrefetchRecord> prefetch_records;

    const std::vector<std::int32_t>& stream_ops(StreamId s) const {
        return streams[static_cast<int>(s)];
    }
    std::string to_text() const;
};

struct ScheduleOptions {
    bool immediate_offload = true;  // false: experts freed only at layer end
};

// Returns the K experts to prefetch for (step, layer) given the group's
// previous-layer selections.
using PrefetchProvider =
    std::function<PrefetchDecision(int step, int layer, std::span<const std::uint16_t> prev)>;

// Provider backed by a correlation table snapshot; updates its copy online
// with each layer's actual selections as the schedule is built.
PrefetchProvider make_table_prefetcher(CorrelationTable table, bool online_update = true,
                                       TendencyAggregation agg = TendencyAggregation::sum,
                                       int top_k = 1);

// The expert-aware multi-batch schedule: gate + predicted hot experts
// prefetched during attention, on-demand cold transfers after each gate,
// expert-major compute order (hot first, then colds in transfer order),
// immediate offload.
Schedule build_klotski_schedule(const PipelinePlan& plan, const ActivationTrace& trace,
                                const PrefetchProvider& prefetch,
                                const ScheduleOptions& opts = {});

// simple: single-batch row-by-row traversal, whole-MoE-layer prefetch.
// multibatch_full_prefetch: batch group with whole-MoE-layer prefetch.
// strawman_no_reorder: hot prefetch + on-demand colds, batch-order computes.
Schedule build_baseline_schedule(Variant variant, const PipelinePlan& plan,
                                 const ActivationTrace& trace,
                                 const PrefetchProvider& prefetch = nullptr,
                                 const ScheduleOptions& opts = {});

struct ValidationReport {
    std::vector<std::string> violations;
    bool ok() const { return violations.empty(); }
};

// Structural legality: acyclic dependencies, loads before computes, one load
// and one offload per activated expert per layer pass, token conservation,
// no compute touching an expert that neither activated nor was prefetched.
ValidationReport validate_schedule(const Schedule& s, const ActivationTrace& trace,
                                   const PipelinePlan& plan);

}  // namespace moesim
