// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <string>
#include <vector>

#include "moesim/schedule.hpp"

namespace moesim {

struct SimEvent {
    std::int32_t op_id = -1;
    StreamId stream = StreamId::compute;
    duration_ps start = 0;
    duration_ps end = 0;
    byte_count bytes = 0;
    std::int64_t tokens = 0;
};

// Compute-stream idle time attributed to pipeline position. startup covers
// t=0 to the first compute; drain covers the tail after the last compute.
struct BubbleBreakdown {
    duration_ps startup = 0;
    duration_ps intra_attention = 0;
    duration_ps attn_to_moe = 0;     // inter-layer: attention -> gate boundary
    duration_ps intra_gate = 0;
    duration_ps gate_to_expert = 0;  // intra-MoE: waiting for hot experts
    duration_ps intra_expert = 0;    // intra-MoE: between expert computes
    duration_ps moe_to_attn = 0;     // inter-layer: MoE -> next attention
    duration_ps drain = 0;

    duration_ps total() const {
        return startup + intra_attention + attn_to_moe + intra_gate + gate_to_expert +
               intra_expert + moe_to_attn + drain;
    }
};

struct RunMetrics {
    duration_ps makespan = 0;
    duration_ps compute_busy = 0;
    duration_ps bubble_time = 0;              // makespan - compute_busy
    duration_ps expert_layer_bubble_time = 0; // gate_to_expert + intra_expert
    double throughput_tps = 0.0;
    byte_count peak_vram = 0;
    double prefetch_participation = 1.0;
    double hot_accuracy = 1.0;
    std::int64_t tokens_generated = 0;
    BubbleBreakdown bubbles;
};

struct SimOptions {
    bool shared_pcie = false;  // fair-share PCIe between concurrently active load streams
};

struct SimResult {
    std::vector<SimEvent> timeline;
    RunMetrics metrics;
};

// Deterministic discrete-event execution of a validated schedule. Streams
// have capacity 1; an op starts once its stream is free and every dependency
// has finished. Cold-expert computes within a reorder group run
// earliest-loaded-first, ties by expert id. Throws on dependency deadlock;
// VRAM high-water breaches reject the run via the ledger.
SimResult run(const Schedule& schedule, const CostProfile& cost, const PipelinePlan& plan,
              MemoryLedger& ledger, const SimOptions& opts = {});

BubbleBreakdown bubble_stats(std::span<const SimEvent> timeline, const Schedule& schedule);

double throughput(const RunMetrics& metrics, const BatchGroupConfig& cfg);

enum class TimelineFormat { trace_event_json, csv };

// trace_event_json emits one duration event per SimEvent with the stream as
// track, byte-stable for fixed input.
void export_timeline(std::span<const SimEvent> timeline, const Schedule& schedule,
                     const std::string& path, TimelineFormat format);
std::string timeline_to_string(std::span<const SimEvent> timeline, const Schedule& schedule,
                               TimelineFormat format);

// Memory occupancy over time from the ledger event log, CSV.
std::string memory_timeline_csv(const MemoryLedger& ledger);

}  // namespace moesim
