// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>

#include "moesim/model.hpp"
#include "moesim/quant.hpp"
#include "moesim/types.hpp"

namespace moesim {

enum class TransferRoute { dram_vram_pinned, dram_vram_unpinned, disk_dram, vram_dram };
enum class LayerKind { attention, gate, expert };

// Integer ps/byte for a route, rounded from the profile's bandwidth. This is
// what makes transfer_time exactly additive in bytes.
std::int64_t route_ps_per_byte(const HardwareProfile& profile, TransferRoute route);

duration_ps transfer_time(const HardwareProfile& profile, byte_count bytes, TransferRoute route);
duration_ps compute_time(const HardwareProfile& profile, LayerKind kind, std::int64_t tokens);

// Analytic stand-in for the planner's stage-1 hardware measurement pass.
// Aggregates are decode-step costs for one batch of `batch_size` sequences;
// the per-token/per-byte rates price individual schedule ops (prefill
// included). Weight transfers price the pinned DRAM->VRAM path.
struct CostProfile {
    duration_ps t_c_a = 0;           // attention compute per batch
    duration_ps t_c_g = 0;           // gate compute per batch
    duration_ps t_c_e_per_token = 0; // expert compute per routed token (incl. dequant)
    duration_ps t_io_a = 0;
    duration_ps t_io_g = 0;
    duration_ps t_io_e = 0;
    duration_ps t_io_moe = 0;        // whole MoE layer as a single transfer

    duration_ps attn_per_token = 0;
    duration_ps gate_per_token = 0;
    duration_ps transfer_fixed_latency = 0;
    std::int64_t ps_per_byte_pinned = 0;
    std::int64_t ps_per_byte_unpinned = 0;
    std::int64_t ps_per_byte_disk = 0;

    int batch_size = 1;
    int top_k = 1;
    int n_experts = 1;
    byte_count attention_transfer_bytes = 0;
    byte_count gate_transfer_bytes = 0;
    byte_count expert_transfer_bytes = 0;
    byte_count moe_transfer_bytes = 0;
    byte_count kv_bytes_per_token = 0;
    bool quantized = false;

    duration_ps io_time(byte_count bytes, TransferRoute route) const;
};

// Deterministic in all inputs; results are memoized behind a mutex keyed by
// (spec, profile, batch_size, quant).
CostProfile build_cost_profile(const ModelSpec& spec, const HardwareProfile& profile,
                               int batch_size,
                               const std::optional<QuantConfig>& quant = std::nullopt);

}  // namespace moesim
