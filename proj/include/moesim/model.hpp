// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>

#include "moesim/error.hpp"
#include "moesim/types.hpp"

namespace moesim {

struct DTypeSpec {
    std::string name = "bf16";
    int bits_per_element = 16;

    void validate() const;
};

// Static description of an MoE model. Byte sizes are per tensor at the
// model's native dtype; kv_bytes_per_token is per layer.
struct ModelSpec {
    std::string name = "model";
    int n_layers = 1;
    int n_experts_per_layer = 1;
    int top_k = 1;
    byte_count attention_bytes = 0;
    byte_count gate_bytes = 0;
    byte_count expert_bytes = 0;
    byte_count kv_bytes_per_token = 0;
    DTypeSpec dtype;

    void validate() const;
    byte_count layer_bytes() const;
    byte_count total_bytes() const;
};

enum class TensorKind { attention, gate, expert, moe_layer };

byte_count tensor_bytes(const ModelSpec& spec, TensorKind kind);

// Bandwidths in bytes/s; compute rates are per-token durations.
// pcie_bandwidth is the pinned-path peak; unpinned transfers see
// pcie_bandwidth / pinned_bandwidth_factor.
struct HardwareProfile {
    std::string name = "hw";
    byte_count vram_capacity = 1;
    byte_count dram_capacity = 1;
    byte_count disk_capacity = 1;
    double pcie_bandwidth = 1.0;
    double pinned_bandwidth_factor = 1.5;
    double disk_bandwidth = 1.0;
    duration_ps transfer_fixed_latency = 0;
    duration_ps attn_compute_per_token = 0;
    duration_ps gate_compute_per_token = 0;
    duration_ps expert_compute_per_token = 0;
    double dequant_ps_per_byte = 0.0;

    void validate() const;
};

// Sparse-attention KV retention modeled purely as a cache-size cap:
// streaming mode keeps sink_tokens + window_tokens per sequence.
struct KvRetentionPolicy {
    enum class Mode { full, streaming };
    Mode mode = Mode::full;
    int sink_tokens = 4;
    int window_tokens = 256;

    int retained(int present_tokens) const {
        if (mode == Mode::full) return present_tokens;
        const int cap = sink_tokens + window_tokens;
        return present_tokens < cap ? present_tokens : cap;
    }
};

// Presets. Model presets mirror the public Mixtral checkpoints' tensor
// shapes; hardware presets mirror a 24 GB desktop box and an 80 GB server.
ModelSpec mixtral_8x7b_like();
ModelSpec mixtral_8x22b_like();
ModelSpec toy_model(int n_layers = 4, int n_experts = 4, int top_k = 2);
HardwareProfile env1_profile();
HardwareProfile env2_profile();
HardwareProfile toy_profile();

}  // namespace moesim
