// SPDX-License-Identifier: Apache-2.0
#include "moesim/model.hpp"

namespace moesim {

void DTypeSpec::validate() const {
    if (bits_per_element != 4 && bits_per_element != 8 && bits_per_element != 16 &&
        bits_per_element != 32) {
        throw ValidationError("dtype '" + name + "': bits_per_element must be 4, 8, 16 or 32");
    }
}

void ModelSpec::validate() const {
    dtype.validate();
    if (n_layers < 1) throw ValidationError(name + ": n_layers must be >= 1");
    if (top_k < 1) throw ValidationError(name + ": top_k must be >= 1");
    if (top_k > n_experts_per_layer)
        throw ValidationError(name + ": top_k exceeds n_experts_per_layer");
    if (attention_bytes <= 0 || gate_bytes <= 0 || expert_bytes <= 0 || kv_bytes_per_token <= 0)
        throw ValidationError(name + ": all byte sizes must be > 0");
}

byte_count ModelSpec::layer_bytes() const {
    return attention_bytes + gate_bytes +
           static_cast<byte_count>(n_experts_per_layer) * expert_bytes;
}

byte_count ModelSpec::total_bytes() const {
    return static_cast<byte_count>(n_layers) * layer_bytes();
}

byte_count tensor_bytes(const ModelSpec& spec, TensorKind kind) {
    switch (kind) {
        case TensorKind::attention: return spec.attention_bytes;
        case TensorKind::gate: return spec.gate_bytes;
        case TensorKind::expert: return spec.expert_bytes;
        case TensorKind::moe_layer:
            return spec.gate_bytes +
                   static_cast<byte_count>(spec.n_experts_per_layer) * spec.expert_bytes;
    }
    throw ConfigError("unknown tensor kind");
}

void HardwareProfile::validate() const {
    if (vram_capacity <= 0 || dram_capacity <= 0 || disk_capacity <= 0)
        throw ValidationError(name + ": all capacities must be > 0");
    if (pcie_bandwidth <= 0.0 || disk_bandwidth <= 0.0)
        throw ValidationError(name + ": all bandwidths must be > 0");
    if (pinned_bandwidth_factor < 1.0)
        throw ValidationError(name + ": pinned_bandwidth_factor must be >= 1");
    if (transfer_fixed_latency < 0)
        throw ValidationError(name + ": transfer_fixed_latency must be >= 0");
}

ModelSpec mixtral_8x7b_like() {
    ModelSpec m;
    m.name = "mixtral-8x7b-like";
    m.n_layers = 32;
    m.n_experts_per_layer = 8;
    m.top_k = 2;
    // 4096 hidden, 14336 ffn, 8 kv heads * 128; three weight matrices per expert.
    m.expert_bytes = 3LL * 4096 * 14336 * 2;
    m.gate_bytes = 8LL * 4096 * 2;
    m.attention_bytes = (4096LL * 4096 + 4096LL * 1024 + 4096LL * 1024 + 4096LL * 4096) * 2;
    m.kv_bytes_per_token = 2LL * 1024 * 2;
    m.dtype = {"bf16", 16};
    return m;
}

ModelSpec mixtral_8x22b_like() {
    ModelSpec m;
    m.name = "mixtral-8x22b-like";
    m.n_layers = 56;
    m.n_experts_per_layer = 8;
    m.top_k = 2;
    m.expert_bytes = 3LL * 6144 * 16384 * 2;
    m.gate_bytes = 8LL * 6144 * 2;
    m.attention_bytes = (6144LL * 6144 + 6144LL * 1024 + 6144LL * 1024 + 6144LL * 6144) * 2;
    m.kv_bytes_per_token = 2LL * 1024 * 2;
    m.dtype = {"bf16", 16};
    return m;
}

ModelSpec toy_model(int n_layers, int n_experts, int top_k) {
    ModelSpec m;
    m.name = "toy";
    m.n_layers = n_layers;
    m.n_experts_per_layer = n_experts;
    m.top_k = top_k;
    m.expert_bytes = 6 * kMiB;
    m.gate_bytes = 8 * kKiB;
    m.attention_bytes = 2 * kMiB;
    m.kv_bytes_per_token = 512;
    m.dtype = {"bf16", 16};
    return m;
}

HardwareProfile env1_profile() {
    HardwareProfile p;
    p.name = "env1";
    p.vram_capacity = 24'000'000'000;
    p.dram_capacity = 256'000'000'000;
    p.disk_capacity = 2'000'000'000'000;
    // Back-solved so one bf16 Mixtral-8x7B expert moves in about 21 ms.
    p.pcie_bandwidth = 16.75e9;
    p.pinned_bandwidth_factor = 1.5;
    p.disk_bandwidth = 1.0e9;
    p.transfer_fixed_latency = 0;
    // Batch-16 decode attention lands at 2.6 ms.
    p.attn_compute_per_token = ps_from_us(162.5);
    p.gate_compute_per_token = ps_from_us(1.625);
    p.expert_compute_per_token = ps_from_us(900.0);
    p.dequant_ps_per_byte = 0.001;
    return p;
}

HardwareProfile env2_profile() {
    HardwareProfile p;
    p.name = "env2";
    p.vram_capacity = 80'000'000'000;
    p.dram_capacity = 800'000'000'000;
    p.disk_capacity = 1'000'000'000'000;
    p.pcie_bandwidth = 55.0e9;
    p.pinned_bandwidth_factor = 1.5;
    p.disk_bandwidth = 3.0e9;
    p.transfer_fixed_latency = 0;
    p.attn_compute_per_token = ps_from_us(40.0);
    p.gate_compute_per_token = ps_from_us(0.5);
    p.expert_compute_per_token = ps_from_us(220.0);
    p.dequant_ps_per_byte = 0.0005;
    return p;
}

HardwareProfile toy_profile() {
    HardwareProfile p;
    p.name = "toy-hw";
    p.vram_capacity = 64 * kMiB;
    p.dram_capacity = 1 * kGiB;
    p.disk_capacity = 16 * kGiB;
    p.pcie_bandwidth = 4.0e9;
    p.pinned_bandwidth_factor = 1.5;
    p.disk_bandwidth = 0.5e9;
    p.transfer_fixed_latency = ps_from_us(5.0);
    p.attn_compute_per_token = ps_from_us(20.0);
    p.gate_compute_per_token = ps_from_us(0.4);
    p.expert_compute_per_token = ps_from_us(120.0);
    p.dequant_ps_per_byte = 0.001;
    return p;
}

}  // namespace moesim
