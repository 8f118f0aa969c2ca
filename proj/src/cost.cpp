// SPDX-License-Identifier: Apache-2.0
#include "moesim/cost.hpp"

#include <cmath>
#include <map>
#include <mutex>
#include <tuple>

namespace moesim {

namespace {

std::int64_t ps_per_byte_from_bw(double bytes_per_sec) {
    if (bytes_per_sec <= 0.0) throw ConfigError("bandwidth must be > 0");
    return std::llround(1e12 / bytes_per_sec);
}

}  // namespace

std::int64_t route_ps_per_byte(const HardwareProfile& profile, TransferRoute route) {
    switch (route) {
        case TransferRoute::dram_vram_pinned:
            return ps_per_byte_from_bw(profile.pcie_bandwidth);
        case TransferRoute::dram_vram_unpinned:
            return ps_per_byte_from_bw(profile.pcie_bandwidth / profile.pinned_bandwidth_factor);
        case TransferRoute::disk_dram:
            return ps_per_byte_from_bw(profile.disk_bandwidth);
        case TransferRoute::vram_dram:
            return ps_per_byte_from_bw(profile.pcie_bandwidth);
    }
    throw ConfigError("unknown transfer route");
}

duration_ps transfer_time(const HardwareProfile& profile, byte_count bytes, TransferRoute route) {
    if (bytes < 0) throw ValidationError("transfer_time: negative byte count");
    if (bytes == 0) return profile.transfer_fixed_latency;
    return profile.transfer_fixed_latency + bytes * route_ps_per_byte(profile, route);
}

duration_ps compute_time(const HardwareProfile& profile, LayerKind kind, std::int64_t tokens) {
    if (tokens < 0) throw ValidationError("compute_time: negative token count");
    switch (kind) {
        case LayerKind::attention: return profile.attn_compute_per_token * tokens;
        case LayerKind::gate: return profile.gate_compute_per_token * tokens;
        case LayerKind::expert: return profile.expert_compute_per_token * tokens;
    }
    throw ConfigError("unknown layer kind");
}

duration_ps CostProfile::io_time(byte_count bytes, TransferRoute route) const {
    if (bytes == 0) return transfer_fixed_latency;
    std::int64_t rate = ps_per_byte_pinned;
    switch (route) {
        case TransferRoute::dram_vram_pinned: rate = ps_per_byte_pinned; break;
        case TransferRoute::dram_vram_unpinned: rate = ps_per_byte_unpinned; break;
        case TransferRoute::disk_dram: rate = ps_per_byte_disk; break;
        case TransferRoute::vram_dram: rate = ps_per_byte_pinned; break;
    }
    return transfer_fixed_latency + bytes * rate;
}

namespace {

using CacheKey = std::tuple<std::string, int, int, int, byte_count, byte_count, byte_count,
                            byte_count, std::string, byte_count, byte_count, byte_count,
                            std::int64_t, std::int64_t, std::int64_t, duration_ps, duration_ps,
                            duration_ps, duration_ps, std::int64_t, int, int, int, int>;

CacheKey make_key(const ModelSpec& spec, const HardwareProfile& profile, int batch_size,
                  const std::optional<QuantConfig>& quant) {
    const QuantConfig q = quant.value_or(QuantConfig{0, 0, 0});
    return {spec.name,
            spec.n_layers,
            spec.n_experts_per_layer,
            spec.top_k,
            spec.attention_bytes,
            spec.gate_bytes,
            spec.expert_bytes,
            spec.kv_bytes_per_token,
            profile.name,
            profile.vram_capacity,
            profile.dram_capacity,
            profile.disk_capacity,
            std::llround(profile.pcie_bandwidth),
            std::llround(profile.pinned_bandwidth_factor * 1000),
            std::llround(profile.disk_bandwidth),
            profile.transfer_fixed_latency,
            profile.attn_compute_per_token,
            profile.gate_compute_per_token,
            profile.expert_compute_per_token,
            std::llround(profile.dequant_ps_per_byte * 1e6),
            batch_size,
            q.bits,
            q.group_size,
            q.zero_scale_group_size};
}

std::mutex g_cost_cache_mutex;
std::map<CacheKey, CostProfile>& cost_cache() {
    static std::map<CacheKey, CostProfile> cache;
    return cache;
}

}  // namespace

CostProfile build_cost_profile(const ModelSpec& spec, const HardwareProfile& profile,
                               int batch_size, const std::optional<QuantConfig>& quant) {
    if (batch_size < 1) throw ValidationError("build_cost_profile: batch_size must be >= 1");
    spec.validate();
    profile.validate();
    if (quant) quant->validate();

    const CacheKey key = make_key(spec, profile, batch_size, quant);
    {
        std::lock_guard<std::mutex> lock(g_cost_cache_mutex);
        auto it = cost_cache().find(key);
        if (it != cost_cache().end()) return it->second;
    }

    CostProfile c;
    c.batch_size = batch_size;
    c.top_k = spec.top_k;
    c.n_experts = spec.n_experts_per_layer;
    c.transfer_fixed_latency = profile.transfer_fixed_latency;
    c.ps_per_byte_pinned = route_ps_per_byte(profile, TransferRoute::dram_vram_pinned);
    c.ps_per_byte_unpinned = route_ps_per_byte(profile, TransferRoute::dram_vram_unpinned);
    c.ps_per_byte_disk = route_ps_per_byte(profile, TransferRoute::disk_dram);
    c.kv_bytes_per_token = spec.kv_bytes_per_token;
    c.quantized = quant.has_value();

    const int bytes_per_elem = spec.dtype.bits_per_element / 8;
    auto transfer_bytes = [&](byte_count raw) -> byte_count {
        if (!quant || bytes_per_elem == 0) return raw;
        return quantized_bytes(raw / bytes_per_elem, *quant);
    };
    // Experts and attention ship quantized; the gate is too small to bother.
    c.attention_transfer_bytes = transfer_bytes(spec.attention_bytes);
    c.gate_transfer_bytes = spec.gate_bytes;
    c.expert_transfer_bytes = transfer_bytes(spec.expert_bytes);
    c.moe_transfer_bytes =
        c.gate_transfer_bytes +
        static_cast<byte_count>(spec.n_experts_per_layer) * c.expert_transfer_bytes;

    c.attn_per_token = profile.attn_compute_per_token;
    c.gate_per_token = profile.gate_compute_per_token;
    c.t_c_e_per_token = profile.expert_compute_per_token;
    if (quant) {
        // Dequantization charged against expert compute, amortized as if each
        // activated expert serves one batch worth of tokens.
        const double dq = profile.dequant_ps_per_byte *
                          static_cast<double>(c.expert_transfer_bytes) / batch_size;
        c.t_c_e_per_token += std::llround(dq);
    }

    c.t_c_a = c.attn_per_token * batch_size;
    c.t_c_g = c.gate_per_token * batch_size;
    c.t_io_a = c.io_time(c.attention_transfer_bytes, TransferRoute::dram_vram_pinned);
    c.t_io_g = c.io_time(c.gate_transfer_bytes, TransferRoute::dram_vram_pinned);
    c.t_io_e = c.io_time(c.expert_transfer_bytes, TransferRoute::dram_vram_pinned);
    c.t_io_moe = c.io_time(c.moe_transfer_bytes, TransferRoute::dram_vram_pinned);

    {
        std::lock_guard<std::mutex> lock(g_cost_cache_mutex);
        cost_cache().emplace(key, c);
    }
    return c;
}

}  // namespace moesim
