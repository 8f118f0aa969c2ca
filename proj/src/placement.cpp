// SPDX-License-Identifier: Apache-2.0
#include "moesim/placement.hpp"

#include <algorithm>
#include <sstream>

namespace moesim {

const char* tier_name(Tier t) {
    switch (t) {
        case Tier::vram: return "vram";
        case Tier::dram_pinned: return "dram_pinned";
        case Tier::dram: return "dram";
        case Tier::disk: return "disk";
    }
    return "?";
}

const char* tensor_class_name(TensorClass c) {
    switch (c) {
        case TensorClass::expert: return "expert";
        case TensorClass::gate: return "gate";
        case TensorClass::attention: return "attention";
        case TensorClass::kv_cache: return "kv_cache";
        case TensorClass::activation: return "activation";
    }
    return "?";
}

bool PlacementPlan::any_disk() const {
    auto on_disk = [](Tier t) { return t == Tier::disk; };
    return std::any_of(expert_tier.begin(), expert_tier.end(), on_disk) ||
           std::any_of(gate_tier.begin(), gate_tier.end(), on_disk) ||
           std::any_of(attention_tier.begin(), attention_tier.end(), on_disk) ||
           kv_tier == Tier::disk;
}

byte_count PlacementPlan::disk_bytes_of_layer(int layer, const ModelSpec& spec,
                                              const std::optional<QuantConfig>& quant) const {
    const int bpe = spec.dtype.bits_per_element / 8;
    auto stored = [&](byte_count raw) {
        return (quant && bpe > 0) ? quantized_bytes(raw / bpe, *quant) : raw;
    };
    byte_count b = 0;
    if (expert_tier[layer] == Tier::disk)
        b += stored(spec.expert_bytes) * spec.n_experts_per_layer;
    if (gate_tier[layer] == Tier::disk) b += spec.gate_bytes;
    if (attention_tier[layer] == Tier::disk) b += stored(spec.attention_bytes);
    return b;
}

std::string PlacementPlan::to_text() const {
    std::ostringstream os;
    os << "placement (cpu_window_L=" << cpu_window_L
       << ", kv=" << tier_name(kv_tier) << ", activations=" << tier_name(activation_tier)
       << ", working_set=" << working_set_bytes << " B, kv_total=" << kv_total_bytes << " B)\n";
    os << "layer  expert        gate          attention\n";
    for (int j = 0; j < n_layers; ++j) {
        os << j;
        for (int pad = static_cast<int>(std::to_string(j).size()); pad < 7; ++pad) os << ' ';
        std::string e = tier_name(expert_tier[j]), g = tier_name(gate_tier[j]),
                    a = tier_name(attention_tier[j]);
        e.resize(14, ' ');
        g.resize(14, ' ');
        os << e << g << a << "\n";
    }
    return os.str();
}

PlacementPlan plan_placement(const ModelSpec& spec, const HardwareProfile& profile,
                             const BatchGroupConfig& cfg, const std::optional<QuantConfig>& quant,
                             const KvRetentionPolicy& retention, const PlacementConfig& pcfg) {
    spec.validate();
    profile.validate();
    cfg.validate();
    if (quant) quant->validate();

    const int bpe = spec.dtype.bits_per_element / 8;
    auto stored = [&](byte_count raw) {
        return (quant && bpe > 0) ? quantized_bytes(raw / bpe, *quant) : raw;
    };

    PlacementPlan plan;
    plan.n_layers = spec.n_layers;
    plan.kv_retention = retention;
    plan.expert_tier.assign(spec.n_layers, Tier::dram_pinned);
    plan.gate_tier.assign(spec.n_layers, Tier::dram);
    plan.attention_tier.assign(spec.n_layers, Tier::dram);

    // Aggregate feasibility first so the error reports the true shortfall.
    byte_count total_weights = 0;
    for (int j = 0; j < spec.n_layers; ++j)
        total_weights += stored(spec.expert_bytes) * spec.n_experts_per_layer +
                         spec.gate_bytes + stored(spec.attention_bytes);
    plan.kv_retained_tokens = retention.retained(cfg.prompt_len + cfg.gen_len - 1);
    plan.kv_total_bytes = spec.kv_bytes_per_token * plan.kv_retained_tokens *
                          static_cast<byte_count>(cfg.batch_size) * cfg.n_batches * spec.n_layers;
    const byte_count grand_total = total_weights + plan.kv_total_bytes;
    const byte_count all_capacity =
        profile.vram_capacity + profile.dram_capacity + profile.disk_capacity;
    if (grand_total > all_capacity) {
        throw MemoryInfeasible(
            "model + KV cache (" + std::to_string(grand_total) +
                " B) exceed combined memory (" + std::to_string(all_capacity) + " B)",
            0, 0, grand_total - all_capacity);
    }

    // Working set: two layers of block weights in flight, the prefetched hot
    // experts plus in-flight cold transfers, and the group's activations.
    const byte_count activation_bytes = spec.kv_bytes_per_token *
                                        static_cast<byte_count>(cfg.batch_size) * cfg.n_batches;
    byte_count ws = pcfg.working_set_override;
    if (ws == 0) {
        ws = 2 * (spec.attention_bytes + spec.gate_bytes) +
             static_cast<byte_count>(spec.top_k + pcfg.inflight_cold_experts) * spec.expert_bytes +
             activation_bytes;
    }
    plan.working_set_bytes = ws;
    plan.activation_tier = Tier::vram;
    if (ws > profile.vram_capacity) {
        throw MemoryInfeasible("working set (" + std::to_string(ws) +
                                   " B) exceeds VRAM capacity (" +
                                   std::to_string(profile.vram_capacity) + " B)",
                               ws - profile.vram_capacity, 0, 0);
    }

    byte_count vram_free = profile.vram_capacity - ws;
    byte_count dram_free = profile.dram_capacity;
    byte_count disk_free = profile.disk_capacity;

    // KV cache: VRAM when it fits alongside the working set, else DRAM, else disk.
    if (plan.kv_total_bytes <= vram_free) {
        plan.kv_tier = Tier::vram;
        vram_free -= plan.kv_total_bytes;
    } else if (plan.kv_total_bytes <= dram_free) {
        plan.kv_tier = Tier::dram;
        dram_free -= plan.kv_total_bytes;
    } else {
        plan.kv_tier = Tier::disk;
        disk_free -= plan.kv_total_bytes;
    }

    // Leftover VRAM: whole-layer expert residency earliest-first, then attention.
    const byte_count expert_layer_raw =
        spec.expert_bytes * static_cast<byte_count>(spec.n_experts_per_layer);
    for (int j = 0; j < spec.n_layers && vram_free >= expert_layer_raw; ++j) {
        plan.expert_tier[j] = Tier::vram;
        vram_free -= expert_layer_raw;
    }
    for (int j = 0; j < spec.n_layers && vram_free >= spec.attention_bytes; ++j) {
        if (plan.attention_tier[j] != Tier::dram) continue;
        plan.attention_tier[j] = Tier::vram;
        vram_free -= spec.attention_bytes;
    }

    // DRAM fill with a reserve for the disk staging window. The reserve is
    // recomputed once the spill set is known and the fill repeated.
    const byte_count expert_layer_stored = stored(spec.expert_bytes) * spec.n_experts_per_layer;
    byte_count window_reserve = 0;
    byte_count dram_leftover = dram_free;
    for (int pass = 0; pass < 4; ++pass) {
        byte_count dram_left = dram_free - window_reserve;
        if (dram_left < 0) dram_left = 0;
        // Experts first (pinned), earliest layer first.
        for (int j = 0; j < spec.n_layers; ++j) {
            if (plan.expert_tier[j] == Tier::vram) continue;
            if (expert_layer_stored <= dram_left) {
                plan.expert_tier[j] = Tier::dram_pinned;
                dram_left -= expert_layer_stored;
            } else {
                plan.expert_tier[j] = Tier::disk;
            }
        }
        for (int j = 0; j < spec.n_layers; ++j) {
            if (spec.gate_bytes <= dram_left) {
                plan.gate_tier[j] = Tier::dram;
                dram_left -= spec.gate_bytes;
            } else {
                plan.gate_tier[j] = Tier::disk;
            }
        }
        for (int j = 0; j < spec.n_layers; ++j) {
            if (plan.attention_tier[j] == Tier::vram) continue;
            if (stored(spec.attention_bytes) <= dram_left) {
                plan.attention_tier[j] = Tier::dram;
                dram_left -= stored(spec.attention_bytes);
            } else {
                plan.attention_tier[j] = Tier::disk;
            }
        }
        byte_count max_layer_disk = 0;
        for (int j = 0; j < spec.n_layers; ++j)
            max_layer_disk = std::max(max_layer_disk, plan.disk_bytes_of_layer(j, spec, quant));
        const byte_count want_reserve = pcfg.window_reserve_layers * max_layer_disk;
        dram_leftover = dram_left + window_reserve;
        if (want_reserve <= window_reserve) break;
        window_reserve = std::min(want_reserve, dram_free);
    }

    // Tally and the staging window size.
    byte_count disk_used = plan.kv_tier == Tier::disk ? plan.kv_total_bytes : 0;
    byte_count max_layer_disk = 0;
    for (int j = 0; j < spec.n_layers; ++j) {
        const byte_count d = plan.disk_bytes_of_layer(j, spec, quant);
        disk_used += d;
        max_layer_disk = std::max(max_layer_disk, d);
    }
    if (disk_used > profile.disk_capacity) {
        throw MemoryInfeasible("disk spill (" + std::to_string(disk_used) +
                                   " B) exceeds disk capacity (" +
                                   std::to_string(profile.disk_capacity) + " B)",
                               0, 0, disk_used - profile.disk_capacity);
    }
    if (max_layer_disk > 0) {
        plan.cpu_window_L =
            static_cast<int>(std::min<byte_count>(spec.n_layers, dram_leftover / max_layer_disk));
        if (plan.cpu_window_L < 1) plan.cpu_window_L = 1;
    }

    // Final per-tier accounting.
    auto add = [&](Tier t, byte_count b) { plan.planned_bytes[static_cast<int>(t)] += b; };
    add(Tier::vram, ws);
    add(plan.kv_tier, plan.kv_total_bytes);
    for (int j = 0; j < spec.n_layers; ++j) {
        add(plan.expert_tier[j], plan.expert_tier[j] == Tier::vram ? expert_layer_raw
                                                                   : expert_layer_stored);
        add(plan.gate_tier[j], spec.gate_bytes);
        add(plan.attention_tier[j], plan.attention_tier[j] == Tier::vram
                                        ? spec.attention_bytes
                                        : stored(spec.attention_bytes));
    }
    plan.per_layer_disk_bytes_max = max_layer_disk;

    const byte_count caps[4] = {profile.vram_capacity, 0, profile.dram_capacity,
                                profile.disk_capacity};
    const byte_count dram_planned = plan.planned_bytes[1] + plan.planned_bytes[2];
    if (plan.planned_bytes[0] > caps[0])
        throw MemoryInfeasible("planned VRAM exceeds capacity",
                               plan.planned_bytes[0] - caps[0], 0, 0);
    if (dram_planned > caps[2])
        throw MemoryInfeasible("planned DRAM exceeds capacity", 0, dram_planned - caps[2], 0);
    return plan;
}

std::vector<StageIntent> window_advance(const PlacementPlan& plan, int current_layer) {
    std::vector<StageIntent> intents;
    if (plan.cpu_window_L <= 0) return intents;
    if (current_layer < 0 || current_layer >= plan.n_layers)
        throw RangeError("window_advance: layer out of range");
    StageIntent in;
    in.stage_layer = (current_layer + plan.cpu_window_L) % plan.n_layers;
    in.evict_layer = current_layer;
    intents.push_back(in);
    return intents;
}

MemoryLedger::MemoryLedger(std::array<byte_count, 4> capacities, bool enforce_vram)
    : capacities_(capacities), enforce_vram_(enforce_vram) {}

MemoryLedger MemoryLedger::for_profile(const HardwareProfile& profile, bool enforce_vram) {
    return MemoryLedger({profile.vram_capacity, profile.dram_capacity, profile.dram_capacity,
                         profile.disk_capacity},
                        enforce_vram);
}

void MemoryLedger::alloc(Tier tier, byte_count bytes, const std::string& tag, duration_ps time) {
    if (bytes < 0) throw AccountingError("ledger: negative allocation '" + tag + "'");
    if (live_.count(tag)) throw AccountingError("ledger: duplicate allocation tag '" + tag + "'");
    const int t = static_cast<int>(tier);
    occupancy_[t] += bytes;
    if (enforce_vram_ && tier == Tier::vram && occupancy_[t] > capacities_[t]) {
        throw MemoryInfeasible("VRAM occupancy " + std::to_string(occupancy_[t]) +
                                   " B exceeds capacity " + std::to_string(capacities_[t]) +
                                   " B at tag '" + tag + "'",
                               occupancy_[t] - capacities_[t], 0, 0);
    }
    high_water_[t] = std::max(high_water_[t], occupancy_[t]);
    live_.emplace(tag, std::make_pair(tier, bytes));
    events_.push_back({time, true, tier, bytes, tag});
}

void MemoryLedger::free(const std::string& tag, duration_ps time) {
    auto it = live_.find(tag);
    if (it == live_.end())
        throw AccountingError("ledger: free of unknown tag '" + tag + "'");
    const auto [tier, bytes] = it->second;
    occupancy_[static_cast<int>(tier)] -= bytes;
    events_.push_back({time, false, tier, bytes, tag});
    live_.erase(it);
}

bool MemoryLedger::live(const std::string& tag) const { return live_.count(tag) > 0; }

}  // namespace moesim
