// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "moesim/cost.hpp"
#include "moesim/model.hpp"
#include "moesim/trace.hpp"

namespace moesim {

enum class Tier { vram = 0, dram_pinned = 1, dram = 2, disk = 3 };
enum class TensorClass { expert = 0, gate, attention, kv_cache, activation };

const char* tier_name(Tier t);
const char* tensor_class_name(TensorClass c);

struct PlacementConfig {
    byte_count working_set_override = 0;  // 0 = use the formula
    int window_reserve_layers = 2;
    int inflight_cold_experts = 2;
};

// Where every tensor class lives, per layer. Weight residency in VRAM is at
// dequantized size; DRAM/disk storage is at transfer (possibly quantized)
// size.
struct PlacementPlan {
    int n_layers = 0;
    std::vector<Tier> expert_tier;     // per layer (all experts of the layer)
    std::vector<Tier> gate_tier;
    std::vector<Tier> attention_tier;
    Tier kv_tier = Tier::vram;
    Tier activation_tier = Tier::vram;
    int cpu_window_L = 0;

    byte_count working_set_bytes = 0;
    byte_count kv_total_bytes = 0;
    int kv_retained_tokens = 0;
    KvRetentionPolicy kv_retention;
    std::array<byte_count, 4> planned_bytes{};  // indexed by Tier
    byte_count per_layer_disk_bytes_max = 0;

    bool any_disk() const;
    byte_count disk_bytes_of_layer(int layer, const ModelSpec& spec,
                                   const std::optional<QuantConfig>& quant) const;
    std::string to_text() const;
};

// Greedy fill honoring the expert-priority rule: working-set reservation in
// VRAM, leftover VRAM to earliest-layer experts then attention, experts to
// pinned DRAM before other weight classes, spill to disk behind a staging
// window reserve.
//
// Working-set formula: 2 layers of (attention+gate) weights + (top_k +
// inflight_cold_experts) expert slots + activations for the whole group.
PlacementPlan plan_placement(const ModelSpec& spec, const HardwareProfile& profile,
                             const BatchGroupConfig& cfg,
                             const std::optional<QuantConfig>& quant = std::nullopt,
                             const KvRetentionPolicy& retention = {},
                             const PlacementConfig& pcfg = {});

struct StageIntent {
    int stage_layer = -1;  // pull this layer's disk-resident tensors into DRAM
    int evict_layer = -1;  // drop this layer's staged copy
};

// Keeps exactly L layers staged ahead of `current_layer`, wrapping across
// steps. Empty when the plan has no CPU window.
std::vector<StageIntent> window_advance(const PlacementPlan& plan, int current_layer);

// Tier occupancy bookkeeping with high-water marks and an event log. A VRAM
// allocation that would exceed capacity rejects the run; freeing an unknown
// tag is a scheduler bug.
class MemoryLedger {
  public:
    struct Event {
        duration_ps time = 0;
        bool is_alloc = false;
        Tier tier = Tier::vram;
        byte_count bytes = 0;
        std::string tag;
    };

    MemoryLedger() = default;
    explicit MemoryLedger(std::array<byte_count, 4> capacities, bool enforce_vram = true);
    static MemoryLedger for_profile(const HardwareProfile& profile, bool enforce_vram = true);

    void alloc(Tier tier, byte_count bytes, const std::string& tag, duration_ps time);
    void free(const std::string& tag, duration_ps time);
    bool live(const std::string& tag) const;

    byte_count occupancy(Tier tier) const { return occupancy_[static_cast<int>(tier)]; }
    byte_count high_water(Tier tier) const { return high_water_[static_cast<int>(tier)]; }
    byte_count capacity(Tier tier) const { return capacities_[static_cast<int>(tier)]; }
    const std::vector<Event>& events() const { return events_; }
    std::int64_t live_count() const { return static_cast<std::int64_t>(live_.size()); }

  private:
    std::array<byte_count, 4> capacities_{};
    std::array<byte_count, 4> occupancy_{};
    std::array<byte_count, 4> high_water_{};
    bool enforce_vram_ = false;
    std::vector<Event> events_;
    std::unordered_map<std::string, std::pair<Tier, byte_count>> live_;
};

}  // namespace moesim
