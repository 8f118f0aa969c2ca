// SPDX-License-Identifier: Apache-2.0
#include "moesim/schedule.hpp"

#include <algorithm>
#include <map>
#include <memory>
#include <set>
#include <sstream>

namespace moesim {

const char* variant_name(Variant v) {
    switch (v) {
        case Variant::simple: return "simple";
        case Variant::multibatch_full_prefetch: return "multibatch_full_prefetch";
        case Variant::strawman_no_reorder: return "strawman_no_reorder";
        case Variant::klotski: return "klotski";
    }
    return "?";
}

Variant variant_from_name(const std::string& name) {
    if (name == "simple") return Variant::simple;
    if (name == "multibatch_full_prefetch") return Variant::multibatch_full_prefetch;
    if (name == "strawman_no_reorder") return Variant::strawman_no_reorder;
    if (name == "klotski") return Variant::klotski;
    throw ConfigError("unknown schedule variant '" + name + "'");
}

const char* stream_name(StreamId s) {
    switch (s) {
        case StreamId::compute: return "compute";
        case StreamId::weight_load: return "weight_load";
        case StreamId::expert_load: return "expert_load";
        case StreamId::cache_load: return "cache_load";
        case StreamId::cache_store: return "cache_store";
        case StreamId::cpu_stage: return "cpu_stage";
    }
    return "?";
}

const char* op_kind_name(OpKind k) {
    switch (k) {
        case OpKind::compute_attention: return "compute_attention";
        case OpKind::compute_gate: return "compute_gate";
        case OpKind::compute_expert: return "compute_expert";
        case OpKind::load_weights: return "load_weights";
        case OpKind::load_expert: return "load_expert";
        case OpKind::load_cache: return "load_cache";
        case OpKind::store_cache: return "store_cache";
        case OpKind::load_hidden: return "load_hidden";
        case OpKind::store_hidden: return "store_hidden";
        case OpKind::offload_expert: return "offload_expert";
        case OpKind::offload_weights: return "offload_weights";
        case OpKind::window_stage: return "window_stage";
    }
    return "?";
}

PrefetchProvider make_table_prefetcher(CorrelationTable table, bool online_update,
                                       TendencyAggregation agg, int top_k) {
    struct State {
        CorrelationTable table;
        std::vector<std::uint16_t> prev_actuals;  // selections one layer back
        int prev_layer = -1;
        int prev_step = -1;
    };
    auto st = std::make_shared<State>();
    st->table = std::move(table);
    return [st, online_update, agg, top_k](int step, int layer,
                                           std::span<const std::uint16_t> prev) {
        if (step != st->prev_step) {
            st->prev_actuals.clear();
            st->prev_layer = -1;
            st->prev_step = step;
        }
        if (online_update && layer > 0 && !prev.empty()) {
            // `prev` holds the actual selections of layer-1; fold the
            // transition that produced them into the table.
            if (layer - 1 == 0) {
                update_table(st->table, 0, {}, prev, top_k);
            } else if (st->prev_layer == layer - 1) {
                update_table(st->table, layer - 1, st->prev_actuals, prev, top_k);
            }
            st->prev_actuals.assign(prev.begin(), prev.end());
            st->prev_layer = layer;
        }
        const int K = std::min(top_k, st->table.n_experts);
        return predict_hot(st->table, layer, prev, K, agg, top_k);
    };
}

namespace {

std::string tag_weights(TensorClass cls, int step, int layer, int batch = -1) {
    const char c = cls == TensorClass::attention ? 'a' : cls == TensorClass::gate ? 'g' : 'm';
    std::string t = std::string("w:") + c + ":" + std::to_string(step) + ":" +
                    std::to_string(layer);
    if (batch >= 0) t += ":" + std::to_string(batch);
    return t;
}

std::string tag_expert(int step, int layer, int expert) {
    return "e:" + std::to_string(step) + ":" + std::to_string(layer) + ":" +
           std::to_string(expert);
}

// Emission machinery shared by all variants.
class Builder {
  public:
    Builder(Variant v, const PipelinePlan& plan, const ActivationTrace& trace)
        : plan_(plan), trace_(trace) {
        s_.variant = v;
        s_.n_steps = trace.n_steps;
        s_.n_layers = trace.n_layers;
        s_.n_batches = trace.n_batches;
        s_.batch_size = trace.batch_size;
        s_.top_k = trace.top_k;
        s_.n_experts = trace.n_experts;
        stage_latest_.assign(trace.n_layers, -1);
        layer_loads_.resize(trace.n_layers);
        kvd_live_.assign(static_cast<std::size_t>(trace.n_layers) * trace.n_batches, false);
        last_store_.assign(kvd_live_.size(), -1);
    }

    std::int32_t add(StreamOp op) {
        op.id = static_cast<std::int32_t>(s_.ops.size());
        std::sort(op.deps.begin(), op.deps.end());
        op.deps.erase(std::unique(op.deps.begin(), op.deps.end()), op.deps.end());
        while (!op.deps.empty() && op.deps.front() < 0) op.deps.erase(op.deps.begin());
        s_.streams[static_cast<int>(op.stream)].push_back(op.id);
        s_.ops.push_back(std::move(op));
        return s_.ops.back().id;
    }

    bool expert_resident(int layer) const {
        return plan_.placement.expert_tier[layer] == Tier::vram;
    }
    bool attention_resident(int layer) const {
        return plan_.placement.attention_tier[layer] == Tier::vram;
    }
    bool gate_resident(int layer) const {
        return plan_.placement.gate_tier[layer] == Tier::vram;
    }
    bool kv_offloaded() const { return plan_.placement.kv_tier != Tier::vram; }

    std::int32_t stage_dep(TensorClass cls, int layer) const {
        const auto tier = cls == TensorClass::expert
                              ? plan_.placement.expert_tier[layer]
                              : cls == TensorClass::gate ? plan_.placement.gate_tier[layer]
                                                         : plan_.placement.attention_tier[layer];
        return tier == Tier::disk ? stage_latest_[layer] : -1;
    }

    std::int32_t emit_attention_load(int step, int layer, std::int32_t issue_dep) {
        StreamOp op;
        op.stream = StreamId::weight_load;
        op.kind = OpKind::load_weights;
        op.step = static_cast<std::int16_t>(step);
        op.layer = static_cast<std::int16_t>(layer);
        op.cls = TensorClass::attention;
        op.payload_bytes = plan_.cost.attention_transfer_bytes;
        op.route = TransferRoute::dram_vram_pinned;
        op.deps = {issue_dep, stage_dep(TensorClass::attention, layer)};
        op.ledger.push_back({LedgerEffect::When::at_start, true, Tier::vram,
                             plan_.model.attention_bytes,
                             tag_weights(TensorClass::attention, step, layer)});
        const auto id = add(std::move(op));
        layer_loads_[layer].push_back(id);
        return id;
    }

    std::int32_t emit_gate_load(int step, int layer, std::int32_t issue_dep) {
        StreamOp op;
        op.stream = StreamId::weight_load;
        op.kind = OpKind::load_weights;
        op.step = static_cast<std::int16_t>(step);
        op.layer = static_cast<std::int16_t>(layer);
        op.cls = TensorClass::gate;
        op.payload_bytes = plan_.cost.gate_transfer_bytes;
        op.route = TransferRoute::dram_vram_pinned;
        op.deps = {issue_dep, stage_dep(TensorClass::gate, layer)};
        op.ledger.push_back({LedgerEffect::When::at_start, true, Tier::vram,
                             plan_.model.gate_bytes, tag_weights(TensorClass::gate, step, layer)});
        const auto id = add(std::move(op));
        layer_loads_[layer].push_back(id);
        return id;
    }

    std::int32_t emit_moe_load(int step, int layer, int batch, std::int32_t issue_dep) {
        StreamOp op;
        op.stream = StreamId::weight_load;
        op.kind = OpKind::load_weights;
        op.step = static_cast<std::int16_t>(step);
        op.layer = static_cast<std::int16_t>(layer);
        op.batch = static_cast<std::int16_t>(batch);
        op.cls = TensorClass::expert;
        op.payload_bytes = plan_.cost.moe_transfer_bytes;
        op.route = TransferRoute::dram_vram_pinned;
        op.deps = {issue_dep, stage_dep(TensorClass::expert, layer),
                   stage_dep(TensorClass::gate, layer)};
        op.ledger.push_back({LedgerEffect::When::at_start, true, Tier::vram,
                             tensor_bytes(plan_.model, TensorKind::moe_layer),
                             tag_weights(TensorClass::gate, step, layer, batch)});
        const auto id = add(std::move(op));
        layer_loads_[layer].push_back(id);
        return id;
    }

    void emit_weight_offload(TensorClass cls, int step, int layer, int batch,
                             std::int32_t after) {
        StreamOp op;
        op.stream = StreamId::cache_store;
        op.kind = OpKind::offload_weights;
        op.step = static_cast<std::int16_t>(step);
        op.layer = static_cast<std::int16_t>(layer);
        op.batch = static_cast<std::int16_t>(batch);
        op.cls = cls;
        op.deps = {after};
        op.ledger.push_back({LedgerEffect::When::at_start, false, Tier::vram, 0,
                             tag_weights(cls, step, layer, batch)});
        add(std::move(op));
    }

    std::int32_t emit_expert_load(StreamId stream, int step, int layer, int expert, bool hot,
                                  std::vector<std::int32_t> deps) {
        StreamOp op;
        op.stream = stream;
        op.kind = OpKind::load_expert;
        op.phase = Phase::expert;
        op.step = static_cast<std::int16_t>(step);
        op.layer = static_cast<std::int16_t>(layer);
        op.expert = static_cast<std::int16_t>(expert);
        op.cls = TensorClass::expert;
        op.hot = hot;
        op.payload_bytes = plan_.cost.expert_transfer_bytes;
        op.route = TransferRoute::dram_vram_pinned;
        op.deps = std::move(deps);
        op.deps.push_back(stage_dep(TensorClass::expert, layer));
        op.ledger.push_back({LedgerEffect::When::at_start, true, Tier::vram,
                             plan_.model.expert_bytes, tag_expert(step, layer, expert)});
        const auto id = add(std::move(op));
        layer_loads_[layer].push_back(id);
        return id;
    }

    void emit_expert_offload(int step, int layer, int expert, std::int32_t after) {
        StreamOp op;
        op.stream = StreamId::cache_store;
        op.kind = OpKind::offload_expert;
        op.phase = Phase::expert;
        op.step = static_cast<std::int16_t>(step);
        op.layer = static_cast<std::int16_t>(layer);
        op.expert = static_cast<std::int16_t>(expert);
        op.cls = TensorClass::expert;
        op.deps = {after};
        op.ledger.push_back(
            {LedgerEffect::When::at_start, false, Tier::vram, 0, tag_expert(step, layer, expert)});
        add(std::move(op));
    }

    std::int32_t emit_cache_load(int step, int layer, int batch, std::int32_t attn_backpressure) {
        if (!kv_offloaded() || step == 0) return -1;
        const int history = plan_.placement.kv_retention.retained(trace_.prompt_len + step - 1);
        StreamOp op;
        op.stream = StreamId::cache_load;
        op.kind = OpKind::load_cache;
        op.phase = Phase::attention;
        op.step = static_cast<std::int16_t>(step);
        op.layer = static_cast<std::int16_t>(layer);
        op.batch = static_cast<std::int16_t>(batch);
        op.cls = TensorClass::kv_cache;
        op.payload_bytes = static_cast<byte_count>(history) * trace_.batch_size *
                           plan_.model.kv_bytes_per_token;
        op.route = plan_.placement.kv_tier == Tier::disk ? TransferRoute::disk_dram
                                                         : TransferRoute::dram_vram_unpinned;
        op.deps = {last_store_[kv_index(layer, batch)], attn_backpressure};
        op.ledger.push_back({LedgerEffect::When::at_start, true, Tier::vram, op.payload_bytes,
                             kv_tag("kvl", step, layer, batch)});
        return add(std::move(op));
    }

    void emit_cache_store(int step, int layer, int batch, std::int32_t attn_id) {
        if (!kv_offloaded()) return;
        StreamOp op;
        op.stream = StreamId::cache_store;
        op.kind = OpKind::store_cache;
        op.phase = Phase::attention;
        op.step = static_cast<std::int16_t>(step);
        op.layer = static_cast<std::int16_t>(layer);
        op.batch = static_cast<std::int16_t>(batch);
        op.cls = TensorClass::kv_cache;
        op.payload_bytes = static_cast<byte_count>(trace_.tokens_per_batch(step)) *
                           plan_.model.kv_bytes_per_token;
        op.route = TransferRoute::vram_dram;
        op.deps = {attn_id};
        op.ledger.push_back(
            {LedgerEffect::When::at_end, false, Tier::vram, 0, kv_tag("kvn", step, layer, batch)});
        const std::size_t idx = kv_index(layer, batch);
        const std::string dram_tag =
            "kvd:" + std::to_string(layer) + ":" + std::to_string(batch);
        if (kvd_live_[idx])
            op.ledger.push_back({LedgerEffect::When::at_end, false, Tier::dram, 0, dram_tag});
        const int retained = plan_.placement.kv_retention.retained(trace_.prompt_len + step);
        op.ledger.push_back({LedgerEffect::When::at_end, true, Tier::dram,
                             static_cast<byte_count>(retained) * trace_.batch_size *
                                 plan_.model.kv_bytes_per_token,
                             dram_tag});
        kvd_live_[idx] = true;
        last_store_[idx] = add(std::move(op));
    }

    std::int32_t emit_attention_compute(int step, int layer, int batch, std::int32_t weight_dep,
                                        std::int32_t cache_dep) {
        StreamOp op;
        op.stream = StreamId::compute;
        op.kind = OpKind::compute_attention;
        op.phase = Phase::attention;
        op.step = static_cast<std::int16_t>(step);
        op.layer = static_cast<std::int16_t>(layer);
        op.batch = static_cast<std::int16_t>(batch);
        op.cls = TensorClass::attention;
        op.token_count = trace_.tokens_per_batch(step);
        op.deps = {weight_dep, cache_dep};
        const byte_count fresh_bytes = static_cast<byte_count>(trace_.tokens_per_batch(step)) *
                                       plan_.model.kv_bytes_per_token;
        if (kv_offloaded()) {
            op.ledger.push_back({LedgerEffect::When::at_end, true, Tier::vram, fresh_bytes,
                                 kv_tag("kvn", step, layer, batch)});
            if (cache_dep >= 0)
                op.ledger.push_back({LedgerEffect::When::at_end, false, Tier::vram, 0,
                                     kv_tag("kvl", step, layer, batch)});
        } else {
            op.ledger.push_back({LedgerEffect::When::at_end, true, Tier::vram, fresh_bytes,
                                 kv_tag("kvr", step, layer, batch)});
        }
        return add(std::move(op));
    }

    std::int32_t emit_gate_compute(int step, int layer, int batch, std::int32_t weight_dep,
                                   std::int32_t attn_dep) {
        StreamOp op;
        op.stream = StreamId::compute;
        op.kind = OpKind::compute_gate;
        op.phase = Phase::gate;
        op.step = static_cast<std::int16_t>(step);
        op.layer = static_cast<std::int16_t>(layer);
        op.batch = static_cast<std::int16_t>(batch);
        op.cls = TensorClass::gate;
        op.token_count = trace_.tokens_per_batch(step);
        op.deps = {weight_dep, attn_dep};
        return add(std::move(op));
    }

    std::int32_t emit_expert_compute(int step, int layer, int expert, std::int64_t tokens,
                                     bool hot, int batch, std::int32_t load_dep,
                                     std::int32_t gate_dep, std::int32_t group) {
        StreamOp op;
        op.stream = StreamId::compute;
        op.kind = OpKind::compute_expert;
        op.phase = Phase::expert;
        op.step = static_cast<std::int16_t>(step);
        op.layer = static_cast<std::int16_t>(layer);
        op.batch = static_cast<std::int16_t>(batch);
        op.expert = static_cast<std::int16_t>(expert);
        op.cls = TensorClass::expert;
        op.token_count = tokens;
        op.hot = hot;
        op.reorder_group = group;
        op.deps = {load_dep, gate_dep};
        return add(std::move(op));
    }

    // Advance the DRAM window at the end of a block, once every GPU load of
    // the evicted layer has been emitted.
    void emit_window_advance(int step, int layer, std::int32_t issue_dep) {
        if (plan_.placement.cpu_window_L > 0) {
            for (const StageIntent& intent : window_advance(plan_.placement, layer)) {
                const byte_count stage_bytes = plan_.placement.disk_bytes_of_layer(
                    intent.stage_layer, plan_.model, plan_.quant);
                const byte_count evict_bytes =
                    plan_.placement.disk_bytes_of_layer(intent.evict_layer, plan_.model,
                                                        plan_.quant);
                if (stage_bytes == 0 && evict_bytes == 0) continue;
                StreamOp op;
                op.stream = StreamId::cpu_stage;
                op.kind = OpKind::window_stage;
                op.step = static_cast<std::int16_t>(step);
                op.layer = static_cast<std::int16_t>(intent.stage_layer);
                op.batch = static_cast<std::int16_t>(intent.evict_layer);
                op.payload_bytes = stage_bytes;
                op.route = TransferRoute::disk_dram;
                op.deps = {issue_dep};
                for (std::int32_t d : layer_loads_[intent.evict_layer]) op.deps.push_back(d);
                if (evict_bytes > 0)
                    op.ledger.push_back({LedgerEffect::When::at_start, false, Tier::dram, 0,
                                         "stg:" + std::to_string(intent.evict_layer)});
                if (stage_bytes > 0)
                    op.ledger.push_back({LedgerEffect::When::at_start, true, Tier::dram,
                                         stage_bytes,
                                         "stg:" + std::to_string(intent.stage_layer)});
                const auto id = add(std::move(op));
                if (stage_bytes > 0) stage_latest_[intent.stage_layer] = id;
            }
        }
        layer_loads_[layer].clear();
    }

    void stage_prologue() {
        if (plan_.placement.cpu_window_L <= 0) return;
        for (int l = 0; l < plan_.placement.cpu_window_L && l < trace_.n_layers; ++l) {
            const byte_count bytes =
                plan_.placement.disk_bytes_of_layer(l, plan_.model, plan_.quant);
            if (bytes == 0) continue;
            StreamOp op;
            op.stream = StreamId::cpu_stage;
            op.kind = OpKind::window_stage;
            op.step = 0;
            op.layer = static_cast<std::int16_t>(l);
            op.payload_bytes = bytes;
            op.route = TransferRoute::disk_dram;
            op.ledger.push_back({LedgerEffect::When::at_start, true, Tier::dram, bytes,
                                 "stg:" + std::to_string(l)});
            stage_latest_[l] = add(std::move(op));
        }
    }

    std::size_t kv_index(int layer, int batch) const {
        return static_cast<std::size_t>(layer) * trace_.n_batches + batch;
    }
    static std::string kv_tag(const char* kind, int step, int layer, int batch) {
        return std::string(kind) + ":" + std::to_string(step) + ":" + std::to_string(layer) +
               ":" + std::to_string(batch);
    }

    const PipelinePlan& plan_;
    const ActivationTrace& trace_;
    Schedule s_;
    std::vector<std::int32_t> stage_latest_;
    std::vector<std::vector<std::int32_t>> layer_loads_;  // current pass loads per layer
    std::vector<std::int32_t> last_store_;                // kv store op per (layer, batch)
    std::vector<bool> kvd_live_;
    std::int32_t next_group_ = 0;
};

// Distinct experts demanded by one batch, in gate-output (first-appearance)
// order: the order on-demand transfers are issued.
std::vector<int> batch_demand(const ActivationTrace& trace, int step, int layer, int batch) {
    std::vector<int> ids;
    std::set<int> seen;
    for (std::uint16_t e : trace.batch_selections(step, layer, batch))
        if (seen.insert(e).second) ids.push_back(e);
    return ids;
}

std::int64_t batch_expert_tokens(const ActivationTrace& trace, int step, int layer, int batch,
                                 int expert) {
    std::int64_t n = 0;
    for (std::uint16_t e : trace.batch_selections(step, layer, batch)) n += (e == expert);
    return n;
}

// Batch-group traversal shared by the expert-aware schedule and the grouped
// baselines: blocks outer, batches inner, weight bundles issued one block
// ahead.
Schedule build_grouped(Variant variant, const PipelinePlan& plan, const ActivationTrace& trace,
                       const PrefetchProvider& prefetch, const ScheduleOptions& opts) {
    const bool split_moe =
        variant == Variant::klotski || variant == Variant::strawman_no_reorder;
    const bool reorder = variant == Variant::klotski;
    if (split_moe && !prefetch)
        throw ConfigError("hot-prefetch variants need a prefetch provider");

    Builder b(variant, plan, trace);
    b.stage_prologue();

    const int n = trace.n_batches;
    std::int32_t prev_block_last = -1;
    std::int32_t prev_gate_last = -1;
    std::int32_t pending_attn_load = -1;
    if (!b.attention_resident(0)) pending_attn_load = b.emit_attention_load(0, 0, -1);

    for (int step = 0; step < trace.n_steps; ++step) {
        for (int layer = 0; layer < trace.n_layers; ++layer) {
            const std::int32_t issue_dep = prev_block_last;
            const ExpertLoad load = expert_load(trace, step, layer);

            // Weight-stream bundle for this block.
            std::vector<int> hot_ids;
            bool fallback = false;
            std::int32_t moe_load = -1;
            std::int32_t gate_load = -1;
            std::map<int, std::int32_t> expert_load_op;
            if (split_moe) {
                std::span<const std::uint16_t> prev;
                if (layer > 0) prev = trace.layer_selections(step, layer - 1);
                PrefetchDecision d = prefetch(step, layer, prev);
                for (int e : d.expert_ids) {
                    if (e < 0 || e >= trace.n_experts)
                        throw ValidationError("prefetch provider returned expert id " +
                                              std::to_string(e) + " out of range");
                }
                hot_ids = d.expert_ids;
                fallback = d.used_fallback;
                if (!b.gate_resident(layer))
                    gate_load = b.emit_gate_load(step, layer, issue_dep);
                if (!b.expert_resident(layer)) {
                    for (int e : hot_ids)
                        expert_load_op[e] = b.emit_expert_load(
                            StreamId::weight_load, step, layer, e, true,
                            {issue_dep, layer > 0 ? prev_gate_last : -1});
                }
            } else if (!b.expert_resident(layer) || !b.gate_resident(layer)) {
                moe_load = b.emit_moe_load(step, layer, -1, issue_dep);
                gate_load = moe_load;
            }

            const int next_layer = layer + 1 < trace.n_layers ? layer + 1 : 0;
            const int next_step = layer + 1 < trace.n_layers ? step : step + 1;
            std::int32_t next_attn_load = -1;
            if (next_step < trace.n_steps && !b.attention_resident(next_layer))
                next_attn_load = b.emit_attention_load(next_step, next_layer, issue_dep);

            // Attention with per-batch cache traffic (double-buffered loads).
            std::vector<std::int32_t> attn(n, -1);
            for (int k = 0; k < n; ++k) {
                const std::int32_t backpressure = k >= 2 ? attn[k - 2] : -1;
                const std::int32_t cache_dep = b.emit_cache_load(step, layer, k, backpressure);
                attn[k] = b.emit_attention_compute(step, layer, k, pending_attn_load, cache_dep);
                b.emit_cache_store(step, layer, k, attn[k]);
            }
            if (pending_attn_load >= 0)
                b.emit_weight_offload(TensorClass::attention, step, layer, -1, attn[n - 1]);

            // Gate.
            std::vector<std::int32_t> gates(n, -1);
            for (int k = 0; k < n; ++k)
                gates[k] = b.emit_gate_compute(step, layer, k, gate_load, attn[k]);
            const std::int32_t last_gate = gates[n - 1];

            // On-demand cold transfers in first-demand order.
            std::vector<std::pair<int, int>> cold;  // (expert, demanding batch)
            if (split_moe) {
                std::set<int> issued(hot_ids.begin(), hot_ids.end());
                for (int k = 0; k < n; ++k)
                    for (int e : batch_demand(trace, step, layer, k))
                        if (issued.insert(e).second) cold.emplace_back(e, k);
                if (!b.expert_resident(layer))
                    for (auto [e, k] : cold)
                        expert_load_op[e] = b.emit_expert_load(StreamId::expert_load, step, layer,
                                                               e, false, {gates[k]});
            }

            // Expert computes.
            std::vector<std::int32_t> expert_last_compute(trace.n_experts, -1);
            std::int32_t block_last = last_gate;
            auto load_dep_of = [&](int e) {
                if (moe_load >= 0) return moe_load;
                auto it = expert_load_op.find(e);
                return it == expert_load_op.end() ? std::int32_t{-1} : it->second;
            };

            if (variant == Variant::klotski) {
                std::vector<int> hot_active;
                for (int e : hot_ids)
                    if (load.tokens_per_expert[e] > 0) hot_active.push_back(e);
                std::stable_sort(hot_active.begin(), hot_active.end(), [&](int a, int c) {
                    if (load.tokens_per_expert[a] != load.tokens_per_expert[c])
                        return load.tokens_per_expert[a] > load.tokens_per_expert[c];
                    return a < c;
                });
                for (int e : hot_active) {
                    block_last = b.emit_expert_compute(step, layer, e, load.tokens_per_expert[e],
                                                       true, -1, load_dep_of(e), last_gate, -1);
                    expert_last_compute[e] = block_last;
                }
                const std::int32_t group = reorder && cold.size() > 1 ? b.next_group_++ : -1;
                for (auto [e, k] : cold) {
                    block_last = b.emit_expert_compute(step, layer, e, load.tokens_per_expert[e],
                                                       false, -1, load_dep_of(e), last_gate,
                                                       group);
                    expert_last_compute[e] = block_last;
                }
            } else if (split_moe) {
                // Batch-order computes: the pipeline stall the reorder fixes.
                std::set<int> hotset(hot_ids.begin(), hot_ids.end());
                for (int k = 0; k < n; ++k)
                    for (int e : batch_demand(trace, step, layer, k)) {
                        block_last = b.emit_expert_compute(
                            step, layer, e, batch_expert_tokens(trace, step, layer, k, e),
                            hotset.count(e) > 0, k, load_dep_of(e), gates[k], -1);
                        expert_last_compute[e] = block_last;
                    }
            } else {
                for (int k = 0; k < n; ++k)
                    for (int e : batch_demand(trace, step, layer, k)) {
                        block_last = b.emit_expert_compute(
                            step, layer, e, batch_expert_tokens(trace, step, layer, k, e), false,
                            k, load_dep_of(e), gates[k], -1);
                        expert_last_compute[e] = block_last;
                    }
            }

            // Offloads.
            if (split_moe && !b.expert_resident(layer)) {
                for (const auto& [e, load_id] : expert_load_op) {
                    std::int32_t after = expert_last_compute[e];
                    if (!opts.immediate_offload || after < 0) after = block_last;
                    b.emit_expert_offload(step, layer, e, after);
                }
            }
            if (moe_load >= 0)
                b.emit_weight_offload(TensorClass::gate, step, layer, -1, block_last);
            if (split_moe && gate_load >= 0)
                b.emit_weight_offload(TensorClass::gate, step, layer, -1, last_gate);

            if (split_moe) {
                std::vector<int> act;
                for (int e = 0; e < trace.n_experts; ++e)
                    if (load.tokens_per_expert[e] > 0) act.push_back(e);
                std::vector<int> hottest = load.by_hotness();
                if (static_cast<int>(hottest.size()) > plan.K) hottest.resize(plan.K);
                b.s_.prefetch_records.push_back(
                    {step, layer, hot_ids, std::move(act), std::move(hottest), fallback});
            }
            b.s_.sync_points.emplace_back(step, layer);
            b.emit_window_advance(step, layer, issue_dep);
            prev_block_last = block_last;
            prev_gate_last = last_gate;
            pending_attn_load = next_attn_load;
        }
    }
    return std::move(b.s_);
}

// Row-by-row single-batch pipeline: each batch traverses all layers alone and
// reloads every block's weights.
Schedule build_simple(const PipelinePlan& plan, const ActivationTrace& trace) {
    Builder b(Variant::simple, plan, trace);
    b.stage_prologue();

    std::int32_t prev_block_last = -1;
    std::int32_t pending_attn_load = -1;
    if (!b.attention_resident(0)) pending_attn_load = b.emit_attention_load(0, 0, -1);

    for (int step = 0; step < trace.n_steps; ++step) {
        for (int batch = 0; batch < trace.n_batches; ++batch) {
            for (int layer = 0; layer < trace.n_layers; ++layer) {
                const std::int32_t issue_dep = prev_block_last;
                std::int32_t moe_load = -1;
                if (!b.expert_resident(layer) || !b.gate_resident(layer))
                    moe_load = b.emit_moe_load(step, layer, batch, issue_dep);

                int nl = layer + 1, nb = batch, ns = step;
                if (nl == trace.n_layers) {
                    nl = 0;
                    if (++nb == trace.n_batches) {
                        nb = 0;
                        ++ns;
                    }
                }
                std::int32_t next_attn_load = -1;
                if (ns < trace.n_steps && !b.attention_resident(nl))
                    next_attn_load = b.emit_attention_load(ns, nl, issue_dep);

                const std::int32_t cache_dep = b.emit_cache_load(step, layer, batch, -1);
                const std::int32_t attn =
                    b.emit_attention_compute(step, layer, batch, pending_attn_load, cache_dep);
                b.emit_cache_store(step, layer, batch, attn);
                if (pending_attn_load >= 0)
                    b.emit_weight_offload(TensorClass::attention, step, layer, -1, attn);

                const std::int32_t gate = b.emit_gate_compute(step, layer, batch, moe_load, attn);
                std::int32_t block_last = gate;
                for (int e : batch_demand(trace, step, layer, batch))
                    block_last = b.emit_expert_compute(
                        step, layer, e, batch_expert_tokens(trace, step, layer, batch, e), false,
                        batch, moe_load, gate, -1);
                if (moe_load >= 0)
                    b.emit_weight_offload(TensorClass::gate, step, layer, batch, block_last);

                b.s_.sync_points.emplace_back(step, layer);
                b.emit_window_advance(step, layer, issue_dep);
                prev_block_last = block_last;
                pending_attn_load = next_attn_load;
            }
        }
    }
    return std::move(b.s_);
}

}  // namespace

Schedule build_klotski_schedule(const PipelinePlan& plan, const ActivationTrace& trace,
                                const PrefetchProvider& prefetch, const ScheduleOptions& opts) {
    return build_grouped(Variant::klotski, plan, trace, prefetch, opts);
}

Schedule build_baseline_schedule(Variant variant, const PipelinePlan& plan,
                                 const ActivationTrace& trace, const PrefetchProvider& prefetch,
                                 const ScheduleOptions& opts) {
    if (variant == Variant::simple) return build_simple(plan, trace);
    return build_grouped(variant, plan, trace, prefetch, opts);
}

std::string Schedule::to_text() const {
    std::ostringstream os;
    os << "schedule variant=" << variant_name(variant) << " steps=" << n_steps
       << " layers=" << n_layers << " batches=" << n_batches << " ops=" << ops.size() << "\n";
    for (const StreamOp& op : ops) {
        os << op.id << " " << stream_name(op.stream) << " " << op_kind_name(op.kind) << " s"
           << op.step << " l" << op.layer;
        if (op.batch >= 0) os << " b" << op.batch;
        if (op.expert >= 0) os << " e" << op.expert;
        if (op.payload_bytes > 0) os << " bytes=" << op.payload_bytes;
        if (op.token_count > 0) os << " tokens=" << op.token_count;
        if (op.hot) os << " hot";
        if (op.reorder_group >= 0) os << " group=" << op.reorder_group;
        os << " deps=[";
        for (std::size_t i = 0; i < op.deps.size(); ++i) {
            if (i) os << ',';
            os << op.deps[i];
        }
        os << "]\n";
    }
    return os.str();
}

ValidationReport validate_schedule(const Schedule& s, const ActivationTrace& trace,
                                   const PipelinePlan& plan) {
    ValidationReport report;
    auto violation = [&](const std::string& msg) { report.violations.push_back(msg); };

    for (std::size_t i = 0; i < s.ops.size(); ++i) {
        const StreamOp& op = s.ops[i];
        if (op.id != static_cast<std::int32_t>(i)) violation("op id/index mismatch");
        for (auto d : op.deps)
            if (d < 0 || d >= static_cast<std::int32_t>(s.ops.size()))
                violation("op " + std::to_string(op.id) + ": dependency out of range");
    }
    std::size_t stream_total = 0;
    for (int st = 0; st < kNumStreams; ++st) {
        stream_total += s.streams[st].size();
        for (auto id : s.streams[st])
            if (s.ops[id].stream != static_cast<StreamId>(st))
                violation("op " + std::to_string(id) + ": listed on the wrong stream");
    }
    if (stream_total != s.ops.size()) violation("per-stream lists do not cover all ops");

    // Acyclicity over dependencies plus per-stream chains.
    {
        std::vector<int> indeg(s.ops.size(), 0);
        std::vector<std::vector<std::int32_t>> out(s.ops.size());
        for (const StreamOp& op : s.ops)
            for (auto d : op.deps) {
                if (d < 0 || d >= static_cast<std::int32_t>(s.ops.size())) continue;
                out[d].push_back(op.id);
                indeg[op.id]++;
            }
        for (int st = 0; st < kNumStreams; ++st) {
            const auto& order = s.streams[st];
            for (std::size_t i = 1; i < order.size(); ++i) {
                out[order[i - 1]].push_back(order[i]);
                indeg[order[i]]++;
            }
        }
        std::vector<std::int32_t> q;
        for (std::size_t i = 0; i < s.ops.size(); ++i)
            if (indeg[i] == 0) q.push_back(static_cast<std::int32_t>(i));
        std::size_t seen = 0;
        while (!q.empty()) {
            const auto v = q.back();
            q.pop_back();
            seen++;
            for (auto w : out[v])
                if (--indeg[w] == 0) q.push_back(w);
        }
        if (seen != s.ops.size()) violation("dependency graph has a cycle");
    }

    struct LayerAudit {
        std::map<int, int> expert_loads;
        std::map<int, int> expert_offloads;
        std::map<int, std::int64_t> expert_tokens;
        bool moe_load = false;
    };
    std::map<std::pair<int, int>, LayerAudit> audit;
    for (const StreamOp& op : s.ops) {
        auto& a = audit[{op.step, op.layer}];
        switch (op.kind) {
            case OpKind::load_expert: a.expert_loads[op.expert]++; break;
            case OpKind::offload_expert: a.expert_offloads[op.expert]++; break;
            case OpKind::compute_expert: a.expert_tokens[op.expert] += op.token_count; break;
            case OpKind::load_weights:
                if (op.cls == TensorClass::expert) a.moe_load = true;
                break;
            default: break;
        }
    }

    std::map<std::pair<int, int>, std::set<int>> prefetched;
    for (const auto& rec : s.prefetch_records)
        prefetched[{rec.step, rec.layer}].insert(rec.prefetched.begin(), rec.prefetched.end());
    const bool full_moe_loads = s.variant == Variant::simple ||
                                s.variant == Variant::multibatch_full_prefetch;

    for (int step = 0; step < trace.n_steps; ++step) {
        for (int layer = 0; layer < trace.n_layers; ++layer) {
            const ExpertLoad load = expert_load(trace, step, layer);
            const auto& a = audit[{step, layer}];
            const auto& hot = prefetched[{step, layer}];
            const bool resident = plan.placement.expert_tier[layer] == Tier::vram;
            const std::int64_t want_tokens =
                static_cast<std::int64_t>(trace.top_k) * trace.tokens_in_step(step);
            std::int64_t got_tokens = 0;
            for (auto [e, t] : a.expert_tokens) got_tokens += t;
            if (got_tokens != want_tokens)
                violation("(" + std::to_string(step) + "," + std::to_string(layer) +
                          "): expert compute tokens " + std::to_string(got_tokens) +
                          " != top_k * tokens " + std::to_string(want_tokens));
            for (int e = 0; e < trace.n_experts; ++e) {
                const bool active = load.tokens_per_expert[e] > 0;
                const int loads = a.expert_loads.count(e) ? a.expert_loads.at(e) : 0;
                const int offs = a.expert_offloads.count(e) ? a.expert_offloads.at(e) : 0;
                const auto tag = "(" + std::to_string(step) + "," + std::to_string(layer) +
                                 ") expert " + std::to_string(e);
                if (loads > 1) violation(tag + ": double load");
                if (active && !resident && !full_moe_loads && loads == 0)
                    violation(tag + ": compute before load (no load op)");
                if (!active && !hot.count(e) && (loads || offs || a.expert_tokens.count(e)))
                    violation(tag + ": op references an inactive expert");
                if (active && a.expert_tokens.count(e) == 0)
                    violation(tag + ": activated expert never computed");
                if (loads != offs) violation(tag + ": loads and offloads unbalanced");
            }
        }
    }

    for (const StreamOp& op : s.ops) {
        if (op.stream != StreamId::compute) continue;
        bool needs_load = false;
        if (op.kind == OpKind::compute_expert)
            needs_load = plan.placement.expert_tier[op.layer] != Tier::vram;
        else if (op.kind == OpKind::compute_gate)
            needs_load = plan.placement.gate_tier[op.layer] != Tier::vram;
        else if (op.kind == OpKind::compute_attention)
            needs_load = plan.placement.attention_tier[op.layer] != Tier::vram;
        if (!needs_load) continue;
        bool has = false;
        for (auto d : op.deps) {
            if (d < 0 || d >= static_cast<std::int32_t>(s.ops.size())) continue;
            const OpKind k = s.ops[d].kind;
            if (k == OpKind::load_weights || k == OpKind::load_expert) has = true;
        }
        if (!has)
            violation("op " + std::to_string(op.id) +
                      ": compute before load (missing weight dependency)");
    }
    return report;
}

}  // namespace moesim
