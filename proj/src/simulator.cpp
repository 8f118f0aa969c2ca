// SPDX-License-Identifier: Apache-2.0
#include "moesim/simulator.hpp"

#include <algorithm>
#include <fstream>
#include <queue>
#include <sstream>

namespace moesim {

namespace {

duration_ps op_duration(const StreamOp& op, const CostProfile& cost) {
    switch (op.kind) {
        case OpKind::compute_attention: return op.token_count * cost.attn_per_token;
        case OpKind::compute_gate: return op.token_count * cost.gate_per_token;
        case OpKind::compute_expert: return op.token_count * cost.t_c_e_per_token;
        case OpKind::load_weights:
        case OpKind::load_expert:
        case OpKind::load_cache:
        case OpKind::store_cache:
        case OpKind::load_hidden:
        case OpKind::store_hidden:
            return cost.io_time(op.payload_bytes, op.route);
        case OpKind::offload_expert:
        case OpKind::offload_weights:
            return 0;  // read-only weights: freeing VRAM moves no bytes
        case OpKind::window_stage:
            return op.payload_bytes == 0 ? 0
                                         : cost.io_time(op.payload_bytes, TransferRoute::disk_dram);
    }
    return 0;
}

bool on_pcie(StreamId s) {
    return s == StreamId::weight_load || s == StreamId::expert_load ||
           s == StreamId::cache_load || s == StreamId::cache_store;
}

struct PendingEffect {
    duration_ps time;
    bool is_alloc;
    Tier tier;
    byte_count bytes;
    std::int32_t seq;
    const std::string* tag;
};

// Finds one dependency cycle among unfinished ops for the deadlock report.
std::string cycle_report(const Schedule& s, const std::vector<bool>& completed) {
    std::ostringstream os;
    os << "simulator deadlock; unfinished ops:";
    int listed = 0;
    for (const StreamOp& op : s.ops) {
        if (completed[op.id]) continue;
        if (listed++ >= 8) {
            os << " ...";
            break;
        }
        os << " " << op.id << "(" << op_kind_name(op.kind) << " waits on";
        for (auto d : op.deps)
            if (!completed[d]) os << ' ' << d;
        os << ")";
    }
    return os.str();
}

}  // namespace

SimResult run(const Schedule& schedule, const CostProfile& cost, const PipelinePlan& plan,
              MemoryLedger& ledger, const SimOptions& opts) {
    const std::size_t n_ops = schedule.ops.size();
    std::vector<duration_ps> op_start(n_ops, -1), op_end(n_ops, -1);
    std::vector<bool> started(n_ops, false), completed(n_ops, false);
    std::vector<int> dep_pending(n_ops, 0);
    std::vector<std::vector<std::int32_t>> dependents(n_ops);
    for (const StreamOp& op : schedule.ops) {
        dep_pending[op.id] = static_cast<int>(op.deps.size());
        for (auto d : op.deps) dependents[d].push_back(op.id);
    }

    std::array<std::size_t, kNumStreams> next_idx{};
    std::array<duration_ps, kNumStreams> stream_free{};
    std::array<bool, kNumStreams> running{};

    struct Ev {
        duration_ps time;
        std::int64_t seq;
        std::int32_t op;
        int version;
        bool operator>(const Ev& o) const {
            if (time != o.time) return time > o.time;
            return seq > o.seq;
        }
    };
    std::priority_queue<Ev, std::vector<Ev>, std::greater<Ev>> events;
    std::int64_t seq = 0;

    // Shared-PCIe fluid state: remaining full-rate work per active transfer.
    std::vector<double> remaining(n_ops, 0.0);
    std::vector<int> version(n_ops, 0);
    std::vector<std::int32_t> active_pcie;
    duration_ps pcie_last_update = 0;

    std::vector<PendingEffect> effects;
    auto queue_effects = [&](const StreamOp& op, LedgerEffect::When when, duration_ps t) {
        for (const LedgerEffect& e : op.ledger) {
            if (e.when != when) continue;
            effects.push_back({t, e.is_alloc, e.tier, e.bytes, op.id, &e.tag});
        }
    };

    auto reschedule_pcie = [&](duration_ps now) {
        const int m = static_cast<int>(active_pcie.size());
        if (m == 0) {
            pcie_last_update = now;
            return;
        }
        const double elapsed = static_cast<double>(now - pcie_last_update);
        for (auto id : active_pcie)
            remaining[id] = std::max(0.0, remaining[id] - elapsed / m);
        pcie_last_update = now;
        for (auto id : active_pcie) {
            const duration_ps fin =
                now + static_cast<duration_ps>(std::ceil(remaining[id] * m));
            version[id]++;
            events.push({fin, seq++, id, version[id]});
        }
    };

    auto start_op = [&](std::int32_t id, duration_ps now) {
        const StreamOp& op = schedule.ops[id];
        duration_ps begin = stream_free[static_cast<int>(op.stream)];
        for (auto d : op.deps) begin = std::max(begin, op_end[d]);
        begin = std::max(begin, now);
        const duration_ps dur = op_duration(op, cost);
        op_start[id] = begin;
        started[id] = true;
        running[static_cast<int>(op.stream)] = true;
        queue_effects(op, LedgerEffect::When::at_start, begin);
        if (opts.shared_pcie && on_pcie(op.stream) && dur > 0) {
            reschedule_pcie(begin);
            remaining[id] = static_cast<double>(dur);
            active_pcie.push_back(id);
            reschedule_pcie(begin);
        } else {
            op_end[id] = begin + dur;
            version[id]++;
            events.push({begin + dur, seq++, id, version[id]});
        }
    };

    // A stream may start its next queued op; klotski cold groups pick the
    // earliest-loaded ready member, ties to the smaller expert id.
    auto try_start_stream = [&](int st) -> bool {
        if (running[st]) return false;
        const auto& order = schedule.streams[st];
        while (next_idx[st] < order.size() && started[order[next_idx[st]]]) next_idx[st]++;
        if (next_idx[st] >= order.size()) return false;
        const std::int32_t head = order[next_idx[st]];
        const StreamOp& head_op = schedule.ops[head];
        if (head_op.reorder_group < 0) {
            if (dep_pending[head] > 0) return false;
            start_op(head, 0);
            return true;
        }
        // Contiguous run of the same reorder group.
        std::int32_t best = -1;
        duration_ps best_ready = 0;
        for (std::size_t i = next_idx[st]; i < order.size(); ++i) {
            const StreamOp& cand = schedule.ops[order[i]];
            if (cand.reorder_group != head_op.reorder_group) break;
            if (started[cand.id] || dep_pending[cand.id] > 0) continue;
            duration_ps ready = 0;
            for (auto d : cand.deps) ready = std::max(ready, op_end[d]);
            if (best < 0 || ready < best_ready ||
                (ready == best_ready && cand.expert < schedule.ops[best].expert)) {
                best = cand.id;
                best_ready = ready;
            }
        }
        if (best < 0) return false;
        start_op(best, 0);
        return true;
    };

    auto try_start_all = [&] {
        bool progress = true;
        while (progress) {
            progress = false;
            for (int st = 0; st < kNumStreams; ++st) progress |= try_start_stream(st);
        }
    };

    try_start_all();
    std::size_t done = 0;
    while (done < n_ops) {
        if (events.empty()) throw AccountingError(cycle_report(schedule, completed));
        const Ev ev = events.top();
        events.pop();
        if (ev.version != version[ev.op] || completed[ev.op]) continue;
        const StreamOp& op = schedule.ops[ev.op];
        if (opts.shared_pcie && on_pcie(op.stream) && op_end[ev.op] < 0) {
            reschedule_pcie(ev.time);
            if (remaining[ev.op] > 0.5) continue;  // rescheduled
            op_end[ev.op] = ev.time;
            active_pcie.erase(std::find(active_pcie.begin(), active_pcie.end(), ev.op));
            reschedule_pcie(ev.time);
        }
        completed[ev.op] = true;
        done++;
        running[static_cast<int>(op.stream)] = false;
        stream_free[static_cast<int>(op.stream)] = op_end[ev.op];
        queue_effects(op, LedgerEffect::When::at_end, op_end[ev.op]);
        for (auto dep : dependents[ev.op]) dep_pending[dep]--;
        try_start_all();
    }

    // Static residents plus the dynamic effect log, frees ahead of allocs at
    // equal times.
    {
        const ModelSpec& m = plan.model;
        const byte_count activation_bytes = m.kv_bytes_per_token *
                                            static_cast<byte_count>(schedule.batch_size) *
                                            schedule.n_batches;
        ledger.alloc(plan.placement.activation_tier, activation_bytes, "activations", 0);
        for (int j = 0; j < plan.placement.n_layers; ++j) {
            if (plan.placement.expert_tier[j] == Tier::vram)
                ledger.alloc(Tier::vram, m.expert_bytes * m.n_experts_per_layer,
                             "res:e:" + std::to_string(j), 0);
            if (plan.placement.gate_tier[j] == Tier::vram)
                ledger.alloc(Tier::vram, m.gate_bytes, "res:g:" + std::to_string(j), 0);
            if (plan.placement.attention_tier[j] == Tier::vram)
                ledger.alloc(Tier::vram, m.attention_bytes, "res:a:" + std::to_string(j), 0);
        }
        std::stable_sort(effects.begin(), effects.end(), [](const PendingEffect& a,
                                                            const PendingEffect& b) {
            if (a.time != b.time) return a.time < b.time;
            if (a.is_alloc != b.is_alloc) return !a.is_alloc;
            return a.seq < b.seq;
        });
        for (const PendingEffect& e : effects) {
            if (e.is_alloc)
                ledger.alloc(e.tier, e.bytes, *e.tag, e.time);
            else
                ledger.free(*e.tag, e.time);
        }
    }

    SimResult result;
    result.timeline.reserve(n_ops);
    for (const StreamOp& op : schedule.ops)
        result.timeline.push_back(
            {op.id, op.stream, op_start[op.id], op_end[op.id], op.payload_bytes, op.token_count});

    RunMetrics& m = result.metrics;
    for (const SimEvent& e : result.timeline) m.makespan = std::max(m.makespan, e.end);
    for (const SimEvent& e : result.timeline)
        if (e.stream == StreamId::compute) m.compute_busy += e.end - e.start;
    m.bubble_time = m.makespan - m.compute_busy;
    m.bubbles = bubble_stats(result.timeline, schedule);
    m.expert_layer_bubble_time = m.bubbles.gate_to_expert + m.bubbles.intra_expert;
    m.peak_vram = ledger.high_water(Tier::vram);
    m.tokens_generated = static_cast<std::int64_t>(schedule.batch_size) * schedule.n_batches *
                         schedule.n_steps;
    m.throughput_tps =
        m.makespan > 0 ? static_cast<double>(m.tokens_generated) / sec_from_ps(m.makespan) : 0.0;
    if (!schedule.prefetch_records.empty()) {
        double part = 0.0, acc = 0.0;
        for (const auto& rec : schedule.prefetch_records) {
            int hits = 0, top_hits = 0;
            for (int e : rec.prefetched) {
                if (std::find(rec.activated.begin(), rec.activated.end(), e) !=
                    rec.activated.end())
                    hits++;
                if (std::find(rec.hottest.begin(), rec.hottest.end(), e) != rec.hottest.end())
                    top_hits++;
            }
            const int k = std::max<std::size_t>(1, rec.prefetched.size());
            part += static_cast<double>(hits) / k;
            acc += static_cast<double>(top_hits) / k;
        }
        m.prefetch_participation = part / schedule.prefetch_records.size();
        m.hot_accuracy = acc / schedule.prefetch_records.size();
    }
    return result;
}

BubbleBreakdown bubble_stats(std::span<const SimEvent> timeline, const Schedule& schedule) {
    BubbleBreakdown b;
    std::vector<const SimEvent*> compute;
    for (const SimEvent& e : timeline)
        if (e.stream == StreamId::compute) compute.push_back(&e);
    std::sort(compute.begin(), compute.end(),
              [](const SimEvent* a, const SimEvent* c) { return a->start < c->start; });
    if (compute.empty()) return b;

    duration_ps makespan = 0;
    for (const SimEvent& e : timeline) makespan = std::max(makespan, e.end);
    b.startup = compute.front()->start;
    b.drain = makespan - compute.back()->end;

    for (std::size_t i = 1; i < compute.size(); ++i) {
        const duration_ps gap = compute[i]->start - compute[i - 1]->end;
        if (gap <= 0) continue;
        const StreamOp& p = schedule.ops[compute[i - 1]->op_id];
        const StreamOp& n = schedule.ops[compute[i]->op_id];
        if (p.phase == Phase::attention && n.phase == Phase::attention)
            b.intra_attention += gap;
        else if (p.phase == Phase::attention && n.phase == Phase::gate)
            b.attn_to_moe += gap;
        else if (p.phase == Phase::gate && n.phase == Phase::gate)
            b.intra_gate += gap;
        else if (p.phase == Phase::gate && n.phase == Phase::expert)
            b.gate_to_expert += gap;
        else if (p.phase == Phase::expert && n.phase == Phase::expert)
            b.intra_expert += gap;
        else if (p.phase == Phase::expert && n.phase == Phase::attention)
            b.moe_to_attn += gap;
        else if (p.phase == Phase::attention && n.phase == Phase::expert)
            b.attn_to_moe += gap;
        else
            b.moe_to_attn += gap;
    }
    return b;
}

double throughput(const RunMetrics& metrics, const BatchGroupConfig& cfg) {
    if (metrics.makespan <= 0) return 0.0;
    return static_cast<double>(cfg.generated_tokens()) / sec_from_ps(metrics.makespan);
}

namespace {

// Fixed-point microseconds with six decimals, stable across platforms.
std::string us_fixed(duration_ps ps) {
    const duration_ps whole = ps / kPsPerUs;
    const duration_ps frac = ps % kPsPerUs;
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%lld.%06lld", static_cast<long long>(whole),
                  static_cast<long long>(frac));
    return buf;
}

}  // namespace

std::string timeline_to_string(std::span<const SimEvent> timeline, const Schedule& schedule,
                               TimelineFormat format) {
    std::ostringstream os;
    if (format == TimelineFormat::csv) {
        os << "op,stream,kind,step,layer,batch,expert,start_ps,end_ps,bytes,tokens\n";
        for (const SimEvent& e : timeline) {
            const StreamOp& op = schedule.ops[e.op_id];
            os << e.op_id << ',' << stream_name(e.stream) << ',' << op_kind_name(op.kind) << ','
               << op.step << ',' << op.layer << ',' << op.batch << ',' << op.expert << ','
               << e.start << ',' << e.end << ',' << e.bytes << ',' << e.tokens << "\n";
        }
        return os.str();
    }
    os << "{\"displayTimeUnit\":\"ms\",\"traceEvents\":[";
    bool first = true;
    for (const SimEvent& e : timeline) {
        const StreamOp& op = schedule.ops[e.op_id];
        if (!first) os << ',';
        first = false;
        os << "{\"name\":\"" << op_kind_name(op.kind) << " s" << op.step << " l" << op.layer;
        if (op.batch >= 0) os << " b" << op.batch;
        if (op.expert >= 0) os << " e" << op.expert;
        os << "\",\"cat\":\"" << stream_name(e.stream) << "\",\"ph\":\"X\",\"ts\":"
           << us_fixed(e.start) << ",\"dur\":" << us_fixed(e.end - e.start)
           << ",\"pid\":0,\"tid\":" << static_cast<int>(e.stream) << ",\"args\":{\"op\":"
           << e.op_id << ",\"bytes\":" << e.bytes << ",\"tokens\":" << e.tokens << "}}";
    }
    os << "]}\n";
    return os.str();
}

void export_timeline(std::span<const SimEvent> timeline, const Schedule& schedule,
                     const std::string& path, TimelineFormat format) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ParseError("export_timeline: cannot open '" + path + "' for writing");
    f << timeline_to_string(timeline, schedule, format);
    if (!f) throw ParseError("export_timeline: write to '" + path + "' failed");
}

std::string memory_timeline_csv(const MemoryLedger& ledger) {
    std::ostringstream os;
    os << "time_ps,vram_bytes,dram_bytes,disk_bytes,event,tag\n";
    byte_count occ[4] = {0, 0, 0, 0};
    for (const MemoryLedger::Event& e : ledger.events()) {
        occ[static_cast<int>(e.tier)] += e.is_alloc ? e.bytes : -e.bytes;
        os << e.time << ',' << occ[0] << ',' << occ[1] + occ[2] << ',' << occ[3] << ','
           << (e.is_alloc ? "alloc" : "free") << ',' << e.tag << "\n";
    }
    return os.str();
}

}  // namespace moesim
