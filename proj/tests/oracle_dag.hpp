// SPDX-License-Identifier: Apache-2.0
//
// Independent makespan oracle: longest path over the schedule's dependency
// DAG with unit-capacity streams imposed as chain edges in plan order.
// Deliberately shares no code with the event-driven engine.
#pragma once

#include <stdexcept>
#include <vector>

#include "moesim/cost.hpp"
#include "moesim/schedule.hpp"

namespace moesim_test {

inline moesim::duration_ps oracle_op_duration(const moesim::StreamOp& op,
                                              const moesim::CostProfile& cost) {
    using moesim::OpKind;
    switch (op.kind) {
        case OpKind::compute_attention: return op.token_count * cost.attn_per_token;
        case OpKind::compute_gate: return op.token_count * cost.gate_per_token;
        case OpKind::compute_expert: return op.token_count * cost.t_c_e_per_token;
        case OpKind::offload_expert:
        case OpKind::offload_weights: return 0;
        case OpKind::window_stage:
            return op.payload_bytes == 0
                       ? 0
                       : cost.io_time(op.payload_bytes, moesim::TransferRoute::disk_dram);
        default: return cost.io_time(op.payload_bytes, op.route);
    }
}

// Kahn topological order, then start[i] = max over predecessors of their end.
inline moesim::duration_ps oracle_makespan(const moesim::Schedule& s,
                                           const moesim::CostProfile& cost) {
    const std::size_t n = s.ops.size();
    std::vector<std::vector<int>> succ(n);
    std::vector<int> indeg(n, 0);
    auto edge = [&](int from, int to) {
        succ[from].push_back(to);
        indeg[to]++;
    };
    for (const moesim::StreamOp& op : s.ops)
        for (auto d : op.deps) edge(d, op.id);
    for (int st = 0; st < moesim::kNumStreams; ++st) {
        const auto& order = s.streams[st];
        for (std::size_t i = 1; i < order.size(); ++i) edge(order[i - 1], order[i]);
    }

    std::vector<int> queue;
    for (std::size_t i = 0; i < n; ++i)
        if (indeg[i] == 0) queue.push_back(static_cast<int>(i));
    std::vector<moesim::duration_ps> end(n, 0);
    moesim::duration_ps makespan = 0;
    std::size_t processed = 0;
    while (!queue.empty()) {
        const int v = queue.back();
        queue.pop_back();
        processed++;
        moesim::duration_ps start = 0;
        // Recompute from predecessors implicitly: end[v] was accumulated as
        // max over incoming edges before v became ready.
        start = end[v];
        const moesim::duration_ps fin = start + oracle_op_duration(s.ops[v], cost);
        if (fin > makespan) makespan = fin;
        for (int w : succ[v]) {
            if (fin > end[w]) end[w] = fin;
            if (--indeg[w] == 0) queue.push_back(w);
        }
        end[v] = fin;
    }
    if (processed != n) throw std::runtime_error("oracle: dependency cycle");
    return makespan;
}

}  // namespace moesim_test
