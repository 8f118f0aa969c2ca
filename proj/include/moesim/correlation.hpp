// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "moesim/trace.hpp"

namespace moesim {

// Per-layer (previous expert -> current expert) co-activation counts with
// path length fixed at 1. Layer 0 holds a marginal frequency vector instead
// (it has no predecessor).
struct CorrelationTable {
    int n_layers = 0;
    int n_experts = 0;
    int path_length = 1;
    std::vector<std::int64_t> marginal;  // [n_experts]
    std::vector<std::int64_t> counts;    // [layer][prev][cur], layers 1..n_layers-1

    static CorrelationTable empty(int n_layers, int n_experts);
    std::int64_t& at(int layer, int prev, int cur);
    std::int64_t at(int layer, int prev, int cur) const;
    bool operator==(const CorrelationTable&) const = default;
};

enum class TendencyAggregation { sum, vote };

struct PrefetchDecision {
    int layer = 0;
    std::vector<int> expert_ids;        // K ids, scores nonincreasing
    std::vector<std::int64_t> scores;
    bool used_fallback = false;         // marginal vector stood in for empty rows
};

CorrelationTable build_table(const ActivationTrace& trace, const ModelSpec& spec);

// prev_selections: the whole group's layer-(layer-1) selections, token-major,
// top_k entries per token. Layer 0 predictions use the marginal vector and
// ignore prev_selections. Ties break toward the smaller expert id.
PrefetchDecision predict_hot(const CorrelationTable& table, int layer,
                             std::span<const std::uint16_t> prev_selections, int K,
                             TendencyAggregation agg = TendencyAggregation::sum,
                             int top_k = 1);

// In-place count increments; never touches any persisted file. Spans are
// token-major blocks of top_k ids; every (prev, cur) pair of one token
// increments. Layer 0 (empty prev) updates the marginal vector.
void update_table(CorrelationTable& table, int layer,
                  std::span<const std::uint16_t> prev_selections,
                  std::span<const std::uint16_t> actual_selections, int top_k);

// Nested-map structured text, keys in ascending numeric order, zero counts
// omitted. Stable for golden-file comparison.
void save_table(const CorrelationTable& table, const std::string& path);
CorrelationTable load_table(const std::string& path);
std::string table_to_string(const CorrelationTable& table);

// Replay diagnostics: per-layer participation (share of prefetched experts
// that were activated) and hot accuracy (overlap with the layer's true top-K
// by routed tokens), averaged over steps.
struct PrefetchQuality {
    std::vector<double> participation_per_layer;
    std::vector<double> accuracy_per_layer;
    double participation = 0.0;
    double accuracy = 0.0;
};

PrefetchQuality evaluate_prefetch(const ActivationTrace& trace, const CorrelationTable& table,
                                  int K, TendencyAggregation agg = TendencyAggregation::sum);

}  // namespace moesim
