// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "moesim/error.hpp"
#include "moesim/model.hpp"
#include "moesim/types.hpp"

namespace moesim {

// One batch group: n_batches batches of batch_size sequences each. Step 0 is
// the prefill (prompt_len tokens per sequence); steps 1..gen_len-1 decode one
// token per sequence.
struct BatchGroupConfig {
    int batch_size = 1;
    int n_batches = 1;
    int prompt_len = 1;
    int gen_len = 1;

    void validate() const;
    int n_steps() const { return gen_len; }
    int tokens_per_seq(int step) const { return step == 0 ? prompt_len : 1; }
    std::int64_t tokens_per_batch(int step) const {
        return static_cast<std::int64_t>(batch_size) * tokens_per_seq(step);
    }
    std::int64_t tokens_in_step(int step) const {
        return tokens_per_batch(step) * n_batches;
    }
    std::int64_t generated_tokens() const {
        return static_cast<std::int64_t>(batch_size) * n_batches * gen_len;
    }
};

struct SkewSpec {
    enum class Kind { uniform, zipf, markov };
    Kind kind = Kind::uniform;
    double zipf_s = 0.0;
    double stickiness = 0.0;  // markov only: P(keep previous layer's experts)

    static SkewSpec uniform() { return {}; }
    static SkewSpec zipf(double s) { return {Kind::zipf, s, 0.0}; }
    static SkewSpec markov(double s, double p) { return {Kind::markov, s, p}; }
    void validate() const;
    std::string to_string() const;
    bool operator==(const SkewSpec&) const = default;
};

// Pre-drawn gate outcomes for a whole batch group. Selections are stored
// flat as [step][layer][batch][token][k]; tokens enumerate the sequences of
// a batch (times prompt_len at step 0).
struct ActivationTrace {
    int n_steps = 0;
    int n_layers = 0;
    int n_batches = 0;
    int batch_size = 0;
    int prompt_len = 0;
    int top_k = 0;
    int n_experts = 0;
    std::uint64_t seed = 0;
    SkewSpec skew;
    std::vector<std::uint16_t> sel;

    int tokens_per_batch(int step) const {
        return batch_size * (step == 0 ? prompt_len : 1);
    }
    std::int64_t tokens_in_step(int step) const {
        return static_cast<std::int64_t>(tokens_per_batch(step)) * n_batches;
    }
    std::size_t offset(int step, int layer, int batch, int token) const;
    std::span<const std::uint16_t> selections(int step, int layer, int batch, int token) const;
    // All selections of one (step, layer) across the group, token-major.
    std::span<const std::uint16_t> layer_selections(int step, int layer) const;
    // Selections of one (step, layer, batch).
    std::span<const std::uint16_t> batch_selections(int step, int layer, int batch) const;
    void validate() const;
    bool operator==(const ActivationTrace&) const = default;
};

ActivationTrace generate_trace(const ModelSpec& spec, const BatchGroupConfig& cfg,
                               const SkewSpec& skew, std::uint64_t seed);

// Line-delimited records, one per (step, layer, batch, token), preceded by a
// metadata header line. save then load round-trips exactly.
void save_trace(const ActivationTrace& trace, const std::string& path);
ActivationTrace load_trace(const std::string& path);
std::string trace_to_string(const ActivationTrace& trace);

// Per-expert routed-token counts for one (step, layer) across the group.
struct ExpertLoad {
    int step = 0;
    int layer = 0;
    std::vector<std::int64_t> tokens_per_expert;

    std::int64_t total() const;
    int distinct_active() const;
    // Expert ids ordered by descending token count, ties by ascending id.
    std::vector<int> by_hotness() const;
};

ExpertLoad expert_load(const ActivationTrace& trace, int step, int layer);

// Layer-level summaries feeding the planner.
struct TraceStats {
    int n_layers = 0;
    int K = 0;
    std::vector<double> mean_distinct_active;  // per layer, averaged over steps
    std::vector<double> topk_share;            // selection share of the K hottest experts
};

TraceStats compute_trace_stats(const ActivationTrace& trace, int K);

}  // namespace moesim
