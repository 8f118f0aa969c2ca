// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cstdio>
#include <fstream>
#include <set>

#include "moesim/correlation.hpp"

using namespace moesim;

namespace {

struct TempFile {
    std::string path;
    explicit TempFile(const char* name) : path(std::string("/tmp/moesim_") + name) {}
    ~TempFile() { std::remove(path.c_str()); }
};

ActivationTrace top1_trace(int n_layers, int n_experts, const std::vector<std::vector<int>>& paths) {
    // One batch, one step; paths[token][layer] = expert id.
    ModelSpec m = toy_model(n_layers, n_experts, 1);
    BatchGroupConfig cfg;
    cfg.batch_size = static_cast<int>(paths.size());
    cfg.n_batches = 1;
    cfg.prompt_len = 1;
    cfg.gen_len = 1;
    ActivationTrace t = generate_trace(m, cfg, SkewSpec::uniform(), 1);
    for (std::size_t tok = 0; tok < paths.size(); ++tok)
        for (int layer = 0; layer < n_layers; ++layer)
            t.sel[t.offset(0, layer, 0, static_cast<int>(tok))] =
                static_cast<std::uint16_t>(paths[tok][layer]);
    return t;
}

}  // namespace

TEST_CASE("single-expert trace fills only the diagonal entry") {
    const ModelSpec m = toy_model(3, 4, 1);
    BatchGroupConfig cfg;
    cfg.batch_size = 5;
    cfg.n_batches = 2;
    cfg.prompt_len = 2;
    cfg.gen_len = 2;
    ActivationTrace t = generate_trace(m, cfg, SkewSpec::uniform(), 1);
    for (auto& e : t.sel) e = 0;
    const CorrelationTable table = build_table(t, m);
    std::int64_t tokens = 0;
    for (int s = 0; s < t.n_steps; ++s) tokens += t.tokens_in_step(s);
    CHECK(table.marginal[0] == tokens);
    for (int layer = 1; layer < 3; ++layer)
        for (int a = 0; a < 4; ++a)
            for (int b = 0; b < 4; ++b)
                CHECK(table.at(layer, a, b) == (a == 0 && b == 0 ? tokens : 0));
}

TEST_CASE("worked top-1 lookup over a four-expert table") {
    // Layer-0 choices fix the marginal; layer-1 transitions give the rows.
    const std::vector<std::vector<int>> paths = {
        {0, 2}, {0, 2}, {0, 1}, {1, 3}, {1, 3}, {2, 0}, {3, 2},
    };
    const ActivationTrace t = top1_trace(2, 4, paths);
    const ModelSpec m = toy_model(2, 4, 1);
    const CorrelationTable table = build_table(t, m);

    CHECK(table.at(1, 0, 2) == 2);
    CHECK(table.at(1, 0, 1) == 1);
    CHECK(table.at(1, 1, 3) == 2);
    CHECK(table.at(1, 2, 0) == 1);
    CHECK(table.at(1, 3, 2) == 1);

    // Every token previously chose expert 0: tendencies come from row 0.
    std::vector<std::uint16_t> prev(3, 0);
    const PrefetchDecision d = predict_hot(table, 1, prev, 1, TendencyAggregation::sum, 1);
    CHECK(d.expert_ids == std::vector<int>{2});
    CHECK(d.scores[0] == 6);  // three tokens x count 2

    // Mixed previous selections aggregate across rows: two tokens from 1,
    // one from 0 -> expert 3 scores 4, expert 2 scores 2, expert 1 scores 1.
    std::vector<std::uint16_t> mixed = {1, 1, 0};
    const PrefetchDecision d2 = predict_hot(table, 1, mixed, 2, TendencyAggregation::sum, 1);
    CHECK(d2.expert_ids == std::vector<int>{3, 2});
}

TEST_CASE("row sums count top_k squared pairs per token") {
    const ModelSpec m = toy_model(4, 6, 2);
    BatchGroupConfig cfg;
    cfg.batch_size = 8;
    cfg.n_batches = 3;
    cfg.prompt_len = 4;
    cfg.gen_len = 2;
    const ActivationTrace t = generate_trace(m, cfg, SkewSpec::zipf(1.0), 17);
    const CorrelationTable table = build_table(t, m);
    std::int64_t tokens = 0;
    for (int s = 0; s < t.n_steps; ++s) tokens += t.tokens_in_step(s);
    for (int layer = 1; layer < m.n_layers; ++layer) {
        std::int64_t sum = 0;
        for (int a = 0; a < m.n_experts_per_layer; ++a)
            for (int b = 0; b < m.n_experts_per_layer; ++b) sum += table.at(layer, a, b);
        CHECK(sum == static_cast<std::int64_t>(m.top_k) * m.top_k * tokens);
    }
}

TEST_CASE("predict_hot tie-break and count invariants") {
    CorrelationTable table = CorrelationTable::empty(3, 5);
    // Uniform nonzero counts everywhere: ties resolve to ascending ids.
    for (int a = 0; a < 5; ++a)
        for (int b = 0; b < 5; ++b) table.at(1, a, b) = 7;
    std::vector<std::uint16_t> prev = {0, 3};
    const PrefetchDecision d = predict_hot(table, 1, prev, 2, TendencyAggregation::sum, 1);
    CHECK(d.expert_ids == std::vector<int>{0, 1});

    for (int K = 1; K <= 5; ++K) {
        const PrefetchDecision dk = predict_hot(table, 1, prev, K, TendencyAggregation::sum, 1);
        CHECK(static_cast<int>(dk.expert_ids.size()) == K);
        std::set<int> distinct(dk.expert_ids.begin(), dk.expert_ids.end());
        CHECK(static_cast<int>(distinct.size()) == K);
        for (std::size_t i = 1; i < dk.scores.size(); ++i) CHECK(dk.scores[i - 1] >= dk.scores[i]);
    }
    CHECK_THROWS_AS(predict_hot(table, 1, prev, 6, TendencyAggregation::sum, 1),
                    ValidationError);
}

TEST_CASE("empty rows fall back to the marginal vector") {
    CorrelationTable table = CorrelationTable::empty(3, 4);
    table.marginal = {5, 9, 1, 0};
    std::vector<std::uint16_t> prev = {2};
    const PrefetchDecision d = predict_hot(table, 2, prev, 2, TendencyAggregation::sum, 1);
    CHECK(d.used_fallback);
    CHECK(d.expert_ids == std::vector<int>{1, 0});
}

TEST_CASE("replayed updates equal a freshly built table") {
    const ModelSpec m = toy_model(4, 5, 2);
    BatchGroupConfig cfg;
    cfg.batch_size = 6;
    cfg.n_batches = 2;
    cfg.prompt_len = 3;
    cfg.gen_len = 2;
    const ActivationTrace t = generate_trace(m, cfg, SkewSpec::markov(1.3, 0.6), 23);
    const CorrelationTable built = build_table(t, m);

    CorrelationTable replayed = CorrelationTable::empty(m.n_layers, m.n_experts_per_layer);
    for (int step = 0; step < t.n_steps; ++step) {
        update_table(replayed, 0, {}, t.layer_selections(step, 0), m.top_k);
        for (int layer = 1; layer < t.n_layers; ++layer)
            update_table(replayed, layer, t.layer_selections(step, layer - 1),
                         t.layer_selections(step, layer), m.top_k);
    }
    CHECK(replayed == built);
}

TEST_CASE("single update increments one cell") {
    CorrelationTable table = CorrelationTable::empty(2, 4);
    const std::uint16_t prev[1] = {1};
    const std::uint16_t cur[1] = {3};
    update_table(table, 1, {prev, 1}, {cur, 1}, 1);
    CHECK(table.at(1, 1, 3) == 1);
    std::int64_t total = 0;
    for (int a = 0; a < 4; ++a)
        for (int b = 0; b < 4; ++b) total += table.at(1, a, b);
    CHECK(total == 1);
}

TEST_CASE("updates never touch the persisted file") {
    CorrelationTable table = CorrelationTable::empty(2, 4);
    table.marginal = {1, 2, 3, 4};
    table.at(1, 0, 1) = 5;
    TempFile f("table.json");
    save_table(table, f.path);
    std::ifstream in1(f.path, std::ios::binary);
    const std::string before((std::istreambuf_iterator<char>(in1)),
                             std::istreambuf_iterator<char>());
    const std::uint16_t prev[1] = {0};
    const std::uint16_t cur[1] = {1};
    update_table(table, 1, {prev, 1}, {cur, 1}, 1);
    std::ifstream in2(f.path, std::ios::binary);
    const std::string after((std::istreambuf_iterator<char>(in2)),
                            std::istreambuf_iterator<char>());
    CHECK(before == after);
    CHECK(table.at(1, 0, 1) == 6);
    const CorrelationTable reloaded = load_table(f.path);
    CHECK(reloaded.at(1, 0, 1) == 5);
}

TEST_CASE("table save/load round trip with stable key order") {
    const ModelSpec m = toy_model(3, 6, 2);
    BatchGroupConfig cfg;
    cfg.batch_size = 4;
    cfg.n_batches = 2;
    cfg.prompt_len = 2;
    cfg.gen_len = 2;
    const ActivationTrace t = generate_trace(m, cfg, SkewSpec::zipf(1.4), 31);
    const CorrelationTable table = build_table(t, m);
    TempFile f("table_rt.json");
    save_table(table, f.path);
    const CorrelationTable back = load_table(f.path);
    CHECK(back == table);
    // Serialization is deterministic.
    CHECK(table_to_string(table) == table_to_string(back));
}

TEST_CASE("fully sticky traces predict with full participation") {
    const ModelSpec m = toy_model(6, 8, 2);
    BatchGroupConfig cfg;
    cfg.batch_size = 16;
    cfg.n_batches = 4;
    cfg.prompt_len = 8;
    cfg.gen_len = 2;
    const ActivationTrace warm = generate_trace(m, cfg, SkewSpec::markov(1.5, 1.0), 101);
    const ActivationTrace eval = generate_trace(m, cfg, SkewSpec::markov(1.5, 1.0), 202);
    const CorrelationTable table = build_table(warm, m);
    const PrefetchQuality q = evaluate_prefetch(eval, table, m.top_k);
    for (double p : q.participation_per_layer) CHECK(p == 1.0);
}
