// SPDX-License-Identifier: Apache-2.0
#include "moesim/correlation.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

namespace moesim {

using json = nlohmann::ordered_json;

CorrelationTable CorrelationTable::empty(int n_layers, int n_experts) {
    CorrelationTable t;
    t.n_layers = n_layers;
    t.n_experts = n_experts;
    t.marginal.assign(n_experts, 0);
    if (n_layers > 1)
        t.counts.assign(static_cast<std::size_t>(n_layers - 1) * n_experts * n_experts, 0);
    return t;
}

std::int64_t& CorrelationTable::at(int layer, int prev, int cur) {
    if (layer < 1 || layer >= n_layers || prev < 0 || prev >= n_experts || cur < 0 ||
        cur >= n_experts)
        throw RangeError("correlation table index out of range");
    return counts[(static_cast<std::size_t>(layer - 1) * n_experts + prev) * n_experts + cur];
}

std::int64_t CorrelationTable::at(int layer, int prev, int cur) const {
    return const_cast<CorrelationTable*>(this)->at(layer, prev, cur);
}

CorrelationTable build_table(const ActivationTrace& trace, const ModelSpec& spec) {
    if (trace.n_layers != spec.n_layers || trace.n_experts != spec.n_experts_per_layer)
        throw ValidationError("build_table: trace dimensions do not match the model");
    CorrelationTable t = CorrelationTable::empty(spec.n_layers, spec.n_experts_per_layer);
    for (int step = 0; step < trace.n_steps; ++step) {
        const int tokens = trace.tokens_per_batch(step);
        for (int batch = 0; batch < trace.n_batches; ++batch) {
            for (int token = 0; token < tokens; ++token) {
                auto first = trace.selections(step, 0, batch, token);
                for (std::uint16_t e : first) t.marginal[e]++;
                for (int layer = 1; layer < trace.n_layers; ++layer) {
                    auto prev = trace.selections(step, layer - 1, batch, token);
                    auto cur = trace.selections(step, layer, batch, token);
                    for (std::uint16_t a : prev)
                        for (std::uint16_t b : cur) t.at(layer, a, b)++;
                }
            }
        }
    }
    return t;
}

namespace {

std::vector<int> top_k_by_score(const std::vector<std::int64_t>& scores, int K) {
    std::vector<int> ids(scores.size());
    std::iota(ids.begin(), ids.end(), 0);
    std::stable_sort(ids.begin(), ids.end(), [&](int a, int b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return a < b;
    });
    ids.resize(K);
    return ids;
}

}  // namespace

PrefetchDecision predict_hot(const CorrelationTable& table, int layer,
                             std::span<const std::uint16_t> prev_selections, int K,
                             TendencyAggregation agg, int top_k) {
    if (K < 1 || K > table.n_experts)
        throw ValidationError("predict_hot: K must be in [1, n_experts]");
    if (layer < 0 || layer >= table.n_layers)
        throw RangeError("predict_hot: layer out of range");

    PrefetchDecision d;
    d.layer = layer;
    std::vector<std::int64_t> scores(table.n_experts, 0);

    if (layer == 0) {
        scores = table.marginal;
        d.used_fallback = true;  // marginal vector, no path information
    } else if (agg == TendencyAggregation::sum) {
        for (std::uint16_t a : prev_selections)
            for (int b = 0; b < table.n_experts; ++b) scores[b] += table.at(layer, a, b);
    } else {
        // Vote: each token contributes one count to its argmax tendency.
        if (top_k < 1) throw ValidationError("predict_hot: vote aggregation needs top_k");
        for (std::size_t i = 0; i + top_k <= prev_selections.size(); i += top_k) {
            std::int64_t best_score = -1;
            int best = 0;
            for (int b = 0; b < table.n_experts; ++b) {
                std::int64_t sc = 0;
                for (int k = 0; k < top_k; ++k) sc += table.at(layer, prev_selections[i + k], b);
                if (sc > best_score) {
                    best_score = sc;
                    best = b;
                }
            }
            if (best_score > 0) scores[best]++;
        }
    }

    const bool empty_rows =
        std::all_of(scores.begin(), scores.end(), [](std::int64_t s) { return s == 0; });
    if (layer > 0 && empty_rows) {
        scores = table.marginal;
        d.used_fallback = true;
    }

    d.expert_ids = top_k_by_score(scores, K);
    d.scores.reserve(K);
    for (int id : d.expert_ids) d.scores.push_back(scores[id]);
    return d;
}

void update_table(CorrelationTable& table, int layer,
                  std::span<const std::uint16_t> prev_selections,
                  std::span<const std::uint16_t> actual_selections, int top_k) {
    for (std::uint16_t e : actual_selections)
        if (e >= table.n_experts) throw ValidationError("update_table: expert out of range");
    if (layer == 0 || prev_selections.empty()) {
        for (std::uint16_t e : actual_selections) table.marginal[e]++;
        return;
    }
    if (top_k < 1 || prev_selections.size() != actual_selections.size() ||
        prev_selections.size() % top_k != 0)
        throw ValidationError("update_table: selection spans must align token-wise");
    for (std::size_t i = 0; i < prev_selections.size(); i += top_k) {
        for (int a = 0; a < top_k; ++a)
            for (int b = 0; b < top_k; ++b)
                table.at(layer, prev_selections[i + a], actual_selections[i + b])++;
    }
}

std::string table_to_string(const CorrelationTable& table) {
    json j;
    j["type"] = "moesim-correlation-table";
    j["version"] = 1;
    j["n_layers"] = table.n_layers;
    j["n_experts"] = table.n_experts;
    j["path_length"] = table.path_length;
    j["marginal"] = table.marginal;
    json layers = json::object();
    for (int layer = 1; layer < table.n_layers; ++layer) {
        json rows = json::object();
        for (int a = 0; a < table.n_experts; ++a) {
            json row = json::object();
            for (int b = 0; b < table.n_experts; ++b) {
                const std::int64_t c = table.at(layer, a, b);
                if (c != 0) row[std::to_string(b)] = c;
            }
            if (!row.empty()) rows[std::to_string(a)] = std::move(row);
        }
        if (!rows.empty()) layers[std::to_string(layer)] = std::move(rows);
    }
    j["counts"] = std::move(layers);
    return j.dump(2) + "\n";
}

void save_table(const CorrelationTable& table, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ParseError("save_table: cannot open '" + path + "' for writing");
    f << table_to_string(table);
}

CorrelationTable load_table(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ParseError("load_table: cannot open '" + path + "'");
    json j;
    try {
        f >> j;
    } catch (const json::exception& e) {
        throw ParseError(std::string("load_table: ") + e.what());
    }
    if (j.value("type", "") != "moesim-correlation-table")
        throw ParseError("load_table: not a correlation table file");
    CorrelationTable t =
        CorrelationTable::empty(j.at("n_layers").get<int>(), j.at("n_experts").get<int>());
    t.path_length = j.value("path_length", 1);
    const auto& marg = j.at("marginal");
    if (static_cast<int>(marg.size()) != t.n_experts)
        throw ParseError("load_table: marginal size mismatch");
    for (int e = 0; e < t.n_experts; ++e) t.marginal[e] = marg[e].get<std::int64_t>();
    for (const auto& [layer_key, rows] : j.at("counts").items()) {
        const int layer = std::stoi(layer_key);
        for (const auto& [a_key, row] : rows.items()) {
            const int a = std::stoi(a_key);
            for (const auto& [b_key, cnt] : row.items())
                t.at(layer, a, std::stoi(b_key)) = cnt.get<std::int64_t>();
        }
    }
    return t;
}

PrefetchQuality evaluate_prefetch(const ActivationTrace& trace, const CorrelationTable& table,
                                  int K, TendencyAggregation agg) {
    PrefetchQuality q;
    q.participation_per_layer.assign(trace.n_layers, 0.0);
    q.accuracy_per_layer.assign(trace.n_layers, 0.0);
    for (int layer = 0; layer < trace.n_layers; ++layer) {
        double part = 0.0, acc = 0.0;
        for (int step = 0; step < trace.n_steps; ++step) {
            std::span<const std::uint16_t> prev;
            if (layer > 0) prev = trace.layer_selections(step, layer - 1);
            const PrefetchDecision d = predict_hot(table, layer, prev, K, agg, trace.top_k);
            const ExpertLoad load = expert_load(trace, step, layer);
            const std::vector<int> hottest = load.by_hotness();
            int active_hits = 0, top_hits = 0;
            for (int e : d.expert_ids) {
                if (load.tokens_per_expert[e] > 0) active_hits++;
                for (int i = 0; i < K && i < static_cast<int>(hottest.size()); ++i)
                    if (hottest[i] == e) top_hits++;
            }
            part += static_cast<double>(active_hits) / K;
            acc += static_cast<double>(top_hits) / K;
        }
        q.participation_per_layer[layer] = part / trace.n_steps;
        q.accuracy_per_layer[layer] = acc / trace.n_steps;
    }
    q.participation =
        std::accumulate(q.participation_per_layer.begin(), q.participation_per_layer.end(), 0.0) /
        trace.n_layers;
    q.accuracy = std::accumulate(q.accuracy_per_layer.begin(), q.accuracy_per_layer.end(), 0.0) /
                 trace.n_layers;
    return q;
}

}  // namespace moesim

