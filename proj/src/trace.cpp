// SPDX-License-Identifier: Apache-2.0
#include "moesim/trace.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

namespace moesim {

using json = nlohmann::ordered_json;

void BatchGroupConfig::validate() const {
    if (batch_size < 1 || n_batches < 1 || prompt_len < 1 || gen_len < 1)
        throw ValidationError("batch group: all fields must be >= 1");
}

void SkewSpec::validate() const {
    if (zipf_s < 0.0) throw ConfigError("skew: zipf s must be >= 0");
    if (stickiness < 0.0 || stickiness > 1.0)
        throw ConfigError("skew: stickiness must be in [0, 1]");
}

std::string SkewSpec::to_string() const {
    std::ostringstream os;
    switch (kind) {
        case Kind::uniform: os << "uniform"; break;
        case Kind::zipf: os << "zipf(" << zipf_s << ")"; break;
        case Kind::markov: os << "markov(" << zipf_s << "," << stickiness << ")"; break;
    }
    return os.str();
}

std::size_t ActivationTrace::offset(int step, int layer, int batch, int token) const {
    // Step strides differ (prefill is longer); precompute the prefill block.
    const std::size_t layer_stride0 =
        static_cast<std::size_t>(n_batches) * tokens_per_batch(0) * top_k;
    const std::size_t step0 = static_cast<std::size_t>(n_layers) * layer_stride0;
    if (step == 0) {
        return (static_cast<std::size_t>(layer) * n_batches * tokens_per_batch(0) +
                static_cast<std::size_t>(batch) * tokens_per_batch(0) + token) *
               top_k;
    }
    const std::size_t layer_stride =
        static_cast<std::size_t>(n_batches) * tokens_per_batch(1) * top_k;
    return step0 + (static_cast<std::size_t>(step - 1) * n_layers) * layer_stride +
           (static_cast<std::size_t>(layer) * n_batches * tokens_per_batch(1) +
            static_cast<std::size_t>(batch) * tokens_per_batch(1) + token) *
               static_cast<std::size_t>(top_k);
}

std::span<const std::uint16_t> ActivationTrace::selections(int step, int layer, int batch,
                                                           int token) const {
    return {sel.data() + offset(step, layer, batch, token), static_cast<std::size_t>(top_k)};
}

std::span<const std::uint16_t> ActivationTrace::layer_selections(int step, int layer) const {
    const std::size_t begin = offset(step, layer, 0, 0);
    const std::size_t count =
        static_cast<std::size_t>(n_batches) * tokens_per_batch(step) * top_k;
    return {sel.data() + begin, count};
}

std::span<const std::uint16_t> ActivationTrace::batch_selections(int step, int layer,
                                                                 int batch) const {
    const std::size_t begin = offset(step, layer, batch, 0);
    return {sel.data() + begin, static_cast<std::size_t>(tokens_per_batch(step)) * top_k};
}

void ActivationTrace::validate() const {
    std::size_t expect = 0;
    for (int s = 0; s < n_steps; ++s)
        expect += static_cast<std::size_t>(n_layers) * n_batches * tokens_per_batch(s) * top_k;
    if (sel.size() != expect)
        throw ValidationError("trace: selection count does not cover the declared ranges");
    for (std::uint16_t e : sel) {
        if (e >= n_experts) throw ValidationError("trace: expert id out of range");
    }
    // Each token's list must hold distinct ids.
    for (std::size_t i = 0; i + top_k <= sel.size(); i += top_k) {
        for (int a = 0; a < top_k; ++a)
            for (int b = a + 1; b < top_k; ++b)
                if (sel[i + a] == sel[i + b])
                    throw ValidationError("trace: duplicate expert in one selection");
    }
}

namespace {

// SplitMix64: deterministic, platform-independent, and good enough for
// synthetic workloads.
struct SplitMix64 {
    std::uint64_t state;
    explicit SplitMix64(std::uint64_t seed) : state(seed) {}
    std::uint64_t next() {
        std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }
    double uniform01() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }
    std::uint64_t below(std::uint64_t bound) { return next() % bound; }
};

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
    SplitMix64 r(a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2)));
    return r.next();
}

// Zipf weights over ranks, mapped to expert ids through a per-layer
// permutation so hot experts differ across layers.
struct LayerDistribution {
    std::vector<double> cdf;          // over expert ids
    std::vector<int> rank_to_expert;
};

LayerDistribution layer_distribution(int n_experts, double s, std::uint64_t seed, int layer) {
    LayerDistribution d;
    d.rank_to_expert.resize(n_experts);
    std::iota(d.rank_to_expert.begin(), d.rank_to_expert.end(), 0);
    SplitMix64 rng(mix(seed, 0x7065726dULL + layer));
    for (int i = n_experts - 1; i > 0; --i) {
        const int j = static_cast<int>(rng.below(static_cast<std::uint64_t>(i) + 1));
        std::swap(d.rank_to_expert[i], d.rank_to_expert[j]);
    }
    std::vector<double> w(n_experts);
    for (int r = 0; r < n_experts; ++r)
        w[d.rank_to_expert[r]] = 1.0 / std::pow(static_cast<double>(r + 1), s);
    d.cdf.resize(n_experts);
    double acc = 0.0;
    for (int e = 0; e < n_experts; ++e) {
        acc += w[e];
        d.cdf[e] = acc;
    }
    for (double& c : d.cdf) c /= acc;
    return d;
}

int sample(const LayerDistribution& d, SplitMix64& rng) {
    const double u = rng.uniform01();
    auto it = std::lower_bound(d.cdf.begin(), d.cdf.end(), u);
    if (it == d.cdf.end()) return static_cast<int>(d.cdf.size()) - 1;
    return static_cast<int>(it - d.cdf.begin());
}

void sample_topk(const LayerDistribution& d, SplitMix64& rng, int k, std::uint16_t* out) {
    int drawn = 0;
    while (drawn < k) {
        const int e = sample(d, rng);
        bool dup = false;
        for (int i = 0; i < drawn; ++i) dup |= (out[i] == e);
        if (!dup) out[drawn++] = static_cast<std::uint16_t>(e);
    }
}

}  // namespace

ActivationTrace generate_trace(const ModelSpec& spec, const BatchGroupConfig& cfg,
                               const SkewSpec& skew, std::uint64_t seed) {
    spec.validate();
    cfg.validate();
    skew.validate();

    ActivationTrace t;
    t.n_steps = cfg.n_steps();
    t.n_layers = spec.n_layers;
    t.n_batches = cfg.n_batches;
    t.batch_size = cfg.batch_size;
    t.prompt_len = cfg.prompt_len;
    t.top_k = spec.top_k;
    t.n_experts = spec.n_experts_per_layer;
    t.seed = seed;
    t.skew = skew;

    std::size_t total = 0;
    for (int s = 0; s < t.n_steps; ++s)
        total += static_cast<std::size_t>(t.n_layers) * t.n_batches * t.tokens_per_batch(s) *
                 t.top_k;
    t.sel.resize(total);

    const double s_param = skew.kind == SkewSpec::Kind::uniform ? 0.0 : skew.zipf_s;
    std::vector<LayerDistribution> dist(spec.n_layers);
    for (int j = 0; j < spec.n_layers; ++j)
        dist[j] = layer_distribution(spec.n_experts_per_layer, s_param, seed, j);

    const bool sticky = skew.kind == SkewSpec::Kind::markov;
    std::vector<std::uint16_t> prev(t.top_k);

    for (int step = 0; step < t.n_steps; ++step) {
        const int tokens = t.tokens_per_batch(step);
        for (int batch = 0; batch < t.n_batches; ++batch) {
            for (int token = 0; token < tokens; ++token) {
                // One independent stream per (step, batch, token): draw order
                // never matters.
                SplitMix64 rng(mix(mix(seed, step), mix(batch * 131071ULL + 7, token)));
                for (int layer = 0; layer < t.n_layers; ++layer) {
                    std::uint16_t* out = t.sel.data() + t.offset(step, layer, batch, token);
                    if (layer > 0 && sticky && rng.uniform01() < skew.stickiness) {
                        std::copy(prev.begin(), prev.end(), out);
                    } else {
                        sample_topk(dist[layer], rng, t.top_k, out);
                    }
                    std::copy(out, out + t.top_k, prev.begin());
                }
            }
        }
    }
    return t;
}

namespace {

json skew_to_json(const SkewSpec& s) {
    json j;
    switch (s.kind) {
        case SkewSpec::Kind::uniform: j["kind"] = "uniform"; break;
        case SkewSpec::Kind::zipf: j["kind"] = "zipf"; break;
        case SkewSpec::Kind::markov: j["kind"] = "markov"; break;
    }
    j["s"] = s.zipf_s;
    j["p"] = s.stickiness;
    return j;
}

SkewSpec skew_from_json(const json& j) {
    SkewSpec s;
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "uniform") s.kind = SkewSpec::Kind::uniform;
    else if (kind == "zipf") s.kind = SkewSpec::Kind::zipf;
    else if (kind == "markov") s.kind = SkewSpec::Kind::markov;
    else throw ParseError("trace header: unknown skew kind '" + kind + "'");
    s.zipf_s = j.value("s", 0.0);
    s.stickiness = j.value("p", 0.0);
    return s;
}

}  // namespace

std::string trace_to_string(const ActivationTrace& trace) {
    std::ostringstream os;
    json header;
    header["type"] = "moesim-trace";
    header["version"] = 1;
    header["seed"] = trace.seed;
    header["skew"] = skew_to_json(trace.skew);
    header["n_steps"] = trace.n_steps;
    header["n_layers"] = trace.n_layers;
    header["n_batches"] = trace.n_batches;
    header["batch_size"] = trace.batch_size;
    header["prompt_len"] = trace.prompt_len;
    header["top_k"] = trace.top_k;
    header["n_experts"] = trace.n_experts;
    os << header.dump() << '\n';
    for (int step = 0; step < trace.n_steps; ++step) {
        for (int layer = 0; layer < trace.n_layers; ++layer) {
            for (int batch = 0; batch < trace.n_batches; ++batch) {
                const int tokens = trace.tokens_per_batch(step);
                for (int token = 0; token < tokens; ++token) {
                    auto sel = trace.selections(step, layer, batch, token);
                    os << "{\"step\":" << step << ",\"layer\":" << layer
                       << ",\"batch\":" << batch << ",\"token\":" << token << ",\"experts\":[";
                    for (std::size_t k = 0; k < sel.size(); ++k) {
                        if (k) os << ',';
                        os << sel[k];
                    }
                    os << "]}\n";
                }
            }
        }
    }
    return os.str();
}

void save_trace(const ActivationTrace& trace, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ParseError("save_trace: cannot open '" + path + "' for writing");
    f << trace_to_string(trace);
}

ActivationTrace load_trace(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ParseError("load_trace: cannot open '" + path + "'");
    std::string line;
    if (!std::getline(f, line)) throw ParseError("load_trace: empty file '" + path + "'");

    ActivationTrace t;
    try {
        const json header = json::parse(line);
        if (header.value("type", "") != "moesim-trace")
            throw ParseError("load_trace: missing trace header");
        t.seed = header.at("seed").get<std::uint64_t>();
        t.skew = skew_from_json(header.at("skew"));
        t.n_steps = header.at("n_steps").get<int>();
        t.n_layers = header.at("n_layers").get<int>();
        t.n_batches = header.at("n_batches").get<int>();
        t.batch_size = header.at("batch_size").get<int>();
        t.prompt_len = header.at("prompt_len").get<int>();
        t.top_k = header.at("top_k").get<int>();
        t.n_experts = header.at("n_experts").get<int>();
    } catch (const json::exception& e) {
        throw ParseError(std::string("load_trace: bad header: ") + e.what());
    }
    if (t.n_steps < 1 || t.n_layers < 1 || t.n_batches < 1 || t.batch_size < 1 ||
        t.top_k < 1 || t.n_experts < 1)
        throw ParseError("load_trace: header dimensions must be >= 1");

    std::size_t total = 0;
    for (int s = 0; s < t.n_steps; ++s)
        total += static_cast<std::size_t>(t.n_layers) * t.n_batches * t.tokens_per_batch(s) *
                 t.top_k;
    t.sel.assign(total, 0);
    std::vector<bool> seen(total / t.top_k, false);

    std::size_t line_no = 1;
    while (std::getline(f, line)) {
        ++line_no;
        if (line.empty()) continue;
        json rec;
        try {
            rec = json::parse(line);
        } catch (const json::exception& e) {
            throw ParseError("load_trace: line " + std::to_string(line_no) + ": " + e.what());
        }
        const int step = rec.value("step", -1);
        const int layer = rec.value("layer", -1);
        const int batch = rec.value("batch", -1);
        const int token = rec.value("token", -1);
        if (step < 0 || step >= t.n_steps || layer < 0 || layer >= t.n_layers || batch < 0 ||
            batch >= t.n_batches || token < 0 || token >= t.tokens_per_batch(step))
            throw ParseError("load_trace: line " + std::to_string(line_no) +
                             ": index out of declared range");
        const auto& experts = rec.at("experts");
        if (!experts.is_array() || static_cast<int>(experts.size()) != t.top_k)
            throw ParseError("load_trace: line " + std::to_string(line_no) +
                             ": expected exactly top_k expert ids");
        const std::size_t off = t.offset(step, layer, batch, token);
        for (int k = 0; k < t.top_k; ++k) {
            const int e = experts[k].get<int>();
            if (e < 0 || e >= t.n_experts)
                throw ValidationError("load_trace: line " + std::to_string(line_no) +
                                      ": expert id " + std::to_string(e) + " out of range");
            t.sel[off + k] = static_cast<std::uint16_t>(e);
        }
        seen[off / t.top_k] = true;
    }
    for (bool b : seen) {
        if (!b) throw ParseError("load_trace: file is truncated (missing records)");
    }
    t.validate();
    return t;
}

std::int64_t ExpertLoad::total() const {
    return std::accumulate(tokens_per_expert.begin(), tokens_per_expert.end(),
                           static_cast<std::int64_t>(0));
}

int ExpertLoad::distinct_active() const {
    int n = 0;
    for (auto c : tokens_per_expert) n += (c > 0);
    return n;
}

std::vector<int> ExpertLoad::by_hotness() const {
    std::vector<int> ids;
    for (int e = 0; e < static_cast<int>(tokens_per_expert.size()); ++e)
        if (tokens_per_expert[e] > 0) ids.push_back(e);
    std::stable_sort(ids.begin(), ids.end(), [&](int a, int b) {
        if (tokens_per_expert[a] != tokens_per_expert[b])
            return tokens_per_expert[a] > tokens_per_expert[b];
        return a < b;
    });
    return ids;
}

ExpertLoad expert_load(const ActivationTrace& trace, int step, int layer) {
    if (step < 0 || step >= trace.n_steps || layer < 0 || layer >= trace.n_layers)
        throw RangeError("expert_load: (step, layer) outside trace range");
    ExpertLoad load;
    load.step = step;
    load.layer = layer;
    load.tokens_per_expert.assign(trace.n_experts, 0);
    for (std::uint16_t e : trace.layer_selections(step, layer)) load.tokens_per_expert[e]++;
    return load;
}

TraceStats compute_trace_stats(const ActivationTrace& trace, int K) {
    TraceStats st;
    st.n_layers = trace.n_layers;
    st.K = K;
    st.mean_distinct_active.assign(trace.n_layers, 0.0);
    st.topk_share.assign(trace.n_layers, 0.0);
    for (int layer = 0; layer < trace.n_layers; ++layer) {
        double distinct = 0.0, share = 0.0;
        for (int step = 0; step < trace.n_steps; ++step) {
            const ExpertLoad load = expert_load(trace, step, layer);
            distinct += load.distinct_active();
            std::vector<std::int64_t> counts = load.tokens_per_expert;
            std::sort(counts.begin(), counts.end(), std::greater<>());
            std::int64_t top = 0;
            for (int i = 0; i < K && i < static_cast<int>(counts.size()); ++i) top += counts[i];
            share += load.total() > 0 ? static_cast<double>(top) / load.total() : 0.0;
        }
        st.mean_distinct_active[layer] = distinct / trace.n_steps;
        st.topk_share[layer] = share / trace.n_steps;
    }
    return st;
}

}  // namespace moesim
