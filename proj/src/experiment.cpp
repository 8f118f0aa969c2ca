// SPDX-License-Identifier: Apache-2.0
#include "moesim/experiment.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace moesim {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

json read_json_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file '" + path + "'");
    try {
        json j;
        f >> j;
        return j;
    } catch (const json::exception& e) {
        throw ConfigError("config '" + path + "': " + e.what());
    }
}

ModelSpec model_from_json(const json& j) {
    ModelSpec m;
    m.name = j.value("name", "model");
    m.n_layers = j.at("n_layers").get<int>();
    m.n_experts_per_layer = j.at("n_experts_per_layer").get<int>();
    m.top_k = j.at("top_k").get<int>();
    m.attention_bytes = j.at("attention_bytes").get<byte_count>();
    m.gate_bytes = j.at("gate_bytes").get<byte_count>();
    m.expert_bytes = j.at("expert_bytes").get<byte_count>();
    m.kv_bytes_per_token = j.at("kv_bytes_per_token").get<byte_count>();
    if (j.contains("dtype")) {
        m.dtype.name = j["dtype"].value("name", "bf16");
        m.dtype.bits_per_element = j["dtype"].value("bits_per_element", 16);
    }
    m.validate();
    return m;
}

HardwareProfile hardware_from_json(const json& j) {
    HardwareProfile p;
    p.name = j.value("name", "hw");
    p.vram_capacity = j.at("vram_capacity").get<byte_count>();
    p.dram_capacity = j.at("dram_capacity").get<byte_count>();
    p.disk_capacity = j.at("disk_capacity").get<byte_count>();
    p.pcie_bandwidth = j.at("pcie_bandwidth").get<double>();
    p.pinned_bandwidth_factor = j.value("pinned_bandwidth_factor", 1.5);
    p.disk_bandwidth = j.at("disk_bandwidth").get<double>();
    p.transfer_fixed_latency = j.value("transfer_fixed_latency_us", 0.0) * kPsPerUs;
    p.attn_compute_per_token = ps_from_us(j.at("attn_compute_per_token_us").get<double>());
    p.gate_compute_per_token = ps_from_us(j.at("gate_compute_per_token_us").get<double>());
    p.expert_compute_per_token = ps_from_us(j.at("expert_compute_per_token_us").get<double>());
    p.dequant_ps_per_byte = j.value("dequant_ps_per_byte", 0.0);
    p.validate();
    return p;
}

ModelSpec resolve_model(const json& j, const fs::path& base) {
    if (j.is_string()) {
        const std::string name = j.get<std::string>();
        if (name == "mixtral-8x7b-like") return mixtral_8x7b_like();
        if (name == "mixtral-8x22b-like") return mixtral_8x22b_like();
        if (name == "toy") return toy_model();
        throw ConfigError("unknown model preset '" + name + "'");
    }
    if (j.contains("file"))
        return model_from_json(read_json_file((base / j["file"].get<std::string>()).string()));
    return model_from_json(j);
}

HardwareProfile resolve_hardware(const json& j, const fs::path& base) {
    if (j.is_string()) {
        const std::string name = j.get<std::string>();
        if (name == "env1") return env1_profile();
        if (name == "env2") return env2_profile();
        if (name == "toy-hw") return toy_profile();
        throw ConfigError("unknown hardware preset '" + name + "'");
    }
    if (j.contains("file"))
        return hardware_from_json(read_json_file((base / j["file"].get<std::string>()).string()));
    return hardware_from_json(j);
}

SkewSpec skew_from_config(const json& j) {
    SkewSpec s;
    const std::string kind = j.value("kind", "uniform");
    if (kind == "uniform") s = SkewSpec::uniform();
    else if (kind == "zipf") s = SkewSpec::zipf(j.value("s", 1.0));
    else if (kind == "markov") s = SkewSpec::markov(j.value("s", 1.0), j.value("stickiness", 0.8));
    else throw ConfigError("unknown skew kind '" + kind + "'");
    s.validate();
    return s;
}

}  // namespace

void ExperimentConfig::validate() const {
    model.validate();
    hardware.validate();
    workload.validate();
    skew.validate();
    if (variants.empty()) throw ConfigError("experiment: at least one variant required");
    if (quant) quant->validate();
}

ExperimentConfig load_experiment_config(const std::string& path) {
    const json j = read_json_file(path);
    const fs::path base = fs::path(path).parent_path();
    ExperimentConfig cfg;
    try {
        cfg.model = resolve_model(j.at("model"), base);
        cfg.hardware = resolve_hardware(j.at("hardware"), base);
        const json& w = j.at("workload");
        cfg.workload.batch_size = w.value("batch_size", 4);
        cfg.workload.prompt_len = w.value("prompt_len", 16);
        cfg.workload.gen_len = w.value("gen_len", 4);
        if (w.contains("n_batches") && w["n_batches"].is_number())
            cfg.n_override = w["n_batches"].get<int>();
        cfg.workload.n_batches = cfg.n_override.value_or(1);
        if (w.contains("skew")) cfg.skew = skew_from_config(w["skew"]);
        cfg.seed = w.value("seed", 1);
        cfg.warmup_seed = w.value("warmup_seed", 0);
        if (j.contains("variants")) {
            cfg.variants.clear();
            for (const auto& v : j["variants"])
                cfg.variants.push_back(variant_from_name(v.get<std::string>()));
        }
        if (j.contains("quant") && j["quant"].value("enabled", true)) {
            QuantConfig q;
            q.bits = j["quant"].value("bits", 4);
            q.group_size = j["quant"].value("group_size", 64);
            q.zero_scale_group_size = j["quant"].value("zero_scale_group_size", 128);
            cfg.quant = q;
        }
        if (j.contains("kv_retention")) {
            const auto& r = j["kv_retention"];
            if (r.value("mode", "full") == "streaming") {
                cfg.kv_retention.mode = KvRetentionPolicy::Mode::streaming;
                cfg.kv_retention.sink_tokens = r.value("sink_tokens", 4);
                cfg.kv_retention.window_tokens = r.value("window_tokens", 256);
            }
        }
        if (j.contains("load_model")) {
            const std::string lm = j["load_model"].get<std::string>();
            cfg.load_model = lm == "best" ? ExpertLoadModel::best
                             : lm == "worst" ? ExpertLoadModel::worst
                                             : ExpertLoadModel::measured;
        }
        if (j.contains("sweep_n"))
            for (const auto& v : j["sweep_n"]) cfg.sweep_n.push_back(v.get<int>());
        if (j.contains("batch_candidates"))
            for (const auto& v : j["batch_candidates"])
                cfg.batch_candidates.push_back(v.get<int>());
        cfg.output_dir = j.value("output_dir", "out");
        cfg.shared_pcie = j.value("shared_pcie", false);
        cfg.export_timelines = j.value("export_timelines", true);
    } catch (const json::exception& e) {
        throw ConfigError("config '" + path + "': " + e.what());
    }
    cfg.validate();
    return cfg;
}

namespace {

struct Prepared {
    BatchGroupConfig cfg;
    ActivationTrace trace;
    CorrelationTable table;
    PipelinePlan plan;
};

// Plan with the configured or solved n, then draw the group's trace at that
// size. The correlation table comes from a disjoint warm-up trace.
Prepared prepare(const ExperimentConfig& ecfg, std::optional<int> n_force) {
    Prepared p;
    p.cfg = ecfg.workload;

    const std::uint64_t warmup_seed =
        ecfg.warmup_seed ? ecfg.warmup_seed : ecfg.seed + 1;
    BatchGroupConfig warm_cfg = ecfg.workload;
    warm_cfg.n_batches = std::max(2, ecfg.workload.batch_size > 1 ? 2 : 4);
    const ActivationTrace warm =
        generate_trace(ecfg.model, warm_cfg, ecfg.skew, warmup_seed);
    p.table = build_table(warm, ecfg.model);
    const TraceStats warm_stats = compute_trace_stats(warm, ecfg.model.top_k);

    std::optional<int> n_override = n_force ? n_force : ecfg.n_override;
    p.plan = make_plan(ecfg.model, ecfg.hardware, ecfg.workload, warm_stats, ecfg.quant,
                       ecfg.load_model, ecfg.kv_retention, n_override);
    p.cfg.n_batches = p.plan.n_batches;
    p.trace = generate_trace(ecfg.model, p.cfg, ecfg.skew, ecfg.seed);
    return p;
}

RunMetrics simulate(const ExperimentConfig& ecfg, const Prepared& p, Variant v,
                    std::vector<SimEvent>* timeline_out = nullptr,
                    MemoryLedger* ledger_out = nullptr) {
    PrefetchProvider provider = make_table_prefetcher(p.table, true,
                                                      TendencyAggregation::sum,
                                                      ecfg.model.top_k);
    const Schedule schedule =
        v == Variant::klotski ? build_klotski_schedule(p.plan, p.trace, provider)
                              : build_baseline_schedule(v, p.plan, p.trace, provider);
    const ValidationReport report = validate_schedule(schedule, p.trace, p.plan);
    if (!report.ok())
        throw ValidationError("schedule validation failed: " + report.violations.front());
    MemoryLedger ledger = MemoryLedger::for_profile(ecfg.hardware);
    SimOptions sopts;
    sopts.shared_pcie = ecfg.shared_pcie;
    SimResult result = run(schedule, p.plan.cost, p.plan, ledger, sopts);
    if (timeline_out) *timeline_out = result.timeline;
    if (ledger_out) *ledger_out = std::move(ledger);
    return result.metrics;
}

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

}  // namespace

std::string metrics_to_json(const RunMetrics& m, Variant v) {
    json j;
    j["variant"] = variant_name(v);
    j["makespan_ms"] = fmt_double(ms_from_ps(m.makespan));
    j["compute_busy_ms"] = fmt_double(ms_from_ps(m.compute_busy));
    j["bubble_ms"] = fmt_double(ms_from_ps(m.bubble_time));
    j["expert_layer_bubble_ms"] = fmt_double(ms_from_ps(m.expert_layer_bubble_time));
    j["throughput_tps"] = fmt_double(m.throughput_tps);
    j["tokens_generated"] = m.tokens_generated;
    j["peak_vram_bytes"] = m.peak_vram;
    j["prefetch_participation"] = fmt_double(m.prefetch_participation);
    j["hot_accuracy"] = fmt_double(m.hot_accuracy);
    json b;
    b["startup_ms"] = fmt_double(ms_from_ps(m.bubbles.startup));
    b["intra_attention_ms"] = fmt_double(ms_from_ps(m.bubbles.intra_attention));
    b["attn_to_moe_ms"] = fmt_double(ms_from_ps(m.bubbles.attn_to_moe));
    b["intra_gate_ms"] = fmt_double(ms_from_ps(m.bubbles.intra_gate));
    b["gate_to_expert_ms"] = fmt_double(ms_from_ps(m.bubbles.gate_to_expert));
    b["intra_expert_ms"] = fmt_double(ms_from_ps(m.bubbles.intra_expert));
    b["moe_to_attn_ms"] = fmt_double(ms_from_ps(m.bubbles.moe_to_attn));
    b["drain_ms"] = fmt_double(ms_from_ps(m.bubbles.drain));
    j["bubbles"] = b;
    return j.dump(2) + "\n";
}

ExperimentResult run_experiment(const ExperimentConfig& cfg) {
    cfg.validate();
    const fs::path out(cfg.output_dir);
    fs::create_directories(out);

    ExperimentResult result;
    const Prepared p = prepare(cfg, std::nullopt);
    result.plan = p.plan;

    auto write = [&](const fs::path& path, const std::string& content) {
        std::ofstream f(path, std::ios::binary);
        if (!f) throw ConfigError("cannot write '" + path.string() + "'");
        f << content;
        result.files_written.push_back(path.string());
    };

    write(out / "plan.txt", p.plan.to_text());

    std::ostringstream comparison;
    comparison << "variant,makespan_ms,throughput_tps,bubble_ms,expert_layer_bubble_ms,"
                  "peak_vram_bytes,prefetch_participation,hot_accuracy\n";
    for (Variant v : cfg.variants) {
        std::vector<SimEvent> timeline;
        MemoryLedger ledger;
        Schedule schedule;  // rebuilt inside simulate; rebuild here for export
        PrefetchProvider provider =
            make_table_prefetcher(p.table, true, TendencyAggregation::sum, cfg.model.top_k);
        schedule = v == Variant::klotski
                       ? build_klotski_schedule(p.plan, p.trace, provider)
                       : build_baseline_schedule(v, p.plan, p.trace, provider);
        const ValidationReport report = validate_schedule(schedule, p.trace, p.plan);
        if (!report.ok())
            throw ValidationError("schedule validation failed: " + report.violations.front());
        MemoryLedger run_ledger = MemoryLedger::for_profile(cfg.hardware);
        SimOptions sopts;
        sopts.shared_pcie = cfg.shared_pcie;
        const SimResult sim = run(schedule, p.plan.cost, p.plan, run_ledger, sopts);
        const RunMetrics& m = sim.metrics;
        result.results.push_back({v, m});

        const std::string name = variant_name(v);
        write(out / ("metrics_" + name + ".json"), metrics_to_json(m, v));
        if (cfg.export_timelines) {
            write(out / ("timeline_" + name + ".json"),
                  timeline_to_string(sim.timeline, schedule, TimelineFormat::trace_event_json));
            write(out / ("timeline_" + name + ".csv"),
                  timeline_to_string(sim.timeline, schedule, TimelineFormat::csv));
        }
        write(out / ("memory_" + name + ".csv"), memory_timeline_csv(run_ledger));

        std::ostringstream acc;
        acc << "layer,participation,hot_accuracy\n";
        std::vector<double> part(schedule.n_layers, 0.0), hacc(schedule.n_layers, 0.0);
        std::vector<int> cnt(schedule.n_layers, 0);
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
            part[rec.layer] += static_cast<double>(hits) / k;
            hacc[rec.layer] += static_cast<double>(top_hits) / k;
            cnt[rec.layer]++;
        }
        for (int j = 0; j < schedule.n_layers; ++j) {
            const int c = std::max(1, cnt[j]);
            acc << j << ',' << fmt_double(part[j] / c) << ',' << fmt_double(hacc[j] / c) << "\n";
        }
        write(out / ("prefetch_" + name + ".csv"), acc.str());

        comparison << name << ',' << fmt_double(ms_from_ps(m.makespan)) << ','
                   << fmt_double(m.throughput_tps) << ',' << fmt_double(ms_from_ps(m.bubble_time))
                   << ',' << fmt_double(ms_from_ps(m.expert_layer_bubble_time)) << ','
                   << m.peak_vram << ',' << fmt_double(m.prefetch_participation) << ','
                   << fmt_double(m.hot_accuracy) << "\n";
    }
    write(out / "comparison.csv", comparison.str());
    return result;
}

SweepResult run_sweep(const ExperimentConfig& cfg) {
    cfg.validate();
    const fs::path out(cfg.output_dir);
    fs::create_directories(out);

    SweepResult result;
    const Prepared solved = prepare(cfg, std::nullopt);
    result.solved_n = solved.plan.solved_n_uncapped;

    std::vector<int> ns = cfg.sweep_n;
    if (ns.empty()) {
        for (int n = 1; n <= result.solved_n + 5; ++n) ns.push_back(n);
    }
    std::vector<int> batches = cfg.batch_candidates;
    if (batches.empty()) batches.push_back(cfg.workload.batch_size);

    std::ostringstream csv;
    csv << "batch_size,n,throughput_tps,makespan_ms,bubble_ms,peak_vram_bytes\n";
    for (int bs : batches) {
        for (int n : ns) {
            ExperimentConfig point = cfg;
            point.workload.batch_size = bs;
            const Prepared p = prepare(point, n);
            const RunMetrics m = simulate(point, p, Variant::klotski);
            result.points.push_back({n, bs, m});
            csv << bs << ',' << n << ',' << fmt_double(m.throughput_tps) << ','
                << fmt_double(ms_from_ps(m.makespan)) << ','
                << fmt_double(ms_from_ps(m.bubble_time)) << ',' << m.peak_vram << "\n";
        }
    }
    const fs::path path = out / "sweep.csv";
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ConfigError("cannot write '" + path.string() + "'");
    f << csv.str();
    result.files_written.push_back(path.string());
    return result;
}

SingleRun simulate_variant(const ExperimentConfig& cfg, Variant variant,
                           std::optional<int> n_override) {
    cfg.validate();
    const Prepared p = prepare(cfg, n_override);
    SingleRun out;
    out.plan = p.plan;
    out.metrics = simulate(cfg, p, variant, &out.timeline);
    return out;
}

}  // namespace moesim
