// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <map>

#include "moesim/simulator.hpp"
#include "oracle_dag.hpp"

using namespace moesim;

namespace {

struct Fixture {
    ModelSpec model;
    HardwareProfile hw;
    BatchGroupConfig cfg;
    ActivationTrace trace;
    PipelinePlan plan;
    PrefetchProvider provider;
};

Fixture make_fixture(int layers, int experts, int top_k, int batch, int n, int prompt, int gen,
                     const SkewSpec& skew, std::uint64_t seed,
                     const HardwareProfile& hw = toy_profile()) {
    Fixture f;
    f.model = toy_model(layers, experts, top_k);
    f.hw = hw;
    f.cfg.batch_size = batch;
    f.cfg.n_batches = n;
    f.cfg.prompt_len = prompt;
    f.cfg.gen_len = gen;
    f.trace = generate_trace(f.model, f.cfg, skew, seed);
    const TraceStats stats = compute_trace_stats(f.trace, top_k);
    f.plan =
        make_plan(f.model, f.hw, f.cfg, stats, std::nullopt, ExpertLoadModel::measured, {}, n);
    f.provider = make_table_prefetcher(build_table(f.trace, f.model), true,
                                       TendencyAggregation::sum, top_k);
    return f;
}

SimResult simulate(const Fixture& f, const Schedule& s) {
    // Capacity enforcement is exercised by the dedicated memory tests.
    MemoryLedger ledger = MemoryLedger::for_profile(f.hw, false);
    return run(s, f.plan.cost, f.plan, ledger);
}

}  // namespace

TEST_CASE("all-resident run is pure compute with zero bubbles after startup") {
    HardwareProfile hw = toy_profile();
    hw.vram_capacity = 8 * kGiB;  // everything resident
    hw.transfer_fixed_latency = 0;
    Fixture f = make_fixture(1, 2, 1, 2, 1, 1, 1, SkewSpec::uniform(), 2, hw);
    const Schedule s = build_klotski_schedule(f.plan, f.trace, f.provider);
    const SimResult r = simulate(f, s);
    duration_ps compute_sum = 0;
    for (const SimEvent& e : r.timeline)
        if (e.stream == StreamId::compute) compute_sum += e.end - e.start;
    CHECK(r.metrics.makespan == compute_sum);
    CHECK(r.metrics.bubble_time == 0);
}

TEST_CASE("hand arithmetic: compute waits for its load") {
    // One layer, one batch, one expert: load 8 ms then compute 5 ms chains to
    // a 13 ms makespan with an 8 ms leading bubble.
    ModelSpec m = toy_model(1, 1, 1);
    m.attention_bytes = 1;
    m.gate_bytes = 1;
    m.expert_bytes = 8'000'000;
    m.kv_bytes_per_token = 1;
    HardwareProfile hw = toy_profile();
    hw.vram_capacity = 26'000'000;  // working set only: the expert offloads
    hw.pcie_bandwidth = 1e9;  // 1000 ps/byte -> 8 ms per expert
    hw.transfer_fixed_latency = 0;
    hw.attn_compute_per_token = 0;
    hw.gate_compute_per_token = 0;
    hw.expert_compute_per_token = ps_from_ms(5.0);

    BatchGroupConfig cfg;
    cfg.batch_size = 1;
    cfg.n_batches = 1;
    cfg.prompt_len = 1;
    cfg.gen_len = 1;
    ActivationTrace trace = generate_trace(m, cfg, SkewSpec::uniform(), 1);
    trace.sel[0] = 0;
    const TraceStats stats = compute_trace_stats(trace, 1);
    const PipelinePlan plan =
        make_plan(m, hw, cfg, stats, std::nullopt, ExpertLoadModel::measured, {}, 1);
    REQUIRE(plan.placement.expert_tier[0] != Tier::vram);

    PrefetchProvider provider = [](int, int, std::span<const std::uint16_t>) {
        PrefetchDecision d;
        d.expert_ids = {0};
        d.scores = {1};
        return d;
    };
    PipelinePlan k1 = plan;
    k1.K = 1;
    const Schedule s = build_klotski_schedule(k1, trace, provider);
    MemoryLedger ledger = MemoryLedger::for_profile(hw);
    const SimResult r = run(s, plan.cost, plan, ledger);
    // The 1-byte gate rides first on the weight stream: 1000 ps ahead of the
    // 8 ms expert transfer, then the 5 ms compute chains on.
    CHECK(r.metrics.makespan == ps_from_ms(13.0) + 1000);
    CHECK(r.metrics.compute_busy == ps_from_ms(5.0));
    CHECK(r.metrics.bubble_time == ps_from_ms(8.0) + 1000);
}

TEST_CASE("engine matches the DAG longest-path oracle on an exhaustive toy grid") {
    const HardwareProfile settings[3] = {
        [] {
            HardwareProfile h = toy_profile();
            return h;
        }(),
        [] {
            HardwareProfile h = toy_profile();
            h.pcie_bandwidth = 1e12;  // compute-bound
            h.disk_bandwidth = 1e12;
            h.transfer_fixed_latency = 0;
            return h;
        }(),
        [] {
            HardwareProfile h = toy_profile();
            h.attn_compute_per_token = ps_from_us(1.0);  // transfer-bound
            h.gate_compute_per_token = 0;
            h.expert_compute_per_token = ps_from_us(2.0);
            return h;
        }(),
    };
    int instances = 0;
    for (int layers = 1; layers <= 3; ++layers) {
        for (int n = 1; n <= 3; ++n) {
            for (int experts = 1; experts <= 3; ++experts) {
                for (int setting = 0; setting < 3; ++setting) {
                    const int top_k = experts >= 2 ? 2 : 1;
                    Fixture f = make_fixture(layers, experts, top_k, 2, n, 2, 2,
                                             SkewSpec::zipf(1.0),
                                             1000 + instances, settings[setting]);
                    for (Variant v :
                         {Variant::simple, Variant::multibatch_full_prefetch,
                          Variant::strawman_no_reorder, Variant::klotski}) {
                        const Schedule s =
                            v == Variant::klotski
                                ? build_klotski_schedule(f.plan, f.trace, f.provider)
                                : build_baseline_schedule(v, f.plan, f.trace, f.provider);
                        REQUIRE(validate_schedule(s, f.trace, f.plan).ok());
                        const SimResult r = simulate(f, s);
                        CHECK(r.metrics.makespan == moesim_test::oracle_makespan(s, f.plan.cost));
                    }
                    instances++;
                }
            }
        }
    }
    CHECK(instances == 81);
}

TEST_CASE("runs are deterministic") {
    Fixture f = make_fixture(3, 5, 2, 4, 3, 4, 2, SkewSpec::markov(1.2, 0.6), 77);
    const Schedule s = build_klotski_schedule(f.plan, f.trace, f.provider);
    const SimResult a = simulate(f, s);
    const SimResult b = simulate(f, s);
    REQUIRE(a.timeline.size() == b.timeline.size());
    for (std::size_t i = 0; i < a.timeline.size(); ++i) {
        CHECK(a.timeline[i].start == b.timeline[i].start);
        CHECK(a.timeline[i].end == b.timeline[i].end);
    }
}

TEST_CASE("stream exclusivity and causality hold on random workloads") {
    for (std::uint64_t seed : {11ULL, 22ULL, 33ULL}) {
        Fixture f = make_fixture(3, 6, 2, 3, 4, 3, 2, SkewSpec::zipf(1.4), seed);
        for (Variant v : {Variant::simple, Variant::klotski}) {
            const Schedule s = v == Variant::klotski
                                   ? build_klotski_schedule(f.plan, f.trace, f.provider)
                                   : build_baseline_schedule(v, f.plan, f.trace, f.provider);
            const SimResult r = simulate(f, s);
            std::map<StreamId, std::vector<std::pair<duration_ps, duration_ps>>> by_stream;
            for (const SimEvent& e : r.timeline) {
                CHECK(e.end >= e.start);
                by_stream[e.stream].emplace_back(e.start, e.end);
                for (auto d : s.ops[e.op_id].deps) CHECK(e.start >= r.timeline[d].end);
            }
            for (auto& [stream, spans] : by_stream) {
                std::sort(spans.begin(), spans.end());
                for (std::size_t i = 1; i < spans.size(); ++i)
                    CHECK(spans[i].first >= spans[i - 1].second);
            }
            // Accounting identity.
            CHECK(r.metrics.makespan == r.metrics.compute_busy + r.metrics.bubble_time);
            CHECK(r.metrics.bubble_time == r.metrics.bubbles.total());
        }
    }
}

TEST_CASE("bubble classification on a fabricated timeline") {
    Fixture f = make_fixture(1, 2, 1, 1, 2, 1, 1, SkewSpec::uniform(), 5);
    const Schedule s = build_klotski_schedule(f.plan, f.trace, f.provider);
    // Find a gate compute and the first expert compute after it.
    std::vector<SimEvent> timeline;
    duration_ps t = 0;
    for (auto id : s.stream_ops(StreamId::compute)) {
        const StreamOp& op = s.ops[id];
        SimEvent e;
        e.op_id = id;
        e.stream = StreamId::compute;
        e.start = t;
        e.end = t + ps_from_ms(1.0);
        if (op.kind == OpKind::compute_expert) {
            e.start += ps_from_ms(3.0);  // one 3 ms stall inside the MoE layer
            e.end += ps_from_ms(3.0);
        }
        t = e.end;
        timeline.push_back(e);
    }
    const BubbleBreakdown b = bubble_stats(timeline, s);
    CHECK(b.gate_to_expert + b.intra_expert == ps_from_ms(3.0) * f.trace.n_steps);
}

TEST_CASE("throughput is tokens over makespan") {
    RunMetrics m;
    m.makespan = 2 * kPsPerSec;
    BatchGroupConfig cfg;
    cfg.batch_size = 8;
    cfg.n_batches = 4;
    cfg.prompt_len = 16;
    cfg.gen_len = 2;
    CHECK(throughput(m, cfg) == doctest::Approx(32.0));
}

TEST_CASE("timeline exports are stable and well-formed") {
    Fixture f = make_fixture(2, 3, 1, 2, 2, 2, 2, SkewSpec::zipf(1.0), 15);
    const Schedule s = build_klotski_schedule(f.plan, f.trace, f.provider);
    const SimResult r = simulate(f, s);

    const std::string csv = timeline_to_string(r.timeline, s, TimelineFormat::csv);
    std::size_t rows = 0;
    for (char c : csv) rows += (c == '\n');
    CHECK(rows == r.timeline.size() + 1);  // header + one row per event

    const std::string json = timeline_to_string(r.timeline, s, TimelineFormat::trace_event_json);
    CHECK(json == timeline_to_string(r.timeline, s, TimelineFormat::trace_event_json));
    CHECK(json.find("\"traceEvents\"") != std::string::npos);

    const std::string empty =
        timeline_to_string(std::span<const SimEvent>{}, s, TimelineFormat::trace_event_json);
    CHECK(empty == "{\"displayTimeUnit\":\"ms\",\"traceEvents\":[]}\n");

    const std::string golden_path = std::string(MOESIM_GOLDEN_DIR) + "/timeline_toy.json";
    if (std::getenv("MOESIM_REGEN")) {
        std::ofstream out(golden_path, std::ios::binary);
        out << json;
    }
    std::ifstream in(golden_path, std::ios::binary);
    REQUIRE_MESSAGE(in.good(), "golden file missing: regenerate with MOESIM_REGEN=1");
    const std::string golden((std::istreambuf_iterator<char>(in)),
                             std::istreambuf_iterator<char>());
    CHECK(json == golden);
}

TEST_CASE("memory ledger returns to baseline after each layer pass") {
    Fixture f = make_fixture(3, 4, 2, 2, 2, 2, 2, SkewSpec::zipf(1.0), 25);
    const Schedule s = build_klotski_schedule(f.plan, f.trace, f.provider);
    MemoryLedger ledger = MemoryLedger::for_profile(f.hw, false);
    const SimResult r = run(s, f.plan.cost, f.plan, ledger);
    // Replay the event log: after the last offload of a (step, layer) pass,
    // no weight tags of that pass remain live.
    std::map<std::string, byte_count> live;
    for (const auto& e : ledger.events()) {
        if (e.is_alloc)
            live[e.tag] += e.bytes;
        else
            live.erase(e.tag);
    }
    for (const auto& [tag, bytes] : live) {
        const bool weight_tag = tag.rfind("w:", 0) == 0 || tag.rfind("e:", 0) == 0;
        CHECK_MESSAGE(!weight_tag, "leaked weight allocation: " << tag);
    }
}

TEST_CASE("immediate offload lowers the VRAM peak versus deferred") {
    // Skewed routing with several cold experts per layer.
    Fixture f = make_fixture(2, 8, 2, 6, 3, 4, 2, SkewSpec::zipf(0.7), 35);
    ScheduleOptions immediate;
    ScheduleOptions deferred;
    deferred.immediate_offload = false;
    const Schedule si = build_klotski_schedule(f.plan, f.trace, f.provider, immediate);
    const Schedule sd = build_klotski_schedule(f.plan, f.trace, f.provider, deferred);
    MemoryLedger li = MemoryLedger::for_profile(f.hw, false);
    MemoryLedger ld = MemoryLedger::for_profile(f.hw, false);
    run(si, f.plan.cost, f.plan, li);
    run(sd, f.plan.cost, f.plan, ld);
    CHECK(li.high_water(Tier::vram) < ld.high_water(Tier::vram));
}

TEST_CASE("deadlock reports the circular wait") {
    Fixture f = make_fixture(1, 2, 1, 1, 1, 1, 1, SkewSpec::uniform(), 45);
    Schedule s = build_klotski_schedule(f.plan, f.trace, f.provider);
    REQUIRE_FALSE(s.ops.empty());
    // Cross-stream circular wait between the first two ops of different streams.
    std::int32_t a = s.stream_ops(StreamId::compute).front();
    std::int32_t b = s.stream_ops(StreamId::weight_load).front();
    s.ops[a].deps.push_back(b);
    s.ops[b].deps.push_back(a);
    MemoryLedger ledger = MemoryLedger::for_profile(f.hw);
    CHECK_THROWS_AS(run(s, f.plan.cost, f.plan, ledger), AccountingError);
}

TEST_CASE("shared PCIe mode halves concurrent transfer bandwidth") {
    // Two equal transfers issued together on different streams.
    Fixture f = make_fixture(1, 2, 2, 1, 1, 1, 1, SkewSpec::uniform(), 55);
    Schedule s;
    s.variant = Variant::klotski;
    s.n_steps = 1;
    s.n_layers = 1;
    s.n_batches = 1;
    s.batch_size = 1;
    s.top_k = 1;
    s.n_experts = 2;
    StreamOp l1;
    l1.id = 0;
    l1.stream = StreamId::weight_load;
    l1.kind = OpKind::load_weights;
    l1.cls = TensorClass::attention;
    l1.step = 0;
    l1.layer = 0;
    l1.payload_bytes = 1'000'000;
    l1.route = TransferRoute::dram_vram_pinned;
    StreamOp l2 = l1;
    l2.id = 1;
    l2.stream = StreamId::expert_load;
    l2.kind = OpKind::load_expert;
    l2.expert = 0;
    s.ops = {l1, l2};
    s.streams[static_cast<int>(StreamId::weight_load)] = {0};
    s.streams[static_cast<int>(StreamId::expert_load)] = {1};

    CostProfile cost = f.plan.cost;
    cost.ps_per_byte_pinned = 1000;  // 1 ms per transfer at full rate
    cost.transfer_fixed_latency = 0;

    MemoryLedger ledger({1 << 30, 1 << 30, 1 << 30, 1 << 30}, false);
    SimOptions independent;
    const SimResult ri = run(s, cost, f.plan, ledger);
    CHECK(ri.metrics.makespan == ps_from_ms(1.0));

    MemoryLedger ledger2({1 << 30, 1 << 30, 1 << 30, 1 << 30}, false);
    SimOptions shared;
    shared.shared_pcie = true;
    const SimResult rs = run(s, cost, f.plan, ledger2);
    const SimResult rs2 = [&] {
        MemoryLedger l3({1 << 30, 1 << 30, 1 << 30, 1 << 30}, false);
        return run(s, cost, f.plan, l3, shared);
    }();
    CHECK(rs.metrics.makespan == ps_from_ms(1.0));  // defaults stay independent
    CHECK(ms_from_ps(rs2.metrics.makespan) == doctest::Approx(2.0).epsilon(0.01));
}
