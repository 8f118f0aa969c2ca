// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <vector>

#include "moesim/quant.hpp"

using namespace moesim;

namespace {

std::uint64_t qrng = 0xfeedbeefULL;
double urand() {
    qrng = qrng * 6364136223846793005ULL + 1442695040888963407ULL;
    return static_cast<double>(qrng >> 11) * 0x1.0p-53;
}

std::vector<float> random_group(std::size_t n, float lo, float hi) {
    std::vector<float> g(n);
    for (auto& v : g) v = lo + static_cast<float>(urand()) * (hi - lo);
    return g;
}

double max_abs_err(std::span<const float> w, const std::vector<float>& back) {
    double m = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i)
        m = std::max(m, std::abs(static_cast<double>(w[i]) - back[i]));
    return m;
}

}  // namespace

TEST_CASE("f16 round trip on representable values") {
    for (float v : {0.0f, 1.0f, -1.0f, 0.5f, 0.75f, 1024.0f, -3.0f, 65504.0f}) {
        CHECK(f32_from_f16(f16_from_f32(v)) == v);
    }
    // Round to nearest even on a non-representable mantissa.
    const float x = 1.0f + 0x1.0p-11f;
    const float r = f32_from_f16(f16_from_f32(x));
    CHECK(std::abs(r - x) <= 0x1.0p-11f);
}

TEST_CASE("constant group reconstructs exactly") {
    // 0.75 is f16-exact, so the degenerate path is lossless end to end.
    std::vector<float> w(64, 0.75f);
    const QuantizedTensor q = quantize(w, QuantConfig{4, 64, 128});
    const std::vector<float> back = dequantize(q);
    for (float v : back) CHECK(v == 0.75f);
}

TEST_CASE("degenerate fit uses unit scale") {
    std::vector<float> w(16, 3.0f);
    const QuantParams p = fit_minmax(w, 4);
    CHECK(p.scale == 1.0f);
    CHECK(p.zero == -3.0f);
}

TEST_CASE("full-range integer group is lattice-exact") {
    std::vector<float> w;
    for (int i = 0; i < 64; ++i) w.push_back(static_cast<float>(i % 16));
    const QuantizedTensor q = quantize(w, QuantConfig{4, 64, 128});
    const std::vector<float> back = dequantize(q);
    for (std::size_t i = 0; i < w.size(); ++i) CHECK(back[i] == w[i]);

    // {0, 15} pins s = 1, z = 0.
    std::vector<float> two = {0.0f, 15.0f};
    const QuantParams p = fit_params(two, 4);
    CHECK(p.scale == 1.0f);
    CHECK(p.zero == 0.0f);
}

TEST_CASE("re-quantizing a full-range lattice keeps codes (idempotence)") {
    std::vector<float> w;
    for (int i = 0; i < 128; ++i) w.push_back(static_cast<float>(i % 16) * 0.25f - 2.0f);
    const QuantConfig cfg{4, 64, 128};
    const QuantizedTensor q1 = quantize(w, cfg);
    const std::vector<float> back = dequantize(q1);
    const QuantizedTensor q2 = quantize(back, cfg);
    CHECK(q1.packed == q2.packed);
    CHECK(q1.scales_f16 == q2.scales_f16);
    CHECK(q1.zeros_f16 == q2.zeros_f16);
}

TEST_CASE("linspace reconstruction stays within half a scale step") {
    std::vector<float> w(64);
    for (int i = 0; i < 64; ++i) w[i] = -1.0f + 2.0f * i / 63.0f;
    const QuantizedTensor q = quantize(w, QuantConfig{4, 64, 128});
    const std::vector<float> back = dequantize(q);
    const float s = q.group_params(0).scale;
    CHECK(max_abs_err(w, back) <= s / 2 + 1e-6);
}

TEST_CASE("symmetric input maps zero to the mid code") {
    std::vector<float> w(64);
    for (int i = 0; i < 64; ++i) w[i] = -1.0f + 2.0f * i / 63.0f;
    const QuantParams init = fit_minmax(w, 4);
    CHECK(init.zero == doctest::Approx(7.5).epsilon(1e-3));
    const QuantParams fit = fit_params(w, 4);
    CHECK(fit.zero == doctest::Approx(7.5).epsilon(1e-2));
}

TEST_CASE("reconstruction bound holds on random groups") {
    for (int trial = 0; trial < 1000; ++trial) {
        const auto w = random_group(64, -2.0f, 2.0f);
        const QuantizedTensor q = quantize(w, QuantConfig{4, 64, 128});
        const std::vector<float> back = dequantize(q);
        const float s = q.group_params(0).scale;
        CHECK(max_abs_err(w, back) <= s / 2 + 1e-6);
    }
}

TEST_CASE("refinement never loses to the min-max initialization") {
    for (int trial = 0; trial < 200; ++trial) {
        const auto w = random_group(64, -1.0f, 3.0f);
        const QuantParams init = fit_minmax(w, 4);
        const QuantParams fit = fit_params(w, 4);
        CHECK(reconstruction_sse(w, fit, 4) <= reconstruction_sse(w, init, 4) + 1e-12);
    }
}

TEST_CASE("refinement beats min-max on most outlier groups") {
    int improved = 0;
    const int trials = 200;
    for (int trial = 0; trial < trials; ++trial) {
        auto w = random_group(63, -0.1f, 0.1f);
        w.push_back(4.0f + static_cast<float>(urand()));  // single outlier
        const QuantParams init = fit_minmax(w, 4);
        const QuantParams fit = fit_params(w, 4);
        if (reconstruction_sse(w, fit, 4) < reconstruction_sse(w, init, 4) - 1e-12) improved++;
    }
    CHECK(improved >= trials / 2);
}

TEST_CASE("quantized_bytes matches the packing arithmetic") {
    const QuantConfig q{4, 64, 128};
    CHECK(quantized_bytes(64, q) == 36);  // 32 code bytes + 4 metadata
    CHECK(static_cast<double>(quantized_bytes(64, q)) / 128.0 == 0.28125);
    CHECK(quantized_bytes(0, q) == 0);

    // Degenerate wide config stays at or above the raw fp16 footprint.
    QuantConfig wide = q;
    wide.bits = 16;
    CHECK(quantized_bytes(1024, wide) >= 1024 * 2);
}

TEST_CASE("quantized_bytes is monotone and grows with every group") {
    const QuantConfig q{4, 64, 128};
    byte_count prev = 0;
    for (std::int64_t e = 1; e <= 4096; ++e) {
        const byte_count b = quantized_bytes(e, q);
        CHECK(b >= prev);
        prev = b;
    }
    for (std::int64_t e = 64; e <= 64 * 64; e += 64)
        CHECK(quantized_bytes(e + 64, q) > quantized_bytes(e, q));
    for (int bits : {3, 4, 8})
        for (int more : {4, 8})
            if (more > bits)
                CHECK(quantized_bytes(640, QuantConfig{more, 64, 128}) >
                      quantized_bytes(640, QuantConfig{bits, 64, 128}));
}

TEST_CASE("quantize rejects bad input") {
    CHECK_THROWS_AS(quantize({}, QuantConfig{4, 64, 128}), ValidationError);
    std::vector<float> w = {1.0f, std::nanf("")};
    CHECK_THROWS_AS(quantize(w, QuantConfig{4, 64, 128}), ValidationError);
    CHECK_THROWS_AS(quantize(std::vector<float>(4, 1.0f), QuantConfig{5, 64, 128}),
                    ValidationError);
}

TEST_CASE("3-bit packing crosses byte boundaries correctly") {
    std::vector<float> w;
    for (int i = 0; i < 24; ++i) w.push_back(static_cast<float>(i % 8));
    const QuantizedTensor q = quantize(w, QuantConfig{3, 8, 128});
    const std::vector<float> back = dequantize(q);
    for (std::size_t i = 0; i < w.size(); ++i) CHECK(back[i] == w[i]);
    CHECK(q.packed.size() == (24 * 3 + 7) / 8);
}
