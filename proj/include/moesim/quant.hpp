// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "moesim/error.hpp"
#include "moesim/types.hpp"

namespace moesim {

struct QuantConfig {
    int bits = 4;
    int group_size = 64;
    int zero_scale_group_size = 128;

    void validate() const;
    int max_code() const { return (1 << bits) - 1; }
    bool operator==(const QuantConfig&) const = default;
};

// Group-wise affine quantization parameters. Stored at 16-bit float
// precision, matching the on-disk layout.
struct QuantParams {
    float scale = 1.0f;
    float zero = 0.0f;
};

struct QuantizedTensor {
    QuantConfig cfg;
    std::size_t n_elements = 0;
    std::vector<std::uint8_t> packed;        // bit-packed codes
    std::vector<std::uint16_t> scales_f16;   // one per group
    std::vector<std::uint16_t> zeros_f16;

    std::size_t n_groups() const;
    int code(std::size_t i) const;
    QuantParams group_params(std::size_t group) const;
};

// IEEE binary16 conversions (round to nearest even).
std::uint16_t f16_from_f32(float v);
float f32_from_f16(std::uint16_t h);

// Min-max initialization: s = (max-min)/(2^bits-1), z = -min/s.
QuantParams fit_minmax(std::span<const float> group, int bits);

// Min-max init followed by a bounded coordinate-descent refinement (<= 16
// iterations). A refinement step is kept only if it lowers the squared
// reconstruction error and every element still reconstructs within s/2.
QuantParams fit_params(std::span<const float> group, int bits, int max_iters = 16);

QuantizedTensor quantize(std::span<const float> w, const QuantConfig& cfg);
std::vector<float> dequantize(const QuantizedTensor& q);

// Packed size: ceil(elements*bits/8) code bytes plus 2x2 B of (scale, zero)
// metadata per group. zero_scale_group_size only shapes the metadata layout.
byte_count quantized_bytes(std::int64_t elements, const QuantConfig& cfg);

// Squared reconstruction error of (s, z) against a group, used by tests and
// the refinement loop.
double reconstruction_sse(std::span<const float> group, QuantParams p, int bits);

}  // namespace moesim
