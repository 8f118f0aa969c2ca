// SPDX-License-Identifier: Apache-2.0
#include "moesim/quant.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <limits>

namespace moesim {

void QuantConfig::validate() const {
    if (bits != 3 && bits != 4 && bits != 8)
        throw ValidationError("quant: bits must be 3, 4 or 8");
    if (group_size <= 0) throw ValidationError("quant: group_size must be > 0");
    if (zero_scale_group_size <= 0)
        throw ValidationError("quant: zero_scale_group_size must be > 0");
}

std::uint16_t f16_from_f32(float v) {
    const std::uint32_t x = std::bit_cast<std::uint32_t>(v);
    const std::uint32_t sign = (x >> 16) & 0x8000u;
    std::uint32_t mant = x & 0x007fffffu;
    int exp = static_cast<int>((x >> 23) & 0xff) - 127;

    if (exp == 128) return static_cast<std::uint16_t>(sign | 0x7c00u | (mant ? 0x200u : 0));
    if (exp > 15) return static_cast<std::uint16_t>(sign | 0x7c00u);  // overflow -> inf
    if (exp >= -14) {
        // Normal half; round mantissa to nearest even.
        std::uint32_t m = mant >> 13;
        const std::uint32_t rem = mant & 0x1fffu;
        if (rem > 0x1000u || (rem == 0x1000u && (m & 1u))) m++;
        std::uint32_t bits = (static_cast<std::uint32_t>(exp + 15) << 10) + m;
        return static_cast<std::uint16_t>(sign | bits);  // mantissa carry bumps exponent
    }
    if (exp >= -25) {
        // Subnormal half.
        mant |= 0x00800000u;
        const int shift = -exp - 14 + 13;
        std::uint32_t m = mant >> shift;
        const std::uint32_t rem = mant & ((1u << shift) - 1);
        const std::uint32_t half = 1u << (shift - 1);
        if (rem > half || (rem == half && (m & 1u))) m++;
        return static_cast<std::uint16_t>(sign | m);
    }
    return static_cast<std::uint16_t>(sign);  // underflow -> signed zero
}

float f32_from_f16(std::uint16_t h) {
    const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
    const std::uint32_t exp = (h >> 10) & 0x1fu;
    const std::uint32_t mant = h & 0x3ffu;
    std::uint32_t out;
    if (exp == 0) {
        if (mant == 0) {
            out = sign;
        } else {
            // Normalize the subnormal.
            int e = -1;
            std::uint32_t m = mant;
            do {
                e++;
                m <<= 1;
            } while ((m & 0x400u) == 0);
            out = sign | (static_cast<std::uint32_t>(113 - e) << 23) | ((m & 0x3ffu) << 13);
        }
    } else if (exp == 0x1f) {
        out = sign | 0x7f800000u | (mant << 13);
    } else {
        out = sign | ((exp + 112) << 23) | (mant << 13);
    }
    return std::bit_cast<float>(out);
}

namespace {

float snap16(float v) { return f32_from_f16(f16_from_f32(v)); }

int clamp_code(long code, int max_code) {
    if (code < 0) return 0;
    if (code > max_code) return max_code;
    return static_cast<int>(code);
}

int encode(float w, QuantParams p, int max_code) {
    const double q = std::round(static_cast<double>(w) / p.scale + p.zero);
    return clamp_code(static_cast<long>(q), max_code);
}

double dequant_one(int code, QuantParams p) {
    return static_cast<double>(p.scale) * (static_cast<double>(code) - p.zero);
}

struct FitEval {
    double sse = 0.0;
    double max_err = 0.0;
};

FitEval evaluate(std::span<const float> group, QuantParams p, int max_code) {
    FitEval e;
    for (float w : group) {
        const double r = w - dequant_one(encode(w, p, max_code), p);
        e.sse += r * r;
        e.max_err = std::max(e.max_err, std::abs(r));
    }
    return e;
}

}  // namespace

double reconstruction_sse(std::span<const float> group, QuantParams p, int bits) {
    return evaluate(group, p, (1 << bits) - 1).sse;
}

QuantParams fit_minmax(std::span<const float> group, int bits) {
    if (group.empty()) throw ValidationError("fit_minmax: empty group");
    float lo = group[0], hi = group[0];
    for (float w : group) {
        lo = std::min(lo, w);
        hi = std::max(hi, w);
    }
    if (lo == hi) {
        // Degenerate group reconstructs exactly with unit scale.
        return {snap16(1.0f), snap16(-lo)};
    }
    const int max_code = (1 << bits) - 1;
    float s = (hi - lo) / static_cast<float>(max_code);
    float z = -lo / s;
    return {snap16(s), snap16(z)};
}

QuantParams fit_params(std::span<const float> group, int bits, int max_iters) {
    QuantParams best = fit_minmax(group, bits);
    const int max_code = (1 << bits) - 1;
    FitEval best_eval = evaluate(group, best, max_code);
    if (best_eval.sse == 0.0) return best;

    const std::size_t n = group.size();
    for (int iter = 0; iter < max_iters; ++iter) {
        // Least-squares (s, z) for the current code assignment.
        double sum_q = 0, sum_w = 0, sum_qq = 0, sum_qw = 0;
        for (float w : group) {
            const double q = encode(w, best, max_code);
            sum_q += q;
            sum_w += w;
            sum_qq += q * q;
            sum_qw += q * w;
        }
        const double denom = n * sum_qq - sum_q * sum_q;
        if (denom <= 0.0) break;
        const double s_ls = (n * sum_qw - sum_q * sum_w) / denom;
        if (s_ls <= 0.0) break;
        const double c_ls = (sum_w - s_ls * sum_q) / n;  // w ~ s*q + c, z = -c/s
        const double z_ls = -c_ls / s_ls;

        // Backtracking toward the LS target; keep a step only if it lowers the
        // SSE and every element still reconstructs within s/2.
        bool accepted = false;
        for (double t : {1.0, 0.5, 0.25, 0.125}) {
            QuantParams cand;
            cand.scale = snap16(static_cast<float>(best.scale + t * (s_ls - best.scale)));
            cand.zero = snap16(static_cast<float>(best.zero + t * (z_ls - best.zero)));
            if (cand.scale <= 0.0f) continue;
            const FitEval e = evaluate(group, cand, max_code);
            if (e.sse < best_eval.sse && e.max_err <= cand.scale * 0.5 + 1e-12) {
                best = cand;
                best_eval = e;
                accepted = true;
                break;
            }
        }
        if (!accepted) break;
    }
    return best;
}

std::size_t QuantizedTensor::n_groups() const {
    if (n_elements == 0) return 0;
    return (n_elements + cfg.group_size - 1) / cfg.group_size;
}

int QuantizedTensor::code(std::size_t i) const {
    const int bits = cfg.bits;
    const std::size_t bit_off = i * bits;
    std::size_t byte = bit_off >> 3;
    int shift = static_cast<int>(bit_off & 7);
    std::uint32_t v = packed[byte];
    if (shift + bits > 8 && byte + 1 < packed.size())
        v |= static_cast<std::uint32_t>(packed[byte + 1]) << 8;
    return static_cast<int>((v >> shift) & ((1u << bits) - 1));
}

QuantParams QuantizedTensor::group_params(std::size_t group) const {
    return {f32_from_f16(scales_f16[group]), f32_from_f16(zeros_f16[group])};
}

QuantizedTensor quantize(std::span<const float> w, const QuantConfig& cfg) {
    cfg.validate();
    if (w.empty()) throw ValidationError("quantize: empty array");
    for (float v : w) {
        if (!std::isfinite(v)) throw ValidationError("quantize: non-finite input");
    }

    QuantizedTensor q;
    q.cfg = cfg;
    q.n_elements = w.size();
    const std::size_t groups = q.n_groups();
    q.scales_f16.resize(groups);
    q.zeros_f16.resize(groups);
    q.packed.assign((w.size() * cfg.bits + 7) / 8 + 1, 0);

    const int max_code = cfg.max_code();
    for (std::size_t g = 0; g < groups; ++g) {
        const std::size_t begin = g * cfg.group_size;
        const std::size_t end = std::min(w.size(), begin + cfg.group_size);
        const QuantParams p = fit_params(w.subspan(begin, end - begin), cfg.bits);
        q.scales_f16[g] = f16_from_f32(p.scale);
        q.zeros_f16[g] = f16_from_f32(p.zero);
        for (std::size_t i = begin; i < end; ++i) {
            const int code = encode(w[i], p, max_code);
            const std::size_t bit_off = i * cfg.bits;
            std::size_t byte = bit_off >> 3;
            int shift = static_cast<int>(bit_off & 7);
            std::uint32_t cur = q.packed[byte] | (static_cast<std::uint32_t>(q.packed[byte + 1]) << 8);
            cur |= static_cast<std::uint32_t>(code) << shift;
            q.packed[byte] = static_cast<std::uint8_t>(cur & 0xff);
            q.packed[byte + 1] = static_cast<std::uint8_t>((cur >> 8) & 0xff);
        }
    }
    q.packed.resize((w.size() * cfg.bits + 7) / 8);
    return q;
}

std::vector<float> dequantize(const QuantizedTensor& q) {
    std::vector<float> out(q.n_elements);
    for (std::size_t i = 0; i < q.n_elements; ++i) {
        const std::size_t g = i / q.cfg.group_size;
        const QuantParams p = q.group_params(g);
        out[i] = static_cast<float>(dequant_one(q.code(i), p));
    }
    return out;
}

byte_count quantized_bytes(std::int64_t elements, const QuantConfig& cfg) {
    if (elements < 0) throw ValidationError("quantized_bytes: negative element count");
    if (elements == 0) return 0;
    if (cfg.group_size <= 0 || cfg.bits <= 0)
        throw ValidationError("quantized_bytes: bad config");
    const byte_count code_bytes = ceil_div(elements * cfg.bits, 8);
    const byte_count groups = ceil_div(elements, cfg.group_size);
    return code_bytes + groups * 4;  // 2 B scale + 2 B zero per group
}

}  // namespace moesim
