// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>

namespace moesim {

// All simulated time is kept in integer picoseconds and per-byte transfer
// rates in integer ps/byte, so transfer times are exactly linear in bytes
// and schedules replay bit-identically.
using duration_ps = std::int64_t;
using byte_count = std::int64_t;

constexpr duration_ps kPsPerNs = 1'000;
constexpr duration_ps kPsPerUs = 1'000'000;
constexpr duration_ps kPsPerMs = 1'000'000'000;
constexpr duration_ps kPsPerSec = 1'000'000'000'000;

inline duration_ps ps_from_us(double us) { return std::llround(us * kPsPerUs); }
inline duration_ps ps_from_ms(double ms) { return std::llround(ms * kPsPerMs); }
inline double us_from_ps(duration_ps ps) { return static_cast<double>(ps) / kPsPerUs; }
inline double ms_from_ps(duration_ps ps) { return static_cast<double>(ps) / kPsPerMs; }
inline double sec_from_ps(duration_ps ps) { return static_cast<double>(ps) / kPsPerSec; }

constexpr byte_count kKiB = 1024;
constexpr byte_count kMiB = 1024 * kKiB;
constexpr byte_count kGiB = 1024 * kMiB;

// Ceiling division for nonnegative numerators.
constexpr std::int64_t ceil_div(std::int64_t num, std::int64_t den) {
    return (num + den - 1) / den;
}

}  // namespace moesim
