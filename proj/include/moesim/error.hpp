// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

#include "moesim/types.hpp"

namespace moesim {

// Bad user-supplied configuration (unknown route, invalid skew, ...).
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Structurally invalid data (dimension mismatch, out-of-range expert id, ...).
struct ValidationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed persisted file; message names the offending record.
struct ParseError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Query outside a container's declared range.
struct RangeError : std::out_of_range {
    using std::out_of_range::out_of_range;
};

// Ledger bookkeeping violation; indicates a scheduler bug, always fatal.
struct AccountingError : std::logic_error {
    using std::logic_error::logic_error;
};

// The model + workload cannot fit the memory hierarchy. Carries the per-tier
// shortfall so callers can report actionable deficits.
struct MemoryInfeasible : std::runtime_error {
    byte_count vram_deficit = 0;
    byte_count dram_deficit = 0;
    byte_count disk_deficit = 0;

    explicit MemoryInfeasible(const std::string& msg, byte_count vram = 0,
                              byte_count dram = 0, byte_count disk = 0)
        : std::runtime_error(msg),
          vram_deficit(vram),
          dram_deficit(dram),
          disk_deficit(disk) {}
};

}  // namespace moesim
