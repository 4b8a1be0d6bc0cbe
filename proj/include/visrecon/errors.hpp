#pragma once

#include <stdexcept>
#include <string>

namespace visrecon {

// Invalid or inconsistent configuration (bad JSON, unknown keys, out-of-range values).
struct config_error : std::runtime_error {
    explicit config_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Missing or corrupt data artifacts (datasets, checkpoints, manifests).
struct data_error : std::runtime_error {
    explicit data_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite values or degenerate statistics encountered mid-computation.
struct numeric_error : std::runtime_error {
    explicit numeric_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Operation invoked before the object reached the required state.
struct state_error : std::logic_error {
    explicit state_error(const std::string& msg) : std::logic_error(msg) {}
};

// Programming-contract violations (shape mismatches, bad arguments).
struct invariant_error : std::logic_error {
    explicit invariant_error(const std::string& msg) : std::logic_error(msg) {}
};

inline void check(bool cond, const std::string& msg) {
    if (!cond) throw invariant_error(msg);
}

}  // namespace visrecon
