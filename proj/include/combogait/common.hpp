// Shared plumbing: error taxonomy, deterministic RNG, small hashing helpers.

#pragma once

#include <cmath>
#include <cstdint>
#include <iostream>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>

namespace combogait {

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape/extent mismatches between tensors or against an operation contract.
struct DimensionError : Error {
    using Error::Error;
};

// Caller handed in data that violates a documented precondition.
struct ValidationError : Error {
    using Error::Error;
};

// Batch statistics cannot be computed (train-mode batch of one).
struct DegenerateBatchError : ValidationError {
    using ValidationError::ValidationError;
};

// Misuse of an API contract (non-scalar loss, bad reshape target, ...).
struct ContractError : Error {
    using Error::Error;
};

// Invalid configuration value or combination.
struct ConfigError : Error {
    using Error::Error;
};

// Problems with dataset content (misaligned streams, empty dataset, ...).
struct DataError : Error {
    using Error::Error;
};

// Class label outside the configured range.
struct LabelError : Error {
    using Error::Error;
};

// Evaluation protocol violation (probe identity missing from gallery, ...).
struct ProtocolError : Error {
    using Error::Error;
};

// Malformed on-disk artifact. Carries the byte offset of the defect.
struct FormatError : Error {
    size_t offset;
    FormatError(const std::string& msg, size_t byte_offset)
        : Error(msg + " (byte offset " + std::to_string(byte_offset) + ")"),
          offset(byte_offset) {}
};

// ---------------------------------------------------------------------------
// Deterministic RNG
// ---------------------------------------------------------------------------

// SplitMix64. Chosen over std engines so every generated artifact is
// bit-reproducible regardless of standard library implementation.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // [0, 1)
    double uniform() { return double(next() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // [0, n), n > 0. Multiply-shift keeps this branch-free and portable.
    int64_t uniform_int(int64_t n) {
        return int64_t((static_cast<unsigned __int128>(next()) *
                        static_cast<unsigned __int128>(n)) >> 64);
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Box-Muller with one cached variate.
    double gaussian() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    double gaussian(double mean, double stddev) { return mean + stddev * gaussian(); }

    // Derives an independent stream, e.g. per (seed, subject_index).
    static uint64_t mix(uint64_t a, uint64_t b) {
        uint64_t x = a ^ (b * 0x9e3779b97f4a7c15ULL + 0x165667b19e3779f9ULL);
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
        return x ^ (x >> 31);
    }

private:
    uint64_t state_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// FNV-1a, used for config digests in checkpoint headers.
inline uint64_t fnv1a64(std::string_view s) {
    uint64_t h = 14695981039346656037ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

// Emits each distinct warning once per process so hot loops cannot flood
// stderr with repeats.
inline void warn_once(const std::string& message) {
    static std::set<uint64_t> seen;
    if (seen.insert(fnv1a64(message)).second) {
        std::cerr << "[combogait] warning: " << message << "\n";
    }
}

}  // namespace combogait
