// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace dsmoe {

// ---------------------------------------------------------------------------
// Errors. One exception type with a kind tag; each kind maps to one of the
// failure classes used throughout the public API contracts.
// ---------------------------------------------------------------------------

enum class ErrorKind {
    Dimension,      // shape mismatch between tensors
    Domain,         // argument outside the mathematical domain of the op
    Index,          // out-of-range index (token id, expert id, ...)
    Contract,       // API misuse (consumed tape, mixed tapes, ...)
    Numeric,        // NaN/Inf where finite values are required
    Config,         // invalid configuration value
    Format,         // malformed binary file (magic, version, truncation)
    Schema,         // malformed structured record (JSONL field issues)
    Io,             // filesystem failure
    Validation,     // imported data violates invariants
    Join,           // id mismatch when combining datasets
    Compatibility,  // artifact does not match the target model
    Training,       // optimization failure (divergence)
    Length,         // sequence longer than the model allows
    Generation,     // corpus template produced an invalid sample
    Report,         // missing artifacts at report time
    Stage,          // pipeline stage failure wrapper
};

inline const char* error_kind_name(ErrorKind k) {
    switch (k) {
        case ErrorKind::Dimension: return "dimension";
        case ErrorKind::Domain: return "domain";
        case ErrorKind::Index: return "index";
        case ErrorKind::Contract: return "contract";
        case ErrorKind::Numeric: return "numeric";
        case ErrorKind::Config: return "config";
        case ErrorKind::Format: return "format";
        case ErrorKind::Schema: return "schema";
        case ErrorKind::Io: return "io";
        case ErrorKind::Validation: return "validation";
        case ErrorKind::Join: return "join";
        case ErrorKind::Compatibility: return "compatibility";
        case ErrorKind::Training: return "training";
        case ErrorKind::Length: return "length";
        case ErrorKind::Generation: return "generation";
        case ErrorKind::Report: return "report";
        case ErrorKind::Stage: return "stage";
    }
    return "unknown";
}

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& msg)
        : std::runtime_error(std::string(error_kind_name(kind)) + " error: " + msg), kind_(kind) {}
    ErrorKind kind() const { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind k, const std::string& msg) { throw Error(k, msg); }

inline void require(bool cond, ErrorKind k, const std::string& msg) {
    if (!cond) fail(k, msg);
}

// ---------------------------------------------------------------------------
// Deterministic RNG. mt19937_64 is bit-exact across standard library
// implementations; the distributions are hand-rolled so sampled streams do
// not depend on libstdc++ internals either.
// ---------------------------------------------------------------------------

class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(seed) {}

    uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1).
    double uniform() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    // Uniform integer in [0, n).
    uint64_t uniform_int(uint64_t n) {
        // rejection sampling keeps the draw unbiased
        uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t v;
        do {
            v = engine_();
        } while (v >= limit);
        return v % n;
    }

    // Standard normal via Box-Muller.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 2.0 * M_PI * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        if (v.size() < 2) return;
        for (size_t i = v.size() - 1; i > 0; --i) {
            size_t j = static_cast<size_t>(uniform_int(i + 1));
            std::swap(v[i], v[j]);
        }
    }

private:
    std::mt19937_64 engine_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

// Mixes a base seed with a stream tag so sub-generators are decorrelated but
// still fully determined by the base seed.
inline uint64_t mix_seed(uint64_t seed, uint64_t stream) {
    uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// ---------------------------------------------------------------------------
// FNV-1a 64-bit hash, used for model fingerprints.
// ---------------------------------------------------------------------------

class Fnv1a {
public:
    void update(const void* data, size_t n) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (size_t i = 0; i < n; ++i) {
            state_ ^= p[i];
            state_ *= 0x100000001b3ULL;
        }
    }
    void update(const std::string& s) { update(s.data(), s.size()); }
    void update(const std::vector<double>& v) { update(v.data(), v.size() * sizeof(double)); }

    uint64_t digest() const { return state_; }

    std::string hex() const {
        char buf[17];
        std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(state_));
        return std::string(buf);
    }

private:
    uint64_t state_ = 0xcbf29ce484222325ULL;
};

// ---------------------------------------------------------------------------
// Formatting helpers.
// ---------------------------------------------------------------------------

// Shortest decimal form that parses back to the same double.
inline std::string format_double(double v) {
    char buf[40];
    for (int prec = 1; prec <= 17; ++prec) {
        std::snprintf(buf, sizeof(buf), "%.*g", prec, v);
        if (std::strtod(buf, nullptr) == v) break;
    }
    return std::string(buf);
}

inline std::string shape_string(const std::vector<int64_t>& shape) {
    std::ostringstream oss;
    oss << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) oss << "x";
        oss << shape[i];
    }
    oss << "]";
    return oss.str();
}

inline bool all_finite(const std::vector<double>& v) {
    for (double x : v) {
        if (!std::isfinite(x)) return false;
    }
    return true;
}

}  // namespace dsmoe
