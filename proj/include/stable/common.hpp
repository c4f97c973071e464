#pragma once

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <string_view>

namespace stable {

enum class ErrorKind {
    rejected_input,    // caller handed us something invalid (unknown char, bad value)
    capacity,          // sequence exceeds the model context
    degenerate_input,  // empty continuation / zero-length generation
    shape,             // tensor shape or rank mismatch
    conformance,       // adapter does not conform to the host model
    numerical,         // non-finite values encountered
    training_failure,  // optimization diverged
    schema,            // serialized artifact has wrong version/magic
    io,                // file system failure
    config,            // invalid configuration
};

struct Error : std::runtime_error {
    ErrorKind kind;
    Error(ErrorKind k, const std::string& msg) : std::runtime_error(msg), kind(k) {}
};

[[noreturn]] inline void fail(ErrorKind k, const std::string& msg) {
    throw Error(k, msg);
}

// splitmix64 finalizer; used to derive independent seeds from a master seed.
inline uint64_t mix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline uint64_t derive_seed(uint64_t base, uint64_t stream) {
    return mix64(base ^ mix64(stream + 0x9e3779b97f4a7c15ull));
}

inline uint64_t derive_seed(uint64_t base, uint64_t a, uint64_t b) {
    return derive_seed(derive_seed(base, a), b);
}

// FNV-1a over bytes; stable across platforms, used for config hashes.
inline uint64_t fnv1a(std::string_view bytes) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::string hex64(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return std::string(buf);
}

// Shortest representation that round-trips a double exactly.
inline std::string double_to_string(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

inline double string_to_double(std::string_view s) {
    double v = 0.0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
        fail(ErrorKind::rejected_input, "not a number: '" + std::string(s) + "'");
    }
    return v;
}

// "0.794 ± 0.079" cell formatting for human-readable tables.
inline std::string format_mean_se(double mean, double se, int digits = 3) {
    char buf[80];
    std::snprintf(buf, sizeof(buf), "%.*f ± %.*f", digits, mean, digits, se);
    return std::string(buf);
}

}  // namespace stable
