#pragma once

#include <cstdint>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace xdelta {

// Error taxonomy. The CLI maps these onto process exit codes; library code
// throws and never exits.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct StructuralError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DomainError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct TrainingError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct BudgetError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ConsistencyError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct AnnotationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct UndefinedScoreError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct IncompatiblePairError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// FNV-1a, 64 bit. Used for content-addressed stage artifacts and for the
// frozen-endpoint checksums; not cryptographic.
inline std::uint64_t fnv1a64(const void* data, std::size_t n,
                             std::uint64_t seed = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = seed;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::uint64_t fnv1a64(std::string_view s,
                             std::uint64_t seed = 0xcbf29ce484222325ull) {
    return fnv1a64(s.data(), s.size(), seed);
}

inline std::string hex16(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[static_cast<std::size_t>(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return s;
}

// round(x) with halves away from zero, as used for zero-unit counts.
inline long round_half_up(double x) {
    return static_cast<long>(x + (x >= 0 ? 0.5 : -0.5));
}

}  // namespace xdelta
