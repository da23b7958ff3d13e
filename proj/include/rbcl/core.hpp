#pragma once

// Shared primitives: matrix aliases, error types, deterministic RNG.
//
// All randomness in the library flows through rbcl::Rng, which wraps
// std::mt19937_64 with hand-rolled value transforms. The standard engine is
// bit-reproducible across platforms; the standard <random> distributions are
// not, so we do not use them.

#include <Eigen/Dense>

#include <cstdint>
#include <cmath>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace rbcl {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// ---------------------------------------------------------------------------
// Errors

struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct ZeroNormRow : Error {
    std::size_t index;
    explicit ZeroNormRow(std::size_t i)
        : Error("row " + std::to_string(i) + " has (near-)zero norm"), index(i) {}
};

struct MissingClass : Error {
    std::int64_t class_id;
    explicit MissingClass(std::int64_t c)
        : Error("class " + std::to_string(c) + " has no features"), class_id(c) {}
};

struct NoPositive : Error {
    std::size_t query_index;
    explicit NoPositive(std::size_t i)
        : Error("query " + std::to_string(i) + " has no positive in gallery"), query_index(i) {}
};

struct DegenerateBatch : Error {
    explicit DegenerateBatch(const std::string& msg) : Error(msg) {}
};

struct LabelOutOfRange : Error {
    explicit LabelOutOfRange(const std::string& msg) : Error(msg) {}
};

struct InstanceMismatch : Error {
    explicit InstanceMismatch(const std::string& msg) : Error(msg) {}
};

struct DimensionMismatch : Error {
    explicit DimensionMismatch(const std::string& msg) : Error(msg) {}
};

struct ShapeMismatch : Error {
    explicit ShapeMismatch(const std::string& msg) : Error(msg) {}
};

struct IoError : Error {
    explicit IoError(const std::string& msg) : Error(msg) {}
};

struct FormatError : Error {
    explicit FormatError(const std::string& msg) : Error(msg) {}
};

struct NoRelevant : Error {
    explicit NoRelevant(const std::string& msg) : Error(msg) {}
};

struct MissingPositive : Error {
    std::int64_t label;
    explicit MissingPositive(std::int64_t l)
        : Error("query label " + std::to_string(l) + " absent from gallery"), label(l) {}
};

struct EmbedDimMismatch : Error {
    explicit EmbedDimMismatch(const std::string& msg) : Error(msg) {}
};

struct TooFewClasses : Error {
    explicit TooFewClasses(const std::string& msg) : Error(msg) {}
};

struct UnsupportedSetting : Error {
    explicit UnsupportedSetting(const std::string& name)
        : Error("unsupported setting: " + name) {}
};

struct SpecMismatch : Error {
    explicit SpecMismatch(const std::string& msg) : Error(msg) {}
};

struct NonFinite : Error {
    explicit NonFinite(const std::string& msg) : Error(msg) {}
};

struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// ---------------------------------------------------------------------------
// Seeding and RNG

// splitmix64; used to derive independent sub-seeds from one master seed.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
    std::uint64_t z = seed + salt + 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // in [0, 1)
    double uniform() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller; two engine draws per pair, one cached.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = (static_cast<double>(engine_() >> 11) + 1.0) * 0x1.0p-53;  // (0,1]
        double u2 = static_cast<double>(engine_() >> 11) * 0x1.0p-53;
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    // in [0, n)
    std::size_t uniform_index(std::size_t n) {
        return static_cast<std::size_t>(engine_() % static_cast<std::uint64_t>(n));
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = uniform_index(i);
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace rbcl
