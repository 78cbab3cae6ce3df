#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace spectraseg {

// Error raised by cube/label/index file parsing. The kind distinguishes the
// failure classes callers are expected to branch on.
class IoError : public std::runtime_error {
public:
    enum class Kind {
        MalformedHeader,
        DimensionMismatch,
        TruncatedPayload,
        MissingFile,
    };

    IoError(Kind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
    Kind kind() const { return kind_; }

private:
    Kind kind_;
};

class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Seedable RNG with hand-rolled draw functions. std::* distributions are
// implementation-defined, so every draw here is spelled out to keep output
// streams byte-identical across platforms and standard libraries.
class Rng {
public:
    explicit Rng(uint64_t seed) : eng_(seed) {}

    // Mixes a base seed with stream identifiers (worker id, epoch, ...) so
    // substreams are decorrelated but reproducible.
    static uint64_t mix(uint64_t seed, std::initializer_list<uint64_t> streams) {
        uint64_t z = seed;
        for (uint64_t s : streams) {
            z += 0x9e3779b97f4a7c15ull + s;
            z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
            z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
            z = z ^ (z >> 31);
        }
        return z;
    }

    uint64_t next_u64() { return eng_(); }

    // Uniform in [0, 1).
    double u01() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * u01(); }

    // Uniform integer in [0, n). Modulo bias is negligible for the n used
    // here and keeps the draw portable.
    uint64_t below(uint64_t n) { return n == 0 ? 0 : eng_() % n; }

    // Box-Muller; consumes two uniforms per pair, caches the second.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = u01();
        } while (u1 <= 0.0);
        double u2 = u01();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    template <typename T>
    void shuffle(std::vector<T>& xs) {
        for (size_t i = xs.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(below(i));
            std::swap(xs[i - 1], xs[j]);
        }
    }

private:
    std::mt19937_64 eng_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

} // namespace spectraseg
