// Splittable deterministic RNG. One root seed governs all randomness in a run;
// named child streams keep weight init, data generation and shuffling
// independent of each other's draw counts.
#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace qptad {

class Rng {
  public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    // splitmix64 step
    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // inclusive range
    int64_t uniform_int(int64_t lo, int64_t hi) {
        return lo + static_cast<int64_t>(next_u64() % static_cast<uint64_t>(hi - lo + 1));
    }

    // Box-Muller; stateless apart from the stream position, so splits and
    // replays stay reproducible across platforms.
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Deterministic child stream keyed by name (FNV-1a) and an index.
    Rng child(std::string_view name, uint64_t index = 0) const {
        uint64_t h = 0xCBF29CE484222325ULL;
        for (char c : name) {
            h ^= static_cast<unsigned char>(c);
            h *= 0x100000001B3ULL;
        }
        h ^= index + 0x9E3779B97F4A7C15ULL + (h << 6) + (h >> 2);
        Rng r(state_ ^ h);
        r.next_u64();  // decouple child position from the raw seed
        return r;
    }

  private:
    uint64_t state_;
};

}  // namespace qptad
