#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace veckv {

// Seeded generator with explicit uniform/gaussian draws. std::normal_distribution
// is implementation-defined, so sequences would differ across standard libraries;
// the file formats promise byte-identical output per seed, hence the fixed
// Box-Muller construction on top of mt19937_64.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    // uniform in (0,1), never exactly 0 or 1
    double uniform01() {
        return (static_cast<double>(engine_() >> 11) + 0.5) * 0x1.0p-53;
    }

    double gaussian() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        const double u1 = uniform01();
        const double u2 = uniform01();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    std::uint64_t next_u64() { return engine_(); }

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

} // namespace veckv
