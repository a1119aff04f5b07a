#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace veckv {

using Index = Eigen::Index;

// Three-way routing state of a cached token.
enum class RoutingLabel : std::uint8_t { Retain, Approximate, Evict };

inline const char* to_string(RoutingLabel label) {
    switch (label) {
        case RoutingLabel::Retain: return "retain";
        case RoutingLabel::Approximate: return "approximate";
        case RoutingLabel::Evict: return "evict";
    }
    return "?";
}

// Compression settings: p_c is the fraction of cache memory to eliminate,
// p_a sizes the approximation tier (which holds 2*p_a of all tokens), and
// epsilon is the retention-headroom constant used when deriving p_a.
struct CompressionConfig {
    double p_c = 0.0;
    double p_a = 0.0;
    double epsilon = 0.0;
};

// Returns cfg unchanged if every invariant holds, otherwise throws
// std::invalid_argument naming the first violated invariant.
inline CompressionConfig validate_config(const CompressionConfig& cfg) {
    if (!(cfg.p_c >= 0.0 && cfg.p_c < 1.0))
        throw std::invalid_argument("config: p_c outside [0,1)");
    if (!(cfg.epsilon >= 0.0))
        throw std::invalid_argument("config: epsilon < 0");
    if (!(cfg.p_a >= 0.0))
        throw std::invalid_argument("config: p_a < 0");
    if (cfg.p_a > cfg.p_c)
        throw std::invalid_argument("config: p_a > p_c");
    const bool headroom_ok =
        cfg.epsilon > 0.0 ? (cfg.p_c + cfg.p_a < 1.0) : (cfg.p_c + cfg.p_a <= 1.0);
    if (!headroom_ok)
        throw std::invalid_argument("config: p_c + p_a >= 1 headroom");
    return cfg;
}

// Deployment formula for the approximation ratio: min(p_c/2, (1-p_c-epsilon)/2).
// The first branch caps the approximation tier at half the compressed budget,
// the second leaves headroom for the retention tier.
inline double deploy_pa(double p_c, double epsilon = 0.0) {
    if (!(p_c > 0.0 && p_c < 1.0))
        throw std::domain_error("deploy_pa: p_c outside (0,1)");
    if (!(epsilon >= 0.0 && epsilon < 1.0 - p_c))
        throw std::domain_error("deploy_pa: epsilon outside [0, 1-p_c)");
    return std::min(p_c / 2.0, (1.0 - p_c - epsilon) / 2.0);
}

// One cached token: position, key as cached (post-rotation), value, plus the
// importance weight and value-reconstruction error filled in by scoring and
// planning stages.
struct TokenRecord {
    Index index = 0;
    Eigen::VectorXd key;
    Eigen::VectorXd value;
    double importance = 0.0;
    double recon_error = 0.0;
};

} // namespace veckv
