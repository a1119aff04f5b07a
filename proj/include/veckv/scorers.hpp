#pragma once

#include "veckv/core.hpp"
#include "veckv/rng.hpp"
#include "veckv/toymodel.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <stdexcept>
#include <string>

namespace veckv {

// Per-token importance weights produced by a scorer backend. Entries are
// non-negative; allocation consumes only their rank order, the distortion
// analysis consumes normalized magnitudes.
struct ImportanceScores {
    Eigen::VectorXd scores;
    std::string scorer_id;
    bool normalized = false;
};

// Query-aware scorer: mean softmax attention weight each observation-window
// query places on every token.
template <typename DerivedK, typename DerivedQ>
ImportanceScores attention_window_score(const Eigen::MatrixBase<DerivedK>& keys,
                                        const Eigen::MatrixBase<DerivedQ>& window_queries,
                                        double scale) {
    if (window_queries.cols() == 0)
        throw std::invalid_argument("attention_window_score: empty observation window");
    if (keys.rows() != window_queries.rows())
        throw std::invalid_argument("attention_window_score: key/query dimension mismatch");
    ImportanceScores out;
    out.scorer_id = "attn-window";
    out.scores = Eigen::VectorXd::Zero(keys.cols());
    for (Eigen::Index q = 0; q < window_queries.cols(); ++q)
        out.scores += softmax_weights(keys, window_queries.col(q), scale);
    out.scores /= double(window_queries.cols());
    return out;
}

// Query-agnostic scorer: distance from the mean key direction,
// w_i = 1 - cos(K_i, mean key). Keys far from the bulk score high. A
// mean that cancels to zero carries no direction, so all tokens tie.
template <typename DerivedK>
ImportanceScores key_diversity_score(const Eigen::MatrixBase<DerivedK>& keys) {
    if (keys.cols() < 1)
        throw std::invalid_argument("key_diversity_score: no tokens");
    ImportanceScores out;
    out.scorer_id = "key-diversity";
    out.scores.resize(keys.cols());
    const Eigen::VectorXd mean = keys.rowwise().mean();
    double mean_key_norm = 0.0;
    for (Eigen::Index i = 0; i < keys.cols(); ++i) {
        const double norm = keys.col(i).norm();
        if (!(norm > 0.0))
            throw std::domain_error("key_diversity_score: zero-norm key");
        mean_key_norm += norm;
    }
    mean_key_norm /= double(keys.cols());
    const double mean_norm = mean.norm();
    if (mean_norm <= 1e-12 * mean_key_norm) {
        out.scores.setOnes();
        return out;
    }
    for (Eigen::Index i = 0; i < keys.cols(); ++i) {
        const double c = keys.col(i).dot(mean) / (keys.col(i).norm() * mean_norm);
        out.scores(i) = std::max(0.0, 1.0 - c);
    }
    return out;
}

// Null baseline: deterministic per-seed scores in (0,1).
inline ImportanceScores random_score(Index n, std::uint64_t seed) {
    if (n < 1)
        throw std::invalid_argument("random_score: n must be positive");
    ImportanceScores out;
    out.scorer_id = "random";
    out.scores.resize(n);
    Rng rng(seed);
    for (Index i = 0; i < n; ++i) out.scores(i) = rng.uniform01();
    return out;
}

// Scales scores to unit sum; rank order is unchanged.
inline ImportanceScores normalize(const ImportanceScores& scores) {
    const double total = scores.scores.sum();
    if (!(total > 0.0))
        throw std::domain_error("normalize: all-zero scores");
    ImportanceScores out = scores;
    out.scores /= total;
    out.normalized = true;
    return out;
}

} // namespace veckv
