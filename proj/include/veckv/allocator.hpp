#pragma once

#include "veckv/core.hpp"
#include "veckv/regression.hpp"
#include "veckv/rope.hpp"
#include "veckv/scorers.hpp"
#include "veckv/toymodel.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <memory>
#include <mutex>
#include <numeric>
#include <stdexcept>
#include <unordered_map>
#include <vector>

namespace veckv {

// Half-up rounding with a nanounit guard: proportion-times-count products like
// (1 - 0.9 + 0.05) * 10 land a few ulp below the intended 1.5 and must still
// round to 2.
inline Index round_half_up(double x) {
    return static_cast<Index>(std::floor(x + 0.5 + 1e-9));
}

// Tier cardinalities under the fixed rounding rule:
//   |pool|   = round((1 - p_c + p_a) * n), capped at n
//   |approx| = round(2 * p_a * n), capped at |pool|
struct PlanSizes {
    Index pool = 0;
    Index approx = 0;
    Index retain = 0;
    Index evict = 0;
};

inline PlanSizes plan_sizes(Index n, const CompressionConfig& cfg) {
    if (n < 1)
        throw std::invalid_argument("plan: need at least one token");
    if (!(cfg.p_c >= 0.0 && cfg.p_c < 1.0))
        throw std::invalid_argument("plan: p_c outside [0,1)");
    if (!(cfg.p_a >= 0.0))
        throw std::invalid_argument("plan: p_a < 0");
    if (cfg.p_a > 1.0 - cfg.p_c)
        throw std::invalid_argument("plan: approximation tier exceeds candidate pool");
    PlanSizes s;
    s.pool = std::min(round_half_up((1.0 - cfg.p_c + cfg.p_a) * double(n)), n);
    s.approx = std::min(round_half_up(2.0 * cfg.p_a * double(n)), s.pool);
    s.retain = s.pool - s.approx;
    s.evict = n - s.pool;
    return s;
}

// Indices of the k highest entries, ties broken by lower index.
inline std::vector<Index> top_k_by_score(const Eigen::VectorXd& scores, Index k) {
    std::vector<Index> order(static_cast<std::size_t>(scores.size()));
    std::iota(order.begin(), order.end(), Index(0));
    std::sort(order.begin(), order.end(), [&](Index a, Index b) {
        if (scores(a) != scores(b)) return scores(a) > scores(b);
        return a < b;
    });
    order.resize(static_cast<std::size_t>(k));
    return order;
}

// Per-token routing and budget accounting. The evicted/approximated/retained
// sets partition [0, n) and are kept in ascending index order.
struct CompressionPlan {
    std::vector<RoutingLabel> labels;
    std::vector<Index> pool_indices;
    std::vector<Index> evicted;
    std::vector<Index> approximated;
    std::vector<Index> retained;
    CompressionConfig config;
    Index n = 0;

    static CompressionPlan from_labels(const std::vector<RoutingLabel>& labels,
                                       const CompressionConfig& cfg) {
        CompressionPlan plan;
        plan.labels = labels;
        plan.config = cfg;
        plan.n = static_cast<Index>(labels.size());
        for (Index i = 0; i < plan.n; ++i) {
            switch (labels[static_cast<std::size_t>(i)]) {
                case RoutingLabel::Evict:
                    plan.evicted.push_back(i);
                    break;
                case RoutingLabel::Approximate:
                    plan.approximated.push_back(i);
                    plan.pool_indices.push_back(i);
                    break;
                case RoutingLabel::Retain:
                    plan.retained.push_back(i);
                    plan.pool_indices.push_back(i);
                    break;
            }
        }
        return plan;
    }
};

// Shared planning core: pick the candidate pool by importance rank, then route
// the lowest-reconstruction-error pool members to the approximation tier.
// recon_error entries outside the pool are ignored.
inline CompressionPlan plan_from_rankings(const Eigen::VectorXd& importance,
                                          const Eigen::VectorXd& recon_error,
                                          const CompressionConfig& cfg) {
    const Index n = importance.size();
    if (recon_error.size() != n)
        throw std::invalid_argument("plan: importance/error length mismatch");
    const PlanSizes sizes = plan_sizes(n, cfg);

    std::vector<Index> pool = top_k_by_score(importance, sizes.pool);

    // lowest error first within the pool, ties to the lower token index
    std::sort(pool.begin(), pool.end(), [&](Index a, Index b) {
        if (recon_error(a) != recon_error(b)) return recon_error(a) < recon_error(b);
        return a < b;
    });

    std::vector<RoutingLabel> labels(static_cast<std::size_t>(n), RoutingLabel::Evict);
    for (std::size_t r = 0; r < pool.size(); ++r)
        labels[static_cast<std::size_t>(pool[r])] =
            static_cast<Index>(r) < sizes.approx ? RoutingLabel::Approximate
                                                 : RoutingLabel::Retain;
    return CompressionPlan::from_labels(labels, cfg);
}

// De-rotates each cached key to its pre-rotation form.
inline Eigen::MatrixXd derotate_keys(const Eigen::MatrixXd& keys_cached,
                                     const std::vector<Index>& positions,
                                     const RopeTabled& rope) {
    if (static_cast<Index>(positions.size()) != keys_cached.cols())
        throw std::invalid_argument("derotate: key/position counts differ");
    Eigen::MatrixXd out(keys_cached.rows(), keys_cached.cols());
    for (Index i = 0; i < keys_cached.cols(); ++i)
        out.col(i) = rope.invert_blocked(keys_cached.col(i), positions[static_cast<std::size_t>(i)]);
    return out;
}

namespace detail {

inline void check_tokens(const std::vector<TokenRecord>& tokens, Index d_k, Index d_v) {
    if (tokens.empty())
        throw std::invalid_argument("plan: no tokens");
    for (const TokenRecord& t : tokens)
        if (t.key.size() != d_k || t.value.size() != d_v)
            throw std::invalid_argument("plan: token dimensions do not match the model");
}

} // namespace detail

// The three-step pipeline over one layer's cached tokens:
//  1. expanded candidate pool of the top (1 - p_c + p_a) tokens by importance,
//  2. value-reconstruction error of every pool token from its de-rotated key,
//  3. the 2*p_a lowest-error pool tokens go to the approximation tier, the rest
//     of the pool is retained, everything outside the pool is evicted.
inline CompressionPlan plan_allocation(const std::vector<TokenRecord>& tokens,
                                       const ImportanceScores& scores,
                                       const CalibrationModeld& model,
                                       const CompressionConfig& cfg, const RopeTabled& rope) {
    if (model.direction != FitDirection::KtoV)
        throw std::invalid_argument("plan_allocation: model must map keys to values");
    detail::check_tokens(tokens, model.in_dim(), model.out_dim());
    const Index n = static_cast<Index>(tokens.size());
    if (scores.scores.size() != n)
        throw std::invalid_argument("plan_allocation: score/token counts differ");
    const PlanSizes sizes = plan_sizes(n, cfg);

    std::vector<Index> pool = top_k_by_score(scores.scores, sizes.pool);

    Eigen::VectorXd eps = Eigen::VectorXd::Zero(n);
    for (Index i : pool) {
        const TokenRecord& t = tokens[static_cast<std::size_t>(i)];
        const Eigen::VectorXd key_pre = rope.invert_blocked(t.key, t.index);
        eps(i) = (t.value - model.weights * key_pre).squaredNorm();
    }

    std::sort(pool.begin(), pool.end(), [&](Index a, Index b) {
        if (eps(a) != eps(b)) return eps(a) < eps(b);
        return a < b;
    });
    std::vector<RoutingLabel> labels(static_cast<std::size_t>(n), RoutingLabel::Evict);
    for (std::size_t r = 0; r < pool.size(); ++r)
        labels[static_cast<std::size_t>(pool[r])] =
            static_cast<Index>(r) < sizes.approx ? RoutingLabel::Approximate
                                                 : RoutingLabel::Retain;
    return CompressionPlan::from_labels(labels, cfg);
}

// Binary top-(1-p_c) eviction of the base scorer, as a plan with an empty
// approximation tier.
inline CompressionPlan plan_binary_eviction(const ImportanceScores& scores, double p_c,
                                            double epsilon = 0.0) {
    const Index n = scores.scores.size();
    return plan_from_rankings(scores.scores, Eigen::VectorXd::Zero(n),
                              CompressionConfig{p_c, 0.0, epsilon});
}

// Which side of the KV pair the approximation tier drops and reconstructs.
enum class ApproxSide { Value, Key };

// Post-compression cache over the candidate pool, in ascending token order.
// On the default Value side all pool keys are stored exactly and only retained
// values are kept; approximated values are rebuilt on read from the de-rotated
// key. The Key side mirrors this for the ablation variant.
class CompressedCache {
public:
    CompressedCache(Eigen::MatrixXd keys, Eigen::MatrixXd values,
                    std::vector<std::uint8_t> approx_flags, std::vector<Index> positions,
                    std::vector<Index> exact_col, CalibrationModeld model, RopeTabled rope,
                    ApproxSide side)
        : keys_(std::move(keys)), values_(std::move(values)),
          approx_flags_(std::move(approx_flags)), positions_(std::move(positions)),
          exact_col_(std::move(exact_col)), model_(std::move(model)), rope_(std::move(rope)),
          side_(side) {}

    Index pool_size() const { return static_cast<Index>(approx_flags_.size()); }
    ApproxSide side() const { return side_; }
    const Eigen::MatrixXd& keys() const { return keys_; }
    const Eigen::MatrixXd& values() const { return values_; }
    const std::vector<std::uint8_t>& approx_flags() const { return approx_flags_; }
    const std::vector<Index>& positions() const { return positions_; }
    const CalibrationModeld& model() const { return model_; }
    const RopeTabled& rope() const { return rope_; }

    Index stored_entries() const { return keys_.size() + values_.size(); }

    bool is_approximated(Index slot) const {
        check_slot(slot);
        return approx_flags_[static_cast<std::size_t>(slot)] != 0;
    }

    // Retained slots return the stored value bit-exactly; approximated slots
    // reconstruct it from the stored key.
    Eigen::VectorXd value_at(Index slot) const {
        check_slot(slot);
        const std::size_t s = static_cast<std::size_t>(slot);
        if (side_ == ApproxSide::Key || approx_flags_[s] == 0) {
            const Index col = side_ == ApproxSide::Key ? slot : exact_col_[s];
            return values_.col(col);
        }
        if (memo_) {
            std::scoped_lock lock(memo_->guard);
            auto it = memo_->values.find(slot);
            if (it != memo_->values.end()) return it->second;
            Eigen::VectorXd v = reconstruct_value(slot);
            memo_->values.emplace(slot, v);
            return v;
        }
        return reconstruct_value(slot);
    }

    Eigen::VectorXd key_at(Index slot) const {
        check_slot(slot);
        const std::size_t s = static_cast<std::size_t>(slot);
        if (side_ == ApproxSide::Value || approx_flags_[s] == 0) {
            const Index col = side_ == ApproxSide::Value ? slot : exact_col_[s];
            return keys_.col(col);
        }
        // rebuilt pre-rotation key, rotated back to the cached position
        return rope_.apply_blocked((model_.weights * values_.col(slot)).eval(),
                                   positions_[s]);
    }

    // Dense key matrix as the attention router sees it.
    Eigen::MatrixXd routing_keys() const {
        if (side_ == ApproxSide::Value) return keys_;
        Eigen::MatrixXd out(model_.out_dim(), pool_size());
        for (Index i = 0; i < pool_size(); ++i) out.col(i) = key_at(i);
        return out;
    }

    // Decode-time tokens are appended fully retained; compression only ever
    // applies to the prefill portion the plan was built from.
    void append_retained(const Eigen::VectorXd& key, const Eigen::VectorXd& value,
                         Index position) {
        if (position < 0 || position >= rope_.max_positions())
            throw std::out_of_range("append: position out of range");
        keys_.conservativeResize(Eigen::NoChange, keys_.cols() + 1);
        keys_.col(keys_.cols() - 1) = key;
        values_.conservativeResize(Eigen::NoChange, values_.cols() + 1);
        values_.col(values_.cols() - 1) = value;
        approx_flags_.push_back(0);
        positions_.push_back(position);
        exact_col_.push_back(side_ == ApproxSide::Value ? values_.cols() - 1
                                                        : keys_.cols() - 1);
    }

    // Reconstructed reads are recomputed on every call unless memoization is
    // turned on; the memo is shared and lock-guarded, reads stay pure.
    void enable_memoization(bool on) {
        memo_ = on ? std::make_shared<Memo>() : nullptr;
    }

private:
    struct Memo {
        std::mutex guard;
        std::unordered_map<Index, Eigen::VectorXd> values;
    };

    void check_slot(Index slot) const {
        if (slot < 0 || slot >= pool_size())
            throw std::out_of_range("cache: pool slot out of range");
    }

    Eigen::VectorXd reconstruct_value(Index slot) const {
        const std::size_t s = static_cast<std::size_t>(slot);
        return model_.weights * rope_.invert_blocked(keys_.col(slot), positions_[s]);
    }

    Eigen::MatrixXd keys_;
    Eigen::MatrixXd values_;
    std::vector<std::uint8_t> approx_flags_;
    std::vector<Index> positions_;
    std::vector<Index> exact_col_;
    CalibrationModeld model_;
    RopeTabled rope_;
    ApproxSide side_;
    std::shared_ptr<Memo> memo_;
};

inline Eigen::VectorXd read_value(const CompressedCache& cache, Index pool_slot) {
    return cache.value_at(pool_slot);
}

inline Eigen::VectorXd read_key(const CompressedCache& cache, Index pool_slot) {
    return cache.key_at(pool_slot);
}

// Materializes the cache for a plan: pool keys stored as cached, values only
// for the retained tier.
inline CompressedCache build_cache(const std::vector<TokenRecord>& tokens,
                                   const CompressionPlan& plan, const CalibrationModeld& model,
                                   const RopeTabled& rope) {
    if (plan.n != static_cast<Index>(tokens.size()))
        throw std::invalid_argument("build_cache: plan built from a different token count");
    detail::check_tokens(tokens, model.in_dim(), model.out_dim());

    const Index pool = static_cast<Index>(plan.pool_indices.size());
    Eigen::MatrixXd keys(model.in_dim(), pool);
    Eigen::MatrixXd values(model.out_dim(), static_cast<Index>(plan.retained.size()));
    std::vector<std::uint8_t> flags(static_cast<std::size_t>(pool), 0);
    std::vector<Index> positions(static_cast<std::size_t>(pool), 0);
    std::vector<Index> exact_col(static_cast<std::size_t>(pool), -1);

    Index value_col = 0;
    for (Index slot = 0; slot < pool; ++slot) {
        const std::size_t s = static_cast<std::size_t>(slot);
        const TokenRecord& t = tokens[static_cast<std::size_t>(plan.pool_indices[s])];
        keys.col(slot) = t.key;
        positions[s] = t.index;
        if (plan.labels[static_cast<std::size_t>(plan.pool_indices[s])] ==
            RoutingLabel::Approximate) {
            flags[s] = 1;
        } else {
            values.col(value_col) = t.value;
            exact_col[s] = value_col++;
        }
    }
    return CompressedCache(std::move(keys), std::move(values), std::move(flags),
                           std::move(positions), std::move(exact_col), model, rope,
                           ApproxSide::Value);
}

struct KonlyAblation {
    CompressionPlan plan;
    CompressedCache cache;
};

// Mirror-image pipeline: every pool value is stored, the 2*p_a pool tokens with
// the lowest key-reconstruction error drop their keys, and reads rebuild the
// key by rotating the value-predicted pre-rotation key to its position.
inline KonlyAblation plan_konly_ablation(const std::vector<TokenRecord>& tokens,
                                         const ImportanceScores& scores,
                                         const CalibrationModeld& model_vtok,
                                         const CompressionConfig& cfg, const RopeTabled& rope) {
    if (model_vtok.direction != FitDirection::VtoK)
        throw std::invalid_argument("plan_konly_ablation: model must map values to keys");
    detail::check_tokens(tokens, model_vtok.out_dim(), model_vtok.in_dim());
    const Index n = static_cast<Index>(tokens.size());
    if (scores.scores.size() != n)
        throw std::invalid_argument("plan_konly_ablation: score/token counts differ");
    const PlanSizes sizes = plan_sizes(n, cfg);

    std::vector<Index> pool = top_k_by_score(scores.scores, sizes.pool);
    Eigen::VectorXd eps = Eigen::VectorXd::Zero(n);
    for (Index i : pool) {
        const TokenRecord& t = tokens[static_cast<std::size_t>(i)];
        const Eigen::VectorXd key_pre = rope.invert_blocked(t.key, t.index);
        eps(i) = (key_pre - model_vtok.weights * t.value).squaredNorm();
    }
    std::sort(pool.begin(), pool.end(), [&](Index a, Index b) {
        if (eps(a) != eps(b)) return eps(a) < eps(b);
        return a < b;
    });
    std::vector<RoutingLabel> labels(static_cast<std::size_t>(n), RoutingLabel::Evict);
    for (std::size_t r = 0; r < pool.size(); ++r)
        labels[static_cast<std::size_t>(pool[r])] =
            static_cast<Index>(r) < sizes.approx ? RoutingLabel::Approximate
                                                 : RoutingLabel::Retain;
    CompressionPlan plan = CompressionPlan::from_labels(labels, cfg);

    const Index pool_count = static_cast<Index>(plan.pool_indices.size());
    Eigen::MatrixXd values(model_vtok.in_dim(), pool_count);
    Eigen::MatrixXd keys(model_vtok.out_dim(), static_cast<Index>(plan.retained.size()));
    std::vector<std::uint8_t> flags(static_cast<std::size_t>(pool_count), 0);
    std::vector<Index> positions(static_cast<std::size_t>(pool_count), 0);
    std::vector<Index> exact_col(static_cast<std::size_t>(pool_count), -1);
    Index key_col = 0;
    for (Index slot = 0; slot < pool_count; ++slot) {
        const std::size_t s = static_cast<std::size_t>(slot);
        const TokenRecord& t = tokens[static_cast<std::size_t>(plan.pool_indices[s])];
        values.col(slot) = t.value;
        positions[s] = t.index;
        if (plan.labels[static_cast<std::size_t>(plan.pool_indices[s])] ==
            RoutingLabel::Approximate) {
            flags[s] = 1;
        } else {
            keys.col(key_col) = t.key;
            exact_col[s] = key_col++;
        }
    }
    CompressedCache cache(std::move(keys), std::move(values), std::move(flags),
                          std::move(positions), std::move(exact_col), model_vtok, rope,
                          ApproxSide::Key);
    return {std::move(plan), std::move(cache)};
}

// Attention over a compressed cache; evicted tokens are simply absent.
inline Eigen::VectorXd attention_forward(const CompressedCache& cache,
                                         const AttentionQuery& query, double scale) {
    if (cache.pool_size() == 0)
        throw std::invalid_argument("attention: empty cache");
    const Eigen::MatrixXd keys = cache.routing_keys();
    return attention_forward(
        keys, [&](Index i) { return cache.value_at(i); }, query, scale);
}

// Entry counts per tier plus the equal-footprint budget of (1-p_c) full pairs.
struct MemoryReport {
    Index key_entries = 0;
    Index value_entries = 0;
    Index total_entries = 0;
    Index budget_entries = 0;
    Index deviation = 0;  // total - budget
};

inline MemoryReport memory_report(const CompressionPlan& plan, Index d_k, Index d_v,
                                  ApproxSide side = ApproxSide::Value) {
    MemoryReport r;
    const Index pool = static_cast<Index>(plan.pool_indices.size());
    const Index exact = static_cast<Index>(plan.retained.size());
    if (side == ApproxSide::Value) {
        r.key_entries = d_k * pool;
        r.value_entries = d_v * exact;
    } else {
        r.key_entries = d_k * exact;
        r.value_entries = d_v * pool;
    }
    r.total_entries = r.key_entries + r.value_entries;
    r.budget_entries = round_half_up((1.0 - plan.config.p_c) * double(plan.n)) * (d_k + d_v);
    r.deviation = r.total_entries - r.budget_entries;
    return r;
}

} // namespace veckv
