#pragma once

#include "veckv/core.hpp"
#include "veckv/regression.hpp"
#include "veckv/rng.hpp"
#include "veckv/rope.hpp"

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <concepts>
#include <type_traits>
#include <vector>

namespace veckv {

// Synthetic single attention layer: hidden states with a low effective rank,
// fixed key/value/query projections, rotary-rotated cached keys. Stands in for
// real activations when exercising calibration and allocation end to end.
struct ToyLayerSpec {
    Index d = 64;              // hidden dimension
    Index d_k = 8;
    Index d_v = 8;
    Index effective_rank = 4;  // r <= min(d_k, d_v)
    double noise_sigma = 0.0;  // off-subspace energy
    std::uint64_t seed = 1;
    Index n_heads = 1;
};

inline void check_spec(const ToyLayerSpec& s) {
    if (s.d <= 0 || s.d_k <= 0 || s.d_v <= 0)
        throw std::invalid_argument("toymodel: dimensions must be positive");
    if (s.effective_rank <= 0 || s.effective_rank > std::min(s.d_k, s.d_v))
        throw std::invalid_argument("toymodel: effective_rank outside [1, min(d_k, d_v)]");
    if (s.effective_rank > s.d)
        throw std::invalid_argument("toymodel: effective_rank exceeds hidden dimension");
    if (!(s.noise_sigma >= 0.0))
        throw std::invalid_argument("toymodel: negative noise_sigma");
    if (s.n_heads <= 0 || s.d_k % s.n_heads != 0 || s.d_v % s.n_heads != 0)
        throw std::invalid_argument("toymodel: d_k and d_v must divide by n_heads");
    if ((s.d_k / s.n_heads) % 2 != 0)
        throw std::invalid_argument("toymodel: key head dimension must be even for rotation");
}

// One generated token stream. Column i holds token i.
struct GeneratedSequence {
    Eigen::MatrixXd hidden;       // d   x n
    Eigen::MatrixXd keys_pre;     // d_k x n, before rotation
    Eigen::MatrixXd values;       // d_v x n
    Eigen::MatrixXd keys_cached;  // d_k x n, rotated to each token's position
    std::vector<Index> positions;
};

struct AttentionQuery {
    Eigen::VectorXd query;  // d_k, rotated to `position`
    Index position = 0;
};

class ToyLayer {
public:
    // hidden signal std per entry; noise_sigma is measured against this, so
    // noise_sigma = 0.3 puts the key->value predictability in the range real
    // models show rather than making approximation nearly free
    static constexpr double kSignalScale = 0.22;

    explicit ToyLayer(const ToyLayerSpec& spec, Index max_positions = 8192)
        : spec_(spec), rope_(head_dim_of(spec), max_positions) {
        check_spec(spec);
        Rng rng(spec.seed);
        const Index r = spec.effective_rank;
        mixing_ = gaussian_matrix(rng, spec.d, r, kSignalScale / std::sqrt(double(r)));
        // keep key/value entries near unit variance at any noise level
        const double entry_var =
            kSignalScale * kSignalScale + spec.noise_sigma * spec.noise_sigma;
        const double proj_sigma = 1.0 / std::sqrt(double(spec.d) * entry_var);
        w_k_ = gaussian_matrix(rng, spec.d_k, spec.d, proj_sigma);
        w_v_ = gaussian_matrix(rng, spec.d_v, spec.d, proj_sigma);
        w_q_ = gaussian_matrix(rng, spec.d_k, spec.d, proj_sigma);
    }

    const ToyLayerSpec& spec() const { return spec_; }
    const RopeTabled& rope() const { return rope_; }
    ProjectionPaird projection_pair() const { return {w_k_, w_v_}; }

    // h_i = mixing * z_i + noise_sigma * n_i; K = w_k h; V = w_v h; cached key
    // rotated to position i. Deterministic given the layer seed; `stream`
    // selects independent sequences from the same layer.
    GeneratedSequence generate_sequence(Index n_tokens, std::uint64_t stream = 0) const {
        if (n_tokens < 1)
            throw std::invalid_argument("generate_sequence: need at least one token");
        if (n_tokens > rope_.max_positions())
            throw std::invalid_argument("generate_sequence: more tokens than rotary positions");
        Rng rng(spec_.seed ^ (0x9e3779b97f4a7c15ull + stream * 0xbf58476d1ce4e5b9ull));
        GeneratedSequence seq;
        seq.hidden = hidden_batch(rng, n_tokens);
        seq.keys_pre = w_k_ * seq.hidden;
        seq.values = w_v_ * seq.hidden;
        seq.keys_cached.resize(spec_.d_k, n_tokens);
        seq.positions.resize(static_cast<std::size_t>(n_tokens));
        for (Index i = 0; i < n_tokens; ++i) {
            seq.keys_cached.col(i) = rope_.apply_blocked(seq.keys_pre.col(i), i);
            seq.positions[static_cast<std::size_t>(i)] = i;
        }
        return seq;
    }

    // Evaluation queries from the same hidden-state source, rotated to their
    // positions. `gain` scales the query projection and thereby the attention
    // logit spread.
    std::vector<AttentionQuery> make_queries(Index count, Index first_position,
                                             double gain = 1.0,
                                             std::uint64_t salt = 0x51ed270b7a64ull) const {
        if (count < 1)
            throw std::invalid_argument("make_queries: need at least one query");
        if (first_position < 0 || first_position + count > rope_.max_positions())
            throw std::invalid_argument("make_queries: query positions out of range");
        Rng rng(spec_.seed ^ salt);
        Eigen::MatrixXd hidden = hidden_batch(rng, count);
        std::vector<AttentionQuery> out;
        out.reserve(static_cast<std::size_t>(count));
        for (Index i = 0; i < count; ++i) {
            AttentionQuery q;
            q.position = first_position + i;
            q.query = rope_.apply_blocked((gain * (w_q_ * hidden.col(i))).eval(), q.position);
            out.push_back(std::move(q));
        }
        return out;
    }

    double attention_scale() const {
        return 1.0 / std::sqrt(double(spec_.d_k / spec_.n_heads));
    }

private:
    static Index head_dim_of(const ToyLayerSpec& s) {
        check_spec(s);
        return s.d_k / s.n_heads;
    }

    static Eigen::MatrixXd gaussian_matrix(Rng& rng, Index rows, Index cols, double sigma) {
        Eigen::MatrixXd m(rows, cols);
        for (Index j = 0; j < cols; ++j)
            for (Index i = 0; i < rows; ++i)
                m(i, j) = sigma * rng.gaussian();
        return m;
    }

    Eigen::MatrixXd hidden_batch(Rng& rng, Index n) const {
        Eigen::MatrixXd latent = gaussian_matrix(rng, spec_.effective_rank, n, 1.0);
        Eigen::MatrixXd hidden = mixing_ * latent;
        if (spec_.noise_sigma > 0.0)
            hidden += gaussian_matrix(rng, spec_.d, n, spec_.noise_sigma);
        return hidden;
    }

    ToyLayerSpec spec_;
    RopeTabled rope_;
    Eigen::MatrixXd mixing_;  // d x r
    Eigen::MatrixXd w_k_, w_v_, w_q_;
};

inline GeneratedSequence generate_sequence(const ToyLayerSpec& spec, Index n_tokens) {
    return ToyLayer(spec, std::max<Index>(n_tokens, 1)).generate_sequence(n_tokens);
}

// Numerically stable softmax of q.K/scale over cache columns.
template <typename DerivedK, typename DerivedQ>
Eigen::VectorXd softmax_weights(const Eigen::MatrixBase<DerivedK>& keys,
                                const Eigen::MatrixBase<DerivedQ>& query, double scale) {
    if (keys.cols() == 0)
        throw std::invalid_argument("attention: empty cache");
    if (keys.rows() != query.size())
        throw std::invalid_argument("attention: key/query dimension mismatch");
    Eigen::VectorXd logits = (keys.transpose() * query) * scale;
    const double m = logits.maxCoeff();
    Eigen::VectorXd w = (logits.array() - m).exp();
    return w / w.sum();
}

// Softmax-weighted aggregation of per-slot values. The value provider maps a
// cache slot to its d_v vector, so the same forward pass runs over exact or
// reconstructed values.
template <typename DerivedK, typename ValueProvider>
    requires requires(ValueProvider& f, Index i) {
        { f(i) } -> std::convertible_to<Eigen::VectorXd>;
    }
Eigen::VectorXd attention_forward(const Eigen::MatrixBase<DerivedK>& keys,
                                  ValueProvider&& value_at, const AttentionQuery& query,
                                  double scale) {
    const Eigen::VectorXd w = softmax_weights(keys, query.query, scale);
    Eigen::VectorXd out = w(0) * value_at(Index(0));
    for (Index i = 1; i < keys.cols(); ++i)
        out += w(i) * value_at(i);
    return out;
}

template <typename DerivedK, typename DerivedV>
Eigen::VectorXd attention_forward(const Eigen::MatrixBase<DerivedK>& keys,
                                  const Eigen::MatrixBase<DerivedV>& values,
                                  const AttentionQuery& query, double scale) {
    if (keys.cols() != values.cols())
        throw std::invalid_argument("attention: key/value counts differ");
    return attention_forward(
        keys, [&](Index i) { return values.col(i).eval(); }, query, scale);
}

// Mean squared componentwise error between two output sequences.
template <typename DerivedA, typename DerivedB>
double output_mse(const Eigen::MatrixBase<DerivedA>& reference,
                  const Eigen::MatrixBase<DerivedB>& candidate) {
    if (reference.rows() != candidate.rows() || reference.cols() != candidate.cols())
        throw std::invalid_argument("output_mse: shape mismatch");
    if (reference.size() == 0)
        throw std::invalid_argument("output_mse: empty sequences");
    return (reference - candidate).squaredNorm() / double(reference.size());
}

} // namespace veckv
