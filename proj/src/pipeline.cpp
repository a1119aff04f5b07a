#include "veckv/pipeline.hpp"

#include <algorithm>
#include <stdexcept>

namespace veckv {

RopeTabled make_rope(Index d_k, Index n_heads, Index max_positions, double base) {
    if (n_heads <= 0 || d_k % n_heads != 0)
        throw std::invalid_argument("eval: d_k must divide by the head count");
    return RopeTabled(d_k / n_heads, max_positions, base);
}

LayerActivations to_layer_activations(const GeneratedSequence& seq) {
    LayerActivations layer;
    layer.keys_pre = seq.keys_pre;
    layer.values = seq.values;
    layer.positions = seq.positions;
    return layer;
}

LayerEval prepare_layer(const LayerActivations& layer, const RopeTabled& rope,
                        const EvalProtocol& protocol) {
    const Index n = layer.keys_pre.cols();
    if (protocol.n_queries < 1)
        throw std::invalid_argument("eval: need at least one query");
    if (n - protocol.n_queries < 4)
        throw std::invalid_argument("eval: layer too short for the query split");

    const Index m = n - protocol.n_queries;
    LayerEval eval;
    eval.keys_pre = layer.keys_pre.leftCols(m);
    eval.values = layer.values.leftCols(m);
    eval.positions.assign(layer.positions.begin(), layer.positions.begin() + m);
    eval.keys_cached.resize(layer.keys_pre.rows(), m);
    for (Index i = 0; i < m; ++i)
        eval.keys_cached.col(i) =
            rope.apply_blocked(eval.keys_pre.col(i), eval.positions[static_cast<std::size_t>(i)]);

    eval.tokens.resize(static_cast<std::size_t>(m));
    for (Index i = 0; i < m; ++i) {
        TokenRecord& t = eval.tokens[static_cast<std::size_t>(i)];
        t.index = eval.positions[static_cast<std::size_t>(i)];
        t.key = eval.keys_cached.col(i);
        t.value = eval.values.col(i);
    }

    eval.queries.reserve(static_cast<std::size_t>(protocol.n_queries));
    for (Index q = 0; q < protocol.n_queries; ++q) {
        const Index src = m + q;
        AttentionQuery query;
        query.position = layer.positions[static_cast<std::size_t>(src)];
        query.query = protocol.query_gain *
                      rope.apply_blocked(layer.keys_pre.col(src), query.position);
        eval.queries.push_back(std::move(query));
    }

    const Index head_dim = rope.head_dim();
    eval.scale = 1.0 / std::sqrt(double(head_dim));
    return eval;
}

ImportanceScores score_layer(const LayerEval& eval, const EvalProtocol& protocol) {
    if (protocol.scorer == "key-diversity")
        return key_diversity_score(eval.keys_cached);
    if (protocol.scorer == "attn-window") {
        Eigen::MatrixXd window(eval.keys_cached.rows(),
                               static_cast<Index>(eval.queries.size()));
        for (Index q = 0; q < window.cols(); ++q)
            window.col(q) = eval.queries[static_cast<std::size_t>(q)].query;
        return attention_window_score(eval.keys_cached, window, eval.scale);
    }
    if (protocol.scorer == "random")
        return random_score(eval.keys_cached.cols(), protocol.scorer_seed);
    throw std::invalid_argument("unknown scorer: " + protocol.scorer);
}

Eigen::MatrixXd reference_outputs(const LayerEval& eval) {
    Eigen::MatrixXd out(eval.values.rows(), static_cast<Index>(eval.queries.size()));
    for (std::size_t q = 0; q < eval.queries.size(); ++q)
        out.col(static_cast<Index>(q)) =
            attention_forward(eval.keys_cached, eval.values, eval.queries[q], eval.scale);
    return out;
}

Eigen::MatrixXd cache_outputs(const CompressedCache& cache,
                              const std::vector<AttentionQuery>& queries, double scale) {
    if (queries.empty())
        throw std::invalid_argument("eval: no queries");
    Eigen::MatrixXd out(cache.value_at(0).size(), static_cast<Index>(queries.size()));
    const Eigen::MatrixXd keys = cache.routing_keys();
    for (std::size_t q = 0; q < queries.size(); ++q)
        out.col(static_cast<Index>(q)) = attention_forward(
            keys, [&](Index i) { return cache.value_at(i); }, queries[q], scale);
    return out;
}

const char* variant_name(Variant v) {
    switch (v) {
        case Variant::ThreeWay: return "three-way";
        case Variant::EvictOnly: return "evict-only";
        case Variant::KeyOnly: return "k-only";
    }
    return "?";
}

namespace {

// Relative reconstruction error of the modeled side, clamped into [0,1] for
// the distortion accounting.
Eigen::VectorXd relative_errors(const Eigen::MatrixXd& inputs, const Eigen::MatrixXd& targets,
                                const CalibrationModeld& model) {
    const Eigen::MatrixXd residual = targets - model.weights * inputs;
    Eigen::VectorXd rel(targets.cols());
    for (Index i = 0; i < targets.cols(); ++i) {
        const double denom = targets.col(i).squaredNorm();
        const double err = residual.col(i).squaredNorm();
        if (denom > 0.0)
            rel(i) = std::min(1.0, err / denom);
        else
            rel(i) = err > 0.0 ? 1.0 : 0.0;
    }
    return rel;
}

} // namespace

VariantEval evaluate_variant(const LayerEval& eval, const RopeTabled& rope, Variant variant,
                             const CalibrationModeld& ktov, const CalibrationModeld* vtok,
                             const CompressionConfig& cfg, const ImportanceScores& scores,
                             const Eigen::MatrixXd& reference) {
    VariantEval out;
    const Index d_k = eval.keys_cached.rows();
    const Index d_v = eval.values.rows();

    if (variant == Variant::KeyOnly) {
        if (vtok == nullptr)
            throw std::invalid_argument("eval: key-side variant needs a value->key model");
        KonlyAblation ablation = plan_konly_ablation(eval.tokens, scores, *vtok, cfg, rope);
        out.plan = std::move(ablation.plan);
        out.memory = memory_report(out.plan, d_k, d_v, ApproxSide::Key);
        out.mse = output_mse(reference, cache_outputs(ablation.cache, eval.queries, eval.scale));
    } else {
        out.plan = variant == Variant::ThreeWay
                       ? plan_allocation(eval.tokens, scores, ktov, cfg, rope)
                       : plan_binary_eviction(scores, cfg.p_c, cfg.epsilon);
        out.memory = memory_report(out.plan, d_k, d_v, ApproxSide::Value);
        CompressedCache cache = build_cache(eval.tokens, out.plan, ktov, rope);
        out.mse = output_mse(reference, cache_outputs(cache, eval.queries, eval.scale));
    }

    const ImportanceScores weights = normalize(scores);
    const Eigen::VectorXd rel =
        variant == Variant::KeyOnly
            ? relative_errors(eval.values, eval.keys_pre, *vtok)
            : relative_errors(eval.keys_pre, eval.values, ktov);
    const DistortionInstance inst(weights.scores, rel, out.plan.config);
    out.distortion = evaluate_distortion(inst, out.plan);
    return out;
}

} // namespace veckv
