#pragma once

#include "veckv/allocator.hpp"
#include "veckv/core.hpp"
#include "veckv/distortion.hpp"
#include "veckv/io.hpp"
#include "veckv/regression.hpp"
#include "veckv/rope.hpp"
#include "veckv/scorers.hpp"
#include "veckv/toymodel.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <string>
#include <vector>

namespace veckv {

// How a dump layer is turned into an evaluation problem: the trailing
// n_queries tokens act as held-out attention queries (their cached keys,
// scaled by query_gain), everything before them is the prefill cache that
// gets compressed.
struct EvalProtocol {
    std::string scorer = "key-diversity";
    Index n_queries = 16;
    double query_gain = 1.0;
    Index n_heads = 1;
    double rope_base = 10000.0;
    std::uint64_t scorer_seed = 1;
};

// Prefill tokens plus held-out queries for one layer.
struct LayerEval {
    Eigen::MatrixXd keys_cached;  // d_k x m
    Eigen::MatrixXd keys_pre;     // d_k x m
    Eigen::MatrixXd values;       // d_v x m
    std::vector<Index> positions;
    std::vector<TokenRecord> tokens;
    std::vector<AttentionQuery> queries;
    double scale = 1.0;
};

RopeTabled make_rope(Index d_k, Index n_heads, Index max_positions, double base = 10000.0);

LayerEval prepare_layer(const LayerActivations& layer, const RopeTabled& rope,
                        const EvalProtocol& protocol);

ImportanceScores score_layer(const LayerEval& eval, const EvalProtocol& protocol);

// Full-cache attention outputs, one column per query.
Eigen::MatrixXd reference_outputs(const LayerEval& eval);

Eigen::MatrixXd cache_outputs(const CompressedCache& cache,
                              const std::vector<AttentionQuery>& queries, double scale);

enum class Variant { ThreeWay, EvictOnly, KeyOnly };

const char* variant_name(Variant v);

struct VariantEval {
    CompressionPlan plan;
    MemoryReport memory;
    double mse = 0.0;
    DistortionReport distortion;
};

// Runs one compression variant over a prepared layer and reports output MSE
// against the full cache, the memory footprint, and the evaluated distortion
// under the scorer's normalized weights. KeyOnly requires the value->key
// model, the others the key->value model.
VariantEval evaluate_variant(const LayerEval& eval, const RopeTabled& rope, Variant variant,
                             const CalibrationModeld& ktov, const CalibrationModeld* vtok,
                             const CompressionConfig& cfg, const ImportanceScores& scores,
                             const Eigen::MatrixXd& reference);

// Convenience wrapper over a generated toy sequence.
LayerActivations to_layer_activations(const GeneratedSequence& seq);

} // namespace veckv
