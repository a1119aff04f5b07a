#pragma once

#include "veckv/pipeline.hpp"
#include "veckv/toymodel.hpp"

#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace veckv {

// Command drivers behind the CLI. Each one is deterministic given its options:
// re-running writes byte-identical files. They return a process exit code
// (0 ok, 1 failed checks) and throw FormatError for bad files and
// std::invalid_argument for unusable option combinations.

struct SynthOptions {
    ToyLayerSpec spec;       // spec.seed is the base seed
    Index layers = 1;
    Index sequences = 64;
    Index seq_len = 512;
    std::string out_path;
};
int cmd_synth(const SynthOptions& opt, std::ostream& log);

struct CalibrateOptions {
    std::string dump_path;
    std::string out_path;
    std::optional<double> ridge;  // empty -> per-layer default guard
    FitDirection direction = FitDirection::KtoV;
    bool per_head = false;
    Index n_heads = 1;
};
int cmd_calibrate(const CalibrateOptions& opt, std::ostream& log);

struct EvaluateOptions {
    std::string dump_path;
    std::string model_path;
    std::string model_vtok_path;  // needed unless include_konly is false
    std::string out_csv;
    std::vector<double> pc_grid{0.25, 0.50, 0.75, 0.90};
    std::optional<double> pa;     // empty -> deployment formula
    double epsilon = 0.0;
    bool include_konly = true;
    EvalProtocol protocol;
};
int cmd_evaluate(const EvaluateOptions& opt, std::ostream& log);

struct SweepOptions {
    std::string dump_path;
    std::string model_path;
    std::string out_csv;
    double p_c = 0.75;
    std::vector<double> pa_grid;  // empty -> 0 .. min(p_c, 1-p_c) in 0.05 steps
    double epsilon = 0.0;
    EvalProtocol protocol;
};
int cmd_sweep(const SweepOptions& opt, std::ostream& log);

struct TheoryOptions {
    std::uint64_t seed = 1;
    std::string out_csv;
    Index mc_samples = 1000000;
    Index instances = 500;
};
int cmd_theory(const TheoryOptions& opt, std::ostream& log);

std::string format_double(double v);

} // namespace veckv
