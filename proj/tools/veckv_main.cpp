#include "veckv/commands.hpp"
#include "veckv/io.hpp"

#include <CLI11.hpp>

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

namespace {

std::optional<double> parse_or_keyword(const std::string& text, const std::string& keyword,
                                       const char* what) {
    if (text == keyword) return std::nullopt;
    try {
        std::size_t used = 0;
        const double v = std::stod(text, &used);
        if (used != text.size()) throw std::invalid_argument(what);
        return v;
    } catch (const std::exception&) {
        throw std::invalid_argument(std::string(what) + ": expected a number or '" + keyword +
                                    "', got '" + text + "'");
    }
}

void add_protocol_flags(CLI::App* cmd, veckv::EvalProtocol& protocol) {
    cmd->add_option("--scorer", protocol.scorer, "importance scorer")
        ->check(CLI::IsMember({"attn-window", "key-diversity", "random"}))
        ->capture_default_str();
    cmd->add_option("--queries", protocol.n_queries, "held-out query count")
        ->capture_default_str();
    cmd->add_option("--qscale", protocol.query_gain, "query gain (attention logit spread)")
        ->capture_default_str();
    cmd->add_option("--heads", protocol.n_heads, "rotary head count for d_k")
        ->capture_default_str();
    cmd->add_option("--rope-base", protocol.rope_base, "rotary frequency base")
        ->capture_default_str();
    cmd->add_option("--scorer-seed", protocol.scorer_seed, "seed for the random scorer")
        ->capture_default_str();
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"KV-cache compression workbench: three-way retain/approximate/evict "
                 "allocation with calibrated value reconstruction"};
    app.require_subcommand(1);
    // given before the subcommand: veckv --config run.cfg <command>; sections
    // ([synth], [evaluate], ...) hold that command's keys
    app.set_config("--config", "", "key=value config file mirroring the flags");
    app.allow_config_extras(CLI::config_extras_mode::error);

    veckv::SynthOptions synth;
    std::string synth_out;
    CLI::App* c_synth = app.add_subcommand("synth", "generate a synthetic activation dump");
    c_synth->add_option("--out", synth_out, "output dump path")->required();
    c_synth->add_option("--seed", synth.spec.seed, "base seed")->capture_default_str();
    c_synth->add_option("--sequences", synth.sequences, "sequence count")->capture_default_str();
    c_synth->add_option("--seq-len", synth.seq_len, "tokens per sequence")->capture_default_str();
    c_synth->add_option("--layers", synth.layers, "independent layers")->capture_default_str();
    c_synth->add_option("--dim", synth.spec.d, "hidden dimension")->capture_default_str();
    c_synth->add_option("--dk", synth.spec.d_k, "key dimension")->capture_default_str();
    c_synth->add_option("--dv", synth.spec.d_v, "value dimension")->capture_default_str();
    c_synth->add_option("--rank", synth.spec.effective_rank, "hidden effective rank")
        ->capture_default_str();
    c_synth->add_option("--noise", synth.spec.noise_sigma, "off-subspace noise sigma")
        ->capture_default_str();
    c_synth->add_option("--heads", synth.spec.n_heads, "head count")->capture_default_str();

    veckv::CalibrateOptions calib;
    std::string calib_ridge = "auto";
    std::string calib_direction = "ktov";
    CLI::App* c_calib = app.add_subcommand("calibrate", "fit per-layer linear estimators");
    c_calib->add_option("--dump", calib.dump_path, "input dump")->required();
    c_calib->add_option("--out", calib.out_path, "output model path")->required();
    c_calib->add_option("--ridge", calib_ridge, "ridge lambda or 'auto'")->capture_default_str();
    c_calib->add_option("--direction", calib_direction, "fit direction")
        ->check(CLI::IsMember({"ktov", "vtok"}))
        ->capture_default_str();
    c_calib->add_flag("--per-head", calib.per_head, "fit one map per head block");
    c_calib->add_option("--heads", calib.n_heads, "head count for --per-head")
        ->capture_default_str();

    veckv::EvaluateOptions eval;
    std::string eval_pa = "deploy";
    bool no_konly = false;
    CLI::App* c_eval = app.add_subcommand("evaluate", "compare compression variants on a grid");
    c_eval->add_option("--dump", eval.dump_path, "input dump")->required();
    c_eval->add_option("--model", eval.model_path, "key->value model")->required();
    c_eval->add_option("--model-vtok", eval.model_vtok_path, "value->key model");
    c_eval->add_option("--out", eval.out_csv, "output CSV")->required();
    c_eval->add_option("--pc", eval.pc_grid, "compression ratio grid")->capture_default_str();
    c_eval->add_option("--pa", eval_pa, "approximation ratio or 'deploy'")
        ->capture_default_str();
    c_eval->add_option("--epsilon", eval.epsilon, "retention headroom")->capture_default_str();
    c_eval->add_flag("--no-konly", no_konly, "skip the key-approximation variant");
    add_protocol_flags(c_eval, eval.protocol);

    veckv::SweepOptions sweep;
    CLI::App* c_sweep = app.add_subcommand("sweep", "approximation-ratio sweep at fixed p_c");
    c_sweep->add_option("--dump", sweep.dump_path, "input dump")->required();
    c_sweep->add_option("--model", sweep.model_path, "key->value model")->required();
    c_sweep->add_option("--out", sweep.out_csv, "output CSV")->required();
    c_sweep->add_option("--pc", sweep.p_c, "compression ratio")->capture_default_str();
    c_sweep->add_option("--pa-grid", sweep.pa_grid, "explicit p_a grid");
    c_sweep->add_option("--epsilon", sweep.epsilon, "retention headroom")->capture_default_str();
    add_protocol_flags(c_sweep, sweep.protocol);

    veckv::TheoryOptions theory;
    CLI::App* c_theory = app.add_subcommand("theory", "closed-form vs Monte Carlo self-checks");
    c_theory->add_option("--out", theory.out_csv, "output CSV");
    c_theory->add_option("--seed", theory.seed, "seed")->capture_default_str();
    c_theory->add_option("--mc-samples", theory.mc_samples, "Monte Carlo sample count")
        ->capture_default_str();
    c_theory->add_option("--instances", theory.instances, "instances in the agreement study")
        ->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (*c_synth) {
            synth.out_path = synth_out;
            return veckv::cmd_synth(synth, std::cout);
        }
        if (*c_calib) {
            calib.ridge = parse_or_keyword(calib_ridge, "auto", "--ridge");
            calib.direction = calib_direction == "ktov" ? veckv::FitDirection::KtoV
                                                        : veckv::FitDirection::VtoK;
            return veckv::cmd_calibrate(calib, std::cout);
        }
        if (*c_eval) {
            eval.pa = parse_or_keyword(eval_pa, "deploy", "--pa");
            eval.include_konly = !no_konly;
            return veckv::cmd_evaluate(eval, std::cout);
        }
        if (*c_sweep) return veckv::cmd_sweep(sweep, std::cout);
        if (*c_theory) return veckv::cmd_theory(theory, std::cout);
    } catch (const veckv::FormatError& e) {
        std::cerr << "format error: " << e.what() << "\n";
        return 3;
    } catch (const std::invalid_argument& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const std::domain_error& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const std::out_of_range& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    return 2;
}
