#pragma once

#include "veckv/allocator.hpp"
#include "veckv/core.hpp"
#include "veckv/rng.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <stdexcept>
#include <vector>

namespace veckv {

inline double normal_pdf(double x) {
    return std::exp(-0.5 * x * x) * 0.3989422804014326779399461;
}

inline double normal_cdf(double x) {
    return 0.5 * std::erfc(-x * 0.7071067811865475244008444);
}

// Inverse standard normal CDF: rational initial guess refined with one Halley
// step against the erfc-based CDF. Absolute error is far below 1e-10 across
// (0,1), which the closed-form distortion expressions rely on.
inline double normal_quantile(double p) {
    if (!(p > 0.0 && p < 1.0))
        throw std::domain_error("normal_quantile: p outside (0,1)");

    static constexpr double a[6] = {-3.969683028665376e+01, 2.209460984245205e+02,
                                    -2.759285104469687e+02, 1.383577518672690e+02,
                                    -3.066479806614716e+01, 2.506628277459239e+00};
    static constexpr double b[5] = {-5.447609879822406e+01, 1.615858368580409e+02,
                                    -1.556989798598866e+02, 6.680131188771972e+01,
                                    -1.328068155288572e+01};
    static constexpr double c[6] = {-7.784894002430293e-03, -3.223964580411365e-01,
                                    -2.400758277161838e+00, -2.549732539343734e+00,
                                    4.374664141464968e+00,  2.938163982698783e+00};
    static constexpr double d[4] = {7.784695709041462e-03, 3.224671290700398e-01,
                                    2.445134137142996e+00, 3.754408661907416e+00};
    constexpr double p_low = 0.02425;

    double x;
    if (p < p_low) {
        const double q = std::sqrt(-2.0 * std::log(p));
        x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    } else if (p <= 1.0 - p_low) {
        const double q = p - 0.5;
        const double r = q * q;
        x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
            (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
    } else {
        const double q = std::sqrt(-2.0 * std::log(1.0 - p));
        x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    }

    const double e = normal_cdf(x) - p;
    const double u = e * 2.5066282746310005024157652 * std::exp(0.5 * x * x);
    return x - u / (1.0 + 0.5 * x * u);
}

// Weighted token-level loss inputs for one compression decision: normalized
// importance weights and relative value-reconstruction errors in [0,1].
struct DistortionInstance {
    Eigen::VectorXd weights;
    Eigen::VectorXd rel_errors;
    CompressionConfig config;

    DistortionInstance(Eigen::VectorXd w, Eigen::VectorXd e, CompressionConfig cfg)
        : weights(std::move(w)), rel_errors(std::move(e)), config(cfg) {
        if (weights.size() != rel_errors.size() || weights.size() == 0)
            throw std::invalid_argument("distortion: weight/error length mismatch");
        if (weights.minCoeff() < 0.0)
            throw std::invalid_argument("distortion: negative weight");
        if (std::abs(weights.sum() - 1.0) > 1e-9)
            throw std::invalid_argument("distortion: weights must sum to 1");
        if (rel_errors.minCoeff() < 0.0 || rel_errors.maxCoeff() > 1.0)
            throw std::invalid_argument("distortion: rel_errors outside [0,1]");
    }
};

// Proposition-side threshold on the approximation-tier prediction quality.
inline double expansion_threshold(double w_bar, double w_star) {
    if (!(w_bar >= 0.0 && w_star >= 0.0))
        throw std::domain_error("expansion_threshold: negative input");
    if (!(w_bar + w_star > 0.0))
        throw std::domain_error("expansion_threshold: both weights are zero");
    return w_bar / (w_star + w_bar);
}

// Evaluated distortion plus the quantities entering the expansion-benefit
// threshold. w_bar and w_star are both expressed as mass per unit proportion
// (w_star is the boundary token's weight times n), so their ratio is
// n-invariant and uniform importance gives w_star == w_bar. r2_approx weights
// tokens by importance (it reproduces the exact loss sum); r2_approx_mean is
// the unweighted form the first-order threshold statement uses. Both are
// absent when the approximation tier is empty.
struct DistortionReport {
    double E = 0.0;
    double w_bar = 0.0;
    double w_star = 0.0;
    std::optional<double> r2_approx;
    std::optional<double> r2_approx_mean;
    std::optional<double> mu_A;
    double threshold = std::numeric_limits<double>::quiet_NaN();
    bool expansion_beneficial = false;
};

// Exact importance-weighted distortion of a plan over the instance's tokens:
// full weight for evicted tokens, weighted relative error for approximated
// ones, nothing for retained ones.
inline DistortionReport evaluate_distortion(const DistortionInstance& inst,
                                            const CompressionPlan& plan) {
    if (plan.n != inst.weights.size())
        throw std::invalid_argument("evaluate_distortion: plan/instance size mismatch");

    DistortionReport rep;
    double evicted_w = 0.0;
    for (Index i : plan.evicted) {
        evicted_w += inst.weights(i);
        rep.w_star = std::max(rep.w_star, inst.weights(i));
    }
    rep.w_star *= double(plan.n);
    double approx_w = 0.0;
    double approx_loss = 0.0;
    double rel_sum = 0.0;
    for (Index i : plan.approximated) {
        approx_w += inst.weights(i);
        approx_loss += inst.weights(i) * inst.rel_errors(i);
        rel_sum += inst.rel_errors(i);
    }
    rep.E = evicted_w + approx_loss;
    rep.w_bar = (1.0 - evicted_w) / (1.0 - plan.config.p_c + plan.config.p_a);

    if (!plan.approximated.empty()) {
        rep.r2_approx_mean = 1.0 - rel_sum / double(plan.approximated.size());
        if (approx_w > 0.0) {
            rep.r2_approx = 1.0 - approx_loss / approx_w;
            rep.mu_A = 1.0 - *rep.r2_approx;
        }
    }
    if (rep.w_bar + rep.w_star > 0.0) {
        rep.threshold = expansion_threshold(rep.w_bar, rep.w_star);
        rep.expansion_beneficial =
            rep.r2_approx_mean.has_value() && *rep.r2_approx_mean > rep.threshold;
    }
    return rep;
}

struct PropositionCheck {
    bool predicted = false;
    bool observed = false;
    double r2_approx_mean = 0.0;
    double threshold = 0.0;
    double delta_used = 0.0;
    double distortion_before = 0.0;
    double distortion_after = 0.0;
};

// Compares the first-order expansion-benefit prediction against the exact
// discrete outcome: re-plan at p_a and p_a + delta with the importance ranking
// and per-token errors held fixed, and check whether the distortion dropped.
// When delta is omitted it is quantized to the smallest step that moves at
// least one token out of the eviction set.
inline PropositionCheck check_proposition(const DistortionInstance& inst,
                                          const CompressionConfig& cfg,
                                          std::optional<double> delta = std::nullopt) {
    const Index n = inst.weights.size();
    const CompressionPlan before = plan_from_rankings(inst.weights, inst.rel_errors, cfg);
    if (before.approximated.empty())
        throw std::domain_error("check_proposition: empty approximation tier at p_a");
    if (before.evicted.empty())
        throw std::domain_error("check_proposition: nothing to recover from eviction");

    double d;
    if (delta.has_value()) {
        d = *delta;
        if (!(d > 0.0))
            throw std::domain_error("check_proposition: delta must be positive");
    } else {
        // one token leaves the eviction set and two enter the approximation
        // tier, which is the same bookkeeping the first-order argument uses
        d = 1.0 / double(n);
    }

    CompressionConfig expanded = cfg;
    expanded.p_a = cfg.p_a + d;
    const CompressionPlan after = plan_from_rankings(inst.weights, inst.rel_errors, expanded);
    if (after.evicted.size() == before.evicted.size())
        throw std::domain_error("check_proposition: delta moves no token across the boundary");

    const DistortionReport rep_before = evaluate_distortion(inst, before);
    const DistortionReport rep_after = evaluate_distortion(inst, after);

    PropositionCheck out;
    out.r2_approx_mean = rep_before.r2_approx_mean.value_or(0.0);
    out.threshold = rep_before.threshold;
    out.predicted = out.r2_approx_mean > out.threshold;
    out.observed = rep_after.E < rep_before.E;
    out.delta_used = d;
    out.distortion_before = rep_before.E;
    out.distortion_after = rep_after.E;
    return out;
}

struct CurvePoint {
    double p_a = 0.0;
    double E = 0.0;
    double w_bar = 0.0;
    double w_star = 0.0;
    double threshold = 0.0;
};

// Exact distortion along a p_a grid, re-planned at every point.
inline std::vector<CurvePoint> distortion_curve(const DistortionInstance& inst, double p_c,
                                                const std::vector<double>& p_a_grid) {
    std::vector<CurvePoint> out;
    out.reserve(p_a_grid.size());
    for (double pa : p_a_grid) {
        CompressionConfig cfg{p_c, pa, inst.config.epsilon};
        const CompressionPlan plan = plan_from_rankings(inst.weights, inst.rel_errors, cfg);
        const DistortionReport rep = evaluate_distortion(inst, plan);
        out.push_back({pa, rep.E, rep.w_bar, rep.w_star, rep.threshold});
    }
    return out;
}

// Scalar residual model of the closed-form example: signed reconstruction
// residuals r ~ N(0, sigma^2) against value-norm variance Sigma^2.
struct GaussianResidualModel {
    double sigma = 1.0;
    double Sigma = 2.0;
};

inline void check_model(const GaussianResidualModel& m) {
    if (!(m.sigma > 0.0))
        throw std::domain_error("gaussian model: sigma must be positive");
    if (!(m.Sigma * m.Sigma > m.sigma * m.sigma))
        throw std::domain_error("gaussian model: Sigma^2 must exceed sigma^2");
}

// E(X^2 | |X| <= x) for X ~ N(0, sigma^2).
inline double truncated_normal_second_moment(double sigma, double x) {
    if (!(sigma > 0.0) || !(x > 0.0))
        throw std::domain_error("truncated_normal_second_moment: inputs must be positive");
    const double u = x / sigma;
    const double mass = std::erf(u * 0.7071067811865475244008444);  // 2*Phi(u) - 1
    return sigma * sigma * (1.0 - 2.0 * u * normal_pdf(u) / mass);
}

// Closed-form 1 - R^2 over the approximation tier when residuals are Gaussian:
// the tier keeps the central 2*p_a/(1-p_c+p_a) slice of the residual
// distribution, whose second moment follows from the truncated-normal identity.
inline double gaussian_one_minus_r2(const GaussianResidualModel& model,
                                    const CompressionConfig& cfg) {
    check_model(model);
    const double frac = 2.0 * cfg.p_a / (1.0 - cfg.p_c + cfg.p_a);
    if (!(frac > 0.0 && frac < 1.0))
        throw std::domain_error("gaussian_one_minus_r2: tier fraction outside (0,1)");
    const double eta = model.sigma * normal_quantile(0.5 + cfg.p_a / (1.0 - cfg.p_c + cfg.p_a));
    const double u = eta / model.sigma;
    const double ratio = model.sigma * model.sigma / (model.Sigma * model.Sigma);
    return ratio * (1.0 - 2.0 * u * normal_pdf(u) / frac);
}

// Monte Carlo oracle for the truncated second moment.
inline double mc_truncated_second_moment(double sigma, double x, Index n_samples,
                                         std::uint64_t seed) {
    if (!(sigma > 0.0) || !(x > 0.0) || n_samples < 1)
        throw std::domain_error("mc_truncated_second_moment: bad inputs");
    Rng rng(seed);
    double sum = 0.0;
    Index kept = 0;
    for (Index i = 0; i < n_samples; ++i) {
        const double r = sigma * rng.gaussian();
        if (std::abs(r) <= x) {
            sum += r * r;
            ++kept;
        }
    }
    if (kept == 0)
        throw std::runtime_error("mc_truncated_second_moment: no sample satisfied the bound");
    return sum / double(kept);
}

// Monte Carlo oracle for the closed-form 1 - R^2: draw residuals, keep the
// central tier fraction by |r|, average the squares, scale by 1/Sigma^2.
inline double mc_gaussian_one_minus_r2(const GaussianResidualModel& model,
                                       const CompressionConfig& cfg, Index n_samples,
                                       std::uint64_t seed) {
    check_model(model);
    const double frac = 2.0 * cfg.p_a / (1.0 - cfg.p_c + cfg.p_a);
    if (!(frac > 0.0 && frac < 1.0))
        throw std::domain_error("mc_gaussian_one_minus_r2: tier fraction outside (0,1)");
    Rng rng(seed);
    std::vector<double> sq(static_cast<std::size_t>(n_samples));
    for (double& v : sq) {
        const double r = model.sigma * rng.gaussian();
        v = r * r;
    }
    const std::size_t kept = std::max<std::size_t>(1, static_cast<std::size_t>(
                                                          std::llround(frac * double(n_samples))));
    std::nth_element(sq.begin(), sq.begin() + (kept - 1), sq.end());
    double sum = 0.0;
    for (std::size_t i = 0; i < kept; ++i) sum += sq[i];
    return (sum / double(kept)) / (model.Sigma * model.Sigma);
}

} // namespace veckv
