#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

namespace veckv {

// Direction of a calibrated linear map between cached keys and values.
enum class FitDirection { KtoV, VtoK };

// Streaming sufficient statistics for the key->value least-squares fit.
// Vectors are columns: a batch of n tokens is a dim x n matrix. Shards can be
// accumulated independently and merged; merging is an entrywise sum.
//
// sum_xxT / sum_yxT are the Gram terms of the normal equations; the extra
// sum_y / sum_ysq terms carry what is needed to report the training R^2.
template <typename Scalar = double>
struct GramAccumulator {
    using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
    using Vector = Eigen::Vector<Scalar, Eigen::Dynamic>;

    Matrix sum_xxT;   // in_dim  x in_dim, symmetric PSD
    Matrix sum_yxT;   // out_dim x in_dim
    Vector sum_y;     // out_dim
    Scalar sum_ysq = Scalar(0);
    Eigen::Index count = 0;

    GramAccumulator(Eigen::Index in_dim, Eigen::Index out_dim)
        : sum_xxT(Matrix::Zero(in_dim, in_dim)),
          sum_yxT(Matrix::Zero(out_dim, in_dim)),
          sum_y(Vector::Zero(out_dim)) {}

    Eigen::Index in_dim() const { return sum_xxT.rows(); }
    Eigen::Index out_dim() const { return sum_yxT.rows(); }
};

// Adds a batch of (input, target) token pairs to the accumulator.
template <typename Scalar, typename DerivedX, typename DerivedY>
void accumulate(GramAccumulator<Scalar>& acc, const Eigen::MatrixBase<DerivedX>& inputs,
                const Eigen::MatrixBase<DerivedY>& targets) {
    if (inputs.cols() != targets.cols())
        throw std::invalid_argument("accumulate: batch sizes differ");
    if (inputs.rows() != acc.in_dim() || targets.rows() != acc.out_dim())
        throw std::invalid_argument("accumulate: dimension mismatch");
    if (inputs.cols() == 0) return;
    acc.sum_xxT.noalias() += inputs * inputs.transpose();
    acc.sum_yxT.noalias() += targets * inputs.transpose();
    acc.sum_y += targets.rowwise().sum();
    acc.sum_ysq += targets.squaredNorm();
    acc.count += inputs.cols();
}

// Entrywise sum of two shards.
template <typename Scalar>
GramAccumulator<Scalar> merge(const GramAccumulator<Scalar>& a, const GramAccumulator<Scalar>& b) {
    if (a.in_dim() != b.in_dim() || a.out_dim() != b.out_dim())
        throw std::invalid_argument("merge: accumulator dimensions differ");
    GramAccumulator<Scalar> out = a;
    out.sum_xxT += b.sum_xxT;
    out.sum_yxT += b.sum_yxT;
    out.sum_y += b.sum_y;
    out.sum_ysq += b.sum_ysq;
    out.count += b.count;
    return out;
}

// Calibrated linear estimator W (out_dim x in_dim) with fit diagnostics.
// For KtoV the map predicts values from de-rotated keys; VtoK is the mirror
// estimator used by the key-approximation ablation. test_r2 is NaN until a
// held-out evaluation fills it in.
template <typename Scalar = double>
struct CalibrationModel {
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> weights;
    FitDirection direction = FitDirection::KtoV;
    Scalar ridge = Scalar(0);
    Scalar train_r2 = std::numeric_limits<Scalar>::quiet_NaN();
    Scalar test_r2 = std::numeric_limits<Scalar>::quiet_NaN();

    Eigen::Index in_dim() const { return weights.cols(); }
    Eigen::Index out_dim() const { return weights.rows(); }
};

using CalibrationModeld = CalibrationModel<double>;

// Default ridge guard for near-singular Grams: 1e-6 * mean diagonal scale.
// Zero stays selectable for exact-recovery use.
template <typename Scalar>
Scalar default_ridge(const GramAccumulator<Scalar>& acc) {
    if (acc.count == 0) return Scalar(0);
    return Scalar(1e-6) * acc.sum_xxT.trace() / (Scalar(acc.in_dim()) * Scalar(acc.count));
}

// Solves the normal equations W * sum_xxT = sum_yxT (ridge-augmented when
// lambda > 0) via LDLT. With lambda = 0 a rank-deficient Gram is an error.
template <typename Scalar>
CalibrationModel<Scalar> solve_ols(const GramAccumulator<Scalar>& acc, Scalar ridge,
                                   FitDirection direction = FitDirection::KtoV) {
    if (acc.count < 1)
        throw std::invalid_argument("solve_ols: empty accumulator");
    if (!(ridge >= Scalar(0)))
        throw std::invalid_argument("solve_ols: negative ridge");

    using Matrix = typename GramAccumulator<Scalar>::Matrix;
    Matrix gram = acc.sum_xxT;
    if (ridge > Scalar(0))
        gram.diagonal().array() += ridge * Scalar(acc.count);

    Eigen::LDLT<Matrix> ldlt(gram);
    const auto d = ldlt.vectorD();
    const Scalar dmax = d.maxCoeff();
    const Scalar tol = Scalar(acc.in_dim()) * std::numeric_limits<Scalar>::epsilon();
    if (ldlt.info() != Eigen::Success || !(dmax > Scalar(0)) || d.minCoeff() <= dmax * tol)
        throw std::runtime_error("solve_ols: singular Gram matrix (rank-deficient at this ridge)");

    CalibrationModel<Scalar> model;
    model.weights = ldlt.solve(acc.sum_yxT.transpose()).transpose();
    model.direction = direction;
    model.ridge = ridge;

    // training R^2 from the same sufficient statistics
    const Scalar sse = acc.sum_ysq - Scalar(2) * (model.weights.cwiseProduct(acc.sum_yxT)).sum() +
                       (model.weights * acc.sum_xxT).cwiseProduct(model.weights).sum();
    const Scalar sst = acc.sum_ysq - acc.sum_y.squaredNorm() / Scalar(acc.count);
    model.train_r2 = sst > Scalar(0) ? Scalar(1) - sse / sst
                                     : std::numeric_limits<Scalar>::quiet_NaN();
    return model;
}

template <typename Scalar>
CalibrationModel<Scalar> solve_ols(const GramAccumulator<Scalar>& acc) {
    return solve_ols(acc, default_ridge(acc));
}

// The true projection matrices K = w_k h, V = w_v h of one layer, sharing the
// hidden dimension. Input to the analytical pseudo-inverse baseline.
template <typename Scalar = double>
struct ProjectionPair {
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> w_k;  // d_k x d
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> w_v;  // d_v x d
};

using ProjectionPaird = ProjectionPair<double>;

// Analytical key->value estimator W = w_v * w_k^T (w_k w_k^T)^{-1}. It inverts
// the key projection in the minimum-norm sense and then reprojects, which
// optimizes key-space error rather than value-prediction error.
template <typename Scalar>
CalibrationModel<Scalar> mp_pseudoinverse(const ProjectionPair<Scalar>& pair) {
    if (pair.w_k.cols() != pair.w_v.cols())
        throw std::invalid_argument("mp_pseudoinverse: hidden dimensions differ");
    if (pair.w_k.rows() > pair.w_k.cols())
        throw std::invalid_argument("mp_pseudoinverse: key projection has more rows than columns");

    using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
    Matrix kkT = pair.w_k * pair.w_k.transpose();
    Eigen::LDLT<Matrix> ldlt(kkT);
    const auto d = ldlt.vectorD();
    const Scalar dmax = d.maxCoeff();
    const Scalar tol = Scalar(kkT.rows()) * std::numeric_limits<Scalar>::epsilon();
    if (ldlt.info() != Eigen::Success || !(dmax > Scalar(0)) || d.minCoeff() <= dmax * tol)
        throw std::runtime_error("mp_pseudoinverse: key projection is row-rank-deficient");

    CalibrationModel<Scalar> model;
    // W = w_v * (w_k^T (w_k w_k^T)^{-1}); solve on the right factor
    model.weights = pair.w_v * ldlt.solve(pair.w_k).transpose();
    model.direction = FitDirection::KtoV;
    model.ridge = Scalar(0);
    return model;
}

// Pooled coefficient of determination over all tokens and output dimensions:
// 1 - SSE/SST with SST around the per-dimension mean target. May be negative;
// a constant target set is an error.
template <typename Scalar, typename DerivedX, typename DerivedY>
Scalar r_squared(const CalibrationModel<Scalar>& model, const Eigen::MatrixBase<DerivedX>& inputs,
                 const Eigen::MatrixBase<DerivedY>& targets) {
    if (inputs.cols() != targets.cols() || inputs.cols() == 0)
        throw std::invalid_argument("r_squared: need a non-empty matched evaluation set");
    if (inputs.rows() != model.in_dim() || targets.rows() != model.out_dim())
        throw std::invalid_argument("r_squared: dimension mismatch");
    const Scalar sse = (targets - model.weights * inputs).squaredNorm();
    const auto mean = targets.rowwise().mean().eval();
    const Scalar sst = (targets.colwise() - mean).squaredNorm();
    if (!(sst > Scalar(0)))
        throw std::domain_error("r_squared: constant targets (SST = 0)");
    return Scalar(1) - sse / sst;
}

// Squared-norm prediction residual per token, order-preserving.
template <typename Scalar, typename DerivedX, typename DerivedY>
Eigen::Vector<Scalar, Eigen::Dynamic> per_token_residuals(const CalibrationModel<Scalar>& model,
                                                          const Eigen::MatrixBase<DerivedX>& inputs,
                                                          const Eigen::MatrixBase<DerivedY>& targets) {
    if (inputs.cols() != targets.cols())
        throw std::invalid_argument("per_token_residuals: batch sizes differ");
    if (inputs.rows() != model.in_dim() || targets.rows() != model.out_dim())
        throw std::invalid_argument("per_token_residuals: dimension mismatch");
    return (targets - model.weights * inputs).colwise().squaredNorm().transpose();
}

// Per-head fit over flattened head blocks: solves one system per head and
// assembles the block-diagonal map, so the result is a drop-in CalibrationModel.
template <typename Scalar, typename DerivedX, typename DerivedY>
CalibrationModel<Scalar> solve_ols_per_head(const Eigen::MatrixBase<DerivedX>& inputs,
                                            const Eigen::MatrixBase<DerivedY>& targets,
                                            Eigen::Index n_heads, Scalar ridge,
                                            FitDirection direction = FitDirection::KtoV) {
    if (n_heads <= 0 || inputs.rows() % n_heads != 0 || targets.rows() % n_heads != 0)
        throw std::invalid_argument("solve_ols_per_head: dimensions not divisible by head count");
    const Eigen::Index in_h = inputs.rows() / n_heads;
    const Eigen::Index out_h = targets.rows() / n_heads;
    CalibrationModel<Scalar> model;
    model.weights.setZero(targets.rows(), inputs.rows());
    model.direction = direction;
    model.ridge = ridge;
    for (Eigen::Index h = 0; h < n_heads; ++h) {
        GramAccumulator<Scalar> acc(in_h, out_h);
        accumulate(acc, inputs.middleRows(h * in_h, in_h).eval(),
                   targets.middleRows(h * out_h, out_h).eval());
        model.weights.block(h * out_h, h * in_h, out_h, in_h) =
            solve_ols(acc, ridge, direction).weights;
    }
    return model;
}

} // namespace veckv
