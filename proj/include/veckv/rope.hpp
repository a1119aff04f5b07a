#pragma once

#include <Eigen/Core>

#include <cmath>
#include <stdexcept>

namespace veckv {

// Coordinate pairing used by the rotation. HalfSplit pairs (x_j, x_{j+D/2}),
// Interleaved pairs (x_{2j}, x_{2j+1}); both appear in deployed models.
enum class RopeLayout { HalfSplit, Interleaved };

// Precomputed rotary position tables for one head dimension. Rotation at
// position m turns each coordinate pair by m * base^(-2j/head_dim); position 0
// is the identity and every rotation is orthogonal.
template <typename Scalar = double>
class RopeTable {
public:
    RopeTable(Eigen::Index head_dim, Eigen::Index max_positions,
              Scalar base = Scalar(10000), RopeLayout layout = RopeLayout::HalfSplit)
        : head_dim_(head_dim), max_positions_(max_positions), base_(base), layout_(layout) {
        if (head_dim <= 0 || head_dim % 2 != 0)
            throw std::invalid_argument("rope: head_dim must be even and positive");
        if (max_positions <= 0)
            throw std::invalid_argument("rope: max_positions must be positive");
        if (!(base > Scalar(0)))
            throw std::invalid_argument("rope: base must be positive");
        const Eigen::Index pairs = head_dim / 2;
        cos_.resize(max_positions, pairs);
        sin_.resize(max_positions, pairs);
        for (Eigen::Index j = 0; j < pairs; ++j) {
            const Scalar freq = std::pow(base, -Scalar(2 * j) / Scalar(head_dim));
            for (Eigen::Index m = 0; m < max_positions; ++m) {
                const Scalar angle = Scalar(m) * freq;
                cos_(m, j) = std::cos(angle);
                sin_(m, j) = std::sin(angle);
            }
        }
    }

    Eigen::Index head_dim() const { return head_dim_; }
    Eigen::Index max_positions() const { return max_positions_; }
    Scalar base() const { return base_; }
    RopeLayout layout() const { return layout_; }

    // R_m * vec
    template <typename Derived>
    Eigen::Vector<Scalar, Eigen::Dynamic> apply(const Eigen::MatrixBase<Derived>& vec,
                                                Eigen::Index m) const {
        return rotate(vec, m, /*inverse=*/false);
    }

    // R_m^{-1} * vec, implemented as rotation by the negated angle
    template <typename Derived>
    Eigen::Vector<Scalar, Eigen::Dynamic> invert(const Eigen::MatrixBase<Derived>& vec,
                                                 Eigen::Index m) const {
        return rotate(vec, m, /*inverse=*/true);
    }

    // Rotates each head-sized block of a flattened multi-head vector.
    template <typename Derived>
    Eigen::Vector<Scalar, Eigen::Dynamic> apply_blocked(const Eigen::MatrixBase<Derived>& vec,
                                                        Eigen::Index m) const {
        return rotate_blocked(vec, m, /*inverse=*/false);
    }

    template <typename Derived>
    Eigen::Vector<Scalar, Eigen::Dynamic> invert_blocked(const Eigen::MatrixBase<Derived>& vec,
                                                         Eigen::Index m) const {
        return rotate_blocked(vec, m, /*inverse=*/true);
    }

private:
    template <typename Derived>
    Eigen::Vector<Scalar, Eigen::Dynamic> rotate(const Eigen::MatrixBase<Derived>& vec,
                                                 Eigen::Index m, bool inverse) const {
        if (vec.size() != head_dim_)
            throw std::invalid_argument("rope: vector size does not match head_dim");
        check_position(m);
        Eigen::Vector<Scalar, Eigen::Dynamic> out(head_dim_);
        const Eigen::Index pairs = head_dim_ / 2;
        for (Eigen::Index j = 0; j < pairs; ++j) {
            const Scalar c = cos_(m, j);
            const Scalar s = inverse ? -sin_(m, j) : sin_(m, j);
            const Eigen::Index a = layout_ == RopeLayout::HalfSplit ? j : 2 * j;
            const Eigen::Index b = layout_ == RopeLayout::HalfSplit ? j + pairs : 2 * j + 1;
            const Scalar x = vec(a);
            const Scalar y = vec(b);
            out(a) = c * x - s * y;
            out(b) = s * x + c * y;
        }
        return out;
    }

    template <typename Derived>
    Eigen::Vector<Scalar, Eigen::Dynamic> rotate_blocked(const Eigen::MatrixBase<Derived>& vec,
                                                         Eigen::Index m, bool inverse) const {
        if (vec.size() % head_dim_ != 0)
            throw std::invalid_argument("rope: vector size not a multiple of head_dim");
        Eigen::Vector<Scalar, Eigen::Dynamic> out(vec.size());
        for (Eigen::Index h = 0; h < vec.size() / head_dim_; ++h)
            out.segment(h * head_dim_, head_dim_) =
                rotate(vec.segment(h * head_dim_, head_dim_).eval(), m, inverse);
        return out;
    }

    void check_position(Eigen::Index m) const {
        if (m < 0 || m >= max_positions_)
            throw std::out_of_range("rope: position out of range");
    }

    Eigen::Index head_dim_;
    Eigen::Index max_positions_;
    Scalar base_;
    RopeLayout layout_;
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> cos_;
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> sin_;
};

using RopeTabled = RopeTable<double>;
using RopeTablef = RopeTable<float>;

// Rotates consecutive coordinate pairs of `vec` by the given per-pair angles.
// This is the primitive both apply() and invert() reduce to.
template <typename DerivedV, typename DerivedA>
Eigen::Vector<typename DerivedV::Scalar, Eigen::Dynamic>
rotate_pairs(const Eigen::MatrixBase<DerivedV>& vec, const Eigen::MatrixBase<DerivedA>& angles,
             RopeLayout layout = RopeLayout::HalfSplit) {
    using Scalar = typename DerivedV::Scalar;
    if (vec.size() % 2 != 0)
        throw std::invalid_argument("rotate_pairs: odd dimension");
    const Eigen::Index pairs = vec.size() / 2;
    if (angles.size() != pairs)
        throw std::invalid_argument("rotate_pairs: one angle per coordinate pair required");
    Eigen::Vector<Scalar, Eigen::Dynamic> out(vec.size());
    for (Eigen::Index j = 0; j < pairs; ++j) {
        const Scalar c = std::cos(angles(j));
        const Scalar s = std::sin(angles(j));
        const Eigen::Index a = layout == RopeLayout::HalfSplit ? j : 2 * j;
        const Eigen::Index b = layout == RopeLayout::HalfSplit ? j + pairs : 2 * j + 1;
        out(a) = c * vec(a) - s * vec(b);
        out(b) = s * vec(a) + c * vec(b);
    }
    return out;
}

} // namespace veckv
