#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "veckv/core.hpp"
#include "veckv/regression.hpp"
#include "veckv/rng.hpp"
#include "veckv/rope.hpp"

#include <Eigen/Dense>

#include <cmath>

using namespace veckv;

namespace {

Eigen::VectorXd random_vec(Rng& rng, Index n) {
    Eigen::VectorXd v(n);
    for (Index i = 0; i < n; ++i) v(i) = rng.gaussian();
    return v;
}

} // namespace

TEST_CASE("quarter rotation of a coordinate pair") {
    Eigen::Vector2d v(1.0, 0.0);
    Eigen::VectorXd angles(1);
    angles << M_PI / 2.0;
    const Eigen::VectorXd r = rotate_pairs(v, angles);
    CHECK(std::abs(r(0)) <= 1e-12);
    CHECK(r(1) == doctest::Approx(1.0));
}

TEST_CASE("position zero is the identity") {
    RopeTabled table(8, 64);
    Rng rng(3);
    const Eigen::VectorXd v = random_vec(rng, 8);
    CHECK((table.apply(v, 0) - v).cwiseAbs().maxCoeff() == 0.0);
    CHECK((table.invert(v, 0) - v).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("rotations preserve the norm") {
    RopeTabled table(16, 512);
    Rng rng(5);
    for (int t = 0; t < 100; ++t) {
        const Eigen::VectorXd v = random_vec(rng, 16);
        const Index m = static_cast<Index>(rng.next_u64() % 512);
        CHECK(table.apply(v, m).norm() == doctest::Approx(v.norm()).epsilon(1e-6));
    }
}

TEST_CASE("invert undoes apply within 1e-6") {
    for (RopeLayout layout : {RopeLayout::HalfSplit, RopeLayout::Interleaved}) {
        RopeTabled table(8, 1024, 10000.0, layout);
        Rng rng(9);
        for (int t = 0; t < 200; ++t) {
            const Eigen::VectorXd v = random_vec(rng, 8);
            const Index m = static_cast<Index>(rng.next_u64() % 1024);
            const Eigen::VectorXd back = table.invert(table.apply(v, m), m);
            CHECK((back - v).cwiseAbs().maxCoeff() <= 1e-6);
        }
    }
}

TEST_CASE("invert equals rotation by the negated angles") {
    RopeTabled table(6, 128);
    Rng rng(13);
    const Eigen::VectorXd v = random_vec(rng, 6);
    const Index m = 37;
    Eigen::VectorXd angles(3);
    for (Index j = 0; j < 3; ++j)
        angles(j) = -double(m) * std::pow(10000.0, -double(2 * j) / 6.0);
    const Eigen::VectorXd via_negated = rotate_pairs(v, angles);
    CHECK((table.invert(v, m) - via_negated).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("composing rotations adds their angles") {
    RopeTabled table(8, 256);
    Rng rng(17);
    const Eigen::VectorXd v = random_vec(rng, 8);
    for (auto [m1, m2] : {std::pair<Index, Index>{3, 11}, {50, 70}, {1, 254}}) {
        const Eigen::VectorXd two_step = table.apply(table.apply(v, m1), m2);
        const Eigen::VectorXd one_step = table.apply(v, m1 + m2);
        CHECK((two_step - one_step).cwiseAbs().maxCoeff() <= 1e-9);
    }
}

TEST_CASE("layouts pair different coordinates") {
    RopeTabled half(4, 16, 10000.0, RopeLayout::HalfSplit);
    RopeTabled inter(4, 16, 10000.0, RopeLayout::Interleaved);
    Eigen::VectorXd v(4);
    v << 1.0, 2.0, 3.0, 4.0;
    CHECK((half.apply(v, 5) - inter.apply(v, 5)).cwiseAbs().maxCoeff() > 1e-6);
}

TEST_CASE("decoupled keys feed a static estimator at any position") {
    // value = W_true * pre-rotation key; caching rotates the key, inverting the
    // rotation before the static map must leave zero residual at any position
    Rng rng(21);
    const Index d_k = 8, d_v = 4;
    Eigen::MatrixXd w_true(d_v, d_k);
    for (Index i = 0; i < d_v; ++i) w_true.row(i) = random_vec(rng, d_k).transpose();
    CalibrationModeld model;
    model.weights = w_true;

    RopeTabled table(d_k, 4096);
    for (Index m : {Index(0), Index(17), Index(900), Index(4095)}) {
        const Eigen::VectorXd key_pre = random_vec(rng, d_k);
        const Eigen::VectorXd value = w_true * key_pre;
        const Eigen::VectorXd cached = table.apply(key_pre, m);
        const Eigen::VectorXd decoupled = table.invert(cached, m);
        const Eigen::VectorXd eps = per_token_residuals(model, decoupled, value);
        CHECK(eps(0) <= 1e-12);
    }
}

TEST_CASE("table construction and bounds are checked") {
    CHECK_THROWS_AS(RopeTabled(7, 16), std::invalid_argument);
    CHECK_THROWS_AS(RopeTabled(0, 16), std::invalid_argument);
    CHECK_THROWS_AS(RopeTabled(8, 0), std::invalid_argument);
    RopeTabled table(8, 16);
    Rng rng(1);
    const Eigen::VectorXd v = random_vec(rng, 8);
    CHECK_THROWS_AS(table.apply(v, 16), std::out_of_range);
    CHECK_THROWS_AS(table.apply(v, -1), std::out_of_range);
    CHECK_THROWS_AS(table.apply(random_vec(rng, 6), 3), std::invalid_argument);
}

TEST_CASE("blocked application rotates each head independently") {
    RopeTabled table(4, 32);
    Rng rng(29);
    const Eigen::VectorXd v = random_vec(rng, 8);
    const Eigen::VectorXd rotated = table.apply_blocked(v, 7);
    CHECK((rotated.segment(0, 4) - table.apply(v.segment(0, 4).eval(), 7)).norm() == 0.0);
    CHECK((rotated.segment(4, 4) - table.apply(v.segment(4, 4).eval(), 7)).norm() == 0.0);
    CHECK((table.invert_blocked(rotated, 7) - v).cwiseAbs().maxCoeff() <= 1e-12);
    CHECK_THROWS_AS(table.apply_blocked(random_vec(rng, 6), 1), std::invalid_argument);
}
