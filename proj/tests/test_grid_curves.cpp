#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "fregsel/grid.hpp"
#include "support/oracles.hpp"

using namespace fregsel;

TEST_CASE("uniform grid and trapezoid weights", "[grid]") {
    const Grid grid = Grid::uniform(0.0, 1.0, 11);
    REQUIRE(grid.size() == 11);
    REQUIRE(grid.spacing == Catch::Approx(0.1));
    const Eigen::VectorXd w = grid.quadrature_weights();
    REQUIRE(w.sum() == Catch::Approx(1.0));
    REQUIRE(w[0] == Catch::Approx(0.05));
    REQUIRE(w[5] == Catch::Approx(0.1));

    // constant function integrates to the interval length
    REQUIRE(quad_inner(Eigen::VectorXd::Ones(11), Eigen::VectorXd::Ones(11), grid) ==
            Catch::Approx(1.0));
}

TEST_CASE("grid validation", "[grid]") {
    REQUIRE_THROWS_AS(Grid::uniform(0.0, 1.0, 2), ValidationError);
    Eigen::VectorXd bad(4);
    bad << 0.0, 0.2, 0.3, 1.0;  // nonuniform
    REQUIRE_THROWS_AS(Grid(bad), ValidationError);
    Eigen::VectorXd decreasing(3);
    decreasing << 0.0, -0.1, -0.2;
    REQUIRE_THROWS_AS(Grid(decreasing), ValidationError);
}

TEST_CASE("standardize maps symmetric pair to unit curves", "[grid]") {
    const Grid grid = Grid::uniform(0.0, 1.0, 7);
    const double c = 3.25;
    Eigen::MatrixXd vals(2, 7);
    vals.row(0).setConstant(c);
    vals.row(1).setConstant(-c);
    auto [std_curves, rec] = standardize(CurveSet(vals, grid));
    REQUIRE((std_curves.values.row(0).array() - 1.0).abs().maxCoeff() < 1e-14);
    REQUIRE((std_curves.values.row(1).array() + 1.0).abs().maxCoeff() < 1e-14);
    REQUIRE(rec.ave.cwiseAbs().maxCoeff() < 1e-14);
    REQUIRE((rec.sd.array() - c).abs().maxCoeff() < 1e-12);
}

TEST_CASE("standardize is idempotent", "[grid]") {
    std::mt19937_64 rng(11);
    const Grid grid = Grid::uniform(0.0, 1.0, 9);
    const CurveSet curves(oracles::randn(6, 9, rng), grid);
    auto [once, rec1] = standardize(curves);
    auto [twice, rec2] = standardize(once);
    REQUIRE((once.values - twice.values).cwiseAbs().maxCoeff() < 1e-10);
    REQUIRE(rec2.ave.cwiseAbs().maxCoeff() < 1e-10);
    REQUIRE((rec2.sd.array() - 1.0).abs().maxCoeff() < 1e-10);
}

TEST_CASE("standardized columns have mean 0 and sd 1", "[grid]") {
    std::mt19937_64 rng(17);
    const Grid grid = Grid::uniform(0.0, 1.0, 11);
    Eigen::MatrixXd vals = oracles::randn(5, 11, rng, 2.0);
    vals.array().rowwise() += Eigen::RowVectorXd::LinSpaced(11, -1.0, 4.0).array();
    auto [out, rec] = standardize(CurveSet(vals, grid));
    // recompute the moments directly on the output
    for (int t = 0; t < 11; ++t) {
        const Eigen::VectorXd col = out.values.col(t);
        const double mean = col.mean();
        const double sd = std::sqrt((col.array() - mean).square().mean());
        REQUIRE(std::abs(mean) < 1e-10);
        REQUIRE(std::abs(sd - 1.0) < 1e-10);
    }
}

TEST_CASE("standardize rejects constant coordinates", "[grid]") {
    const Grid grid = Grid::uniform(0.0, 1.0, 5);
    Eigen::MatrixXd vals(3, 5);
    vals.setRandom();
    vals.col(2).setConstant(7.0);  // degenerate coordinate
    REQUIRE_THROWS_AS(standardize(CurveSet(vals, grid)), DegenerateVarianceError);
}

TEST_CASE("apply_standardization reuses training moments", "[grid]") {
    std::mt19937_64 rng(23);
    const Grid grid = Grid::uniform(0.0, 1.0, 8);
    const CurveSet train(oracles::randn(10, 8, rng), grid);
    auto [train_std, rec] = standardize(train);
    const CurveSet test(oracles::randn(4, 8, rng), grid);
    const CurveSet test_std = apply_standardization(test, rec);
    for (int i = 0; i < 4; ++i)
        for (int t = 0; t < 8; ++t)
            REQUIRE(test_std.values(i, t) ==
                    Catch::Approx((test.values(i, t) - rec.ave[t]) / rec.sd[t]));
}
