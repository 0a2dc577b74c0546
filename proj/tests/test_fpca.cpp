#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "fregsel/fpca.hpp"
#include "fregsel/simulate.hpp"
#include "support/oracles.hpp"

using namespace fregsel;

namespace {

CurveSet centered(Eigen::MatrixXd vals, const Grid& grid) {
    vals.rowwise() -= vals.colwise().mean();
    return CurveSet(std::move(vals), grid);
}

double quad_dot(const Eigen::VectorXd& f, const Eigen::VectorXd& g, const Grid& grid) {
    // independent trapezoid loop
    double acc = 0.0;
    const double h = grid.spacing;
    for (int i = 0; i + 1 < grid.size(); ++i)
        acc += 0.5 * h * (f[i] * g[i] + f[i + 1] * g[i + 1]);
    return acc;
}

}  // namespace

TEST_CASE("rank-one sample gives a single component", "[fpca]") {
    const Grid grid = Grid::uniform(0.0, 1.0, 21);
    Eigen::VectorXd f(21);
    for (int i = 0; i < 21; ++i) f[i] = std::sin(2.0 * M_PI * grid.points[i]) + 0.3;
    Eigen::MatrixXd vals(4, 21);
    vals.row(0) = 1.0 * f.transpose();
    vals.row(1) = -2.0 * f.transpose();
    vals.row(2) = 0.5 * f.transpose();
    vals.row(3) = 0.5 * f.transpose();
    const FpcBasis basis = compute_fpc(CurveSet(vals, grid), 0.9, 10);
    REQUIRE(basis.k() == 1);
    REQUIRE(basis.explained_variance[0] == Catch::Approx(1.0));
    // e1 = +- f / ||f||_quad
    const double fn = quad_norm(f, grid);
    const double align = std::abs(quad_dot(basis.functions.col(0), f, grid)) / fn;
    REQUIRE(align == Catch::Approx(1.0).margin(1e-8));
}

TEST_CASE("variance threshold 1 keeps the full rank", "[fpca]") {
    std::mt19937_64 rng(5);
    const Grid grid = Grid::uniform(0.0, 1.0, 15);
    Eigen::MatrixXd basis_vecs = oracles::randn(3, 15, rng);
    Eigen::MatrixXd coef = oracles::randn(8, 3, rng);
    const FpcBasis basis = compute_fpc(centered(coef * basis_vecs, grid), 1.0, 10);
    REQUIRE(basis.k() == 3);
}

TEST_CASE("matern sample matches a dense eigensolver oracle", "[fpca]") {
    const Grid grid = Grid::uniform(0.0, 1.0, 60);
    const CurveSet raw = sample_gp(50, grid, MaternParams{1.0, 0.25, 3.5}, 99);
    const CurveSet curves = centered(raw.values, grid);

    const FpcBasis basis = compute_fpc(curves, 0.90, 10);

    // oracle: dense symmetric eigensolve of the quadrature-weighted m x m
    // covariance matrix (the library picks the n x n Gram route when n < m)
    const Eigen::VectorXd w = grid.quadrature_weights();
    const Eigen::VectorXd sqw = w.cwiseSqrt();
    Eigen::MatrixXd C = curves.values.transpose() * curves.values / curves.n();
    Eigen::MatrixXd M = sqw.asDiagonal() * C * sqw.asDiagonal();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(((M + M.transpose()) / 2).eval());
    Eigen::VectorXd evals = es.eigenvalues().reverse();
    const double total = evals.cwiseMax(0.0).sum();
    int k_oracle = 0;
    double acc = 0.0;
    while (acc / total < 0.90) acc += evals[k_oracle++];
    REQUIRE(basis.k() == k_oracle);
    for (int i = 0; i < basis.k(); ++i)
        REQUIRE(basis.eigenvalues[i] == Catch::Approx(evals[i]).epsilon(1e-8));
}

TEST_CASE("basis is quadrature-orthonormal", "[fpca]") {
    std::mt19937_64 rng(7);
    const Grid grid = Grid::uniform(0.0, 1.0, 40);
    const FpcBasis basis = compute_fpc(centered(oracles::randn(25, 40, rng), grid), 0.99, 10);
    const Eigen::VectorXd w = grid.quadrature_weights();
    const Eigen::MatrixXd G =
        basis.functions.transpose() * w.asDiagonal() * basis.functions;
    const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(basis.k(), basis.k());
    REQUIRE((G - I).cwiseAbs().maxCoeff() <= 1e-6);
}

TEST_CASE("parseval holds for curves in the span", "[fpca]") {
    std::mt19937_64 rng(13);
    const Grid grid = Grid::uniform(0.0, 1.0, 30);
    const FpcBasis basis = compute_fpc(centered(oracles::randn(20, 30, rng), grid), 0.95, 6);
    const Eigen::VectorXd coefs = oracles::randn(basis.k(), 1, rng).col(0);
    const Eigen::VectorXd f = basis.functions * coefs;
    CurveSet one(f.transpose(), grid);
    const Eigen::MatrixXd scores = project(one, basis);
    REQUIRE(std::abs(quad_norm(f, grid) * quad_norm(f, grid) - scores.squaredNorm()) < 1e-8);
}

TEST_CASE("projection oracle and edge cases", "[fpca]") {
    std::mt19937_64 rng(19);
    const Grid grid = Grid::uniform(0.0, 1.0, 25);
    const FpcBasis basis = compute_fpc(centered(oracles::randn(18, 25, rng), grid), 0.99, 4);
    REQUIRE(basis.k() >= 2);

    // a curve equal to e2 projects onto the second unit row
    CurveSet e2(basis.functions.col(1).transpose(), grid);
    const Eigen::MatrixXd s2 = project(e2, basis);
    for (int j = 0; j < basis.k(); ++j)
        REQUIRE(s2(0, j) == Catch::Approx(j == 1 ? 1.0 : 0.0).margin(1e-6));

    CurveSet zero(Eigen::MatrixXd::Zero(1, 25), grid);
    REQUIRE(project(zero, basis).cwiseAbs().maxCoeff() == 0.0);

    const Eigen::MatrixXd curve = oracles::randn(1, 25, rng);
    const Eigen::MatrixXd scores = project(CurveSet(curve, grid), basis);
    for (int j = 0; j < basis.k(); ++j)
        REQUIRE(scores(0, j) ==
                Catch::Approx(quad_dot(curve.row(0), basis.functions.col(j), grid))
                    .margin(1e-8));

    const Grid other = Grid::uniform(0.0, 1.0, 26);
    REQUIRE_THROWS_AS(project(CurveSet(Eigen::MatrixXd::Zero(1, 26), other), basis),
                      GridMismatchError);
}

TEST_CASE("surface reconstruction matches the double-sum oracle", "[fpca]") {
    std::mt19937_64 rng(29);
    const Grid grid = Grid::uniform(0.0, 1.0, 18);
    const FpcBasis basis = compute_fpc(centered(oracles::randn(12, 18, rng), grid), 0.999, 3);
    const int k = basis.k();

    REQUIRE(reconstruct_surface(Eigen::MatrixXd::Zero(k, k), basis).cwiseAbs().maxCoeff() ==
            0.0);

    Eigen::MatrixXd single = Eigen::MatrixXd::Zero(k, k);
    single(0, 0) = 1.0;
    const Eigen::MatrixXd s1 = reconstruct_surface(single, basis);
    for (int a = 0; a < 18; ++a)
        for (int b = 0; b < 18; ++b)
            REQUIRE(s1(a, b) ==
                    Catch::Approx(basis.functions(a, 0) * basis.functions(b, 0)).margin(1e-12));

    const Eigen::MatrixXd B = oracles::randn(k, k, rng);
    const Eigen::MatrixXd surf = reconstruct_surface(B, basis);
    for (int t = 0; t < 18; ++t)
        for (int s = 0; s < 18; ++s) {
            double acc = 0.0;
            for (int a = 0; a < k; ++a)
                for (int b = 0; b < k; ++b)
                    acc += basis.functions(t, a) * B(a, b) * basis.functions(s, b);
            REQUIRE(surf(t, s) == Catch::Approx(acc).margin(1e-10));
        }

    REQUIRE_THROWS_AS(reconstruct_surface(Eigen::MatrixXd::Zero(k + 1, k + 1), basis),
                      DimensionMismatchError);
}

TEST_CASE("build_design projects every feature on the response basis", "[fpca]") {
    std::mt19937_64 rng(31);
    const Grid grid = Grid::uniform(0.0, 1.0, 22);
    const CurveSet response = centered(oracles::randn(15, 22, rng), grid);

    SECTION("a feature identical to the response reproduces Y") {
        auto [design, basis] = build_design(response, {response}, 0.9, 5);
        REQUIRE(design.p == 1);
        REQUIRE((design.X - design.Y).cwiseAbs().maxCoeff() < 1e-12);
    }

    SECTION("a feature orthogonal to the basis gives a zero block") {
        auto [design0, basis] = build_design(response, {response}, 0.9, 3);
        // build a feature from the orthogonal complement of the basis span
        const Eigen::VectorXd w = grid.quadrature_weights();
        Eigen::MatrixXd raw = oracles::randn(15, 22, rng);
        Eigen::MatrixXd proj = raw;
        for (int i = 0; i < 15; ++i) {
            Eigen::VectorXd row = raw.row(i);
            for (int j = 0; j < basis.k(); ++j) {
                const double coef = (row.array() * basis.functions.col(j).array() * w.array()).sum();
                row -= coef * basis.functions.col(j);
            }
            proj.row(i) = row;
        }
        auto [design, basis2] = build_design(response, {CurveSet(proj, grid)}, 0.9, 3);
        REQUIRE(design.X.cwiseAbs().maxCoeff() < 1e-10);
    }

    SECTION("three random features are projected blockwise") {
        std::vector<CurveSet> features;
        for (int j = 0; j < 3; ++j) features.push_back(centered(oracles::randn(15, 22, rng), grid));
        auto [design, basis] = build_design(response, features, 0.9, 4);
        REQUIRE(design.p == 3);
        for (int j = 0; j < 3; ++j) {
            const Eigen::MatrixXd expected = project(features[j], basis);
            REQUIRE((design.X.middleCols(j * design.k, design.k) - expected)
                        .cwiseAbs()
                        .maxCoeff() < 1e-12);
        }
        REQUIRE(design.block_names == std::vector<std::string>{"X1", "X2", "X3"});
    }
}

TEST_CASE("reconstruction error is nonincreasing in k", "[fpca]") {
    std::mt19937_64 rng(37);
    const Grid grid = Grid::uniform(0.0, 1.0, 35);
    const CurveSet curves = centered(oracles::randn(20, 35, rng), grid);
    double prev = std::numeric_limits<double>::infinity();
    for (int k = 1; k <= 6; ++k) {
        const FpcBasis basis = compute_fpc(curves, 1.0, k);
        const Eigen::MatrixXd scores = project(curves, basis);
        const Eigen::MatrixXd recon = scores * basis.functions.transpose();
        double mse = 0.0;
        for (int i = 0; i < curves.n(); ++i) {
            const Eigen::VectorXd diff = (curves.values.row(i) - recon.row(i)).transpose();
            mse += quad_norm(diff, grid) * quad_norm(diff, grid);
        }
        mse /= curves.n();
        REQUIRE(mse <= prev + 1e-12);
        prev = mse;
    }
}

TEST_CASE("degenerate samples raise RankDeficient", "[fpca]") {
    const Grid grid = Grid::uniform(0.0, 1.0, 10);
    REQUIRE_THROWS_AS(compute_fpc(CurveSet(Eigen::MatrixXd::Zero(4, 10), grid), 0.9, 3),
                      RankDeficientError);
}

TEST_CASE("sign convention puts the largest-magnitude entry positive", "[fpca]") {
    std::mt19937_64 rng(41);
    const Grid grid = Grid::uniform(0.0, 1.0, 16);
    const FpcBasis basis = compute_fpc(centered(oracles::randn(10, 16, rng), grid), 0.99, 5);
    for (int j = 0; j < basis.k(); ++j) {
        Eigen::Index idx;
        basis.functions.col(j).cwiseAbs().maxCoeff(&idx);
        REQUIRE(basis.functions(idx, j) > 0.0);
    }
}
