#pragma once

// Shared random problem instances for solver tests.

#include <Eigen/Dense>
#include <random>
#include <vector>

#include "fregsel/dal.hpp"
#include "support/oracles.hpp"

namespace fixtures {

struct Instance {
    Eigen::MatrixXd X;   // n x p*k
    Eigen::MatrixXd Y;   // n x q
    Eigen::MatrixXd B0;  // true coefficients, p*k x q
    int p = 0, k = 0;

    fregsel::DesignView view() const { return fregsel::DesignView(Y, X, p, k); }
};

// Gaussian design with a sparse block-structured truth plus noise.
inline Instance make_sparse_instance(int n, int p, int k, int q, int p0, double noise,
                                     std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Instance inst;
    inst.p = p;
    inst.k = k;
    inst.X = oracles::randn(n, static_cast<Eigen::Index>(p) * k, rng);
    inst.B0 = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(p) * k, q);
    for (int j = 0; j < p0; ++j)
        inst.B0.middleRows(static_cast<Eigen::Index>(j) * k, k) = oracles::randn(k, q, rng);
    inst.Y = inst.X * inst.B0 + noise * oracles::randn(n, q, rng);
    return inst;
}

}  // namespace fixtures
