#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "fregsel/grid.hpp"

namespace fregsel {

/// Orthonormal (w.r.t. the quadrature inner product) eigenfunction basis of the
/// empirical covariance operator of a curve sample.
struct FpcBasis {
    Eigen::MatrixXd functions;           // m x k, column j is e_j on the grid
    Eigen::VectorXd eigenvalues;         // k, nonincreasing
    Eigen::VectorXd explained_variance;  // k, cumulative ratios in [0,1]
    Grid grid;

    int k() const { return static_cast<int>(functions.cols()); }
};

namespace detail {

// Full quadrature-weighted eigendecomposition of the empirical covariance
// operator. Uses the n x n Gram matrix when n < m, else the m x m covariance
// matrix; both routes give the same eigenpairs. Returns all positive
// components plus the total (quadrature trace) variance.
struct FpcDecomposition {
    Eigen::MatrixXd functions;    // m x rank
    Eigen::VectorXd eigenvalues;  // rank, positive, descending
    double total_variance = 0.0;
};

inline FpcDecomposition fpc_decompose(const CurveSet& curves) {
    const int n = curves.n();
    const int m = curves.m();
    const Eigen::VectorXd w = curves.grid.quadrature_weights();
    const Eigen::VectorXd sqw = w.cwiseSqrt();
    FpcDecomposition out;

    Eigen::VectorXd evals;     // ascending from Eigen
    Eigen::MatrixXd efuns;     // m x count, quadrature-orthonormal, ascending order
    if (n < m) {
        // Gram route: G = X W X^T / n, eigenfunction e = X^T v / sqrt(n lambda).
        Eigen::MatrixXd G = curves.values * w.asDiagonal() * curves.values.transpose() / n;
        G = ((G + G.transpose()) * 0.5).eval();
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(G);
        if (es.info() != Eigen::Success) throw FactorizationError("FPC eigendecomposition failed");
        evals = es.eigenvalues();
        efuns.resize(m, n);
        for (int i = 0; i < n; ++i) {
            const double lam = evals[i];
            if (lam > 0.0)
                efuns.col(i) = curves.values.transpose() * es.eigenvectors().col(i) / std::sqrt(n * lam);
            else
                efuns.col(i).setZero();
        }
    } else {
        // Covariance route: symmetrized W^(1/2) C W^(1/2), e = W^(-1/2) u.
        Eigen::MatrixXd C = curves.values.transpose() * curves.values / n;
        Eigen::MatrixXd M = sqw.asDiagonal() * C * sqw.asDiagonal();
        M = ((M + M.transpose()) * 0.5).eval();
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(M);
        if (es.info() != Eigen::Success) throw FactorizationError("FPC eigendecomposition failed");
        evals = es.eigenvalues();
        efuns = sqw.cwiseInverse().asDiagonal() * es.eigenvectors();
    }

    const int count = static_cast<int>(evals.size());
    const double lam_max = std::max(0.0, evals[count - 1]);
    const double floor = lam_max * 1e-12;
    int rank = 0;
    for (int i = 0; i < count; ++i)
        if (evals[i] > floor && evals[i] > 0.0) ++rank;
    if (rank < 1) throw RankDeficientError("covariance operator has no positive eigenvalue");

    out.total_variance = 0.0;
    for (int i = 0; i < count; ++i) out.total_variance += std::max(0.0, evals[i]);
    out.functions.resize(m, rank);
    out.eigenvalues.resize(rank);
    for (int i = 0; i < rank; ++i) {
        const int src = count - 1 - i;  // descending
        out.eigenvalues[i] = evals[src];
        Eigen::VectorXd e = efuns.col(src);
        // sign convention: entry of largest magnitude is positive
        int idx = 0;
        double best = 0.0;
        for (int t = 0; t < m; ++t) {
            if (std::abs(e[t]) > best) {
                best = std::abs(e[t]);
                idx = t;
            }
        }
        if (e[idx] < 0.0) e = -e;
        out.functions.col(i) = e;
    }
    return out;
}

}  // namespace detail

/// FPC basis of a centered curve sample. Keeps the smallest k whose cumulative
/// explained variance reaches `variance_threshold`, capped at `k_max` (and at
/// the numerical rank). `fixed_k` overrides the threshold rule.
inline FpcBasis compute_fpc(const CurveSet& curves, double variance_threshold, int k_max,
                            std::optional<int> fixed_k = std::nullopt) {
    if (!(variance_threshold > 0.0 && variance_threshold <= 1.0))
        throw ValidationError("variance_threshold must be in (0, 1]");
    if (k_max < 1) throw ValidationError("k_max must be positive");
    auto dec = detail::fpc_decompose(curves);
    const int rank = static_cast<int>(dec.eigenvalues.size());

    Eigen::VectorXd cum(rank);
    double acc = 0.0;
    for (int i = 0; i < rank; ++i) {
        acc += dec.eigenvalues[i];
        cum[i] = acc / dec.total_variance;
    }

    int k;
    if (fixed_k) {
        if (*fixed_k < 1) throw ValidationError("fixed k must be positive");
        if (*fixed_k > rank) throw RankDeficientError("requested k exceeds numerical rank");
        k = std::min(*fixed_k, k_max);
    } else {
        k = rank;
        for (int i = 0; i < rank; ++i) {
            if (cum[i] + 1e-12 >= variance_threshold) {
                k = i + 1;
                break;
            }
        }
        k = std::min(k, k_max);
    }

    FpcBasis basis;
    basis.functions = dec.functions.leftCols(k);
    basis.eigenvalues = dec.eigenvalues.head(k);
    basis.explained_variance = cum.head(k);
    basis.grid = curves.grid;
    return basis;
}

/// Score matrix: entry (i, j) is the quadrature inner product <curve_i, e_j>.
inline Eigen::MatrixXd project(const CurveSet& curves, const FpcBasis& basis) {
    if (!curves.grid.same_as(basis.grid)) throw GridMismatchError("curves and basis use different grids");
    const Eigen::VectorXd w = curves.grid.quadrature_weights();
    return curves.values * (w.asDiagonal() * basis.functions);
}

/// Surface samples on the grid tensor: surface(t, s) = sum_ab e_a(t) B_ab e_b(s).
inline Eigen::MatrixXd reconstruct_surface(const Eigen::MatrixXd& B_j, const FpcBasis& basis) {
    if (B_j.rows() != basis.k() || B_j.cols() != basis.k())
        throw DimensionMismatchError("coefficient block does not match basis size");
    return basis.functions * B_j * basis.functions.transpose();
}

/// Curve samples on the grid: curve(t) = sum_a e_a(t) b_a.
inline Eigen::VectorXd reconstruct_curve(const Eigen::VectorXd& b_j, const FpcBasis& basis) {
    if (b_j.size() != basis.k())
        throw DimensionMismatchError("coefficient vector does not match basis size");
    return basis.functions * b_j;
}

/// Block score representation of a function-on-function problem: response
/// scores Y (n x k) and feature scores X (n x p*k) in p contiguous blocks.
struct ScoreDesign {
    Eigen::MatrixXd Y;
    Eigen::MatrixXd X;
    std::vector<std::string> block_names;
    int n = 0, p = 0, k = 0;
};

/// Builds the score design from standardized curves. The basis is computed
/// from the response only and every feature is projected onto it.
inline std::pair<ScoreDesign, FpcBasis> build_design(const CurveSet& response,
                                                     const std::vector<CurveSet>& features,
                                                     double variance_threshold, int k_max,
                                                     std::optional<int> fixed_k = std::nullopt,
                                                     std::vector<std::string> names = {}) {
    FpcBasis basis = compute_fpc(response, variance_threshold, k_max, fixed_k);
    ScoreDesign design;
    design.n = response.n();
    design.p = static_cast<int>(features.size());
    design.k = basis.k();
    design.Y = project(response, basis);
    design.X.resize(design.n, design.p * design.k);
    for (int j = 0; j < design.p; ++j) {
        if (features[j].n() != design.n)
            throw DimensionMismatchError("feature sample size differs from response");
        design.X.middleCols(j * design.k, design.k) = project(features[j], basis);
    }
    if (names.empty()) {
        names.reserve(design.p);
        for (int j = 0; j < design.p; ++j) names.push_back("X" + std::to_string(j + 1));
    }
    if (static_cast<int>(names.size()) != design.p)
        throw DimensionMismatchError("one name per feature block expected");
    design.block_names = std::move(names);
    return {std::move(design), std::move(basis)};
}

}  // namespace fregsel
