#pragma once

#include <Eigen/Dense>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "fregsel/dal.hpp"
#include "fregsel/fpca.hpp"

namespace fregsel {

/// Scalar-on-function design: each feature block is built from that feature's
/// own FPC basis; a common k keeps the block algebra uniform.
struct ScalarDesign {
    Eigen::MatrixXd Y;  // n x 1
    Eigen::MatrixXd X;  // n x p*k
    std::vector<FpcBasis> bases;
    std::vector<std::string> block_names;
    int n = 0, p = 0, k = 0;

    DesignView view() const { return DesignView(Y, X, p, k); }
};

/// Builds the scalar design from standardized inputs. k is common across
/// features: the largest per-feature count needed to reach the variance
/// threshold, capped at k_max. A feature whose rank cannot supply that many
/// components raises RankDeficient.
inline ScalarDesign build_scalar_design(const Eigen::VectorXd& responses,
                                        const std::vector<CurveSet>& features,
                                        double variance_threshold, int k_max,
                                        std::optional<int> fixed_k = std::nullopt,
                                        std::vector<std::string> names = {}) {
    if (features.empty()) throw ValidationError("at least one feature required");
    const int n = static_cast<int>(responses.size());
    const int p = static_cast<int>(features.size());
    if (!responses.allFinite()) throw ValidationError("responses must be finite");

    std::vector<detail::FpcDecomposition> decs;
    decs.reserve(p);
    int k = fixed_k.value_or(1);
    for (const auto& f : features) {
        if (f.n() != n) throw DimensionMismatchError("feature sample size differs from response");
        decs.push_back(detail::fpc_decompose(f));
        if (!fixed_k) {
            const auto& d = decs.back();
            double acc = 0.0;
            int kj = static_cast<int>(d.eigenvalues.size());
            for (int i = 0; i < d.eigenvalues.size(); ++i) {
                acc += d.eigenvalues[i];
                if (acc / d.total_variance + 1e-12 >= variance_threshold) {
                    kj = i + 1;
                    break;
                }
            }
            k = std::max(k, std::min(kj, k_max));
        }
    }
    k = std::min(k, k_max);

    ScalarDesign design;
    design.n = n;
    design.p = p;
    design.k = k;
    design.Y = responses;
    design.X.resize(n, static_cast<Eigen::Index>(p) * k);
    design.bases.reserve(p);
    for (int j = 0; j < p; ++j) {
        const auto& d = decs[j];
        if (static_cast<int>(d.eigenvalues.size()) < k)
            throw RankDeficientError("feature rank below the common basis size");
        FpcBasis basis;
        basis.functions = d.functions.leftCols(k);
        basis.eigenvalues = d.eigenvalues.head(k);
        basis.explained_variance.resize(k);
        double acc = 0.0;
        for (int i = 0; i < k; ++i) {
            acc += d.eigenvalues[i];
            basis.explained_variance[i] = acc / d.total_variance;
        }
        basis.grid = features[j].grid;
        design.X.middleCols(static_cast<Eigen::Index>(j) * k, k) = project(features[j], basis);
        design.bases.push_back(std::move(basis));
    }
    if (names.empty()) {
        names.reserve(p);
        for (int j = 0; j < p; ++j) names.push_back("X" + std::to_string(j + 1));
    }
    if (static_cast<int>(names.size()) != p)
        throw DimensionMismatchError("one name per feature block expected");
    design.block_names = std::move(names);
    return design;
}

/// Same outer/inner structure as the matrix solver with vector-shaped dual
/// variables; the assembled Hessian is n x n regardless of k.
inline SolveResult scalar_solve(const ScalarDesign& design, const PenaltyParams& params,
                                const DalConfig& config, const DalState* warm = nullptr) {
    return solve(design.view(), params, config, warm);
}

/// Coefficient curve on the grid: e^j(t) . B_j.
inline Eigen::VectorXd reconstruct_coefficient_curve(const Eigen::VectorXd& B_j,
                                                     const FpcBasis& basis) {
    return reconstruct_curve(B_j, basis);
}

}  // namespace fregsel
