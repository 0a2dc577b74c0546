#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <utility>

#include "fregsel/errors.hpp"

namespace fregsel {

/// Adaptive group elastic-net parameters. lambda2 must be strictly positive:
/// the conjugate divides by it.
struct PenaltyParams {
    double lambda1 = 0.0;
    double lambda2 = 0.0;
    Eigen::VectorXd weights;

    PenaltyParams() = default;
    PenaltyParams(double l1, double l2, Eigen::VectorXd w)
        : lambda1(l1), lambda2(l2), weights(std::move(w)) {
        if (lambda1 < 0.0) throw ValidationError("lambda1 must be nonnegative");
        if (!(lambda2 > 0.0)) throw ValidationError("lambda2 must be strictly positive");
        if (weights.size() == 0 || weights.minCoeff() <= 0.0)
            throw ValidationError("weights must be positive");
    }

    static PenaltyParams unit_weights(double l1, double l2, int p) {
        return PenaltyParams(l1, l2, Eigen::VectorXd::Ones(p));
    }
};

/// p stacked coefficient blocks of k rows each; columns shared across blocks.
/// The function-on-function problem has k x k blocks, the scalar-on-function
/// one k x 1 blocks.
struct BlockMatrix {
    Eigen::MatrixXd data;  // (p*k) x q
    int p = 0;
    int k = 0;

    BlockMatrix() = default;
    BlockMatrix(Eigen::MatrixXd d, int p_, int k_) : data(std::move(d)), p(p_), k(k_) {
        if (data.rows() != static_cast<Eigen::Index>(p) * k)
            throw DimensionMismatchError("block matrix row count must be p*k");
    }

    int q() const { return static_cast<int>(data.cols()); }
    auto block(int j) { return data.middleRows(static_cast<Eigen::Index>(j) * k, k); }
    auto block(int j) const { return data.middleRows(static_cast<Eigen::Index>(j) * k, k); }

    static BlockMatrix zero(int p, int k, int q) {
        return BlockMatrix(Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(p) * k, q), p, k);
    }
};

namespace detail {

inline double pairwise_sum_sq(const double* v, Eigen::Index len) {
    if (len <= 32) {
        double s = 0.0;
        for (Eigen::Index i = 0; i < len; ++i) s += v[i] * v[i];
        return s;
    }
    const Eigen::Index half = len / 2;
    return pairwise_sum_sq(v, half) + pairwise_sum_sq(v + half, len - half);
}

}  // namespace detail

/// Frobenius norm of one block. Pairwise summation keeps threshold comparisons
/// stable for large blocks.
template <typename Derived>
double block_norm(const Eigen::MatrixBase<Derived>& block) {
    const Eigen::Index count = block.size();
    if (count > 64) {
        Eigen::MatrixXd buf = block;  // contiguous copy
        return std::sqrt(detail::pairwise_sum_sq(buf.data(), count));
    }
    return block.norm();
}

/// Scalar multiplier of the blockwise proximal map:
/// prox_{sigma pi}(B_j) = prox_scale(||B_j||, ...) * B_j.
inline double prox_scale(double norm, double sigma, double w_j, const PenaltyParams& params) {
    const double shrink = 1.0 / (1.0 + sigma * w_j * params.lambda2);
    const double thr = sigma * w_j * params.lambda1;
    if (thr == 0.0) return shrink;
    if (norm <= thr) return 0.0;  // boundary ties map to zero
    return shrink * (1.0 - thr / norm);
}

/// pi(B) = sum_j w_j (lambda1 ||B_j|| + lambda2/2 ||B_j||^2).
inline double penalty_value(const BlockMatrix& B, const PenaltyParams& params) {
    if (params.weights.size() != B.p) throw DimensionMismatchError("one weight per block expected");
    double total = 0.0;
    for (int j = 0; j < B.p; ++j) {
        const double s = block_norm(B.block(j));
        total += params.weights[j] * (params.lambda1 * s + 0.5 * params.lambda2 * s * s);
    }
    return total;
}

/// Fenchel conjugate pi*(Z) = sum_j (2 w_j lambda2)^-1 ([||Z_j|| - w_j lambda1]_+)^2.
inline double conjugate_value(const BlockMatrix& Z, const PenaltyParams& params) {
    if (params.weights.size() != Z.p) throw DimensionMismatchError("one weight per block expected");
    double total = 0.0;
    for (int j = 0; j < Z.p; ++j) {
        const double excess = block_norm(Z.block(j)) - params.weights[j] * params.lambda1;
        if (excess > 0.0) total += excess * excess / (2.0 * params.weights[j] * params.lambda2);
    }
    return total;
}

/// Blockwise proximal operator of sigma*pi (group soft-threshold plus ridge shrink).
inline BlockMatrix prox_penalty(const BlockMatrix& B, double sigma, const PenaltyParams& params) {
    if (!(sigma > 0.0)) throw ValidationError("sigma must be positive");
    if (params.weights.size() != B.p) throw DimensionMismatchError("one weight per block expected");
    BlockMatrix out = BlockMatrix::zero(B.p, B.k, B.q());
    for (int j = 0; j < B.p; ++j) {
        const double c = prox_scale(block_norm(B.block(j)), sigma, params.weights[j], params);
        if (c != 0.0) out.block(j) = c * B.block(j);
    }
    return out;
}

/// prox_{pi*/sigma}(A) = A - prox_{sigma pi}(sigma A) / sigma (Moreau decomposition).
inline BlockMatrix prox_conjugate(const BlockMatrix& A, double sigma, const PenaltyParams& params) {
    if (!(sigma > 0.0)) throw ValidationError("sigma must be positive");
    BlockMatrix scaled(A.data * sigma, A.p, A.k);
    BlockMatrix prox = prox_penalty(scaled, sigma, params);
    return BlockMatrix(A.data - prox.data / sigma, A.p, A.k);
}

}  // namespace fregsel
