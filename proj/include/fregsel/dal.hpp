#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <chrono>
#include <cmath>
#include <limits>
#include <optional>
#include <vector>

#include "fregsel/penalty.hpp"

namespace fregsel {

/// Read-only view of a block regression problem Y ~ X B. Response columns q
/// equal k for function-on-function designs and 1 for scalar responses.
struct DesignView {
    const Eigen::MatrixXd* Y = nullptr;  // n x q
    const Eigen::MatrixXd* X = nullptr;  // n x p*k
    int p = 0;
    int k = 0;
    // optional per-block Frobenius norms of X, shared across repeated solves
    const Eigen::VectorXd* x_norm_cache = nullptr;

    DesignView() = default;
    DesignView(const Eigen::MatrixXd& y, const Eigen::MatrixXd& x, int p_, int k_)
        : Y(&y), X(&x), p(p_), k(k_) {
        if (x.cols() != static_cast<Eigen::Index>(p_) * k_)
            throw DimensionMismatchError("design column count must be p*k");
        if (x.rows() != y.rows()) throw DimensionMismatchError("X and Y row counts differ");
    }

    int n() const { return static_cast<int>(Y->rows()); }
    int q() const { return static_cast<int>(Y->cols()); }
    auto block(int j) const { return X->middleCols(static_cast<Eigen::Index>(j) * k, k); }
};

enum class SolverMode { automatic, direct, woodbury };

struct DalConfig {
    double tol_kkt3 = 1e-6;
    double tol_kkt1 = 1e-6;
    double sigma0 = -1.0;  // <= 0: max(5/p, 1e-4)
    double sigma_growth = 5.0;
    double sigma_cap = 1e4;
    int max_outer = 100;
    int max_inner = 100;
    SolverMode mode = SolverMode::automatic;
};

struct DalState {
    Eigen::MatrixXd V;        // n x q
    Eigen::MatrixXd Z;        // p*k x q
    Eigen::MatrixXd B;        // p*k x q
    double sigma = 0.0;
    std::vector<int> active;  // J = { j : ||T_j|| >= sigma w_j lambda1 }
    Eigen::MatrixXd XtV;      // running X^T V, reusable by warm starts

    int r() const { return static_cast<int>(active.size()); }
};

enum class SolveStatus { converged, max_iterations, factorization_failure };

struct OuterDiagnostics {
    double sigma = 0.0;
    int r = 0;
    double res1 = 0.0;
    double res3 = 0.0;
    double psi = 0.0;
    double primal_obj = 0.0;
    double dual_obj = 0.0;  // -(h*(V) + pi*(Z))
    int newton_steps = 0;
    double elapsed_ms = 0.0;
    int safeguard_halvings = 0;
    std::vector<double> psi_steps;  // psi before and after each accepted Newton step
};

struct SolveResult {
    DalState state;
    SolveStatus status = SolveStatus::max_iterations;
    std::vector<OuterDiagnostics> outer;
    int outer_iters = 0;
    int total_newton_steps = 0;
    int safeguard_triggers = 0;  // steps where the unit step was rejected
    double elapsed_ms = 0.0;

    bool converged() const { return status == SolveStatus::converged; }
};

struct KktResiduals {
    double res3 = 0.0;
    double res1 = 0.0;
};

/// h*(V) = 1/2 ||V||^2 + <Y, V> (Frobenius inner product).
inline double dual_objective_h_star(const DesignView& design, const Eigen::MatrixXd& V) {
    return 0.5 * V.squaredNorm() + (design.Y->array() * V.array()).sum();
}

namespace detail {

// Per-block data of the generalized Jacobian of prox_{sigma pi} at T.
struct ProxCurvature {
    double a = 0.0;  // multiple of the identity
    double b = 0.0;  // coefficient of vec(T_j) vec(T_j)^T
};

inline ProxCurvature prox_curvature(double norm, double sigma, double w_j,
                                    const PenaltyParams& params) {
    const double shrink = 1.0 / (1.0 + sigma * w_j * params.lambda2);
    const double thr = sigma * w_j * params.lambda1;
    if (thr == 0.0) return {shrink, 0.0};
    return {shrink * (1.0 - thr / norm), shrink * thr / (norm * norm * norm)};
}

inline Eigen::VectorXd block_norms(const Eigen::MatrixXd& M, int p, int k) {
    Eigen::VectorXd s(p);
    for (int j = 0; j < p; ++j)
        s[j] = block_norm(M.middleRows(static_cast<Eigen::Index>(j) * k, k));
    return s;
}

inline double sum_row_norms(const Eigen::MatrixXd& M) {
    return M.rowwise().norm().sum();
}

}  // namespace detail

/// Active-set-reduced Newton system for the V update: H = I + sigma Xhat_J Q_J Xhat_J^T
/// with Q_J block diagonal in the P_j = a_j I + b_j t_j t_j^T blocks.
struct NewtonSystem {
    DesignView design;
    double sigma = 0.0;
    std::vector<int> active;
    std::vector<double> a, b;        // P_j parameters, aligned with `active`
    std::vector<Eigen::VectorXd> t;  // vec(T_j) per active block
    Eigen::MatrixXd grad;            // n x q
    SolverMode mode = SolverMode::direct;
};

/// psi(V) = h*(V) + (2 sigma)^-1 sum_j [ (1+sigma w_j lambda2) ||prox(T_j)||^2 - ||B_j||^2 ].
inline double psi_value(const DesignView& design, const Eigen::MatrixXd& V,
                        const Eigen::MatrixXd& B, double sigma, const PenaltyParams& params) {
    if (!(sigma > 0.0)) throw ValidationError("sigma must be positive");
    const Eigen::MatrixXd T = B - sigma * (design.X->transpose() * V);
    double acc = 0.0;
    for (int j = 0; j < design.p; ++j) {
        const double w_j = params.weights[j];
        const double s = block_norm(T.middleRows(static_cast<Eigen::Index>(j) * design.k, design.k));
        const double pn = prox_scale(s, sigma, w_j, params) * s;
        const double bn = block_norm(B.middleRows(static_cast<Eigen::Index>(j) * design.k, design.k));
        acc += (1.0 + sigma * w_j * params.lambda2) * pn * pn - bn * bn;
    }
    return dual_objective_h_star(design, V) + acc / (2.0 * sigma);
}

/// grad psi(V) = V + Y - X prox_{sigma pi}(T) with T = B - sigma X^T V.
inline Eigen::MatrixXd psi_gradient(const DesignView& design, const Eigen::MatrixXd& V,
                                    const Eigen::MatrixXd& B, double sigma,
                                    const PenaltyParams& params) {
    if (!(sigma > 0.0)) throw ValidationError("sigma must be positive");
    const Eigen::MatrixXd T = B - sigma * (design.X->transpose() * V);
    Eigen::MatrixXd grad = V + *design.Y;
    for (int j = 0; j < design.p; ++j) {
        const auto T_j = T.middleRows(static_cast<Eigen::Index>(j) * design.k, design.k);
        const double c = prox_scale(block_norm(T_j), sigma, params.weights[j], params);
        if (c != 0.0) grad.noalias() -= design.block(j) * (c * T_j);
    }
    return grad;
}

/// Active set, P_j parameters and gradient at (V, B, sigma).
inline NewtonSystem build_newton_system(const DesignView& design, const Eigen::MatrixXd& V,
                                        const Eigen::MatrixXd& B, double sigma,
                                        const PenaltyParams& params,
                                        SolverMode mode = SolverMode::automatic) {
    if (!(sigma > 0.0)) throw ValidationError("sigma must be positive");
    NewtonSystem sys;
    sys.design = design;
    sys.sigma = sigma;
    sys.grad = V + *design.Y;
    const Eigen::MatrixXd T = B - sigma * (design.X->transpose() * V);
    for (int j = 0; j < design.p; ++j) {
        Eigen::MatrixXd T_j = T.middleRows(static_cast<Eigen::Index>(j) * design.k, design.k);
        const double s = block_norm(T_j);
        const double thr = sigma * params.weights[j] * params.lambda1;
        const double c = prox_scale(s, sigma, params.weights[j], params);
        if (c != 0.0) sys.grad.noalias() -= design.block(j) * (c * T_j);
        if (s < thr) continue;
        sys.active.push_back(j);
        const auto pc = detail::prox_curvature(s, sigma, params.weights[j], params);
        sys.a.push_back(pc.a);
        sys.b.push_back(pc.b);
        sys.t.emplace_back(Eigen::Map<Eigen::VectorXd>(T_j.data(), T_j.size()));
    }
    if (mode == SolverMode::automatic)
        mode = (static_cast<int>(sys.active.size()) < design.n()) ? SolverMode::woodbury
                                                                  : SolverMode::direct;
    sys.mode = mode;
    return sys;
}

/// H_psi applied to a direction D (never materializes Q_J).
inline Eigen::MatrixXd apply_hessian(const NewtonSystem& sys, const Eigen::MatrixXd& D) {
    const auto& design = sys.design;
    Eigen::MatrixXd out = D;
    for (std::size_t idx = 0; idx < sys.active.size(); ++idx) {
        const int j = sys.active[idx];
        Eigen::MatrixXd M = design.block(j).transpose() * D;  // k x q
        Eigen::Map<Eigen::VectorXd> w(M.data(), M.size());
        Eigen::VectorXd pw = sys.a[idx] * w + sys.b[idx] * (sys.t[idx].dot(w)) * sys.t[idx];
        Eigen::Map<Eigen::MatrixXd> pm(pw.data(), design.k, design.q());
        out.noalias() += sys.sigma * (design.block(j) * pm);
    }
    return out;
}

namespace detail {

inline Eigen::MatrixXd newton_direction_direct(const NewtonSystem& sys) {
    const auto& design = sys.design;
    const int n = design.n();
    const int q = design.q();
    const Eigen::Index dim = static_cast<Eigen::Index>(n) * q;
    Eigen::MatrixXd H = Eigen::MatrixXd::Identity(dim, dim);
    for (std::size_t idx = 0; idx < sys.active.size(); ++idx) {
        const int j = sys.active[idx];
        const Eigen::MatrixXd outer = design.block(j) * design.block(j).transpose();  // n x n
        for (int c = 0; c < q; ++c)
            H.block(static_cast<Eigen::Index>(c) * n, static_cast<Eigen::Index>(c) * n, n, n) +=
                (sys.sigma * sys.a[idx]) * outer;
        Eigen::Map<const Eigen::MatrixXd> t_mat(sys.t[idx].data(), design.k, q);
        Eigen::MatrixXd u_mat = design.block(j) * t_mat;  // n x q
        Eigen::Map<Eigen::VectorXd> u(u_mat.data(), u_mat.size());
        H.noalias() += (sys.sigma * sys.b[idx]) * (u * u.transpose());
    }
    Eigen::LLT<Eigen::MatrixXd> llt(H);
    if (llt.info() != Eigen::Success)
        throw FactorizationError("direct Newton system is not numerically SPD");
    Eigen::VectorXd rhs = -Eigen::Map<const Eigen::VectorXd>(sys.grad.data(), dim);
    Eigen::VectorXd d = llt.solve(rhs);
    return Eigen::Map<Eigen::MatrixXd>(d.data(), n, q);
}

// Sherman-Morrison-Woodbury route: factorize (sigma Q_J)^-1 + Xhat^T Xhat of
// dimension r*k*q instead of the (n*q)-dimensional system.
inline Eigen::MatrixXd newton_direction_woodbury(const NewtonSystem& sys) {
    const auto& design = sys.design;
    const int q = design.q();
    const int k = design.k;
    const int bs = k * q;  // vec dimension of one block
    const int r = static_cast<int>(sys.active.size());
    if (r == 0) return -sys.grad;

    for (int idx = 0; idx < r; ++idx) {
        const double shrink = sys.a[idx] + sys.b[idx] * sys.t[idx].squaredNorm();
        if (!(sys.a[idx] > shrink * 1e-13))
            // boundary-degenerate P_j: fall back to the dense route
            return newton_direction_direct(sys);
    }

    const Eigen::Index dim = static_cast<Eigen::Index>(r) * bs;
    Eigen::MatrixXd M(dim, dim);
    // Xhat^T Xhat blocks: I_q kron (X_i^T X_j)
    for (int ib = 0; ib < r; ++ib) {
        for (int jb = ib; jb < r; ++jb) {
            const Eigen::MatrixXd gram =
                design.block(sys.active[ib]).transpose() * design.block(sys.active[jb]);
            auto blk = M.block(static_cast<Eigen::Index>(ib) * bs,
                               static_cast<Eigen::Index>(jb) * bs, bs, bs);
            blk.setZero();
            for (int c = 0; c < q; ++c)
                blk.block(static_cast<Eigen::Index>(c) * k, static_cast<Eigen::Index>(c) * k, k,
                          k) = gram;
            if (jb != ib)
                M.block(static_cast<Eigen::Index>(jb) * bs, static_cast<Eigen::Index>(ib) * bs, bs,
                        bs) = blk.transpose();
        }
    }
    // (sigma Q_J)^-1 diagonal blocks via Sherman-Morrison on P_j
    for (int idx = 0; idx < r; ++idx) {
        const double shrink = sys.a[idx] + sys.b[idx] * sys.t[idx].squaredNorm();
        auto blk = M.block(static_cast<Eigen::Index>(idx) * bs,
                           static_cast<Eigen::Index>(idx) * bs, bs, bs);
        blk.diagonal().array() += 1.0 / (sys.sigma * sys.a[idx]);
        if (sys.b[idx] != 0.0)
            blk.noalias() -= (sys.b[idx] / (sys.sigma * sys.a[idx] * shrink)) *
                             (sys.t[idx] * sys.t[idx].transpose());
    }

    Eigen::LLT<Eigen::MatrixXd> llt(M);
    if (llt.info() != Eigen::Success)
        throw FactorizationError("Woodbury inner system is not numerically SPD");

    // D = -(grad - Xhat M^-1 Xhat^T grad)
    Eigen::VectorXd xtg(dim);
    for (int idx = 0; idx < r; ++idx) {
        Eigen::MatrixXd blk = design.block(sys.active[idx]).transpose() * sys.grad;  // k x q
        xtg.segment(static_cast<Eigen::Index>(idx) * bs, bs) =
            Eigen::Map<Eigen::VectorXd>(blk.data(), bs);
    }
    Eigen::VectorXd y = llt.solve(xtg);
    Eigen::MatrixXd D = -sys.grad;
    for (int idx = 0; idx < r; ++idx) {
        Eigen::Map<const Eigen::MatrixXd> y_mat(y.data() + static_cast<Eigen::Index>(idx) * bs, k,
                                                q);
        D.noalias() += design.block(sys.active[idx]) * y_mat;
    }
    return D;
}

}  // namespace detail

/// Solves H_psi vec(D) = -vec(grad psi). Direct and Woodbury modes agree.
inline Eigen::MatrixXd newton_direction(const NewtonSystem& sys) {
    if (!sys.grad.allFinite()) throw ValidationError("Newton system gradient must be finite");
    if (sys.mode == SolverMode::woodbury) return detail::newton_direction_woodbury(sys);
    return detail::newton_direction_direct(sys);
}

/// Closed-form Z update: Zbar = prox_{pi*/sigma}(B/sigma - X^T V).
inline Eigen::MatrixXd z_update(const DesignView& design, const Eigen::MatrixXd& V,
                                const Eigen::MatrixXd& B, double sigma,
                                const PenaltyParams& params) {
    if (!(sigma > 0.0)) throw ValidationError("sigma must be positive");
    const Eigen::MatrixXd T = B - sigma * (design.X->transpose() * V);
    Eigen::MatrixXd Z = T / sigma;
    for (int j = 0; j < design.p; ++j) {
        auto T_j = T.middleRows(static_cast<Eigen::Index>(j) * design.k, design.k);
        const double c = prox_scale(block_norm(T_j), sigma, params.weights[j], params);
        if (c != 0.0)
            Z.middleRows(static_cast<Eigen::Index>(j) * design.k, design.k).noalias() -=
                (c / sigma) * T_j;
    }
    return Z;
}

/// Standardized residuals of the third and first KKT equations.
inline KktResiduals kkt_residuals(const DesignView& design, const Eigen::MatrixXd& V,
                                  const Eigen::MatrixXd& Z, const Eigen::MatrixXd& B) {
    KktResiduals res;
    const Eigen::MatrixXd R3 = design.X->transpose() * V + Z;
    double num3 = 0.0, z_norms = 0.0, x_norms = 0.0;
    for (int j = 0; j < design.p; ++j) {
        num3 += block_norm(R3.middleRows(static_cast<Eigen::Index>(j) * design.k, design.k));
        z_norms += block_norm(Z.middleRows(static_cast<Eigen::Index>(j) * design.k, design.k));
        x_norms += block_norm(design.block(j));
    }
    res.res3 = num3 / (1.0 + detail::sum_row_norms(V) + z_norms);
    const Eigen::MatrixXd R1 = V + *design.Y - *design.X * B;
    res.res1 = detail::sum_row_norms(R1) / (1.0 + detail::sum_row_norms(*design.Y) + x_norms);
    return res;
}

/// Primal objective h(XB) + pi(B) of the block elastic-net problem.
inline double primal_objective(const DesignView& design, const Eigen::MatrixXd& B,
                               const PenaltyParams& params) {
    Eigen::MatrixXd fit = Eigen::MatrixXd::Zero(design.n(), design.q());
    for (int j = 0; j < design.p; ++j) {
        const auto B_j = B.middleRows(static_cast<Eigen::Index>(j) * design.k, design.k);
        if (B_j.squaredNorm() > 0.0) fit.noalias() += design.block(j) * B_j;
    }
    return 0.5 * (*design.Y - fit).squaredNorm() +
           penalty_value(BlockMatrix(B, design.p, design.k), params);
}

/// Dual augmented Lagrangian solver: outer multiplier updates around an inner
/// alternation of one full Newton step on V and the closed-form Z update.
///
/// Blocks provably below the prox threshold are screened out through the bound
/// ||T_j|| <= ||B_j|| + sigma (||X_j^T V_ref|| + ||X_j|| ||V - V_ref||); their
/// prox, gradient and curvature contributions vanish exactly, so nothing inside
/// the iteration touches the full design. One product X^T V materializes the
/// exact dual state at convergence.
inline SolveResult solve(const DesignView& design, const PenaltyParams& params,
                         const DalConfig& config, const DalState* warm = nullptr) {
    using clock = std::chrono::steady_clock;
    const auto t_solve0 = clock::now();
    const int n = design.n();
    const int q = design.q();
    const int k = design.k;
    const int p = design.p;
    if (params.weights.size() != p) throw DimensionMismatchError("one weight per block expected");
    if (!design.X->allFinite() || !design.Y->allFinite())
        throw ValidationError("design must be finite");

    SolveResult result;
    Eigen::MatrixXd V, B;
    double sigma;
    if (warm && warm->V.size() > 0) {
        V = warm->V;
        B = warm->B;
        sigma = warm->sigma;
        if (!(sigma > 0.0)) sigma = std::max(5.0 / p, 1e-4);
        sigma = std::min(sigma, config.sigma_cap);
    } else {
        V = Eigen::MatrixXd::Zero(n, q);
        B = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(p) * k, q);
        sigma = config.sigma0 > 0.0 ? config.sigma0 : std::max(5.0 / p, 1e-4);
    }

    Eigen::VectorXd x_norms(p);
    if (design.x_norm_cache)
        x_norms = *design.x_norm_cache;
    else
        for (int j = 0; j < p; ++j) x_norms[j] = block_norm(design.block(j));
    const double denom1 = 1.0 + detail::sum_row_norms(*design.Y) + x_norms.sum();

    const auto block_of = [k](Eigen::MatrixXd& M, int j) {
        return M.middleRows(static_cast<Eigen::Index>(j) * k, k);
    };

    // reference point of the screening bounds
    Eigen::MatrixXd V_ref = V;
    Eigen::MatrixXd XtV_ref;  // exact X^T V_ref
    if (V.cwiseAbs().maxCoeff() == 0.0)
        XtV_ref = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(p) * k, q);
    else if (warm && warm->XtV.rows() == static_cast<Eigen::Index>(p) * k &&
             warm->XtV.cols() == q)
        XtV_ref = warm->XtV;
    else
        XtV_ref = design.X->transpose() * V;
    double delta = 0.0;       // ||V - V_ref||
    Eigen::VectorXd h_ref(p);  // ||(X^T V_ref)_j||
    for (int j = 0; j < p; ++j) h_ref[j] = block_norm(block_of(XtV_ref, j));

    Eigen::MatrixXd T = B - sigma * XtV_ref;
    Eigen::VectorXd t_norms = detail::block_norms(T, p, k);  // exact for fresh blocks
    Eigen::VectorXd b_norm(p), b_sq(p);
    for (int j = 0; j < p; ++j) {
        b_norm[j] = block_norm(block_of(B, j));
        b_sq[j] = b_norm[j] * b_norm[j];
    }
    const auto threshold = [&](int j) { return sigma * params.weights[j] * params.lambda1; };

    // fresh[j]: T_j and t_norms[j] are exact at the current V. A stale block is
    // provably inactive while its bound stays below the threshold; the bound is
    // scale-free in sigma once the block multiplier has been zeroed.
    std::vector<char> fresh(p);
    for (int j = 0; j < p; ++j) fresh[j] = t_norms[j] >= threshold(j) ? 1 : 0;
    const auto stale_bound = [&](int j, double dist) {
        return b_norm[j] + sigma * (h_ref[j] + x_norms[j] * dist);
    };

    std::vector<Eigen::MatrixXd> xjd(p);  // X_j^T D for fresh blocks, per step
    const auto promote = [&](int j) {
        auto T_j = block_of(T, j);
        T_j = block_of(B, j) -
              sigma * (block_of(XtV_ref, j) + design.block(j).transpose() * (V - V_ref));
        t_norms[j] = block_norm(T_j);
        fresh[j] = 1;
    };

    const auto psi_terms = [&](double norm_j, int j) {
        const double w_j = params.weights[j];
        const double pn = prox_scale(norm_j, sigma, w_j, params) * norm_j;
        return (1.0 + sigma * w_j * params.lambda2) * pn * pn - b_sq[j];
    };

    Eigen::MatrixXd grad(n, q), D;
    Eigen::MatrixXd Z = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(p) * k, q);
    // multiplier rows zeroed while stale, kept so Z can be materialized exactly
    std::vector<std::pair<int, Eigen::MatrixXd>> stale_b_old;

    const auto finalize = [&](SolveStatus status, const std::vector<int>& active,
                              const Eigen::MatrixXd* known_XtV) {
        result.status = status;
        Eigen::MatrixXd XtV = known_XtV ? *known_XtV : design.X->transpose() * V;
        for (int j = 0; j < p; ++j) {
            if (fresh[j]) continue;
            Eigen::MatrixXd b_old = Eigen::MatrixXd::Zero(k, q);
            for (const auto& [idx, rows] : stale_b_old)
                if (idx == j) b_old = rows;
            block_of(Z, j) = b_old / sigma - block_of(XtV, j);
        }
        result.state = DalState{V, Z, B, sigma, active, std::move(XtV)};
        result.elapsed_ms =
            std::chrono::duration<double, std::milli>(clock::now() - t_solve0).count();
    };

    for (int s = 0; s < config.max_outer; ++s) {
        const auto t_outer0 = clock::now();
        const double tol_inner = std::min(config.tol_kkt1, std::pow(0.1, s));
        int newton_steps = 0;
        int halvings = 0;
        double res1 = 0.0;
        double psi_cur;
        {
            double acc = 0.0;
            for (int j = 0; j < p; ++j) acc += psi_terms(t_norms[j], j);
            psi_cur = dual_objective_h_star(design, V) + acc / (2.0 * sigma);
        }
        std::vector<double> psi_steps{psi_cur};

        for (int m = 0; m < config.max_inner; ++m) {
            grad = V + *design.Y;
            for (int j = 0; j < p; ++j) {
                if (!fresh[j]) continue;
                const double c = prox_scale(t_norms[j], sigma, params.weights[j], params);
                if (c != 0.0) grad.noalias() -= design.block(j) * (c * block_of(T, j));
            }
            res1 = detail::sum_row_norms(grad) / denom1;
            if (res1 <= tol_inner) break;
            if (res1 <= 1e2 * std::numeric_limits<double>::epsilon()) break;

            NewtonSystem sys;
            sys.design = design;
            sys.sigma = sigma;
            sys.grad = grad;
            for (int j = 0; j < p; ++j) {
                if (!fresh[j] || t_norms[j] < threshold(j)) continue;
                sys.active.push_back(j);
                const auto pc =
                    detail::prox_curvature(t_norms[j], sigma, params.weights[j], params);
                sys.a.push_back(pc.a);
                sys.b.push_back(pc.b);
                Eigen::MatrixXd T_j = block_of(T, j);
                sys.t.emplace_back(Eigen::Map<Eigen::VectorXd>(T_j.data(), T_j.size()));
            }
            sys.mode = config.mode;
            if (sys.mode == SolverMode::automatic)
                sys.mode = (static_cast<int>(sys.active.size()) < n) ? SolverMode::woodbury
                                                                     : SolverMode::direct;
            try {
                D = newton_direction(sys);
            } catch (const FactorizationError&) {
                finalize(SolveStatus::factorization_failure, sys.active, nullptr);
                return result;
            }
            for (int j = 0; j < p; ++j)
                if (fresh[j]) xjd[j].noalias() = design.block(j).transpose() * D;
            const double d_norm = D.norm();

            // unit Newton step with a halving safeguard against float-level
            // ascent; each trial first promotes any stale block whose bound
            // could reach the threshold at the trial point
            double step = 1.0;
            double psi_try = 0.0;
            bool rejected_unit = false;
            bool accepted = false;
            for (int h = 0; h <= 20; ++h) {
                const double trial_dist = delta + step * d_norm;
                for (int j = 0; j < p; ++j) {
                    if (fresh[j] || stale_bound(j, trial_dist) < threshold(j)) continue;
                    promote(j);
                    xjd[j].noalias() = design.block(j).transpose() * D;
                }
                double acc = 0.0;
                for (int j = 0; j < p; ++j) {
                    if (!fresh[j]) {
                        acc -= b_sq[j];  // prox gate provably closed
                        continue;
                    }
                    const double norm_try =
                        block_norm((block_of(T, j) - (step * sigma) * xjd[j]).eval());
                    acc += psi_terms(norm_try, j);
                }
                psi_try = dual_objective_h_star(design, (V + step * D).eval()) +
                          acc / (2.0 * sigma);
                if (psi_try <= psi_cur + 1e-12 * (1.0 + std::abs(psi_cur))) {
                    accepted = true;
                    break;
                }
                step *= 0.5;
                rejected_unit = true;
            }
            if (rejected_unit) {
                ++result.safeguard_triggers;
                halvings += 1;
            }
            if (!accepted) break;  // no step yields descent at float level
            V.noalias() += step * D;
            delta = (V - V_ref).norm();
            for (int j = 0; j < p; ++j) {
                if (!fresh[j]) continue;
                block_of(T, j).noalias() -= (step * sigma) * xjd[j];
                t_norms[j] = block_norm(block_of(T, j));
            }
            psi_cur = psi_try;
            psi_steps.push_back(psi_cur);
            ++newton_steps;
        }
        result.total_newton_steps += newton_steps;

        // multiplier and Z updates: B_new = prox_{sigma pi}(T), Z = (T - B_new)/sigma.
        // Stale rows have prox = 0 exactly; their unknown ||Z_j|| enter the res3
        // standardization through two-sided bounds. Stopping on the conservative
        // side is always sound; when the decision is ambiguous one exact refresh
        // settles it.
        double num3 = 0.0, z_low = 0.0, z_high = 0.0, dual_conj = 0.0;
        std::vector<int> active;
        stale_b_old.clear();
        const double sigma_next = std::min(sigma * config.sigma_growth, config.sigma_cap);
        for (int j = 0; j < p; ++j) {
            if (!fresh[j]) {
                const double spread = h_ref[j] + x_norms[j] * delta;
                const double gap = h_ref[j] - x_norms[j] * delta;
                z_low += std::max({0.0, b_norm[j] / sigma - spread, gap - b_norm[j] / sigma});
                z_high += b_norm[j] / sigma + spread;
                num3 += b_norm[j] / sigma;
                if (b_norm[j] > 0.0) {
                    stale_b_old.emplace_back(j, Eigen::MatrixXd(block_of(B, j)));
                    block_of(B, j).setZero();
                    b_norm[j] = 0.0;
                    b_sq[j] = 0.0;
                }
                continue;
            }
            const double thr = threshold(j);
            if (t_norms[j] >= thr) active.push_back(j);
            const double c = prox_scale(t_norms[j], sigma, params.weights[j], params);
            const auto T_j = block_of(T, j);
            auto B_j = block_of(B, j);
            auto Z_j = block_of(Z, j);
            Z_j = ((1.0 - c) / sigma) * T_j;
            num3 += block_norm((B_j - c * T_j).eval()) / sigma;
            const double z_norm = block_norm(Z_j);
            z_low += z_norm;
            z_high += z_norm;
            const double z_excess = z_norm - params.weights[j] * params.lambda1;
            if (z_excess > 0.0)
                dual_conj += z_excess * z_excess / (2.0 * params.weights[j] * params.lambda2);
            // X_j^T V stays implicit in the sigma rescale of T_j
            const Eigen::MatrixXd xv_j = (B_j - T_j) / sigma;
            B_j = c * T_j;
            b_norm[j] = block_norm(B_j);
            b_sq[j] = b_norm[j] * b_norm[j];
            block_of(T, j) = B_j - sigma_next * xv_j;
        }
        const double sum_v_rows = detail::sum_row_norms(V);
        double res3 = num3 / (1.0 + sum_v_rows + z_low);
        bool converged_now = res3 <= config.tol_kkt3;
        if (!converged_now && num3 / (1.0 + sum_v_rows + z_high) <= config.tol_kkt3) {
            // bounds too loose to decide: re-reference and settle exactly
            XtV_ref = design.X->transpose() * V;
            V_ref = V;
            delta = 0.0;
            double z_sum = 0.0;
            for (int j = 0; j < p; ++j) {
                h_ref[j] = block_norm(block_of(XtV_ref, j));
                if (fresh[j]) continue;
                Eigen::MatrixXd b_old = Eigen::MatrixXd::Zero(k, q);
                for (const auto& [idx, rows] : stale_b_old)
                    if (idx == j) b_old = rows;
                block_of(Z, j) = b_old / sigma - block_of(XtV_ref, j);
                block_of(T, j) = block_of(B, j) - sigma_next * block_of(XtV_ref, j);
                t_norms[j] = block_norm(block_of(T, j));
                fresh[j] = 1;
            }
            stale_b_old.clear();
            for (int j = 0; j < p; ++j) z_sum += block_norm(block_of(Z, j));
            res3 = num3 / (1.0 + sum_v_rows + z_sum);
            converged_now = res3 <= config.tol_kkt3;
        }

        OuterDiagnostics diag;
        diag.sigma = sigma;
        diag.r = static_cast<int>(active.size());
        diag.res1 = res1;
        diag.res3 = res3;
        diag.psi = psi_cur;
        diag.primal_obj = primal_objective(design, B, params);
        diag.dual_obj = -(dual_objective_h_star(design, V) + dual_conj);
        diag.newton_steps = newton_steps;
        diag.safeguard_halvings = halvings;
        diag.psi_steps = std::move(psi_steps);
        diag.elapsed_ms =
            std::chrono::duration<double, std::milli>(clock::now() - t_outer0).count();
        result.outer.push_back(diag);
        ++result.outer_iters;

        if (converged_now) {
            finalize(SolveStatus::converged, active, delta == 0.0 ? &XtV_ref : nullptr);
            return result;
        }

        sigma = sigma_next;
        for (int j = 0; j < p; ++j)
            if (fresh[j]) t_norms[j] = block_norm(block_of(T, j));
    }

    std::vector<int> active;
    for (int j = 0; j < p; ++j)
        if (fresh[j] && t_norms[j] >= threshold(j)) active.push_back(j);
    finalize(SolveStatus::max_iterations, active, nullptr);
    return result;
}

}  // namespace fregsel
