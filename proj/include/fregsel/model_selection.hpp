#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "fregsel/dal.hpp"

namespace fregsel {

enum class Criterion { gcv, cv };
enum class AdaptiveMode { none, full, soft };

struct PathConfig {
    int n_lambda = 50;
    double c_min = 0.01;
    double alpha = 0.2;  // lambda2/lambda1 = (1-alpha)/alpha
    std::optional<int> max_selected;
    Criterion criterion = Criterion::gcv;
    int cv_folds = 5;
    AdaptiveMode adaptive = AdaptiveMode::none;
    std::uint64_t seed = 0;
    int threads = 1;
    bool score_raw = false;  // adaptive paths score without relaxation
    double ridge_eps = -1.0;  // < 0: 1e-10 tr(X_J^T X_J)/(rk)
    DalConfig solver;
};

struct PathRecord {
    double c_lambda = 0.0;
    double lambda1 = 0.0;
    double lambda2 = 0.0;
    std::vector<int> selected;
    Eigen::MatrixXd B_raw;
    Eigen::MatrixXd B_relaxed;
    double criterion_score = std::numeric_limits<double>::infinity();
    double cv_se = 0.0;
    int outer_iters = 0;
    double elapsed_ms = 0.0;
    bool converged = false;
    bool dof_degenerate = false;
    bool solver_failed = false;
    int newton_steps = 0;
    int safeguard_triggers = 0;
    std::vector<OuterDiagnostics> outer;
};

struct PathResult {
    std::vector<PathRecord> records;
    int best_index = -1;
    Eigen::VectorXd weights_used;
    double lambda_max_value = 0.0;
    double total_elapsed_ms = 0.0;
    bool soft_fallback_full = false;
    // For restricted (adaptive) paths: position j refers to this original block.
    std::vector<int> block_index_map;

    const PathRecord& best() const { return records.at(best_index); }
};

/// Path anchor: max_j ||(X^T Y)_j|| / w_j (block Frobenius norms).
inline double lambda_max(const DesignView& design, const Eigen::VectorXd& weights) {
    if (weights.size() != design.p) throw DimensionMismatchError("one weight per block expected");
    const Eigen::MatrixXd G = design.X->transpose() * *design.Y;
    double best = 0.0;
    for (int j = 0; j < design.p; ++j)
        best = std::max(best, block_norm(G.middleRows(static_cast<Eigen::Index>(j) * design.k,
                                                      design.k)) /
                                  weights[j]);
    return best;
}

inline std::vector<int> selected_blocks(const Eigen::MatrixXd& B, int p, int k,
                                        double tol = 1e-12) {
    std::vector<int> out;
    for (int j = 0; j < p; ++j)
        if (block_norm(B.middleRows(static_cast<Eigen::Index>(j) * k, k)) > tol)
            out.push_back(j);
    return out;
}

namespace detail {

inline Eigen::MatrixXd gather_columns(const Eigen::MatrixXd& X, const std::vector<int>& blocks,
                                      int k) {
    Eigen::MatrixXd out(X.rows(), static_cast<Eigen::Index>(blocks.size()) * k);
    for (std::size_t i = 0; i < blocks.size(); ++i)
        out.middleCols(static_cast<Eigen::Index>(i) * k, k) =
            X.middleCols(static_cast<Eigen::Index>(blocks[i]) * k, k);
    return out;
}

inline Eigen::MatrixXd gather_rows(const Eigen::MatrixXd& M, const std::vector<int>& rows) {
    Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), M.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) out.row(i) = M.row(rows[i]);
    return out;
}

inline void parallel_for(int count, int threads, const std::function<void(int)>& body) {
    threads = std::max(1, std::min(threads, count));
    if (threads == 1) {
        for (int i = 0; i < count; ++i) body(i);
        return;
    }
    std::vector<std::thread> pool;
    std::atomic<int> next{0};
    for (int t = 0; t < threads; ++t)
        pool.emplace_back([&]() {
            for (int i = next.fetch_add(1); i < count; i = next.fetch_add(1)) body(i);
        });
    for (auto& th : pool) th.join();
}

}  // namespace detail

/// Least-squares refit on the selected blocks: B_J = (X_J^T X_J + eps I)^-1 X_J^T Y,
/// zero elsewhere. eps < 0 picks 1e-10 tr(X_J^T X_J)/(rk).
inline Eigen::MatrixXd relax(const DesignView& design, const std::vector<int>& selected,
                             double ridge_eps = -1.0) {
    if (selected.empty()) throw ValidationError("relax needs a nonempty selection");
    const int k = design.k;
    const Eigen::MatrixXd X_J = detail::gather_columns(*design.X, selected, k);
    Eigen::MatrixXd G = X_J.transpose() * X_J;
    const double eps = ridge_eps >= 0.0 ? ridge_eps : 1e-10 * G.trace() / G.rows();
    G.diagonal().array() += eps;
    Eigen::LDLT<Eigen::MatrixXd> ldlt(G);
    if (ldlt.info() != Eigen::Success) throw FactorizationError("relaxation normal equations failed");
    const Eigen::MatrixXd B_J = ldlt.solve(X_J.transpose() * *design.Y);
    if (!B_J.allFinite()) throw FactorizationError("relaxation produced non-finite coefficients");
    Eigen::MatrixXd B =
        Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(design.p) * k, design.q());
    for (std::size_t i = 0; i < selected.size(); ++i)
        B.middleRows(static_cast<Eigen::Index>(selected[i]) * k, k) =
            B_J.middleRows(static_cast<Eigen::Index>(i) * k, k);
    return B;
}

/// gcv = rss / (n - q*nu)^2 with nu = tr(X_J (X_J^T X_J + lambda2 I)^-1 X_J^T).
/// The q factor reduces to the response dimension: k score columns for
/// function-on-function fits, 1 for scalar responses.
inline double gcv_score(const DesignView& design, const std::vector<int>& selected,
                        const Eigen::MatrixXd& B, double lambda2,
                        bool* degenerate = nullptr) {
    if (degenerate) *degenerate = false;
    const int n = design.n();
    if (selected.empty()) return design.Y->squaredNorm() / (static_cast<double>(n) * n);
    const int k = design.k;
    const Eigen::MatrixXd X_J = detail::gather_columns(*design.X, selected, k);
    const Eigen::Index rk = X_J.cols();
    Eigen::MatrixXd M = X_J.transpose() * X_J;
    M.diagonal().array() += lambda2;
    Eigen::LDLT<Eigen::MatrixXd> ldlt(M);
    double nu;
    if (lambda2 == 0.0) {
        nu = static_cast<double>(rk);
    } else {
        const Eigen::MatrixXd Minv = ldlt.solve(Eigen::MatrixXd::Identity(rk, rk));
        nu = static_cast<double>(rk) - lambda2 * Minv.trace();
    }
    Eigen::MatrixXd B_J(rk, design.q());
    for (std::size_t i = 0; i < selected.size(); ++i)
        B_J.middleRows(static_cast<Eigen::Index>(i) * k, k) =
            B.middleRows(static_cast<Eigen::Index>(selected[i]) * k, k);
    const double rss = (*design.Y - X_J * B_J).squaredNorm();
    const double denom = n - design.q() * nu;
    if (!(denom > 0.0) || !std::isfinite(nu)) {
        if (degenerate) *degenerate = true;
        return std::numeric_limits<double>::infinity();
    }
    return rss / (denom * denom);
}

/// Per-block penalty weights from relaxed block norms. Full mode: 1/||B_j||;
/// soft mode scales by the sample standard deviation of the norms.
inline Eigen::VectorXd adaptive_weights(const std::vector<double>& block_norms,
                                        AdaptiveMode mode) {
    if (mode == AdaptiveMode::none) throw ValidationError("adaptive mode required");
    const int r = static_cast<int>(block_norms.size());
    for (double s : block_norms)
        if (s < 1e-12) throw ZeroBlockError("selected block with (near-)zero norm");
    double scale = 1.0;
    if (mode == AdaptiveMode::soft) {
        double mean = std::accumulate(block_norms.begin(), block_norms.end(), 0.0) / r;
        double ss = 0.0;
        for (double s : block_norms) ss += (s - mean) * (s - mean);
        const double sd = r > 1 ? std::sqrt(ss / (r - 1)) : 0.0;
        if (sd < 1e-12)
            throw SoftDegenerateError("block norms have zero spread; soft weights degenerate");
        scale = sd;
    }
    Eigen::VectorXd w(r);
    for (int j = 0; j < r; ++j) w[j] = scale / block_norms[j];
    return w;
}

namespace detail {

// mean_i ||y_i - yhat_i|| / ||y_i|| over rows
inline double standardized_prediction_error(const Eigen::MatrixXd& Y,
                                            const Eigen::MatrixXd& Yhat) {
    double acc = 0.0;
    for (Eigen::Index i = 0; i < Y.rows(); ++i) {
        const double denom = Y.row(i).norm();
        const double diff = (Y.row(i) - Yhat.row(i)).norm();
        acc += denom > 1e-15 ? diff / denom : diff;
    }
    return acc / Y.rows();
}

inline std::vector<std::vector<int>> fold_assignment(int n, int folds, std::uint64_t seed) {
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::vector<int>> out(folds);
    for (int i = 0; i < n; ++i) out[i % folds].push_back(order[i]);
    for (auto& f : out) std::sort(f.begin(), f.end());
    return out;
}

struct LambdaFit {
    Eigen::MatrixXd B_est;
    std::vector<int> selected;
    bool failed = false;
};

// Warm-started sweep over a fixed lambda sequence; estimates are relaxed
// unless score_raw is set.
inline std::vector<LambdaFit> fit_lambda_sequence(
    const DesignView& design, const std::vector<std::pair<double, double>>& lambdas,
    const Eigen::VectorXd& weights, const DalConfig& solver, bool score_raw, double ridge_eps) {
    std::vector<LambdaFit> out;
    out.reserve(lambdas.size());
    DalState warm;
    bool have_warm = false;
    for (const auto& [l1, l2] : lambdas) {
        PenaltyParams params(l1, l2, weights);
        SolveResult res = solve(design, params, solver, have_warm ? &warm : nullptr);
        LambdaFit fit;
        if (res.status == SolveStatus::factorization_failure) {
            fit.failed = true;
            fit.B_est = Eigen::MatrixXd::Zero(design.X->cols(), design.q());
            out.push_back(std::move(fit));
            continue;
        }
        warm = res.state;
        have_warm = true;
        fit.selected = selected_blocks(res.state.B, design.p, design.k);
        if (score_raw || fit.selected.empty())
            fit.B_est = res.state.B;
        else
            fit.B_est = relax(design, fit.selected, ridge_eps);
        out.push_back(std::move(fit));
    }
    return out;
}

// Held-out standardized errors, one row per lambda, one column per fold.
inline Eigen::MatrixXd cv_fold_errors(const DesignView& design,
                                      const std::vector<std::pair<double, double>>& lambdas,
                                      const Eigen::VectorXd& weights, const DalConfig& solver,
                                      bool score_raw, double ridge_eps, int folds,
                                      std::uint64_t seed, int threads) {
    const int n = design.n();
    if (folds < 2) throw ValidationError("cv needs at least 2 folds");
    if (n < 2 * folds) throw ValidationError("cv needs n >= 2*folds");
    const auto assignment = fold_assignment(n, folds, seed);
    Eigen::MatrixXd errors(static_cast<Eigen::Index>(lambdas.size()), folds);
    parallel_for(folds, threads, [&](int f) {
        const auto& held = assignment[f];
        std::vector<int> train;
        train.reserve(n - held.size());
        std::size_t hpos = 0;
        for (int i = 0; i < n; ++i) {
            if (hpos < held.size() && held[hpos] == i)
                ++hpos;
            else
                train.push_back(i);
        }
        const Eigen::MatrixXd X_tr = gather_rows(*design.X, train);
        const Eigen::MatrixXd Y_tr = gather_rows(*design.Y, train);
        const Eigen::MatrixXd X_te = gather_rows(*design.X, held);
        const Eigen::MatrixXd Y_te = gather_rows(*design.Y, held);
        DesignView sub(Y_tr, X_tr, design.p, design.k);
        const auto fits = fit_lambda_sequence(sub, lambdas, weights, solver, score_raw, ridge_eps);
        for (std::size_t i = 0; i < fits.size(); ++i) {
            if (fits[i].failed) {
                errors(static_cast<Eigen::Index>(i), f) =
                    std::numeric_limits<double>::infinity();
                continue;
            }
            const Eigen::MatrixXd Yhat = X_te * fits[i].B_est;
            errors(static_cast<Eigen::Index>(i), f) = standardized_prediction_error(Y_te, Yhat);
        }
    });
    return errors;
}

}  // namespace detail

/// Mean over folds of the held-out standardized prediction error for a single
/// penalty pair. Fold assignment is a deterministic function of the seed.
inline double cv_score(const DesignView& design, double lambda1, double lambda2, int folds,
                       std::uint64_t seed, bool with_relaxation = true, int threads = 1) {
    const std::vector<std::pair<double, double>> lambdas{{lambda1, lambda2}};
    const Eigen::VectorXd w = Eigen::VectorXd::Ones(design.p);
    const Eigen::MatrixXd errors = detail::cv_fold_errors(
        design, lambdas, w, DalConfig{}, !with_relaxation, -1.0, folds, seed, threads);
    return errors.row(0).mean();
}

/// Warm-started search over a geometric c grid from 1 to c_min, scoring each
/// solution with gcv or k-fold cv. The first path point (c = 1) anchors the
/// null model: lambda1 = c * lambda_max, lambda2 = (1-alpha)/alpha * lambda1.
inline PathResult run_path(const DesignView& design_in, const PathConfig& config,
                           const Eigen::VectorXd& weights) {
    using clock = std::chrono::steady_clock;
    const auto t0 = clock::now();
    if (config.n_lambda < 1) throw ValidationError("n_lambda must be positive");
    if (!(config.c_min > 0.0 && config.c_min < 1.0))
        throw ValidationError("c_min must lie in (0,1)");
    if (!(config.alpha > 0.0 && config.alpha < 1.0))
        throw ValidationError("alpha must lie in (0,1)");

    // per-block design norms are reused by every solve along the path
    DesignView design = design_in;
    Eigen::VectorXd x_norms(design.p);
    if (!design.x_norm_cache) {
        for (int j = 0; j < design.p; ++j) x_norms[j] = block_norm(design.block(j));
        design.x_norm_cache = &x_norms;
    }

    PathResult result;
    result.weights_used = weights;
    result.lambda_max_value = lambda_max(design, weights);
    result.block_index_map.resize(design.p);
    std::iota(result.block_index_map.begin(), result.block_index_map.end(), 0);
    const double anchor = std::max(result.lambda_max_value, 1e-10);
    const double ratio = (1.0 - config.alpha) / config.alpha;

    std::vector<double> cs(config.n_lambda);
    for (int i = 0; i < config.n_lambda; ++i)
        cs[i] = config.n_lambda == 1
                    ? 1.0
                    : std::pow(config.c_min, static_cast<double>(i) / (config.n_lambda - 1));

    DalState warm;
    bool have_warm = false;
    for (int i = 0; i < config.n_lambda; ++i) {
        PathRecord rec;
        rec.c_lambda = cs[i];
        rec.lambda1 = cs[i] * anchor;
        rec.lambda2 = ratio * rec.lambda1;
        PenaltyParams params(rec.lambda1, rec.lambda2, weights);
        SolveResult res = solve(design, params, config.solver, have_warm ? &warm : nullptr);
        rec.outer_iters = res.outer_iters;
        rec.elapsed_ms = res.elapsed_ms;
        rec.converged = res.converged();
        rec.newton_steps = res.total_newton_steps;
        rec.safeguard_triggers = res.safeguard_triggers;
        rec.outer = std::move(res.outer);
        if (res.status == SolveStatus::factorization_failure) {
            rec.solver_failed = true;
            result.records.push_back(std::move(rec));
            continue;  // path continues from the previous warm state
        }
        warm = res.state;
        have_warm = true;
        rec.B_raw = res.state.B;
        rec.selected = selected_blocks(rec.B_raw, design.p, design.k);
        if (config.max_selected &&
            static_cast<int>(rec.selected.size()) > *config.max_selected)
            break;  // early stop, offending point not recorded
        rec.B_relaxed = rec.selected.empty()
                            ? Eigen::MatrixXd::Zero(design.X->cols(), design.q())
                            : relax(design, rec.selected, config.ridge_eps);
        if (config.criterion == Criterion::gcv) {
            const Eigen::MatrixXd& scored = config.score_raw ? rec.B_raw : rec.B_relaxed;
            rec.criterion_score =
                gcv_score(design, rec.selected, scored, rec.lambda2, &rec.dof_degenerate);
        }
        result.records.push_back(std::move(rec));
    }

    if (config.criterion == Criterion::cv && !result.records.empty()) {
        std::vector<std::pair<double, double>> lambdas;
        lambdas.reserve(result.records.size());
        for (const auto& rec : result.records) lambdas.emplace_back(rec.lambda1, rec.lambda2);
        const Eigen::MatrixXd errors = detail::cv_fold_errors(
            design, lambdas, weights, config.solver, config.score_raw, config.ridge_eps,
            config.cv_folds, config.seed, config.threads);
        for (std::size_t i = 0; i < result.records.size(); ++i) {
            const auto row = errors.row(static_cast<Eigen::Index>(i));
            result.records[i].criterion_score = row.mean();
            double ss = 0.0;
            for (int f = 0; f < config.cv_folds; ++f)
                ss += (row[f] - result.records[i].criterion_score) *
                      (row[f] - result.records[i].criterion_score);
            result.records[i].cv_se =
                std::sqrt(ss / (config.cv_folds - 1)) / std::sqrt(config.cv_folds);
        }
    }

    // best index: plain argmin for gcv; one-standard-error rule toward larger
    // lambda1 (sparser) for cv
    int i_min = -1;
    for (std::size_t i = 0; i < result.records.size(); ++i) {
        if (result.records[i].solver_failed) continue;
        if (i_min < 0 || result.records[i].criterion_score <
                             result.records[i_min].criterion_score)
            i_min = static_cast<int>(i);
    }
    result.best_index = i_min;
    if (i_min >= 0 && config.criterion == Criterion::cv) {
        const double thr =
            result.records[i_min].criterion_score + result.records[i_min].cv_se;
        for (std::size_t i = 0; i < result.records.size(); ++i) {
            if (result.records[i].solver_failed) continue;
            if (result.records[i].criterion_score <= thr) {
                result.best_index = static_cast<int>(i);
                break;
            }
        }
    }
    result.total_elapsed_ms = std::chrono::duration<double, std::milli>(clock::now() - t0).count();
    return result;
}

struct AdaptiveResult {
    PathResult initial;
    PathResult adaptive;  // over the restricted design; block_index_map maps back
    AdaptiveMode mode = AdaptiveMode::none;
};

/// Adaptive schemes over the blocks selected by the best unweighted solution.
/// Full mode reruns the path on the restricted design with weights 1/||B^R_j||,
/// scored without relaxation. Soft mode re-solves once at the best lambda with
/// sd-scaled weights (falling back to full weights when the norms have no
/// spread), then relaxes.
inline AdaptiveResult run_adaptive(const DesignView& design, const PathConfig& config) {
    if (config.adaptive == AdaptiveMode::none)
        throw ValidationError("run_adaptive requires adaptive mode full or soft");
    AdaptiveResult out;
    out.mode = config.adaptive;

    PathConfig base = config;
    base.score_raw = false;
    out.initial = run_path(design, base, Eigen::VectorXd::Ones(design.p));
    if (out.initial.best_index < 0 || out.initial.best().selected.empty())
        throw EmptyInitialSelectionError("initial path selected no blocks");
    const PathRecord& best = out.initial.best();
    const std::vector<int> J0 = best.selected;
    const int k = design.k;

    const Eigen::MatrixXd X_sub = detail::gather_columns(*design.X, J0, k);
    DesignView sub(*design.Y, X_sub, static_cast<int>(J0.size()), k);
    std::vector<double> norms;
    norms.reserve(J0.size());
    for (int j : J0)
        norms.push_back(block_norm(best.B_relaxed.middleRows(static_cast<Eigen::Index>(j) * k, k)));

    if (config.adaptive == AdaptiveMode::full) {
        const Eigen::VectorXd w = adaptive_weights(norms, AdaptiveMode::full);
        PathConfig sub_cfg = config;
        sub_cfg.score_raw = true;  // criteria evaluated without relaxation
        out.adaptive = run_path(sub, sub_cfg, w);
    } else {
        Eigen::VectorXd w;
        bool fallback = false;
        try {
            w = adaptive_weights(norms, AdaptiveMode::soft);
        } catch (const SoftDegenerateError&) {
            w = adaptive_weights(norms, AdaptiveMode::full);
            fallback = true;
        }
        PathRecord rec;
        rec.c_lambda = best.c_lambda;
        rec.lambda1 = best.lambda1;
        rec.lambda2 = best.lambda2;
        PenaltyParams params(rec.lambda1, rec.lambda2, w);
        SolveResult res = solve(sub, params, config.solver);
        rec.outer_iters = res.outer_iters;
        rec.elapsed_ms = res.elapsed_ms;
        rec.converged = res.converged();
        rec.newton_steps = res.total_newton_steps;
        rec.safeguard_triggers = res.safeguard_triggers;
        rec.outer = std::move(res.outer);
        rec.B_raw = res.state.B;
        rec.selected = selected_blocks(rec.B_raw, sub.p, k);
        rec.B_relaxed = rec.selected.empty()
                            ? Eigen::MatrixXd::Zero(X_sub.cols(), design.q())
                            : relax(sub, rec.selected, config.ridge_eps);
        rec.criterion_score =
            gcv_score(sub, rec.selected, rec.B_raw, rec.lambda2, &rec.dof_degenerate);
        out.adaptive.records.push_back(std::move(rec));
        out.adaptive.best_index = 0;
        out.adaptive.weights_used = w;
        out.adaptive.lambda_max_value = out.initial.lambda_max_value;
        out.adaptive.soft_fallback_full = fallback;
    }
    out.adaptive.block_index_map = J0;
    return out;
}

/// Expands a restricted-path coefficient matrix back to the full block layout.
inline Eigen::MatrixXd expand_blocks(const Eigen::MatrixXd& B_sub,
                                     const std::vector<int>& index_map, int p, int k) {
    Eigen::MatrixXd B = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(p) * k, B_sub.cols());
    for (std::size_t i = 0; i < index_map.size(); ++i)
        B.middleRows(static_cast<Eigen::Index>(index_map[i]) * k, k) =
            B_sub.middleRows(static_cast<Eigen::Index>(i) * k, k);
    return B;
}

}  // namespace fregsel
