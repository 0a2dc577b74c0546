#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "fregsel/io.hpp"
#include "fregsel/model_selection.hpp"
#include "fregsel/scalar.hpp"

namespace fregsel {

struct FitOptions {
    bool scalar_mode = false;
    double variance_threshold = 0.90;
    int k_max = 10;
    std::optional<int> fixed_k;
    // when set, a single solve at this (lambda1, lambda2) replaces the path
    std::optional<std::pair<double, double>> fixed_lambda;
    PathConfig path;
};

namespace detail {

inline PathResult single_lambda_path(const DesignView& view, const PathConfig& config,
                                     double lambda1, double lambda2) {
    PathResult pr;
    pr.weights_used = Eigen::VectorXd::Ones(view.p);
    pr.lambda_max_value = lambda_max(view, pr.weights_used);
    pr.block_index_map.resize(view.p);
    std::iota(pr.block_index_map.begin(), pr.block_index_map.end(), 0);
    PathRecord rec;
    rec.c_lambda = pr.lambda_max_value > 0.0 ? lambda1 / pr.lambda_max_value : 0.0;
    rec.lambda1 = lambda1;
    rec.lambda2 = lambda2;
    PenaltyParams params(lambda1, lambda2, pr.weights_used);
    SolveResult res = solve(view, params, config.solver);
    rec.outer_iters = res.outer_iters;
    rec.elapsed_ms = res.elapsed_ms;
    rec.converged = res.converged();
    rec.newton_steps = res.total_newton_steps;
    rec.safeguard_triggers = res.safeguard_triggers;
    rec.outer = std::move(res.outer);
    if (res.status == SolveStatus::factorization_failure) {
        rec.solver_failed = true;
    } else {
        rec.B_raw = res.state.B;
        rec.selected = selected_blocks(rec.B_raw, view.p, view.k);
        rec.B_relaxed = rec.selected.empty()
                            ? Eigen::MatrixXd::Zero(view.X->cols(), view.q())
                            : relax(view, rec.selected, config.ridge_eps);
        rec.criterion_score =
            gcv_score(view, rec.selected, rec.B_relaxed, lambda2, &rec.dof_degenerate);
    }
    pr.records.push_back(std::move(rec));
    pr.best_index = pr.records.front().solver_failed ? -1 : 0;
    pr.total_elapsed_ms = pr.records.front().elapsed_ms;
    return pr;
}

}  // namespace detail

/// Fitted function-on-function model with coefficients mapped back to the raw
/// data scale (the solver works on standardized curves).
struct FunctionalFit {
    FpcBasis basis;
    StandardizationRecord y_record;
    std::vector<StandardizationRecord> x_records;
    PathResult initial_path;
    std::optional<PathResult> adaptive_path;
    std::vector<int> selected;
    std::vector<std::string> selected_names;
    std::vector<Eigen::MatrixXd> surfaces;  // raw scale, aligned with selected
    Eigen::VectorXd intercept;              // raw-scale intercept curve
    int k = 0;
    int k_est = 0;
    bool soft_fallback = false;
    bool null_model = false;  // adaptive requested but the initial best was empty
    double elapsed_ms = 0.0;
};

namespace detail {

// Score-space block -> surface on the standardized scale. The score model
// Y = sum_j X_j B_j pairs feature component a with response component b in
// B_j(a, b), so the surface over (t, s) uses the transposed block.
inline Eigen::MatrixXd block_to_surface(const Eigen::MatrixXd& B_j, const FpcBasis& basis) {
    return reconstruct_surface(B_j.transpose(), basis);
}

inline Eigen::MatrixXd surface_to_raw_scale(const Eigen::MatrixXd& surf_std,
                                            const Eigen::VectorXd& sd_y,
                                            const Eigen::VectorXd& sd_x) {
    Eigen::MatrixXd raw = surf_std;
    raw.array().colwise() *= sd_y.array();
    raw.array().rowwise() /= sd_x.transpose().array();
    return raw;
}

// k chosen for estimation by 5-fold cv of the least-squares refit on the
// selected features, with held-out errors measured in curve space so that
// different k are comparable.
inline int reselect_k_by_cv(const CurveSet& response_std, const std::vector<CurveSet>& features_std,
                            const std::vector<int>& selected, int k_limit, int folds,
                            std::uint64_t seed, double ridge_eps) {
    const auto dec = fpc_decompose(response_std);
    k_limit = std::min<int>(k_limit, static_cast<int>(dec.eigenvalues.size()));
    const int n = response_std.n();
    const auto assignment = fold_assignment(n, folds, seed);
    const Eigen::VectorXd w = response_std.grid.quadrature_weights();

    int best_k = 1;
    double best_err = std::numeric_limits<double>::infinity();
    for (int k_cand = 1; k_cand <= k_limit; ++k_cand) {
        if (static_cast<int>(selected.size()) * k_cand >= n - static_cast<int>(n / folds) - 1)
            break;
        FpcBasis basis;
        basis.functions = dec.functions.leftCols(k_cand);
        basis.eigenvalues = dec.eigenvalues.head(k_cand);
        basis.explained_variance = Eigen::VectorXd::Zero(k_cand);
        basis.grid = response_std.grid;
        const Eigen::MatrixXd Y_scores = project(response_std, basis);
        Eigen::MatrixXd X_scores(n, static_cast<Eigen::Index>(selected.size()) * k_cand);
        for (std::size_t i = 0; i < selected.size(); ++i)
            X_scores.middleCols(static_cast<Eigen::Index>(i) * k_cand, k_cand) =
                project(features_std[selected[i]], basis);

        double err = 0.0;
        int rows = 0;
        for (int f = 0; f < folds; ++f) {
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
            const Eigen::MatrixXd X_tr = gather_rows(X_scores, train);
            const Eigen::MatrixXd Y_tr = gather_rows(Y_scores, train);
            DesignView sub(Y_tr, X_tr, static_cast<int>(selected.size()), k_cand);
            std::vector<int> all(selected.size());
            std::iota(all.begin(), all.end(), 0);
            Eigen::MatrixXd B;
            try {
                B = relax(sub, all, ridge_eps);
            } catch (const FactorizationError&) {
                err = std::numeric_limits<double>::infinity();
                break;
            }
            for (int i : held) {
                const Eigen::VectorXd scores_hat =
                    (X_scores.row(i) * B).transpose();
                const Eigen::VectorXd y_hat = basis.functions * scores_hat;
                const Eigen::VectorXd y_i = response_std.values.row(i).transpose();
                const double denom = std::sqrt((y_i.array().square() * w.array()).sum());
                const double diff =
                    std::sqrt(((y_i - y_hat).array().square() * w.array()).sum());
                err += denom > 1e-15 ? diff / denom : diff;
                ++rows;
            }
            if (!std::isfinite(err)) break;
        }
        if (rows == 0) continue;
        err /= rows;
        if (err < best_err) {
            best_err = err;
            best_k = k_cand;
        }
    }
    return best_k;
}

}  // namespace detail

/// Standardize, build the score design, run the path (plus the requested
/// adaptive scheme) and map the winning coefficients back to raw-scale
/// surfaces with an intercept curve.
inline FunctionalFit fit_functional(const CurveSet& response_raw,
                                    const std::vector<CurveSet>& features_raw,
                                    const FitOptions& options,
                                    std::vector<std::string> names = {}) {
    using clock = std::chrono::steady_clock;
    const auto t0 = clock::now();
    FunctionalFit fit;

    auto [response_std, y_rec] = standardize(response_raw);
    fit.y_record = std::move(y_rec);
    std::vector<CurveSet> features_std;
    features_std.reserve(features_raw.size());
    fit.x_records.reserve(features_raw.size());
    for (const auto& f : features_raw) {
        if (!f.grid.same_as(response_raw.grid))
            throw GridMismatchError("features and response must share one grid");
        auto [std_f, rec] = standardize(f);
        features_std.push_back(std::move(std_f));
        fit.x_records.push_back(std::move(rec));
    }

    auto [design, basis] = build_design(response_std, features_std, options.variance_threshold,
                                        options.k_max, options.fixed_k, std::move(names));
    fit.basis = std::move(basis);
    fit.k = design.k;
    fit.k_est = design.k;
    const DesignView view(design.Y, design.X, design.p, design.k);

    Eigen::MatrixXd B_est;  // full block layout, standardized score scale
    if (options.fixed_lambda) {
        if (options.path.adaptive != AdaptiveMode::none)
            throw ValidationError("single-lambda fits do not take an adaptive step");
        fit.initial_path = detail::single_lambda_path(view, options.path,
                                                      options.fixed_lambda->first,
                                                      options.fixed_lambda->second);
        if (fit.initial_path.best_index >= 0) {
            const PathRecord& best = fit.initial_path.best();
            fit.selected = best.selected;
            B_est = best.B_relaxed;
        }
    } else if (options.path.adaptive == AdaptiveMode::none) {
        fit.initial_path = run_path(view, options.path, Eigen::VectorXd::Ones(design.p));
        if (fit.initial_path.best_index >= 0) {
            const PathRecord& best = fit.initial_path.best();
            fit.selected = best.selected;
            B_est = best.B_relaxed;
        }
    } else {
        try {
            AdaptiveResult ar = run_adaptive(view, options.path);
            fit.initial_path = std::move(ar.initial);
            fit.adaptive_path = std::move(ar.adaptive);
            fit.soft_fallback = fit.adaptive_path->soft_fallback_full;
            if (fit.adaptive_path->best_index >= 0) {
                const PathRecord& best = fit.adaptive_path->best();
                const auto& map = fit.adaptive_path->block_index_map;
                for (int sub : best.selected) fit.selected.push_back(map[sub]);
                // adaptive estimates are reported without relaxation: the
                // weights already de-bias them
                B_est = expand_blocks(best.B_raw, map, design.p, design.k);
            }
        } catch (const EmptyInitialSelectionError&) {
            fit.null_model = true;
            PathConfig base = options.path;
            base.adaptive = AdaptiveMode::none;
            fit.initial_path = run_path(view, base, Eigen::VectorXd::Ones(design.p));
        }
    }

    if (options.path.adaptive == AdaptiveMode::soft && !fit.null_model &&
        !fit.selected.empty()) {
        // estimation k re-chosen by 5-fold cv, then a fresh least-squares refit
        const int k_est = detail::reselect_k_by_cv(
            response_std, features_std, fit.selected, options.k_max, options.path.cv_folds,
            options.path.seed, options.path.ridge_eps);
        fit.k_est = k_est;
        FpcBasis est_basis = compute_fpc(response_std, options.variance_threshold, options.k_max,
                                         k_est);
        Eigen::MatrixXd Y_scores = project(response_std, est_basis);
        Eigen::MatrixXd X_scores(design.n,
                                 static_cast<Eigen::Index>(fit.selected.size()) * k_est);
        for (std::size_t i = 0; i < fit.selected.size(); ++i)
            X_scores.middleCols(static_cast<Eigen::Index>(i) * k_est, k_est) =
                project(features_std[fit.selected[i]], est_basis);
        DesignView sub(Y_scores, X_scores, static_cast<int>(fit.selected.size()), k_est);
        std::vector<int> all(fit.selected.size());
        std::iota(all.begin(), all.end(), 0);
        const Eigen::MatrixXd B_sub = relax(sub, all, options.path.ridge_eps);
        for (std::size_t i = 0; i < fit.selected.size(); ++i) {
            const int j = fit.selected[i];
            const Eigen::MatrixXd surf_std = detail::block_to_surface(
                B_sub.middleRows(static_cast<Eigen::Index>(i) * k_est, k_est), est_basis);
            fit.surfaces.push_back(detail::surface_to_raw_scale(surf_std, fit.y_record.sd,
                                                                fit.x_records[j].sd));
        }
    } else if (!fit.selected.empty()) {
        for (int j : fit.selected) {
            const Eigen::MatrixXd surf_std = detail::block_to_surface(
                B_est.middleRows(static_cast<Eigen::Index>(j) * design.k, design.k), fit.basis);
            fit.surfaces.push_back(
                detail::surface_to_raw_scale(surf_std, fit.y_record.sd, fit.x_records[j].sd));
        }
    }

    for (int j : fit.selected) fit.selected_names.push_back(design.block_names[j]);
    const Eigen::VectorXd w = response_raw.grid.quadrature_weights();
    fit.intercept = fit.y_record.ave;
    for (std::size_t i = 0; i < fit.selected.size(); ++i)
        fit.intercept -= fit.surfaces[i] * (w.asDiagonal() * fit.x_records[fit.selected[i]].ave);
    fit.elapsed_ms = std::chrono::duration<double, std::milli>(clock::now() - t0).count();
    return fit;
}

/// Raw-scale predictions for new feature curves.
inline Eigen::MatrixXd predict(const FunctionalFit& fit,
                               const std::vector<CurveSet>& features_raw, const Grid& grid) {
    const int n = features_raw.empty() ? 0 : features_raw.front().n();
    Eigen::MatrixXd yhat = Eigen::MatrixXd::Zero(n, grid.size());
    yhat.rowwise() += fit.intercept.transpose();
    for (std::size_t i = 0; i < fit.selected.size(); ++i)
        yhat += detail::surface_response(features_raw[fit.selected[i]].values, fit.surfaces[i],
                                         grid);
    return yhat;
}

/// Scalar-on-function fit with per-feature bases and raw-scale coefficient curves.
struct ScalarFit {
    std::vector<FpcBasis> bases;
    double y_mean = 0.0;
    double y_sd = 1.0;
    std::vector<StandardizationRecord> x_records;
    PathResult initial_path;
    std::optional<PathResult> adaptive_path;
    std::vector<int> selected;
    std::vector<std::string> selected_names;
    std::vector<Eigen::VectorXd> curves;  // raw scale, aligned with selected
    double intercept = 0.0;
    int k = 0;
    bool soft_fallback = false;
    bool null_model = false;
    double elapsed_ms = 0.0;
};

inline ScalarFit fit_scalar(const Eigen::VectorXd& responses_raw,
                            const std::vector<CurveSet>& features_raw, const FitOptions& options,
                            std::vector<std::string> names = {}) {
    using clock = std::chrono::steady_clock;
    const auto t0 = clock::now();
    ScalarFit fit;
    const int n = static_cast<int>(responses_raw.size());
    if (n < 2) throw ValidationError("need at least 2 responses");
    fit.y_mean = responses_raw.mean();
    fit.y_sd = std::sqrt((responses_raw.array() - fit.y_mean).square().mean());
    if (fit.y_sd < 1e-12) throw DegenerateVarianceError("constant scalar response");
    const Eigen::VectorXd y_std = (responses_raw.array() - fit.y_mean) / fit.y_sd;

    std::vector<CurveSet> features_std;
    features_std.reserve(features_raw.size());
    for (const auto& f : features_raw) {
        auto [std_f, rec] = standardize(f);
        features_std.push_back(std::move(std_f));
        fit.x_records.push_back(std::move(rec));
    }
    ScalarDesign design = build_scalar_design(y_std, features_std, options.variance_threshold,
                                              options.k_max, options.fixed_k, std::move(names));
    fit.bases = design.bases;
    fit.k = design.k;
    const DesignView view = design.view();

    Eigen::MatrixXd B_est;
    if (options.fixed_lambda) {
        if (options.path.adaptive != AdaptiveMode::none)
            throw ValidationError("single-lambda fits do not take an adaptive step");
        fit.initial_path = detail::single_lambda_path(view, options.path,
                                                      options.fixed_lambda->first,
                                                      options.fixed_lambda->second);
        if (fit.initial_path.best_index >= 0) {
            fit.selected = fit.initial_path.best().selected;
            B_est = fit.initial_path.best().B_relaxed;
        }
    } else if (options.path.adaptive == AdaptiveMode::none) {
        fit.initial_path = run_path(view, options.path, Eigen::VectorXd::Ones(design.p));
        if (fit.initial_path.best_index >= 0) {
            fit.selected = fit.initial_path.best().selected;
            B_est = fit.initial_path.best().B_relaxed;
        }
    } else {
        try {
            AdaptiveResult ar = run_adaptive(view, options.path);
            fit.initial_path = std::move(ar.initial);
            fit.adaptive_path = std::move(ar.adaptive);
            fit.soft_fallback = fit.adaptive_path->soft_fallback_full;
            if (fit.adaptive_path->best_index >= 0) {
                const PathRecord& best = fit.adaptive_path->best();
                const auto& map = fit.adaptive_path->block_index_map;
                for (int sub : best.selected) fit.selected.push_back(map[sub]);
                B_est = expand_blocks(
                    options.path.adaptive == AdaptiveMode::soft ? best.B_relaxed : best.B_raw,
                    map, design.p, design.k);
            }
        } catch (const EmptyInitialSelectionError&) {
            fit.null_model = true;
            PathConfig base = options.path;
            base.adaptive = AdaptiveMode::none;
            fit.initial_path = run_path(view, base, Eigen::VectorXd::Ones(design.p));
        }
    }

    fit.intercept = fit.y_mean;
    const Eigen::VectorXd w = features_raw.empty() ? Eigen::VectorXd()
                                                   : features_raw.front().grid.quadrature_weights();
    for (int j : fit.selected) {
        fit.selected_names.push_back(design.block_names[j]);
        const Eigen::VectorXd b_j =
            B_est.middleRows(static_cast<Eigen::Index>(j) * design.k, design.k).col(0);
        Eigen::VectorXd curve_std = reconstruct_coefficient_curve(b_j, design.bases[j]);
        Eigen::VectorXd curve_raw =
            fit.y_sd * curve_std.array() / fit.x_records[j].sd.array();
        fit.intercept -= (curve_raw.array() * fit.x_records[j].ave.array() * w.array()).sum();
        fit.curves.push_back(std::move(curve_raw));
    }
    fit.elapsed_ms = std::chrono::duration<double, std::milli>(clock::now() - t0).count();
    return fit;
}

inline Eigen::VectorXd predict(const ScalarFit& fit, const std::vector<CurveSet>& features_raw) {
    const int n = features_raw.empty() ? 0 : features_raw.front().n();
    Eigen::VectorXd yhat = Eigen::VectorXd::Constant(n, fit.intercept);
    if (fit.selected.empty()) return yhat;
    const Eigen::VectorXd w = features_raw.front().grid.quadrature_weights();
    for (std::size_t i = 0; i < fit.selected.size(); ++i)
        yhat += features_raw[fit.selected[i]].values * (w.asDiagonal() * fit.curves[i]);
    return yhat;
}

// ---------------------------------------------------------------------------
// result serialization

namespace detail {

inline json finite_or_null(double v) {
    if (std::isfinite(v)) return v;
    return nullptr;
}

inline json path_result_json(const PathResult& path, const std::vector<std::string>& names,
                             int k) {
    json out;
    out["lambda_max"] = path.lambda_max_value;
    out["best_index"] = path.best_index;
    out["weights_used"] = std::vector<double>(
        path.weights_used.data(), path.weights_used.data() + path.weights_used.size());
    out["elapsed_ms"] = path.total_elapsed_ms;
    json records = json::array();
    for (const auto& rec : path.records) {
        json r;
        r["c_lambda"] = rec.c_lambda;
        r["lambda1"] = rec.lambda1;
        r["lambda2"] = rec.lambda2;
        std::vector<std::string> sel_names;
        json norms = json::object();
        for (int sub : rec.selected) {
            const int orig = path.block_index_map.empty() ? sub : path.block_index_map[sub];
            sel_names.push_back(names[orig]);
            if (rec.B_raw.size() > 0)
                norms[names[orig]] =
                    block_norm(rec.B_raw.middleRows(static_cast<Eigen::Index>(sub) * k, k));
        }
        r["selected"] = sel_names;
        r["n_selected"] = rec.selected.size();
        r["block_norms"] = norms;
        r["criterion_score"] = finite_or_null(rec.criterion_score);
        r["cv_se"] = rec.cv_se;
        r["outer_iters"] = rec.outer_iters;
        r["elapsed_ms"] = rec.elapsed_ms;
        r["converged"] = rec.converged;
        r["dof_degenerate"] = rec.dof_degenerate;
        r["solver_failed"] = rec.solver_failed;
        records.push_back(std::move(r));
    }
    out["records"] = std::move(records);
    return out;
}

}  // namespace detail

struct RunMeta {
    std::string mode;       // "function-on-function" or "scalar"
    std::string criterion;  // "gcv" or "cv"
    std::string adaptive;   // "none", "full" or "soft"
    double alpha = 0.2;
    double variance_threshold = 0.90;
    std::uint64_t seed = 0;
};

inline void write_path_json(const fs::path& file, const RunMeta& meta,
                            const PathResult& initial, const PathResult* adaptive,
                            const std::vector<std::string>& names, int k, int k_est,
                            const std::vector<std::string>& selected_names, bool soft_fallback,
                            bool null_model) {
    json j;
    j["schema_version"] = kSchemaVersion;
    j["mode"] = meta.mode;
    j["criterion"] = meta.criterion;
    j["adaptive"] = meta.adaptive;
    j["alpha"] = meta.alpha;
    j["variance_threshold"] = meta.variance_threshold;
    j["seed"] = meta.seed;
    j["k"] = k;
    j["k_est"] = k_est;
    j["soft_fallback_full"] = soft_fallback;
    j["null_model"] = null_model;
    j["initial_path"] = detail::path_result_json(initial, names, k);
    if (adaptive) j["adaptive_path"] = detail::path_result_json(*adaptive, names, k);
    j["best"] = json{{"selected", selected_names}};
    write_json_file(file, j);
}

inline void append_diagnostics(std::ofstream& out, const std::string& phase, int lambda_index,
                               const std::vector<OuterDiagnostics>& outers) {
    for (std::size_t t = 0; t < outers.size(); ++t) {
        const auto& d = outers[t];
        json line;
        line["phase"] = phase;
        line["lambda_index"] = lambda_index;
        line["outer"] = t;
        line["sigma"] = d.sigma;
        line["r"] = d.r;
        line["res1"] = d.res1;
        line["res3"] = d.res3;
        line["psi"] = d.psi;
        line["primal_obj"] = d.primal_obj;
        line["dual_obj"] = d.dual_obj;
        line["newton_steps"] = d.newton_steps;
        line["elapsed_ms"] = d.elapsed_ms;
        out << line.dump() << '\n';
    }
}

inline void write_diagnostics_jsonl(const fs::path& file, const PathResult& initial,
                                    const PathResult* adaptive) {
    std::ofstream out(file);
    if (!out) throw IoError("cannot open for writing: " + file.string());
    for (std::size_t i = 0; i < initial.records.size(); ++i)
        append_diagnostics(out, "initial", static_cast<int>(i), initial.records[i].outer);
    if (adaptive)
        for (std::size_t i = 0; i < adaptive->records.size(); ++i)
            append_diagnostics(out, "adaptive", static_cast<int>(i), adaptive->records[i].outer);
}

}  // namespace fregsel
