#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <utility>
#include <vector>

#include "fregsel/grid.hpp"

namespace fregsel {

/// Matern covariance parameters. Smoothness is restricted to half-integers,
/// which admit closed forms.
struct MaternParams {
    double eta2 = 1.0;
    double length = 0.25;
    double nu = 3.5;
};

/// Half-integer Matern kernel: for nu = m + 1/2 and x = sqrt(2 nu) d / l,
/// C(d) = eta2 exp(-x) (m!/(2m)!) sum_i (m+i)!/(i!(m-i)!) (2x)^(m-i).
inline double matern_cov(double t, double s, const MaternParams& params) {
    if (!(params.eta2 > 0.0) || !(params.length > 0.0))
        throw ValidationError("matern parameters must be positive");
    const double two_nu = 2.0 * params.nu;
    const int m = static_cast<int>(std::lround(params.nu - 0.5));
    if (m < 0 || m > 3 || std::abs(params.nu - (m + 0.5)) > 1e-12)
        throw UnsupportedSmoothnessError("smoothness must be one of 0.5, 1.5, 2.5, 3.5");
    const double d = std::abs(t - s);
    const double x = std::sqrt(two_nu) * d / params.length;
    double factorial_m = 1.0, factorial_2m = 1.0;
    for (int i = 2; i <= m; ++i) factorial_m *= i;
    for (int i = 2; i <= 2 * m; ++i) factorial_2m *= i;
    double sum = 0.0;
    for (int i = 0; i <= m; ++i) {
        double coef = 1.0;  // (m+i)! / (i! (m-i)!)
        for (int v = i + 1; v <= m + i; ++v) coef *= v;
        for (int v = 2; v <= m - i; ++v) coef /= v;
        sum += coef * std::pow(2.0 * x, m - i);
    }
    return params.eta2 * std::exp(-x) * (factorial_m / factorial_2m) * sum;
}

inline Eigen::MatrixXd matern_matrix(const Grid& grid, const MaternParams& params) {
    const int m = grid.size();
    Eigen::MatrixXd C(m, m);
    for (int i = 0; i < m; ++i)
        for (int j = i; j < m; ++j) {
            C(i, j) = matern_cov(grid.points[i], grid.points[j], params);
            C(j, i) = C(i, j);
        }
    return C;
}

/// n independent mean-zero Gaussian-process draws via Cholesky of the gridded
/// covariance, with escalating jitter 1e-10 eta2 .. 1e-6 eta2.
inline CurveSet sample_gp(int n, const Grid& grid, const MaternParams& params,
                          std::uint64_t seed) {
    if (n < 1) throw ValidationError("need at least one draw");
    const int m = grid.size();
    Eigen::MatrixXd C = matern_matrix(grid, params);
    Eigen::LLT<Eigen::MatrixXd> llt;
    double jitter = 1e-10 * params.eta2;
    bool ok = false;
    for (int attempt = 0; attempt < 5; ++attempt) {
        Eigen::MatrixXd Cj = C;
        Cj.diagonal().array() += jitter;
        llt.compute(Cj);
        if (llt.info() == Eigen::Success) {
            ok = true;
            break;
        }
        jitter *= 10.0;
        if (jitter > 1e-6 * params.eta2) break;
    }
    if (!ok) throw FactorizationError("covariance not positive definite after jitter");
    const Eigen::MatrixXd L = llt.matrixL();
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    Eigen::MatrixXd Z(n, m);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) Z(i, j) = gauss(rng);
    return CurveSet(Z * L.transpose(), grid);
}

enum class Regime { easy, difficult };

struct Bump {
    double center_t = 0.0;
    double center_s = 0.0;
    double sd = 0.0;
    double amplitude = 0.0;
};

struct CoefficientSurface {
    Eigen::MatrixXd values;  // m x m, rows index t, cols index s
    std::vector<Bump> bumps;
};

/// Active coefficient surfaces as mixtures of isotropic Gaussian bumps.
/// Easy regime: one bump with sd ~ U[0.2, 0.3]; difficult: 2 or 3 bumps with
/// sd ~ U[0.01, 0.15]. Centers ~ U[0,1]^2, amplitudes ~ U[1,3] with random sign.
inline std::vector<CoefficientSurface> gen_coefficients(int p0, Regime regime, const Grid& grid,
                                                        std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::uniform_real_distribution<double> amp(1.0, 3.0);
    const int m = grid.size();
    std::vector<CoefficientSurface> out;
    out.reserve(p0);
    for (int j = 0; j < p0; ++j) {
        CoefficientSurface surf;
        int n_bumps = 1;
        if (regime == Regime::difficult) n_bumps = unit(rng) < 0.5 ? 2 : 3;
        for (int b = 0; b < n_bumps; ++b) {
            Bump bump;
            bump.center_t = unit(rng);
            bump.center_s = unit(rng);
            bump.sd = regime == Regime::easy ? 0.2 + 0.1 * unit(rng)
                                             : 0.01 + 0.14 * unit(rng);
            bump.amplitude = amp(rng) * (unit(rng) < 0.5 ? 1.0 : -1.0);
            surf.bumps.push_back(bump);
        }
        surf.values = Eigen::MatrixXd::Zero(m, m);
        for (const auto& bump : surf.bumps) {
            const double inv2s2 = 1.0 / (2.0 * bump.sd * bump.sd);
            for (int a = 0; a < m; ++a) {
                const double dt = grid.points[a] - bump.center_t;
                for (int c = 0; c < m; ++c) {
                    const double ds = grid.points[c] - bump.center_s;
                    surf.values(a, c) += bump.amplitude * std::exp(-(dt * dt + ds * ds) * inv2s2);
                }
            }
        }
        out.push_back(std::move(surf));
    }
    return out;
}

struct ScenarioConfig {
    int n = 0;
    int p = 0;
    int p0 = 0;
    double snr = 10.0;
    Regime regime = Regime::easy;
    std::uint64_t seed = 0;

    int n_test() const { return n / 3; }
};

struct GroundTruth {
    std::vector<int> active;                   // sorted indices of nonzero surfaces
    std::vector<CoefficientSurface> surfaces;  // aligned with active
    Eigen::MatrixXd y_true_train;              // noiseless responses
    Eigen::MatrixXd y_true_test;
    double eta2_eps = 0.0;
    double snr = 0.0;
};

struct Scenario {
    CurveSet response_train;
    std::vector<CurveSet> features_train;
    CurveSet response_test;
    std::vector<CurveSet> features_test;
    GroundTruth truth;
    Grid grid;
};

namespace detail {

inline Eigen::MatrixXd surface_response(const Eigen::MatrixXd& feature_values,
                                        const Eigen::MatrixXd& surface, const Grid& grid) {
    // response(i, t) = sum_s surface(t, s) w_s feature(i, s)
    return feature_values * (grid.quadrature_weights().asDiagonal() * surface.transpose());
}

inline double pooled_variance(const Eigen::MatrixXd& M) {
    const double mean = M.mean();
    return (M.array() - mean).square().mean();
}

}  // namespace detail

/// Full synthetic scenario: Matern GP features and errors, Gaussian-bump
/// coefficient surfaces, noise scaled so var(noise) = var(y_true)/snr, and an
/// independent test set of size n/3.
inline Scenario gen_scenario(const ScenarioConfig& config, const Grid& grid) {
    if (config.p0 > config.p) throw ValidationError("p0 cannot exceed p");
    if (config.n < 3) throw ValidationError("n must be at least 3");
    if (!(config.snr > 0.0)) throw ValidationError("snr must be positive");
    std::mt19937_64 master(config.seed);
    const auto child_seed = [&master]() { return master(); };

    Scenario sc;
    sc.grid = grid;
    const int n_tr = config.n;
    const int n_te = config.n_test();
    const MaternParams feature_kernel{1.0, 0.25, 3.5};
    const MaternParams error_kernel{1.0, 0.25, 2.5};

    const std::uint64_t coef_seed = child_seed();
    const std::uint64_t active_seed = child_seed();
    sc.features_train.reserve(config.p);
    sc.features_test.reserve(config.p);
    for (int j = 0; j < config.p; ++j) {
        const std::uint64_t s_tr = child_seed();
        const std::uint64_t s_te = child_seed();
        sc.features_train.push_back(sample_gp(n_tr, grid, feature_kernel, s_tr));
        if (n_te > 0) sc.features_test.push_back(sample_gp(n_te, grid, feature_kernel, s_te));
    }
    const std::uint64_t noise_tr_seed = child_seed();
    const std::uint64_t noise_te_seed = child_seed();

    // active subset drawn without replacement
    std::mt19937_64 arng(active_seed);
    std::vector<int> pool(config.p);
    std::iota(pool.begin(), pool.end(), 0);
    std::shuffle(pool.begin(), pool.end(), arng);
    sc.truth.active.assign(pool.begin(), pool.begin() + config.p0);
    std::sort(sc.truth.active.begin(), sc.truth.active.end());
    sc.truth.surfaces = gen_coefficients(config.p0, config.regime, grid, coef_seed);
    sc.truth.snr = config.snr;

    const int m = grid.size();
    sc.truth.y_true_train = Eigen::MatrixXd::Zero(n_tr, m);
    sc.truth.y_true_test = Eigen::MatrixXd::Zero(std::max(n_te, 0), m);
    for (std::size_t idx = 0; idx < sc.truth.active.size(); ++idx) {
        const int j = sc.truth.active[idx];
        const auto& surf = sc.truth.surfaces[idx].values;
        sc.truth.y_true_train +=
            detail::surface_response(sc.features_train[j].values, surf, grid);
        if (n_te > 0)
            sc.truth.y_true_test +=
                detail::surface_response(sc.features_test[j].values, surf, grid);
    }

    const double var_true = detail::pooled_variance(sc.truth.y_true_train);
    sc.truth.eta2_eps = var_true > 0.0 ? var_true / config.snr : 1.0;
    const double noise_scale = std::sqrt(sc.truth.eta2_eps);

    const CurveSet noise_tr = sample_gp(n_tr, grid, error_kernel, noise_tr_seed);
    sc.response_train = CurveSet(sc.truth.y_true_train + noise_scale * noise_tr.values, grid);
    if (n_te > 0) {
        const CurveSet noise_te = sample_gp(n_te, grid, error_kernel, noise_te_seed);
        sc.response_test = CurveSet(sc.truth.y_true_test + noise_scale * noise_te.values, grid);
    }
    return sc;
}

struct Metrics {
    int false_pos = 0;
    int false_neg = 0;
    std::optional<double> mse_B;  // null when no selected block is truly active
    double mse_out = 0.0;
};

/// Selection, estimation and prediction metrics. mse_B averages the
/// standardized surface errors over the blocks that are both selected and
/// truly active; mse_out is the standardized out-of-sample prediction error.
/// The estimate is given on the raw data scale, optionally with an intercept
/// curve entering the predictions.
inline Metrics evaluate(const std::vector<int>& selected,
                        const std::vector<Eigen::MatrixXd>& estimated_surfaces,
                        const GroundTruth& truth, const std::vector<CurveSet>& features_test,
                        const CurveSet& response_test,
                        const Eigen::VectorXd* intercept = nullptr) {
    if (selected.size() != estimated_surfaces.size())
        throw DimensionMismatchError("one surface per selected block expected");
    const Grid& grid = response_test.grid;
    Metrics metrics;

    std::vector<int> inter;
    double acc = 0.0;
    int tp = 0;
    for (std::size_t i = 0; i < selected.size(); ++i) {
        const auto it = std::find(truth.active.begin(), truth.active.end(), selected[i]);
        if (it == truth.active.end()) {
            ++metrics.false_pos;
            continue;
        }
        const auto& true_surface = truth.surfaces[it - truth.active.begin()].values;
        acc += quad_surface_norm(true_surface - estimated_surfaces[i], grid) /
               quad_surface_norm(true_surface, grid);
        ++tp;
    }
    metrics.false_neg = static_cast<int>(truth.active.size()) - tp;
    if (tp > 0) metrics.mse_B = acc / tp;

    Eigen::MatrixXd yhat =
        Eigen::MatrixXd::Zero(response_test.n(), response_test.m());
    if (intercept) yhat.rowwise() += intercept->transpose();
    for (std::size_t i = 0; i < selected.size(); ++i)
        yhat += detail::surface_response(features_test[selected[i]].values,
                                         estimated_surfaces[i], grid);
    double out = 0.0;
    for (int i = 0; i < response_test.n(); ++i) {
        const Eigen::VectorXd yi = response_test.values.row(i);
        const Eigen::VectorXd di = yi - yhat.row(i).transpose();
        const double denom = quad_norm(yi, grid);
        out += denom > 1e-15 ? quad_norm(di, grid) / denom : quad_norm(di, grid);
    }
    metrics.mse_out = out / response_test.n();
    return metrics;
}

}  // namespace fregsel
