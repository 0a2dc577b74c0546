#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <utility>

#include "fregsel/errors.hpp"

namespace fregsel {

/// Uniform sampling grid shared by all curves of a problem.
/// Inner products and norms over the grid use the trapezoid rule.
struct Grid {
    Eigen::VectorXd points;
    double spacing = 0.0;

    Grid() = default;

    explicit Grid(Eigen::VectorXd pts) : points(std::move(pts)) {
        if (points.size() < 3) throw ValidationError("grid needs at least 3 points");
        spacing = points[1] - points[0];
        if (spacing <= 0.0) throw ValidationError("grid points must be strictly increasing");
        const double span = points[points.size() - 1] - points[0];
        for (Eigen::Index i = 1; i < points.size(); ++i) {
            const double step = points[i] - points[i - 1];
            if (step <= 0.0) throw ValidationError("grid points must be strictly increasing");
            if (std::abs(step - spacing) > 1e-9 * std::max(1.0, std::abs(span)))
                throw ValidationError("grid spacing must be uniform");
        }
    }

    static Grid uniform(double a, double b, int m) {
        if (m < 3) throw ValidationError("grid needs at least 3 points");
        if (!(b > a)) throw ValidationError("grid interval must be nonempty");
        Eigen::VectorXd pts(m);
        const double h = (b - a) / (m - 1);
        for (int i = 0; i < m; ++i) pts[i] = a + h * i;
        pts[m - 1] = b;
        return Grid(pts);
    }

    int size() const { return static_cast<int>(points.size()); }
    double start() const { return points[0]; }
    double end() const { return points[points.size() - 1]; }

    /// Trapezoid quadrature weights: h at interior points, h/2 at the ends.
    Eigen::VectorXd quadrature_weights() const {
        Eigen::VectorXd w = Eigen::VectorXd::Constant(size(), spacing);
        w[0] *= 0.5;
        w[size() - 1] *= 0.5;
        return w;
    }

    bool same_as(const Grid& other, double tol = 1e-12) const {
        if (size() != other.size()) return false;
        return (points - other.points).cwiseAbs().maxCoeff() <= tol * std::max(1.0, points.cwiseAbs().maxCoeff());
    }
};

/// n discretized curves sampled on a shared grid; row i is curve i.
struct CurveSet {
    Eigen::MatrixXd values;  // n x m
    Grid grid;

    CurveSet() = default;
    CurveSet(Eigen::MatrixXd vals, Grid g) : values(std::move(vals)), grid(std::move(g)) {
        if (values.cols() != grid.size())
            throw DimensionMismatchError("curve samples do not match grid size");
        if (!values.allFinite()) throw ValidationError("curve values must be finite");
    }

    int n() const { return static_cast<int>(values.rows()); }
    int m() const { return static_cast<int>(values.cols()); }
};

inline double quad_inner(const Eigen::VectorXd& f, const Eigen::VectorXd& g, const Grid& grid) {
    if (f.size() != grid.size() || g.size() != grid.size())
        throw DimensionMismatchError("vector length does not match grid");
    return (f.array() * g.array() * grid.quadrature_weights().array()).sum();
}

inline double quad_norm(const Eigen::VectorXd& f, const Grid& grid) {
    return std::sqrt(std::max(0.0, quad_inner(f, f, grid)));
}

/// Quadrature L2 norm of a surface sampled on the grid tensor (rows = t, cols = s).
inline double quad_surface_norm(const Eigen::MatrixXd& g, const Grid& grid) {
    if (g.rows() != grid.size() || g.cols() != grid.size())
        throw DimensionMismatchError("surface samples do not match grid tensor");
    const Eigen::VectorXd w = grid.quadrature_weights();
    const double s2 = (w.asDiagonal() * g.cwiseProduct(g) * w.asDiagonal()).sum();
    return std::sqrt(std::max(0.0, s2));
}

/// Pointwise mean and standard deviation used to standardize one variable.
/// sd uses the population convention (divisor n).
struct StandardizationRecord {
    Eigen::VectorXd ave;
    Eigen::VectorXd sd;
};

/// Pointwise standardization: value(t) -> (value(t) - ave(t)) / sd(t).
/// Throws DegenerateVarianceError when some coordinate is (numerically) constant.
inline std::pair<CurveSet, StandardizationRecord> standardize(const CurveSet& curves) {
    const int n = curves.n();
    if (n < 2) throw ValidationError("standardize needs at least 2 curves");
    StandardizationRecord rec;
    rec.ave = curves.values.colwise().mean();
    Eigen::MatrixXd centered = curves.values.rowwise() - rec.ave.transpose();
    rec.sd = (centered.array().square().colwise().sum() / n).sqrt();
    if (rec.sd.minCoeff() < 1e-12)
        throw DegenerateVarianceError("coordinate with (near-)zero pointwise variance");
    centered.array().rowwise() /= rec.sd.transpose().array();
    return {CurveSet(std::move(centered), curves.grid), std::move(rec)};
}

/// Standardize with a previously computed record (e.g. test data with training moments).
inline CurveSet apply_standardization(const CurveSet& curves, const StandardizationRecord& rec) {
    if (rec.ave.size() != curves.m())
        throw DimensionMismatchError("standardization record does not match grid size");
    Eigen::MatrixXd out = curves.values.rowwise() - rec.ave.transpose();
    out.array().rowwise() /= rec.sd.transpose().array();
    return CurveSet(std::move(out), curves.grid);
}

}  // namespace fregsel
