#include "poro/latent.hpp"

#include "poro/error.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace poro {

Eigen::VectorXd slerp(const Eigen::VectorXd& z0, const Eigen::VectorXd& z1, double t) {
    if (z0.size() != z1.size()) throw ArgumentError("slerp: size mismatch");
    if (!(t >= 0.0 && t <= 1.0)) throw ArgumentError("slerp: t must lie in [0, 1]");
    const double n0 = z0.norm(), n1 = z1.norm();
    if (n0 == 0.0 || n1 == 0.0) throw ArgumentError("slerp: zero-norm input");
    if (t == 0.0) return z0;
    if (t == 1.0) return z1;

    const Eigen::VectorXd u0 = z0 / n0, u1 = z1 / n1;
    const double cosw = std::clamp(u0.dot(u1), -1.0, 1.0);
    const double omega = std::acos(cosw);
    const double norm_t = (1.0 - t) * n0 + t * n1;

    if (std::abs(std::sin(omega)) < 1e-6) return (1.0 - t) * z0 + t * z1;

    const double a = std::sin((1.0 - t) * omega) / std::sin(omega);
    const double b = std::sin(t * omega) / std::sin(omega);
    return norm_t * (a * u0 + b * u1);
}

PcaResult pca_project(const Eigen::MatrixXd& data, int k) {
    const auto n = data.rows();
    const auto d = data.cols();
    if (k <= 0 || k > d) throw ArgumentError("pca_project: k out of range");
    if (n < k + 1) throw ArgumentError("pca_project: need at least k + 1 samples");

    PcaResult r;
    r.mean = data.colwise().mean();
    const Eigen::MatrixXd centered = data.rowwise() - r.mean.transpose();
    const Eigen::MatrixXd cov = (centered.adjoint() * centered) / static_cast<double>(n - 1);

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
    if (solver.info() != Eigen::Success) throw Error("pca_project: eigendecomposition failed");

    // ascending from Eigen; take the top k in descending order
    r.components.resize(d, k);
    r.explained_variance.resize(k);
    for (int i = 0; i < k; ++i) {
        r.components.col(i) = solver.eigenvectors().col(d - 1 - i);
        r.explained_variance[i] = std::max(solver.eigenvalues()[d - 1 - i], 0.0);
    }
    const double total = solver.eigenvalues().array().max(0.0).sum();
    r.explained_ratio = total > 0.0 ? (r.explained_variance / total).eval()
                                    : Eigen::VectorXd::Zero(k).eval();
    r.projections = centered * r.components;
    return r;
}

Eigen::MatrixXd component_property_correlations(const PcaResult& pca, const Eigen::MatrixXd& properties) {
    if (properties.rows() != pca.projections.rows())
        throw ArgumentError("component_property_correlations: row count mismatch");
    Eigen::MatrixXd corr(pca.projections.cols(), properties.cols());
    for (Eigen::Index c = 0; c < pca.projections.cols(); ++c)
        for (Eigen::Index p = 0; p < properties.cols(); ++p)
            corr(c, p) = pearson(pca.projections.col(c), properties.col(p));
    return corr;
}

KdeResult kde_density(const Eigen::VectorXd& values, double bandwidth) {
    const auto n = values.size();
    if (n < 2) throw ArgumentError("kde_density: need at least 2 values");

    double h = bandwidth;
    if (!(h > 0.0)) {
        const double mean = values.mean();
        const double sd = std::sqrt((values.array() - mean).square().sum() / static_cast<double>(n - 1));
        std::vector<double> sorted(values.data(), values.data() + n);
        std::sort(sorted.begin(), sorted.end());
        auto quantile = [&](double q) {
            const double pos = q * static_cast<double>(n - 1);
            const auto lo = static_cast<std::size_t>(pos);
            const double frac = pos - static_cast<double>(lo);
            return lo + 1 < sorted.size() ? sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac : sorted[lo];
        };
        const double iqr = quantile(0.75) - quantile(0.25);
        double spread = sd;
        if (iqr > 0.0) spread = std::min(sd, iqr / 1.34);
        h = 0.9 * spread * std::pow(static_cast<double>(n), -0.2);
        if (!(h > 0.0)) h = 1e-3 * (1.0 + std::abs(values[0]));  // constant input fallback
    }

    const double lo = values.minCoeff() - 3.0 * h;
    const double hi = values.maxCoeff() + 3.0 * h;
    constexpr int kPoints = 256;

    KdeResult r;
    r.bandwidth = h;
    r.x.resize(kPoints);
    r.density.resize(kPoints);
    const double inv_h = 1.0 / h;
    const double norm = 1.0 / (static_cast<double>(n) * h * std::sqrt(2.0 * 3.14159265358979323846));
    for (int i = 0; i < kPoints; ++i) {
        const double x = lo + (hi - lo) * static_cast<double>(i) / (kPoints - 1);
        r.x[i] = x;
        r.density[i] = norm * ((values.array() - x) * inv_h).square().unaryExpr([](double q) {
                           return std::exp(-0.5 * q);
                       }).sum();
    }
    return r;
}

double r_squared(const Eigen::VectorXd& y_true, const Eigen::VectorXd& y_pred) {
    if (y_true.size() != y_pred.size() || y_true.size() < 2)
        throw ArgumentError("r_squared: need matching vectors of length >= 2");
    const double mean = y_true.mean();
    const double ss_res = (y_true - y_pred).squaredNorm();
    const double ss_tot = (y_true.array() - mean).matrix().squaredNorm();
    if (ss_tot == 0.0) return ss_res == 0.0 ? 1.0 : -std::numeric_limits<double>::infinity();
    return 1.0 - ss_res / ss_tot;
}

double pearson(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
    if (a.size() != b.size() || a.size() < 2) throw ArgumentError("pearson: need matching vectors of length >= 2");
    const Eigen::ArrayXd ca = a.array() - a.mean();
    const Eigen::ArrayXd cb = b.array() - b.mean();
    const double denom = std::sqrt(ca.square().sum() * cb.square().sum());
    return denom > 0.0 ? (ca * cb).sum() / denom : 0.0;
}

}  // namespace poro
