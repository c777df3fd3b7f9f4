#pragma once

#include <Eigen/Core>

namespace poro {

/// Constant-angular-speed interpolation between latent vectors: the direction
/// travels the unit-sphere geodesic while the norm interpolates linearly, so
/// angle(z0, slerp(t)) = t * angle(z0, z1) exactly. Falls back to linear
/// interpolation for (near-)collinear endpoints.
Eigen::VectorXd slerp(const Eigen::VectorXd& z0, const Eigen::VectorXd& z1, double t);

struct PcaResult {
    Eigen::VectorXd mean;                // d
    Eigen::MatrixXd components;          // d x k, orthonormal columns
    Eigen::VectorXd explained_variance;  // k, descending
    Eigen::VectorXd explained_ratio;     // k
    Eigen::MatrixXd projections;         // n x k
};

/// Mean-centered covariance eigendecomposition; negative eigenvalues from
/// degenerate covariances are clamped to zero.
PcaResult pca_project(const Eigen::MatrixXd& data, int k);

/// Pearson correlation of each principal component's projections against each
/// property column (k x P); the heatmap companion of pca_project.
Eigen::MatrixXd component_property_correlations(const PcaResult& pca, const Eigen::MatrixXd& properties);

struct KdeResult {
    Eigen::VectorXd x;        // 256 points spanning [min - 3h, max + 3h]
    Eigen::VectorXd density;
    double bandwidth = 0.0;
};

/// Gaussian-kernel density estimate. bandwidth <= 0 selects Silverman's rule;
/// constant inputs fall back to h = 1e-3 * (1 + |value|).
KdeResult kde_density(const Eigen::VectorXd& values, double bandwidth = 0.0);

double r_squared(const Eigen::VectorXd& y_true, const Eigen::VectorXd& y_pred);
double pearson(const Eigen::VectorXd& a, const Eigen::VectorXd& b);

}  // namespace poro
