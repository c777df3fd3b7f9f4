#include "poro/error.hpp"
#include "poro/latent.hpp"
#include "poro/rng.hpp"

#include <doctest.h>

#include <cmath>

using namespace poro;

TEST_CASE("slerp endpoints and midpoints") {
    Rng rng(3);
    Eigen::VectorXd z0(8), z1(8);
    for (int i = 0; i < 8; ++i) {
        z0[i] = rng.normal();
        z1[i] = rng.normal();
    }
    CHECK((slerp(z0, z1, 0.0) - z0).norm() == 0.0);
    CHECK((slerp(z0, z1, 1.0) - z1).norm() == 0.0);

    // orthonormal pair at t = 1/2: (z0 + z1)/sqrt(2)
    Eigen::VectorXd e0 = Eigen::VectorXd::Zero(4), e1 = Eigen::VectorXd::Zero(4);
    e0[0] = 1.0;
    e1[1] = 1.0;
    const Eigen::VectorXd mid = slerp(e0, e1, 0.5);
    CHECK((mid - (e0 + e1) / std::sqrt(2.0)).norm() < 1e-14);

    CHECK_THROWS_AS(slerp(Eigen::VectorXd::Zero(4), e1, 0.5), ArgumentError);
    CHECK_THROWS_AS(slerp(e0, e1, 1.5), ArgumentError);
}

TEST_CASE("slerp moves at constant angular speed") {
    Rng rng(17);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        Eigen::VectorXd z0(16), z1(16);
        for (int i = 0; i < 16; ++i) {
            z0[i] = rng.normal();
            z1[i] = rng.normal();
        }
        z0 *= rng.uniform(0.5, 2.0);  // distinct norms on purpose
        z1 *= rng.uniform(0.5, 2.0);
        const double omega = std::acos(std::clamp(z0.dot(z1) / (z0.norm() * z1.norm()), -1.0, 1.0));
        for (double t : {0.25, 0.5, 0.75}) {
            const Eigen::VectorXd zt = slerp(z0, z1, t);
            const double ang = std::acos(std::clamp(z0.dot(zt) / (z0.norm() * zt.norm()), -1.0, 1.0));
            worst = std::max(worst, std::abs(ang - t * omega));
        }
    }
    CHECK(worst < 1e-9);
}

TEST_CASE("slerp collinear fallback") {
    Eigen::VectorXd z0(3);
    z0 << 1.0, 2.0, 3.0;
    const Eigen::VectorXd z1 = 2.0 * z0;
    const Eigen::VectorXd mid = slerp(z0, z1, 0.5);
    CHECK((mid - 1.5 * z0).norm() < 1e-12);
}

TEST_CASE("pca on a one-dimensional manifold explains all variance first") {
    Rng rng(5);
    const int n = 200, d = 6;
    Eigen::VectorXd dir(d);
    for (int i = 0; i < d; ++i) dir[i] = rng.normal();
    dir.normalize();
    Eigen::MatrixXd data(n, d);
    for (int r = 0; r < n; ++r) data.row(r) = (rng.uniform(-3.0, 3.0) * dir).transpose();

    const PcaResult pca = pca_project(data, 3);
    CHECK(pca.explained_ratio[0] == doctest::Approx(1.0).epsilon(1e-10));
    CHECK(pca.explained_variance[1] == doctest::Approx(0.0).epsilon(1e-10));
    CHECK(std::abs(pca.components.col(0).dot(dir)) == doctest::Approx(1.0).epsilon(1e-10));
}

TEST_CASE("pca components are orthonormal and reconstruct the data") {
    Rng rng(11);
    const int n = 120, d = 8;
    Eigen::MatrixXd data(n, d);
    for (int r = 0; r < n; ++r)
        for (int c = 0; c < d; ++c) data(r, c) = rng.normal() * (c + 1);

    const PcaResult pca = pca_project(data, d);
    const Eigen::MatrixXd gram = pca.components.transpose() * pca.components;
    CHECK((gram - Eigen::MatrixXd::Identity(d, d)).cwiseAbs().maxCoeff() < 1e-10);

    for (int i = 0; i + 1 < d; ++i) REQUIRE(pca.explained_variance[i] >= pca.explained_variance[i + 1]);

    // projections * components^T reproduces the centered data
    const Eigen::MatrixXd centered = data.rowwise() - pca.mean.transpose();
    const Eigen::MatrixXd rec = pca.projections * pca.components.transpose();
    CHECK((rec - centered).cwiseAbs().maxCoeff() < 1e-8);

    CHECK_THROWS_AS(pca_project(data, 0), ArgumentError);
    CHECK_THROWS_AS(pca_project(data, d + 1), ArgumentError);
}

TEST_CASE("kde integrates to one and tracks the normal density") {
    Rng rng(23);

    // unit integral on random inputs (trapezoid)
    Eigen::VectorXd v(400);
    for (int i = 0; i < 400; ++i) v[i] = rng.uniform(-2.0, 5.0);
    const KdeResult kde = kde_density(v);
    double integral = 0.0;
    for (int i = 0; i + 1 < kde.x.size(); ++i)
        integral += 0.5 * (kde.density[i] + kde.density[i + 1]) * (kde.x[i + 1] - kde.x[i]);
    CHECK(std::abs(integral - 1.0) < 1e-3);

    // tight cluster: unimodal, peak within one bandwidth of the mean
    Eigen::VectorXd tight(50);
    for (int i = 0; i < 50; ++i) tight[i] = 3.0 + 0.01 * rng.normal();
    const KdeResult peak = kde_density(tight);
    int arg = 0;
    for (int i = 1; i < peak.density.size(); ++i)
        if (peak.density[i] > peak.density[arg]) arg = i;
    CHECK(std::abs(peak.x[arg] - 3.0) < peak.bandwidth + 0.01);

    // standard normal draws vs the true pdf
    Eigen::VectorXd norm(10000);
    for (int i = 0; i < 10000; ++i) norm[i] = rng.normal();
    const KdeResult kn = kde_density(norm);
    double worst = 0.0;
    for (int i = 0; i < kn.x.size(); ++i) {
        const double pdf = std::exp(-0.5 * kn.x[i] * kn.x[i]) / std::sqrt(2.0 * 3.14159265358979323846);
        worst = std::max(worst, std::abs(kn.density[i] - pdf));
    }
    CHECK(worst < 0.02);

    // constant input falls back to the fixed bandwidth
    Eigen::VectorXd flat = Eigen::VectorXd::Constant(10, 2.0);
    const KdeResult fb = kde_density(flat);
    CHECK(fb.bandwidth == doctest::Approx(1e-3 * 3.0).epsilon(1e-12));

    Eigen::VectorXd single(1);
    single << 1.0;
    CHECK_THROWS_AS(kde_density(single), ArgumentError);
}

TEST_CASE("r_squared and pearson") {
    Eigen::VectorXd y(4), yhat(4);
    y << 1.0, 2.0, 3.0, 4.0;
    CHECK(r_squared(y, y) == 1.0);
    yhat << 1.1, 1.9, 3.2, 3.8;
    CHECK(r_squared(y, yhat) > 0.9);
    CHECK(r_squared(y, Eigen::VectorXd::Constant(4, y.mean())) == doctest::Approx(0.0).epsilon(1e-12));

    CHECK(pearson(y, y) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(pearson(y, (-y).eval()) == doctest::Approx(-1.0).epsilon(1e-12));
}
