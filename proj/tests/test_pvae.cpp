#include "poro/error.hpp"
#include "poro/pvae.hpp"
#include "poro/rng.hpp"

#include <doctest.h>

#include <cmath>

using namespace poro;
using namespace poro::pvae;

TEST_CASE("closed-form KL values") {
    CHECK(kl_divergence(Eigen::VectorXd::Zero(5), Eigen::VectorXd::Ones(5)) == doctest::Approx(0.0).epsilon(1e-12));

    Eigen::VectorXd mu1(1), s1(1);
    mu1 << 1.0;
    s1 << 1.0;
    CHECK(kl_divergence(mu1, s1) == doctest::Approx(0.5).epsilon(1e-9));

    Eigen::VectorXd mu0(1), s2(1);
    mu0 << 0.0;
    s2 << 2.0;
    CHECK(kl_divergence(mu0, s2) == doctest::Approx(0.8068528194400546).epsilon(1e-9));

    Eigen::VectorXd bad(1);
    bad << -0.1;
    CHECK_THROWS_AS(kl_divergence(mu0, bad), ArgumentError);

    // non-negative for random parameters, zero only at (0, 1)
    Rng rng(2);
    for (int i = 0; i < 200; ++i) {
        Eigen::VectorXd mu(4), sigma(4);
        for (int j = 0; j < 4; ++j) {
            mu[j] = rng.uniform(-2.0, 2.0);
            sigma[j] = rng.uniform(0.2, 3.0);
        }
        REQUIRE(kl_divergence(mu, sigma) >= 0.0);
    }
}

TEST_CASE("KL closed form agrees with a Monte Carlo estimate") {
    Rng rng(7);
    Eigen::VectorXd mu(3), sigma(3);
    for (int j = 0; j < 3; ++j) {
        mu[j] = rng.uniform(-1.0, 1.0);
        sigma[j] = rng.uniform(0.5, 1.8);
    }
    const double exact = kl_divergence(mu, sigma);

    // E_q[log q(z) - log p(z)] over draws z = mu + sigma * eps
    const int n = 1000000;
    double acc = 0.0;
    for (int i = 0; i < n; ++i) {
        double term = 0.0;
        for (int j = 0; j < 3; ++j) {
            const double eps = rng.normal();
            const double z = mu[j] + sigma[j] * eps;
            const double logq = -0.5 * eps * eps - std::log(sigma[j]);
            const double logp = -0.5 * z * z;
            term += logq - logp;
        }
        acc += term;
    }
    const double mc = acc / n;
    CHECK(std::abs(mc - exact) / exact < 0.01);
}

TEST_CASE("reparameterization") {
    LatentCode code;
    code.mu = Eigen::Vector2d(1.0, 2.0);
    code.sigma = Eigen::Vector2d(0.5, 1.0);

    CHECK(reparameterize(code, Eigen::Vector2d::Zero()) == code.mu);

    const Eigen::VectorXd z = reparameterize(code, Eigen::Vector2d(2.0, -1.0));
    CHECK(z[0] == 2.0);
    CHECK(z[1] == 1.0);

    // sigma -> 0 limit collapses onto mu
    code.sigma = Eigen::Vector2d(0.0, 0.0);
    CHECK(reparameterize(code, Eigen::Vector2d(3.0, -3.0)) == code.mu);

    CHECK_THROWS_AS(reparameterize(code, Eigen::Vector3d::Zero()), ArgumentError);
}

TEST_CASE("pvae_loss composite") {
    const int n = 64;
    Eigen::ArrayXd x(n);
    Rng rng(5);
    for (int i = 0; i < n; ++i) x[i] = rng.uniform() < 0.5 ? 0.0 : 1.0;
    const Eigen::VectorXd mu = Eigen::VectorXd::Zero(4);
    const Eigen::VectorXd sigma = Eigen::VectorXd::Ones(4);
    const Eigen::VectorXd p = Eigen::Vector2d(0.25, 1.0);

    // exact reconstruction and exact properties at the prior: total 0 up to the BCE clamp
    const LossParts zero = pvae_loss(x, x, mu, sigma, p, p, 1.0, 10.0);
    CHECK(zero.recon == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(zero.kl == 0.0);
    CHECK(zero.prop == 0.0);
    CHECK(std::abs(zero.total) < 1e-8);

    // flat 0.5 reconstruction costs ln 2 per voxel
    const LossParts flat = pvae_loss(x, Eigen::ArrayXd::Constant(n, 0.5), mu, sigma, p, p, 1.0, 10.0);
    CHECK(flat.recon == doctest::Approx(n * std::log(2.0)).epsilon(1e-12));

    // lambda scales only the property part; beta only the KL part
    const Eigen::VectorXd p_off = Eigen::Vector2d(0.3, 1.2);
    Eigen::VectorXd mu_off = Eigen::VectorXd::Constant(4, 0.3);
    const LossParts a = pvae_loss(x, x, mu_off, sigma, p, p_off, 1.0, 10.0);
    const LossParts b = pvae_loss(x, x, mu_off, sigma, p, p_off, 1.0, 20.0);
    CHECK(b.prop == doctest::Approx(a.prop).epsilon(1e-12));
    CHECK(b.total - b.recon - b.kl == doctest::Approx(2.0 * (a.total - a.recon - a.kl)).epsilon(1e-9));

    // decomposition identity: total = recon + beta*kl + lambda*prop exactly
    const LossParts parts = pvae_loss(x, Eigen::ArrayXd::Constant(n, 0.3), mu_off, sigma, p, p_off, 1.7, 3.3);
    CHECK(parts.total == parts.recon + 1.7 * parts.kl + 3.3 * parts.prop);

    CHECK_THROWS_AS(pvae_loss(x, x.head(10), mu, sigma, p, p, 1.0, 1.0), ShapeError);
    CHECK_THROWS_AS(pvae_loss(x, x, mu, sigma, p, p, -1.0, 1.0), ArgumentError);
}

TEST_CASE("split determinism and proportions") {
    const auto s1 = split_dataset(100, 0.8, 0.1, 42);
    const auto s2 = split_dataset(100, 0.8, 0.1, 42);
    CHECK(s1.train == s2.train);
    CHECK(s1.val == s2.val);
    CHECK(s1.test == s2.test);
    CHECK(s1.train.size() == 80);
    CHECK(s1.val.size() == 10);
    CHECK(s1.test.size() == 10);

    const auto s3 = split_dataset(100, 0.8, 0.1, 43);
    CHECK(s1.train != s3.train);

    // tiny dataset still yields three non-empty splits
    const auto s4 = split_dataset(8, 0.8, 0.1, 0);
    CHECK(s4.train.size() == 6);
    CHECK(s4.val.size() == 1);
    CHECK(s4.test.size() == 1);
}

TEST_CASE("image round trip between grid and decoder layouts") {
    GeneratorConfig cfg;
    cfg.image_size = 32;
    cfg.pore_size = 4;
    cfg.n_pores_min = cfg.n_pores_max = 10;
    cfg.depth = 2;
    const VoxelGrid g = generate_synthetic_one(cfg, 9);
    const Eigen::ArrayXd img = image_from_grid(g, ConvMode::two_d);
    CHECK(img.size() == 32 * 32);
    CHECK(img.sum() == doctest::Approx(32.0 * 32.0 * (1.0 - porosity(g))).epsilon(1e-12));
    for (int z = 0; z < 32; ++z)
        for (int y = 0; y < 32; ++y) REQUIRE(img[z * 32 + y] == static_cast<double>(g.at(0, y, z)));
}
