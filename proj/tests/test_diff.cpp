#include "poro/diff/adam.hpp"
#include "poro/diff/checkpoint.hpp"
#include "poro/diff/ops.hpp"

#include "gradcheck.hpp"

#include <doctest.h>

#include <filesystem>

using namespace poro;
using namespace poro::diff;

TEST_CASE("elementwise forward values") {
    Tape t;
    DTensor x = DTensor::from_values({3}, {-1.0, 0.0, 2.0});
    Var r = relu(t.leaf(x));
    CHECK(r.value()[0] == 0.0);
    CHECK(r.value()[1] == 0.0);
    CHECK(r.value()[2] == 2.0);

    Var s0 = steep_sigmoid(t.constant({1}, Eigen::ArrayXd::Zero(1)), 3.7);
    CHECK(s0.value()[0] == 0.5);
    Eigen::ArrayXd one(1);
    one[0] = 1.0;
    Var s1 = steep_sigmoid(t.constant({1}, one), 5.0);
    CHECK(s1.value()[0] == doctest::Approx(0.9933071490757153).epsilon(1e-12));
    Eigen::ArrayXd neg(1);
    neg[0] = -1.0;
    Var s2 = steep_sigmoid(t.constant({1}, neg), 5.0);
    CHECK(s2.value()[0] == doctest::Approx(0.0066928509242848554).epsilon(1e-12));
    CHECK(s1.value()[0] + s2.value()[0] == doctest::Approx(1.0).epsilon(1e-12));

    CHECK_THROWS_AS(steep_sigmoid(s0, 0.0), ArgumentError);
    CHECK_THROWS_AS(steep_sigmoid(s0, -1.0), ArgumentError);
}

TEST_CASE("conv output extent formula") {
    CHECK(conv_out_extent(5, 3, 2, 0) == 2);
    CHECK(conv_out_extent(100, 2, 2, 0) == 50);
    CHECK(conv_out_extent(25, 4, 1, 0) == 22);
    CHECK(conv_out_extent(22, 4, 2, 0) == 10);
    CHECK(conv_out_extent(32, 3, 1, 1) == 32);
}

TEST_CASE("matmul all-ones") {
    Tape t;
    DTensor a = DTensor::full({2, 3}, 1.0);
    DTensor b = DTensor::full({3, 1}, 1.0);
    Var y = matmul(t.leaf(a), t.leaf(b));
    CHECK(y.shape() == Shape{2, 1});
    CHECK(y.value()[0] == 3.0);
    CHECK(y.value()[1] == 3.0);
}

TEST_CASE("backward basics") {
    // loss = sum(x^2), x = [1, 2] -> grad [2, 4]
    DTensor x = DTensor::from_values({2}, {1.0, 2.0});
    x.set_requires_grad(true);
    {
        Tape t;
        Var loss = sum(square(t.leaf(x)));
        CHECK(loss.value()[0] == 5.0);
        t.backward(loss);
    }
    CHECK(x.grad[0] == 2.0);
    CHECK(x.grad[1] == 4.0);

    // constant loss -> zero grads
    DTensor y = DTensor::from_values({2}, {3.0, 4.0});
    y.set_requires_grad(true);
    {
        Tape t;
        Var c = t.constant({1}, Eigen::ArrayXd::Constant(1, 7.0));
        (void)t.leaf(y);
        t.backward(Var{&t, c.id});
    }
    CHECK(y.grad[0] == 0.0);
    CHECK(y.grad[1] == 0.0);

    // repeated backward without zeroing accumulates
    x.zero_grad();
    Tape t;
    Var loss = sum(square(t.leaf(x)));
    t.backward(loss);
    t.backward(loss);
    CHECK(x.grad[0] == 4.0);
    CHECK(x.grad[1] == 8.0);

    // non-scalar loss rejected
    Tape t2;
    Var vec = t2.leaf(x);
    CHECK_THROWS_AS(t2.backward(vec), ArgumentError);
}

TEST_CASE("backward linearity on shared parameters") {
    Rng rng(4);
    DTensor x = gradcheck::random_tensor({6}, rng);
    x.set_requires_grad(true);

    auto grad_of = [&](double a, double b) {
        x.zero_grad();
        Tape t;
        Var xv = t.leaf(x);
        Var f = sum(square(xv));
        Var g = sum(exp_op(xv));
        Var lin = add(mul_scalar(f, a), mul_scalar(g, b));
        t.backward(lin);
        return Eigen::ArrayXd(x.grad);
    };

    const Eigen::ArrayXd gf = grad_of(1.0, 0.0);
    const Eigen::ArrayXd gg = grad_of(0.0, 1.0);
    const Eigen::ArrayXd gmix = grad_of(2.0, -3.0);
    CHECK(((2.0 * gf - 3.0 * gg) - gmix).abs().maxCoeff() < 1e-12);
}

TEST_CASE("shape errors name the primitive and shapes") {
    Tape t;
    DTensor a = DTensor::zeros({2, 3});
    DTensor b = DTensor::zeros({3, 3});
    try {
        (void)add(t.leaf(a), t.leaf(b));
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("add") != std::string::npos);
        CHECK(msg.find("(2,3)") != std::string::npos);
        CHECK(msg.find("(3,3)") != std::string::npos);
    }
    CHECK_THROWS_AS(matmul(t.leaf(a), t.leaf(a)), ShapeError);
    CHECK_THROWS_AS(reshape(t.leaf(a), {7}), ShapeError);
}

TEST_CASE("every primitive passes the finite-difference oracle") {
    double worst = 0.0;
    std::string label;
    for (std::uint64_t s = 0; s < 5; ++s) {
        const auto r = gradcheck::all_primitives(1000 + s);
        if (r.max_rel > worst) {
            worst = r.max_rel;
            label = r.worst;
        }
    }
    INFO("worst: ", label);
    CHECK(worst < 1e-5);
}

TEST_CASE("three-layer network gradient vs finite differences") {
    Rng rng(42);
    DTensor w1 = gradcheck::random_tensor({4, 8}, rng, -0.5, 0.5);
    DTensor b1 = gradcheck::random_tensor({8}, rng, -0.1, 0.1);
    DTensor w2 = gradcheck::random_tensor({8, 6}, rng, -0.5, 0.5);
    DTensor b2 = gradcheck::random_tensor({6}, rng, -0.1, 0.1);
    DTensor w3 = gradcheck::random_tensor({6, 2}, rng, -0.5, 0.5);
    const Eigen::ArrayXd input = gradcheck::random_array(3 * 4, rng);
    const Eigen::ArrayXd target = gradcheck::random_array(3 * 2, rng);

    auto loss_fn = [&](Tape& t) {
        Var x = t.constant({3, 4}, input);
        Var h1 = steep_sigmoid(bias_add(matmul(x, t.leaf(w1)), t.leaf(b1), 1), 1.0);
        Var h2 = relu(bias_add(matmul(h1, t.leaf(w2)), t.leaf(b2), 1));
        Var out = matmul(h2, t.leaf(w3));
        return sum(square(sub(out, t.constant({3, 2}, target))));
    };
    const auto r = gradcheck::check({&w1, &b1, &w2, &b2, &w3}, loss_fn, "mlp");
    INFO("worst: ", r.worst);
    CHECK(r.max_rel < 1e-5);
}

TEST_CASE("conv and transposed conv are exact adjoints") {
    double worst = 0.0;
    for (std::uint64_t s = 0; s < 10; ++s) worst = std::max(worst, gradcheck::adjointness_gap(77 + s));
    CHECK(worst < 1e-10);
}

TEST_CASE("forward/backward determinism") {
    auto run = [](std::uint64_t seed) {
        Rng rng(seed);
        DTensor w = gradcheck::random_tensor({4, 2, 3, 3}, rng, -0.5, 0.5);
        DTensor x = gradcheck::random_tensor({2, 2, 8, 8}, rng);
        w.set_requires_grad(true);
        Tape t;
        Var y = conv2d(t.leaf(x), t.leaf(w), 2, 1);
        Var loss = sum(square(y));
        t.backward(loss);
        return std::make_pair(Eigen::ArrayXd(y.value()), Eigen::ArrayXd(w.grad));
    };
    const auto [v1, g1] = run(5);
    const auto [v2, g2] = run(5);
    CHECK((v1 == v2).all());
    CHECK((g1 == g2).all());
}

TEST_CASE("adam update") {
    // first step with g = 1 moves by about -lr
    DTensor p = DTensor::full({3}, 1.0);
    p.set_requires_grad(true);
    p.grad.setConstant(1.0);
    std::vector<DTensor*> params{&p};
    AdamState st;
    st.init(params);
    AdamConfig cfg;
    cfg.lr = 0.01;
    adam_step(params, st, cfg);
    for (int i = 0; i < 3; ++i) CHECK(p.value[i] == doctest::Approx(1.0 - 0.01).epsilon(1e-6));
    CHECK(st.t == 1);

    // zero gradient with fresh state leaves parameters unchanged
    DTensor q = DTensor::full({2}, 0.5);
    q.set_requires_grad(true);
    q.zero_grad();
    std::vector<DTensor*> qs{&q};
    AdamState st2;
    st2.init(qs);
    adam_step(qs, st2, cfg);
    CHECK(q.value[0] == 0.5);
    CHECK(q.value[1] == 0.5);

    // constant gradient: monotone drift with bounded per-step magnitude
    DTensor r = DTensor::full({1}, 0.0);
    r.set_requires_grad(true);
    std::vector<DTensor*> rs{&r};
    AdamState st3;
    st3.init(rs);
    double prev = 0.0;
    for (int i = 0; i < 1000; ++i) {
        r.grad.setConstant(2.5);
        adam_step(rs, st3, cfg);
        const double step_size = prev - r.value[0];
        CHECK(step_size > 0.0);
        CHECK(step_size <= cfg.lr * (1.0 + 1e-6));
        prev = r.value[0];
    }

    // mismatched state is rejected
    AdamState bad;
    bad.init(qs);
    CHECK_THROWS_AS(adam_step(rs, bad, cfg), ArgumentError);
}

TEST_CASE("checkpoint round trip") {
    namespace fs = std::filesystem;
    Rng rng(3);
    DTensor a = gradcheck::random_tensor({3, 4}, rng);
    DTensor b = gradcheck::random_tensor({7}, rng);
    nlohmann::ordered_json meta;
    meta["purpose"] = "test";
    meta["value"] = 12;

    const auto path = fs::temp_directory_path() / "poro_test_diff" / "ck.pvk";
    save_checkpoint(path, {{"layer.w", &a}, {"layer.b", &b}}, meta);
    const Checkpoint ck = load_checkpoint(path);
    CHECK(ck.meta["purpose"] == "test");
    CHECK(ck.meta["value"] == 12);
    REQUIRE(ck.params.count("layer.w") == 1);
    REQUIRE(ck.params.count("layer.b") == 1);
    CHECK(ck.params.at("layer.w").shape == Shape{3, 4});
    CHECK((ck.params.at("layer.w").value == a.value).all());
    CHECK((ck.params.at("layer.b").value == b.value).all());

    CHECK_THROWS_AS(load_checkpoint(fs::temp_directory_path() / "missing.pvk"), IoError);
}
