// Parameter store, gradient clipping, the AdamW update rule, and the
// cosine warm-restart schedule.

#include <doctest.h>

#include <cmath>
#include <vector>

#include "vb/nn/optimizer.hpp"

using vb::nn::AdamW;
using vb::nn::AdamWConfig;
using vb::nn::CosineWarmRestarts;
using vb::nn::ParamStore;

TEST_CASE("param store rejects duplicates and finds by name") {
    ParamStore ps;
    ps.add("conv.w", {2, 2}, {1.0, 2.0, 3.0, 4.0});
    ps.add("conv.b", {2}, {0.0, 0.0});
    CHECK(ps.size() == 2);
    CHECK(ps.has("conv.w"));
    CHECK_FALSE(ps.has("missing"));
    CHECK(ps.by_name("conv.b").shape == vb::nn::Shape{2});
    CHECK_THROWS_AS(ps.by_name("missing"), std::exception);
    CHECK_THROWS_AS(ps.add("conv.w", {1}, {0.0}), std::exception);
}

TEST_CASE("gradient norm and zeroing") {
    ParamStore ps;
    auto& a = ps.add("a", {2}, {0.0, 0.0});
    auto& b = ps.add("b", {1}, {0.0});
    a.grad = {3.0, 0.0};
    b.grad = {4.0};
    CHECK(ps.grad_norm() == doctest::Approx(5.0).epsilon(1e-15));
    ps.zero_grads();
    CHECK(a.grad[0] == 0.0);
    CHECK(b.grad[0] == 0.0);
    CHECK(ps.grad_norm() == 0.0);
}

TEST_CASE("clipping a norm-10 gradient to 2 yields exactly norm 2") {
    ParamStore ps;
    auto& p = ps.add("p", {4}, std::vector<double>(4, 0.0));
    // Gradient (8, 6, 0, 0) has L2 norm exactly 10 in floating point.
    p.grad = {8.0, 6.0, 0.0, 0.0};
    const double pre = ps.clip_grad_norm(2.0);
    CHECK(pre == 10.0);
    CHECK(p.grad[0] == doctest::Approx(1.6).epsilon(1e-15));
    CHECK(p.grad[1] == doctest::Approx(1.2).epsilon(1e-15));
    CHECK(ps.grad_norm() == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("clipping below the threshold leaves gradients untouched") {
    ParamStore ps;
    auto& p = ps.add("p", {2}, {0.0, 0.0});
    p.grad = {0.3, -0.4}; // norm 0.5
    const double pre = ps.clip_grad_norm(2.0);
    CHECK(pre == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(p.grad[0] == 0.3); // bit-identical: clip must not rescale
    CHECK(p.grad[1] == -0.4);
}

TEST_CASE("one AdamW step matches the hand-derived update") {
    AdamWConfig cfg;
    cfg.lr = 0.1;
    cfg.beta1 = 0.9;
    cfg.beta2 = 0.999;
    cfg.eps = 1e-8;
    cfg.weight_decay = 0.01;

    ParamStore ps;
    auto& p = ps.add("p", {2}, {1.0, -2.0});
    p.grad = {0.5, -0.25};

    // t = 1: m = (1-b1) g, v = (1-b2) g^2, m_hat = g, v_hat = g^2
    // => update = lr * (g / (|g| + eps) + wd * p)
    std::vector<double> expect(2);
    for (int i = 0; i < 2; ++i) {
        const double g = p.grad[i];
        const double m_hat = g;               // m / (1 - b1^1)
        const double v_hat = g * g;           // v / (1 - b2^1)
        expect[i] = p.value[i] -
                    cfg.lr * (m_hat / (std::sqrt(v_hat) + cfg.eps) +
                              cfg.weight_decay * p.value[i]);
    }
    AdamW opt(cfg);
    opt.step(ps);
    CHECK(opt.steps_taken() == 1);
    CHECK(p.value[0] == doctest::Approx(expect[0]).epsilon(1e-14));
    CHECK(p.value[1] == doctest::Approx(expect[1]).epsilon(1e-14));
}

TEST_CASE("two AdamW steps track the moment recursions exactly") {
    AdamWConfig cfg;
    cfg.lr = 0.05;
    cfg.weight_decay = 0.1;
    ParamStore ps;
    auto& p = ps.add("p", {1}, {0.7});

    // Independent reimplementation of the update for a single scalar.
    double m = 0.0, v = 0.0, ref = 0.7;
    const double grads[2] = {0.3, -0.8};
    AdamW opt(cfg);
    for (int t = 1; t <= 2; ++t) {
        const double g = grads[t - 1];
        m = cfg.beta1 * m + (1 - cfg.beta1) * g;
        v = cfg.beta2 * v + (1 - cfg.beta2) * g * g;
        const double m_hat = m / (1 - std::pow(cfg.beta1, t));
        const double v_hat = v / (1 - std::pow(cfg.beta2, t));
        ref -= cfg.lr * (m_hat / (std::sqrt(v_hat) + cfg.eps) + cfg.weight_decay * ref);

        p.grad[0] = g;
        opt.step(ps);
        CHECK(p.value[0] == doctest::Approx(ref).epsilon(1e-13));
    }
}

TEST_CASE("weight decay is decoupled from the gradient moments") {
    // With zero gradient the adaptive term vanishes; only decay moves the
    // parameter. A coupled (L2-in-gradient) implementation would divide by
    // sqrt(v_hat) ~ |wd*p| and move the parameter by ~lr instead.
    AdamWConfig cfg;
    cfg.lr = 0.1;
    cfg.weight_decay = 0.5;
    ParamStore ps;
    auto& p = ps.add("p", {1}, {2.0});
    p.grad = {0.0};
    AdamW opt(cfg);
    opt.step(ps);
    CHECK(p.value[0] == doctest::Approx(2.0 - 0.1 * 0.5 * 2.0).epsilon(1e-14));
}

TEST_CASE("per-step learning-rate override scales the whole update") {
    AdamWConfig cfg;
    cfg.lr = 123.0; // must be ignored when an explicit lr is passed
    cfg.weight_decay = 0.0;
    ParamStore a_store, b_store;
    auto& a = a_store.add("p", {1}, {1.0});
    auto& b = b_store.add("p", {1}, {1.0});
    a.grad = {0.4};
    b.grad = {0.4};
    AdamW opt_a(cfg), opt_b(cfg);
    opt_a.step(a_store, 0.01);
    opt_b.step(b_store, 0.02);
    const double da = 1.0 - a.value[0];
    const double db = 1.0 - b.value[0];
    CHECK(db == doctest::Approx(2.0 * da).epsilon(1e-12));
}

TEST_CASE("cosine schedule restarts exactly at multiples of the period") {
    CosineWarmRestarts sched;
    sched.lr_max = 0.1;
    sched.lr_min = 0.001;
    sched.period = 10;

    CHECK(sched.lr_at(0) == 0.1);  // exact restart values, not approximate
    CHECK(sched.lr_at(10) == 0.1);
    CHECK(sched.lr_at(20) == 0.1);

    // Midpoint of the cycle sits exactly halfway between max and min.
    CHECK(sched.lr_at(5) == doctest::Approx(0.5 * (0.1 + 0.001)).epsilon(1e-12));
    CHECK(sched.lr_at(15) == doctest::Approx(0.5 * (0.1 + 0.001)).epsilon(1e-12));

    // Monotone decrease within a cycle, never below lr_min or above lr_max.
    for (int e = 0; e < 10; ++e) {
        CHECK(sched.lr_at(e) > sched.lr_at(e + 1) - 1e-15);
        CHECK(sched.lr_at(e) >= sched.lr_min);
        CHECK(sched.lr_at(e) <= sched.lr_max);
    }

    // The epoch just before a restart is the trough of the cosine, close to
    // lr_min but not equal (the cycle reaches lr_min only in the limit).
    CHECK(sched.lr_at(9) < sched.lr_at(5));
    CHECK(sched.lr_at(9) >= sched.lr_min);
}

TEST_CASE("cosine schedule follows the closed form inside a cycle") {
    CosineWarmRestarts sched;
    sched.lr_max = 1.0;
    sched.lr_min = 0.0;
    sched.period = 8;
    for (int e = 0; e < 24; ++e) {
        const int phase = e % 8;
        const double expect = 0.5 * (1.0 + std::cos(M_PI * phase / 8.0));
        CHECK(sched.lr_at(e) == doctest::Approx(expect).epsilon(1e-12));
    }
}
