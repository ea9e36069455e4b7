// Reverse-mode tape: per-op gradient checks against finite differences,
// masked-pooling contribution invariants, loss fixtures, and the agreement
// between the blocked and reference convolution kernels.

#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <vector>

#include "vb/nn/gradcheck.hpp"
#include "vb/nn/kernels.hpp"
#include "vb/nn/tensor.hpp"
#include "vb/rng.hpp"

using vb::nn::GradCheckInput;
using vb::nn::Shape;
using vb::nn::Tape;
using vb::nn::Tensor;

namespace {

constexpr double kGradTol = 1e-4;

std::vector<double> random_values(std::int64_t n, std::uint64_t seed, double lo = -1.0,
                                  double hi = 1.0) {
    vb::Rng rng(seed);
    std::vector<double> v(static_cast<std::size_t>(n));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return v;
}

std::vector<double> random_weights(std::int64_t n, std::uint64_t seed) {
    return random_values(n, seed, 0.1, 1.0); // bounded away from 0 so every
                                             // element matters in the loss
}

// Scalarises an arbitrary tensor with fixed random weights so grad_check can
// treat any op's output as a loss.
vb::nn::Tensor to_loss(Tape& tape, Tensor t, std::uint64_t seed = 999) {
    return vb::nn::weighted_sum(t, random_weights(vb::nn::shape_numel(t.shape()), seed));
}

} // namespace

// --- tape mechanics -------------------------------------------------------

TEST_CASE("backward accumulates into leaves but not constants") {
    Tape tape;
    Tensor a = tape.leaf({2}, {1.0, 2.0});
    Tensor c = tape.constant({2}, {3.0, 4.0});
    // loss = sum(a * c) via channel_scale on a degenerate spatial shape.
    Tensor prod = vb::nn::channel_scale(vb::nn::reshape(a, {2, 1}), c);
    Tensor loss = vb::nn::weighted_sum(prod, {1.0, 1.0});
    tape.backward(loss);
    CHECK(a.grad()[0] == 3.0);
    CHECK(a.grad()[1] == 4.0);
    CHECK_FALSE(c.tracked());
    CHECK(tape.backward_done());
}

TEST_CASE("tape rejects a second backward and non-scalar losses") {
    Tape tape;
    Tensor a = tape.leaf({2}, {1.0, 2.0});
    Tensor s = vb::nn::weighted_sum(a, {1.0, 1.0});
    tape.backward(s);
    CHECK_THROWS_AS(tape.backward(s), std::logic_error);

    Tape tape2;
    Tensor b = tape2.leaf({2}, {1.0, 2.0});
    CHECK_THROWS_AS(tape2.backward(b), std::invalid_argument);
}

TEST_CASE("ops validate shapes") {
    Tape tape;
    Tensor x = tape.leaf({2, 3}, random_values(6, 1));
    Tensor w = tape.leaf({4, 5}, random_values(20, 2)); // wrong inner dim
    Tensor b = tape.leaf({4}, random_values(4, 3));
    CHECK_THROWS_AS(vb::nn::linear(x, w, b), std::invalid_argument);
    CHECK_THROWS_AS(vb::nn::reshape(x, {7}), std::invalid_argument);
    Tensor f = tape.leaf({2, 2, 2, 2}, random_values(16, 4));
    Tensor m = tape.constant({3, 2, 2}, random_values(12, 5));
    CHECK_THROWS_AS(vb::nn::masked_avg_pool(f, m), std::invalid_argument);
}

// --- per-op gradient checks ------------------------------------------------

TEST_CASE("conv3d gradients match finite differences") {
    // stride 1 with padding, then stride 2, then an anisotropic kernel.
    struct Cfg {
        Shape x, k;
        int stride, pad;
    };
    const Cfg cfgs[] = {
        {{1, 2, 3, 3, 3}, {2, 2, 3, 3, 3}, 1, 1},
        {{1, 1, 4, 4, 4}, {2, 1, 3, 3, 3}, 2, 1},
        {{2, 2, 3, 4, 5}, {3, 2, 1, 3, 3}, 1, 0},
    };
    for (const Cfg& c : cfgs) {
        CAPTURE(c.stride);
        CAPTURE(c.pad);
        std::vector<GradCheckInput> inputs = {
            {c.x, random_values(vb::nn::shape_numel(c.x), 11)},
            {c.k, random_values(vb::nn::shape_numel(c.k), 12)},
        };
        auto report = vb::nn::grad_check(inputs, [&](Tape& tape, const std::vector<Tensor>& in) {
            return to_loss(tape, vb::nn::conv3d(in[0], in[1], c.stride, c.pad));
        });
        CHECK(report.max_rel_err < kGradTol);
    }
}

TEST_CASE("bias_add and linear gradients match finite differences") {
    std::vector<GradCheckInput> inputs = {
        {{1, 3, 2, 2, 2}, random_values(24, 21)},
        {{3}, random_values(3, 22)},
        {{4, 3}, random_values(12, 23)}, // linear weight [out=4, in=3]
        {{4}, random_values(4, 24)},     // linear bias
    };
    auto report = vb::nn::grad_check(inputs, [&](Tape& tape, const std::vector<Tensor>& in) {
        Tensor biased = vb::nn::bias_add(in[0], in[1]);
        Tensor pooled = vb::nn::gap(vb::nn::reshape(biased, {3, 2, 2, 2}));
        Tensor row = vb::nn::reshape(pooled, {1, 3});
        return to_loss(tape, vb::nn::linear(row, in[2], in[3]));
    });
    CHECK(report.max_rel_err < kGradTol);
}

TEST_CASE("pointwise nonlinearities match finite differences") {
    // ReLU values are kept away from the kink at 0 where the derivative
    // does not exist and finite differences are meaningless.
    std::vector<double> vals = random_values(12, 31);
    for (auto& v : vals) v += (v >= 0 ? 0.5 : -0.5);
    std::vector<GradCheckInput> inputs = {{{12}, vals}};
    auto relu_rep = vb::nn::grad_check(inputs, [&](Tape& tape, const std::vector<Tensor>& in) {
        return to_loss(tape, vb::nn::relu(in[0]));
    });
    CHECK(relu_rep.max_rel_err < kGradTol);

    std::vector<GradCheckInput> sig_in = {{{12}, random_values(12, 32, -3.0, 3.0)}};
    auto sig_rep = vb::nn::grad_check(sig_in, [&](Tape& tape, const std::vector<Tensor>& in) {
        return to_loss(tape, vb::nn::sigmoid(in[0]));
    });
    CHECK(sig_rep.max_rel_err < kGradTol);
}

TEST_CASE("softmax gradient matches finite differences") {
    std::vector<GradCheckInput> inputs = {{{3, 4}, random_values(12, 41, -2.0, 2.0)}};
    auto report = vb::nn::grad_check(inputs, [&](Tape& tape, const std::vector<Tensor>& in) {
        return to_loss(tape, vb::nn::softmax(in[0]));
    });
    CHECK(report.max_rel_err < kGradTol);
}

TEST_CASE("gap and masked_avg_pool gradients match finite differences") {
    std::vector<double> mask(8, 0.0);
    mask[1] = mask[3] = mask[6] = 1.0;
    std::vector<GradCheckInput> inputs = {{{3, 2, 2, 2}, random_values(24, 51)}};
    auto gap_rep = vb::nn::grad_check(inputs, [&](Tape& tape, const std::vector<Tensor>& in) {
        return to_loss(tape, vb::nn::gap(in[0]));
    });
    CHECK(gap_rep.max_rel_err < kGradTol);

    auto mav_rep = vb::nn::grad_check(inputs, [&](Tape& tape, const std::vector<Tensor>& in) {
        Tensor m = tape.constant({2, 2, 2}, mask);
        return to_loss(tape, vb::nn::masked_avg_pool(in[0], m));
    });
    CHECK(mav_rep.max_rel_err < kGradTol);
}

TEST_CASE("channel_scale, concat and reshape gradients match finite differences") {
    std::vector<GradCheckInput> inputs = {
        {{3, 2, 2}, random_values(12, 61)},
        {{3}, random_values(3, 62)},
        {{4}, random_values(4, 63)},
    };
    auto report = vb::nn::grad_check(inputs, [&](Tape& tape, const std::vector<Tensor>& in) {
        Tensor scaled = vb::nn::channel_scale(in[0], in[1]);
        Tensor flat = vb::nn::reshape(scaled, {12});
        return to_loss(tape, vb::nn::concat(flat, in[2]));
    });
    CHECK(report.max_rel_err < kGradTol);
}

TEST_CASE("channel gate gradients match finite differences through both outputs") {
    const int c = 3, hidden = 2;
    std::vector<GradCheckInput> inputs = {
        {{c, 2, 2}, random_values(12, 71)},      // features
        {{c}, random_values(c, 72)},             // pooled descriptor
        {{hidden, c}, random_values(6, 73)},     // squeeze weight
        {{hidden}, random_values(hidden, 74)},   // squeeze bias
        {{c, hidden}, random_values(6, 75)},     // excite weight
        {{c}, random_values(c, 76)},             // excite bias
    };
    auto report = vb::nn::grad_check(inputs, [&](Tape& tape, const std::vector<Tensor>& in) {
        auto gate = vb::nn::channel_gate(in[0], in[1], in[2], in[3], in[4], in[5]);
        Tensor a = to_loss(tape, gate.f_att, 101);
        Tensor b = to_loss(tape, gate.w, 102);
        Tensor both = vb::nn::concat(vb::nn::reshape(a, {1}), vb::nn::reshape(b, {1}));
        return vb::nn::weighted_sum(both, {1.0, 0.7});
    });
    CHECK(report.max_rel_err < kGradTol);
}

TEST_CASE("dropout gradient matches finite differences for a fixed pattern") {
    std::vector<GradCheckInput> inputs = {{{16}, random_values(16, 81)}};
    auto report = vb::nn::grad_check(inputs, [&](Tape& tape, const std::vector<Tensor>& in) {
        return to_loss(tape, vb::nn::dropout(in[0], 0.25, /*seed=*/1234, /*training=*/true));
    });
    CHECK(report.max_rel_err < kGradTol);
}

TEST_CASE("loss gradients match finite differences") {
    std::vector<GradCheckInput> ce_in = {{{3, 4}, random_values(12, 91, -2.0, 2.0)}};
    const std::vector<int> labels = {2, 0, 3};
    auto ce_rep = vb::nn::grad_check(ce_in, [&](Tape& tape, const std::vector<Tensor>& in) {
        return vb::nn::cross_entropy_smoothed(in[0], labels, 0.05);
    });
    CHECK(ce_rep.max_rel_err < kGradTol);

    std::vector<GradCheckInput> bce_in = {{{4}, random_values(4, 92, -2.0, 2.0)}};
    const std::vector<double> targets = {1.0, 0.0, 0.3, 0.8};
    auto bce_rep = vb::nn::grad_check(bce_in, [&](Tape& tape, const std::vector<Tensor>& in) {
        return vb::nn::bce_with_logits(in[0], targets);
    });
    CHECK(bce_rep.max_rel_err < kGradTol);
}

// --- masked pooling contribution invariants --------------------------------

TEST_CASE("masked pooling with an all-zero mask returns exact zeros") {
    Tape tape;
    Tensor f = tape.leaf({4, 3, 3, 3}, random_values(108, 111, -10.0, 10.0));
    Tensor m = tape.constant({3, 3, 3}, std::vector<double>(27, 0.0));
    Tensor z = vb::nn::masked_avg_pool(f, m);
    for (double v : z.value()) CHECK(v == 0.0); // exact, not approximate
}

TEST_CASE("masked pooling with a full mask equals the sum over the padded count") {
    Tape tape;
    const std::vector<double> fv = random_values(2 * 8, 112);
    Tensor f = tape.leaf({2, 2, 2, 2}, fv);
    Tensor m = tape.constant({2, 2, 2}, std::vector<double>(8, 1.0));
    const double eps = 1e-6;
    Tensor z = vb::nn::masked_avg_pool(f, m, eps);
    for (int c = 0; c < 2; ++c) {
        double acc = 0.0;
        for (int i = 0; i < 8; ++i) acc += fv[c * 8 + i];
        CHECK(z.value()[c] == acc / (8.0 + eps)); // same arithmetic, bit-exact
    }
}

TEST_CASE("voxels outside the mask have exactly zero influence") {
    // Perturbing a masked-out voxel must leave the pooled value bit-identical,
    // and its gradient must be exactly zero.
    std::vector<double> mask(27, 0.0);
    mask[4] = mask[13] = mask[22] = 1.0;
    const std::vector<double> base = random_values(2 * 27, 113);

    auto pooled = [&](const std::vector<double>& fv) {
        Tape tape;
        Tensor f = tape.constant({2, 3, 3, 3}, fv);
        Tensor m = tape.constant({3, 3, 3}, mask);
        return vb::nn::masked_avg_pool(f, m).value();
    };

    const std::vector<double> z0 = pooled(base);
    std::vector<double> perturbed = base;
    for (int i = 0; i < 27; ++i)
        if (mask[i] == 0.0) {
            perturbed[i] += 1e6;       // channel 0
            perturbed[27 + i] -= 1e6;  // channel 1
        }
    const std::vector<double> z1 = pooled(perturbed);
    CHECK(z0 == z1); // bit-identical vectors

    Tape tape;
    Tensor f = tape.leaf({2, 3, 3, 3}, base);
    Tensor m = tape.constant({3, 3, 3}, mask);
    Tensor loss = to_loss(tape, vb::nn::masked_avg_pool(f, m));
    tape.backward(loss);
    for (int c = 0; c < 2; ++c)
        for (int i = 0; i < 27; ++i) {
            const double g = f.grad()[c * 27 + i];
            if (mask[i] == 0.0)
                CHECK(g == 0.0); // exactly zero, not small
            else
                CHECK(g != 0.0);
        }
}

TEST_CASE("gating then pooling equals gating the pooled vector") {
    // Scaling features per channel commutes with spatial averaging, so the
    // attended global descriptor is the elementwise product of the gate with
    // the plain descriptor.
    Tape tape;
    Tensor f = tape.constant({3, 2, 2, 2}, random_values(24, 114));
    Tensor w = tape.constant({3}, {0.3, 0.6, 0.9});
    Tensor pooled_then_scaled = vb::nn::channel_scale(
        vb::nn::reshape(vb::nn::gap(f), {3, 1}), w);
    Tensor scaled_then_pooled = vb::nn::gap(vb::nn::channel_scale(f, w));
    for (int c = 0; c < 3; ++c)
        CHECK(pooled_then_scaled.value()[c] ==
              doctest::Approx(scaled_then_pooled.value()[c]).epsilon(1e-12));
}

// --- loss fixtures ----------------------------------------------------------

TEST_CASE("smoothed cross entropy on uniform logits is ln K for any smoothing") {
    for (double eps : {0.0, 0.05, 0.3}) {
        Tape tape;
        Tensor logits = tape.leaf({2, 4}, std::vector<double>(8, 0.7));
        Tensor loss = vb::nn::cross_entropy_smoothed(logits, {1, 3}, eps);
        CHECK(loss.value()[0] == doctest::Approx(std::log(4.0)).epsilon(1e-12));
    }
}

TEST_CASE("smoothed cross entropy matches the hand-computed fixture") {
    // K = 3, eps = 0.3: target mass 0.7 on the true class and 0.15 on each
    // of the two others.
    const std::vector<double> logits = {1.0, 0.0, -1.0};
    const double mx = 1.0;
    double zsum = 0.0;
    std::vector<double> logp(3);
    for (int c = 0; c < 3; ++c) zsum += std::exp(logits[c] - mx);
    for (int c = 0; c < 3; ++c) logp[c] = (logits[c] - mx) - std::log(zsum);
    const double expected = -(0.7 * logp[0] + 0.15 * logp[1] + 0.15 * logp[2]);

    Tape tape;
    Tensor t = tape.leaf({1, 3}, logits);
    Tensor loss = vb::nn::cross_entropy_smoothed(t, {0}, 0.3);
    CHECK(loss.value()[0] == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("zero smoothing reduces to plain cross entropy and rows are averaged") {
    const std::vector<double> logits = {2.0, -1.0, 0.5, 0.0, 0.0, 0.0};
    auto row_ce = [&](int row, int label) {
        double mx = logits[row * 3];
        for (int c = 1; c < 3; ++c) mx = std::max(mx, logits[row * 3 + c]);
        double zsum = 0.0;
        for (int c = 0; c < 3; ++c) zsum += std::exp(logits[row * 3 + c] - mx);
        return -((logits[row * 3 + label] - mx) - std::log(zsum));
    };
    Tape tape;
    Tensor t = tape.leaf({2, 3}, logits);
    Tensor loss = vb::nn::cross_entropy_smoothed(t, {0, 2}, 0.0);
    CHECK(loss.value()[0] ==
          doctest::Approx(0.5 * (row_ce(0, 0) + row_ce(1, 2))).epsilon(1e-12));
}

TEST_CASE("binary cross entropy matches closed forms") {
    Tape tape;
    Tensor z = tape.leaf({1}, {0.0});
    Tensor loss = vb::nn::bce_with_logits(z, {0.5});
    CHECK(loss.value()[0] == doctest::Approx(std::log(2.0)).epsilon(1e-12));

    // General fixture: -t*log(s) - (1-t)*log(1-s) at logit 1.3, target 0.8.
    const double s = 1.0 / (1.0 + std::exp(-1.3));
    const double expected = -(0.8 * std::log(s) + 0.2 * std::log(1.0 - s));
    Tape tape2;
    Tensor z2 = tape2.leaf({1}, {1.3});
    Tensor loss2 = vb::nn::bce_with_logits(z2, {0.8});
    CHECK(loss2.value()[0] == doctest::Approx(expected).epsilon(1e-12));

    // Large-magnitude logits must not produce inf/nan in the stable form.
    Tape tape3;
    Tensor z3 = tape3.leaf({2}, {80.0, -80.0});
    Tensor loss3 = vb::nn::bce_with_logits(z3, {0.0, 1.0});
    CHECK(std::isfinite(loss3.value()[0]));
    CHECK(loss3.value()[0] == doctest::Approx(80.0).epsilon(1e-9));
}

// --- softmax properties ------------------------------------------------------

TEST_CASE("softmax rows sum to one and are shift invariant") {
    Tape tape;
    const std::vector<double> vals = random_values(8, 121, -5.0, 5.0);
    Tensor x = tape.leaf({2, 4}, vals);
    Tensor y = vb::nn::softmax(x);
    for (int r = 0; r < 2; ++r) {
        double sum = 0.0;
        for (int c = 0; c < 4; ++c) sum += y.value()[r * 4 + c];
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    }
    std::vector<double> shifted = vals;
    for (int c = 0; c < 4; ++c) shifted[c] += 100.0; // shift row 0 only
    Tape tape2;
    Tensor y2 = vb::nn::softmax(tape2.leaf({2, 4}, shifted));
    for (int c = 0; c < 4; ++c)
        CHECK(y2.value()[c] == doctest::Approx(y.value()[c]).epsilon(1e-12));
}

// --- dropout semantics --------------------------------------------------------

TEST_CASE("dropout is identity in eval mode and deterministic per seed") {
    Tape tape;
    const std::vector<double> vals = random_values(64, 131);
    Tensor x = tape.constant({64}, vals);
    Tensor eval_out = vb::nn::dropout(x, 0.5, 7, /*training=*/false);
    CHECK(eval_out.value() == vals);
    Tensor p0 = vb::nn::dropout(x, 0.0, 7, /*training=*/true);
    CHECK(p0.value() == vals);

    Tensor a = vb::nn::dropout(x, 0.5, 7, true);
    Tensor b = vb::nn::dropout(x, 0.5, 7, true);
    Tensor c = vb::nn::dropout(x, 0.5, 8, true);
    CHECK(a.value() == b.value());
    CHECK(a.value() != c.value());

    // Kept elements are scaled by exactly 1/(1-p); dropped are exact zero.
    const double p = 0.25;
    Tensor d = vb::nn::dropout(x, p, 99, true);
    int kept = 0;
    for (int i = 0; i < 64; ++i) {
        const double v = d.value()[i];
        if (v == 0.0) continue;
        CHECK(v == vals[i] / (1.0 - p));
        ++kept;
    }
    CHECK(kept > 32); // keep rate ~0.75 of 64
    CHECK(kept < 64);
}

TEST_CASE("dropout keep rate is near 1-p over many draws") {
    const int n = 512;
    Tape tape;
    Tensor x = tape.constant({n}, std::vector<double>(n, 1.0));
    int kept = 0;
    const int trials = 40;
    for (int t = 0; t < trials; ++t) {
        Tensor d = vb::nn::dropout(x, 0.3, 1000 + t, true);
        for (double v : d.value())
            if (v != 0.0) ++kept;
    }
    const double rate = static_cast<double>(kept) / (n * trials);
    CHECK(rate == doctest::Approx(0.7).epsilon(0.02));
}

// --- kernel agreement ----------------------------------------------------------

TEST_CASE("blocked convolution agrees with the reference within 1e-10") {
    using vb::nn::detail::Conv3dShape;
    const Conv3dShape shapes[] = {
        Conv3dShape::make(1, 1, 5, 5, 5, 2, 3, 3, 3, 1, 1),
        Conv3dShape::make(2, 3, 6, 5, 4, 4, 3, 3, 3, 2, 1),
        Conv3dShape::make(1, 2, 7, 7, 7, 3, 1, 3, 5, 1, 2),
        Conv3dShape::make(1, 4, 8, 8, 8, 8, 3, 3, 3, 2, 1),
    };
    for (const auto& s : shapes) {
        REQUIRE(s.valid());
        const std::int64_t xin = static_cast<std::int64_t>(s.n) * s.ci * s.d * s.h * s.w;
        const std::int64_t kin = static_cast<std::int64_t>(s.co) * s.ci * s.kd * s.kh * s.kw;
        const std::int64_t out = static_cast<std::int64_t>(s.n) * s.co * s.od * s.oh * s.ow;
        const std::vector<double> x = random_values(xin, 141);
        const std::vector<double> k = random_values(kin, 142);
        std::vector<double> ref(out), blocked(out);
        vb::nn::detail::conv3d_forward_ref(x.data(), k.data(), ref.data(), s);
        vb::nn::detail::conv3d_forward_blocked(x.data(), k.data(), blocked.data(), s);
        double max_err = 0.0;
        for (std::int64_t i = 0; i < out; ++i)
            max_err = std::max(max_err, std::abs(ref[i] - blocked[i]));
        CHECK(max_err <= 1e-10);
    }
}

TEST_CASE("weighted_sum computes the dot product and its gradient is the weights") {
    Tape tape;
    Tensor x = tape.leaf({3}, {1.0, 2.0, 3.0});
    Tensor s = vb::nn::weighted_sum(x, {0.5, -1.0, 2.0});
    CHECK(s.value()[0] == doctest::Approx(0.5 - 2.0 + 6.0).epsilon(1e-15));
    tape.backward(s);
    CHECK(x.grad()[0] == 0.5);
    CHECK(x.grad()[1] == -1.0);
    CHECK(x.grad()[2] == 2.0);
}
