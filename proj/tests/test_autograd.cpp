#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <functional>
#include <vector>

#include "calibra/autograd.hpp"
#include "calibra/rng.hpp"
#include "calibra/tensor.hpp"

using namespace calibra;

namespace calibra {
// Test-only peek at tape internals (friend of Tape).
struct TapeAccess {
    static bool grad_allocated(const Tape& t, Var v) {
        return !t.nodes_[static_cast<std::size_t>(v.id)].grad.data.empty();
    }
};
}  // namespace calibra

namespace {

Tensor random_tensor(Rng& rng, std::vector<std::int64_t> shape, bool requires_grad) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (double& v : t.data) v = rng.normal() * 0.5;
    t.requires_grad = requires_grad;
    return t;
}

// Values bounded away from zero so relu-style kinks cannot bite the
// finite-difference probe.
Tensor random_tensor_off_zero(Rng& rng, std::vector<std::int64_t> shape, double margin) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (double& v : t.data) {
        double mag = margin + rng.uniform() * 0.9;
        v = rng.uniform() < 0.5 ? -mag : mag;
    }
    t.requires_grad = true;
    return t;
}

using GraphFn = std::function<Var(Tape&, const std::vector<Var>&)>;

double eval_loss(const GraphFn& build, const std::vector<Tensor>& leaves) {
    Tape tape;
    std::vector<Var> vars;
    vars.reserve(leaves.size());
    for (const Tensor& t : leaves) vars.push_back(tape.leaf(t));
    return tape.value(build(tape, vars)).scalar_value();
}

// Central-difference check of every analytic gradient element. Relative error
// uses a hybrid denominator so values near zero are judged absolutely.
void check_gradients(const GraphFn& build, const std::vector<Tensor>& leaves, double h = 1e-5,
                     double tol = 1e-4) {
    Tape tape;
    std::vector<Var> vars;
    for (const Tensor& t : leaves) vars.push_back(tape.leaf(t));
    Var loss = build(tape, vars);
    tape.backward(loss);

    for (std::size_t li = 0; li < leaves.size(); ++li) {
        if (!leaves[li].requires_grad) continue;
        Tensor analytic = tape.grad(vars[li]);
        double worst = 0.0;
        std::int64_t worst_j = -1;
        double worst_a = 0.0, worst_f = 0.0;
        std::vector<Tensor> probe = leaves;
        for (std::int64_t j = 0; j < analytic.numel(); ++j) {
            const double orig = probe[li][j];
            probe[li][j] = orig + h;
            const double fp = eval_loss(build, probe);
            probe[li][j] = orig - h;
            const double fm = eval_loss(build, probe);
            probe[li][j] = orig;
            const double fd = (fp - fm) / (2.0 * h);
            const double a = analytic[j];
            const double rel = std::fabs(a - fd) / std::max({std::fabs(a), std::fabs(fd), 1.0});
            if (rel > worst) {
                worst = rel;
                worst_j = j;
                worst_a = a;
                worst_f = fd;
            }
        }
        INFO("leaf ", li, " worst element ", worst_j, ": analytic ", worst_a, " vs fd ", worst_f);
        CHECK(worst < tol);
    }
}

// Direct quadruple-loop cross-correlation, kept deliberately naive so it is an
// independent oracle for the production kernel.
Tensor conv2d_reference(const Tensor& in, const Tensor& k, int stride, int pad) {
    const std::int64_t N = in.shape[0], Ci = in.shape[1], H = in.shape[2], W = in.shape[3];
    const std::int64_t Co = k.shape[0], K = k.shape[2];
    const std::int64_t OH = (H + 2 * pad - K) / stride + 1;
    const std::int64_t OW = (W + 2 * pad - K) / stride + 1;
    Tensor out = Tensor::zeros({N, Co, OH, OW});
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t co = 0; co < Co; ++co)
            for (std::int64_t oh = 0; oh < OH; ++oh)
                for (std::int64_t ow = 0; ow < OW; ++ow) {
                    double acc = 0.0;
                    for (std::int64_t ci = 0; ci < Ci; ++ci)
                        for (std::int64_t kh = 0; kh < K; ++kh)
                            for (std::int64_t kw = 0; kw < K; ++kw) {
                                const std::int64_t ih = oh * stride + kh - pad;
                                const std::int64_t iw = ow * stride + kw - pad;
                                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                                acc += in.at4(n, ci, ih, iw) * k.at4(co, ci, kh, kw);
                            }
                    out.at4(n, co, oh, ow) = acc;
                }
    return out;
}

}  // namespace

// ===== forward oracles =====

TEST_CASE("conv2d forward matches the naive reference") {
    Rng rng(101);
    struct Case {
        std::vector<std::int64_t> in_shape, k_shape;
        int stride, pad;
    };
    const Case cases[] = {
        {{1, 1, 4, 4}, {1, 1, 3, 3}, 1, 0},  {{2, 3, 6, 6}, {4, 3, 3, 3}, 1, 1},
        {{1, 2, 5, 7}, {3, 2, 3, 3}, 2, 1},  {{2, 1, 8, 8}, {2, 1, 5, 5}, 1, 2},
        {{1, 4, 6, 6}, {4, 4, 1, 1}, 1, 0},  {{1, 2, 9, 5}, {2, 2, 3, 3}, 3, 0},
    };
    for (const Case& c : cases) {
        Tensor in = random_tensor(rng, c.in_shape, false);
        Tensor k = random_tensor(rng, c.k_shape, false);
        Tape tape;
        Var out = tape.conv2d(tape.constant(in), tape.constant(k), c.stride, c.pad);
        Tensor ref = conv2d_reference(in, k, c.stride, c.pad);
        CHECK(tape.value(out).shape == ref.shape);
        CHECK(max_abs_diff(tape.value(out), ref) < 1e-12);
    }
}

TEST_CASE("max_pool2 picks window maxima") {
    Tensor in = Tensor::from_data({1, 1, 4, 4}, {1, 5, 2, 0,   //
                                                 3, 4, 1, 7,   //
                                                 0, 0, 9, 8,   //
                                                 2, 1, 6, 9});
    Tape tape;
    Var out = tape.max_pool2(tape.constant(in));
    const Tensor& o = tape.value(out);
    CHECK(o.shape == std::vector<std::int64_t>{1, 1, 2, 2});
    CHECK(o[0] == 5.0);
    CHECK(o[1] == 7.0);
    CHECK(o[2] == 2.0);
    CHECK(o[3] == 9.0);
}

TEST_CASE("upsample2_nearest repeats each pixel four times") {
    Tensor in = Tensor::from_data({1, 1, 2, 2}, {1, 2, 3, 4});
    Tape tape;
    const Tensor& o = tape.value(tape.upsample2_nearest(tape.constant(in)));
    CHECK(o.shape == std::vector<std::int64_t>{1, 1, 4, 4});
    Tensor want = Tensor::from_data({1, 1, 4, 4}, {1, 1, 2, 2,   //
                                                   1, 1, 2, 2,   //
                                                   3, 3, 4, 4,   //
                                                   3, 3, 4, 4});
    CHECK(bit_identical(o, want));
}

TEST_CASE("softmax matches the hand-computed two-logit value") {
    Tape tape;
    const Tensor& o =
        tape.value(tape.softmax(tape.constant(Tensor::from_data({1, 2}, {1.0, 2.0}))));
    // 1/(1+e) and e/(1+e)
    CHECK(o[0] == doctest::Approx(0.2689414213699951).epsilon(1e-12));
    CHECK(o[1] == doctest::Approx(0.7310585786300049).epsilon(1e-12));
    CHECK(o[0] + o[1] == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("softmax is shift invariant and row normalized") {
    Rng rng(7);
    Tensor x = random_tensor(rng, {5, 9}, false);
    Tensor shifted = x;
    for (std::int64_t r = 0; r < 5; ++r)
        for (std::int64_t c = 0; c < 9; ++c) shifted.at2(r, c) += 100.0;
    Tape tape;
    const Tensor& a = tape.value(tape.softmax(tape.constant(x)));
    const Tensor& b = tape.value(tape.softmax(tape.constant(shifted)));
    CHECK(max_abs_diff(a, b) < 1e-12);
    for (std::int64_t r = 0; r < 5; ++r) {
        double s = 0.0;
        for (std::int64_t c = 0; c < 9; ++c) s += a.at2(r, c);
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("cross_entropy matches hand oracles") {
    Tape tape;
    // Uniform logits over 4 classes: loss is ln 4 regardless of target.
    Var u = tape.constant(Tensor::zeros({1, 4}));
    const int t0[] = {2};
    CHECK(tape.value(tape.cross_entropy(u, t0)).scalar_value() ==
          doctest::Approx(1.3862943611198906).epsilon(1e-12));

    // Confident correct prediction: ln(1 + e^-20).
    Var c = tape.constant(Tensor::from_data({1, 2}, {10.0, -10.0}));
    const int t1[] = {0};
    CHECK(tape.value(tape.cross_entropy(c, t1)).scalar_value() ==
          doctest::Approx(2.0611536181902037e-9).epsilon(1e-6));

    // Mean over the batch: rows above combined.
    Tensor both = Tensor::zeros({2, 4});
    Var b = tape.constant(both);
    const int t2[] = {0, 3};
    CHECK(tape.value(tape.cross_entropy(b, t2)).scalar_value() ==
          doctest::Approx(1.3862943611198906).epsilon(1e-12));
}

TEST_CASE("cross_entropy is stable at extreme logits") {
    Tape tape;
    Var v = tape.constant(Tensor::from_data({1, 3}, {800.0, -800.0, 0.0}));
    const int t[] = {1};
    double loss = tape.value(tape.cross_entropy(v, t)).scalar_value();
    CHECK(std::isfinite(loss));
    CHECK(loss == doctest::Approx(1600.0).epsilon(1e-9));
}

// ===== gradient checks =====

TEST_CASE("composite smooth graph passes finite-difference checks over many seeds") {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        CAPTURE(seed);
        Rng rng(derive_seed(900, seed));
        std::vector<Tensor> leaves;
        leaves.push_back(random_tensor(rng, {2, 2, 6, 6}, true));   // x
        leaves.push_back(random_tensor(rng, {3, 2, 3, 3}, true));   // k1
        leaves.push_back(random_tensor(rng, {3}, true));            // b1
        leaves.push_back(random_tensor(rng, {4, 3, 3, 3}, true));   // k2
        leaves.push_back(random_tensor(rng, {4}, true));            // b2
        leaves.push_back(random_tensor(rng, {144, 5}, true));       // w
        leaves.push_back(random_tensor(rng, {5}, true));            // b

        Tensor sm_w = random_tensor(rng, {2, 5}, false);
        Tensor pg_w = random_tensor(rng, {2, 12}, false);
        std::vector<PatchPlan> plans;
        for (int n = 0; n < 2; ++n) {
            PatchPlan p;
            p.patch = 2;
            p.row0 = static_cast<int>(rng.uniform_int(0, 4));
            p.col0 = static_cast<int>(rng.uniform_int(0, 4));
            for (std::int64_t q : rng.permutation(4)) p.perm.push_back(static_cast<std::int32_t>(q));
            plans.push_back(p);
        }
        const std::vector<int> targets = {1, 3};

        auto build = [&](Tape& t, const std::vector<Var>& v) {
            Var h1 = t.tanh(t.bias_add(t.conv2d(v[0], v[1], 1, 1), v[2]));   // [2,3,6,6]
            Var u = t.upsample2_nearest(h1);                                 // [2,3,12,12]
            Var h2 = t.tanh(t.bias_add(t.conv2d(u, v[3], 2, 1), v[4]));      // [2,4,6,6]
            Var logits = t.linear(t.reshape(h2, {2, 144}), v[5], v[6]);      // [2,5]
            Var ce = t.cross_entropy(logits, targets);
            Var sm = t.weighted_sum(t.softmax(logits), sm_w);
            Var pg = t.weighted_sum(t.patch_gather(h1, plans), pg_w);
            Var extras = t.scalar_mul(t.add(sm, pg), 0.1);
            return t.add(t.add(ce, extras), t.scalar_mul(t.sum(v[0]), 0.01));
        };
        check_gradients(build, leaves);
    }
}

TEST_CASE("relu gradient at inputs away from the kink") {
    Rng rng(21);
    std::vector<Tensor> leaves = {random_tensor_off_zero(rng, {3, 7}, 0.1)};
    auto build = [](Tape& t, const std::vector<Var>& v) {
        return t.weighted_sum(t.relu(v[0]), Tensor::full({3, 7}, 0.37));
    };
    check_gradients(build, leaves);
}

TEST_CASE("clamp gradient passes inside the band and blocks outside") {
    Rng rng(22);
    Tensor x = Tensor::zeros({16});
    // Half the values well inside [-0.5, 0.5], half well outside.
    for (std::int64_t j = 0; j < 16; ++j) {
        x[j] = (j % 2 == 0) ? rng.uniform(-0.3, 0.3)
                            : (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.7, 1.5);
    }
    x.requires_grad = true;
    auto build = [](Tape& t, const std::vector<Var>& v) {
        return t.sum(t.clamp(v[0], -0.5, 0.5));
    };
    check_gradients(build, {x});

    Tape tape;
    Var v = tape.leaf(x);
    Var loss = tape.sum(tape.clamp(v, -0.5, 0.5));
    tape.backward(loss);
    Tensor g = tape.grad(v);
    for (std::int64_t j = 0; j < 16; ++j) CHECK(g[j] == (j % 2 == 0 ? 1.0 : 0.0));
}

TEST_CASE("max_pool2 gradient with separated window values") {
    Rng rng(23);
    Tensor x = Tensor::zeros({2, 2, 4, 4});
    // Give the four cells of every 2x2 window distinct magnitudes so the
    // argmax cannot flip under the probe step.
    for (std::int64_t n = 0; n < 2; ++n)
        for (std::int64_t c = 0; c < 2; ++c)
            for (std::int64_t oh = 0; oh < 2; ++oh)
                for (std::int64_t ow = 0; ow < 2; ++ow) {
                    auto levels = rng.permutation(4);
                    for (int j = 0; j < 4; ++j) {
                        std::int64_t h = 2 * oh + j / 2, w = 2 * ow + j % 2;
                        x.at4(n, c, h, w) =
                            static_cast<double>(levels[static_cast<std::size_t>(j)]) * 0.5 +
                            rng.uniform(-0.01, 0.01);
                    }
                }
    x.requires_grad = true;
    Tensor w = random_tensor(rng, {2, 2, 2, 2}, false);
    auto build = [&](Tape& t, const std::vector<Var>& v) {
        return t.weighted_sum(t.max_pool2(v[0]), w);
    };
    check_gradients(build, {x});
}

TEST_CASE("sum backward is all ones and mean is one over n") {
    Tape tape;
    Var x = tape.leaf(Tensor::full({3, 4}, 2.0), true);
    tape.backward(tape.sum(x));
    Tensor g = tape.grad(x);
    for (double v : g.data) CHECK(v == 1.0);

    Tape tape2;
    Var y = tape2.leaf(Tensor::full({3, 4}, 2.0), true);
    tape2.backward(tape2.mean(y));
    Tensor gm = tape2.grad(y);
    for (double v : gm.data) CHECK(v == doctest::Approx(1.0 / 12.0).epsilon(1e-15));
}

TEST_CASE("reusing a variable accumulates its gradient") {
    Tape tape;
    Var x = tape.leaf(Tensor::full({4}, 1.0), true);
    Var loss = tape.add(tape.sum(x), tape.sum(x));
    tape.backward(loss);
    for (double v : tape.grad(x).data) CHECK(v == 2.0);
}

// ===== gradient routing =====

TEST_CASE("gradients flow through ops whose parameters are detached") {
    Rng rng(31);
    Tape tape;
    Var x = tape.leaf(random_tensor(rng, {1, 2, 4, 4}, true));
    Var k = tape.leaf(random_tensor(rng, {2, 2, 3, 3}, false));
    Var loss = tape.sum(tape.conv2d(x, k, 1, 1));
    tape.backward(loss);
    double gx = 0.0;
    for (double v : tape.grad(x).data) gx += std::fabs(v);
    CHECK(gx > 0.0);
    // Detached kernel: zero grad and no buffer ever allocated.
    Tensor gk = tape.grad(k);
    for (double v : gk.data) CHECK(v == 0.0);
    CHECK_FALSE(TapeAccess::grad_allocated(tape, k));
}

TEST_CASE("a graph with no grad-requiring leaves skips backward entirely") {
    Rng rng(32);
    Tape tape;
    Var x = tape.leaf(random_tensor(rng, {1, 2, 4, 4}, false));
    Var k = tape.leaf(random_tensor(rng, {2, 2, 3, 3}, false));
    Var h = tape.conv2d(x, k, 1, 1);
    Var loss = tape.sum(h);
    tape.backward(loss);
    CHECK_FALSE(TapeAccess::grad_allocated(tape, x));
    CHECK_FALSE(TapeAccess::grad_allocated(tape, h));
    CHECK_FALSE(TapeAccess::grad_allocated(tape, loss));
}

TEST_CASE("backward rejects non-scalar losses") {
    Tape tape;
    Var x = tape.leaf(Tensor::full({2, 2}, 1.0), true);
    CHECK_THROWS_AS(tape.backward(x), std::invalid_argument);
}

// ===== shape validation =====

TEST_CASE("shape errors name both offending shapes") {
    Tape tape;
    Var x = tape.constant(Tensor::zeros({1, 2, 4, 4}));
    Var k = tape.constant(Tensor::zeros({3, 3, 3, 3}));
    CHECK_THROWS_WITH_AS(tape.conv2d(x, k, 1, 0), doctest::Contains("1x2x4x4"),
                         std::invalid_argument);
    CHECK_THROWS_WITH_AS(tape.conv2d(x, k, 1, 0), doctest::Contains("3x3x3x3"),
                         std::invalid_argument);

    Var a = tape.constant(Tensor::zeros({2, 3}));
    Var b = tape.constant(Tensor::zeros({3, 2}));
    CHECK_THROWS_WITH_AS(tape.add(a, b), doctest::Contains("2x3"), std::invalid_argument);

    Var w = tape.constant(Tensor::zeros({4, 5}));
    Var bias = tape.constant(Tensor::zeros({5}));
    CHECK_THROWS_WITH_AS(tape.linear(a, w, bias), doctest::Contains("2x3"),
                         std::invalid_argument);

    const int bad_target[] = {7};
    Var logits = tape.constant(Tensor::zeros({1, 4}));
    CHECK_THROWS_WITH_AS(tape.cross_entropy(logits, bad_target), doctest::Contains("7"),
                         std::invalid_argument);

    Var odd = tape.constant(Tensor::zeros({1, 1, 3, 4}));
    CHECK_THROWS_AS(tape.max_pool2(odd), std::invalid_argument);

    std::vector<PatchPlan> plans(2);
    CHECK_THROWS_AS(tape.patch_gather(x, plans), std::invalid_argument);
}

TEST_CASE("patch_gather rejects plans that leave the image") {
    Tape tape;
    Var x = tape.constant(Tensor::zeros({1, 1, 4, 4}));
    PatchPlan p;
    p.patch = 3;
    p.row0 = 2;  // 2 + 3 > 4
    p.col0 = 0;
    p.perm = {0, 1, 2, 3, 4, 5, 6, 7, 8};
    CHECK_THROWS_AS(tape.patch_gather(x, {p}), std::invalid_argument);
}

TEST_CASE("forward passes are deterministic") {
    auto run = [](std::uint64_t seed) {
        Rng rng(seed);
        Tape tape;
        Var x = tape.leaf(random_tensor(rng, {2, 2, 6, 6}, true));
        Var k = tape.leaf(random_tensor(rng, {3, 2, 3, 3}, true));
        Var out = tape.tanh(tape.conv2d(x, k, 1, 1));
        Var loss = tape.mean(out);
        tape.backward(loss);
        return std::make_pair(tape.value(out), tape.grad(x));
    };
    auto [v1, g1] = run(77);
    auto [v2, g2] = run(77);
    CHECK(bit_identical(v1, v2));
    CHECK(bit_identical(g1, g2));
}
