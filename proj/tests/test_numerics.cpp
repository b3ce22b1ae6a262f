#include <cmath>
#include <cstdio>
#include <filesystem>

#include "autodiff.hpp"
#include "checkpoint.hpp"
#include "doctest.h"
#include "optim.hpp"

using namespace hpn;
using namespace hpn::nn;

namespace {
Tensor filled(std::vector<int> shape, double v) {
    Tensor t(std::move(shape));
    t.fill(v);
    return t;
}
}  // namespace

TEST_CASE("smooth_l1 closed-form values") {
    Graph g;
    Var p = g.leaf(filled({4}, 0.5));
    CHECK(smooth_l1(p, filled({4}, 0.0)).val()[0] == doctest::Approx(0.125).epsilon(1e-12));

    Var p2 = g.leaf(filled({3}, 2.0));
    CHECK(smooth_l1(p2, filled({3}, 0.0)).val()[0] == doctest::Approx(1.5).epsilon(1e-12));

    Var p3 = g.leaf(filled({5}, 1.25));
    CHECK(smooth_l1(p3, filled({5}, 1.25)).val()[0] == 0.0);
}

TEST_CASE("smooth_l1 shape mismatch") {
    Graph g;
    Var p = g.leaf(filled({4}, 0.5));
    CHECK_THROWS_AS((void)smooth_l1(p, filled({5}, 0.0)), ShapeError);
}

TEST_CASE("binary cross entropy values") {
    Graph g;
    Var half = g.leaf(filled({2}, 0.5));
    CHECK(binary_cross_entropy(half, filled({2}, 1.0)).val()[0] ==
          doctest::Approx(0.6931471805599453).epsilon(1e-9));

    Var close = g.leaf(filled({3}, 1.0));  // clamped to 1 - 1e-7
    CHECK(binary_cross_entropy(close, filled({3}, 1.0)).val()[0] <= 1e-6);

    Var p9 = g.leaf(filled({1}, 0.9));
    CHECK(binary_cross_entropy(p9, filled({1}, 0.0)).val()[0] ==
          doctest::Approx(2.302585092994046).epsilon(1e-9));
}

TEST_CASE("cross entropy values") {
    Graph g;
    Var uniform = g.leaf(filled({2, 4}, 0.3));
    CHECK(cross_entropy(uniform, {1, 3}).val()[0] ==
          doctest::Approx(1.3862943611198906).epsilon(1e-9));

    // loss -> 0 as the true-class margin grows
    Tensor big({1, 3});
    big[0] = 50.0;
    Var v = g.leaf(big);
    CHECK(cross_entropy(v, {0}).val()[0] < 1e-9);

    // frozen two-row hand computation (extended-precision oracle)
    Tensor lg({2, 3}, {1.0, 2.0, 3.0, 0.5, 0.0, -0.5});
    Var l = g.leaf(lg);
    CHECK(cross_entropy(l, {2, 0}).val()[0] ==
          doctest::Approx(0.54393781754305744).epsilon(1e-12));

    CHECK_THROWS_AS((void)cross_entropy(g.leaf(filled({1, 4}, 0.0)), {7}), ValidationError);
}

TEST_CASE("adamw hand-checked steps") {
    SUBCASE("first step with unit grad") {
        Param p("p", {1});
        p.value[0] = 1.0;
        AdamW opt({&p}, {.lr = 0.1, .weight_decay = 0.0});
        p.grad[0] = 1.0;
        opt.step();
        CHECK(p.value[0] == doctest::Approx(0.9).epsilon(1e-7));
    }
    SUBCASE("zero grad, zero decay is identity") {
        Param p("p", {3});
        p.value.fill(1.5);
        AdamW opt({&p}, {.lr = 0.1});
        for (int i = 0; i < 5; ++i) opt.step();
        for (int i = 0; i < 3; ++i) CHECK(p.value[i] == 1.5);
    }
    SUBCASE("decoupled decay without grad") {
        Param p("p", {1});
        p.value[0] = 1.0;
        AdamW opt({&p}, {.lr = 0.1, .weight_decay = 0.1});
        opt.step();
        CHECK(p.value[0] == doctest::Approx(0.99).epsilon(1e-12));
    }
}

TEST_CASE("cosine schedule endpoints and midpoint") {
    CHECK(cosine_lr(0, 100, 3e-4) == doctest::Approx(3e-4).epsilon(1e-15));
    CHECK(cosine_lr(100, 100, 3e-4) == doctest::Approx(0.0).epsilon(1e-15));
    CHECK(cosine_lr(50, 100, 3e-4) == doctest::Approx(1.5e-4).epsilon(1e-12));
}

TEST_CASE("gradient check: quadratic") {
    Tensor x({1}, {3.0});
    double err = check_gradients(
        [](Graph& g, Var v) {
            (void)g;
            return mean_all(mul(v, v));
        },
        x);
    CHECK(err < 1e-6);
}

TEST_CASE("gradient check: losses and core ops") {
    Rng rng(11);
    Tensor x({2, 3});
    for (auto& v : x.values()) v = rng.uniform(-0.8, 0.8);

    SUBCASE("smooth_l1 around delta 0.5") {
        Tensor pt({4}, {0.5, 0.5, 0.5, 0.5});
        double err = check_gradients(
            [](Graph&, Var v) { return smooth_l1(v, Tensor({4}, {0.0, 0.0, 0.0, 0.0})); },
            pt);
        CHECK(err < 1e-5);
    }
    SUBCASE("sigmoid + bce") {
        double err = check_gradients(
            [](Graph&, Var v) {
                Tensor t({2, 3}, {1, 0, 1, 0, 1, 0});
                return binary_cross_entropy(sigmoid(v), t);
            },
            x);
        CHECK(err < 1e-4);
    }
    SUBCASE("matmul + relu + mse") {
        Tensor w({3, 2});
        Rng r2(5);
        for (auto& v : w.values()) v = r2.uniform(-1, 1);
        double err = check_gradients(
            [&w](Graph& g, Var v) {
                Var wv = g.leaf(w);
                Tensor tgt({2, 2});
                tgt.fill(0.3);
                return mse(relu(matmul(v, wv)), tgt);
            },
            x);
        CHECK(err < 1e-4);
    }
    SUBCASE("layer_norm") {
        Tensor gain({3}, {1.1, 0.9, 1.0});
        Tensor bias({3}, {0.0, 0.1, -0.1});
        double err = check_gradients(
            [&](Graph& g, Var v) {
                Tensor tgt({2, 3});
                tgt.fill(0.2);
                return mse(layer_norm(v, g.leaf(gain), g.leaf(bias)), tgt);
            },
            x);
        CHECK(err < 1e-4);
    }
    SUBCASE("softmax rows + attention shapes") {
        Tensor q({4, 6});
        Rng r3(7);
        for (auto& v : q.values()) v = r3.uniform(-1, 1);
        double err = check_gradients(
            [](Graph&, Var v) {
                Var h = split_heads(v, 2);                     // [2,4,3]
                Var s = bmm(h, h, false, true);                // [2,4,4]
                Var p = softmax_causal(s);
                Var o = merge_heads(bmm(p, h));                // [4,6]
                Tensor tgt({4, 6});
                tgt.fill(0.1);
                return mse(o, tgt);
            },
            q);
        CHECK(err < 1e-4);
    }
    SUBCASE("cross entropy logits") {
        double err = check_gradients(
            [](Graph&, Var v) { return cross_entropy(v, {2, 0}); }, x);
        CHECK(err < 1e-4);
    }
    SUBCASE("triangular causal attention ops") {
        Tensor q({4, 6});
        Rng r4(17);
        for (auto& v : q.values()) v = r4.uniform(-1, 1);
        double err = check_gradients(
            [](Graph&, Var v) {
                Var h = split_heads(v, 2);  // [2,4,3]
                Var s = scale(bmm_causal_scores(h, h), 0.5);
                Var p = softmax_causal(s);
                Var o = merge_heads(bmm_causal_apply(p, h));
                Tensor tgt({4, 6});
                tgt.fill(0.2);
                return mse(o, tgt);
            },
            q);
        CHECK(err < 1e-4);
    }
}

TEST_CASE("straight-through estimator passes gradient unchanged") {
    Param p("y", {2, 2});
    p.value = Tensor({2, 2}, {0.9, 0.8, 0.1, 0.2});
    Graph g;
    Var y = g.param(p);
    Tensor q({2, 2}, {1.0, 1.0, 0.0, 0.0});
    Var st = straight_through(y, q);
    CHECK(st.val()[0] == 1.0);  // forward uses quantized values
    Var loss = mean_all(st);
    g.backward(loss);
    g.apply_param_grads(1.0);
    for (int i = 0; i < 4; ++i) CHECK(p.grad[i] == doctest::Approx(0.25));
}

TEST_CASE("determinism: same graph twice gives identical values and grads") {
    auto run = [](uint64_t seed) {
        Rng rng(seed);
        Param w("w", {4, 4});
        init_xavier(w, rng);
        Param b("b", {4});
        Graph g;
        Tensor x({2, 4});
        Rng rx(3);
        for (auto& v : x.values()) v = rx.uniform(-1, 1);
        Var out = sigmoid(linear(g.leaf(x), w, b, g));
        Tensor tgt({2, 4});
        tgt.fill(0.5);
        Var loss = mse(out, tgt);
        g.backward(loss);
        g.apply_param_grads(1.0);
        return std::make_pair(loss.val()[0], w.grad);
    };
    auto [l1, g1] = run(42);
    auto [l2, g2] = run(42);
    CHECK(l1 == l2);
    for (int64_t i = 0; i < g1.numel(); ++i) CHECK(g1[i] == g2[i]);
}

TEST_CASE("checkpoint round trip and hashing") {
    Rng rng(9);
    Param a("encoder.w", {3, 5});
    init_xavier(a, rng);
    Param b("decoder.bias", {7});
    init_uniform(b, rng, 0.1);

    auto path = std::filesystem::temp_directory_path() / "hpn_ckpt_test.bin";
    save_checkpoint(path.string(), {&a, &b});
    auto store = load_checkpoint(path.string());
    REQUIRE(store.size() == 2);
    CHECK(store.at("encoder.w").shape() == std::vector<int>{3, 5});
    for (int64_t i = 0; i < a.value.numel(); ++i)
        CHECK(store.at("encoder.w")[i] == a.value[i]);

    Param a2("encoder.w", {3, 5});
    Param b2("decoder.bias", {7});
    load_params(store, {&a2, &b2});
    CHECK(params_hash({&a, &b}) == params_hash({&a2, &b2}));

    a2.value[0] += 1e-9;
    CHECK(params_hash({&a, &b}) != params_hash({&a2, &b2}));
    std::filesystem::remove(path);
}

TEST_CASE("property: random composite graphs pass finite-difference check") {
    for (uint64_t seed = 1; seed <= 6; ++seed) {
        Rng rng(seed);
        int n = rng.range_int(2, 4), m = rng.range_int(2, 5);
        Tensor x({n, m});
        for (auto& v : x.values()) v = rng.uniform(-1.2, 1.2);
        Tensor w({m, 3});
        for (auto& v : w.values()) v = rng.uniform(-1, 1);
        Tensor tgt({n, 3});
        for (auto& v : tgt.values()) v = rng.uniform(0.05, 0.95);
        double err = check_gradients(
            [&](Graph& g, Var v) {
                Var h = matmul(v, g.leaf(w));
                return binary_cross_entropy(sigmoid(h), tgt);
            },
            x);
        CHECK(err < 1e-4);
    }
}
