#include <doctest.h>

#include <cmath>

#include "alden/ops.hpp"
#include "alden/rng.hpp"
#include "support/gradcheck.hpp"

using namespace alden;
using namespace alden::nn;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, double scale = 1.0) {
    Tensor t(std::move(shape));
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = scale * rng.normal();
    return t;
}

} // namespace

TEST_CASE("elementwise forward values") {
    Var a(Tensor::from({2, 2}, {1.0, 2.0, 3.0, 4.0}));
    Var b(Tensor::from({2, 2}, {0.5, -1.0, 2.0, 0.0}));
    CHECK(add(a, b).value()[1] == doctest::Approx(1.0));
    CHECK(sub(a, b).value()[0] == doctest::Approx(0.5));
    CHECK(mul(a, b).value()[2] == doctest::Approx(6.0));
    CHECK(scale(a, 3.0).value()[3] == doctest::Approx(12.0));
    CHECK(mean_all(a).scalar() == doctest::Approx(2.5));
    CHECK(sum_all(a).scalar() == doctest::Approx(10.0));
}

TEST_CASE("constant folding keeps no-grad graphs flat") {
    Var a(Tensor::from({2}, {1.0, 2.0}), false);
    Var b(Tensor::from({2}, {3.0, 4.0}), false);
    Var c = add(a, b);
    CHECK_FALSE(c.requires_grad());
    CHECK(c.node()->parents.empty());
}

TEST_CASE("backward accumulates across reuse") {
    // y = x*x + x  =>  dy/dx = 2x + 1
    Var x(Tensor::from({1}, {3.0}), true);
    Var y = add(mul(x, x), x);
    y.backward();
    CHECK(x.grad()[0] == doctest::Approx(7.0));
}

TEST_CASE("matmul against hand-computed 2x2") {
    Var a(Tensor::from({2, 2}, {1, 2, 3, 4}));
    Var b(Tensor::from({2, 2}, {5, 6, 7, 8}));
    Tensor c = matmul(a, b).value();
    CHECK(c.at2(0, 0) == doctest::Approx(19));
    CHECK(c.at2(0, 1) == doctest::Approx(22));
    CHECK(c.at2(1, 0) == doctest::Approx(43));
    CHECK(c.at2(1, 1) == doctest::Approx(50));

    Tensor ct = matmul(a, b, false, true).value();
    CHECK(ct.at2(0, 0) == doctest::Approx(17)); // [1,2].[5,6]
}

TEST_CASE("gradcheck: dense op chain") {
    Rng rng(11);
    Tensor x0 = random_tensor({3, 4}, rng);
    Tensor w = random_tensor({4, 5}, rng);
    auto fn = [&](const Var& x) {
        Var h = matmul(x, Var(w));
        h = gelu(h);
        return mean_all(mul(h, h));
    };
    auto res = gradcheck::check(fn, x0);
    CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("gradcheck: matmul transpose variants") {
    Rng rng(12);
    Tensor a0 = random_tensor({3, 4}, rng);
    Tensor b0 = random_tensor({3, 5}, rng);
    // C = A^T B with A as the leaf.
    auto fn_a = [&](const Var& x) { return mean_all(matmul(x, Var(b0), true, false)); };
    CHECK(gradcheck::check(fn_a, a0).max_rel_err < 1e-6);
    // C = B^T A with B as the leaf (B used transposed on the left).
    auto fn_b = [&](const Var& x) { return mean_all(matmul(x, Var(a0), true, false)); };
    CHECK(gradcheck::check(fn_b, b0).max_rel_err < 1e-6);
    // C = A B^T with the right operand as the leaf.
    Tensor c0 = random_tensor({5, 4}, rng);
    auto fn_c = [&](const Var& x) { return mean_all(matmul(Var(a0), x, false, true)); };
    CHECK(gradcheck::check(fn_c, c0).max_rel_err < 1e-6);
}

TEST_CASE("gradcheck: bmm") {
    Rng rng(13);
    Tensor a0 = random_tensor({2, 3, 4}, rng);
    Tensor b0 = random_tensor({2, 4, 3}, rng);
    auto fn = [&](const Var& x) { return mean_all(bmm(x, Var(b0))); };
    CHECK(gradcheck::check(fn, a0).max_rel_err < 1e-6);
    auto fn_t = [&](const Var& x) { return mean_all(bmm(Var(a0), x, false, false)); };
    CHECK(gradcheck::check(fn_t, b0).max_rel_err < 1e-6);
    auto fn_tt = [&](const Var& x) { return mean_all(bmm(x, Var(a0), true, true)); };
    CHECK(gradcheck::check(fn_tt, b0).max_rel_err < 1e-6);
}

TEST_CASE("gradcheck: conv2d") {
    Rng rng(14);
    Tensor x0 = random_tensor({2, 3, 6, 6}, rng);
    Tensor w0 = random_tensor({4, 3, 3, 3}, rng, 0.5);
    Tensor b0 = random_tensor({4}, rng, 0.1);
    SUBCASE("w.r.t. input, stride 1") {
        auto fn = [&](const Var& x) {
            return mean_all(abs(conv2d(x, Var(w0), Var(b0), 1, 1)));
        };
        CHECK(gradcheck::check(fn, x0).max_rel_err < 1e-5);
    }
    SUBCASE("w.r.t. weights, stride 2") {
        auto fn = [&](const Var& w) {
            return mean_all(abs(conv2d(Var(x0), w, Var(b0), 2, 1)));
        };
        CHECK(gradcheck::check(fn, w0).max_rel_err < 1e-5);
    }
    SUBCASE("w.r.t. bias") {
        auto fn = [&](const Var& b) {
            return mean_all(mul(conv2d(Var(x0), Var(w0), b, 1, 0),
                                conv2d(Var(x0), Var(w0), b, 1, 0)));
        };
        CHECK(gradcheck::check(fn, b0).max_rel_err < 1e-5);
    }
}

TEST_CASE("conv2d output size follows stride arithmetic") {
    Rng rng(15);
    Tensor x0 = random_tensor({1, 1, 64, 64}, rng);
    Tensor w0 = random_tensor({2, 1, 4, 4}, rng);
    Tensor b0({2});
    Tensor y = conv2d(Var(x0), Var(w0), Var(b0), 2, 1).value();
    CHECK(y.size(2) == 32);
    CHECK(y.size(3) == 32);
    Tensor y2 = conv2d(Var(x0), Var(w0), Var(b0), 1, 1).value();
    CHECK(y2.size(2) == 63);
}

TEST_CASE("gradcheck: normalizations") {
    Rng rng(16);
    SUBCASE("layer_norm") {
        Tensor x0 = random_tensor({3, 8}, rng);
        Tensor g0 = random_tensor({8}, rng, 0.5);
        Tensor b0 = random_tensor({8}, rng, 0.5);
        auto fn_x = [&](const Var& x) {
            return mean_all(abs(layer_norm(x, Var(g0), Var(b0))));
        };
        CHECK(gradcheck::check(fn_x, x0).max_rel_err < 1e-5);
        auto fn_g = [&](const Var& g) {
            return mean_all(abs(layer_norm(Var(x0), g, Var(b0))));
        };
        CHECK(gradcheck::check(fn_g, g0).max_rel_err < 1e-5);
    }
    SUBCASE("group_norm") {
        Tensor x0 = random_tensor({2, 8, 3, 3}, rng);
        Tensor g0 = random_tensor({8}, rng, 0.5);
        Tensor b0 = random_tensor({8}, rng, 0.5);
        auto fn_x = [&](const Var& x) {
            return mean_all(abs(group_norm(x, Var(g0), Var(b0), 4)));
        };
        CHECK(gradcheck::check(fn_x, x0).max_rel_err < 1e-5);
        auto fn_g = [&](const Var& g) {
            return mean_all(abs(group_norm(Var(x0), g, Var(b0), 4)));
        };
        CHECK(gradcheck::check(fn_g, g0).max_rel_err < 1e-5);
    }
}

TEST_CASE("group_norm rejects indivisible channel counts") {
    Tensor x0({1, 6, 2, 2});
    Tensor g0({6}, 1.0), b0({6});
    CHECK_THROWS_AS(group_norm(Var(x0), Var(g0), Var(b0), 4), std::invalid_argument);
}

TEST_CASE("gradcheck: activations and softmax") {
    Rng rng(17);
    Tensor x0 = random_tensor({4, 6}, rng);
    auto lrelu = [&](const Var& x) { return mean_all(mul(leaky_relu(x, 0.2), leaky_relu(x, 0.2))); };
    CHECK(gradcheck::check(lrelu, x0).max_rel_err < 1e-5);
    auto sp = [&](const Var& x) { return mean_all(softplus(x)); };
    CHECK(gradcheck::check(sp, x0).max_rel_err < 1e-6);
    auto sm = [&](const Var& x) { return mean_all(mul(softmax_lastdim(x), Var(random_tensor({4, 6}, rng)))); };
    Rng rng2(18);
    Tensor weights = random_tensor({4, 6}, rng2);
    auto sm2 = [&](const Var& x) { return mean_all(mul(softmax_lastdim(x), Var(weights))); };
    CHECK(gradcheck::check(sm2, x0).max_rel_err < 1e-5);
    auto lse = [&](const Var& x) { return mean_all(logsumexp_rows(x)); };
    CHECK(gradcheck::check(lse, x0).max_rel_err < 1e-6);
}

TEST_CASE("softmax rows are stochastic") {
    Rng rng(19);
    Tensor x0 = random_tensor({5, 7}, rng, 3.0);
    Tensor y = softmax_lastdim(Var(x0)).value();
    for (int r = 0; r < 5; ++r) {
        double s = 0.0;
        for (int c = 0; c < 7; ++c) s += y.at2(r, c);
        CHECK(std::fabs(s - 1.0) < 1e-12);
    }
}

TEST_CASE("gradcheck: shape ops") {
    Rng rng(20);
    Tensor x0 = random_tensor({2, 3, 2, 2}, rng);
    Tensor mixer = random_tensor({2, 4, 3}, rng);
    auto fn = [&](const Var& x) {
        Var t = tokens_from_map(x);            // [2,4,3]
        Var back = map_from_tokens(t, 2, 2);   // identity round trip
        Var t2 = tokens_from_map(back);
        return mean_all(mul(t2, Var(mixer)));
    };
    CHECK(gradcheck::check(fn, x0).max_rel_err < 1e-6);

    Tensor tok = random_tensor({2, 3, 4}, rng);
    auto fn_heads = [&](const Var& x) {
        return mean_all(abs(merge_heads(split_heads(x, 2), 2)));
    };
    CHECK(gradcheck::check(fn_heads, tok).max_rel_err < 1e-6);

    auto fn_concat = [&](const Var& x) {
        Var c = concat_channels(x, Var(random_tensor({2, 2, 2, 2}, rng)));
        return mean_all(abs(slice_channels(c, 0, 3)));
    };
    Rng rng3(21);
    Tensor other = random_tensor({2, 2, 2, 2}, rng3);
    auto fn_concat2 = [&](const Var& x) {
        Var c = concat_channels(x, Var(other));
        return mean_all(abs(slice_channels(c, 1, 4)));
    };
    CHECK(gradcheck::check(fn_concat2, x0).max_rel_err < 1e-6);
}

TEST_CASE("split/merge heads round trip exactly") {
    Rng rng(22);
    Tensor x0 = random_tensor({2, 5, 6}, rng);
    Tensor y = merge_heads(split_heads(Var(x0), 3), 3).value();
    for (std::int64_t i = 0; i < x0.numel(); ++i) CHECK(y[i] == x0[i]);
}

TEST_CASE("gradcheck: resize and upsample") {
    Rng rng(23);
    Tensor x0 = random_tensor({1, 2, 4, 4}, rng);
    auto up = [&](const Var& x) { return mean_all(abs(upsample_nearest2x(x))); };
    CHECK(gradcheck::check(up, x0).max_rel_err < 1e-6);
    auto rz_up = [&](const Var& x) { return mean_all(abs(resize_bilinear(x, 7, 5))); };
    CHECK(gradcheck::check(rz_up, x0).max_rel_err < 1e-5);
    auto rz_down = [&](const Var& x) { return mean_all(abs(resize_bilinear(x, 3, 2))); };
    CHECK(gradcheck::check(rz_down, x0).max_rel_err < 1e-5);
}

TEST_CASE("resize_bilinear at identical size is exact identity") {
    Rng rng(24);
    Tensor x0 = random_tensor({1, 1, 8, 8}, rng);
    Tensor y = resize_bilinear(Var(x0), 8, 8).value();
    for (std::int64_t i = 0; i < x0.numel(); ++i) CHECK(y[i] == x0[i]);
}

TEST_CASE("gradcheck: rowwise ops") {
    Rng rng(25);
    Tensor a0 = random_tensor({4, 5}, rng);
    Tensor b0 = random_tensor({4, 5}, rng);
    auto fdot = [&](const Var& x) { return mean_all(dot_rows(x, Var(b0))); };
    CHECK(gradcheck::check(fdot, a0).max_rel_err < 1e-6);
    auto fnorm = [&](const Var& x) { return mean_all(dot_rows(l2_normalize_rows(x), Var(b0))); };
    CHECK(gradcheck::check(fnorm, a0).max_rel_err < 1e-5);
    auto frep = [&](const Var& x) { return mean_all(abs(repeat_rows(x, 3))); };
    CHECK(gradcheck::check(frep, a0).max_rel_err < 1e-6);
    auto fcat = [&](const Var& x) {
        return mean_all(abs(concat_cols({x, Var(b0)})));
    };
    CHECK(gradcheck::check(fcat, a0).max_rel_err < 1e-6);
}

TEST_CASE("gradcheck: gather_spatial") {
    Rng rng(26);
    Tensor x0 = random_tensor({2, 3, 4, 4}, rng);
    std::vector<std::array<int, 3>> coords = {{0, 1, 2}, {1, 3, 0}, {0, 0, 0}, {1, 2, 3}};
    auto fn = [&](const Var& x) { return mean_all(abs(gather_spatial(x, coords))); };
    CHECK(gradcheck::check(fn, x0).max_rel_err < 1e-6);
}

TEST_CASE("gather_spatial rejects out-of-grid coordinates") {
    Tensor x0({1, 2, 4, 4});
    CHECK_THROWS_AS(gather_spatial(Var(x0), {{0, 4, 0}}), std::invalid_argument);
    CHECK_THROWS_AS(gather_spatial(Var(x0), {{0, 0, -1}}), std::invalid_argument);
}

TEST_CASE("gradcheck: attention composite") {
    Rng rng(27);
    Tensor q0 = random_tensor({3, 4}, rng);
    Tensor k0 = random_tensor({5, 4}, rng);
    Tensor v0 = random_tensor({5, 4}, rng);
    auto fq = [&](const Var& q) { return mean_all(abs(scaled_dot_attention(q, Var(k0), Var(v0)))); };
    CHECK(gradcheck::check(fq, q0).max_rel_err < 1e-5);
    auto fk = [&](const Var& k) { return mean_all(abs(scaled_dot_attention(Var(q0), k, Var(v0)))); };
    CHECK(gradcheck::check(fk, k0).max_rel_err < 1e-5);
    auto fv = [&](const Var& v) { return mean_all(abs(scaled_dot_attention(Var(q0), Var(k0), v))); };
    CHECK(gradcheck::check(fv, v0).max_rel_err < 1e-5);
}

TEST_CASE("gradcheck: clamp01 interior") {
    // Keep sample points away from the clamp boundaries where the
    // derivative is discontinuous.
    Rng rng(28);
    Tensor x0({3, 3});
    for (std::int64_t i = 0; i < x0.numel(); ++i) x0[i] = 0.1 + 0.8 * rng.uniform();
    auto fn = [&](const Var& x) { return mean_all(mul(clamp01(x), clamp01(x))); };
    CHECK(gradcheck::check(fn, x0).max_rel_err < 1e-6);
    // Outside the range the gradient must be exactly zero.
    Var y(Tensor::from({2}, {-0.5, 1.5}), true);
    mean_all(clamp01(y)).backward();
    CHECK(y.grad()[0] == 0.0);
    CHECK(y.grad()[1] == 0.0);
}
