#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <functional>

#include "defectgen/rng.hpp"
#include "defectgen/tape.hpp"

using namespace defectgen;

namespace {

// Checks d(loss)/d(input) for a scalar-valued graph builder against central
// finite differences on a double tape.
void check_grad(std::vector<int64_t> shape,
                std::function<Var(DTape&, Var)> build, uint64_t seed = 1,
                double h = 1e-6, double tol = 1e-6) {
    auto rng = make_rng(seed);
    DTensor x({shape});
    fill_gaussian(x, rng);

    DTensor dx(x.shape);
    {
        DTape tape;
        Var xin = tape.leaf(x, &dx);
        Var loss = build(tape, xin);
        tape.backward(loss);
    }
    auto eval = [&](const DTensor& xx) {
        DTape tape;
        Var xin = tape.constant(xx);
        // evaluate only: constants flow values forward
        Var loss = build(tape, xin);
        return tape.val(loss)[0];
    };
    for (int64_t i = 0; i < x.size(); ++i) {
        DTensor xp = x, xm = x;
        xp[i] += h;
        xm[i] -= h;
        const double fd = (eval(xp) - eval(xm)) / (2 * h);
        CHECK(dx[i] == doctest::Approx(fd).epsilon(tol).scale(1.0));
    }
}

DTensor randn(std::vector<int64_t> shape, uint64_t seed) {
    auto rng = make_rng(seed);
    DTensor t(std::move(shape));
    fill_gaussian(t, rng);
    return t;
}

}  // namespace

TEST_CASE("elementwise op gradients") {
    check_grad({3, 4}, [](DTape& t, Var x) {
        Var a = t.constant(randn({3, 4}, 9));
        return t.mean_all(t.mul(t.add(x, a), t.sub(x, a)));
    });
    check_grad({2, 5}, [](DTape& t, Var x) { return t.mean_all(t.silu(x)); });
    check_grad({2, 5}, [](DTape& t, Var x) { return t.mean_all(t.scale(x, 2.5)); });
}

TEST_CASE("linear gradient w.r.t. input, weight, bias") {
    const DTensor w0 = randn({4, 3}, 11), b0 = randn({3}, 12), x0 = randn({5, 4}, 13);
    // input
    check_grad({5, 4}, [&](DTape& t, Var x) {
        Var w = t.constant(w0);
        Var b = t.constant(b0);
        return t.mean_all(t.mul(t.linear(x, w, b), t.linear(x, w, b)));
    });
    // weight
    check_grad({4, 3}, [&](DTape& t, Var w) {
        Var x = t.constant(x0);
        Var b = t.constant(b0);
        Var y = t.linear(x, w, b);
        return t.mean_all(t.mul(y, y));
    });
    // bias
    check_grad({3}, [&](DTape& t, Var b) {
        Var x = t.constant(x0);
        Var w = t.constant(w0);
        Var y = t.linear(x, w, b);
        return t.mean_all(t.mul(y, y));
    });
}

TEST_CASE("conv2d gradient through the tape") {
    const DTensor w0 = randn({3, 2, 3, 3}, 21), b0 = randn({3}, 22), x0 = randn({2, 2, 5, 5}, 23);
    check_grad({2, 2, 5, 5}, [&](DTape& t, Var x) {
        Var y = t.conv2d(x, t.constant(w0), t.constant(b0), 1, 1);
        return t.mean_all(t.mul(y, y));
    });
    check_grad({3, 2, 3, 3}, [&](DTape& t, Var w) {
        Var y = t.conv2d(t.constant(x0), w, t.constant(b0), 2, 1);
        return t.mean_all(t.mul(y, y));
    });
}

TEST_CASE("groupnorm gradient") {
    const DTensor g0 = randn({4}, 31), be0 = randn({4}, 32), x0 = randn({2, 4, 3, 3}, 33);
    check_grad({2, 4, 3, 3}, [&](DTape& t, Var x) {
        Var y = t.groupnorm(x, t.constant(g0), t.constant(be0), 2);
        return t.mean_all(t.mul(y, y));
    }, 3, 1e-6, 1e-4);
    check_grad({4}, [&](DTape& t, Var g) {
        Var y = t.groupnorm(t.constant(x0), g, t.constant(be0), 2);
        return t.mean_all(t.mul(y, y));
    });
    check_grad({4}, [&](DTape& t, Var b) {
        Var y = t.groupnorm(t.constant(x0), t.constant(g0), b, 2);
        return t.mean_all(t.mul(y, y));
    });
}

TEST_CASE("softmax and bmm gradients") {
    check_grad({2, 3, 4}, [](DTape& t, Var x) {
        Var p = t.softmax_last(x);
        Var w = t.constant(randn({2, 3, 4}, 41));
        return t.mean_all(t.mul(p, w));
    });
    const DTensor b0 = randn({2, 4, 3}, 42);
    check_grad({2, 3, 4}, [&](DTape& t, Var a) {
        Var y = t.bmm_nn(a, t.constant(b0));
        return t.mean_all(t.mul(y, y));
    });
    const DTensor bt0 = randn({2, 5, 4}, 43);
    check_grad({2, 3, 4}, [&](DTape& t, Var a) {
        Var y = t.bmm_nt(a, t.constant(bt0));
        return t.mean_all(t.mul(y, y));
    });
    // second operand paths
    check_grad({2, 4, 3}, [&](DTape& t, Var b) {
        Var a = t.constant(randn({2, 3, 4}, 44));
        Var y = t.bmm_nn(a, b);
        return t.mean_all(t.mul(y, y));
    });
    check_grad({2, 5, 4}, [&](DTape& t, Var b) {
        Var a = t.constant(randn({2, 3, 4}, 45));
        Var y = t.bmm_nt(a, b);
        return t.mean_all(t.mul(y, y));
    });
}

TEST_CASE("layout op gradients") {
    check_grad({2, 3, 4}, [](DTape& t, Var x) {
        Var y = t.transpose_12(x);
        Var w = t.constant(randn({2, 4, 3}, 51));
        return t.mean_all(t.mul(y, w));
    });
    check_grad({2, 3, 2, 2}, [](DTape& t, Var x) {
        Var y = t.transpose_12(x);
        Var w = t.constant(randn({2, 2, 3, 2}, 52));
        return t.mean_all(t.mul(y, w));
    });
    check_grad({2, 2, 3, 3}, [](DTape& t, Var x) {
        Var other = t.constant(randn({2, 1, 3, 3}, 53));
        Var y = t.concat_channels(x, other);
        return t.mean_all(t.mul(y, y));
    });
    check_grad({12, 4}, [](DTape& t, Var x) {
        Var y = t.reshape(x, {2, 3, 8});
        Var w = t.constant(randn({2, 3, 8}, 54));
        return t.mean_all(t.mul(y, w));
    });
    check_grad({2, 3, 5}, [](DTape& t, Var x) {
        Var y = t.select_last(x, 2);
        return t.mean_all(t.mul(y, y));
    });
    check_grad({4, 3, 5}, [](DTape& t, Var x) {
        Var y = t.mean_heads(x, 2);
        return t.mean_all(t.mul(y, y));
    });
}

TEST_CASE("spatial op gradients") {
    check_grad({1, 2, 3, 3}, [](DTape& t, Var x) {
        Var y = t.upsample_nearest2(x);
        Var w = t.constant(randn({1, 2, 6, 6}, 61));
        return t.mean_all(t.mul(y, w));
    });
    check_grad({1, 2, 4, 4}, [](DTape& t, Var x) {
        Var y = t.avgpool(x, 2);
        Var w = t.constant(randn({1, 2, 2, 2}, 62));
        return t.mean_all(t.mul(y, w));
    });
    check_grad({1, 1, 4, 4}, [](DTape& t, Var x) {
        Var y = t.resize_bilinear(x, 7, 5);
        Var w = t.constant(randn({1, 1, 7, 5}, 63));
        return t.mean_all(t.mul(y, w));
    });
}

TEST_CASE("embedding and broadcast gradients") {
    check_grad({5, 3}, [](DTape& t, Var table) {
        Var y = t.gather_rows(table, {0, 2, 2, 4});
        return t.mean_all(t.mul(y, y));
    });
    check_grad({6, 3}, [](DTape& t, Var x) {
        Var p = t.constant(randn({3, 3}, 71));
        Var y = t.add_cycled_rows(x, p);
        return t.mean_all(t.mul(y, y));
    });
    check_grad({3, 3}, [](DTape& t, Var p) {
        Var x = t.constant(randn({6, 3}, 72));
        Var y = t.add_cycled_rows(x, p);
        return t.mean_all(t.mul(y, y));
    });
    check_grad({2, 3}, [](DTape& t, Var b) {
        Var x = t.constant(randn({2, 3, 2, 2}, 73));
        Var y = t.add_channel_bias(x, b);
        return t.mean_all(t.mul(y, y));
    });
    check_grad({2, 3, 2, 2}, [](DTape& t, Var x) {
        Var m = t.constant(randn({2, 1, 2, 2}, 74));
        Var y = t.mul_bcast1(x, m);
        return t.mean_all(t.mul(y, y));
    });
    check_grad({2, 1, 2, 2}, [](DTape& t, Var m) {
        Var x = t.constant(randn({2, 3, 2, 2}, 75));
        Var y = t.mul_bcast1(x, m);
        return t.mean_all(t.mul(y, y));
    });
}

TEST_CASE("fused loss gradients") {
    auto rng = make_rng(81);
    DTensor target({3, 4});
    for (int64_t i = 0; i < target.size(); ++i)
        target[i] = (i % 3 == 0) ? 1.0 : 0.0;
    check_grad({3, 4}, [&](DTape& t, Var z) {
        return t.focal_loss_mean(z, t.constant(target), 2.0, 0.25);
    });
    check_grad({3, 4}, [&](DTape& t, Var z) {
        return t.focal_loss_mean(z, t.constant(target), 0.0, -1.0);
    });
    check_grad({4, 3}, [&](DTape& t, Var z) {
        return t.softmax_xent_mean(z, {0, 2, 1, 1});
    });
}

TEST_CASE("focal loss with gamma=0 and no balancing equals cross-entropy") {
    auto rng = make_rng(90);
    DTensor z({5, 5}), y({5, 5});
    fill_gaussian(z, rng);
    for (int64_t i = 0; i < y.size(); ++i) y[i] = (i % 2 == 0) ? 1.0 : 0.0;
    DTape t;
    Var loss = t.focal_loss_mean(t.constant(z), t.constant(y), 0.0, -1.0);
    double ce = 0;
    for (int64_t i = 0; i < z.size(); ++i) {
        const double p = 1.0 / (1.0 + std::exp(-z[i]));
        ce += -(y[i] * std::log(p) + (1 - y[i]) * std::log(1 - p));
    }
    ce /= z.size();
    CHECK(t.val(loss)[0] == doctest::Approx(ce).epsilon(1e-10));
}

TEST_CASE("perfectly confident correct prediction has near-zero focal loss") {
    DTensor z({1, 4}), y({1, 4});
    for (int64_t i = 0; i < 4; ++i) {
        y[i] = (i < 2) ? 1.0 : 0.0;
        z[i] = y[i] > 0.5 ? 40.0 : -40.0;
    }
    DTape t;
    Var loss = t.focal_loss_mean(t.constant(z), t.constant(y), 2.0, 0.25);
    CHECK(std::abs(t.val(loss)[0]) <= 1e-6);
}

TEST_CASE("constants receive no gradient and frozen leaves stay untouched") {
    DTensor x = randn({2, 2}, 91);
    DTensor dx(x.shape);
    DTape t;
    Var a = t.leaf(x, &dx);
    Var c = t.constant(randn({2, 2}, 92));
    Var loss = t.mean_all(t.mul(a, c));
    t.backward(loss);
    CHECK(t.grad_of(c).size() == 0);
    double s = 0;
    for (int64_t i = 0; i < dx.size(); ++i) s += std::abs(dx[i]);
    CHECK(s > 0.0);
}

TEST_CASE("float tape runs the same graph") {
    Tensor x({2, 3});
    for (int64_t i = 0; i < x.size(); ++i) x[i] = 0.25f * float(i);
    Tensor dx(x.shape);
    Tape t;
    Var a = t.leaf(x, &dx);
    Var loss = t.mean_all(t.mul(a, a));
    t.backward(loss);
    for (int64_t i = 0; i < x.size(); ++i)
        CHECK(dx[i] == doctest::Approx(2.0f * x[i] / x.size()));
}
