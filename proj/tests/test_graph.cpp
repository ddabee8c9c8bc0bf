#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>
#include <unordered_map>
#include <vector>

#include "pilno/graph.hpp"
#include "pilno/rng.hpp"
#include "pilno/tensor.hpp"

using namespace pilno;

namespace {

// Independent Gaussian CDF oracle: Simpson quadrature of the pdf from 0 to x.
// Avoids erf/erfc entirely so it cannot share a bug with the implementation.
double cdf_oracle(double x) {
    const int n = 4000; // panels (even)
    const double h = x / n;
    auto pdf = [](double t) { return std::exp(-0.5 * t * t) / std::sqrt(2.0 * M_PI); };
    double acc = pdf(0.0) + pdf(x);
    for (int i = 1; i < n; ++i) acc += pdf(i * h) * (i % 2 ? 4.0 : 2.0);
    return 0.5 + acc * h / 3.0;
}

Tensor random_tensor(Shape s, Rng& rng, double lo, double hi) {
    Tensor t(std::move(s));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)}); }

// A deterministic composition that exercises every op in the set, as a
// function of five leaf tensors. Returns the scalar loss node plus leaves.
struct Composition {
    NodePtr loss;
    std::vector<NodePtr> leaves;
};

Composition build_composition(const std::vector<Tensor>& vals) {
    NodePtr a = leaf(vals[0], "a");
    NodePtr bias = leaf(vals[1], "bias");
    NodePtr w = leaf(vals[2], "w");
    NodePtr pos = leaf(vals[3], "pos");
    NodePtr m = leaf(vals[4], "m");

    NodePtr h = matmul(a, w);
    h = add(h, bias);                    // trailing-vector broadcast
    h = gelu(h);
    h = layer_norm(h, 0.7);
    h = mul(h, pos);                     // per-position broadcast
    NodePtr trig = mul(sin_(h), cos_(h));
    h = exp_(scale(trig, 0.5));
    h = add(h, clamp_max(a, 0.05));      // clamp kink, inputs kept clear of 0.05
    h = concat_last(h, m);
    h = slice_last(h, 1, 5);
    h = square(h);
    NodePtr loss = mean_all(h);
    return {loss, {a, bias, w, pos, m}};
}

std::vector<Tensor> random_composition_inputs(Rng& rng) {
    Tensor a = random_tensor(Shape{2, 3, 4}, rng, -1.0, 1.0);
    for (std::size_t i = 0; i < a.size(); ++i)
        while (std::abs(a[i] - 0.05) < 0.02) a[i] = rng.uniform(-1.0, 1.0);
    return {a, random_tensor(Shape{4}, rng, -0.5, 0.5), random_tensor(Shape{4, 4}, rng, -0.5, 0.5),
            random_tensor(Shape{2, 3, 1}, rng, 0.5, 1.5), random_tensor(Shape{2, 3, 2}, rng, -1.0, 1.0)};
}

// Central finite difference of a scalar-valued rebuild function.
double central_fd(std::function<double(const std::vector<Tensor>&)> f, std::vector<Tensor> vals,
                  std::size_t which, std::size_t idx, double h) {
    vals[which][idx] += h;
    const double up = f(vals);
    vals[which][idx] -= 2 * h;
    const double dn = f(vals);
    return (up - dn) / (2 * h);
}

} // namespace

TEST_CASE("gelu matches an independent Gaussian-CDF oracle") {
    for (double x : {-3.0, -1.0, -0.3, 0.0, 0.7, 1.0, 2.5}) {
        NodePtr n = gelu(constant(Tensor::scalar(x)));
        REQUIRE_THAT(n->value[0], Catch::Matchers::WithinAbs(x * cdf_oracle(x), 1e-10));
    }
    // Pinned value: 1 * Phi(1).
    NodePtr one = gelu(constant(Tensor::scalar(1.0)));
    REQUIRE_THAT(one->value[0], Catch::Matchers::WithinAbs(0.8413447460685429, 1e-10));
}

TEST_CASE("gelu deep negative tail underflows gracefully") {
    NodePtr n = gelu(constant(Tensor::scalar(-30.0)));
    REQUIRE(std::abs(n->value[0]) < 1e-12);
    REQUIRE(std::isfinite(n->value[0]));
}

TEST_CASE("gelu stays between 0 and x") {
    Rng rng(5);
    for (int i = 0; i < 200; ++i) {
        const double x = rng.uniform(-6.0, 6.0);
        const double y = gelu(constant(Tensor::scalar(x)))->value[0];
        REQUIRE(y >= std::min(0.0, x) - 1e-15);
        REQUIRE(y <= std::max(0.0, x) + 1e-15);
    }
}

TEST_CASE("layer_norm normalizes a two-point row") {
    NodePtr x = constant(Tensor(Shape{1, 2}, std::vector<double>{1.0, 3.0}));
    NodePtr y = layer_norm(x, 1e-12);
    REQUIRE_THAT(y->value[0], Catch::Matchers::WithinAbs(-1.0, 1e-9));
    REQUIRE_THAT(y->value[1], Catch::Matchers::WithinAbs(1.0, 1e-9));
}

TEST_CASE("layer_norm survives a constant row and centers every position") {
    NodePtr flat = layer_norm(constant(Tensor(Shape{1, 4}, 2.5)), 1e-5);
    for (std::size_t i = 0; i < 4; ++i) REQUIRE(std::isfinite(flat->value[i]));

    Rng rng(11);
    NodePtr x = constant(random_tensor(Shape{3, 2, 8}, rng, -2.0, 2.0));
    NodePtr y = layer_norm(x, 1e-5);
    for (std::size_t r = 0; r < 6; ++r) {
        double mean = 0.0;
        for (std::size_t j = 0; j < 8; ++j) mean += y->value[r * 8 + j];
        REQUIRE(std::abs(mean / 8.0) <= 1e-12);
    }
}

TEST_CASE("simple adjoints: square and gelu at zero") {
    NodePtr x = leaf(Tensor::scalar(3.0), "x");
    NodePtr f = square(x);
    auto g = gradients(f, {x});
    REQUIRE_THAT(g[0][0], Catch::Matchers::WithinAbs(6.0, 1e-12));

    NodePtr z = leaf(Tensor::scalar(0.0), "z");
    auto gz = gradients(gelu(z), {z});
    REQUIRE_THAT(gz[0][0], Catch::Matchers::WithinAbs(0.5, 1e-12));
}

TEST_CASE("gradients require a scalar loss") {
    NodePtr x = leaf(Tensor(Shape{2}, std::vector<double>{1, 2}), "x");
    REQUIRE_THROWS_AS(gradients(square(x), {x}), ValidationError);
}

TEST_CASE("every-op composition passes a full finite-difference check") {
    Rng rng(2024);
    auto eval = [](const std::vector<Tensor>& vals) { return scalar_value(build_composition(vals).loss); };
    for (int rep = 0; rep < 25; ++rep) {
        std::vector<Tensor> vals = random_composition_inputs(rng);
        Composition c = build_composition(vals);
        auto grads = gradients(c.loss, c.leaves);
        for (std::size_t which = 0; which < vals.size(); ++which)
            for (std::size_t idx = 0; idx < vals[which].size(); ++idx) {
                const double fd = central_fd(eval, vals, which, idx, 1e-5);
                INFO("rep " << rep << " leaf " << which << " idx " << idx);
                REQUIRE(rel_err(grads[which][idx], fd) <= 1e-6);
            }
    }
}

TEST_CASE("gradient of a linear combination is the linear combination of gradients") {
    Rng rng(9);
    for (int rep = 0; rep < 10; ++rep) {
        Tensor xv = random_tensor(Shape{3, 4}, rng, -1.0, 1.0);
        const double alpha = rng.uniform(-2.0, 2.0), beta = rng.uniform(-2.0, 2.0);

        NodePtr x1 = leaf(xv, "x");
        NodePtr f1 = mean_all(square(x1));
        NodePtr g1 = mean_all(gelu(x1));
        auto gf = gradients(f1, {x1});
        auto gg = gradients(g1, {x1});

        NodePtr x2 = leaf(xv, "x");
        NodePtr combo = add(scale(mean_all(square(x2)), alpha), scale(mean_all(gelu(x2)), beta));
        auto gc = gradients(combo, {x2});

        for (std::size_t i = 0; i < xv.size(); ++i)
            REQUIRE_THAT(gc[0][i], Catch::Matchers::WithinAbs(alpha * gf[0][i] + beta * gg[0][i], 1e-12));
    }
}

TEST_CASE("jvp computes directional derivatives of a pointwise product") {
    // f(x0, x1) = x0 * x1 per point: d f / d x0 == x1.
    Rng rng(33);
    Tensor coords = random_tensor(Shape{2, 5, 2}, rng, -2.0, 2.0);
    NodePtr x = leaf(coords, "coords");
    NodePtr f = mul(slice_last(x, 0, 1), slice_last(x, 1, 2));

    Tensor e0(Shape{2, 5, 2});
    for (std::size_t i = 0; i < e0.size(); i += 2) e0[i] = 1.0;
    NodePtr d0 = jvp(f, {{x.get(), constant(e0, "e0")}});
    for (std::size_t p = 0; p < 10; ++p)
        REQUIRE_THAT(d0->value[p], Catch::Matchers::WithinAbs(coords[2 * p + 1], 1e-13));

    // Constant field: zero tangent everywhere.
    NodePtr c = mul(slice_last(x, 0, 1), constant(Tensor(Shape{2, 5, 1}, 0.0)));
    NodePtr dc = jvp(c, {{x.get(), constant(e0, "e0")}});
    for (std::size_t p = 0; p < 10; ++p) REQUIRE(dc->value[p] == 0.0);
}

TEST_CASE("jvp of the every-op composition matches directional finite differences") {
    Rng rng(77);
    for (int rep = 0; rep < 8; ++rep) {
        std::vector<Tensor> vals = random_composition_inputs(rng);
        Tensor dir = random_tensor(Shape{2, 3, 4}, rng, -1.0, 1.0);

        Composition c = build_composition(vals);
        // Tangent of the pre-loss graph output w.r.t. leaf `a` in direction `dir`.
        NodePtr t = jvp(c.loss, {{c.leaves[0].get(), constant(dir, "dir")}});

        const double h = 1e-6;
        auto shift = [&](double s) {
            std::vector<Tensor> v = vals;
            for (std::size_t i = 0; i < v[0].size(); ++i) v[0][i] += s * dir[i];
            return scalar_value(build_composition(v).loss);
        };
        const double fd = (shift(h) - shift(-h)) / (2 * h);
        REQUIRE(rel_err(t->value[0], fd) <= 1e-5);
    }
}

TEST_CASE("reverse pass differentiates through a tangent graph") {
    // Loss built from a jvp output — the pattern residual losses use. Check its
    // parameter gradient against finite differences of the whole pipeline.
    Rng rng(101);
    for (int rep = 0; rep < 6; ++rep) {
        Tensor xv = random_tensor(Shape{4, 3}, rng, -1.0, 1.0);
        Tensor wv = random_tensor(Shape{3, 3}, rng, -0.8, 0.8);
        Tensor seed(Shape{4, 3});
        for (std::size_t r = 0; r < 4; ++r) seed[r * 3] = 1.0; // direction: first input channel

        auto build = [&](const Tensor& w_in) {
            NodePtr x = leaf(xv, "x");
            NodePtr w = leaf(w_in, "w");
            NodePtr y = gelu(matmul(sin_(x), w));
            NodePtr dy = jvp(y, {{x.get(), constant(seed, "seed")}});
            return std::pair{mean_all(square(dy)), w};
        };

        auto [loss, w] = build(wv);
        auto g = gradients(loss, {w});
        for (std::size_t i = 0; i < wv.size(); ++i) {
            Tensor wp = wv;
            wp[i] += 1e-5;
            Tensor wm = wv;
            wm[i] -= 1e-5;
            const double fd =
                (scalar_value(build(wp).first) - scalar_value(build(wm).first)) / 2e-5;
            REQUIRE(rel_err(g[0][i], fd) <= 1e-6);
        }
    }
}

TEST_CASE("clamped exponent kills the gradient beyond the bound") {
    NodePtr s = leaf(Tensor::scalar(120.0), "exponent");
    NodePtr y = exp_(scale(clamp_max(s, 50.0), -1.0));
    auto g = gradients(y, {s});
    REQUIRE(g[0][0] == 0.0);

    NodePtr s2 = leaf(Tensor::scalar(2.0), "exponent");
    NodePtr y2 = exp_(scale(clamp_max(s2, 50.0), -1.0));
    auto g2 = gradients(y2, {s2});
    REQUIRE_THAT(g2[0][0], Catch::Matchers::WithinAbs(-std::exp(-2.0), 1e-12));
}

TEST_CASE("non-finite values abort with the offending op named") {
    NodePtr x = leaf(Tensor::scalar(1000.0), "x");
    try {
        exp_(x);
        FAIL("expected NonFiniteError");
    } catch (const NonFiniteError& e) {
        REQUIRE(e.op == "exp");
    }
}

TEST_CASE("NoGradGuard drops graph recording") {
    NoGradGuard guard;
    NodePtr x = leaf(Tensor::scalar(2.0), "x");
    NodePtr y = square(x);
    REQUIRE(y->value[0] == 4.0);
    REQUIRE(y->inputs.empty());
    REQUIRE_FALSE(y->requires_grad);
}

TEST_CASE("gradient accumulation is deterministic") {
    Rng rng(404);
    std::vector<Tensor> vals = random_composition_inputs(rng);
    Composition c1 = build_composition(vals);
    Composition c2 = build_composition(vals);
    auto g1 = gradients(c1.loss, c1.leaves);
    auto g2 = gradients(c2.loss, c2.leaves);
    for (std::size_t w = 0; w < g1.size(); ++w)
        for (std::size_t i = 0; i < g1[w].size(); ++i) REQUIRE(g1[w][i] == g2[w][i]);
}
