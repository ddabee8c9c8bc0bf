#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <limits>
#include <vector>

#include "pilno/optim.hpp"
#include "pilno/rng.hpp"

using namespace pilno;

namespace {

// Rosenbrock: f(x, y) = (1 - x)^2 + 100 (y - x^2)^2, minimum 0 at (1, 1).
double rosenbrock(const std::vector<double>& x, std::vector<double>& g) {
    const double a = 1.0 - x[0], b = x[1] - x[0] * x[0];
    g[0] = -2.0 * a - 400.0 * x[0] * b;
    g[1] = 200.0 * b;
    return a * a + 100.0 * b * b;
}

double quadratic(const std::vector<double>& x, std::vector<double>& g) {
    double f = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        g[i] = x[i];
        f += 0.5 * x[i] * x[i];
    }
    return f;
}

// Dense reference for the limited-memory inverse-Hessian action: start from
// H0 = gamma I (gamma from the newest pair) and apply the BFGS update
//   H <- (I - rho s y') H (I - rho y s') + rho s s'
// for each stored pair oldest-to-newest, then multiply by g.
std::vector<double> dense_inverse_apply(const std::vector<std::vector<double>>& ss,
                                        const std::vector<std::vector<double>>& ys,
                                        const std::vector<double>& g) {
    const std::size_t n = g.size(), k = ss.size();
    auto dot = [n](const std::vector<double>& a, const std::vector<double>& b) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
        return s;
    };
    const double gamma = dot(ss[k - 1], ys[k - 1]) / dot(ys[k - 1], ys[k - 1]);
    std::vector<std::vector<double>> H(n, std::vector<double>(n, 0.0));
    for (std::size_t i = 0; i < n; ++i) H[i][i] = gamma;
    for (std::size_t j = 0; j < k; ++j) {
        const double rho = 1.0 / dot(ys[j], ss[j]);
        std::vector<std::vector<double>> A(n, std::vector<double>(n, 0.0));
        // A = I - rho * s y'
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < n; ++c) A[r][c] = (r == c ? 1.0 : 0.0) - rho * ss[j][r] * ys[j][c];
        // H <- A H A' + rho s s'
        std::vector<std::vector<double>> AH(n, std::vector<double>(n, 0.0));
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t m = 0; m < n; ++m)
                for (std::size_t c = 0; c < n; ++c) AH[r][c] += A[r][m] * H[m][c];
        std::vector<std::vector<double>> Hn(n, std::vector<double>(n, 0.0));
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < n; ++c) {
                for (std::size_t m = 0; m < n; ++m) Hn[r][c] += AH[r][m] * A[c][m];
                Hn[r][c] += rho * ss[j][r] * ss[j][c];
            }
        H = Hn;
    }
    std::vector<double> out(n, 0.0);
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < n; ++c) out[r] += H[r][c] * g[c];
    return out;
}

} // namespace

TEST_CASE("cosine schedule hits its pinned points and range") {
    const double hi = 3e-4, lo = 3e-6;
    REQUIRE_THAT(lr_cosine(0, 1000, hi, lo), Catch::Matchers::WithinRel(hi, 1e-15));
    REQUIRE_THAT(lr_cosine(500, 1000, hi, lo), Catch::Matchers::WithinRel(0.5 * (hi + lo), 1e-12));
    // Warm restart: step T_i wraps around to eta_max.
    REQUIRE_THAT(lr_cosine(1000, 1000, hi, lo), Catch::Matchers::WithinRel(hi, 1e-15));
    REQUIRE_THAT(lr_cosine(1500, 1000, hi, lo), Catch::Matchers::WithinRel(0.5 * (hi + lo), 1e-12));
    for (long long s = 0; s <= 3000; s += 7) {
        const double eta = lr_cosine(s, 1000, hi, lo);
        REQUIRE(eta >= lo - 1e-18);
        REQUIRE(eta <= hi + 1e-18);
    }
    REQUIRE_THROWS_AS(lr_cosine(0, 0, hi, lo), ValidationError);
    REQUIRE_THROWS_AS(lr_cosine(0, 10, lo, hi), ValidationError); // max < min
    REQUIRE_THROWS_AS(lr_cosine(0, 10, hi, 0.0), ValidationError);
}

TEST_CASE("staircase exponential decay") {
    REQUIRE_THAT(lr_exponential(0, 1e-3, 0.95, 100), Catch::Matchers::WithinRel(1e-3, 1e-15));
    // The staircase holds flat until the boundary...
    REQUIRE_THAT(lr_exponential(99, 1e-3, 0.95, 100), Catch::Matchers::WithinRel(1e-3, 1e-15));
    // ...and drops exactly at it.
    REQUIRE_THAT(lr_exponential(100, 1e-3, 0.95, 100), Catch::Matchers::WithinRel(0.95e-3, 1e-15));
    // After 17 decays the rate is 1e-3 * 0.95^17, about 4.3e-4 within 5%.
    const double eta17 = lr_exponential(1700, 1e-3, 0.95, 100);
    REQUIRE_THAT(eta17, Catch::Matchers::WithinRel(1e-3 * std::pow(0.95, 17.0), 1e-12));
    REQUIRE(std::abs(eta17 - 4.30e-4) / 4.30e-4 <= 0.05);
    REQUIRE_THROWS_AS(lr_exponential(0, 1e-3, 0.95, 0), ValidationError);
    REQUIRE_THROWS_AS(lr_exponential(0, 1e-3, 1.5, 10), ValidationError);
    REQUIRE_THROWS_AS(lr_exponential(0, 1e-3, 0.0, 10), ValidationError);
}

TEST_CASE("gradient clipping rescales only past the threshold") {
    // ||(3,4)|| = 5, tau = 1 -> (0.6, 0.8).
    std::vector<Tensor> g{Tensor(Shape{2}, std::vector<double>{3.0, 4.0})};
    const double n = clip_grad_norm(g, 1.0);
    REQUIRE_THAT(n, Catch::Matchers::WithinRel(5.0, 1e-15));
    REQUIRE_THAT(g[0][0], Catch::Matchers::WithinAbs(0.6, 1e-15));
    REQUIRE_THAT(g[0][1], Catch::Matchers::WithinAbs(0.8, 1e-15));
    const double post = std::sqrt(g[0][0] * g[0][0] + g[0][1] * g[0][1]);
    REQUIRE(post <= 1.0 + 1e-12);

    // Norm across several tensors is global, and small gradients pass through
    // bitwise untouched.
    std::vector<Tensor> h{Tensor(Shape{1}, std::vector<double>{0.3}),
                          Tensor(Shape{2}, std::vector<double>{-0.1, 0.2})};
    const double hn = clip_grad_norm(h, 1.0);
    REQUIRE_THAT(hn, Catch::Matchers::WithinRel(std::sqrt(0.09 + 0.01 + 0.04), 1e-14));
    REQUIRE(h[0][0] == 0.3);
    REQUIRE(h[1][0] == -0.1);
    REQUIRE(h[1][1] == 0.2);

    // Zero stays zero.
    std::vector<Tensor> z{Tensor(Shape{3})};
    REQUIRE(clip_grad_norm(z, 0.5) == 0.0);
    for (std::size_t i = 0; i < 3; ++i) REQUIRE(z[0][i] == 0.0);

    REQUIRE_THROWS_AS(clip_grad_norm(z, 0.0), ValidationError);
}

TEST_CASE("adam: first step, zero gradient, and sign") {
    // First step with scalar gradient 1: m_hat = v_hat = 1, so the update is
    // exactly lr / (1 + eps).
    {
        Adam opt;
        std::vector<Tensor> p{Tensor::scalar(0.0)};
        std::vector<Tensor> g{Tensor::scalar(1.0)};
        opt.step(p, g, 1e-3);
        REQUIRE_THAT(p[0][0], Catch::Matchers::WithinRel(-1e-3 / (1.0 + 1e-8), 1e-12));
        REQUIRE(opt.step_count() == 1);
    }
    // Zero gradient leaves parameters untouched but advances the step.
    {
        Adam opt;
        std::vector<Tensor> p{Tensor(Shape{2, 2}, std::vector<double>{1.0, -2.0, 3.0, 4.0})};
        std::vector<Tensor> g{Tensor(Shape{2, 2})};
        opt.step(p, g, 1e-2);
        REQUIRE(p[0][0] == 1.0);
        REQUIRE(p[0][1] == -2.0);
        REQUIRE(p[0][2] == 3.0);
        REQUIRE(p[0][3] == 4.0);
        REQUIRE(opt.step_count() == 1);
    }
    // A first step always moves opposite to the gradient.
    {
        Rng rng(7);
        for (int rep = 0; rep < 50; ++rep) {
            Adam opt;
            const double gv = rng.uniform(-3.0, 3.0);
            if (std::abs(gv) < 1e-12) continue;
            std::vector<Tensor> p{Tensor::scalar(0.0)};
            std::vector<Tensor> g{Tensor::scalar(gv)};
            opt.step(p, g, 1e-3);
            REQUIRE(p[0][0] * gv < 0.0);
        }
    }
}

TEST_CASE("adam: constant gradient steps are bounded by the learning rate") {
    // With a constant gradient, m_hat / (sqrt(v_hat) + eps) == g/|g| up to
    // rounding, so every update has magnitude lr within a tiny slack.
    Adam opt;
    std::vector<Tensor> p{Tensor::scalar(5.0)};
    std::vector<Tensor> g{Tensor::scalar(0.37)};
    double prev = p[0][0];
    for (int i = 0; i < 200; ++i) {
        opt.step(p, g, 1e-3);
        const double delta = p[0][0] - prev;
        REQUIRE(std::abs(delta) <= 1e-3 * (1.0 + 1e-9));
        REQUIRE(delta < 0.0);
        prev = p[0][0];
    }
}

TEST_CASE("adam: random gradient sequences respect the provable step bound") {
    // |m_hat| / sqrt(v_hat) <= (1-b1)/sqrt(1-b2) * sqrt(1/(1 - b1^2/b2)) for
    // any gradient history (Cauchy-Schwarz on the exponential windows); with
    // the defaults that constant is ~7.28.
    const double bound = (1.0 - 0.9) / std::sqrt(1.0 - 0.999) / std::sqrt(1.0 - 0.9 * 0.9 / 0.999);
    Rng rng(123);
    Adam opt;
    std::vector<Tensor> p{Tensor(Shape{4})};
    std::vector<Tensor> g{Tensor(Shape{4})};
    std::vector<double> prev(4, 0.0);
    for (int step = 0; step < 300; ++step) {
        for (std::size_t i = 0; i < 4; ++i) g[0][i] = rng.uniform(-10.0, 10.0);
        opt.step(p, g, 1e-3);
        for (std::size_t i = 0; i < 4; ++i) {
            REQUIRE(std::abs(p[0][i] - prev[i]) <= 1e-3 * bound * (1.0 + 1e-9));
            prev[i] = p[0][i];
        }
    }
}

TEST_CASE("adam: validation and non-finite gradients") {
    Adam opt;
    std::vector<Tensor> p{Tensor::scalar(0.0)};
    std::vector<Tensor> g{Tensor::scalar(1.0)};
    REQUIRE_THROWS_AS(opt.step(p, g, 0.0), ValidationError);
    std::vector<Tensor> bad{Tensor::scalar(std::numeric_limits<double>::quiet_NaN())};
    REQUIRE_THROWS_AS(opt.step(p, bad, 1e-3), NonFiniteError);
    std::vector<Tensor> wrong{Tensor(Shape{2})};
    REQUIRE_THROWS_AS(opt.step(p, wrong, 1e-3), ShapeError);
    // The aborted steps must not have corrupted the parameter.
    REQUIRE(p[0][0] == 0.0);
}

TEST_CASE("lbfgs history: curvature filter, memory bound, and two-loop oracle") {
    Rng rng(42);
    const std::size_t n = 4;

    // Pairs violating y's > 0 are rejected.
    LbfgsHistory h(3);
    REQUIRE_FALSE(h.push({1.0, 0.0, 0.0, 0.0}, {-1.0, 0.0, 0.0, 0.0}));
    REQUIRE(h.size() == 0);
    REQUIRE_FALSE(h.push({1.0, 0.0, 0.0, 0.0}, {0.0, 1.0, 0.0, 0.0})); // y's == 0
    REQUIRE(h.size() == 0);

    // Memory bound: pushing 5 valid pairs into memory 3 keeps the newest 3.
    std::vector<std::vector<double>> ss, ys;
    for (int j = 0; j < 5; ++j) {
        std::vector<double> s(n), y(n);
        double ysdot = 0.0;
        do {
            for (std::size_t i = 0; i < n; ++i) {
                s[i] = rng.uniform(-1.0, 1.0);
                y[i] = s[i] + 0.3 * rng.uniform(-1.0, 1.0);
            }
            ysdot = 0.0;
            for (std::size_t i = 0; i < n; ++i) ysdot += s[i] * y[i];
        } while (ysdot <= 0.1);
        REQUIRE(h.push(s, y));
        ss.push_back(s);
        ys.push_back(y);
    }
    REQUIRE(h.size() == 3);
    REQUIRE(h.min_curvature() > 0.0);

    // Two-loop result matches the dense BFGS inverse built from the retained
    // (newest three) pairs.
    std::vector<double> g(n);
    for (std::size_t i = 0; i < n; ++i) g[i] = rng.uniform(-2.0, 2.0);
    const std::vector<std::vector<double>> keep_s(ss.end() - 3, ss.end());
    const std::vector<std::vector<double>> keep_y(ys.end() - 3, ys.end());
    const auto want = dense_inverse_apply(keep_s, keep_y, g);
    const auto got = h.apply_inverse(g);
    for (std::size_t i = 0; i < n; ++i) REQUIRE_THAT(got[i], Catch::Matchers::WithinRel(want[i], 1e-11));

    // Single-pair case against the same oracle.
    LbfgsHistory h1(20);
    REQUIRE(h1.push(ss[0], ys[0]));
    const auto want1 = dense_inverse_apply({ss[0]}, {ys[0]}, g);
    const auto got1 = h1.apply_inverse(g);
    for (std::size_t i = 0; i < n; ++i) REQUIRE_THAT(got1[i], Catch::Matchers::WithinRel(want1[i], 1e-12));

    // Empty history is the identity.
    LbfgsHistory h0(20);
    const auto id = h0.apply_inverse(g);
    for (std::size_t i = 0; i < n; ++i) REQUIRE(id[i] == g[i]);
}

TEST_CASE("lbfgs solves a convex quadratic essentially exactly") {
    Rng rng(9);
    for (int rep = 0; rep < 5; ++rep) {
        std::vector<double> x0(6);
        for (double& v : x0) v = rng.uniform(-4.0, 4.0);
        LbfgsOptions opt;
        opt.max_iters = 2;
        opt.grad_tol = 1e-12;
        const auto res = lbfgs_run(quadratic, x0, opt);
        double nrm = 0.0;
        for (double v : res.x) nrm += v * v;
        REQUIRE(std::sqrt(nrm) <= 1e-10);
        REQUIRE(res.status == LbfgsStatus::converged);
    }
}

TEST_CASE("lbfgs minimizes rosenbrock where plain gradient descent stalls") {
    LbfgsOptions opt;
    opt.max_iters = 100;
    opt.grad_tol = 1e-10;
    const auto res = lbfgs_run(rosenbrock, {-1.2, 1.0}, opt);
    CAPTURE(res.iterations, res.loss, lbfgs_status_name(res.status));
    REQUIRE(res.loss <= 1e-8);

    // Baseline: fixed-step gradient descent from the same start barely moves
    // in the same 100-iteration budget.
    std::vector<double> x{-1.2, 1.0}, g(2);
    double f = 0.0;
    for (int i = 0; i < 100; ++i) {
        f = rosenbrock(x, g);
        for (std::size_t j = 0; j < 2; ++j) x[j] -= 1e-3 * g[j];
    }
    f = rosenbrock(x, g);
    REQUIRE(f >= 1e-2);
    REQUIRE(f / std::max(res.loss, 1e-300) >= 1e4);
}

TEST_CASE("lbfgs trace is monotone non-increasing and curvature pairs are valid") {
    // A nonconvex double-well in 4 variables exercises the line search.
    auto well = [](const std::vector<double>& x, std::vector<double>& g) {
        double f = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double q = x[i] * x[i] - 1.0;
            f += q * q + 0.1 * x[i];
            g[i] = 4.0 * x[i] * q + 0.1;
        }
        return f;
    };
    Rng rng(77);
    for (int rep = 0; rep < 4; ++rep) {
        std::vector<double> x0(4);
        for (double& v : x0) v = rng.uniform(-2.0, 2.0);
        const auto res = lbfgs_run(well, x0);
        for (std::size_t i = 1; i < res.trace.size(); ++i) REQUIRE(res.trace[i] <= res.trace[i - 1] + 1e-15);
        REQUIRE(res.min_curvature > 0.0);
        REQUIRE(res.grad_norm <= 1e-6);
    }
    // Rosenbrock trace as well.
    const auto res = lbfgs_run(rosenbrock, {-1.2, 1.0});
    for (std::size_t i = 1; i < res.trace.size(); ++i) REQUIRE(res.trace[i] <= res.trace[i - 1] + 1e-15);
}

TEST_CASE("lbfgs line-search failure returns best-so-far with a flag") {
    // |x| has no point satisfying the curvature condition around its kink;
    // the search must exhaust its budget and return the best point seen,
    // not throw.
    auto absf = [](const std::vector<double>& x, std::vector<double>& g) {
        g[0] = x[0] >= 0.0 ? 1.0 : -1.0;
        return std::abs(x[0]);
    };
    const auto res = lbfgs_run(absf, {1.0});
    REQUIRE(res.status == LbfgsStatus::line_search_failed);
    REQUIRE(res.loss <= 1.0); // never worse than the start
    REQUIRE(std::isfinite(res.x[0]));

    REQUIRE_THROWS_AS(lbfgs_run(absf, {}), ValidationError);
    REQUIRE_THROWS_AS(lbfgs_run(absf, {std::numeric_limits<double>::infinity()}), ValidationError);
}
