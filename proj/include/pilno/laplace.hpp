#pragma once

// Numerical Laplace transform and inversion oracles.
//
//  * discrete_laplace_transform: rectangle-rule lifting of a uniformly sampled
//    time series to a complex frequency point (trapezoid variant behind a flag).
//  * stehfest_invert: Gaver-Stehfest inversion from real-axis samples of F.
//    The alternating coefficients suffer catastrophic cancellation if built in
//    floating point, so they are computed in exact integer rational arithmetic
//    (a common denominator of ((n/2)!)^3 keeps every intermediate inside
//    __int128 for n <= 18) and rounded to double once at the end.
//  * talbot_invert: fixed-Talbot deformed-contour quadrature of the Bromwich
//    integral, one contour per evaluation time.
//  * fit_quadrature_weights: per-time ridge least squares for a learned
//    inversion rule f(t) ~= sum_k w_k(t) e^{s_k t} F(s_k) over known pairs.

#include <cmath>
#include <complex>
#include <cstdint>
#include <functional>
#include <numeric>
#include <vector>

#include <Eigen/Dense>

#include "pilno/error.hpp"
#include "pilno/tensor.hpp"

namespace pilno {

using Complex = std::complex<double>;

// A transform sampled on a grid of complex frequencies.
struct TransformSamples {
    std::vector<Complex> poles;
    std::vector<Complex> values;

    TransformSamples(std::vector<Complex> p, std::vector<Complex> v)
        : poles(std::move(p)), values(std::move(v)) {
        if (poles.size() != values.size())
            throw ValidationError("TransformSamples: poles and values lengths differ");
        for (std::size_t i = 0; i < poles.size(); ++i) {
            if (!std::isfinite(poles[i].real()) || !std::isfinite(poles[i].imag()))
                throw ValidationError("TransformSamples: non-finite pole");
            for (std::size_t j = i + 1; j < poles.size(); ++j)
                if (poles[i] == poles[j]) throw ValidationError("TransformSamples: duplicate pole");
        }
    }
};

enum class TimeQuadrature { left_endpoint, trapezoid };

// F(s) = sum_m e^{-s t_m} f(t_m) dt over the uniform grid t_m = m dt.
inline Complex discrete_laplace_transform(const std::vector<double>& f, double dt, Complex s,
                                          TimeQuadrature rule = TimeQuadrature::left_endpoint) {
    if (dt <= 0.0) throw ValidationError("discrete_laplace_transform: dt must be positive");
    if (f.empty()) throw ValidationError("discrete_laplace_transform: need at least one sample");
    Complex acc{0.0, 0.0};
    for (std::size_t m = 0; m < f.size(); ++m) {
        double weight = dt;
        if (rule == TimeQuadrature::trapezoid && (m == 0 || m + 1 == f.size())) weight = 0.5 * dt;
        acc += std::exp(-s * (static_cast<double>(m) * dt)) * (f[m] * weight);
    }
    return acc;
}

// Overload taking explicit sample times; rejects non-uniform grids.
inline Complex discrete_laplace_transform(const std::vector<double>& times, const std::vector<double>& f,
                                          Complex s, TimeQuadrature rule = TimeQuadrature::left_endpoint) {
    if (times.size() != f.size())
        throw ValidationError("discrete_laplace_transform: times and samples lengths differ");
    if (times.empty()) throw ValidationError("discrete_laplace_transform: need at least one sample");
    if (std::abs(times.front()) > 1e-15)
        throw ValidationError("discrete_laplace_transform: samples must start at t = 0");
    if (times.size() == 1)
        throw ValidationError("discrete_laplace_transform: cannot infer spacing from one sample");
    const double dt = times[1] - times[0];
    if (dt <= 0.0) throw ValidationError("discrete_laplace_transform: non-increasing time grid");
    for (std::size_t m = 1; m < times.size(); ++m)
        if (std::abs(times[m] - times[m - 1] - dt) > 1e-9 * dt)
            throw ValidationError("discrete_laplace_transform: non-uniform spacing; resample first");
    return discrete_laplace_transform(f, dt, s, rule);
}

inline TransformSamples dlt_at_poles(const std::vector<double>& f, double dt,
                                     const std::vector<Complex>& poles,
                                     TimeQuadrature rule = TimeQuadrature::left_endpoint) {
    std::vector<Complex> vals;
    vals.reserve(poles.size());
    for (Complex s : poles) vals.push_back(discrete_laplace_transform(f, dt, s, rule));
    return TransformSamples(poles, std::move(vals));
}

namespace detail {

inline __int128 int_pow(__int128 b, int e) {
    __int128 r = 1;
    for (int i = 0; i < e; ++i) r *= b;
    return r;
}

inline __int128 factorial_i128(int n) {
    __int128 r = 1;
    for (int i = 2; i <= n; ++i) r *= i;
    return r;
}

inline __int128 binomial_i128(int n, int k) {
    __int128 r = 1;
    for (int i = 1; i <= k; ++i) r = r * (n - k + i) / i;
    return r;
}

inline __int128 gcd_i128(__int128 a, __int128 b) {
    if (a < 0) a = -a;
    if (b < 0) b = -b;
    while (b) {
        __int128 t = a % b;
        a = b;
        b = t;
    }
    return a;
}

} // namespace detail

// Gaver-Stehfest coefficients V_k, k = 1..n. Exact up to the final rounding.
inline std::vector<double> stehfest_coefficients(int n) {
    if (n < 8 || n > 18 || n % 2 != 0)
        throw ValidationError("stehfest_coefficients: n must be even and within [8, 18]");
    const int h = n / 2;
    // Every term's denominator (h-j)! (k-j)! (2j-k)! divides D = (h!)^3.
    const __int128 D = detail::int_pow(detail::factorial_i128(h), 3);
    std::vector<double> v(static_cast<std::size_t>(n));
    for (int k = 1; k <= n; ++k) {
        __int128 sum = 0;
        for (int j = (k + 1) / 2; j <= std::min(k, h); ++j) {
            // j^h (2j)! / [(h-j)! j! (j-1)! (k-j)! (2j-k)!]
            //   = j^{h+1} C(2j, j) / [(h-j)! (k-j)! (2j-k)!]
            __int128 term = detail::int_pow(j, h + 1) * detail::binomial_i128(2 * j, j);
            term *= D / (detail::factorial_i128(h - j) * detail::factorial_i128(k - j) *
                         detail::factorial_i128(2 * j - k));
            sum += term;
        }
        const __int128 g = detail::gcd_i128(sum, D);
        const double value =
            static_cast<double>(static_cast<long double>(sum / g) / static_cast<long double>(D / g));
        v[static_cast<std::size_t>(k - 1)] = ((k + h) % 2 == 0) ? value : -value;
    }
    return v;
}

// f(t) ~= (ln2 / t) sum_k V_k F(k ln2 / t). Real-axis evaluations only.
inline double stehfest_invert(const std::function<double(double)>& F, double t, int n_terms) {
    if (t <= 0.0) throw ValidationError("stehfest_invert: t must be positive");
    const std::vector<double> v = stehfest_coefficients(n_terms);
    const double log2_over_t = M_LN2 / t;
    double acc = 0.0;
    for (int k = 1; k <= n_terms; ++k)
        acc += v[static_cast<std::size_t>(k - 1)] * F(static_cast<double>(k) * log2_over_t);
    return acc * log2_over_t;
}

// Fixed-Talbot inversion: contour s(theta) = r theta (cot theta + i) with
// r = 2 n / (5 t), evaluated by the midpoint-in-angle rule.
inline double talbot_invert(const std::function<Complex(Complex)>& F, double t, int n_nodes) {
    if (t <= 0.0) throw ValidationError("talbot_invert: t must be positive");
    if (n_nodes < 8) throw ValidationError("talbot_invert: need at least 8 nodes");
    const double r = 2.0 * static_cast<double>(n_nodes) / (5.0 * t);
    double acc = 0.5 * std::exp(r * t) * F(Complex{r, 0.0}).real();
    for (int k = 1; k < n_nodes; ++k) {
        const double theta = static_cast<double>(k) * M_PI / static_cast<double>(n_nodes);
        const double cot = std::cos(theta) / std::sin(theta);
        const Complex s{r * theta * cot, r * theta};
        const double sigma = theta + (theta * cot - 1.0) * cot;
        const Complex term = std::exp(s * t) * F(s) * Complex{1.0, sigma};
        acc += term.real();
    }
    return acc * r / static_cast<double>(n_nodes);
}

// The n contour points the fixed-Talbot rule would use at reference time t_ref;
// a convenient spread of complex frequencies for fitting quadrature weights.
inline std::vector<Complex> talbot_pole_grid(int n, double t_ref) {
    if (t_ref <= 0.0) throw ValidationError("talbot_pole_grid: t_ref must be positive");
    if (n < 2) throw ValidationError("talbot_pole_grid: need at least 2 poles");
    const double r = 2.0 * static_cast<double>(n) / (5.0 * t_ref);
    std::vector<Complex> poles;
    poles.reserve(static_cast<std::size_t>(n));
    poles.emplace_back(r, 0.0);
    for (int k = 1; k < n; ++k) {
        const double theta = static_cast<double>(k) * M_PI / static_cast<double>(n);
        const double cot = std::cos(theta) / std::sin(theta);
        poles.emplace_back(r * theta * cot, r * theta);
    }
    return poles;
}

// A closed-form transform pair: F along the complex grid, f along time.
struct TransformPair {
    std::function<Complex(Complex)> F;
    std::function<double(double)> f;
};

// Learned inversion rule: weights w_k(t_i) over a fixed pole grid and time grid.
struct LearnedQuadrature {
    std::vector<Complex> poles;
    std::vector<double> times;
    Tensor weights; // (n_times, n_poles)
};

namespace detail {

// Transform value at a quadrature node. If the node sits exactly on a pole of
// F the value is unbounded; the basis column degrades to the bare exponential
// (unit factor) so the node remains usable — that is precisely the situation
// where e^{s_k t} alone can represent f exactly.
inline Complex guarded_transform_value(const std::function<Complex(Complex)>& F, Complex s) {
    const Complex v = F(s);
    if (!std::isfinite(v.real()) || !std::isfinite(v.imag()) || std::abs(v) > 1e100)
        return Complex{1.0, 0.0};
    return v;
}

} // namespace detail

inline LearnedQuadrature fit_quadrature_weights(const std::vector<Complex>& poles,
                                                const std::vector<double>& times,
                                                const std::vector<TransformPair>& pairs, double ridge) {
    if (pairs.empty()) throw ValidationError("fit_quadrature_weights: need at least one pair");
    if (poles.empty() || times.empty())
        throw ValidationError("fit_quadrature_weights: empty pole or time grid");
    if (ridge < 0.0) throw ValidationError("fit_quadrature_weights: ridge must be >= 0");

    const std::size_t np = poles.size(), nt = times.size(), rows = 2 * pairs.size();
    std::vector<std::vector<Complex>> Fvals(pairs.size(), std::vector<Complex>(np));
    for (std::size_t p = 0; p < pairs.size(); ++p)
        for (std::size_t k = 0; k < np; ++k)
            Fvals[p][k] = detail::guarded_transform_value(pairs[p].F, poles[k]);

    Tensor w(Shape{nt, np});
    for (std::size_t i = 0; i < nt; ++i) {
        const double t = times[i];
        // Real/imaginary parts of each pair's equation, stacked.
        Eigen::MatrixXd A(rows, static_cast<Eigen::Index>(np));
        Eigen::VectorXd b(rows);
        for (std::size_t p = 0; p < pairs.size(); ++p) {
            for (std::size_t k = 0; k < np; ++k) {
                const Complex basis = std::exp(poles[k] * t) * Fvals[p][k];
                A(static_cast<Eigen::Index>(2 * p), static_cast<Eigen::Index>(k)) = basis.real();
                A(static_cast<Eigen::Index>(2 * p + 1), static_cast<Eigen::Index>(k)) = basis.imag();
            }
            b(static_cast<Eigen::Index>(2 * p)) = pairs[p].f(t);
            b(static_cast<Eigen::Index>(2 * p + 1)) = 0.0;
        }
        Eigen::VectorXd sol;
        if (ridge == 0.0) {
            Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(A);
            if (qr.rank() < static_cast<Eigen::Index>(np))
                throw ValidationError(
                    "fit_quadrature_weights: rank-deficient system with ridge = 0; pass ridge > 0");
            sol = qr.solve(b);
        } else {
            Eigen::MatrixXd Astack(rows + np, static_cast<Eigen::Index>(np));
            Eigen::VectorXd bstack = Eigen::VectorXd::Zero(rows + np);
            Astack.topRows(rows) = A;
            Astack.bottomRows(static_cast<Eigen::Index>(np)) =
                std::sqrt(ridge) *
                Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(np), static_cast<Eigen::Index>(np));
            bstack.head(rows) = b;
            sol = Astack.colPivHouseholderQr().solve(bstack);
        }
        for (std::size_t k = 0; k < np; ++k) w[i * np + k] = sol(static_cast<Eigen::Index>(k));
    }
    return LearnedQuadrature{poles, times, std::move(w)};
}

// Reconstruct f(t) with the learned rule. Between grid times each weight is
// transported along its own pole's exponential: the products w_k e^{s_k t} are
// interpolated linearly. Interpolating raw weights instead would amplify the
// interpolation error by e^{Re(s_k) t}; the product form keeps the held-out
// error at the interpolation error of the (smooth) reconstructed function.
inline double reconstruct(const LearnedQuadrature& q, const std::function<Complex(Complex)>& F, double t) {
    const std::size_t np = q.poles.size(), nt = q.times.size();
    if (t < q.times.front() - 1e-12 || t > q.times.back() + 1e-12)
        throw ValidationError("reconstruct: t outside the fitted time range");
    std::size_t hi = 1;
    while (hi < nt && q.times[hi] < t) ++hi;
    if (hi == nt) hi = nt - 1;
    const std::size_t lo = hi - 1;
    const double span = q.times[hi] - q.times[lo];
    const double a = span > 0.0 ? (t - q.times[lo]) / span : 0.0;
    Complex acc{0.0, 0.0};
    for (std::size_t k = 0; k < np; ++k) {
        const Complex basis_lo = q.weights[lo * np + k] * std::exp(q.poles[k] * q.times[lo]);
        const Complex basis_hi = q.weights[hi * np + k] * std::exp(q.poles[k] * q.times[hi]);
        acc += ((1.0 - a) * basis_lo + a * basis_hi) * detail::guarded_transform_value(F, q.poles[k]);
    }
    return acc.real();
}

// Sum of squared residuals of the fitted rule at its own grid times.
inline double fit_residual(const LearnedQuadrature& q, const std::vector<TransformPair>& pairs) {
    double acc = 0.0;
    for (const TransformPair& pr : pairs)
        for (double t : q.times) {
            const std::size_t np = q.poles.size();
            std::size_t i = 0;
            while (q.times[i] != t) ++i;
            Complex rec{0.0, 0.0};
            for (std::size_t k = 0; k < np; ++k)
                rec += q.weights[i * np + k] * std::exp(q.poles[k] * t) *
                       detail::guarded_transform_value(pr.F, q.poles[k]);
            const Complex diff = rec - Complex{pr.f(t), 0.0};
            acc += std::norm(diff);
        }
    return acc;
}

} // namespace pilno
