#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "pilno/error.hpp"
#include "pilno/tensor.hpp"

namespace pilno {

// ---------------------------------------------------------------------------
// Learning-rate schedules
// ---------------------------------------------------------------------------

// Cosine annealing with warm restarts every T_i steps:
// eta(step) = eta_min + (eta_max - eta_min) * (1 + cos(pi * (step mod T_i) / T_i)) / 2.
inline double lr_cosine(long long step, long long T_i, double eta_max, double eta_min) {
    if (T_i < 1) throw ValidationError("lr_cosine: period must be >= 1");
    if (!(eta_min > 0.0) || !(eta_max >= eta_min))
        throw ValidationError("lr_cosine: require eta_max >= eta_min > 0");
    if (step < 0) throw ValidationError("lr_cosine: step must be >= 0");
    const double phase = static_cast<double>(step % T_i) / static_cast<double>(T_i);
    constexpr double kPi = 3.14159265358979323846;
    return eta_min + 0.5 * (eta_max - eta_min) * (1.0 + std::cos(kPi * phase));
}

// Staircase exponential decay: eta0 * gamma^floor(step / decay_steps).
inline double lr_exponential(long long step, double eta0, double gamma, long long decay_steps) {
    if (decay_steps < 1) throw ValidationError("lr_exponential: decay_steps must be >= 1");
    if (!(gamma > 0.0) || gamma > 1.0) throw ValidationError("lr_exponential: require 0 < gamma <= 1");
    if (!(eta0 > 0.0)) throw ValidationError("lr_exponential: eta0 must be > 0");
    if (step < 0) throw ValidationError("lr_exponential: step must be >= 0");
    const long long decays = step / decay_steps;
    return eta0 * std::pow(gamma, static_cast<double>(decays));
}

// ---------------------------------------------------------------------------
// Global gradient-norm clipping
// ---------------------------------------------------------------------------

// Scales the concatenated gradient by min(1, tau / ||g||_2) in place and
// returns the pre-clip norm. Direction is preserved; an already-small
// gradient is left bitwise untouched.
inline double clip_grad_norm(std::vector<Tensor>& grads, double tau) {
    if (!(tau > 0.0)) throw ValidationError("clip_grad_norm: tau must be > 0");
    double sq = 0.0;
    for (const Tensor& g : grads)
        for (std::size_t i = 0; i < g.size(); ++i) sq += g[i] * g[i];
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) throw NonFiniteError("clip_grad_norm");
    if (norm > tau) {
        const double scale = tau / norm;
        for (Tensor& g : grads)
            for (std::size_t i = 0; i < g.size(); ++i) g[i] *= scale;
    }
    return norm;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Bias-corrected Adam. Moment accumulators are allocated lazily on the first
// step and must keep matching the parameter shapes afterwards. The update is
//   theta <- theta - lr * m_hat / (sqrt(v_hat) + eps)
// with eps added outside the square root.
class Adam {
public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {
        if (!(cfg_.beta1 >= 0.0 && cfg_.beta1 < 1.0) || !(cfg_.beta2 >= 0.0 && cfg_.beta2 < 1.0))
            throw ValidationError("Adam: betas must lie in [0, 1)");
        if (!(cfg_.eps > 0.0)) throw ValidationError("Adam: eps must be > 0");
    }

    const AdamConfig& config() const { return cfg_; }
    long long step_count() const { return step_; }

    void step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, double lr) {
        if (!(lr > 0.0)) throw ValidationError("Adam: learning rate must be > 0");
        if (params.size() != grads.size())
            throw ShapeError("Adam: " + std::to_string(params.size()) + " parameters but " +
                             std::to_string(grads.size()) + " gradients");
        if (m_.empty()) {
            for (const Tensor& p : params) {
                m_.emplace_back(p.shape());
                v_.emplace_back(p.shape());
            }
        } else if (m_.size() != params.size()) {
            throw ShapeError("Adam: parameter list size changed between steps");
        }
        for (std::size_t j = 0; j < params.size(); ++j) {
            if (!same_shape(params[j], grads[j]))
                throw ShapeError("Adam: gradient shape " + shape_str(grads[j].shape()) +
                                 " does not match parameter shape " + shape_str(params[j].shape()));
            if (!same_shape(params[j], m_[j]))
                throw ShapeError("Adam: parameter shape changed between steps");
            if (!grads[j].all_finite()) throw NonFiniteError("adam_step");
        }

        step_ += 1;
        const double t = static_cast<double>(step_);
        const double bc1 = 1.0 - std::pow(cfg_.beta1, t);
        const double bc2 = 1.0 - std::pow(cfg_.beta2, t);
        for (std::size_t j = 0; j < params.size(); ++j) {
            Tensor& p = params[j];
            const Tensor& g = grads[j];
            Tensor& m = m_[j];
            Tensor& v = v_[j];
            for (std::size_t i = 0; i < p.size(); ++i) {
                m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
                v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
                const double m_hat = m[i] / bc1;
                const double v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (std::sqrt(v_hat) + cfg_.eps);
            }
            if (!p.all_finite()) throw NonFiniteError("adam_step");
        }
    }

private:
    AdamConfig cfg_;
    std::vector<Tensor> m_, v_;
    long long step_ = 0;
};

// ---------------------------------------------------------------------------
// L-BFGS with strong-Wolfe line search
// ---------------------------------------------------------------------------

namespace detail {

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double norm2(const std::vector<double>& a) { return std::sqrt(dot(a, a)); }

} // namespace detail

// Bounded curvature history for the two-loop recursion. Pairs with
// non-positive curvature y's <= 0 are rejected so the implicit inverse
// Hessian stays positive definite.
class LbfgsHistory {
public:
    explicit LbfgsHistory(std::size_t memory = 20) : memory_(memory) {
        if (memory_ == 0) throw ValidationError("LbfgsHistory: memory must be >= 1");
    }

    std::size_t size() const { return s_.size(); }
    std::size_t memory() const { return memory_; }

    // Returns false (and stores nothing) when the curvature condition fails.
    bool push(std::vector<double> s, std::vector<double> y) {
        if (s.size() != y.size()) throw ShapeError("LbfgsHistory: s and y lengths differ");
        const double ys = detail::dot(y, s);
        if (!(ys > 0.0)) return false;
        if (s_.size() == memory_) {
            s_.pop_front();
            y_.pop_front();
            rho_.pop_front();
        }
        s_.push_back(std::move(s));
        y_.push_back(std::move(y));
        rho_.push_back(1.0 / ys);
        return true;
    }

    double min_curvature() const {
        double lo = std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < s_.size(); ++j) lo = std::min(lo, detail::dot(y_[j], s_[j]));
        return lo;
    }

    // Two-loop recursion: approximate inverse-Hessian action H*g, seeded with
    // H0 = gamma*I where gamma = s'y / y'y from the most recent pair.
    std::vector<double> apply_inverse(const std::vector<double>& g) const {
        std::vector<double> q = g;
        if (s_.empty()) return q;
        const std::size_t k = s_.size();
        std::vector<double> alpha(k);
        for (std::size_t jj = k; jj-- > 0;) {
            alpha[jj] = rho_[jj] * detail::dot(s_[jj], q);
            for (std::size_t i = 0; i < q.size(); ++i) q[i] -= alpha[jj] * y_[jj][i];
        }
        const double gamma = detail::dot(s_.back(), y_.back()) / detail::dot(y_.back(), y_.back());
        for (double& qi : q) qi *= gamma;
        for (std::size_t jj = 0; jj < k; ++jj) {
            const double beta = rho_[jj] * detail::dot(y_[jj], q);
            for (std::size_t i = 0; i < q.size(); ++i) q[i] += (alpha[jj] - beta) * s_[jj][i];
        }
        return q;
    }

private:
    std::size_t memory_;
    std::deque<std::vector<double>> s_, y_;
    std::deque<double> rho_;
};

// Loss callback: fill `grad` (resized by the caller) and return the loss.
using LossGradFn = std::function<double(const std::vector<double>& x, std::vector<double>& grad)>;

enum class LbfgsStatus { converged, max_iterations, line_search_failed };

inline const char* lbfgs_status_name(LbfgsStatus s) {
    switch (s) {
        case LbfgsStatus::converged: return "converged";
        case LbfgsStatus::max_iterations: return "max_iterations";
        case LbfgsStatus::line_search_failed: return "line_search_failed";
    }
    return "unknown";
}

struct LbfgsOptions {
    std::size_t max_iters = 100;
    std::size_t memory = 20;
    double c1 = 1e-4;        // sufficient-decrease constant
    double c2 = 0.9;         // curvature constant
    double grad_tol = 1e-9;  // stop when ||grad||_2 <= grad_tol
    std::size_t max_bisections = 25;
};

struct LbfgsResult {
    std::vector<double> x;      // best parameters seen
    double loss = 0.0;          // loss at x
    double grad_norm = 0.0;     // gradient norm at x
    std::size_t iterations = 0; // accepted outer iterations
    LbfgsStatus status = LbfgsStatus::max_iterations;
    std::vector<double> trace;  // losses at accepted iterates, starting at x0
    double min_curvature = 0.0; // smallest y's over stored pairs (inf when none stored)
};

// Limited-memory BFGS. Each outer iteration takes the two-loop direction and
// runs a strong-Wolfe line search (bracket then bisection zoom). The accepted
// loss sequence is monotone non-increasing; a line search that cannot satisfy
// both Wolfe conditions within the bisection budget ends the run with
// `line_search_failed` and the best-so-far point, never an exception.
inline LbfgsResult lbfgs_run(const LossGradFn& fg, std::vector<double> x0, LbfgsOptions opt = {}) {
    if (x0.empty()) throw ValidationError("lbfgs_run: empty parameter vector");
    for (double v : x0)
        if (!std::isfinite(v)) throw ValidationError("lbfgs_run: x0 must be finite");
    if (!(opt.c1 > 0.0 && opt.c1 < opt.c2 && opt.c2 < 1.0))
        throw ValidationError("lbfgs_run: require 0 < c1 < c2 < 1");

    LbfgsResult out;
    std::vector<double> x = std::move(x0);
    std::vector<double> g(x.size(), 0.0);
    double f = fg(x, g);
    if (!std::isfinite(f)) throw NonFiniteError("lbfgs_loss");
    out.x = x;
    out.loss = f;
    out.grad_norm = detail::norm2(g);
    out.trace.push_back(f);

    LbfgsHistory hist(opt.memory);
    std::vector<double> d(x.size()), x_try(x.size()), g_try(x.size());

    for (std::size_t it = 0; it < opt.max_iters; ++it) {
        if (out.grad_norm <= opt.grad_tol) {
            out.status = LbfgsStatus::converged;
            break;
        }

        d = hist.apply_inverse(g);
        for (double& di : d) di = -di;
        double dphi0 = detail::dot(g, d);
        if (!(dphi0 < 0.0)) {
            // Not a descent direction (numerical breakdown): restart from
            // steepest descent.
            for (std::size_t i = 0; i < d.size(); ++i) d[i] = -g[i];
            dphi0 = detail::dot(g, d);
            if (!(dphi0 < 0.0)) {
                out.status = LbfgsStatus::converged; // gradient is exactly zero
                break;
            }
        }

        // Strong-Wolfe line search on phi(a) = f(x + a d). Every evaluation
        // feeds the best-so-far record, so a failed search still returns the
        // best point it visited.
        const double phi0 = f;
        auto eval = [&](double a, double& phi, double& dphi) {
            for (std::size_t i = 0; i < x.size(); ++i) x_try[i] = x[i] + a * d[i];
            phi = fg(x_try, g_try);
            dphi = detail::dot(g_try, d);
            if (std::isfinite(phi) && phi < out.loss) {
                out.x = x_try;
                out.loss = phi;
                out.grad_norm = detail::norm2(g_try);
            }
        };

        double a_accept = -1.0, phi_accept = 0.0;
        std::size_t budget = opt.max_bisections;
        double lo = 0.0, hi = 0.0;
        double phi_lo = phi0, dphi_lo = dphi0;
        bool bracketed = false;

        // Bracketing phase: expand until the minimum is bracketed or Wolfe
        // holds outright.
        {
            double a_prev = 0.0, phi_prev = phi0, dphi_prev = dphi0;
            double a = 1.0;
            while (budget > 0) {
                --budget;
                double phi, dphi;
                eval(a, phi, dphi);
                if (!std::isfinite(phi) || phi > phi0 + opt.c1 * a * dphi0 || (phi >= phi_prev && a_prev > 0.0)) {
                    lo = a_prev; phi_lo = phi_prev; dphi_lo = dphi_prev;
                    hi = a;
                    bracketed = true;
                    break;
                }
                if (std::abs(dphi) <= -opt.c2 * dphi0) {
                    a_accept = a;
                    phi_accept = phi;
                    break;
                }
                if (dphi >= 0.0) {
                    lo = a; phi_lo = phi; dphi_lo = dphi;
                    hi = a_prev;
                    bracketed = true;
                    break;
                }
                a_prev = a; phi_prev = phi; dphi_prev = dphi;
                a *= 2.0;
            }
        }

        // Zoom phase: bisect the bracket until strong Wolfe holds.
        while (a_accept < 0.0 && bracketed && budget > 0) {
            --budget;
            const double a = 0.5 * (lo + hi);
            double phi, dphi;
            eval(a, phi, dphi);
            if (!std::isfinite(phi) || phi > phi0 + opt.c1 * a * dphi0 || phi >= phi_lo) {
                hi = a;
            } else {
                if (std::abs(dphi) <= -opt.c2 * dphi0) {
                    a_accept = a;
                    phi_accept = phi;
                    break;
                }
                if (dphi * (hi - lo) >= 0.0) hi = lo;
                lo = a; phi_lo = phi; dphi_lo = dphi;
            }
            if (std::abs(hi - lo) <= 1e-16 * std::max(1.0, std::abs(lo))) break;
        }
        (void)dphi_lo;

        if (a_accept < 0.0) {
            out.status = LbfgsStatus::line_search_failed;
            break;
        }

        // Accept the step; x_try/g_try still hold the accepted evaluation.
        std::vector<double> s(x.size()), yv(x.size());
        for (std::size_t i = 0; i < x.size(); ++i) {
            s[i] = x_try[i] - x[i];
            yv[i] = g_try[i] - g[i];
        }
        hist.push(std::move(s), std::move(yv));
        x = x_try;
        g = g_try;
        f = phi_accept;
        out.iterations = it + 1;
        out.trace.push_back(f);
        if (f <= out.loss) {
            out.x = x;
            out.loss = f;
            out.grad_norm = detail::norm2(g);
        }
        if (detail::norm2(g) <= opt.grad_tol) {
            out.status = LbfgsStatus::converged;
            break;
        }
        if (out.iterations == opt.max_iters) out.status = LbfgsStatus::max_iterations;
    }
    if (out.grad_norm <= opt.grad_tol && out.status != LbfgsStatus::line_search_failed)
        out.status = LbfgsStatus::converged;
    out.min_curvature = hist.min_curvature();
    return out;
}

} // namespace pilno
