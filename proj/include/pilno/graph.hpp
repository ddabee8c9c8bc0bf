#pragma once

// Reverse-mode autodiff over a small closed op set.
//
// A computation is a DAG of shared Node values built eagerly: every builder
// computes the result tensor immediately and records the inputs so a single
// numeric reverse pass can accumulate adjoints afterwards. Coordinate
// derivatives of a network are obtained by forward tangent propagation (jvp):
// each op's tangent rule is itself expressed with these ops, so a tangent is
// one more subgraph and the reverse pass differentiates through it — which is
// exactly what residual-based losses need.
//
// Any NaN/Inf produced by an op (forward or backward) raises NonFiniteError
// naming the first offending op.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "pilno/error.hpp"
#include "pilno/tensor.hpp"

namespace pilno {

enum class Op {
    leaf,
    add,
    mul,
    matmul,
    exp,
    cos,
    sin,
    square,
    scale,      // y = c * x
    clamp_max,  // y = min(x, c)
    step_below, // y = 1 if x < c else 0 (derivative treated as zero)
    norm_cdf,   // standard normal CDF, evaluated via erfc
    mean_last,  // mean over the last axis, kept as size-1 axis
    rsqrt_shift,// y = 1 / sqrt(x + c)
    mean_all,   // mean over all elements -> shape (1)
    concat_last,
    slice_last,
};

inline const char* op_name(Op op) {
    switch (op) {
        case Op::leaf: return "leaf";
        case Op::add: return "add";
        case Op::mul: return "mul";
        case Op::matmul: return "matmul";
        case Op::exp: return "exp";
        case Op::cos: return "cos";
        case Op::sin: return "sin";
        case Op::square: return "square";
        case Op::scale: return "scale";
        case Op::clamp_max: return "clamp_max";
        case Op::step_below: return "step_below";
        case Op::norm_cdf: return "norm_cdf";
        case Op::mean_last: return "mean_last";
        case Op::rsqrt_shift: return "rsqrt_shift";
        case Op::mean_all: return "mean_all";
        case Op::concat_last: return "concat_last";
        case Op::slice_last: return "slice_last";
    }
    return "?";
}

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
    Op op = Op::leaf;
    std::vector<NodePtr> inputs;
    Tensor value;
    bool requires_grad = false;
    double c = 0.0;               // scale factor / clamp bound / rsqrt shift
    std::size_t s0 = 0, s1 = 0;   // slice_last range [s0, s1)
    std::uint64_t id = 0;         // creation order; inputs always have smaller ids
    std::string label;            // leaf name or op name, for diagnostics
};

namespace detail {

inline std::uint64_t next_node_id() {
    static std::atomic<std::uint64_t> counter{0};
    return ++counter;
}

inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

inline void check_finite(const Tensor& t, const std::string& label) {
    if (!t.all_finite()) throw NonFiniteError(label);
}

// How the second operand of add/mul maps onto the first.
enum class Bcast {
    same,    // identical shapes
    scalar,  // single element applied everywhere
    last1,   // same rank, last dim 1, equal leading dims: per-position value
    suffix,  // shape is a strict suffix, tiled over leading axes
};

inline Bcast broadcast_kind(const Tensor& a, const Tensor& b, const char* who) {
    if (same_shape(a, b)) return Bcast::same;
    if (b.size() == 1) return Bcast::scalar;
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.size() == sb.size() && sb.back() == 1 &&
        std::equal(sa.begin(), sa.end() - 1, sb.begin())) return Bcast::last1;
    if (sb.size() < sa.size() && std::equal(sb.rbegin(), sb.rend(), sa.rbegin())) return Bcast::suffix;
    throw ShapeError(std::string(who) + ": cannot broadcast " + shape_str(sb) + " onto " + shape_str(sa));
}

// Index into b for element i of a.
inline std::size_t bcast_index(Bcast k, std::size_t i, std::size_t a_last, std::size_t b_size) {
    switch (k) {
        case Bcast::same: return i;
        case Bcast::scalar: return 0;
        case Bcast::last1: return i / a_last;
        case Bcast::suffix: return i % b_size;
    }
    return 0;
}

inline NodePtr make_node(Op op, std::vector<NodePtr> inputs, Tensor value, std::string label = {}) {
    auto n = std::make_shared<Node>();
    n->op = op;
    n->value = std::move(value);
    n->id = next_node_id();
    n->label = label.empty() ? op_name(op) : std::move(label);
    if (grad_mode()) {
        for (const auto& in : inputs) n->requires_grad = n->requires_grad || in->requires_grad;
        n->inputs = std::move(inputs);
    }
    check_finite(n->value, n->label);
    return n;
}

} // namespace detail

// Disables graph recording (and gradient tracking) while alive. Used for
// inference so intermediate tensors free as soon as their consumers are built.
class NoGradGuard {
public:
    NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGradGuard() { detail::grad_mode() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

// ---- leaves ---------------------------------------------------------------

inline NodePtr leaf(Tensor v, std::string name, bool requires_grad = true) {
    auto n = std::make_shared<Node>();
    n->op = Op::leaf;
    n->value = std::move(v);
    n->requires_grad = requires_grad && detail::grad_mode();
    n->id = detail::next_node_id();
    n->label = std::move(name);
    detail::check_finite(n->value, n->label);
    return n;
}

inline NodePtr constant(Tensor v, std::string name = "const") {
    return leaf(std::move(v), std::move(name), /*requires_grad=*/false);
}

inline double scalar_value(const NodePtr& n) {
    if (n->value.size() != 1) throw ShapeError("scalar_value: node has shape " + shape_str(n->value.shape()));
    return n->value[0];
}

// ---- primitive ops --------------------------------------------------------

inline NodePtr add(const NodePtr& a, const NodePtr& b) {
    const auto kind = detail::broadcast_kind(a->value, b->value, "add");
    Tensor out = a->value;
    const std::size_t last = out.last_dim(), bs = b->value.size();
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] += b->value[detail::bcast_index(kind, i, last, bs)];
    return detail::make_node(Op::add, {a, b}, std::move(out));
}

inline NodePtr mul(const NodePtr& a, const NodePtr& b) {
    const auto kind = detail::broadcast_kind(a->value, b->value, "mul");
    Tensor out = a->value;
    const std::size_t last = out.last_dim(), bs = b->value.size();
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] *= b->value[detail::bcast_index(kind, i, last, bs)];
    return detail::make_node(Op::mul, {a, b}, std::move(out));
}

inline NodePtr matmul(const NodePtr& a, const NodePtr& w) {
    return detail::make_node(Op::matmul, {a, w}, matmul(a->value, w->value));
}

namespace detail {
template <class F>
Tensor map_unary(const Tensor& x, F&& f) {
    Tensor out = x;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(out[i]);
    return out;
}
} // namespace detail

inline NodePtr exp_(const NodePtr& x) {
    return detail::make_node(Op::exp, {x}, detail::map_unary(x->value, [](double v) { return std::exp(v); }));
}

inline NodePtr cos_(const NodePtr& x) {
    return detail::make_node(Op::cos, {x}, detail::map_unary(x->value, [](double v) { return std::cos(v); }));
}

inline NodePtr sin_(const NodePtr& x) {
    return detail::make_node(Op::sin, {x}, detail::map_unary(x->value, [](double v) { return std::sin(v); }));
}

inline NodePtr square(const NodePtr& x) {
    return detail::make_node(Op::square, {x}, detail::map_unary(x->value, [](double v) { return v * v; }));
}

inline NodePtr scale(const NodePtr& x, double c) {
    auto n = detail::make_node(Op::scale, {x}, detail::map_unary(x->value, [c](double v) { return c * v; }));
    n->c = c;
    return n;
}

inline NodePtr clamp_max(const NodePtr& x, double c) {
    auto n = detail::make_node(Op::clamp_max, {x}, detail::map_unary(x->value, [c](double v) { return std::min(v, c); }));
    n->c = c;
    return n;
}

inline NodePtr step_below(const NodePtr& x, double c) {
    auto n = detail::make_node(Op::step_below, {x},
                               detail::map_unary(x->value, [c](double v) { return v < c ? 1.0 : 0.0; }));
    n->c = c;
    n->requires_grad = false; // piecewise constant
    return n;
}

// 0.5*erfc(-x/sqrt(2)): accurate in both tails, absolute error well below 1e-10.
inline double norm_cdf_value(double x) { return 0.5 * std::erfc(-x * M_SQRT1_2); }
inline double norm_pdf_value(double x) { return std::exp(-0.5 * x * x) * 0.3989422804014326779; }

inline NodePtr norm_cdf(const NodePtr& x) {
    return detail::make_node(Op::norm_cdf, {x}, detail::map_unary(x->value, norm_cdf_value));
}

inline NodePtr mean_last(const NodePtr& x) {
    const Tensor& v = x->value;
    const std::size_t d = v.last_dim(), rows = v.leading_size();
    Shape s = v.shape();
    s.back() = 1;
    Tensor out(std::move(s));
    for (std::size_t r = 0; r < rows; ++r) {
        double acc = 0.0;
        for (std::size_t j = 0; j < d; ++j) acc += v[r * d + j];
        out[r] = acc / static_cast<double>(d);
    }
    return detail::make_node(Op::mean_last, {x}, std::move(out));
}

inline NodePtr rsqrt_shift(const NodePtr& x, double c) {
    auto n = detail::make_node(Op::rsqrt_shift, {x},
                               detail::map_unary(x->value, [c](double v) { return 1.0 / std::sqrt(v + c); }));
    n->c = c;
    return n;
}

inline NodePtr mean_all(const NodePtr& x) {
    double acc = 0.0;
    for (std::size_t i = 0; i < x->value.size(); ++i) acc += x->value[i];
    return detail::make_node(Op::mean_all, {x}, Tensor::scalar(acc / static_cast<double>(x->value.size())));
}

inline NodePtr concat_last(const NodePtr& a, const NodePtr& b) {
    const Tensor& va = a->value;
    const Tensor& vb = b->value;
    if (va.rank() != vb.rank() ||
        !std::equal(va.shape().begin(), va.shape().end() - 1, vb.shape().begin()))
        throw ShapeError("concat_last: leading dims disagree, " + shape_str(va.shape()) + " vs " +
                         shape_str(vb.shape()));
    const std::size_t pa = va.last_dim(), pb = vb.last_dim(), rows = va.leading_size();
    Shape s = va.shape();
    s.back() = pa + pb;
    Tensor out(std::move(s));
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < pa; ++j) out[r * (pa + pb) + j] = va[r * pa + j];
        for (std::size_t j = 0; j < pb; ++j) out[r * (pa + pb) + pa + j] = vb[r * pb + j];
    }
    return detail::make_node(Op::concat_last, {a, b}, std::move(out));
}

inline NodePtr slice_last(const NodePtr& x, std::size_t from, std::size_t to) {
    const Tensor& v = x->value;
    const std::size_t d = v.last_dim();
    if (from >= to || to > d)
        throw ShapeError("slice_last: bad range [" + std::to_string(from) + "," + std::to_string(to) +
                         ") for last dim " + std::to_string(d));
    const std::size_t w = to - from, rows = v.leading_size();
    Shape s = v.shape();
    s.back() = w;
    Tensor out(std::move(s));
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < w; ++j) out[r * w + j] = v[r * d + from + j];
    auto n = detail::make_node(Op::slice_last, {x}, std::move(out));
    n->s0 = from;
    n->s1 = to;
    return n;
}

// ---- composites -----------------------------------------------------------

inline NodePtr sub(const NodePtr& a, const NodePtr& b) { return add(a, scale(b, -1.0)); }

// x * Phi(x); smooth, exact Gaussian CDF.
inline NodePtr gelu(const NodePtr& x) { return mul(x, norm_cdf(x)); }

// Per-position normalization over the last axis, no affine part.
inline NodePtr layer_norm(const NodePtr& x, double eps) {
    NodePtr mu = mean_last(x);
    NodePtr centred = sub(x, mu);
    NodePtr var = mean_last(square(centred));
    return mul(centred, rsqrt_shift(var, eps));
}

// max(0, x) == -min(-x, 0); keeps a usable derivative (1 for x > 0).
inline NodePtr positive_part(const NodePtr& x) { return scale(clamp_max(scale(x, -1.0), 0.0), -1.0); }

// ---- reverse pass ---------------------------------------------------------

namespace detail {

inline std::vector<NodePtr> reachable_sorted(const NodePtr& root, bool ascending) {
    std::vector<NodePtr> nodes;
    std::unordered_set<const Node*> seen;
    std::vector<NodePtr> stack{root};
    while (!stack.empty()) {
        NodePtr n = std::move(stack.back());
        stack.pop_back();
        if (!seen.insert(n.get()).second) continue;
        for (const auto& in : n->inputs) stack.push_back(in);
        nodes.push_back(std::move(n));
    }
    std::sort(nodes.begin(), nodes.end(), [ascending](const NodePtr& a, const NodePtr& b) {
        return ascending ? a->id < b->id : a->id > b->id;
    });
    return nodes;
}

struct AdjointMap {
    std::unordered_map<const Node*, Tensor> grads;

    Tensor* find(const Node* n) {
        auto it = grads.find(n);
        return it == grads.end() ? nullptr : &it->second;
    }

    void accumulate(const Node* n, Tensor g, const std::string& source) {
        check_finite(g, source + " (backward)");
        auto it = grads.find(n);
        if (it == grads.end()) {
            grads.emplace(n, std::move(g));
        } else {
            Tensor& acc = it->second;
            for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += g[i];
        }
    }
};

inline void backward_into(const NodePtr& n, const Tensor& g, AdjointMap& adj) {
    const std::string& who = n->label;
    switch (n->op) {
        case Op::leaf:
            return;
        case Op::add: {
            const NodePtr &a = n->inputs[0], &b = n->inputs[1];
            if (a->requires_grad) adj.accumulate(a.get(), g, who);
            if (b->requires_grad) {
                const auto kind = broadcast_kind(a->value, b->value, "add");
                Tensor gb(b->value.shape());
                const std::size_t last = a->value.last_dim(), bs = b->value.size();
                for (std::size_t i = 0; i < g.size(); ++i) gb[bcast_index(kind, i, last, bs)] += g[i];
                adj.accumulate(b.get(), std::move(gb), who);
            }
            return;
        }
        case Op::mul: {
            const NodePtr &a = n->inputs[0], &b = n->inputs[1];
            const auto kind = broadcast_kind(a->value, b->value, "mul");
            const std::size_t last = a->value.last_dim(), bs = b->value.size();
            if (a->requires_grad) {
                Tensor ga(a->value.shape());
                for (std::size_t i = 0; i < g.size(); ++i)
                    ga[i] = g[i] * b->value[bcast_index(kind, i, last, bs)];
                adj.accumulate(a.get(), std::move(ga), who);
            }
            if (b->requires_grad) {
                Tensor gb(b->value.shape());
                for (std::size_t i = 0; i < g.size(); ++i)
                    gb[bcast_index(kind, i, last, bs)] += g[i] * a->value[i];
                adj.accumulate(b.get(), std::move(gb), who);
            }
            return;
        }
        case Op::matmul: {
            const NodePtr &a = n->inputs[0], &w = n->inputs[1];
            const std::size_t rows = a->value.leading_size();
            const std::size_t k = w->value.dim(0), m = w->value.dim(1);
            EigenMapC G(g.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(m));
            EigenMapC A(a->value.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(k));
            EigenMapC W(w->value.data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(m));
            if (a->requires_grad) {
                Tensor ga(a->value.shape());
                EigenMap(ga.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(k)) =
                    G * W.transpose();
                adj.accumulate(a.get(), std::move(ga), who);
            }
            if (w->requires_grad) {
                Tensor gw(w->value.shape());
                EigenMap(gw.data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(m)) =
                    A.transpose() * G;
                adj.accumulate(w.get(), std::move(gw), who);
            }
            return;
        }
        case Op::exp: {
            const NodePtr& x = n->inputs[0];
            if (!x->requires_grad) return;
            Tensor gx(x->value.shape());
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] = g[i] * n->value[i];
            adj.accumulate(x.get(), std::move(gx), who);
            return;
        }
        case Op::cos: {
            const NodePtr& x = n->inputs[0];
            if (!x->requires_grad) return;
            Tensor gx(x->value.shape());
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] = -g[i] * std::sin(x->value[i]);
            adj.accumulate(x.get(), std::move(gx), who);
            return;
        }
        case Op::sin: {
            const NodePtr& x = n->inputs[0];
            if (!x->requires_grad) return;
            Tensor gx(x->value.shape());
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] = g[i] * std::cos(x->value[i]);
            adj.accumulate(x.get(), std::move(gx), who);
            return;
        }
        case Op::square: {
            const NodePtr& x = n->inputs[0];
            if (!x->requires_grad) return;
            Tensor gx(x->value.shape());
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] = 2.0 * g[i] * x->value[i];
            adj.accumulate(x.get(), std::move(gx), who);
            return;
        }
        case Op::scale: {
            const NodePtr& x = n->inputs[0];
            if (!x->requires_grad) return;
            Tensor gx(x->value.shape());
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] = n->c * g[i];
            adj.accumulate(x.get(), std::move(gx), who);
            return;
        }
        case Op::clamp_max: {
            const NodePtr& x = n->inputs[0];
            if (!x->requires_grad) return;
            Tensor gx(x->value.shape());
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] = x->value[i] < n->c ? g[i] : 0.0;
            adj.accumulate(x.get(), std::move(gx), who);
            return;
        }
        case Op::step_below:
            return;
        case Op::norm_cdf: {
            const NodePtr& x = n->inputs[0];
            if (!x->requires_grad) return;
            Tensor gx(x->value.shape());
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] = g[i] * norm_pdf_value(x->value[i]);
            adj.accumulate(x.get(), std::move(gx), who);
            return;
        }
        case Op::mean_last: {
            const NodePtr& x = n->inputs[0];
            if (!x->requires_grad) return;
            const std::size_t d = x->value.last_dim(), rows = x->value.leading_size();
            Tensor gx(x->value.shape());
            for (std::size_t r = 0; r < rows; ++r) {
                const double share = g[r] / static_cast<double>(d);
                for (std::size_t j = 0; j < d; ++j) gx[r * d + j] = share;
            }
            adj.accumulate(x.get(), std::move(gx), who);
            return;
        }
        case Op::rsqrt_shift: {
            const NodePtr& x = n->inputs[0];
            if (!x->requires_grad) return;
            Tensor gx(x->value.shape());
            for (std::size_t i = 0; i < g.size(); ++i) {
                const double y = n->value[i];
                gx[i] = -0.5 * g[i] * y * y * y;
            }
            adj.accumulate(x.get(), std::move(gx), who);
            return;
        }
        case Op::mean_all: {
            const NodePtr& x = n->inputs[0];
            if (!x->requires_grad) return;
            const double share = g[0] / static_cast<double>(x->value.size());
            Tensor gx(x->value.shape(), share);
            adj.accumulate(x.get(), std::move(gx), who);
            return;
        }
        case Op::concat_last: {
            const NodePtr &a = n->inputs[0], &b = n->inputs[1];
            const std::size_t pa = a->value.last_dim(), pb = b->value.last_dim();
            const std::size_t rows = a->value.leading_size();
            if (a->requires_grad) {
                Tensor ga(a->value.shape());
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < pa; ++j) ga[r * pa + j] = g[r * (pa + pb) + j];
                adj.accumulate(a.get(), std::move(ga), who);
            }
            if (b->requires_grad) {
                Tensor gb(b->value.shape());
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < pb; ++j) gb[r * pb + j] = g[r * (pa + pb) + pa + j];
                adj.accumulate(b.get(), std::move(gb), who);
            }
            return;
        }
        case Op::slice_last: {
            const NodePtr& x = n->inputs[0];
            if (!x->requires_grad) return;
            const std::size_t d = x->value.last_dim(), w = n->s1 - n->s0;
            const std::size_t rows = x->value.leading_size();
            Tensor gx(x->value.shape());
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < w; ++j) gx[r * d + n->s0 + j] = g[r * w + j];
            adj.accumulate(x.get(), std::move(gx), who);
            return;
        }
    }
}

} // namespace detail

// Adjoints of a scalar loss with respect to the given leaves. Accumulation
// order follows node creation order reversed, so results are bit-reproducible.
inline std::vector<Tensor> gradients(const NodePtr& loss, const std::vector<NodePtr>& wrt) {
    if (loss->value.size() != 1)
        throw ValidationError("gradients: loss must be scalar, got shape " + shape_str(loss->value.shape()));
    detail::AdjointMap adj;
    adj.grads.emplace(loss.get(), Tensor::scalar(1.0));
    for (const NodePtr& n : detail::reachable_sorted(loss, /*ascending=*/false)) {
        if (!n->requires_grad) continue;
        Tensor* g = adj.find(n.get());
        if (!g) continue; // not on any path that influences the loss
        detail::backward_into(n, *g, adj);
    }
    std::vector<Tensor> out;
    out.reserve(wrt.size());
    for (const NodePtr& n : wrt) {
        Tensor* g = adj.find(n.get());
        out.push_back(g ? std::move(*g) : Tensor(n->value.shape()));
    }
    return out;
}

// ---- forward tangent propagation ------------------------------------------

namespace detail {

inline NodePtr zeros_like(const NodePtr& n) { return constant(Tensor(n->value.shape()), "zeros"); }

} // namespace detail

// Propagates directional derivatives (tangents) from seed leaves through the
// graph that computed `output`. The returned node evaluates J·v where v is the
// seeded direction — and since it is built from ordinary ops, a later reverse
// pass can differentiate through it.
inline NodePtr jvp(const NodePtr& output, const std::unordered_map<const Node*, NodePtr>& seeds) {
    std::unordered_map<const Node*, NodePtr> tan;
    for (const NodePtr& n : detail::reachable_sorted(output, /*ascending=*/true)) {
        NodePtr t; // null means identically-zero tangent
        auto in_tan = [&](std::size_t i) -> NodePtr {
            auto it = tan.find(n->inputs[i].get());
            return it == tan.end() ? nullptr : it->second;
        };
        switch (n->op) {
            case Op::leaf: {
                auto it = seeds.find(n.get());
                if (it != seeds.end()) t = it->second;
                break;
            }
            case Op::add: {
                NodePtr ta = in_tan(0), tb = in_tan(1);
                if (ta && tb) t = add(ta, tb);
                else if (ta) t = ta;
                else if (tb) t = same_shape(n->inputs[0]->value, n->inputs[1]->value)
                                 ? tb
                                 : add(detail::zeros_like(n->inputs[0]), tb);
                break;
            }
            case Op::mul: {
                NodePtr ta = in_tan(0), tb = in_tan(1);
                NodePtr t1 = ta ? mul(ta, n->inputs[1]) : nullptr;
                NodePtr t2 = tb ? mul(n->inputs[0], tb) : nullptr;
                t = (t1 && t2) ? add(t1, t2) : (t1 ? t1 : t2);
                break;
            }
            case Op::matmul: {
                NodePtr ta = in_tan(0), tw = in_tan(1);
                NodePtr t1 = ta ? matmul(ta, n->inputs[1]) : nullptr;
                NodePtr t2 = tw ? matmul(n->inputs[0], tw) : nullptr;
                t = (t1 && t2) ? add(t1, t2) : (t1 ? t1 : t2);
                break;
            }
            case Op::exp:
                if (NodePtr tx = in_tan(0)) t = mul(n, tx);
                break;
            case Op::cos:
                if (NodePtr tx = in_tan(0)) t = scale(mul(sin_(n->inputs[0]), tx), -1.0);
                break;
            case Op::sin:
                if (NodePtr tx = in_tan(0)) t = mul(cos_(n->inputs[0]), tx);
                break;
            case Op::square:
                if (NodePtr tx = in_tan(0)) t = mul(scale(n->inputs[0], 2.0), tx);
                break;
            case Op::scale:
                if (NodePtr tx = in_tan(0)) t = scale(tx, n->c);
                break;
            case Op::clamp_max:
                if (NodePtr tx = in_tan(0)) t = mul(step_below(n->inputs[0], n->c), tx);
                break;
            case Op::step_below:
                break; // piecewise constant
            case Op::norm_cdf:
                if (NodePtr tx = in_tan(0)) {
                    NodePtr pdf = scale(exp_(scale(square(n->inputs[0]), -0.5)), 0.3989422804014326779);
                    t = mul(pdf, tx);
                }
                break;
            case Op::mean_last:
                if (NodePtr tx = in_tan(0)) t = mean_last(tx);
                break;
            case Op::rsqrt_shift:
                if (NodePtr tx = in_tan(0)) t = mul(scale(mul(mul(n, n), n), -0.5), tx);
                break;
            case Op::mean_all:
                if (NodePtr tx = in_tan(0)) t = mean_all(tx);
                break;
            case Op::concat_last: {
                NodePtr ta = in_tan(0), tb = in_tan(1);
                if (ta || tb)
                    t = concat_last(ta ? ta : detail::zeros_like(n->inputs[0]),
                                    tb ? tb : detail::zeros_like(n->inputs[1]));
                break;
            }
            case Op::slice_last:
                if (NodePtr tx = in_tan(0)) t = slice_last(tx, n->s0, n->s1);
                break;
        }
        if (t) tan.emplace(n.get(), std::move(t));
    }
    auto it = tan.find(output.get());
    return it == tan.end() ? detail::zeros_like(output) : it->second;
}

} // namespace pilno
