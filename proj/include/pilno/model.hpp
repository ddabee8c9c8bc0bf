#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "pilno/dataset.hpp"
#include "pilno/error.hpp"
#include "pilno/graph.hpp"
#include "pilno/rng.hpp"
#include "pilno/tensor.hpp"

namespace pilno {

// ---------------------------------------------------------------------------
// Architecture configuration and parameters
// ---------------------------------------------------------------------------

struct ModelConfig {
    std::size_t d_v = 256; // channel width
    std::size_t L = 8;     // number of projection layers
    std::size_t M = 64;    // poles per layer
};

inline void validate(const ModelConfig& c) {
    if (c.d_v < 1 || c.L < 1 || c.M < 1)
        throw ValidationError("model config: d_v, L, M must all be >= 1");
}

// One spectral projection layer: M learnable complex poles
// s_m = -sigma_m + i omega_m (sigma_m = exp(log_sigma_m) > 0 keeps every pole
// in the decaying half-plane), channel mixers for the real/imaginary kernel
// responses, a local linear path, and the post-activation LayerNorm affine.
struct LayerParams {
    Tensor log_sigma; // (1, M)
    Tensor omega;     // (1, M)
    Tensor W_real;    // (d_v, M)
    Tensor W_imag;    // (d_v, M)
    Tensor W_loc;     // (d_v, d_v)
    Tensor W_ker;     // (2M, d_v)
    Tensor b_ker;     // (d_v)
    Tensor ln_gain;   // (d_v)
    Tensor ln_bias;   // (d_v)
};

struct ModelParams {
    ModelConfig config;
    std::uint64_t seed = 0;
    Tensor W_lift;  // (5, d_v)
    Tensor b_lift;  // (d_v)
    std::vector<LayerParams> layers;
    Tensor W_proj1; // (d_v, d_v)
    Tensor b_proj1; // (d_v)
    Tensor W_proj2; // (d_v, 4)
    Tensor b_proj2; // (4)
};

// Total trainable scalar count implied by the config.
inline std::size_t param_count(const ModelConfig& c) {
    const std::size_t d = c.d_v, M = c.M;
    const std::size_t lift = 5 * d + d;
    const std::size_t per_layer = M + M + d * M + d * M + d * d + 2 * M * d + d + d + d;
    const std::size_t head = (d * d + d) + (d * 4 + 4);
    return lift + c.L * per_layer + head;
}

// Canonical parameter ordering. Everything that walks parameters — init,
// optimizers, gradients, checkpoints — uses this order.
inline std::vector<std::string> parameter_names(const ModelConfig& c) {
    std::vector<std::string> names{"W_lift", "b_lift"};
    for (std::size_t l = 0; l < c.L; ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        for (const char* f : {"log_sigma", "omega", "W_real", "W_imag", "W_loc", "W_ker", "b_ker",
                              "ln_gain", "ln_bias"})
            names.push_back(p + f);
    }
    names.push_back("W_proj1");
    names.push_back("b_proj1");
    names.push_back("W_proj2");
    names.push_back("b_proj2");
    return names;
}

inline std::vector<Tensor*> collect_parameters(ModelParams& p) {
    std::vector<Tensor*> out{&p.W_lift, &p.b_lift};
    for (auto& l : p.layers) {
        out.push_back(&l.log_sigma);
        out.push_back(&l.omega);
        out.push_back(&l.W_real);
        out.push_back(&l.W_imag);
        out.push_back(&l.W_loc);
        out.push_back(&l.W_ker);
        out.push_back(&l.b_ker);
        out.push_back(&l.ln_gain);
        out.push_back(&l.ln_bias);
    }
    out.push_back(&p.W_proj1);
    out.push_back(&p.b_proj1);
    out.push_back(&p.W_proj2);
    out.push_back(&p.b_proj2);
    return out;
}

inline std::vector<const Tensor*> collect_parameters(const ModelParams& p) {
    auto& mut = const_cast<ModelParams&>(p);
    std::vector<const Tensor*> out;
    for (Tensor* t : collect_parameters(mut)) out.push_back(t);
    return out;
}

// Deterministic initialization: weight matrices are uniform with the
// fan-balanced bound sqrt(6 / (fan_in + fan_out)); pole decay rates are
// log-uniform over [1e-2, 1e2]; frequencies uniform over (-pi, pi); biases
// and LayerNorm offsets start at zero, gains at one. All draws come from one
// seeded stream in canonical parameter order, so a seed fully determines the
// parameters.
inline ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
    validate(cfg);
    const std::size_t d = cfg.d_v, M = cfg.M;
    Rng rng(seed);
    auto xavier = [&rng](Shape shape, std::size_t fan_in, std::size_t fan_out) {
        const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
        Tensor t(std::move(shape));
        for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-bound, bound);
        return t;
    };

    ModelParams p;
    p.config = cfg;
    p.seed = seed;
    p.W_lift = xavier(Shape{5, d}, 5, d);
    p.b_lift = Tensor(Shape{d});
    p.layers.resize(cfg.L);
    for (auto& l : p.layers) {
        l.log_sigma = Tensor(Shape{1, M});
        for (std::size_t i = 0; i < M; ++i) l.log_sigma[i] = rng.uniform(std::log(1e-2), std::log(1e2));
        l.omega = Tensor(Shape{1, M});
        for (std::size_t i = 0; i < M; ++i) l.omega[i] = rng.uniform(-kPi, kPi);
        l.W_real = xavier(Shape{d, M}, d, M);
        l.W_imag = xavier(Shape{d, M}, d, M);
        l.W_loc = xavier(Shape{d, d}, d, d);
        l.W_ker = xavier(Shape{2 * M, d}, 2 * M, d);
        l.b_ker = Tensor(Shape{d});
        l.ln_gain = Tensor(Shape{d}, 1.0);
        l.ln_bias = Tensor(Shape{d});
    }
    p.W_proj1 = xavier(Shape{d, d}, d, d);
    p.b_proj1 = Tensor(Shape{d});
    p.W_proj2 = xavier(Shape{d, 4}, d, 4);
    p.b_proj2 = Tensor(Shape{4});
    return p;
}

// ---------------------------------------------------------------------------
// Input encoding
// ---------------------------------------------------------------------------

// Counts coordinates that fell outside the training range and were clamped.
struct ClampCounter {
    std::size_t count = 0;
};

// [x~, y~, t~, cos(theta), sin(theta)] with coordinates min-max mapped to
// [-1, 1] (clamped, counted) and the angle converted from degrees.
inline std::array<double, 5> encode_input(const NormStats& stats, double x, double y, double t,
                                          double theta_deg, ClampCounter* warn = nullptr) {
    std::array<double, 5> out{};
    const std::array<double, 3> raw{x, y, t};
    for (std::size_t i = 0; i < 3; ++i) {
        double u = minmax_scale(raw[i], stats.in_min[i], stats.in_max[i]);
        if (u < -1.0 || u > 1.0) {
            u = std::clamp(u, -1.0, 1.0);
            if (warn) ++warn->count;
        }
        out[i] = u;
    }
    const double theta = theta_deg * kPi / 180.0;
    out[3] = std::cos(theta);
    out[4] = std::sin(theta);
    return out;
}

// Encode B*N query points (condition-major order) into a (B, N, 5) tensor.
inline Tensor encode_coords(const NormStats& stats, const std::vector<QueryPoint>& pts, std::size_t B,
                            std::size_t N, ClampCounter* warn = nullptr) {
    if (B * N != pts.size())
        throw ShapeError("encode_coords: " + std::to_string(pts.size()) + " points do not fill (" +
                         std::to_string(B) + "," + std::to_string(N) + ")");
    Tensor out(Shape{B, N, 5});
    for (std::size_t i = 0; i < pts.size(); ++i) {
        const auto e = encode_input(stats, pts[i].x, pts[i].y, pts[i].t, pts[i].theta_s, warn);
        for (std::size_t c = 0; c < 5; ++c) out[i * 5 + c] = e[c];
    }
    return out;
}

// ---------------------------------------------------------------------------
// Forward graph
// ---------------------------------------------------------------------------

// Kernel evaluation time t_k = (t~ + 1) / 2 in [0, 1], derived in-graph from
// coordinate channel 2 so time derivatives flow through the kernels.
inline NodePtr kernel_time_from_coords(const NodePtr& coords) {
    NodePtr t_norm = slice_last(coords, 2, 3);
    return scale(add(t_norm, constant(Tensor::scalar(1.0), "one")), 0.5);
}

// Damped oscillatory kernels of the layer's poles evaluated at t_k:
// K_real = e^{-sigma t_k} cos(omega t_k), K_imag = e^{-sigma t_k} sin(omega t_k).
// The decay exponent is clamped at 50 before negation, so kernels stay in
// [-1, 1] and never underflow to denormals.
inline std::pair<NodePtr, NodePtr> laplace_kernel(const NodePtr& log_sigma, const NodePtr& omega,
                                                  const NodePtr& t_k) {
    NodePtr sigma = exp_(log_sigma);
    NodePtr st = clamp_max(matmul(t_k, sigma), 50.0);
    NodePtr damp = exp_(scale(st, -1.0));
    NodePtr phase = matmul(t_k, omega);
    return {mul(damp, cos_(phase)), mul(damp, sin_(phase))};
}

inline constexpr double kLayerNormEps = 1e-5;

struct ForwardGraph {
    NodePtr coords;              // (B, N, 5) leaf
    NodePtr kernel_time;         // (B, N, 1)
    NodePtr output;              // (B, N, 4), normalized field units
    std::vector<NodePtr> params; // leaves in canonical order
};

// Build the full computation graph. Parameter leaves are created from the
// current tensor values in canonical order; `coords_grad` additionally makes
// the coordinate input differentiable (needed for coordinate tangents).
inline ForwardGraph build_forward(const ModelParams& p, Tensor coords, bool coords_grad = false) {
    validate(p.config);
    if (coords.rank() != 3 || coords.last_dim() != 5)
        throw ShapeError("forward: coords must be (B, N, 5), got " + shape_str(coords.shape()));

    ForwardGraph g;
    g.coords = leaf(std::move(coords), "coords", coords_grad);

    const auto names = parameter_names(p.config);
    const auto tensors = collect_parameters(p);
    g.params.reserve(tensors.size());
    for (std::size_t i = 0; i < tensors.size(); ++i) g.params.push_back(leaf(*tensors[i], names[i]));

    std::size_t idx = 0;
    auto next = [&]() { return g.params[idx++]; };

    NodePtr w_lift = next(), b_lift = next();
    g.kernel_time = kernel_time_from_coords(g.coords);
    NodePtr v = gelu(add(matmul(g.coords, w_lift), b_lift));

    for (std::size_t l = 0; l < p.config.L; ++l) {
        NodePtr log_sigma = next(), omega = next(), w_real = next(), w_imag = next(), w_loc = next(),
                w_ker = next(), b_ker = next(), ln_gain = next(), ln_bias = next();
        auto [k_real, k_imag] = laplace_kernel(log_sigma, omega, g.kernel_time);
        NodePtr p_real = mul(matmul(v, w_real), k_real);
        NodePtr p_imag = mul(matmul(v, w_imag), k_imag);
        NodePtr z = concat_last(p_real, p_imag);
        NodePtr k = add(matmul(z, w_ker), b_ker);
        NodePtr local = matmul(v, w_loc);
        NodePtr pre = gelu(add(local, k));
        v = add(mul(layer_norm(pre, kLayerNormEps), ln_gain), ln_bias);
    }

    NodePtr w1 = next(), b1 = next(), w2 = next(), b2 = next();
    g.output = add(matmul(gelu(add(matmul(v, w1), b1)), w2), b2);
    return g;
}

// Inference-only forward: no graph is recorded, just the output values.
inline Tensor forward(const ModelParams& p, const Tensor& coords) {
    NoGradGuard guard;
    return build_forward(p, coords).output->value;
}

// Tangent of the output along one input channel: d(output) / d(coords[..., channel]),
// shape (B, N, 4), as a graph node (so it can feed a differentiable loss).
inline NodePtr coordinate_tangent(const ForwardGraph& g, std::size_t channel) {
    if (channel >= 5) throw ValidationError("coordinate_tangent: channel must be < 5");
    const Shape& s = g.coords->value.shape();
    Tensor seed(s);
    for (std::size_t i = 0; i < seed.size(); i += 5) seed[i + channel] = 1.0;
    std::unordered_map<const Node*, NodePtr> seeds{{g.coords.get(), constant(std::move(seed), "onehot")}};
    return jvp(g.output, seeds);
}

// All five coordinate tangents evaluated at a batch: out[c] has shape
// (B, N, 4) and holds the derivative of each output w.r.t. input channel c
// (in normalized units).
inline std::array<Tensor, 5> input_jacobian(const ModelParams& p, const Tensor& coords) {
    ForwardGraph g = build_forward(p, coords, /*coords_grad=*/true);
    std::array<Tensor, 5> out;
    for (std::size_t c = 0; c < 5; ++c) out[c] = coordinate_tangent(g, c)->value;
    return out;
}

} // namespace pilno
