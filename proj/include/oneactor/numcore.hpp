#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "oneactor/errors.hpp"
#include "oneactor/rng.hpp"

namespace oneactor {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using RowMajorMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Named, row-major parameter block.
struct ParamTensor {
    std::string name;
    std::vector<std::size_t> shape;
    std::vector<double> data;

    std::size_t numel() const {
        return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
    }
    bool consistent() const { return numel() == data.size(); }
    bool operator==(const ParamTensor&) const = default;
};

using ParamSet = std::vector<ParamTensor>;

inline ParamSet zeros_like(const ParamSet& params) {
    ParamSet out = params;
    for (auto& p : out) std::fill(p.data.begin(), p.data.end(), 0.0);
    return out;
}

inline bool all_finite(const ParamSet& params) {
    for (const auto& p : params)
        for (double x : p.data)
            if (!std::isfinite(x)) return false;
    return true;
}

inline Eigen::Map<const RowMajorMatrix> as_matrix(const ParamTensor& p) {
    return {p.data.data(), static_cast<Eigen::Index>(p.shape.at(0)), static_cast<Eigen::Index>(p.shape.at(1))};
}
inline Eigen::Map<RowMajorMatrix> as_matrix(ParamTensor& p) {
    return {p.data.data(), static_cast<Eigen::Index>(p.shape.at(0)), static_cast<Eigen::Index>(p.shape.at(1))};
}
inline Eigen::Map<const Vector> as_vector(const ParamTensor& p) {
    return {p.data.data(), static_cast<Eigen::Index>(p.data.size())};
}
inline Eigen::Map<Vector> as_vector(ParamTensor& p) {
    return {p.data.data(), static_cast<Eigen::Index>(p.data.size())};
}

inline Vector to_vector(std::span<const double> xs) {
    return Eigen::Map<const Vector>(xs.data(), static_cast<Eigen::Index>(xs.size()));
}
inline std::vector<double> to_std(const Vector& v) { return {v.data(), v.data() + v.size()}; }

// ---------------------------------------------------------------------------
// Activations

enum class Activation { SiLU, Tanh };

inline double activate(Activation a, double x) {
    switch (a) {
    case Activation::SiLU: return x / (1.0 + std::exp(-x));
    case Activation::Tanh: return std::tanh(x);
    }
    return x;
}

inline double activate_deriv(Activation a, double x) {
    switch (a) {
    case Activation::SiLU: {
        const double s = 1.0 / (1.0 + std::exp(-x));
        return s * (1.0 + x * (1.0 - s));
    }
    case Activation::Tanh: {
        const double t = std::tanh(x);
        return 1.0 - t * t;
    }
    }
    return 1.0;
}

// ---------------------------------------------------------------------------
// Multi-layer perceptron

/// Fully connected network. layer_widths = {input, hidden..., output}; the
/// activation follows every layer except the last, which stays linear.
struct MlpSpec {
    std::vector<std::size_t> layer_widths;
    Activation activation = Activation::SiLU;
    /// Hidden layer exported as the feature vector; empty for a network
    /// without hidden layers.
    std::optional<std::size_t> feature_layer_index;

    std::size_t num_layers() const { return layer_widths.empty() ? 0 : layer_widths.size() - 1; }
    std::size_t num_hidden() const { return num_layers() == 0 ? 0 : num_layers() - 1; }
    std::size_t input_width() const { return layer_widths.front(); }
    std::size_t output_width() const { return layer_widths.back(); }
    bool operator==(const MlpSpec&) const = default;

    void validate() const {
        if (layer_widths.size() < 2) throw std::invalid_argument("MlpSpec: need at least input and output widths");
        for (std::size_t w : layer_widths)
            if (w == 0) throw std::invalid_argument("MlpSpec: layer widths must be positive");
        if (feature_layer_index && *feature_layer_index >= num_hidden())
            throw std::invalid_argument("MlpSpec: feature_layer_index " + std::to_string(*feature_layer_index) +
                                        " is not a hidden layer");
    }
};

inline std::string weight_name(std::size_t layer) { return "W" + std::to_string(layer); }
inline std::string bias_name(std::size_t layer) { return "b" + std::to_string(layer); }

/// Checks that params hold W0,b0,W1,b1,... with shapes matching the spec.
inline void validate_mlp_params(const MlpSpec& spec, const ParamSet& params) {
    spec.validate();
    if (params.size() != 2 * spec.num_layers())
        throw std::invalid_argument("mlp: expected " + std::to_string(2 * spec.num_layers()) + " parameter tensors, got " +
                                    std::to_string(params.size()));
    for (std::size_t l = 0; l < spec.num_layers(); ++l) {
        const auto& w = params[2 * l];
        const auto& b = params[2 * l + 1];
        const std::vector<std::size_t> ws{spec.layer_widths[l + 1], spec.layer_widths[l]};
        const std::vector<std::size_t> bs{spec.layer_widths[l + 1]};
        if (w.shape != ws || !w.consistent())
            throw std::invalid_argument("mlp: layer " + std::to_string(l) + " weight has wrong shape");
        if (b.shape != bs || !b.consistent())
            throw std::invalid_argument("mlp: layer " + std::to_string(l) + " bias has wrong shape");
    }
}

/// Glorot-uniform weights (a = sqrt(6 / (fan_in + fan_out))), zero biases.
inline ParamSet init_mlp(const MlpSpec& spec, Rng& rng) {
    spec.validate();
    ParamSet params;
    for (std::size_t l = 0; l < spec.num_layers(); ++l) {
        const std::size_t fan_in = spec.layer_widths[l];
        const std::size_t fan_out = spec.layer_widths[l + 1];
        const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
        ParamTensor w{weight_name(l), {fan_out, fan_in}, std::vector<double>(fan_in * fan_out)};
        for (double& x : w.data) x = a * (2.0 * rng.uniform() - 1.0);
        params.push_back(std::move(w));
        params.push_back(ParamTensor{bias_name(l), {fan_out}, std::vector<double>(fan_out, 0.0)});
    }
    return params;
}

/// Intermediate values of a batched forward pass, kept for backprop.
/// post[0] is the input; post[l + 1] is the output of layer l (activated for
/// hidden layers, raw for the last).
struct MlpTrace {
    std::vector<Matrix> pre;
    std::vector<Matrix> post;
};

/// Batched forward pass. Columns of `input` are samples. Starts at
/// `first_layer`, so a hidden activation can be pushed through the rest of
/// the network.
inline Matrix mlp_forward_batch(const MlpSpec& spec, const ParamSet& params, const Matrix& input,
                                MlpTrace* trace = nullptr, std::size_t first_layer = 0) {
    if (first_layer >= spec.num_layers()) throw std::invalid_argument("mlp: first_layer out of range");
    if (static_cast<std::size_t>(input.rows()) != spec.layer_widths[first_layer])
        throw std::invalid_argument("mlp: layer " + std::to_string(first_layer) + " expects input width " +
                                    std::to_string(spec.layer_widths[first_layer]) + ", got " +
                                    std::to_string(input.rows()));
    if (trace) {
        trace->pre.clear();
        trace->post.clear();
        trace->post.push_back(input);
    }
    Matrix x = input;
    for (std::size_t l = first_layer; l < spec.num_layers(); ++l) {
        Matrix z = as_matrix(params[2 * l]) * x;
        z.colwise() += as_vector(params[2 * l + 1]);
        if (l + 1 < spec.num_layers()) {
            x = z.unaryExpr([a = spec.activation](double v) { return activate(a, v); });
        } else {
            x = z;
        }
        if (trace) {
            trace->pre.push_back(std::move(z));
            trace->post.push_back(x);
        }
    }
    return x;
}

/// Batched reverse pass for the trace of a forward pass that started at
/// layer 0. Parameter gradients of sum_b upstream[:, b] . output[:, b] are
/// accumulated into `param_grads` (which must be shaped like params) and the
/// input gradient is written to `input_grad`. Either may be null.
inline void mlp_backward_batch(const MlpSpec& spec, const ParamSet& params, const MlpTrace& trace,
                               const Matrix& upstream, ParamSet* param_grads, Matrix* input_grad) {
    const std::size_t L = spec.num_layers();
    if (trace.pre.size() != L) throw std::invalid_argument("mlp backward: trace does not cover all layers");
    if (static_cast<std::size_t>(upstream.rows()) != spec.output_width() || upstream.cols() != trace.post[0].cols())
        throw std::invalid_argument("mlp backward: upstream gradient shape does not match output");
    Matrix delta = upstream;
    for (std::size_t l = L; l-- > 0;) {
        if (l + 1 < L) {
            delta.array() *= trace.pre[l].unaryExpr([a = spec.activation](double v) { return activate_deriv(a, v); }).array();
        }
        if (param_grads) {
            as_matrix((*param_grads)[2 * l]).noalias() += delta * trace.post[l].transpose();
            as_vector((*param_grads)[2 * l + 1]) += delta.rowwise().sum();
        }
        if (l > 0 || input_grad) {
            Matrix next = as_matrix(params[2 * l]).transpose() * delta;
            if (l == 0) {
                *input_grad = std::move(next);
            } else {
                delta = std::move(next);
            }
        }
    }
}

struct MlpForward {
    Vector output;
    std::vector<Vector> hiddens;
};

inline MlpForward mlp_forward(const MlpSpec& spec, const ParamSet& params, std::span<const double> input) {
    validate_mlp_params(spec, params);
    MlpTrace trace;
    Matrix out = mlp_forward_batch(spec, params, to_vector(input), &trace);
    MlpForward result{out.col(0), {}};
    for (std::size_t l = 0; l + 1 < spec.num_layers(); ++l) result.hiddens.push_back(trace.post[l + 1].col(0));
    return result;
}

struct MlpGradients {
    ParamSet param_grads;
    Vector input_grad;
};

/// Exact gradients of upstream . output with respect to every parameter and
/// the input.
inline MlpGradients mlp_backward(const MlpSpec& spec, const ParamSet& params, std::span<const double> input,
                                 std::span<const double> upstream) {
    validate_mlp_params(spec, params);
    if (upstream.size() != spec.output_width())
        throw std::invalid_argument("mlp backward: upstream gradient has length " + std::to_string(upstream.size()) +
                                    ", output width is " + std::to_string(spec.output_width()));
    MlpTrace trace;
    mlp_forward_batch(spec, params, to_vector(input), &trace);
    MlpGradients g{zeros_like(params), {}};
    Matrix in_grad;
    mlp_backward_batch(spec, params, trace, to_vector(upstream), &g.param_grads, &in_grad);
    g.input_grad = in_grad.col(0);
    return g;
}

// ---------------------------------------------------------------------------
// AdamW

struct AdamWConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

struct AdamWState {
    std::vector<std::vector<double>> first_moment;
    std::vector<std::vector<double>> second_moment;
    std::uint64_t step_count = 0;

    static AdamWState zeros_like(const ParamSet& params) {
        AdamWState s;
        for (const auto& p : params) {
            s.first_moment.emplace_back(p.data.size(), 0.0);
            s.second_moment.emplace_back(p.data.size(), 0.0);
        }
        return s;
    }
    bool operator==(const AdamWState&) const = default;
};

/// One AdamW update with decoupled weight decay:
///   p <- p - lr*wd*p - lr * mhat / (sqrt(vhat) + eps).
/// A non-finite gradient throws NumericError before anything is modified.
inline void adamw_step(ParamSet& params, const ParamSet& grads, AdamWState& state, const AdamWConfig& cfg) {
    if (grads.size() != params.size()) throw std::invalid_argument("adamw: gradient set does not match parameters");
    if (state.first_moment.empty()) state = AdamWState::zeros_like(params);
    if (state.first_moment.size() != params.size())
        throw std::invalid_argument("adamw: optimizer state does not match parameters");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (grads[i].data.size() != params[i].data.size() || state.first_moment[i].size() != params[i].data.size())
            throw std::invalid_argument("adamw: shape mismatch for " + params[i].name);
        for (double g : grads[i].data)
            if (!std::isfinite(g)) throw NumericError("adamw: non-finite gradient for " + params[i].name);
    }
    state.step_count += 1;
    const double t = static_cast<double>(state.step_count);
    const double bc1 = 1.0 - std::pow(cfg.beta1, t);
    const double bc2 = 1.0 - std::pow(cfg.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i].data;
        const auto& g = grads[i].data;
        auto& m = state.first_moment[i];
        auto& v = state.second_moment[i];
        for (std::size_t j = 0; j < p.size(); ++j) {
            p[j] -= cfg.lr * cfg.weight_decay * p[j];
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            p[j] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
        }
    }
    if (!all_finite(params)) throw NumericError("adamw: parameters became non-finite");
}

} // namespace oneactor
