#pragma once

// Feed-forward tanh MLPs with analytic reverse- and forward-mode derivatives,
// diagonal Gaussian heads and an adaptive-moment optimizer.
//
// Batched routines take inputs as (features x batch) matrices, one sample per column.
// Flat parameter layout: layers in order, each layer's weights row-major followed by
// its biases; for a Gaussian head the log-std entries come last.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "demer/core.hpp"

namespace demer::nn {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline constexpr double kLogStdMin = -10.0;
inline constexpr double kLogStdMax = 2.0;
inline constexpr double kHalfLog2Pi = 0.91893853320467274178;  // 0.5 * ln(2*pi)

struct MlpParams {
    std::vector<int> layer_sizes;
    std::vector<RowMatrix> weights;  // weights[i] is layer_sizes[i+1] x layer_sizes[i]
    std::vector<VectorXd> biases;

    MlpParams() = default;

    /// All-zero parameters for the given architecture.
    explicit MlpParams(std::vector<int> sizes) : layer_sizes(std::move(sizes)) {
        if (layer_sizes.size() < 2) throw DimensionError("MlpParams: need at least input and output sizes");
        for (std::size_t i = 0; i + 1 < layer_sizes.size(); ++i) {
            if (layer_sizes[i] <= 0 || layer_sizes[i + 1] <= 0)
                throw DimensionError("MlpParams: layer sizes must be positive");
            weights.emplace_back(RowMatrix::Zero(layer_sizes[i + 1], layer_sizes[i]));
            biases.emplace_back(VectorXd::Zero(layer_sizes[i + 1]));
        }
    }

    /// Uniform +-sqrt(6/(fan_in+fan_out)) weights, zero biases.
    static MlpParams glorot(std::vector<int> sizes, Rng& rng) {
        MlpParams p(std::move(sizes));
        for (std::size_t l = 0; l < p.weights.size(); ++l) {
            const double lim = std::sqrt(6.0 / (p.layer_sizes[l] + p.layer_sizes[l + 1]));
            auto& w = p.weights[l];
            for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = uniform(rng, -lim, lim);
        }
        return p;
    }

    int input_dim() const { return layer_sizes.front(); }
    int output_dim() const { return layer_sizes.back(); }
    std::size_t num_layers() const { return weights.size(); }

    std::size_t param_count() const {
        std::size_t n = 0;
        for (std::size_t l = 0; l < weights.size(); ++l) n += weights[l].size() + biases[l].size();
        return n;
    }

    void validate() const {
        if (weights.size() + 1 != layer_sizes.size() || biases.size() != weights.size())
            throw DimensionError("MlpParams: layer count disagrees with layer_sizes");
        for (std::size_t l = 0; l < weights.size(); ++l) {
            if (weights[l].rows() != layer_sizes[l + 1] || weights[l].cols() != layer_sizes[l] ||
                biases[l].size() != layer_sizes[l + 1])
                throw DimensionError("MlpParams: layer " + std::to_string(l) + " has inconsistent shape");
        }
    }
};

// ---------------------------------------------------------------------------
// flat parameter views

inline void write_flat(const MlpParams& p, double* out) {
    for (std::size_t l = 0; l < p.weights.size(); ++l) {
        out = std::copy_n(p.weights[l].data(), p.weights[l].size(), out);
        out = std::copy_n(p.biases[l].data(), p.biases[l].size(), out);
    }
}

inline void read_flat(MlpParams& p, const double* in) {
    for (std::size_t l = 0; l < p.weights.size(); ++l) {
        std::copy_n(in, p.weights[l].size(), p.weights[l].data());
        in += p.weights[l].size();
        std::copy_n(in, p.biases[l].size(), p.biases[l].data());
        in += p.biases[l].size();
    }
}

inline VectorXd flatten_params(const MlpParams& p) {
    VectorXd flat(static_cast<Eigen::Index>(p.param_count()));
    write_flat(p, flat.data());
    return flat;
}

inline MlpParams unflatten_params(std::span<const double> flat, const MlpParams& layout) {
    if (flat.size() != layout.param_count())
        throw DimensionError("unflatten_params: expected " + std::to_string(layout.param_count()) +
                             " values, got " + std::to_string(flat.size()));
    MlpParams p = layout;
    read_flat(p, flat.data());
    return p;
}

// ---------------------------------------------------------------------------
// forward / backward / forward-mode

/// Per-layer activations kept for derivative passes. activations[0] is the input,
/// activations[l+1] the output of layer l (tanh for hidden layers, affine for the last).
struct MlpTape {
    std::vector<MatrixXd> activations;
};

/// tanh via the vectorized exponential; absolute error stays at rounding level.
inline void tanh_in_place(MatrixXd& z) { z = 1.0 - 2.0 / ((2.0 * z.array()).exp() + 1.0); }

inline MatrixXd forward(const MlpParams& p, const MatrixXd& x, MlpTape* tape = nullptr) {
    if (x.rows() != p.input_dim())
        throw DimensionError("mlp_forward: layer 0 expects input of size " + std::to_string(p.input_dim()) +
                             ", got " + std::to_string(x.rows()));
    if (tape) {
        tape->activations.clear();
        tape->activations.push_back(x);
    }
    MatrixXd a = x;
    const std::size_t last = p.weights.size() - 1;
    for (std::size_t l = 0; l <= last; ++l) {
        if (p.weights[l].cols() != a.rows())
            throw DimensionError("mlp_forward: layer " + std::to_string(l) + " expects input of size " +
                                 std::to_string(p.weights[l].cols()) + ", got " + std::to_string(a.rows()));
        MatrixXd z = p.weights[l] * a;
        z.colwise() += p.biases[l];
        if (l != last) tanh_in_place(z);
        a = std::move(z);
        if (tape) tape->activations.push_back(a);
    }
    return a;
}

/// Reverse pass for <upstream, output>. Parameter gradients are accumulated (+=) into
/// `flat_grad` in the flat layout; the input gradient is written when requested.
inline void backward_into(const MlpParams& p, const MlpTape& tape, const MatrixXd& upstream, double* flat_grad,
                          MatrixXd* input_grad = nullptr) {
    const std::size_t layers = p.weights.size();
    if (upstream.rows() != p.output_dim() || tape.activations.size() != layers + 1 ||
        upstream.cols() != tape.activations.back().cols())
        throw DimensionError("mlp_backward: upstream gradient has shape " + std::to_string(upstream.rows()) + "x" +
                             std::to_string(upstream.cols()) + ", output dimension is " +
                             std::to_string(p.output_dim()));
    std::vector<double*> offsets(layers);
    {
        double* cursor = flat_grad;
        for (std::size_t l = 0; l < layers; ++l) {
            offsets[l] = cursor;
            cursor += p.weights[l].size() + p.biases[l].size();
        }
    }
    MatrixXd g = upstream;
    for (std::size_t l = layers; l-- > 0;) {
        const MatrixXd& a_prev = tape.activations[l];
        Eigen::Map<RowMatrix> dw(offsets[l], p.weights[l].rows(), p.weights[l].cols());
        Eigen::Map<VectorXd> db(offsets[l] + p.weights[l].size(), p.biases[l].size());
        dw.noalias() += g * a_prev.transpose();
        db += g.rowwise().sum();
        if (l == 0 && !input_grad) break;
        MatrixXd g_prev = p.weights[l].transpose() * g;
        if (l > 0) g_prev.array() *= (1.0 - a_prev.array().square());
        g = std::move(g_prev);
    }
    if (input_grad) *input_grad = std::move(g);
}

/// Directional derivative of the output along the flat parameter direction `dir`.
inline MatrixXd jvp(const MlpParams& p, const MlpTape& tape, const double* dir) {
    const std::size_t layers = p.weights.size();
    MatrixXd da;  // derivative of the previous layer's activation; empty for the input
    for (std::size_t l = 0; l < layers; ++l) {
        Eigen::Map<const RowMatrix> dw(dir, p.weights[l].rows(), p.weights[l].cols());
        dir += p.weights[l].size();
        Eigen::Map<const VectorXd> db(dir, p.biases[l].size());
        dir += p.biases[l].size();
        MatrixXd dz = dw * tape.activations[l];
        if (da.size()) dz.noalias() += p.weights[l] * da;
        dz.colwise() += db;
        if (l + 1 != layers) dz.array() *= (1.0 - tape.activations[l + 1].array().square());
        da = std::move(dz);
    }
    return da;
}

inline VectorXd mlp_forward(const MlpParams& p, std::span<const double> input) {
    const Eigen::Map<const VectorXd> x(input.data(), static_cast<Eigen::Index>(input.size()));
    return forward(p, MatrixXd(x));
}

struct MlpBackward {
    MlpParams param_grads;
    VectorXd input_grad;
};

inline MlpBackward mlp_backward(const MlpParams& p, std::span<const double> input, std::span<const double> upstream) {
    const Eigen::Map<const VectorXd> x(input.data(), static_cast<Eigen::Index>(input.size()));
    const Eigen::Map<const VectorXd> g(upstream.data(), static_cast<Eigen::Index>(upstream.size()));
    MlpTape tape;
    forward(p, MatrixXd(x), &tape);
    VectorXd flat = VectorXd::Zero(static_cast<Eigen::Index>(p.param_count()));
    MatrixXd input_grad;
    backward_into(p, tape, MatrixXd(g), flat.data(), &input_grad);
    return {unflatten_params(std::span<const double>(flat.data(), static_cast<std::size_t>(flat.size())), p),
            input_grad.col(0)};
}

// ---------------------------------------------------------------------------
// diagonal Gaussian heads

/// Stochastic policy: MLP mean and a state-independent learnable log standard deviation.
struct GaussianHead {
    MlpParams mean_net;
    VectorXd log_std;

    static GaussianHead init(std::vector<int> sizes, Rng& rng) {
        GaussianHead h;
        h.mean_net = MlpParams::glorot(std::move(sizes), rng);
        h.log_std = VectorXd::Zero(h.mean_net.output_dim());
        return h;
    }

    int input_dim() const { return mean_net.input_dim(); }
    int action_dim() const { return mean_net.output_dim(); }
    std::size_t param_count() const { return mean_net.param_count() + static_cast<std::size_t>(log_std.size()); }

    VectorXd clamped_log_std() const { return log_std.cwiseMax(kLogStdMin).cwiseMin(kLogStdMax); }
};

inline VectorXd flatten_params(const GaussianHead& h) {
    VectorXd flat(static_cast<Eigen::Index>(h.param_count()));
    write_flat(h.mean_net, flat.data());
    flat.tail(h.log_std.size()) = h.log_std;
    return flat;
}

inline GaussianHead unflatten_params(std::span<const double> flat, const GaussianHead& layout) {
    if (flat.size() != layout.param_count())
        throw DimensionError("unflatten_params: expected " + std::to_string(layout.param_count()) +
                             " values, got " + std::to_string(flat.size()));
    GaussianHead h = layout;
    read_flat(h.mean_net, flat.data());
    h.log_std = Eigen::Map<const VectorXd>(flat.data() + layout.mean_net.param_count(), layout.log_std.size());
    return h;
}

inline void check_action(const GaussianHead& h, std::size_t n) {
    if (static_cast<int>(n) != h.action_dim())
        throw DimensionError("gaussian head: action has " + std::to_string(n) + " entries, head outputs " +
                             std::to_string(h.action_dim()));
}

/// Column-wise log density of `actions` under N(mean, diag(exp(2 log_std))).
inline VectorXd log_prob_columns(const MatrixXd& mean, const VectorXd& log_std, const MatrixXd& actions) {
    const VectorXd inv_var = (-2.0 * log_std.array()).exp().matrix();
    const MatrixXd diff = actions - mean;
    VectorXd out = -0.5 * (diff.array().square().colwise() * inv_var.array()).colwise().sum().transpose();
    out.array() -= log_std.sum() + kHalfLog2Pi * static_cast<double>(log_std.size());
    return out;
}

inline double gaussian_log_prob(const GaussianHead& h, std::span<const double> input, std::span<const double> action) {
    check_action(h, action.size());
    const VectorXd mu = mlp_forward(h.mean_net, input);
    const Eigen::Map<const VectorXd> a(action.data(), static_cast<Eigen::Index>(action.size()));
    return log_prob_columns(mu, h.clamped_log_std(), MatrixXd(a))(0);
}

inline VectorXd gaussian_sample(const GaussianHead& h, std::span<const double> input, Rng& rng) {
    VectorXd mu = mlp_forward(h.mean_net, input);
    const VectorXd ls = h.clamped_log_std();
    for (Eigen::Index i = 0; i < mu.size(); ++i) mu(i) += std::exp(ls(i)) * standard_normal(rng);
    return mu;
}

inline double gaussian_entropy(const GaussianHead& h) {
    const double half_log_2pi_e = kHalfLog2Pi + 0.5;
    return h.clamped_log_std().sum() + half_log_2pi_e * static_cast<double>(h.log_std.size());
}

/// d/d(log_std) of a clamped entry is zero outside [kLogStdMin, kLogStdMax].
inline double log_std_gate(double raw) { return (raw >= kLogStdMin && raw <= kLogStdMax) ? 1.0 : 0.0; }

inline VectorXd gaussian_log_prob_grad(const GaussianHead& h, std::span<const double> input,
                                       std::span<const double> action) {
    check_action(h, action.size());
    const Eigen::Map<const VectorXd> x(input.data(), static_cast<Eigen::Index>(input.size()));
    const Eigen::Map<const VectorXd> a(action.data(), static_cast<Eigen::Index>(action.size()));
    MlpTape tape;
    const VectorXd mu = forward(h.mean_net, MatrixXd(x), &tape);
    const VectorXd ls = h.clamped_log_std();
    const VectorXd inv_var = (-2.0 * ls.array()).exp().matrix();
    const VectorXd diff = a - mu;
    VectorXd grad = VectorXd::Zero(static_cast<Eigen::Index>(h.param_count()));
    backward_into(h.mean_net, tape, MatrixXd(diff.cwiseProduct(inv_var)), grad.data());
    for (Eigen::Index i = 0; i < ls.size(); ++i)
        grad(h.mean_net.param_count() + i) = (diff(i) * diff(i) * inv_var(i) - 1.0) * log_std_gate(h.log_std(i));
    return grad;
}

inline VectorXd gaussian_entropy_grad(const GaussianHead& h) {
    VectorXd grad = VectorXd::Zero(static_cast<Eigen::Index>(h.param_count()));
    for (Eigen::Index i = 0; i < h.log_std.size(); ++i)
        grad(h.mean_net.param_count() + i) = log_std_gate(h.log_std(i));
    return grad;
}

// ---------------------------------------------------------------------------
// adaptive-moment optimizer (minimizes)

struct OptimizerState {
    VectorXd first_moment;
    VectorXd second_moment;
    long step = 0;
    double learning_rate = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;

    static OptimizerState for_size(std::size_t n, double lr = 3e-4) {
        OptimizerState s;
        s.first_moment = VectorXd::Zero(static_cast<Eigen::Index>(n));
        s.second_moment = VectorXd::Zero(static_cast<Eigen::Index>(n));
        s.learning_rate = lr;
        return s;
    }
};

inline void optimizer_step(VectorXd& params, const VectorXd& grads, OptimizerState& s) {
    if (grads.size() != params.size() || s.first_moment.size() != params.size() ||
        s.second_moment.size() != params.size())
        throw DimensionError("optimizer_step: parameter, gradient and moment sizes disagree (" +
                             std::to_string(params.size()) + ", " + std::to_string(grads.size()) + ", " +
                             std::to_string(s.first_moment.size()) + ")");
    ++s.step;
    s.first_moment = s.beta1 * s.first_moment + (1.0 - s.beta1) * grads;
    s.second_moment = s.beta2 * s.second_moment + (1.0 - s.beta2) * grads.cwiseProduct(grads);
    const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
    const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
    params.array() -= s.learning_rate * (s.first_moment.array() / c1) /
                      ((s.second_moment.array() / c2).sqrt() + s.epsilon);
}

}  // namespace demer::nn
