#pragma once

// Compatible discriminator: one network scoring (o_A, a_A, a_B) for the joint policy and
// the zero-padded (o_A, a_A, 0) for the platform policy. Output is the probability that
// a pair comes from logged data.

#include <cmath>
#include <optional>
#include <vector>

#include "demer/agents.hpp"
#include "demer/nn.hpp"

namespace demer::disc {

using agents::InputNorm;
using env::Observation;
using nn::MatrixXd;
using nn::VectorXd;

inline constexpr double kLogitClamp = 18.0;
inline constexpr double kMinComplement = 1e-8;  // floor on 1 - D inside the reward log

struct Discriminator {
    nn::MlpParams net;
    InputNorm norm;
    int period = 7;

    int input_dim() const { return net.input_dim(); }
    int action_slot() const { return agents::encoded_dim(period) + 1; }  // row index of a_B
};

/// The output layer starts at zero, so an untrained discriminator scores every pair at 0.5.
inline Discriminator make_discriminator(Rng& rng, const std::vector<int>& hidden = {64, 64}, int period = 7) {
    Discriminator d{nn::MlpParams::glorot(agents::layer_sizes(agents::encoded_dim(period) + 2, hidden, 1), rng), {},
                    period};
    d.net.weights.back().setZero();
    return d;
}

/// Raw network input; an empty a_B is the zero-pad used by the platform task.
inline VectorXd disc_input(const Observation& o, double a_A, std::optional<double> a_B, int period = 7) {
    VectorXd x = agents::responder_input(o, a_A, a_B.value_or(0.0), period);
    return x;
}

inline VectorXd clamped_logits(const Discriminator& d, const MatrixXd& raw) {
    return nn::forward(d.net, d.norm.apply(raw)).row(0).transpose().cwiseMax(-kLogitClamp).cwiseMin(kLogitClamp);
}

inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

inline VectorXd prob_batch(const Discriminator& d, const MatrixXd& raw) {
    return clamped_logits(d, raw).unaryExpr([](double z) { return sigmoid(z); });
}

/// -log(1 - D), with 1 - D floored at kMinComplement.
inline double imitation_reward(double prob) { return -std::log(std::max(1.0 - prob, kMinComplement)); }

inline VectorXd reward_batch(const Discriminator& d, const MatrixXd& raw) {
    return prob_batch(d, raw).unaryExpr([](double p) { return imitation_reward(p); });
}

inline double disc_prob(const Discriminator& d, const Observation& o, double a_A, std::optional<double> a_B) {
    return prob_batch(d, MatrixXd(disc_input(o, a_A, a_B, d.period)))(0);
}

inline double reward_hb(const Discriminator& d, const Observation& o, double a_A, double a_B) {
    return imitation_reward(disc_prob(d, o, a_A, a_B));
}

inline double reward_a(const Discriminator& d, const Observation& o, double a_A) {
    return imitation_reward(disc_prob(d, o, a_A, std::nullopt));
}

// ---------------------------------------------------------------------------
// training

/// Binary cross-entropy with logged rows labelled 1 and generated rows 0:
/// -mean_real log D - mean_sim log(1 - D). Returns the loss and optionally its flat gradient.
inline double bce_loss(const Discriminator& d, const MatrixXd& real_raw, const MatrixXd& sim_raw,
                       VectorXd* flat_grad = nullptr) {
    double loss = 0;
    if (flat_grad) *flat_grad = VectorXd::Zero(static_cast<Eigen::Index>(d.net.param_count()));
    auto side = [&](const MatrixXd& raw, bool real) {
        nn::MlpTape tape;
        const MatrixXd z = nn::forward(d.net, d.norm.apply(raw), flat_grad ? &tape : nullptr);
        const double inv_n = 1.0 / static_cast<double>(raw.cols());
        MatrixXd upstream(1, raw.cols());
        for (Eigen::Index i = 0; i < raw.cols(); ++i) {
            const double zi = z(0, i);
            const double zc = std::max(-kLogitClamp, std::min(kLogitClamp, zi));
            // -log sigmoid(z) = softplus(-z), -log(1 - sigmoid(z)) = softplus(z)
            const double s = real ? -zc : zc;
            loss += inv_n * (s > 0 ? s + std::log1p(std::exp(-s)) : std::log1p(std::exp(s)));
            const double inside = (zi > -kLogitClamp && zi < kLogitClamp) ? 1.0 : 0.0;
            upstream(0, i) = inv_n * inside * (sigmoid(zc) - (real ? 1.0 : 0.0));
        }
        if (flat_grad) nn::backward_into(d.net, tape, upstream, flat_grad->data());
    };
    side(real_raw, true);
    side(sim_raw, false);
    return loss;
}

struct DiscLosses {
    double hb = 0;  // joint-policy task, full triples
    double a = 0;   // platform task, zero-padded
};

inline MatrixXd zero_padded(const Discriminator& d, MatrixXd raw) {
    raw.row(d.action_slot()).setZero();
    return raw;
}

/// Random subset of at most `max_rows` columns, without replacement.
inline MatrixXd sample_columns(const MatrixXd& m, std::size_t max_rows, Rng& rng) {
    const auto n = static_cast<std::size_t>(m.cols());
    if (n <= max_rows) return m;
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    for (std::size_t i = 0; i < max_rows; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, n - 1);
        std::swap(idx[i], idx[pick(rng)]);
    }
    MatrixXd out(m.rows(), static_cast<Eigen::Index>(max_rows));
    for (std::size_t i = 0; i < max_rows; ++i) out.col(static_cast<Eigen::Index>(i)) = m.col(static_cast<Eigen::Index>(idx[i]));
    return out;
}

inline void gradient_step(Discriminator& d, const MatrixXd& real_raw, const MatrixXd& sim_raw,
                          nn::OptimizerState& opt) {
    VectorXd grad;
    bce_loss(d, real_raw, sim_raw, &grad);
    if (!grad.allFinite()) throw NumericError("discriminator gradient is not finite");
    VectorXd flat = nn::flatten_params(d.net);
    nn::optimizer_step(flat, grad, opt);
    nn::read_flat(d.net, flat.data());
}

/// One optimizer step on the joint-policy task, then one on the zero-padded platform task.
/// Inputs are raw triples (a_B in its slot); the platform task zeroes that slot itself.
inline DiscLosses disc_update(Discriminator& d, const MatrixXd& sim_raw, const MatrixXd& real_raw,
                              nn::OptimizerState& opt, Rng& rng, std::size_t max_rows = 4096) {
    if (sim_raw.cols() == 0 || real_raw.cols() == 0) throw std::invalid_argument("disc_update: empty batch");
    const MatrixXd sim = sample_columns(sim_raw, max_rows, rng);
    const MatrixXd real = sample_columns(real_raw, max_rows, rng);
    DiscLosses out;
    gradient_step(d, real, sim, opt);
    out.hb = bce_loss(d, real, sim);
    const MatrixXd sim_a = zero_padded(d, sim);
    const MatrixXd real_a = zero_padded(d, real);
    gradient_step(d, real_a, sim_a, opt);
    out.a = bce_loss(d, real_a, sim_a);
    return out;
}

/// Single-task variant used by the GAIL baseline.
inline double disc_update_single(Discriminator& d, const MatrixXd& sim_raw, const MatrixXd& real_raw,
                                 nn::OptimizerState& opt, Rng& rng, std::size_t max_rows = 4096) {
    if (sim_raw.cols() == 0 || real_raw.cols() == 0) throw std::invalid_argument("disc_update: empty batch");
    const MatrixXd sim = sample_columns(sim_raw, max_rows, rng);
    const MatrixXd real = sample_columns(real_raw, max_rows, rng);
    gradient_step(d, real, sim, opt);
    return bce_loss(d, real, sim);
}

inline nlohmann::json to_checkpoint(const Discriminator& d) {
    return agents::mlp_checkpoint("discriminator", "", d.net, VectorXd(), d.norm);
}

inline Discriminator discriminator_from_checkpoint(const nlohmann::json& j) {
    Discriminator d;
    d.net = agents::mlp_from_checkpoint(j);
    d.norm = agents::norm_from_checkpoint(j);
    d.period = d.net.input_dim() - 4;
    return d;
}

}  // namespace demer::disc
