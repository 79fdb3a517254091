#pragma once

// Trust-region policy update for products of diagonal Gaussian policies.
//
// A batch row's action density is the product of one factor per PolicyTerm (a single
// term for the platform policy; confounder then responder for the DEMER joint policy
// over its augmented action (a_H, a_B)). The surrogate
//
//     L(theta) = mean_i[ exp(log pi_theta(row i) - old_log_prob_i) * A_i ] + c * sum_k H(pi_k)
//
// is maximized subject to mean KL(pi_old || pi_new) <= max_kl using conjugate gradient on
// the exact Fisher information (Gaussian mean Jacobians through the MLP, 2 per log-std
// entry) followed by a backtracking line search.

#include <cmath>
#include <vector>

#include "demer/agents.hpp"
#include "demer/nn.hpp"

namespace demer::trpo {

using nn::MatrixXd;
using nn::VectorXd;

struct TrpoConfig {
    double max_kl = 0.01;
    int cg_iters = 10;
    double cg_damping = 0.1;
    int backtrack_steps = 10;
    double backtrack_ratio = 0.5;
    double entropy_coef = 1e-3;
};

struct PolicyTerm {
    agents::GaussianPolicy* policy = nullptr;
    MatrixXd inputs;   // normalized network inputs, one column per row
    MatrixXd actions;  // action_dim x rows
};

/// Builds a term from raw (unnormalized) inputs.
inline PolicyTerm make_term(agents::GaussianPolicy& p, const MatrixXd& raw_inputs, const MatrixXd& actions) {
    return {&p, p.norm.apply(raw_inputs), actions};
}

struct TrpoStats {
    bool accepted = false;
    double kl = 0;           // measured mean KL of the accepted step (0 when rejected)
    double improvement = 0;  // surrogate gain of the accepted step
    double surrogate_before = 0;
    int backtracks = 0;
    double gradient_norm = 0;
};

namespace detail {

struct Evaluated {
    std::vector<nn::MlpTape> tapes;
    std::vector<MatrixXd> means;
    std::vector<VectorXd> log_stds;
    VectorXd log_prob;
};

inline Evaluated evaluate(const std::vector<PolicyTerm>& terms, bool keep_tape) {
    Evaluated e;
    const Eigen::Index rows = terms.front().inputs.cols();
    e.log_prob = VectorXd::Zero(rows);
    for (const auto& t : terms) {
        nn::MlpTape tape;
        e.means.push_back(nn::forward(t.policy->head.mean_net, t.inputs, keep_tape ? &tape : nullptr));
        e.log_stds.push_back(t.policy->head.clamped_log_std());
        e.log_prob += nn::log_prob_columns(e.means.back(), e.log_stds.back(), t.actions);
        if (keep_tape) e.tapes.push_back(std::move(tape));
    }
    return e;
}

inline double total_entropy(const std::vector<PolicyTerm>& terms) {
    double h = 0;
    for (const auto& t : terms) h += t.policy->entropy();
    return h;
}

inline double mean_kl(const Evaluated& old_e, const Evaluated& new_e) {
    double kl = 0;
    const auto rows = static_cast<double>(old_e.log_prob.size());
    for (std::size_t k = 0; k < old_e.means.size(); ++k) {
        const VectorXd& lo = old_e.log_stds[k];
        const VectorXd& ln = new_e.log_stds[k];
        const VectorXd var_o = (2.0 * lo.array()).exp().matrix();
        const VectorXd inv_var_n = (-2.0 * ln.array()).exp().matrix();
        const MatrixXd diff = old_e.means[k] - new_e.means[k];
        const double sq = (diff.array().square().colwise() * inv_var_n.array()).sum() / rows;
        kl += (ln - lo).sum() + 0.5 * var_o.cwiseProduct(inv_var_n).sum() + 0.5 * sq -
              0.5 * static_cast<double>(lo.size());
    }
    return kl;
}

inline std::vector<std::size_t> offsets(const std::vector<PolicyTerm>& terms) {
    std::vector<std::size_t> off{0};
    for (const auto& t : terms) off.push_back(off.back() + t.policy->head.param_count());
    return off;
}

inline VectorXd gather(const std::vector<PolicyTerm>& terms) {
    const auto off = offsets(terms);
    VectorXd flat(static_cast<Eigen::Index>(off.back()));
    for (std::size_t k = 0; k < terms.size(); ++k) {
        const VectorXd f = nn::flatten_params(terms[k].policy->head);
        flat.segment(static_cast<Eigen::Index>(off[k]), f.size()) = f;
    }
    return flat;
}

inline void scatter(const std::vector<PolicyTerm>& terms, const VectorXd& flat) {
    const auto off = offsets(terms);
    for (std::size_t k = 0; k < terms.size(); ++k) {
        auto& head = terms[k].policy->head;
        const double* p = flat.data() + off[k];
        nn::read_flat(head.mean_net, p);
        head.log_std = Eigen::Map<const VectorXd>(p + head.mean_net.param_count(), head.log_std.size());
    }
}

}  // namespace detail

/// Mean KL(old || current) between a recorded evaluation and the terms' current parameters.
inline double measure_kl(const std::vector<PolicyTerm>& terms, const detail::Evaluated& old_e) {
    return detail::mean_kl(old_e, detail::evaluate(terms, false));
}

/// Surrogate objective at the terms' current parameters.
inline double surrogate(const std::vector<PolicyTerm>& terms, const VectorXd& advantages,
                        const VectorXd& old_log_prob, double entropy_coef) {
    const auto e = detail::evaluate(terms, false);
    return ((e.log_prob - old_log_prob).array().exp() * advantages.array()).mean() +
           entropy_coef * detail::total_entropy(terms);
}

/// Gradient of the surrogate at the current parameters (flat, terms concatenated).
inline VectorXd surrogate_gradient(const std::vector<PolicyTerm>& terms, const detail::Evaluated& e,
                                   const VectorXd& advantages, const VectorXd& old_log_prob, double entropy_coef) {
    const auto off = detail::offsets(terms);
    VectorXd g = VectorXd::Zero(static_cast<Eigen::Index>(off.back()));
    const auto rows = static_cast<double>(advantages.size());
    const VectorXd w = ((e.log_prob - old_log_prob).array().exp() * advantages.array() / rows).matrix();
    for (std::size_t k = 0; k < terms.size(); ++k) {
        const auto& head = terms[k].policy->head;
        const VectorXd inv_var = (-2.0 * e.log_stds[k].array()).exp().matrix();
        const MatrixXd diff = terms[k].actions - e.means[k];
        MatrixXd upstream = (diff.array().colwise() * inv_var.array()).matrix();
        upstream.array().rowwise() *= w.transpose().array();
        nn::backward_into(head.mean_net, e.tapes[k], upstream, g.data() + off[k]);
        const std::size_t ls_off = off[k] + head.mean_net.param_count();
        for (Eigen::Index d = 0; d < head.log_std.size(); ++d) {
            const double score = ((diff.row(d).array().square() * inv_var(d) - 1.0) * w.transpose().array()).sum();
            g(static_cast<Eigen::Index>(ls_off) + d) = (score + entropy_coef) * nn::log_std_gate(head.log_std(d));
        }
    }
    return g;
}

/// Fisher-vector product of mean KL at the recorded evaluation, plus damping * v.
inline VectorXd fisher_vector_product(const std::vector<PolicyTerm>& terms, const detail::Evaluated& e,
                                      const VectorXd& v, double damping) {
    const auto off = detail::offsets(terms);
    VectorXd out = damping * v;
    const auto rows = static_cast<double>(e.log_prob.size());
    for (std::size_t k = 0; k < terms.size(); ++k) {
        const auto& head = terms[k].policy->head;
        const VectorXd inv_var = (-2.0 * e.log_stds[k].array()).exp().matrix();
        MatrixXd jv = nn::jvp(head.mean_net, e.tapes[k], v.data() + off[k]);
        jv = (jv.array().colwise() * (inv_var.array() / rows)).matrix();
        nn::backward_into(head.mean_net, e.tapes[k], jv, out.data() + off[k]);
        const std::size_t ls_off = off[k] + head.mean_net.param_count();
        for (Eigen::Index d = 0; d < head.log_std.size(); ++d) {
            const auto i = static_cast<Eigen::Index>(ls_off) + d;
            out(i) += 2.0 * v(i) * nn::log_std_gate(head.log_std(d));
        }
    }
    return out;
}

template <class Apply>
VectorXd conjugate_gradient(Apply&& apply, const VectorXd& b, int iters, double tol = 1e-10) {
    VectorXd x = VectorXd::Zero(b.size());
    VectorXd r = b;
    VectorXd p = b;
    double rr = r.squaredNorm();
    for (int i = 0; i < iters && rr > tol; ++i) {
        const VectorXd ap = apply(p);
        const double alpha = rr / p.dot(ap);
        x += alpha * p;
        r -= alpha * ap;
        const double rr_new = r.squaredNorm();
        p = r + (rr_new / rr) * p;
        rr = rr_new;
    }
    return x;
}

/// One trust-region step. Policies referenced by `terms` are modified in place only when
/// a line-search candidate satisfies KL <= max_kl and a non-negative surrogate gain;
/// otherwise their parameters are restored bit for bit.
inline TrpoStats trpo_update(const std::vector<PolicyTerm>& terms, const VectorXd& advantages,
                             const VectorXd& old_log_prob, const TrpoConfig& cfg) {
    if (terms.empty()) throw std::invalid_argument("trpo_update: no policy terms");
    for (const auto& t : terms)
        if (t.inputs.cols() != advantages.size() || t.actions.cols() != advantages.size() ||
            t.actions.rows() != t.policy->action_dim() || t.inputs.rows() != t.policy->input_dim())
            throw DimensionError("trpo_update: term shapes disagree with the batch");
    if (old_log_prob.size() != advantages.size()) throw DimensionError("trpo_update: old_log_prob length");

    TrpoStats stats;
    const auto old_e = detail::evaluate(terms, true);
    const double base = ((old_e.log_prob - old_log_prob).array().exp() * advantages.array()).mean() +
                        cfg.entropy_coef * detail::total_entropy(terms);
    stats.surrogate_before = base;
    if (!std::isfinite(base)) throw NumericError("trpo_update: surrogate is not finite");

    const VectorXd g = surrogate_gradient(terms, old_e, advantages, old_log_prob, cfg.entropy_coef);
    if (!g.allFinite()) throw NumericError("trpo_update: policy gradient is not finite");
    stats.gradient_norm = g.norm();
    if (stats.gradient_norm == 0.0) return stats;

    auto fvp = [&](const VectorXd& v) { return fisher_vector_product(terms, old_e, v, cfg.cg_damping); };
    const VectorXd dir = conjugate_gradient(fvp, g, cfg.cg_iters);
    const double shs = 0.5 * dir.dot(fvp(dir));
    if (!(shs > 0) || !std::isfinite(shs)) return stats;
    const VectorXd full_step = dir * std::sqrt(cfg.max_kl / shs);

    const VectorXd theta0 = detail::gather(terms);
    std::vector<nn::GaussianHead> saved;
    for (const auto& t : terms) saved.push_back(t.policy->head);

    double frac = 1.0;
    for (int k = 0; k < cfg.backtrack_steps; ++k, frac *= cfg.backtrack_ratio) {
        detail::scatter(terms, theta0 + frac * full_step);
        const auto new_e = detail::evaluate(terms, false);
        const double kl = detail::mean_kl(old_e, new_e);
        const double value = ((new_e.log_prob - old_log_prob).array().exp() * advantages.array()).mean() +
                             cfg.entropy_coef * detail::total_entropy(terms);
        const double gain = value - base;
        if (std::isfinite(kl) && std::isfinite(value) && kl <= cfg.max_kl && gain >= 0) {
            stats.accepted = true;
            stats.kl = kl;
            stats.improvement = gain;
            stats.backtracks = k;
            return stats;
        }
    }
    for (std::size_t k = 0; k < terms.size(); ++k) terms[k].policy->head = saved[k];
    stats.backtracks = cfg.backtrack_steps;
    return stats;
}

}  // namespace demer::trpo
