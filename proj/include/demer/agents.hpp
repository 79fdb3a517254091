#pragma once

// Policy roles and their composition.
//
//   platform   pi_a : enc(o_A)                 -> a_A
//   confounder pi_h : enc(o_A) ++ a_A          -> a_H
//   responder  pi_b : enc(o_A) ++ a_A ++ a_H   -> a_B   (demer)
//                     enc(o_A) ++ a_A          -> a_B   (mail, sup, gail)
//
// The joint policy pi_hb composes pi_h then pi_b. Its log density is taken over the
// augmented action (a_H, a_B) with a_H recorded during rollouts.

#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "demer/core.hpp"
#include "demer/nn.hpp"
#include "demer/toy_env.hpp"

namespace demer::agents {

using env::Observation;
using nn::MatrixXd;
using nn::VectorXd;

enum class Variant { demer, mail };

inline std::string to_string(Variant v) { return v == Variant::demer ? "demer" : "mail"; }
inline Variant variant_from_string(const std::string& s) {
    if (s == "demer") return Variant::demer;
    if (s == "mail") return Variant::mail;
    throw std::invalid_argument("unknown variant '" + s + "'");
}

enum class ActMode { mean, sample };

inline int encoded_dim(int period = 7) { return period + 2; }

/// One-hot(tw) followed by r and v, unscaled.
inline void encode_into(const Observation& o, int period, double* out) {
    env::check_tw(o.tw, period);
    std::fill_n(out, period, 0.0);
    out[o.tw - 1] = 1.0;
    out[period] = o.r;
    out[period + 1] = o.v;
}

inline VectorXd encode_observation(const Observation& o, int period = 7) {
    VectorXd x(encoded_dim(period));
    encode_into(o, period, x.data());
    return x;
}

/// Encoded observations as columns, with `extra_rows` trailing rows left at zero.
inline MatrixXd encode_batch(std::span<const Observation> obs, int period, int extra_rows = 0) {
    MatrixXd x = MatrixXd::Zero(encoded_dim(period) + extra_rows, static_cast<Eigen::Index>(obs.size()));
    for (std::size_t i = 0; i < obs.size(); ++i) encode_into(obs[i], period, x.col(static_cast<Eigen::Index>(i)).data());
    return x;
}

/// Fixed per-feature affine standardization applied before the first layer.
/// Empty vectors mean identity.
struct InputNorm {
    VectorXd shift;
    VectorXd scale;

    bool is_identity() const { return shift.size() == 0; }

    MatrixXd apply(const MatrixXd& raw) const {
        if (is_identity()) return raw;
        if (raw.rows() != shift.size()) throw DimensionError("InputNorm: feature count mismatch");
        return ((raw.colwise() - shift).array().colwise() / scale.array()).matrix();
    }

    /// Standardizes the r and v slots of an encoded observation; every other slot is identity.
    static InputNorm for_observation_slots(int input_dim, int period, double r_mean, double r_std, double v_mean,
                                           double v_std) {
        InputNorm n;
        n.shift = VectorXd::Zero(input_dim);
        n.scale = VectorXd::Ones(input_dim);
        n.shift(period) = r_mean;
        n.scale(period) = r_std > 1e-6 ? r_std : 1.0;
        n.shift(period + 1) = v_mean;
        n.scale(period + 1) = v_std > 1e-6 ? v_std : 1.0;
        return n;
    }
};

struct GaussianPolicy {
    std::string role;
    nn::GaussianHead head;
    InputNorm norm;

    int input_dim() const { return head.input_dim(); }
    int action_dim() const { return head.action_dim(); }

    MatrixXd mean(const MatrixXd& raw_inputs) const { return nn::forward(head.mean_net, norm.apply(raw_inputs)); }

    double mean1(const VectorXd& raw) const { return mean(MatrixXd(raw))(0, 0); }

    double log_prob(const VectorXd& raw, std::span<const double> action) const {
        nn::check_action(head, action.size());
        const MatrixXd mu = mean(MatrixXd(raw));
        const Eigen::Map<const VectorXd> a(action.data(), static_cast<Eigen::Index>(action.size()));
        return nn::log_prob_columns(mu, head.clamped_log_std(), MatrixXd(a))(0);
    }

    VectorXd act(const VectorXd& raw, ActMode mode, Rng* rng) const {
        VectorXd a = mean(MatrixXd(raw)).col(0);
        if (mode == ActMode::sample) {
            if (!rng) throw std::invalid_argument("sample mode requires a random source");
            const VectorXd ls = head.clamped_log_std();
            for (Eigen::Index i = 0; i < a.size(); ++i) a(i) += std::exp(ls(i)) * standard_normal(*rng);
        }
        return a;
    }

    double entropy() const { return nn::gaussian_entropy(head); }
};

inline std::vector<int> layer_sizes(int in, const std::vector<int>& hidden, int out) {
    std::vector<int> s{in};
    s.insert(s.end(), hidden.begin(), hidden.end());
    s.push_back(out);
    return s;
}

inline GaussianPolicy make_policy(std::string role, int input_dim, const std::vector<int>& hidden, Rng& rng) {
    return {std::move(role), nn::GaussianHead::init(layer_sizes(input_dim, hidden, 1), rng), {}};
}

inline GaussianPolicy make_platform_policy(Rng& rng, const std::vector<int>& hidden = {64, 64}, int period = 7) {
    return make_policy("platform", encoded_dim(period), hidden, rng);
}

struct JointAction {
    std::optional<double> a_h;
    double a_b = 0;
};

struct JointPolicy {
    Variant variant = Variant::demer;
    std::optional<GaussianPolicy> confounder;  // present iff variant == demer
    GaussianPolicy responder;
    int period = 7;

    std::size_t param_count() const {
        return (confounder ? confounder->head.param_count() : 0) + responder.head.param_count();
    }

    void validate() const {
        const int obs = encoded_dim(period);
        if (variant == Variant::demer) {
            if (!confounder) throw DimensionError("demer joint policy requires a confounder policy");
            if (confounder->input_dim() != obs + 1 || responder.input_dim() != obs + 2)
                throw DimensionError("demer joint policy: expected confounder input " + std::to_string(obs + 1) +
                                     " and responder input " + std::to_string(obs + 2));
        } else {
            if (confounder) throw DimensionError("mail joint policy must not carry a confounder policy");
            if (responder.input_dim() != obs + 1)
                throw DimensionError("mail joint policy: expected responder input " + std::to_string(obs + 1));
        }
    }
};

/// MAIL's single joint network gets as many hidden layers as DEMER's two stacked networks.
inline JointPolicy make_joint_policy(Variant variant, Rng& rng, const std::vector<int>& hidden = {64, 64},
                                     int period = 7) {
    JointPolicy j;
    j.variant = variant;
    j.period = period;
    const int obs = encoded_dim(period);
    if (variant == Variant::demer) {
        j.confounder = make_policy("confounder", obs + 1, hidden, rng);
        j.responder = make_policy("responder", obs + 2, hidden, rng);
    } else {
        std::vector<int> deep = hidden;
        deep.insert(deep.end(), hidden.begin(), hidden.end());
        j.responder = make_policy("responder", obs + 1, deep, rng);
    }
    return j;
}

inline VectorXd confounder_input(const Observation& o, double a_A, int period) {
    VectorXd x(encoded_dim(period) + 1);
    encode_into(o, period, x.data());
    x(encoded_dim(period)) = a_A;
    return x;
}

inline VectorXd responder_input(const Observation& o, double a_A, std::optional<double> a_H, int period) {
    const int obs = encoded_dim(period);
    VectorXd x(obs + (a_H ? 2 : 1));
    encode_into(o, period, x.data());
    x(obs) = a_A;
    if (a_H) x(obs + 1) = *a_H;
    return x;
}

inline double platform_act(const GaussianPolicy& platform, const Observation& o, ActMode mode, Rng* rng = nullptr,
                           int period = 7) {
    return platform.act(encode_observation(o, period), mode, rng)(0);
}

inline JointAction joint_act(const JointPolicy& joint, const Observation& o, double a_A, ActMode mode,
                             Rng* rng = nullptr) {
    JointAction out;
    if (joint.variant == Variant::demer) {
        out.a_h = joint.confounder->act(confounder_input(o, a_A, joint.period), mode, rng)(0);
    }
    out.a_b = joint.responder.act(responder_input(o, a_A, out.a_h, joint.period), mode, rng)(0);
    return out;
}

inline double joint_log_prob(const JointPolicy& joint, const Observation& o, double a_A, std::optional<double> a_H,
                             double a_B) {
    if (joint.variant == Variant::demer && !a_H)
        throw std::invalid_argument("joint_log_prob: demer variant requires the confounder action");
    if (joint.variant == Variant::mail && a_H)
        throw std::invalid_argument("joint_log_prob: mail variant has no confounder action");
    double lp = 0;
    if (a_H) lp += joint.confounder->log_prob(confounder_input(o, a_A, joint.period), std::span<const double>(&*a_H, 1));
    lp += joint.responder.log_prob(responder_input(o, a_A, a_H, joint.period), std::span<const double>(&a_B, 1));
    return lp;
}

/// Flat joint parameters: confounder first, then responder.
inline VectorXd flatten_joint(const JointPolicy& j) {
    VectorXd flat(static_cast<Eigen::Index>(j.param_count()));
    Eigen::Index off = 0;
    if (j.confounder) {
        const VectorXd h = nn::flatten_params(j.confounder->head);
        flat.segment(0, h.size()) = h;
        off = h.size();
    }
    flat.tail(flat.size() - off) = nn::flatten_params(j.responder.head);
    return flat;
}

inline JointPolicy unflatten_joint(std::span<const double> flat, const JointPolicy& layout) {
    if (flat.size() != layout.param_count()) throw DimensionError("unflatten_joint: length mismatch");
    JointPolicy j = layout;
    std::size_t off = 0;
    if (j.confounder) {
        const std::size_t n = j.confounder->head.param_count();
        j.confounder->head = nn::unflatten_params(flat.subspan(0, n), j.confounder->head);
        off = n;
    }
    j.responder.head = nn::unflatten_params(flat.subspan(off), j.responder.head);
    return j;
}

// ---------------------------------------------------------------------------
// checkpoints

inline nlohmann::json vec_json(const VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

inline VectorXd json_vec(const nlohmann::json& j) {
    const auto v = j.get<std::vector<double>>();
    return Eigen::Map<const VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

inline nlohmann::json mlp_checkpoint(const std::string& role, const std::string& variant, const nn::MlpParams& net,
                                     const VectorXd& log_std, const InputNorm& norm) {
    nlohmann::json j;
    j["role"] = role;
    j["variant"] = variant;
    j["layer_sizes"] = net.layer_sizes;
    j["flat_params"] = vec_json(nn::flatten_params(net));
    j["log_std"] = vec_json(log_std);
    if (!norm.is_identity()) {
        j["input_shift"] = vec_json(norm.shift);
        j["input_scale"] = vec_json(norm.scale);
    }
    return j;
}

inline nn::MlpParams mlp_from_checkpoint(const nlohmann::json& j) {
    nn::MlpParams layout(j.at("layer_sizes").get<std::vector<int>>());
    const auto flat = j.at("flat_params").get<std::vector<double>>();
    return nn::unflatten_params(flat, layout);
}

inline InputNorm norm_from_checkpoint(const nlohmann::json& j) {
    InputNorm n;
    if (j.contains("input_shift")) {
        n.shift = json_vec(j.at("input_shift"));
        n.scale = json_vec(j.at("input_scale"));
    }
    return n;
}

inline nlohmann::json to_checkpoint(const GaussianPolicy& p, const std::string& variant = "") {
    return mlp_checkpoint(p.role, variant, p.head.mean_net, p.head.log_std, p.norm);
}

inline GaussianPolicy policy_from_checkpoint(const nlohmann::json& j) {
    GaussianPolicy p;
    p.role = j.at("role").get<std::string>();
    p.head.mean_net = mlp_from_checkpoint(j);
    p.head.log_std = json_vec(j.at("log_std"));
    if (p.head.log_std.size() != p.head.mean_net.output_dim())
        throw DimensionError("checkpoint: log_std length disagrees with output layer");
    p.norm = norm_from_checkpoint(j);
    return p;
}

}  // namespace demer::agents
