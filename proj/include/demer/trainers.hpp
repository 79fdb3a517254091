#pragma once

// Learning procedures: simulated rollouts, advantage estimation, value baselines, the
// SUP / GAIL / MAIL / DEMER pipelines and policy optimization inside a learned simulator.

#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "demer/agents.hpp"
#include "demer/discriminator.hpp"
#include "demer/nn.hpp"
#include "demer/toy_env.hpp"
#include "demer/trpo.hpp"

namespace demer::train {

using agents::ActMode;
using agents::GaussianPolicy;
using agents::InputNorm;
using agents::JointPolicy;
using agents::Variant;
using disc::Discriminator;
using env::EnvParams;
using env::Observation;
using env::PublicDataset;
using nn::MatrixXd;
using nn::VectorXd;

struct TrainConfig {
    int episodes_per_step = 200;  // N
    int generator_steps = 3;      // K
    int iterations = 300;
    double gamma = 0.99;
    double gae_lambda = 0.95;
    trpo::TrpoConfig trpo;
    std::vector<int> hidden{64, 64};
    int value_epochs = 5;
    double value_lr = 1e-3;
    int value_batch = 256;
    double disc_lr = 3e-2;
    std::size_t disc_rows = 4096;
    int bc_epochs = 60;
    double bc_lr = 1e-3;
    int bc_batch = 256;
    int rl_iterations = 100;
    int rl_episodes = 200;
    int checkpoint_every = 50;
    int workers = 1;
    bool record_wallclock = false;
    std::uint64_t seed = 0;

    void validate() const {
        if (episodes_per_step < 1 || generator_steps < 1 || iterations < 0)
            throw std::invalid_argument("TrainConfig: N, K must be >= 1 and iterations >= 0");
        if (!(gamma > 0 && gamma <= 1) || !(gae_lambda > 0 && gae_lambda <= 1))
            throw std::invalid_argument("TrainConfig: gamma and gae_lambda must lie in (0, 1]");
        if (!(trpo.max_kl > 0) || trpo.cg_iters < 1 || trpo.backtrack_steps < 1 ||
            !(trpo.backtrack_ratio > 0 && trpo.backtrack_ratio < 1) || trpo.cg_damping < 0 ||
            trpo.entropy_coef < 0)
            throw std::invalid_argument("TrainConfig: invalid trust-region settings");
        if (hidden.empty()) throw std::invalid_argument("TrainConfig: hidden layers must be non-empty");
        if (value_epochs < 0 || value_batch < 1 || !(value_lr > 0) || !(disc_lr > 0) || disc_rows < 1 ||
            bc_epochs < 0 || bc_batch < 1 || !(bc_lr > 0) || rl_iterations < 0 || rl_episodes < 1 || workers < 0)
            throw std::invalid_argument("TrainConfig: invalid optimizer settings");
    }
};

// ---------------------------------------------------------------------------
// shared helpers

/// Runs fn(begin, end) over [0, n) split into at most `workers` contiguous shards.
template <class Fn>
void for_shards(std::size_t n, int workers, Fn&& fn) {
    const std::size_t w = std::max<std::size_t>(1, std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, workers))));
    if (w == 1) {
        fn(std::size_t{0}, n);
        return;
    }
    std::vector<std::thread> pool;
    const std::size_t chunk = (n + w - 1) / w;
    for (std::size_t b = 0; b < n; b += chunk) pool.emplace_back([&, b] { fn(b, std::min(n, b + chunk)); });
    for (auto& t : pool) t.join();
}

inline void sample_in_place(MatrixXd& mean, const VectorXd& log_std, std::vector<Rng>& rngs, std::size_t first) {
    for (Eigen::Index j = 0; j < mean.cols(); ++j)
        for (Eigen::Index d = 0; d < mean.rows(); ++d)
            mean(d, j) += std::exp(log_std(d)) * standard_normal(rngs[first + static_cast<std::size_t>(j)]);
}

/// Mean/std of r and v over every logged observation.
inline InputNorm observation_norm(const PublicDataset& d, int input_dim) {
    double n = 0, sr = 0, sv = 0, srr = 0, svv = 0;
    for (const auto& e : d.episodes)
        for (const auto& s : e.steps) {
            n += 1;
            sr += s.obs.r;
            sv += s.obs.v;
            srr += s.obs.r * s.obs.r;
            svv += s.obs.v * s.obs.v;
        }
    if (n == 0) return {};
    const double mr = sr / n, mv = sv / n;
    return InputNorm::for_observation_slots(input_dim, d.env.period, mr, std::sqrt(std::max(0.0, srr / n - mr * mr)),
                                            mv, std::sqrt(std::max(0.0, svv / n - mv * mv)));
}

/// Logged (o_A, a_A, a_B) triples as raw discriminator inputs, one column per step.
inline MatrixXd logged_triples(const PublicDataset& d) {
    std::vector<Observation> obs;
    std::vector<double> a_p, a_d;
    for (const auto& e : d.episodes)
        for (const auto& s : e.steps) {
            obs.push_back(s.obs);
            a_p.push_back(s.a_p);
            a_d.push_back(s.a_d);
        }
    MatrixXd x = agents::encode_batch(obs, d.env.period, 2);
    const int slot = agents::encoded_dim(d.env.period);
    for (std::size_t i = 0; i < obs.size(); ++i) {
        x(slot, static_cast<Eigen::Index>(i)) = a_p[i];
        x(slot + 1, static_cast<Eigen::Index>(i)) = a_d[i];
    }
    return x;
}

// ---------------------------------------------------------------------------
// value baselines and advantages

struct ValueNet {
    nn::MlpParams net;
    InputNorm norm;
    nn::OptimizerState opt;

    static ValueNet make(int input_dim, const std::vector<int>& hidden, double lr, InputNorm norm, Rng& rng) {
        ValueNet v;
        v.net = nn::MlpParams::glorot(agents::layer_sizes(input_dim, hidden, 1), rng);
        v.net.weights.back().setZero();  // V starts at 0
        v.norm = std::move(norm);
        v.opt = nn::OptimizerState::for_size(v.net.param_count(), lr);
        return v;
    }

    VectorXd predict(const MatrixXd& raw) const { return nn::forward(net, norm.apply(raw)).row(0).transpose(); }

    /// Squared-error regression on `targets` for a number of shuffled minibatch epochs.
    void fit(const MatrixXd& raw, const VectorXd& targets, int epochs, int batch, Rng& rng) {
        const MatrixXd x = norm.apply(raw);
        const auto n = static_cast<std::size_t>(x.cols());
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), 0);
        VectorXd flat = nn::flatten_params(net);
        for (int ep = 0; ep < epochs; ++ep) {
            std::shuffle(order.begin(), order.end(), rng);
            for (std::size_t b = 0; b < n; b += static_cast<std::size_t>(batch)) {
                const std::size_t e = std::min(n, b + static_cast<std::size_t>(batch));
                MatrixXd xb(x.rows(), static_cast<Eigen::Index>(e - b));
                MatrixXd yb(1, static_cast<Eigen::Index>(e - b));
                for (std::size_t i = b; i < e; ++i) {
                    xb.col(static_cast<Eigen::Index>(i - b)) = x.col(static_cast<Eigen::Index>(order[i]));
                    yb(0, static_cast<Eigen::Index>(i - b)) = targets(static_cast<Eigen::Index>(order[i]));
                }
                nn::MlpTape tape;
                const MatrixXd pred = nn::forward(net, xb, &tape);
                const MatrixXd upstream = (pred - yb) * (2.0 / static_cast<double>(e - b));
                VectorXd grad = VectorXd::Zero(flat.size());
                nn::backward_into(net, tape, upstream, grad.data());
                if (!grad.allFinite()) throw NumericError("value regression gradient is not finite");
                nn::optimizer_step(flat, grad, opt);
                nn::read_flat(net, flat.data());
            }
        }
    }
};

struct Advantages {
    VectorXd returns;     // discounted reward-to-go within each episode
    VectorXd raw;         // GAE(gamma, lambda) advantages
    VectorXd normalized;  // raw standardized over the batch (zero when raw is constant)
};

/// Rows are episode-major with fixed `horizon` steps; the value after the last step is 0.
inline Advantages compute_advantages(const VectorXd& rewards, const VectorXd& values, int horizon, double gamma,
                                     double lambda) {
    if (rewards.size() != values.size() || horizon < 1 || rewards.size() % horizon != 0)
        throw DimensionError("compute_advantages: rewards/values must cover whole episodes");
    Advantages out{VectorXd(rewards.size()), VectorXd(rewards.size()), VectorXd(rewards.size())};
    const Eigen::Index episodes = rewards.size() / horizon;
    for (Eigen::Index e = 0; e < episodes; ++e) {
        double ret = 0, gae = 0, next_value = 0;
        for (Eigen::Index t = horizon - 1; t >= 0; --t) {
            const Eigen::Index i = e * horizon + t;
            ret = rewards(i) + gamma * ret;
            const double delta = rewards(i) + gamma * next_value - values(i);
            gae = delta + gamma * lambda * gae;
            out.returns(i) = ret;
            out.raw(i) = gae;
            next_value = values(i);
        }
    }
    const double mean = out.raw.mean();
    const double sd = std::sqrt((out.raw.array() - mean).square().mean());
    if (sd > 1e-12)
        out.normalized = (out.raw.array() - mean) / sd;
    else
        out.normalized.setZero();
    return out;
}

// ---------------------------------------------------------------------------
// simulated rollouts

/// Rows are episode-major: row = episode * horizon + step.
struct SimBatch {
    int episodes = 0;
    int horizon = 0;
    int period = 7;
    std::vector<Observation> obs;
    VectorXd a_A, a_B;  // a_A as executed, clipped to the platform action space
    VectorXd a_A_sampled;  // the platform policy's draw, scored by its log-prob
    std::optional<VectorXd> a_H;  // recorded for the demer variant only
    VectorXd r_A, r_HB;
    VectorXd old_log_prob_a, old_log_prob_hb;

    std::size_t rows() const { return obs.size(); }
    int episode_of(std::size_t row) const { return static_cast<int>(row) / horizon; }
    int step_of(std::size_t row) const { return static_cast<int>(row) % horizon; }

    MatrixXd platform_inputs() const { return agents::encode_batch(obs, period); }

    MatrixXd confounder_inputs() const {
        MatrixXd x = agents::encode_batch(obs, period, 1);
        x.row(agents::encoded_dim(period)) = a_A.transpose();
        return x;
    }

    MatrixXd responder_inputs() const {
        MatrixXd x = agents::encode_batch(obs, period, a_H ? 2 : 1);
        x.row(agents::encoded_dim(period)) = a_A.transpose();
        if (a_H) x.row(agents::encoded_dim(period) + 1) = a_H->transpose();
        return x;
    }

    MatrixXd disc_inputs() const {
        MatrixXd x = agents::encode_batch(obs, period, 2);
        x.row(agents::encoded_dim(period)) = a_A.transpose();
        x.row(agents::encoded_dim(period) + 1) = a_B.transpose();
        return x;
    }
};

inline constexpr std::uint64_t kRolloutTag = 0x726f6c6cULL;

/// N simulated episodes starting from first observations of randomly chosen logged
/// trajectories; every episode draws its noise from stream (seed, phase, episode).
inline SimBatch generate_rollouts(const GaussianPolicy& platform, const JointPolicy& joint, const Discriminator& d,
                                  const PublicDataset& data, const TrainConfig& cfg, std::uint64_t seed,
                                  std::uint64_t phase) {
    if (data.episodes.empty()) throw std::invalid_argument("generate_rollouts: dataset is empty");
    const int n = cfg.episodes_per_step;
    const int horizon = data.env.horizon;
    const int period = data.env.period;
    const int obs_dim = agents::encoded_dim(period);
    const bool demer = joint.variant == Variant::demer;

    SimBatch b;
    b.episodes = n;
    b.horizon = horizon;
    b.period = period;
    const auto rows = static_cast<std::size_t>(n) * static_cast<std::size_t>(horizon);
    b.obs.resize(rows);
    b.a_A = b.a_A_sampled = b.a_B = b.r_A = b.r_HB = b.old_log_prob_a = b.old_log_prob_hb = VectorXd::Zero(static_cast<Eigen::Index>(rows));
    if (demer) b.a_H = VectorXd::Zero(static_cast<Eigen::Index>(rows));

    std::vector<Rng> rngs;
    std::vector<Observation> start(static_cast<std::size_t>(n));
    rngs.reserve(static_cast<std::size_t>(n));
    for (int j = 0; j < n; ++j) {
        rngs.push_back(stream_rng(seed ^ kRolloutTag, phase, static_cast<std::uint64_t>(j)));
        std::uniform_int_distribution<std::size_t> pick(0, data.episodes.size() - 1);
        start[static_cast<std::size_t>(j)] = data.episodes[pick(rngs.back())].steps.front().obs;
    }
    const VectorXd ls_a = platform.head.clamped_log_std();
    const VectorXd ls_b = joint.responder.head.clamped_log_std();
    const VectorXd ls_h = demer ? joint.confounder->head.clamped_log_std() : VectorXd();

    for_shards(static_cast<std::size_t>(n), cfg.workers, [&](std::size_t first, std::size_t last) {
        std::vector<Observation> cur(start.begin() + static_cast<std::ptrdiff_t>(first),
                                     start.begin() + static_cast<std::ptrdiff_t>(last));
        const auto m = static_cast<Eigen::Index>(cur.size());
        for (int t = 0; t < horizon; ++t) {
            MatrixXd x = agents::encode_batch(cur, period, 2);
            MatrixXd a_A = platform.mean(x.topRows(obs_dim));
            const MatrixXd mu_a = a_A;
            sample_in_place(a_A, ls_a, rngs, first);
            const VectorXd lp_a = nn::log_prob_columns(mu_a, ls_a, a_A);
            const MatrixXd a_A_sampled = a_A;
            a_A = a_A.unaryExpr([](double a) { return env::clip_platform(a); });
            x.row(obs_dim) = a_A.row(0);
            VectorXd lp_hb = VectorXd::Zero(m);
            MatrixXd a_H;
            if (demer) {
                a_H = joint.confounder->mean(x.topRows(obs_dim + 1));
                const MatrixXd mu_h = a_H;
                sample_in_place(a_H, ls_h, rngs, first);
                lp_hb += nn::log_prob_columns(mu_h, ls_h, a_H);
                x.row(obs_dim + 1) = a_H.row(0);
            }
            MatrixXd a_B = joint.responder.mean(x.topRows(demer ? obs_dim + 2 : obs_dim + 1));
            const MatrixXd mu_b = a_B;
            sample_in_place(a_B, ls_b, rngs, first);
            lp_hb += nn::log_prob_columns(mu_b, ls_b, a_B);

            x.row(obs_dim + 1) = a_B.row(0);
            const VectorXd r_hb = disc::reward_batch(d, x);
            const VectorXd r_a = disc::reward_batch(d, disc::zero_padded(d, x));

            for (Eigen::Index j = 0; j < m; ++j) {
                const auto row = (first + static_cast<std::size_t>(j)) * static_cast<std::size_t>(horizon) +
                                 static_cast<std::size_t>(t);
                const auto ri = static_cast<Eigen::Index>(row);
                b.obs[row] = cur[static_cast<std::size_t>(j)];
                b.a_A(ri) = a_A(0, j);
                b.a_A_sampled(ri) = a_A_sampled(0, j);
                b.a_B(ri) = a_B(0, j);
                if (demer) (*b.a_H)(ri) = a_H(0, j);
                b.r_A(ri) = r_a(j);
                b.r_HB(ri) = r_hb(j);
                b.old_log_prob_a(ri) = lp_a(j);
                b.old_log_prob_hb(ri) = lp_hb(j);
                cur[static_cast<std::size_t>(j)] = env::transition(cur[static_cast<std::size_t>(j)], a_B(0, j), period);
            }
        }
    });
    return b;
}

// ---------------------------------------------------------------------------
// trained models

enum class Method { sup, gail, mail, demer, truth };

inline std::string to_string(Method m) {
    switch (m) {
        case Method::sup: return "sup";
        case Method::gail: return "gail";
        case Method::mail: return "mail";
        case Method::demer: return "demer";
        case Method::truth: return "truth";
    }
    return "?";
}

inline Method method_from_string(const std::string& s) {
    if (s == "sup") return Method::sup;
    if (s == "gail") return Method::gail;
    if (s == "mail") return Method::mail;
    if (s == "demer") return Method::demer;
    if (s == "truth") return Method::truth;
    throw std::invalid_argument("unknown method '" + s + "' (expected sup|gail|mail|demer)");
}

/// Everything a training pipeline produces. For sup/gail the driver policy is stored as a
/// mail-variant joint (responder reads o_A ++ a_A) and there is no platform policy.
/// Method::truth stands for the ground-truth rules and carries no networks.
struct ModelBundle {
    Method method = Method::truth;
    std::uint64_t seed = 0;
    EnvParams env;
    std::optional<GaussianPolicy> platform;
    std::optional<JointPolicy> joint;
    std::optional<Discriminator> disc;
};

inline ModelBundle ground_truth_model(const EnvParams& p = {}) { return {Method::truth, 0, p, {}, {}, {}}; }

inline nlohmann::json bundle_to_json(const ModelBundle& m) {
    nlohmann::json j;
    j["kind"] = "model_bundle";
    j["method"] = to_string(m.method);
    j["seed"] = m.seed;
    j["env"] = env::env_to_json(m.env);
    nlohmann::json models = nlohmann::json::array();
    const std::string variant = m.joint ? agents::to_string(m.joint->variant) : "";
    if (m.platform) models.push_back(agents::to_checkpoint(*m.platform, variant));
    if (m.joint) {
        if (m.joint->confounder) models.push_back(agents::to_checkpoint(*m.joint->confounder, variant));
        models.push_back(agents::to_checkpoint(m.joint->responder, variant));
    }
    if (m.disc) models.push_back(disc::to_checkpoint(*m.disc));
    j["models"] = models;
    return j;
}

inline ModelBundle bundle_from_json(const nlohmann::json& j) {
    if (j.value("kind", "") != "model_bundle") throw std::runtime_error("not a model_bundle checkpoint");
    ModelBundle m;
    m.method = method_from_string(j.at("method").get<std::string>());
    m.seed = j.value("seed", std::uint64_t{0});
    m.env = env::env_from_json(j.at("env"));
    std::optional<GaussianPolicy> confounder, responder;
    std::string variant = "mail";
    for (const auto& c : j.at("models")) {
        const auto role = c.at("role").get<std::string>();
        if (role == "discriminator") {
            m.disc = disc::discriminator_from_checkpoint(c);
            continue;
        }
        if (!c.value("variant", std::string()).empty()) variant = c.at("variant").get<std::string>();
        if (role == "platform")
            m.platform = agents::policy_from_checkpoint(c);
        else if (role == "confounder")
            confounder = agents::policy_from_checkpoint(c);
        else if (role == "responder" || role == "driver")
            responder = agents::policy_from_checkpoint(c);
        else
            throw std::runtime_error("unknown checkpoint role '" + role + "'");
    }
    if (responder) {
        JointPolicy jp;
        jp.variant = agents::variant_from_string(variant);
        jp.period = m.env.period;
        jp.confounder = confounder;
        jp.responder = *responder;
        jp.validate();
        m.joint = std::move(jp);
    }
    return m;
}

inline void save_bundle(const std::string& path, const ModelBundle& m) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + path);
    os << bundle_to_json(m).dump() << "\n";
}

inline ModelBundle load_bundle(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open checkpoint " + path);
    return bundle_from_json(nlohmann::json::parse(is));
}

/// Executed platform actions for a batch of observations (rules for Method::truth).
inline VectorXd simulate_platform(const ModelBundle& m, const std::vector<Observation>& obs, ActMode mode,
                                  std::vector<Rng>* rngs = nullptr) {
    VectorXd a(static_cast<Eigen::Index>(obs.size()));
    if (!m.platform) {
        for (std::size_t i = 0; i < obs.size(); ++i)
            a(static_cast<Eigen::Index>(i)) = env::rule_platform(m.env, obs[i].tw, obs[i].r, obs[i].v);
        return a;
    }
    MatrixXd mu = m.platform->mean(agents::encode_batch(obs, m.env.period));
    if (mode == ActMode::sample) sample_in_place(mu, m.platform->head.clamped_log_std(), *rngs, 0);
    return mu.row(0).transpose().unaryExpr([](double a) { return env::clip_platform(a); });
}

struct DriverResponse {
    VectorXd a_B;
    std::optional<VectorXd> a_H;
};

/// Driver-side response to given platform actions (rules for Method::truth).
inline DriverResponse simulate_driver(const ModelBundle& m, const std::vector<Observation>& obs, const VectorXd& a_p,
                                      ActMode mode, std::vector<Rng>* rngs = nullptr) {
    const auto n = static_cast<Eigen::Index>(obs.size());
    DriverResponse out{VectorXd(n), {}};
    if (!m.joint) {
        out.a_H = VectorXd(n);
        for (Eigen::Index i = 0; i < n; ++i) {
            const auto& o = obs[static_cast<std::size_t>(i)];
            (*out.a_H)(i) = env::rule_confounder(m.env, o.tw, o.r, o.v, a_p(i));
            out.a_B(i) = env::rule_driver(o.tw, o.r, o.v, a_p(i), (*out.a_H)(i));
        }
        return out;
    }
    const auto& jp = *m.joint;
    const int obs_dim = agents::encoded_dim(m.env.period);
    MatrixXd x = agents::encode_batch(obs, m.env.period, jp.confounder ? 2 : 1);
    x.row(obs_dim) = a_p.transpose();
    if (jp.confounder) {
        MatrixXd h = jp.confounder->mean(x.topRows(obs_dim + 1));
        if (mode == ActMode::sample) sample_in_place(h, jp.confounder->head.clamped_log_std(), *rngs, 0);
        x.row(obs_dim + 1) = h.row(0);
        out.a_H = h.row(0).transpose();
    }
    MatrixXd b = jp.responder.mean(x);
    if (mode == ActMode::sample) sample_in_place(b, jp.responder.head.clamped_log_std(), *rngs, 0);
    out.a_B = b.row(0).transpose();
    return out;
}

// ---------------------------------------------------------------------------
// progress reporting

struct PhaseEvent {
    enum class Kind { rollout, trpo_joint, trpo_platform, disc_update };
    Kind kind;
    int iteration = 0;
    int phase = 0;  // generator phase within the iteration (1..K); 0 for the discriminator
    long optimizer_steps = 0;
    std::size_t rows = 0;
};

struct IterationMetrics {
    int iteration = 0;
    double mean_r_A = 0;
    double mean_r_HB = 0;
    double disc_loss_hb = 0;
    double disc_loss_a = 0;
    double kl_a = 0;
    double kl_hb = 0;
    double wallclock = 0;
};

struct TrainHooks {
    std::function<void(const PhaseEvent&)> on_event;
    std::function<void(const IterationMetrics&)> on_iteration;
    std::function<void(int, const ModelBundle&)> on_checkpoint;
    std::function<void(int, const GaussianPolicy&)> on_epoch;  // behavioural cloning only
};

inline void emit(const TrainHooks& h, const PhaseEvent& e) {
    if (h.on_event) h.on_event(e);
}

inline void check_finite(double x, const char* what, int iteration) {
    if (!std::isfinite(x))
        throw NumericError(std::string(what) + " became non-finite at iteration " + std::to_string(iteration));
}

namespace detail {
inline constexpr std::uint64_t kInitTag = 0x696e6974ULL;
inline constexpr std::uint64_t kDiscTag = 0x64697363ULL;
inline constexpr std::uint64_t kValueTag = 0x76616c75ULL;

inline MatrixXd joint_value_inputs(const SimBatch& b) {
    MatrixXd x = agents::encode_batch(b.obs, b.period, 1);
    x.row(agents::encoded_dim(b.period)) = b.a_A.transpose();
    return x;
}

inline MatrixXd concat_columns(const std::vector<MatrixXd>& parts) {
    Eigen::Index cols = 0;
    for (const auto& p : parts) cols += p.cols();
    MatrixXd out(parts.front().rows(), cols);
    Eigen::Index off = 0;
    for (const auto& p : parts) {
        out.middleCols(off, p.cols()) = p;
        off += p.cols();
    }
    return out;
}

inline double elapsed(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}
}  // namespace detail

// ---------------------------------------------------------------------------
// MAIL / DEMER

/// Adversarial multi-agent imitation: per iteration, K times [rollouts; TRPO on the joint
/// policy with r^HB; TRPO on the platform policy with r^A], then one discriminator update
/// (two task steps). The mail variant has no confounder network.
inline ModelBundle multi_agent_train(Variant variant, const PublicDataset& data, const TrainConfig& cfg,
                                     const TrainHooks& hooks = {}) {
    cfg.validate();
    if (data.episodes.empty()) throw std::invalid_argument("training dataset is empty");
    const auto t0 = std::chrono::steady_clock::now();
    const int period = data.env.period;
    const int obs_dim = agents::encoded_dim(period);
    Rng init = stream_rng(cfg.seed, detail::kInitTag);
    Rng disc_rng = stream_rng(cfg.seed, detail::kDiscTag);
    Rng value_rng = stream_rng(cfg.seed, detail::kValueTag);

    ModelBundle m;
    m.method = variant == Variant::demer ? Method::demer : Method::mail;
    m.seed = cfg.seed;
    m.env = data.env;
    m.platform = agents::make_platform_policy(init, cfg.hidden, period);
    m.joint = agents::make_joint_policy(variant, init, cfg.hidden, period);
    m.disc = disc::make_discriminator(init, cfg.hidden, period);

    GaussianPolicy& platform = *m.platform;
    JointPolicy& joint = *m.joint;
    Discriminator& dnet = *m.disc;
    platform.norm = observation_norm(data, obs_dim);
    if (joint.confounder) joint.confounder->norm = observation_norm(data, obs_dim + 1);
    joint.responder.norm = observation_norm(data, joint.responder.input_dim());
    dnet.norm = observation_norm(data, obs_dim + 2);

    ValueNet value_a = ValueNet::make(obs_dim, cfg.hidden, cfg.value_lr, observation_norm(data, obs_dim), init);
    ValueNet value_hb =
        ValueNet::make(obs_dim + 1, cfg.hidden, cfg.value_lr, observation_norm(data, obs_dim + 1), init);
    nn::OptimizerState disc_opt = nn::OptimizerState::for_size(dnet.net.param_count(), cfg.disc_lr);
    const MatrixXd real = logged_triples(data);

    for (int it = 1; it <= cfg.iterations; ++it) {
        IterationMetrics metrics;
        metrics.iteration = it;
        std::vector<MatrixXd> sim_parts;
        for (int k = 1; k <= cfg.generator_steps; ++k) {
            const auto phase = static_cast<std::uint64_t>((it - 1) * cfg.generator_steps + k);
            const SimBatch b = generate_rollouts(platform, joint, dnet, data, cfg, cfg.seed, phase);
            emit(hooks, {PhaseEvent::Kind::rollout, it, k, 0, b.rows()});
            metrics.mean_r_A += b.r_A.mean() / cfg.generator_steps;
            metrics.mean_r_HB += b.r_HB.mean() / cfg.generator_steps;

            const MatrixXd x_a = b.platform_inputs();
            const MatrixXd x_hb_value = detail::joint_value_inputs(b);
            const Advantages adv_hb =
                compute_advantages(b.r_HB, value_hb.predict(x_hb_value), b.horizon, cfg.gamma, cfg.gae_lambda);
            const Advantages adv_a =
                compute_advantages(b.r_A, value_a.predict(x_a), b.horizon, cfg.gamma, cfg.gae_lambda);

            // joint policy first, then the platform policy
            std::vector<trpo::PolicyTerm> hb_terms;
            if (joint.confounder)
                hb_terms.push_back(trpo::make_term(*joint.confounder, b.confounder_inputs(), b.a_H->transpose()));
            hb_terms.push_back(trpo::make_term(joint.responder, b.responder_inputs(), b.a_B.transpose()));
            const auto st_hb = trpo::trpo_update(hb_terms, adv_hb.normalized, b.old_log_prob_hb, cfg.trpo);
            emit(hooks, {PhaseEvent::Kind::trpo_joint, it, k, 0, b.rows()});

            std::vector<trpo::PolicyTerm> a_terms{trpo::make_term(platform, x_a, b.a_A_sampled.transpose())};
            const auto st_a = trpo::trpo_update(a_terms, adv_a.normalized, b.old_log_prob_a, cfg.trpo);
            emit(hooks, {PhaseEvent::Kind::trpo_platform, it, k, 0, b.rows()});
            metrics.kl_hb += st_hb.kl / cfg.generator_steps;
            metrics.kl_a += st_a.kl / cfg.generator_steps;

            value_hb.fit(x_hb_value, adv_hb.returns, cfg.value_epochs, cfg.value_batch, value_rng);
            value_a.fit(x_a, adv_a.returns, cfg.value_epochs, cfg.value_batch, value_rng);
            sim_parts.push_back(b.disc_inputs());
        }
        const auto losses = disc::disc_update(dnet, detail::concat_columns(sim_parts), real, disc_opt, disc_rng,
                                              cfg.disc_rows);
        emit(hooks, {PhaseEvent::Kind::disc_update, it, 0, disc_opt.step, 0});
        metrics.disc_loss_hb = losses.hb;
        metrics.disc_loss_a = losses.a;
        check_finite(metrics.disc_loss_hb, "discriminator loss", it);
        check_finite(metrics.disc_loss_a, "discriminator loss", it);
        check_finite(metrics.mean_r_A + metrics.mean_r_HB, "simulation reward", it);
        metrics.wallclock = cfg.record_wallclock ? detail::elapsed(t0) : 0.0;
        if (hooks.on_iteration) hooks.on_iteration(metrics);
        if (hooks.on_checkpoint && cfg.checkpoint_every > 0 && it % cfg.checkpoint_every == 0)
            hooks.on_checkpoint(it, m);
    }
    return m;
}

inline ModelBundle demer_train(const PublicDataset& data, const TrainConfig& cfg, const TrainHooks& hooks = {}) {
    return multi_agent_train(Variant::demer, data, cfg, hooks);
}

inline ModelBundle mail_train(const PublicDataset& data, const TrainConfig& cfg, const TrainHooks& hooks = {}) {
    return multi_agent_train(Variant::mail, data, cfg, hooks);
}

// ---------------------------------------------------------------------------
// SUP and GAIL driver-only baselines

inline JointPolicy driver_joint(GaussianPolicy driver, int period) {
    JointPolicy j;
    j.variant = Variant::mail;
    j.period = period;
    j.responder = std::move(driver);
    return j;
}

/// Driver-policy inputs o_A ++ a_A and targets a_B for every logged step.
inline std::pair<MatrixXd, MatrixXd> driver_pairs(const PublicDataset& d) {
    MatrixXd x = logged_triples(d);
    const int slot = agents::encoded_dim(d.env.period);
    MatrixXd y = x.row(slot + 1);
    return {x.topRows(slot + 1), y};
}

/// Behavioural cloning: maximum likelihood of logged a_B given (o_A, a_A).
inline ModelBundle bc_train(const PublicDataset& data, const TrainConfig& cfg, const TrainHooks& hooks = {}) {
    cfg.validate();
    if (data.episodes.empty()) throw std::invalid_argument("training dataset is empty");
    const int period = data.env.period;
    Rng init = stream_rng(cfg.seed, detail::kInitTag);
    Rng shuffle_rng = stream_rng(cfg.seed, detail::kValueTag);
    GaussianPolicy driver = agents::make_policy("driver", agents::encoded_dim(period) + 1, cfg.hidden, init);
    driver.norm = observation_norm(data, driver.input_dim());

    const auto [raw_x, y] = driver_pairs(data);
    const MatrixXd x = driver.norm.apply(raw_x);
    const auto n = static_cast<std::size_t>(x.cols());
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    nn::OptimizerState opt = nn::OptimizerState::for_size(driver.head.param_count(), cfg.bc_lr);
    VectorXd flat = nn::flatten_params(driver.head);
    const std::size_t mean_params = driver.head.mean_net.param_count();

    for (int ep = 1; ep <= cfg.bc_epochs; ++ep) {
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        for (std::size_t b = 0; b < n; b += static_cast<std::size_t>(cfg.bc_batch)) {
            const std::size_t e = std::min(n, b + static_cast<std::size_t>(cfg.bc_batch));
            const auto cols = static_cast<Eigen::Index>(e - b);
            MatrixXd xb(x.rows(), cols), yb(1, cols);
            for (std::size_t i = b; i < e; ++i) {
                xb.col(static_cast<Eigen::Index>(i - b)) = x.col(static_cast<Eigen::Index>(order[i]));
                yb(0, static_cast<Eigen::Index>(i - b)) = y(0, static_cast<Eigen::Index>(order[i]));
            }
            nn::MlpTape tape;
            const MatrixXd mu = nn::forward(driver.head.mean_net, xb, &tape);
            const VectorXd ls = driver.head.clamped_log_std();
            const double inv_var = std::exp(-2.0 * ls(0));
            const MatrixXd diff = yb - mu;
            // gradient of the mean negative log-likelihood
            VectorXd grad = VectorXd::Zero(flat.size());
            nn::backward_into(driver.head.mean_net, tape, -diff * (inv_var / static_cast<double>(cols)), grad.data());
            grad(static_cast<Eigen::Index>(mean_params)) =
                -((diff.array().square() * inv_var - 1.0).mean()) * nn::log_std_gate(driver.head.log_std(0));
            if (!grad.allFinite()) throw NumericError("behavioural cloning gradient is not finite");
            nn::optimizer_step(flat, grad, opt);
            driver.head = nn::unflatten_params(std::span<const double>(flat.data(), static_cast<std::size_t>(flat.size())),
                                               driver.head);
        }
        if (hooks.on_epoch) hooks.on_epoch(ep, driver);
    }
    return {Method::sup, cfg.seed, data.env, {}, driver_joint(std::move(driver), period), {}};
}

/// GAIL on the driver alone against the logged record as a static environment: each
/// simulated episode replays the observations and platform actions of a logged trajectory
/// and only the driver's response is generated.
inline ModelBundle gail_train(const PublicDataset& data, const TrainConfig& cfg, const TrainHooks& hooks = {}) {
    cfg.validate();
    if (data.episodes.empty()) throw std::invalid_argument("training dataset is empty");
    const auto t0 = std::chrono::steady_clock::now();
    const int period = data.env.period;
    const int obs_dim = agents::encoded_dim(period);
    const int horizon = data.env.horizon;
    Rng init = stream_rng(cfg.seed, detail::kInitTag);
    Rng disc_rng = stream_rng(cfg.seed, detail::kDiscTag);
    Rng value_rng = stream_rng(cfg.seed, detail::kValueTag);

    GaussianPolicy driver = agents::make_policy("driver", obs_dim + 1, cfg.hidden, init);
    driver.norm = observation_norm(data, obs_dim + 1);
    Discriminator dnet = disc::make_discriminator(init, cfg.hidden, period);
    dnet.norm = observation_norm(data, obs_dim + 2);
    ValueNet value = ValueNet::make(obs_dim + 1, cfg.hidden, cfg.value_lr, observation_norm(data, obs_dim + 1), init);
    nn::OptimizerState disc_opt = nn::OptimizerState::for_size(dnet.net.param_count(), cfg.disc_lr);
    const MatrixXd real = logged_triples(data);

    for (int it = 1; it <= cfg.iterations; ++it) {
        IterationMetrics metrics;
        metrics.iteration = it;
        std::vector<MatrixXd> sim_parts;
        for (int k = 1; k <= cfg.generator_steps; ++k) {
            const auto phase = static_cast<std::uint64_t>((it - 1) * cfg.generator_steps + k);
            const int n = cfg.episodes_per_step;
            std::vector<Rng> rngs;
            std::vector<Observation> obs;
            std::vector<double> a_p;
            for (int j = 0; j < n; ++j) {
                rngs.push_back(stream_rng(cfg.seed ^ kRolloutTag, phase, static_cast<std::uint64_t>(j)));
                std::uniform_int_distribution<std::size_t> pick(0, data.episodes.size() - 1);
                const auto& ep = data.episodes[pick(rngs.back())];
                for (int t = 0; t < horizon; ++t) {
                    obs.push_back(ep.steps[static_cast<std::size_t>(t)].obs);
                    a_p.push_back(ep.steps[static_cast<std::size_t>(t)].a_p);
                }
            }
            MatrixXd x = agents::encode_batch(obs, period, 2);
            for (std::size_t i = 0; i < obs.size(); ++i) x(obs_dim, static_cast<Eigen::Index>(i)) = a_p[i];
            const MatrixXd x_d = x.topRows(obs_dim + 1);
            const MatrixXd mu = driver.mean(x_d);
            MatrixXd a_d = mu;
            const VectorXd ls = driver.head.clamped_log_std();
            for (int j = 0; j < n; ++j)
                for (int t = 0; t < horizon; ++t)
                    a_d(0, j * horizon + t) += std::exp(ls(0)) * standard_normal(rngs[static_cast<std::size_t>(j)]);
            const VectorXd old_lp = nn::log_prob_columns(mu, ls, a_d);
            x.row(obs_dim + 1) = a_d.row(0);
            const VectorXd reward = disc::reward_batch(dnet, x);
            emit(hooks, {PhaseEvent::Kind::rollout, it, k, 0, obs.size()});
            metrics.mean_r_HB += reward.mean() / cfg.generator_steps;

            const Advantages adv = compute_advantages(reward, value.predict(x_d), horizon, cfg.gamma, cfg.gae_lambda);
            std::vector<trpo::PolicyTerm> terms{trpo::make_term(driver, x_d, a_d)};
            const auto st = trpo::trpo_update(terms, adv.normalized, old_lp, cfg.trpo);
            emit(hooks, {PhaseEvent::Kind::trpo_joint, it, k, 0, obs.size()});
            metrics.kl_hb += st.kl / cfg.generator_steps;
            value.fit(x_d, adv.returns, cfg.value_epochs, cfg.value_batch, value_rng);
            sim_parts.push_back(x);
        }
        metrics.disc_loss_hb = disc::disc_update_single(dnet, detail::concat_columns(sim_parts), real, disc_opt,
                                                        disc_rng, cfg.disc_rows);
        emit(hooks, {PhaseEvent::Kind::disc_update, it, 0, disc_opt.step, 0});
        check_finite(metrics.disc_loss_hb, "discriminator loss", it);
        metrics.wallclock = cfg.record_wallclock ? detail::elapsed(t0) : 0.0;
        if (hooks.on_iteration) hooks.on_iteration(metrics);
        if (hooks.on_checkpoint && cfg.checkpoint_every > 0 && it % cfg.checkpoint_every == 0)
            hooks.on_checkpoint(it, {Method::gail, cfg.seed, data.env, {}, driver_joint(driver, period), dnet});
    }
    return {Method::gail, cfg.seed, data.env, {}, driver_joint(std::move(driver), period), std::move(dnet)};
}

inline ModelBundle train_method(Method method, const PublicDataset& data, const TrainConfig& cfg,
                                const TrainHooks& hooks = {}) {
    switch (method) {
        case Method::sup: return bc_train(data, cfg, hooks);
        case Method::gail: return gail_train(data, cfg, hooks);
        case Method::mail: return mail_train(data, cfg, hooks);
        case Method::demer: return demer_train(data, cfg, hooks);
        case Method::truth: break;
    }
    throw std::invalid_argument("train_method: ground truth is not trainable");
}

// ---------------------------------------------------------------------------
// downstream policy optimization inside a simulator

enum class TaskReward { driver_response, zero };

/// A frozen driver-side model plus the toy transition and an initial-state pool.
/// Platform actions entering the environment are clipped to [0, 1].
class SimulatorEnv {
public:
    static SimulatorEnv ground_truth(const EnvParams& p, TaskReward reward = TaskReward::driver_response) {
        return SimulatorEnv("truth", ground_truth_model(p), {}, reward);
    }

    static SimulatorEnv learned(std::string name, ModelBundle model, std::vector<Observation> initial_pool,
                                TaskReward reward = TaskReward::driver_response) {
        if (!model.joint) throw std::invalid_argument("SimulatorEnv: model has no driver-side policy");
        if (initial_pool.empty()) throw std::invalid_argument("SimulatorEnv: empty initial-state pool");
        return SimulatorEnv(std::move(name), std::move(model), std::move(initial_pool), reward);
    }

    const std::string& name() const { return name_; }
    const ModelBundle& model() const { return model_; }
    const EnvParams& params() const { return model_.env; }
    bool is_ground_truth() const { return model_.method == Method::truth; }
    TaskReward task_reward() const { return reward_; }

    std::vector<Observation> reset(std::size_t n, std::vector<Rng>& rngs) const {
        std::vector<Observation> obs(n);
        for (std::size_t i = 0; i < n; ++i) {
            if (pool_.empty()) {
                obs[i] = env::sample_initial(rngs[i], model_.env);
            } else {
                std::uniform_int_distribution<std::size_t> pick(0, pool_.size() - 1);
                obs[i] = pool_[pick(rngs[i])];
            }
        }
        return obs;
    }

    static VectorXd clamp_platform(const VectorXd& a_p) {
        return a_p.unaryExpr([](double a) { return env::clip_platform(a); });
    }

    /// Driver responses to (clamped) platform actions; learned simulators sample.
    VectorXd respond(const std::vector<Observation>& obs, const VectorXd& a_p, std::vector<Rng>& rngs) const {
        return simulate_driver(model_, obs, clamp_platform(a_p), ActMode::sample, &rngs).a_B;
    }

    double reward(double a_b) const { return reward_ == TaskReward::zero ? 0.0 : a_b; }

private:
    SimulatorEnv(std::string name, ModelBundle model, std::vector<Observation> pool, TaskReward reward)
        : name_(std::move(name)), model_(std::move(model)), pool_(std::move(pool)), reward_(reward) {}

    std::string name_;
    ModelBundle model_;
    std::vector<Observation> pool_;
    TaskReward reward_;
};

inline std::vector<Observation> initial_pool(const PublicDataset& d) {
    std::vector<Observation> pool;
    for (const auto& e : d.episodes) pool.push_back(e.steps.front().obs);
    return pool;
}

inline constexpr std::uint64_t kPolicyRlTag = 0x72656366ULL;

struct RlProgress {
    int iteration = 0;
    double mean_return = 0;
    double kl = 0;
};

/// Trains a fresh platform policy by TRPO against the simulator's task reward.
inline GaussianPolicy train_policy_in_simulator(const SimulatorEnv& sim, const TrainConfig& cfg, InputNorm norm = {},
                                                const std::function<void(const RlProgress&)>& on_iteration = {}) {
    cfg.validate();
    const int period = sim.params().period;
    const int horizon = sim.params().horizon;
    const int obs_dim = agents::encoded_dim(period);
    const int n = cfg.rl_episodes;
    Rng init = stream_rng(cfg.seed ^ kPolicyRlTag, detail::kInitTag);
    Rng value_rng = stream_rng(cfg.seed ^ kPolicyRlTag, detail::kValueTag);
    GaussianPolicy policy = agents::make_platform_policy(init, cfg.hidden, period);
    policy.role = "recommendation";
    policy.norm = norm;
    ValueNet value = ValueNet::make(obs_dim, cfg.hidden, cfg.value_lr, norm, init);

    for (int it = 1; it <= cfg.rl_iterations; ++it) {
        std::vector<Rng> rngs;
        for (int j = 0; j < n; ++j)
            rngs.push_back(stream_rng(cfg.seed ^ kPolicyRlTag, static_cast<std::uint64_t>(it), static_cast<std::uint64_t>(j)));
        std::vector<Observation> cur = sim.reset(static_cast<std::size_t>(n), rngs);
        const auto rows = static_cast<Eigen::Index>(n) * horizon;
        std::vector<Observation> obs(static_cast<std::size_t>(rows));
        MatrixXd actions(1, rows);
        VectorXd rewards(rows), old_lp(rows);
        const VectorXd ls = policy.head.clamped_log_std();
        for (int t = 0; t < horizon; ++t) {
            const MatrixXd mu = policy.mean(agents::encode_batch(cur, period));
            MatrixXd a = mu;
            sample_in_place(a, ls, rngs, 0);
            const VectorXd lp = nn::log_prob_columns(mu, ls, a);
            const VectorXd a_b = sim.respond(cur, a.row(0).transpose(), rngs);
            for (int j = 0; j < n; ++j) {
                const Eigen::Index row = static_cast<Eigen::Index>(j) * horizon + t;
                obs[static_cast<std::size_t>(row)] = cur[static_cast<std::size_t>(j)];
                actions(0, row) = a(0, j);
                rewards(row) = sim.reward(a_b(j));
                old_lp(row) = lp(j);
                cur[static_cast<std::size_t>(j)] = env::transition(cur[static_cast<std::size_t>(j)], a_b(j), period);
            }
        }
        const MatrixXd x = agents::encode_batch(obs, period);
        const Advantages adv = compute_advantages(rewards, value.predict(x), horizon, cfg.gamma, cfg.gae_lambda);
        std::vector<trpo::PolicyTerm> terms{trpo::make_term(policy, x, actions)};
        const auto st = trpo::trpo_update(terms, adv.normalized, old_lp, cfg.trpo);
        value.fit(x, adv.returns, cfg.value_epochs, cfg.value_batch, value_rng);
        if (on_iteration) on_iteration({it, rewards.sum() / n, st.kl});
    }
    return policy;
}

}  // namespace demer::train
