#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "demer/eval.hpp"
#include "demer/trainers.hpp"

using namespace demer;
using namespace demer::train;
using agents::ActMode;
using agents::Variant;
using env::EnvParams;

namespace {

env::PublicDataset toy_data(std::size_t n, std::uint64_t seed = 1) {
    return env::generate_dataset(n, EnvParams{}, seed).public_view();
}

TrainConfig tiny_config() {
    TrainConfig c;
    c.episodes_per_step = 20;
    c.iterations = 2;
    c.hidden = {16, 16};
    c.seed = 3;
    return c;
}

struct Models {
    agents::GaussianPolicy platform;
    agents::JointPolicy joint;
    disc::Discriminator d;
};

Models fresh_models(Variant v, std::uint64_t seed = 1) {
    Rng rng(seed);
    Models m{agents::make_platform_policy(rng, {16, 16}), agents::make_joint_policy(v, rng, {16, 16}),
             disc::make_discriminator(rng, {16, 16})};
    return m;
}

}  // namespace

TEST(Advantages, ConstantRewardUndiscounted) {
    const double c = 0.37;
    const auto a = compute_advantages(VectorXd::Constant(16, c), VectorXd::Zero(16), 8, 1.0, 0.95);
    EXPECT_NEAR(a.returns(0), 8 * c, 1e-12);
    EXPECT_NEAR(a.returns(8), 8 * c, 1e-12);
    EXPECT_NEAR(a.returns(7), c, 1e-12);
}

TEST(Advantages, LambdaOneEqualsReturn) {
    Rng rng(1);
    VectorXd r(24);
    for (Eigen::Index i = 0; i < 24; ++i) r(i) = uniform(rng, 0, 2);
    const auto a = compute_advantages(r, VectorXd::Zero(24), 8, 0.99, 1.0);
    EXPECT_LE((a.raw - a.returns).cwiseAbs().maxCoeff(), 1e-12);
    // independent reward-to-go
    for (int e = 0; e < 3; ++e)
        for (int t = 0; t < 8; ++t) {
            double g = 0;
            for (int k = 7; k >= t; --k) g = r(e * 8 + k) + 0.99 * g;
            EXPECT_NEAR(a.returns(e * 8 + t), g, 1e-12);
        }
}

TEST(Advantages, GeometricSum) {
    const auto a = compute_advantages(VectorXd::Ones(8), VectorXd::Zero(8), 8, 0.99, 0.95);
    EXPECT_NEAR(a.returns(0), (1 - std::pow(0.99, 8)) / 0.01, 1e-12);
    EXPECT_NEAR(a.returns(0), 7.7255, 1e-4);
}

TEST(Advantages, GaeMatchesResidualSum) {
    Rng rng(2);
    VectorXd r(8), v(8);
    for (int i = 0; i < 8; ++i) {
        r(i) = uniform(rng, 0, 1);
        v(i) = uniform(rng, 0, 3);
    }
    const double g = 0.9, l = 0.8;
    const auto a = compute_advantages(r, v, 8, g, l);
    for (int t = 0; t < 8; ++t) {
        double want = 0, w = 1;
        for (int k = t; k < 8; ++k, w *= g * l) want += w * (r(k) + g * (k + 1 < 8 ? v(k + 1) : 0.0) - v(k));
        EXPECT_NEAR(a.raw(t), want, 1e-12);
    }
    EXPECT_NEAR(a.normalized.mean(), 0.0, 1e-12);
    EXPECT_NEAR(std::sqrt(a.normalized.squaredNorm() / 8), 1.0, 1e-12);
    EXPECT_THROW(compute_advantages(VectorXd::Zero(7), VectorXd::Zero(7), 8, 0.99, 0.95), DimensionError);
}

TEST(Advantages, ExactBaselineMakesConstantRewardANoOp) {
    // constant reward with its exact value baseline gives zero advantages, so TRPO leaves the policy alone
    const double c = std::log(2.0), g = 0.99;
    VectorXd values(8);
    for (int t = 0; t < 8; ++t) values(t) = c * (1 - std::pow(g, 8 - t)) / (1 - g);
    const auto a = compute_advantages(VectorXd::Constant(8, c), values, 8, g, 0.95);
    EXPECT_LE(a.raw.cwiseAbs().maxCoeff(), 1e-12);
    Rng rng(3);
    auto p = agents::make_policy("driver", 10, {8}, rng);
    const MatrixXd x = MatrixXd::Random(10, 8), act = MatrixXd::Random(1, 8);
    const VectorXd before = nn::flatten_params(p.head);
    trpo::TrpoConfig cfg;
    cfg.entropy_coef = 0;
    trpo::trpo_update({trpo::make_term(p, x, act)}, VectorXd::Zero(8),
                      nn::log_prob_columns(p.mean(x), p.head.clamped_log_std(), act), cfg);
    EXPECT_EQ(nn::flatten_params(p.head), before);
}

TEST(Rollouts, ShapesAndUntrainedRewards) {
    const auto data = toy_data(100);
    const Models m = fresh_models(Variant::demer);
    TrainConfig cfg = tiny_config();
    cfg.episodes_per_step = 37;
    const SimBatch b = generate_rollouts(m.platform, m.joint, m.d, data, cfg, 5, 1);
    EXPECT_EQ(b.rows(), 37u * 8);
    EXPECT_EQ(b.r_A.size(), 37 * 8);
    ASSERT_TRUE(b.a_H.has_value());
    EXPECT_LE((b.r_A.array() - 0.6931471805599453).abs().maxCoeff(), 1e-9);
    EXPECT_LE((b.r_HB.array() - 0.6931471805599453).abs().maxCoeff(), 1e-9);
    EXPECT_GT(b.r_A.minCoeff(), 0.0);
}

TEST(Rollouts, EpisodesFollowTransitionAndStartFromLoggedStates) {
    const auto data = toy_data(50);
    Models m = fresh_models(Variant::demer, 2);
    const SimBatch b = generate_rollouts(m.platform, m.joint, m.d, data, tiny_config(), 9, 4);
    for (int e = 0; e < b.episodes; ++e) {
        const auto first = b.obs[static_cast<std::size_t>(e * 8)];
        bool logged = false;
        for (const auto& ep : data.episodes) logged = logged || ep.steps.front().obs == first;
        EXPECT_TRUE(logged);
        for (int t = 0; t + 1 < 8; ++t) {
            const std::size_t i = static_cast<std::size_t>(e * 8 + t);
            EXPECT_EQ(b.obs[i + 1], env::transition(b.obs[i], b.a_B(static_cast<Eigen::Index>(i))));
            EXPECT_EQ(b.episode_of(i), e);
            EXPECT_EQ(b.step_of(i), t);
        }
    }
    EXPECT_GE(b.a_A.minCoeff(), 0.0);
    EXPECT_LE(b.a_A.maxCoeff(), 1.0);
}

TEST(Rollouts, RecordedLogProbsMatchPolicies) {
    const auto data = toy_data(30);
    Models m = fresh_models(Variant::demer, 3);
    const SimBatch b = generate_rollouts(m.platform, m.joint, m.d, data, tiny_config(), 1, 1);
    for (std::size_t i = 0; i < b.rows(); i += 13) {
        const auto ri = static_cast<Eigen::Index>(i);
        const double a = b.a_A_sampled(ri);
        EXPECT_NEAR(b.old_log_prob_a(ri), m.platform.log_prob(agents::encode_observation(b.obs[i]), {&a, 1}), 1e-12);
        EXPECT_NEAR(b.old_log_prob_hb(ri), agents::joint_log_prob(m.joint, b.obs[i], b.a_A(ri), (*b.a_H)(ri), b.a_B(ri)),
                    1e-12);
    }
}

TEST(Rollouts, DeterministicGivenSeeds) {
    const auto data = toy_data(30);
    const Models m = fresh_models(Variant::demer);
    const SimBatch x = generate_rollouts(m.platform, m.joint, m.d, data, tiny_config(), 4, 2);
    const SimBatch y = generate_rollouts(m.platform, m.joint, m.d, data, tiny_config(), 4, 2);
    EXPECT_EQ(x.a_B, y.a_B);
    EXPECT_EQ(*x.a_H, *y.a_H);
    EXPECT_EQ(x.old_log_prob_hb, y.old_log_prob_hb);
    const SimBatch z = generate_rollouts(m.platform, m.joint, m.d, data, tiny_config(), 4, 3);
    EXPECT_NE(x.a_B, z.a_B);
}

TEST(Rollouts, MailHasNoConfounderField) {
    const auto data = toy_data(30);
    const Models m = fresh_models(Variant::mail);
    const SimBatch b = generate_rollouts(m.platform, m.joint, m.d, data, tiny_config(), 4, 2);
    EXPECT_FALSE(b.a_H.has_value());
    EXPECT_EQ(b.responder_inputs().rows(), 10);
    EXPECT_THROW(generate_rollouts(m.platform, m.joint, m.d, env::PublicDataset{}, tiny_config(), 4, 2),
                 std::invalid_argument);
}

TEST(Algorithm, PhaseAccounting) {
    const auto data = toy_data(60);
    std::vector<PhaseEvent> events;
    TrainHooks hooks;
    hooks.on_event = [&](const PhaseEvent& e) { events.push_back(e); };
    const TrainConfig cfg = tiny_config();
    demer_train(data, cfg, hooks);
    using K = PhaseEvent::Kind;
    ASSERT_EQ(events.size(), 2u * (3 * 3 + 1));
    int rollouts = 0, discs = 0;
    std::size_t i = 0;
    for (int it = 1; it <= 2; ++it) {
        for (int k = 1; k <= 3; ++k) {
            EXPECT_EQ(events[i].kind, K::rollout);
            EXPECT_EQ(events[i].rows, 20u * 8);
            EXPECT_EQ(events[i + 1].kind, K::trpo_joint);
            EXPECT_EQ(events[i + 2].kind, K::trpo_platform);
            EXPECT_EQ(events[i].phase, k);
            EXPECT_EQ(events[i].iteration, it);
            i += 3;
            ++rollouts;
        }
        EXPECT_EQ(events[i].kind, K::disc_update);
        EXPECT_EQ(events[i].optimizer_steps, 2 * it);
        ++i;
        ++discs;
    }
    EXPECT_EQ(rollouts, 6);
    EXPECT_EQ(discs, 2);
}

TEST(Algorithm, TrainingIsDeterministic) {
    const auto data = toy_data(40);
    std::vector<IterationMetrics> m1, m2;
    TrainHooks h1, h2;
    h1.on_iteration = [&](const IterationMetrics& m) { m1.push_back(m); };
    h2.on_iteration = [&](const IterationMetrics& m) { m2.push_back(m); };
    const ModelBundle a = demer_train(data, tiny_config(), h1);
    const ModelBundle b = demer_train(data, tiny_config(), h2);
    EXPECT_EQ(bundle_to_json(a).dump(), bundle_to_json(b).dump());
    ASSERT_EQ(m1.size(), 2u);
    for (std::size_t i = 0; i < 2; ++i) {
        EXPECT_EQ(m1[i].mean_r_HB, m2[i].mean_r_HB);
        EXPECT_EQ(m1[i].disc_loss_a, m2[i].disc_loss_a);
        EXPECT_EQ(m1[i].wallclock, 0.0);
    }
    TrainConfig other = tiny_config();
    other.seed = 4;
    EXPECT_NE(bundle_to_json(demer_train(data, other)).dump(), bundle_to_json(a).dump());
}

TEST(Algorithm, MailVariantShape) {
    const auto data = toy_data(40);
    const ModelBundle m = mail_train(data, tiny_config());
    EXPECT_EQ(m.method, Method::mail);
    ASSERT_TRUE(m.joint.has_value());
    EXPECT_FALSE(m.joint->confounder.has_value());
    EXPECT_EQ(m.joint->responder.head.mean_net.num_layers(), 5u);
    const ModelBundle d = demer_train(data, tiny_config());
    EXPECT_EQ(d.joint->confounder->head.mean_net.num_layers() + d.joint->responder.head.mean_net.num_layers(), 6u);
}

TEST(Algorithm, CheckpointHookCadence) {
    const auto data = toy_data(30);
    TrainConfig cfg = tiny_config();
    cfg.iterations = 4;
    cfg.checkpoint_every = 2;
    std::vector<int> seen;
    TrainHooks hooks;
    hooks.on_checkpoint = [&](int it, const ModelBundle&) { seen.push_back(it); };
    demer_train(data, cfg, hooks);
    EXPECT_EQ(seen, (std::vector<int>{2, 4}));
}

TEST(Config, Validation) {
    TrainConfig c;
    EXPECT_NO_THROW(c.validate());
    c.gamma = 0;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = {};
    c.generator_steps = 0;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = {};
    c.trpo.max_kl = 0;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    EXPECT_EQ(TrainConfig{}.episodes_per_step, 200);
    EXPECT_EQ(TrainConfig{}.trpo.entropy_coef, 1e-3);
}

TEST(Baselines, BcFitsSingleRepeatedPair) {
    env::PublicDataset d;
    for (int e = 0; e < 10; ++e) {
        env::LoggedEpisode ep{e, {}, {}};
        for (int t = 0; t < 8; ++t) ep.steps.push_back({{2, 1.1, 9.4}, 0.3, 0.42});
        d.episodes.push_back(ep);
    }
    TrainConfig cfg = tiny_config();
    cfg.bc_epochs = 1500;
    cfg.bc_lr = 1e-2;
    const ModelBundle m = bc_train(d, cfg);
    ASSERT_TRUE(m.joint.has_value());
    const VectorXd a = simulate_driver(m, {{2, 1.1, 9.4}}, VectorXd::Constant(1, 0.3), ActMode::mean).a_B;
    EXPECT_NEAR(a(0), 0.42, 1e-2);
}

TEST(Baselines, BcLikelihoodImproves) {
    const auto split = env::split_by_id(toy_data(300));
    TrainConfig cfg = tiny_config();
    cfg.bc_epochs = 30;
    std::vector<double> ll;
    TrainHooks hooks;
    hooks.on_epoch = [&](int, const agents::GaussianPolicy&) { ll.push_back(0); };
    const ModelBundle m = bc_train(split.train, cfg, hooks);
    EXPECT_EQ(ll.size(), 30u);
    const ModelBundle fresh = [&] {
        TrainConfig c0 = cfg;
        c0.bc_epochs = 0;
        return bc_train(split.train, c0);
    }();
    EXPECT_GT(eval::mean_log_likelihood(m, split.test), eval::mean_log_likelihood(fresh, split.test) + 0.5);
}

TEST(Baselines, GailProducesDriverOnly) {
    const auto data = toy_data(40);
    std::vector<PhaseEvent> events;
    TrainHooks hooks;
    hooks.on_event = [&](const PhaseEvent& e) { events.push_back(e); };
    const ModelBundle m = gail_train(data, tiny_config(), hooks);
    EXPECT_EQ(m.method, Method::gail);
    EXPECT_FALSE(m.platform.has_value());
    ASSERT_TRUE(m.joint.has_value());
    EXPECT_EQ(m.joint->responder.input_dim(), 10);
    EXPECT_FALSE(events.empty());
}

TEST(Bundle, RoundTripReproducesOutputs) {
    const auto data = toy_data(30);
    const ModelBundle m = demer_train(data, tiny_config());
    const auto path = (std::filesystem::temp_directory_path() / "demer_bundle_test.json").string();
    save_bundle(path, m);
    const ModelBundle back = load_bundle(path);
    std::filesystem::remove(path);
    EXPECT_EQ(back.method, Method::demer);
    EXPECT_EQ(bundle_to_json(back).dump(), bundle_to_json(m).dump());
    const std::vector<env::Observation> obs{{1, 1.0, 9.0}, {6, 0.7, 10.3}};
    const VectorXd ap = simulate_platform(m, obs, ActMode::mean);
    EXPECT_EQ(simulate_platform(back, obs, ActMode::mean), ap);
    EXPECT_EQ(simulate_driver(back, obs, ap, ActMode::mean).a_B, simulate_driver(m, obs, ap, ActMode::mean).a_B);
    EXPECT_EQ(disc::prob_batch(*back.disc, logged_triples(data)), disc::prob_batch(*m.disc, logged_triples(data)));
}

TEST(Bundle, TruthModelUsesRules) {
    const ModelBundle t = ground_truth_model();
    const std::vector<env::Observation> obs{{7, 1.0, 9.0}};
    const VectorXd ap = simulate_platform(t, obs, ActMode::mean);
    EXPECT_EQ(ap(0), 1.0);
    const DriverResponse r = simulate_driver(t, obs, ap, ActMode::mean);
    EXPECT_EQ((*r.a_H)(0), env::rule_confounder(7, 1.0, 9.0, 1.0));
    EXPECT_EQ(r.a_B(0), env::rule_driver(7, 1.0, 9.0, 1.0, (*r.a_H)(0)));
}

TEST(DownstreamRl, ZeroRewardLeavesPolicyAtInit) {
    const SimulatorEnv sim = SimulatorEnv::ground_truth(EnvParams{}, TaskReward::zero);
    TrainConfig cfg = tiny_config();
    cfg.trpo.entropy_coef = 0;
    cfg.rl_iterations = 5;
    cfg.rl_episodes = 50;
    std::vector<RlProgress> progress;
    const auto p5 = train_policy_in_simulator(sim, cfg, {}, [&](const RlProgress& r) { progress.push_back(r); });
    ASSERT_EQ(progress.size(), 5u);
    for (const auto& r : progress) EXPECT_EQ(r.kl, 0.0);
    cfg.rl_iterations = 1;
    const auto p1 = train_policy_in_simulator(sim, cfg);
    EXPECT_EQ(nn::flatten_params(p5.head), nn::flatten_params(p1.head));
    EXPECT_EQ(p5.role, "recommendation");
}

TEST(DownstreamRl, TrueEnvironmentPolicyMatchesRulePolicy) {
    const SimulatorEnv sim = SimulatorEnv::ground_truth(EnvParams{});
    TrainConfig cfg;
    cfg.seed = 2;
    const auto policy = train_policy_in_simulator(sim, cfg);
    const auto learned = eval::cross_evaluate(eval::policy_platform_fn(policy), sim, 1000, 7);
    const auto rule = eval::cross_evaluate(eval::rule_platform_fn(), sim, 1000, 7);
    EXPECT_GE(learned.mean, rule.mean - 0.5);
}

TEST(DownstreamRl, LearnedSimulatorIsNeverMutated) {
    const auto data = toy_data(30);
    const ModelBundle m = mail_train(data, tiny_config());
    const SimulatorEnv sim = SimulatorEnv::learned("mail", m, initial_pool(data));
    const std::string before = bundle_to_json(sim.model()).dump();
    TrainConfig cfg = tiny_config();
    cfg.rl_iterations = 3;
    cfg.rl_episodes = 20;
    train_policy_in_simulator(sim, cfg);
    EXPECT_EQ(bundle_to_json(sim.model()).dump(), before);
    ModelBundle empty = m;
    empty.joint.reset();
    EXPECT_THROW(SimulatorEnv::learned("x", empty, initial_pool(data)), std::invalid_argument);
}
