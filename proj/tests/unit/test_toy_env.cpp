#include <gtest/gtest.h>

#include <cmath>
#include <set>
#include <sstream>

#include "demer/toy_env.hpp"

using namespace demer;
using namespace demer::env;

TEST(Rules, DeltaV) {
    EXPECT_EQ(delta_v(5), 1.0);
    EXPECT_EQ(delta_v(7), -1.0);
    for (int tw : {1, 2, 3, 4, 6}) EXPECT_EQ(delta_v(tw), 0.0);
    EXPECT_THROW(delta_v(0), std::out_of_range);
    EXPECT_THROW(delta_v(8), std::out_of_range);
}

TEST(Rules, PlatformExamples) {
    EXPECT_DOUBLE_EQ(rule_platform(7, 1.0, 9), 1.0);
    for (int tw = 1; tw <= 7; ++tw)
        for (double r : {0.5, 1.0, 1.5}) EXPECT_EQ(rule_platform(tw, r, 10.0), 0.0);
    EXPECT_EQ(rule_platform(7, 1.3, 11), 0.0);
    EXPECT_NEAR(rule_platform(3, 1.0, 9.5), 0.5 * 3 / 7, 1e-15);
}

TEST(Rules, ConfounderExamples) {
    EXPECT_DOUBLE_EQ(rule_confounder(7, 1.0, 9, 0), -1.0);
    EXPECT_EQ(rule_confounder(7, 1.0, 7, 0), 0.0);
    EXPECT_DOUBLE_EQ(rule_confounder(7, 2.0, 9.25, 0.5), -1.0);
}

TEST(Rules, DriverExamples) {
    EXPECT_NEAR(rule_driver(5, 1.0, 9.0, 0.3, -0.1), 1.2, 1e-15);
    EXPECT_EQ(rule_driver(2, 1.0, 9.0, 0, 0), 0.0);
    EXPECT_EQ(rule_driver(7, 1.0, 9.0, 1, -1), -1.0);
}

TEST(Rules, ClampRangesHoldEverywhere) {
    Rng rng(1);
    for (int i = 0; i < 20000; ++i) {
        const int tw = 1 + static_cast<int>(rng() % 7);
        const double r = uniform(rng, -3, 3), v = uniform(rng, -20, 30), ap = uniform(rng, -5, 5);
        const double p = rule_platform(tw, r, v), h = rule_confounder(tw, r, v, ap);
        ASSERT_GE(p, 0.0);
        ASSERT_LE(p, 1.0);
        ASSERT_GE(h, -1.0);
        ASSERT_LE(h, 0.0);
    }
}

TEST(Rules, Monotonicity) {
    Rng rng(2);
    for (int i = 0; i < 5000; ++i) {
        const int tw = 1 + static_cast<int>(rng() % 6);
        const double r = uniform(rng, 0.5, 1.5), v = uniform(rng, 7, 11), dv = uniform(rng, 0, 0.5);
        const double ap = uniform(rng, 0, 1);
        ASSERT_LE(rule_platform(tw, r, v + dv), rule_platform(tw, r, v));
        ASSERT_LE(rule_confounder(tw, r, v + dv, ap), rule_confounder(tw, r, v, ap));
        ASSERT_GE(rule_platform(tw + 1, r, v), rule_platform(tw, r, v));
    }
}

TEST(Initial, StaticFactorExamples) {
    const EnvParams p;
    EXPECT_DOUBLE_EQ(static_factor(p, 9.0), 1.0);
    EXPECT_NEAR(static_factor(p, 10.2), 0.5, 1e-12);
    EXPECT_NEAR(static_factor(p, 7.8), 1.5, 1e-12);
    const Observation o = initial_observation(p, 9.0);
    EXPECT_EQ(o.tw, 1);
    EXPECT_EQ(o.r, 1.0);
}

TEST(Initial, SamplesInRangeAndInvertible) {
    Rng rng(3);
    const EnvParams p;
    for (int i = 0; i < 5000; ++i) {
        const Observation o = sample_initial(rng, p);
        ASSERT_EQ(o.tw, 1);
        ASSERT_GE(o.v, 7.8);
        ASSERT_LE(o.v, 10.2);
        ASSERT_GE(o.r, 0.5 - 1e-12);
        ASSERT_LE(o.r, 1.5 + 1e-12);
        ASSERT_NEAR(9.0 + 2.4 * (1.0 - o.r), o.v, 1e-9);
    }
}

TEST(Transition, Examples) {
    EXPECT_EQ(transition({7, 1.2, 9.0}, 0.4).tw, 1);
    EXPECT_EQ(transition({3, 1.0, 9}, 0.0), (Observation{4, 1.0, 9}));
    const Observation o = transition({1, 0.8, 9.5}, -1.2);
    EXPECT_EQ(o.tw, 2);
    EXPECT_EQ(o.r, 0.8);
    EXPECT_NEAR(o.v, 8.3, 1e-12);
}

TEST(Episodes, FirstStepFromCenter) {
    const TruthEpisode ep = rollout_rules(EnvParams{}, initial_observation(EnvParams{}, 9.0), 0);
    const auto& s = ep.steps.front();
    EXPECT_NEAR(s.a_p, 1.0 / 7, 1e-12);
    const double want_h = (8.0 - 9.0 - 1.0 / 14) / 7;
    EXPECT_NEAR(s.a_h, want_h, 1e-12);
    EXPECT_NEAR(s.a_h, -0.1531, 1e-4);
    EXPECT_NEAR(s.a_d, -0.0102, 1e-4);
    EXPECT_NEAR(s.a_d, 1.0 / 7 + want_h, 1e-12);
}

TEST(Episodes, GeneratedDatasetInvariants) {
    const EnvParams p;
    const TrajectorySet set = generate_dataset(1000, p, 42);
    ASSERT_EQ(set.episodes.size(), 1000u);
    for (const auto& e : set.episodes) {
        ASSERT_EQ(e.steps.size(), 8u);
        for (std::size_t t = 0; t < e.steps.size(); ++t) {
            const auto& s = e.steps[t];
            const Observation next = t + 1 < e.steps.size() ? e.steps[t + 1].obs : e.terminal;
            ASSERT_EQ(next.v, s.obs.v + s.a_d);
            ASSERT_EQ(next.tw, s.obs.tw % 7 + 1);
            ASSERT_EQ(next.r, e.steps.front().obs.r);
            ASSERT_EQ(s.obs.tw, static_cast<int>(t % 7) + 1);
            ASSERT_GE(s.a_p, 0.0);
            ASSERT_LE(s.a_p, 1.0);
            ASSERT_GE(s.a_h, -1.0);
            ASSERT_LE(s.a_h, 0.0);
        }
        // replaying the rules reproduces everything bit for bit
        const TruthEpisode re = rollout_rules(p, e.steps.front().obs, e.id);
        for (std::size_t t = 0; t < e.steps.size(); ++t) {
            ASSERT_EQ(re.steps[t].obs, e.steps[t].obs);
            ASSERT_EQ(re.steps[t].a_p, e.steps[t].a_p);
            ASSERT_EQ(re.steps[t].a_h, e.steps[t].a_h);
            ASSERT_EQ(re.steps[t].a_d, e.steps[t].a_d);
        }
    }
}

TEST(Episodes, DeterministicAndSeedSensitive) {
    EXPECT_EQ(serialize(generate_dataset(1, EnvParams{}, 5)), serialize(generate_dataset(1, EnvParams{}, 5)));
    EXPECT_EQ(serialize(generate_dataset(50, EnvParams{}, 5)), serialize(generate_dataset(50, EnvParams{}, 5)));
    EXPECT_NE(serialize(generate_dataset(50, EnvParams{}, 5)), serialize(generate_dataset(50, EnvParams{}, 6)));
}

TEST(Episodes, PrefixStableAcrossSizes) {
    const auto small = generate_dataset(10, EnvParams{}, 9);
    const auto big = generate_dataset(100, EnvParams{}, 9);
    for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(small.episodes[i].steps[3].a_d, big.episodes[i].steps[3].a_d);
}

TEST(Params, Validation) {
    EnvParams p;
    EXPECT_NO_THROW(p.validate());
    p.th = 11;
    EXPECT_THROW(p.validate(), std::invalid_argument);
    p = {};
    p.wave = 0;
    EXPECT_THROW(p.validate(), std::invalid_argument);
    p = {};
    p.horizon = 0;
    EXPECT_THROW(generate_dataset(3, p, 1), std::invalid_argument);
    EXPECT_THROW(generate_dataset(0, EnvParams{}, 1), std::invalid_argument);
}

TEST(Serialization, RoundTripIsExact) {
    const auto set = generate_dataset(30, EnvParams{}, 77);
    std::istringstream is(serialize(set));
    const auto back = read_trajectory_set(is);
    ASSERT_EQ(back.episodes.size(), set.episodes.size());
    EXPECT_EQ(back.env, set.env);
    EXPECT_EQ(back.seed, 77u);
    for (std::size_t i = 0; i < set.episodes.size(); ++i) {
        EXPECT_EQ(back.episodes[i].id, set.episodes[i].id);
        EXPECT_EQ(back.episodes[i].terminal, set.episodes[i].terminal);
        for (std::size_t t = 0; t < 8; ++t) {
            EXPECT_EQ(back.episodes[i].steps[t].obs, set.episodes[i].steps[t].obs);
            EXPECT_EQ(back.episodes[i].steps[t].a_p, set.episodes[i].steps[t].a_p);
            EXPECT_EQ(back.episodes[i].steps[t].a_h, set.episodes[i].steps[t].a_h);
            EXPECT_EQ(back.episodes[i].steps[t].a_d, set.episodes[i].steps[t].a_d);
        }
    }
    EXPECT_EQ(serialize(back), serialize(set));
}

TEST(Serialization, HeaderAndLineCount) {
    const std::string text = serialize(generate_dataset(12, EnvParams{}, 3));
    std::istringstream is(text);
    std::string line;
    std::getline(is, line);
    const auto header = nlohmann::json::parse(line);
    EXPECT_EQ(header.at("kind"), "trajectory_set");
    EXPECT_EQ(header.at("n"), 12);
    EXPECT_EQ(header.at("env").at("TP"), 10.0);
    int lines = 1;
    while (std::getline(is, line)) ++lines;
    EXPECT_EQ(lines, 13);
}

TEST(Serialization, PublicViewDropsConfounder) {
    const auto set = generate_dataset(5, EnvParams{}, 4);
    std::istringstream is(serialize(set));
    const PublicDataset pub = read_public_dataset(is);
    const PublicDataset view = set.public_view();
    ASSERT_EQ(pub.episodes.size(), 5u);
    EXPECT_EQ(pub.rows(), 40u);
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t t = 0; t < 8; ++t) {
            EXPECT_EQ(pub.episodes[i].steps[t].a_d, set.episodes[i].steps[t].a_d);
            EXPECT_EQ(view.episodes[i].steps[t].a_p, set.episodes[i].steps[t].a_p);
        }
}

TEST(Serialization, RejectsOtherFiles) {
    std::istringstream empty("");
    EXPECT_THROW(read_trajectory_set(empty), std::runtime_error);
    std::istringstream wrong("{\"kind\":\"model_bundle\"}\n");
    EXPECT_THROW(read_public_dataset(wrong), std::runtime_error);
}

TEST(Split, EightyTwentyById) {
    const auto pub = generate_dataset(100, EnvParams{}, 1).public_view();
    const Split s = split_by_id(pub, 0.2);
    EXPECT_EQ(s.train.episodes.size(), 80u);
    EXPECT_EQ(s.test.episodes.size(), 20u);
    std::set<std::int64_t> ids;
    for (const auto& e : s.train.episodes) {
        EXPECT_LT(e.id, 80);
        ids.insert(e.id);
    }
    for (const auto& e : s.test.episodes) {
        EXPECT_GE(e.id, 80);
        ids.insert(e.id);
    }
    EXPECT_EQ(ids.size(), 100u);
}
