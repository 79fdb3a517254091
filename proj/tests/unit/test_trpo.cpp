#include <gtest/gtest.h>

#include <cmath>
#include <cstring>

#include "demer/trpo.hpp"

using namespace demer;
using namespace demer::trpo;
using agents::GaussianPolicy;

namespace {

GaussianPolicy small_policy(Rng& rng, int in = 4, int out = 1) {
    GaussianPolicy p{"test", nn::GaussianHead::init({in, 8, out}, rng), {}};
    for (auto& b : p.head.mean_net.biases)
        for (Eigen::Index i = 0; i < b.size(); ++i) b(i) = uniform(rng, -0.3, 0.3);
    return p;
}

MatrixXd random_matrix(Eigen::Index r, Eigen::Index c, Rng& rng) {
    MatrixXd m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = standard_normal(rng);
    return m;
}

struct Batch {
    MatrixXd inputs, actions;
    VectorXd adv, old_lp;
};

Batch sample_batch(const GaussianPolicy& p, int rows, Rng& rng) {
    Batch b;
    b.inputs = random_matrix(p.input_dim(), rows, rng);
    const MatrixXd mu = p.mean(b.inputs);
    const VectorXd ls = p.head.clamped_log_std();
    b.actions = mu;
    for (Eigen::Index i = 0; i < b.actions.size(); ++i)
        b.actions.data()[i] += std::exp(ls(i % b.actions.rows())) * standard_normal(rng);
    b.old_lp = nn::log_prob_columns(mu, ls, b.actions);
    b.adv = random_matrix(rows, 1, rng).col(0);
    return b;
}

// KL(old || new) for diagonal Gaussians from explicit means and log-stds.
double independent_kl(const MatrixXd& mu_o, const VectorXd& ls_o, const MatrixXd& mu_n, const VectorXd& ls_n) {
    double kl = 0;
    for (Eigen::Index c = 0; c < mu_o.cols(); ++c)
        for (Eigen::Index d = 0; d < mu_o.rows(); ++d) {
            const double so = std::exp(ls_o(d)), sn = std::exp(ls_n(d));
            kl += std::log(sn / so) + (so * so + std::pow(mu_o(d, c) - mu_n(d, c), 2)) / (2 * sn * sn) - 0.5;
        }
    return kl / static_cast<double>(mu_o.cols());
}

}  // namespace

TEST(Trpo, ZeroAdvantagesLeavePolicyUnchanged) {
    Rng rng(1);
    GaussianPolicy p = small_policy(rng);
    const Batch b = sample_batch(p, 64, rng);
    const VectorXd before = nn::flatten_params(p.head);
    TrpoConfig cfg;
    cfg.entropy_coef = 0.0;
    const TrpoStats s = trpo_update({{&p, b.inputs, b.actions}}, VectorXd::Zero(64), b.old_lp, cfg);
    EXPECT_FALSE(s.accepted);
    EXPECT_EQ(s.gradient_norm, 0.0);
    EXPECT_EQ(nn::flatten_params(p.head), before);
}

TEST(Trpo, AcceptedStepsRespectTrustRegion) {
    Rng rng(2);
    const TrpoConfig cfg;
    int accepted = 0;
    for (int trial = 0; trial < 100; ++trial) {
        GaussianPolicy p = small_policy(rng, 3, 1 + trial % 2);
        p.head.log_std.setConstant(uniform(rng, -1, 0.5));
        const Batch b = sample_batch(p, 128, rng);
        const MatrixXd mu_old = p.mean(b.inputs);
        const VectorXd ls_old = p.head.clamped_log_std();
        const double before = surrogate({{&p, b.inputs, b.actions}}, b.adv, b.old_lp, cfg.entropy_coef);
        const VectorXd theta_old = nn::flatten_params(p.head);
        const TrpoStats s = trpo_update({{&p, b.inputs, b.actions}}, b.adv, b.old_lp, cfg);
        if (!s.accepted) {
            EXPECT_EQ(nn::flatten_params(p.head), theta_old);
            continue;
        }
        ++accepted;
        const double kl = independent_kl(mu_old, ls_old, p.mean(b.inputs), p.head.clamped_log_std());
        EXPECT_LE(kl, 1.5 * cfg.max_kl);
        EXPECT_NEAR(kl, s.kl, 1e-10);
        EXPECT_GE(surrogate({{&p, b.inputs, b.actions}}, b.adv, b.old_lp, cfg.entropy_coef) - before, 0.0);
    }
    EXPECT_GE(accepted, 90);
}

TEST(Trpo, RejectedStepRestoresParametersBitwise) {
    Rng rng(3);
    GaussianPolicy p = small_policy(rng);
    const Batch b = sample_batch(p, 64, rng);
    const VectorXd before = nn::flatten_params(p.head);
    TrpoConfig cfg;
    cfg.max_kl = -1.0;  // no candidate can satisfy the constraint
    const TrpoStats s = trpo_update({{&p, b.inputs, b.actions}}, b.adv, b.old_lp, cfg);
    EXPECT_FALSE(s.accepted);
    const VectorXd after = nn::flatten_params(p.head);
    ASSERT_EQ(after.size(), before.size());
    EXPECT_EQ(std::memcmp(after.data(), before.data(), sizeof(double) * static_cast<std::size_t>(after.size())), 0);
}

TEST(Trpo, BanditConvergesToOptimum) {
    Rng rng(4);
    GaussianPolicy p{"bandit", nn::GaussianHead::init({1, 8, 1}, rng), {}};
    const TrpoConfig cfg;
    const int rows = 256;
    const MatrixXd inputs = MatrixXd::Ones(1, rows);
    for (int it = 0; it < 200; ++it) {
        const double mu = p.mean(inputs.col(0))(0, 0);
        const double sigma = std::exp(p.head.clamped_log_std()(0));
        MatrixXd actions(1, rows);
        VectorXd reward(rows);
        for (int i = 0; i < rows; ++i) {
            actions(0, i) = mu + sigma * standard_normal(rng);
            reward(i) = -std::pow(actions(0, i) - 3.0, 2);
        }
        VectorXd adv = reward.array() - reward.mean();
        const double sd = std::sqrt(adv.squaredNorm() / rows);
        if (sd > 0) adv /= sd;
        const VectorXd old_lp = nn::log_prob_columns(p.mean(inputs), p.head.clamped_log_std(), actions);
        trpo_update({{&p, inputs, actions}}, adv, old_lp, cfg);
    }
    EXPECT_NEAR(p.mean(inputs.col(0))(0, 0), 3.0, 0.2);
}

TEST(Trpo, SurrogateGradientMatchesDifferences) {
    Rng rng(5);
    GaussianPolicy p = small_policy(rng, 3, 2);
    GaussianPolicy q = small_policy(rng, 5, 1);
    p.head.log_std << -0.3, 0.2;
    Batch bp = sample_batch(p, 40, rng);
    Batch bq = sample_batch(q, 40, rng);
    const std::vector<PolicyTerm> terms{{&p, bp.inputs, bp.actions}, {&q, bq.inputs, bq.actions}};
    const VectorXd old_lp = bp.old_lp + bq.old_lp + 0.1 * random_matrix(40, 1, rng).col(0);
    const double coef = 0.05;
    const auto e = detail::evaluate(terms, true);
    const VectorXd g = surrogate_gradient(terms, e, bp.adv, old_lp, coef);
    const VectorXd theta = detail::gather(terms);
    for (Eigen::Index k = 0; k < theta.size(); ++k) {
        VectorXd tp = theta, tm = theta;
        tp(k) += 1e-6;
        tm(k) -= 1e-6;
        detail::scatter(terms, tp);
        const double fp = surrogate(terms, bp.adv, old_lp, coef);
        detail::scatter(terms, tm);
        const double fm = surrogate(terms, bp.adv, old_lp, coef);
        const double num = (fp - fm) / 2e-6;
        ASSERT_LE(std::abs(num - g(k)) / std::max(1.0, std::abs(num)), 1e-4) << k;
    }
    detail::scatter(terms, theta);
}

TEST(Trpo, FisherMatchesKlCurvature) {
    Rng rng(6);
    GaussianPolicy p = small_policy(rng, 3, 1);
    GaussianPolicy q = small_policy(rng, 4, 1);
    q.head.log_std(0) = -0.5;
    const Batch bp = sample_batch(p, 30, rng), bq = sample_batch(q, 30, rng);
    const std::vector<PolicyTerm> terms{{&p, bp.inputs, bp.actions}, {&q, bq.inputs, bq.actions}};
    const auto e = detail::evaluate(terms, true);
    const VectorXd theta = detail::gather(terms);
    for (int trial = 0; trial < 10; ++trial) {
        const VectorXd v = random_matrix(theta.size(), 1, rng).col(0);
        const double vfv = v.dot(fisher_vector_product(terms, e, v, 0.0));
        const double eps = 1e-4;
        detail::scatter(terms, theta + eps * v);
        const double kl = measure_kl(terms, e);
        detail::scatter(terms, theta);
        EXPECT_NEAR(2 * kl / (eps * eps), vfv, 1e-3 * std::max(1.0, vfv));
    }
    const VectorXd v = random_matrix(theta.size(), 1, rng).col(0);
    EXPECT_LE((fisher_vector_product(terms, e, v, 0.1) - fisher_vector_product(terms, e, v, 0.0) - 0.1 * v)
                  .cwiseAbs()
                  .maxCoeff(),
              1e-12);
}

TEST(Trpo, ConjugateGradientSolvesSpdSystem) {
    Rng rng(7);
    const MatrixXd a = random_matrix(6, 6, rng);
    const MatrixXd spd = a * a.transpose() + MatrixXd::Identity(6, 6);
    const VectorXd b = random_matrix(6, 1, rng).col(0);
    const VectorXd x = conjugate_gradient([&](const VectorXd& v) { return VectorXd(spd * v); }, b, 10);
    EXPECT_LE((spd * x - b).norm(), 1e-8);
}

TEST(Trpo, ShapeMismatchThrows) {
    Rng rng(8);
    GaussianPolicy p = small_policy(rng);
    const Batch b = sample_batch(p, 16, rng);
    const TrpoConfig cfg;
    EXPECT_THROW(trpo_update({{&p, b.inputs, b.actions}}, VectorXd::Zero(15), b.old_lp, cfg), DimensionError);
    EXPECT_THROW(trpo_update({{&p, MatrixXd::Zero(3, 16), b.actions}}, b.adv, b.old_lp, cfg), DimensionError);
    EXPECT_THROW(trpo_update({}, b.adv, b.old_lp, cfg), std::invalid_argument);
}

TEST(Trpo, NonFiniteSurrogateAborts) {
    Rng rng(9);
    GaussianPolicy p = small_policy(rng);
    Batch b = sample_batch(p, 16, rng);
    b.adv(3) = std::numeric_limits<double>::quiet_NaN();
    EXPECT_THROW(trpo_update({{&p, b.inputs, b.actions}}, b.adv, b.old_lp, TrpoConfig{}), NumericError);
}

TEST(Trpo, JointTermsShareOneTrustRegion) {
    Rng rng(10);
    GaussianPolicy h = small_policy(rng, 10, 1), r = small_policy(rng, 11, 1);
    const Batch bh = sample_batch(h, 100, rng), br = sample_batch(r, 100, rng);
    const std::vector<PolicyTerm> terms{{&h, bh.inputs, bh.actions}, {&r, br.inputs, br.actions}};
    const MatrixXd mh = h.mean(bh.inputs), mr = r.mean(br.inputs);
    const VectorXd lh = h.head.clamped_log_std(), lr = r.head.clamped_log_std();
    const TrpoConfig cfg;
    const TrpoStats s = trpo_update(terms, bh.adv, bh.old_lp + br.old_lp, cfg);
    ASSERT_TRUE(s.accepted);
    const double kl = independent_kl(mh, lh, h.mean(bh.inputs), h.head.clamped_log_std()) +
                      independent_kl(mr, lr, r.mean(br.inputs), r.head.clamped_log_std());
    EXPECT_LE(kl, 1.5 * cfg.max_kl);
    EXPECT_NEAR(kl, s.kl, 1e-10);
}
