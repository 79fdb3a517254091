#pragma once

// Evaluation harness: held-out log-likelihood, trend correlation, response-distribution
// error, policy-function maps and cross-evaluation of downstream policies.

#include <cmath>
#include <functional>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "demer/core.hpp"
#include "demer/trainers.hpp"

namespace demer::eval {

using env::EnvParams;
using env::Observation;
using env::PublicDataset;
using nn::MatrixXd;
using nn::VectorXd;
using train::ModelBundle;

/// Sample Pearson coefficient; throws UndefinedStatistic when either series is constant.
inline double pearson(std::span<const double> xs, std::span<const double> ys) {
    if (xs.size() != ys.size()) throw DimensionError("pearson: series lengths differ");
    if (xs.size() < 2) throw std::invalid_argument("pearson: need at least two points");
    const double n = static_cast<double>(xs.size());
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        mx += xs[i];
        my += ys[i];
    }
    mx /= n;
    my /= n;
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        const double dx = xs[i] - mx, dy = ys[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (sxx == 0 || syy == 0) throw UndefinedStatistic("pearson: constant series, correlation undefined");
    return std::max(-1.0, std::min(1.0, sxy / std::sqrt(sxx * syy)));
}

inline double pearson(const VectorXd& xs, const VectorXd& ys) {
    return pearson(std::span<const double>(xs.data(), static_cast<std::size_t>(xs.size())),
                   std::span<const double>(ys.data(), static_cast<std::size_t>(ys.size())));
}

// ---------------------------------------------------------------------------
// provenance and reports

struct Provenance {
    std::string config_hash = "0000000000000000";
    std::string data_hash = "0000000000000000";
    std::uint64_t seed = 0;

    std::string comment() const {
        return "# config_hash=" + config_hash + " version=" + std::string(kVersion) + " seed=" + std::to_string(seed) +
               " data_hash=" + data_hash;
    }
};

/// Content hash of the episode ids and logged values of a dataset split.
inline std::string split_hash(const PublicDataset& d) {
    std::uint64_t h = fnv1a("split");
    for (const auto& e : d.episodes) {
        h = fnv1a(std::to_string(e.id), h);
        for (const auto& s : e.steps) h = fnv1a(fmt_double(s.obs.v) + fmt_double(s.a_p) + fmt_double(s.a_d), h);
    }
    return hex64(h);
}

struct MetricReport {
    std::string method;
    std::string metric;
    std::optional<int> bin;
    double value = 0;
    std::string split = "test";
    std::uint64_t seed = 0;
    std::string split_hash;
    std::string checkpoint;
};

inline void write_reports_csv(std::ostream& os, const std::vector<MetricReport>& rows, const Provenance& prov) {
    os << prov.comment() << "\n";
    os << "method,metric,bin,value,split,seed,split_hash,checkpoint\n";
    for (const auto& r : rows)
        os << r.method << "," << r.metric << "," << (r.bin ? std::to_string(*r.bin) : "") << "," << fmt_double(r.value)
           << "," << r.split << "," << r.seed << "," << r.split_hash << "," << r.checkpoint << "\n";
}

// ---------------------------------------------------------------------------
// log-likelihood

namespace detail {
inline double log_mean_exp(const double* x, int n) {
    double m = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < n; ++i) m = std::max(m, x[i]);
    if (!std::isfinite(m)) return m;
    double s = 0;
    for (int i = 0; i < n; ++i) s += std::exp(x[i] - m);
    return m + std::log(s / n);
}

struct Rows {
    std::vector<Observation> obs;
    VectorXd a_p, a_d;
    std::vector<std::pair<std::int64_t, int>> keys;  // (episode id, step)
};

inline Rows flatten(const PublicDataset& d) {
    Rows r;
    std::vector<double> ap, ad;
    for (const auto& e : d.episodes)
        for (std::size_t t = 0; t < e.steps.size(); ++t) {
            r.obs.push_back(e.steps[t].obs);
            ap.push_back(e.steps[t].a_p);
            ad.push_back(e.steps[t].a_d);
            r.keys.emplace_back(e.id, static_cast<int>(t));
        }
    r.a_p = Eigen::Map<VectorXd>(ap.data(), static_cast<Eigen::Index>(ap.size()));
    r.a_d = Eigen::Map<VectorXd>(ad.data(), static_cast<Eigen::Index>(ad.size()));
    return r;
}

inline constexpr std::uint64_t kLikelihoodTag = 0x6c6c6b64ULL;
inline constexpr std::uint64_t kTrendTag = 0x74726e64ULL;
inline constexpr std::uint64_t kResponseTag = 0x72657370ULL;
inline constexpr std::uint64_t kCrossTag = 0x63726f73ULL;
}  // namespace detail

/// Mean log density of logged a_B given (o_A, a_A) under the model's driver side. For a
/// confounder-embedded joint the confounder action is marginalized with `mc_draws`
/// samples per pair, drawn from stream (seed, episode id, step).
inline double mean_log_likelihood(const ModelBundle& m, const PublicDataset& d, int mc_draws = 64,
                                  std::uint64_t seed = 0) {
    if (d.episodes.empty()) throw std::invalid_argument("mean_log_likelihood: dataset is empty");
    if (!m.joint) return std::numeric_limits<double>::infinity();  // deterministic rules: the density is degenerate
    if (mc_draws < 1) throw std::invalid_argument("mean_log_likelihood: mc_draws must be >= 1");
    const auto rows = detail::flatten(d);
    const auto& jp = *m.joint;
    const int period = m.env.period;
    const int obs_dim = agents::encoded_dim(period);
    const auto n = static_cast<Eigen::Index>(rows.obs.size());
    MatrixXd x = agents::encode_batch(rows.obs, period, jp.confounder ? 2 : 1);
    x.row(obs_dim) = rows.a_p.transpose();
    const VectorXd ls_b = jp.responder.head.clamped_log_std();
    double total = 0;
    if (!jp.confounder) {
        const MatrixXd mu = jp.responder.mean(x);
        total = nn::log_prob_columns(mu, ls_b, rows.a_d.transpose()).sum();
        return total / static_cast<double>(n);
    }
    const VectorXd ls_h = jp.confounder->head.clamped_log_std();
    const MatrixXd mu_h = jp.confounder->mean(x.topRows(obs_dim + 1));
    constexpr Eigen::Index kChunk = 512;
    std::vector<double> lp(static_cast<std::size_t>(mc_draws));
    for (Eigen::Index b = 0; b < n; b += kChunk) {
        const Eigen::Index e = std::min(n, b + kChunk);
        MatrixXd xs(x.rows(), (e - b) * mc_draws);
        MatrixXd target(1, xs.cols());
        for (Eigen::Index i = b; i < e; ++i) {
            const auto& key = rows.keys[static_cast<std::size_t>(i)];
            Rng rng = stream_rng(seed ^ detail::kLikelihoodTag, static_cast<std::uint64_t>(key.first),
                                 static_cast<std::uint64_t>(key.second));
            for (int k = 0; k < mc_draws; ++k) {
                const Eigen::Index c = (i - b) * mc_draws + k;
                xs.col(c) = x.col(i);
                xs(obs_dim + 1, c) = mu_h(0, i) + std::exp(ls_h(0)) * standard_normal(rng);
                target(0, c) = rows.a_d(i);
            }
        }
        const VectorXd l = nn::log_prob_columns(jp.responder.mean(xs), ls_b, target);
        for (Eigen::Index i = b; i < e; ++i) total += detail::log_mean_exp(l.data() + (i - b) * mc_draws, mc_draws);
    }
    return total / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// trend correlation

enum class Indicator { v, a_d };

inline std::string to_string(Indicator i) { return i == Indicator::v ? "v" : "a_d"; }

struct TrendLines {
    VectorXd simulated;
    VectorXd real;
};

/// Per-step population means of the indicator: v after each step (t = 1..T) or the driver
/// action at each step (t = 0..T-1), for real episodes and for simulations that start from
/// each real episode's first observation.
inline TrendLines trend_lines(const ModelBundle& m, const PublicDataset& d, Indicator ind,
                              agents::ActMode mode = agents::ActMode::sample, std::uint64_t seed = 0) {
    if (d.episodes.empty()) throw std::invalid_argument("trend_lines: dataset is empty");
    const int horizon = d.env.horizon;
    const std::size_t n = d.episodes.size();
    std::vector<Rng> rngs;
    std::vector<Observation> cur;
    TrendLines out{VectorXd::Zero(horizon), VectorXd::Zero(horizon)};
    for (const auto& e : d.episodes) {
        if (static_cast<int>(e.steps.size()) != horizon) throw DimensionError("trend_lines: ragged episode");
        rngs.push_back(stream_rng(seed ^ detail::kTrendTag, static_cast<std::uint64_t>(e.id)));
        cur.push_back(e.steps.front().obs);
        for (int t = 0; t < horizon; ++t) {
            const double real = ind == Indicator::a_d ? e.steps[static_cast<std::size_t>(t)].a_d
                                : t + 1 < horizon      ? e.steps[static_cast<std::size_t>(t + 1)].obs.v
                                                       : e.terminal.v;
            out.real(t) += real / static_cast<double>(n);
        }
    }
    for (int t = 0; t < horizon; ++t) {
        const VectorXd a_p = train::SimulatorEnv::clamp_platform(train::simulate_platform(m, cur, mode, &rngs));
        const VectorXd a_d = train::simulate_driver(m, cur, a_p, mode, &rngs).a_B;
        double acc = 0;
        for (std::size_t j = 0; j < n; ++j) {
            cur[j] = env::transition(cur[j], a_d(static_cast<Eigen::Index>(j)), d.env.period);
            acc += ind == Indicator::a_d ? a_d(static_cast<Eigen::Index>(j)) : cur[j].v;
        }
        out.simulated(t) = acc / static_cast<double>(n);
    }
    return out;
}

inline double trend_correlation(const ModelBundle& m, const PublicDataset& d, Indicator ind,
                                agents::ActMode mode = agents::ActMode::sample, std::uint64_t seed = 0) {
    if (d.env.horizon < 3) throw std::invalid_argument("trend_correlation: need at least 3 time points");
    const auto lines = trend_lines(m, d, ind, mode, seed);
    return pearson(lines.simulated, lines.real);
}

// ---------------------------------------------------------------------------
// response distribution

struct DistributionError {
    std::vector<double> edges;  // bins + 1 shared edges
    std::vector<double> simulated;
    std::vector<double> real;
    std::vector<double> error;  // simulated minus real frequency
};

/// Histogram over shared equal-width bins of p (values outside clamp to the end bins).
inline std::vector<double> histogram(const VectorXd& xs, const std::vector<double>& edges) {
    const std::size_t bins = edges.size() - 1;
    std::vector<double> h(bins, 0.0);
    const double lo = edges.front(), width = (edges.back() - edges.front()) / static_cast<double>(bins);
    for (Eigen::Index i = 0; i < xs.size(); ++i) {
        auto k = width > 0 ? static_cast<long>(std::floor((xs(i) - lo) / width)) : 0L;
        k = std::max(0L, std::min(static_cast<long>(bins) - 1, k));
        h[static_cast<std::size_t>(k)] += 1.0 / static_cast<double>(xs.size());
    }
    return h;
}

/// Replays logged platform actions, simulates only the driver, and compares histograms.
inline DistributionError response_distribution_error(const ModelBundle& m, const PublicDataset& d, int bins,
                                                     std::uint64_t seed = 0) {
    if (bins < 2) throw std::invalid_argument("response_distribution_error: bins must be >= 2");
    if (d.episodes.empty()) throw std::invalid_argument("response_distribution_error: dataset is empty");
    const auto rows = detail::flatten(d);
    std::vector<Rng> rngs;
    rngs.reserve(rows.obs.size());
    for (const auto& k : rows.keys)
        rngs.push_back(stream_rng(seed ^ detail::kResponseTag, static_cast<std::uint64_t>(k.first),
                                  static_cast<std::uint64_t>(k.second)));
    const VectorXd sim = train::simulate_driver(m, rows.obs, rows.a_p, agents::ActMode::sample, &rngs).a_B;
    double lo = std::min(sim.minCoeff(), rows.a_d.minCoeff());
    double hi = std::max(sim.maxCoeff(), rows.a_d.maxCoeff());
    if (hi <= lo) hi = lo + 1.0;
    DistributionError out;
    for (int i = 0; i <= bins; ++i) out.edges.push_back(lo + (hi - lo) * i / bins);
    out.simulated = histogram(sim, out.edges);
    out.real = histogram(rows.a_d, out.edges);
    for (int i = 0; i < bins; ++i) out.error.push_back(out.simulated[static_cast<std::size_t>(i)] - out.real[static_cast<std::size_t>(i)]);
    return out;
}

// ---------------------------------------------------------------------------
// policy maps

struct Axis {
    std::string name;
    double lo = 0;
    double hi = 0;
    double step = 1;

    std::vector<double> values() const {
        const auto n = static_cast<long>(std::llround((hi - lo) / step));
        std::vector<double> out;
        for (long i = 0; i <= n; ++i) out.push_back(n == 0 ? lo : lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n));
        return out;
    }
};

struct GridPoint {
    int tw = 7;
    double r = 1.0;
    double v = 9.0;
    double a_p = 0.0;
};

inline bool known_axis(const std::string& n) { return n == "v" || n == "tw" || n == "r" || n == "a_p"; }

struct GridSpec {
    std::vector<Axis> axes;
    std::map<std::string, double> fixed;

    void validate() const {
        if (axes.empty()) throw std::invalid_argument("GridSpec: no axes");
        for (const auto& a : axes) {
            if (!known_axis(a.name)) throw DimensionError("GridSpec: unknown axis '" + a.name + "'");
            if (!(a.step > 0) || a.hi < a.lo) throw std::invalid_argument("GridSpec: axis '" + a.name + "' needs step > 0 and hi >= lo");
        }
        for (const auto& [k, v] : fixed)
            if (!known_axis(k)) throw DimensionError("GridSpec: unknown fixed value '" + k + "'");
    }

    std::size_t size() const {
        std::size_t n = 1;
        for (const auto& a : axes) n *= a.values().size();
        return n;
    }

    /// Cartesian product, first axis outermost.
    std::vector<GridPoint> points() const {
        validate();
        GridPoint base;
        for (const auto& [k, v] : fixed) set(base, k, v);
        std::vector<GridPoint> out{base};
        for (const auto& a : axes) {
            std::vector<GridPoint> next;
            for (const auto& p : out)
                for (double v : a.values()) {
                    GridPoint q = p;
                    set(q, a.name, v);
                    next.push_back(q);
                }
            out = std::move(next);
        }
        return out;
    }

private:
    static void set(GridPoint& p, const std::string& k, double v) {
        if (k == "v") p.v = v;
        else if (k == "r") p.r = v;
        else if (k == "a_p") p.a_p = v;
        else p.tw = static_cast<int>(std::lround(v));
    }
};

enum class MapTarget { platform, confounder, driver };

inline std::string to_string(MapTarget t) {
    switch (t) {
        case MapTarget::platform: return "platform";
        case MapTarget::confounder: return "confounder";
        case MapTarget::driver: return "driver";
    }
    return "?";
}

/// Platform maps span v x tw; confounder and driver maps span v x a_p at tw = 7.
inline GridSpec default_grid(MapTarget t, double r, int tw = 7) {
    if (t == MapTarget::platform) return {{{"v", 6, 12, 0.1}, {"tw", 1, 7, 1}}, {{"r", r}}};
    return {{{"v", 6, 12, 0.1}, {"a_p", 0, 1, 0.02}}, {{"r", r}, {"tw", static_cast<double>(tw)}}};
}

inline const std::vector<double>& default_r_values() {
    static const std::vector<double> rs{0.7, 1.0, 1.3};
    return rs;
}

using MapFn = std::function<VectorXd(const std::vector<GridPoint>&)>;

/// Mean-mode evaluation of one of the model's functions (rules for the ground truth).
/// Throws DimensionError when the model has no such function.
inline MapFn model_map(const ModelBundle& m, MapTarget target) {
    const bool truth = m.method == train::Method::truth;
    if (target == MapTarget::platform && !truth && !m.platform)
        throw DimensionError("model '" + train::to_string(m.method) + "' has no platform policy");
    if (target == MapTarget::confounder && !truth && !(m.joint && m.joint->confounder))
        throw DimensionError("model '" + train::to_string(m.method) + "' has no confounder policy");
    if (target == MapTarget::driver && !truth && !m.joint)
        throw DimensionError("model '" + train::to_string(m.method) + "' has no driver policy");
    return [m, target](const std::vector<GridPoint>& pts) {
        std::vector<Observation> obs;
        VectorXd a_p(static_cast<Eigen::Index>(pts.size()));
        for (std::size_t i = 0; i < pts.size(); ++i) {
            env::check_tw(pts[i].tw, m.env.period);
            obs.push_back({pts[i].tw, pts[i].r, pts[i].v});
            a_p(static_cast<Eigen::Index>(i)) = pts[i].a_p;
        }
        if (target == MapTarget::platform) return train::simulate_platform(m, obs, agents::ActMode::mean);
        const auto resp = train::simulate_driver(m, obs, a_p, agents::ActMode::mean);
        if (target == MapTarget::driver) return resp.a_B;
        return *resp.a_H;
    };
}

struct PolicyMap {
    std::string target;
    std::vector<GridPoint> points;
    VectorXd values;
};

inline PolicyMap export_policy_map(const MapFn& fn, const GridSpec& grid, std::string target = "") {
    PolicyMap m{std::move(target), grid.points(), {}};
    m.values = fn(m.points);
    if (m.values.size() != static_cast<Eigen::Index>(m.points.size())) throw DimensionError("export_policy_map: map size mismatch");
    return m;
}

inline void write_map_csv(std::ostream& os, const std::vector<PolicyMap>& maps, const Provenance& prov) {
    os << prov.comment() << "\n";
    os << "target,tw,r,v,a_p,value\n";
    for (const auto& m : maps)
        for (std::size_t i = 0; i < m.points.size(); ++i) {
            const auto& p = m.points[i];
            os << m.target << "," << p.tw << "," << fmt_double(p.r) << "," << fmt_double(p.v) << ","
               << fmt_double(p.a_p) << "," << fmt_double(m.values(static_cast<Eigen::Index>(i))) << "\n";
        }
}

/// Reads maps written by write_map_csv, grouped by target in file order.
inline std::vector<PolicyMap> read_map_csv(std::istream& is) {
    std::vector<PolicyMap> maps;
    std::vector<std::vector<double>> values;
    std::string line;
    bool header = false;
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#') continue;
        if (!header) {
            header = true;
            continue;
        }
        std::stringstream ss(line);
        std::string target, cell;
        std::getline(ss, target, ',');
        std::vector<double> f;
        while (std::getline(ss, cell, ',')) f.push_back(std::stod(cell));
        if (f.size() != 5) throw std::runtime_error("map csv: malformed row '" + line + "'");
        if (maps.empty() || maps.back().target != target) {
            maps.push_back({target, {}, {}});
            values.emplace_back();
        }
        maps.back().points.push_back({static_cast<int>(f[0]), f[1], f[2], f[3]});
        values.back().push_back(f[4]);
    }
    for (std::size_t i = 0; i < maps.size(); ++i)
        maps[i].values = Eigen::Map<VectorXd>(values[i].data(), static_cast<Eigen::Index>(values[i].size()));
    return maps;
}

struct MapError {
    double mse = 0;
    double mae = 0;
    std::optional<double> pearson;  // empty when either map is constant
};

inline MapError map_mse(const VectorXd& learned, const VectorXd& truth) {
    if (learned.size() != truth.size() || learned.size() == 0) throw DimensionError("map_mse: maps differ in size");
    MapError e;
    e.mse = (learned - truth).squaredNorm() / static_cast<double>(learned.size());
    e.mae = (learned - truth).cwiseAbs().mean();
    try {
        e.pearson = pearson(learned, truth);
    } catch (const UndefinedStatistic&) {
    }
    return e;
}

inline MapError map_mse(const MapFn& learned, const MapFn& truth, const GridSpec& grid) {
    const auto pts = grid.points();
    return map_mse(learned(pts), truth(pts));
}

// ---------------------------------------------------------------------------
// cross-evaluation

using PlatformFn = std::function<VectorXd(const std::vector<Observation>&)>;

inline PlatformFn rule_platform_fn(const EnvParams& p = {}) {
    return [p](const std::vector<Observation>& obs) {
        VectorXd a(static_cast<Eigen::Index>(obs.size()));
        for (std::size_t i = 0; i < obs.size(); ++i) a(static_cast<Eigen::Index>(i)) = env::rule_platform(p, obs[i].tw, obs[i].r, obs[i].v);
        return a;
    };
}

inline PlatformFn constant_platform_fn(double value) {
    return [value](const std::vector<Observation>& obs) { return VectorXd::Constant(static_cast<Eigen::Index>(obs.size()), value); };
}

/// Mean-mode actions of a trained platform or recommendation policy.
inline PlatformFn policy_platform_fn(const agents::GaussianPolicy& policy, int period = 7) {
    return [policy, period](const std::vector<Observation>& obs) {
        return VectorXd(policy.mean(agents::encode_batch(obs, period)).row(0).transpose());
    };
}

struct CrossEvalResult {
    double mean = 0;
    double stderr_ = 0;
    int episodes = 0;
};

/// Mean cumulative driver response of `policy` over `episodes` episodes in `sim`.
inline CrossEvalResult cross_evaluate(const PlatformFn& policy, const train::SimulatorEnv& sim, int episodes,
                                      std::uint64_t seed = 0) {
    if (episodes < 1) throw std::invalid_argument("cross_evaluate: episodes must be >= 1");
    const auto n = static_cast<std::size_t>(episodes);
    std::vector<Rng> rngs;
    for (std::size_t j = 0; j < n; ++j) rngs.push_back(stream_rng(seed ^ detail::kCrossTag, j));
    std::vector<Observation> cur = sim.reset(n, rngs);
    VectorXd total = VectorXd::Zero(static_cast<Eigen::Index>(n));
    for (int t = 0; t < sim.params().horizon; ++t) {
        const VectorXd a_b = sim.respond(cur, policy(cur), rngs);
        total += a_b;
        for (std::size_t j = 0; j < n; ++j) cur[j] = env::transition(cur[j], a_b(static_cast<Eigen::Index>(j)), sim.params().period);
    }
    CrossEvalResult out;
    out.episodes = episodes;
    out.mean = total.mean();
    out.stderr_ = episodes > 1 ? std::sqrt((total.array() - out.mean).square().sum() / (episodes - 1) / episodes) : 0.0;
    return out;
}

}  // namespace demer::eval
