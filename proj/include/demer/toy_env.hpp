#pragma once

// The artificial confounded driver-program environment: deterministic rules for the
// platform, the hidden confounder and the driver, the transition, episode generation
// and the line-delimited JSON trajectory format.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "demer/core.hpp"

namespace demer::env {

struct EnvParams {
    double tp = 10.0;  // green line: platform acts below it
    double th = 8.0;   // blue line: confounder acts above it
    double wave = 1.2;
    int period = 7;
    int horizon = 8;
    double v_center = 9.0;

    void validate() const {
        if (!(tp > th)) throw std::invalid_argument("EnvParams: TP must exceed TH");
        if (!(wave > 0)) throw std::invalid_argument("EnvParams: wave must be positive");
        if (period < 1) throw std::invalid_argument("EnvParams: period must be >= 1");
        if (horizon < 1) throw std::invalid_argument("EnvParams: horizon must be >= 1");
    }

    bool operator==(const EnvParams&) const = default;
};

struct Observation {
    int tw = 1;
    double r = 1.0;
    double v = 9.0;

    bool operator==(const Observation&) const = default;
};

inline void check_tw(int tw, int period) {
    if (tw < 1 || tw > period)
        throw std::out_of_range("tw=" + std::to_string(tw) + " outside {1.." + std::to_string(period) + "}");
}

/// Intrinsic weekly trend of the driver.
inline double delta_v(int tw) {
    check_tw(tw, 7);
    if (tw == 5) return 1.0;
    if (tw == 7) return -1.0;
    return 0.0;
}

inline double rule_platform(const EnvParams& p, int tw, double r, double v) {
    check_tw(tw, p.period);
    return std::max(0.0, std::min(1.0, r * (p.tp - v) * tw / p.period));
}

inline double rule_confounder(const EnvParams& p, int tw, double r, double v, double a_p) {
    check_tw(tw, p.period);
    return std::max(-1.0, std::min(0.0, r * (p.th - v - a_p / 2.0) * tw / p.period));
}

inline double rule_driver(int tw, double /*r*/, double /*v*/, double a_p, double a_h) {
    return delta_v(tw) + a_p + a_h;
}

inline double rule_platform(int tw, double r, double v) { return rule_platform(EnvParams{}, tw, r, v); }
inline double rule_confounder(int tw, double r, double v, double a_p) {
    return rule_confounder(EnvParams{}, tw, r, v, a_p);
}

/// Static factor implied by an initial key variant.
inline double static_factor(const EnvParams& p, double v0) { return 1.0 - 0.5 * (v0 - p.v_center) / p.wave; }

inline Observation initial_observation(const EnvParams& p, double v0) { return {1, static_factor(p, v0), v0}; }

inline Observation sample_initial(Rng& rng, const EnvParams& p = {}) {
    return initial_observation(p, uniform(rng, p.v_center - p.wave, p.v_center + p.wave));
}

/// Platform action space is [0, 1]; actions executed in any environment are clipped into it.
inline double clip_platform(double a_p) { return std::max(0.0, std::min(1.0, a_p)); }

inline Observation transition(const Observation& o, double a_d, int period = 7) {
    return {(o.tw % period) + 1, o.r, o.v + a_d};
}

// ---------------------------------------------------------------------------
// trajectories

struct TruthStep {
    Observation obs;
    double a_p = 0;
    double a_h = 0;  // hidden; never part of a public view
    double a_d = 0;
};

struct LoggedStep {
    Observation obs;
    double a_p = 0;
    double a_d = 0;
};

template <class StepT>
struct Episode {
    std::int64_t id = 0;
    std::vector<StepT> steps;
    Observation terminal;
};

using TruthEpisode = Episode<TruthStep>;
using LoggedEpisode = Episode<LoggedStep>;

/// Observable training data: (o_A, a_A, a_B) per step, no confounder actions.
struct PublicDataset {
    EnvParams env;
    std::uint64_t seed = 0;
    std::vector<LoggedEpisode> episodes;

    std::size_t rows() const {
        std::size_t n = 0;
        for (const auto& e : episodes) n += e.steps.size();
        return n;
    }
};

/// Ground-truth episodes including the confounder's actions.
struct TrajectorySet {
    EnvParams env;
    std::uint64_t seed = 0;
    std::vector<TruthEpisode> episodes;

    PublicDataset public_view() const {
        PublicDataset d{env, seed, {}};
        d.episodes.reserve(episodes.size());
        for (const auto& e : episodes) {
            LoggedEpisode le{e.id, {}, e.terminal};
            le.steps.reserve(e.steps.size());
            for (const auto& s : e.steps) le.steps.push_back({s.obs, s.a_p, s.a_d});
            d.episodes.push_back(std::move(le));
        }
        return d;
    }
};

inline TruthEpisode rollout_rules(const EnvParams& p, Observation o, std::int64_t id) {
    TruthEpisode ep{id, {}, {}};
    ep.steps.reserve(static_cast<std::size_t>(p.horizon));
    for (int t = 0; t < p.horizon; ++t) {
        const double a_p = rule_platform(p, o.tw, o.r, o.v);
        const double a_h = rule_confounder(p, o.tw, o.r, o.v, a_p);
        const double a_d = rule_driver(o.tw, o.r, o.v, a_p, a_h);
        ep.steps.push_back({o, a_p, a_h, a_d});
        o = transition(o, a_d, p.period);
    }
    ep.terminal = o;
    return ep;
}

/// n independent episodes; episode i draws its initial state from stream (seed, i).
inline TrajectorySet generate_dataset(std::size_t n, const EnvParams& p, std::uint64_t seed) {
    if (n < 1) throw std::invalid_argument("generate_dataset: n must be >= 1");
    p.validate();
    TrajectorySet set{p, seed, {}};
    set.episodes.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        Rng rng = stream_rng(seed, 0x6e76ULL, i);
        set.episodes.push_back(rollout_rules(p, sample_initial(rng, p), static_cast<std::int64_t>(i)));
    }
    return set;
}

/// Episodes with id < boundary go to train, the rest to test.
struct Split {
    PublicDataset train;
    PublicDataset test;
    std::int64_t boundary = 0;
};

inline std::int64_t split_boundary(std::size_t n, double test_fraction) {
    return static_cast<std::int64_t>(std::llround(static_cast<double>(n) * (1.0 - test_fraction)));
}

inline Split split_by_id(const PublicDataset& d, double test_fraction = 0.2) {
    Split s{{d.env, d.seed, {}}, {d.env, d.seed, {}}, split_boundary(d.episodes.size(), test_fraction)};
    for (const auto& e : d.episodes) (e.id < s.boundary ? s.train : s.test).episodes.push_back(e);
    return s;
}

// ---------------------------------------------------------------------------
// serialization: one JSON object per line

inline nlohmann::json env_to_json(const EnvParams& p) {
    return {{"TP", p.tp}, {"TH", p.th}, {"wave", p.wave}, {"period", p.period}, {"horizon", p.horizon},
            {"v_center", p.v_center}};
}

inline EnvParams env_from_json(const nlohmann::json& j) {
    EnvParams p;
    p.tp = j.value("TP", p.tp);
    p.th = j.value("TH", p.th);
    p.wave = j.value("wave", p.wave);
    p.period = j.value("period", p.period);
    p.horizon = j.value("horizon", p.horizon);
    p.v_center = j.value("v_center", p.v_center);
    p.validate();
    return p;
}

namespace detail {
inline void write_obs(std::ostream& os, const Observation& o) {
    os << "\"tw\":" << o.tw << ",\"r\":" << fmt_double(o.r) << ",\"v\":" << fmt_double(o.v);
}
inline Observation read_obs(const nlohmann::json& j) {
    return {j.at("tw").get<int>(), j.at("r").get<double>(), j.at("v").get<double>()};
}
}  // namespace detail

inline void write_trajectory_set(std::ostream& os, const TrajectorySet& set) {
    os << "{\"kind\":\"trajectory_set\",\"n\":" << set.episodes.size() << ",\"seed\":" << set.seed
       << ",\"env\":{\"TP\":" << fmt_double(set.env.tp) << ",\"TH\":" << fmt_double(set.env.th)
       << ",\"wave\":" << fmt_double(set.env.wave) << ",\"period\":" << set.env.period
       << ",\"horizon\":" << set.env.horizon << ",\"v_center\":" << fmt_double(set.env.v_center) << "}}\n";
    for (const auto& e : set.episodes) {
        os << "{\"id\":" << e.id << ",\"steps\":[";
        for (std::size_t t = 0; t < e.steps.size(); ++t) {
            const auto& s = e.steps[t];
            os << (t ? ",{" : "{");
            detail::write_obs(os, s.obs);
            os << ",\"a_p\":" << fmt_double(s.a_p) << ",\"a_h\":" << fmt_double(s.a_h)
               << ",\"a_d\":" << fmt_double(s.a_d) << "}";
        }
        os << "],\"terminal\":{";
        detail::write_obs(os, e.terminal);
        os << "}}\n";
    }
}

inline std::string serialize(const TrajectorySet& set) {
    std::ostringstream os;
    write_trajectory_set(os, set);
    return os.str();
}

inline void save_trajectory_set(const std::string& path, const TrajectorySet& set) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + path);
    write_trajectory_set(os, set);
    if (!os) throw std::runtime_error("write failed: " + path);
}

namespace detail {
template <class Fn>
void parse_lines(std::istream& is, nlohmann::json& header, Fn&& on_episode) {
    std::string line;
    if (!std::getline(is, line)) throw std::runtime_error("trajectory file is empty");
    header = nlohmann::json::parse(line);
    if (header.value("kind", "") != "trajectory_set") throw std::runtime_error("not a trajectory_set file");
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        on_episode(nlohmann::json::parse(line));
    }
}
}  // namespace detail

inline TrajectorySet read_trajectory_set(std::istream& is) {
    TrajectorySet set;
    nlohmann::json header;
    detail::parse_lines(is, header, [&](const nlohmann::json& j) {
        TruthEpisode e{j.at("id").get<std::int64_t>(), {}, detail::read_obs(j.at("terminal"))};
        for (const auto& s : j.at("steps"))
            e.steps.push_back({detail::read_obs(s), s.at("a_p").get<double>(), s.at("a_h").get<double>(),
                               s.at("a_d").get<double>()});
        set.episodes.push_back(std::move(e));
    });
    set.env = env_from_json(header.at("env"));
    set.seed = header.value("seed", std::uint64_t{0});
    return set;
}

/// Loads only the observable fields; a_h is never materialized.
inline PublicDataset read_public_dataset(std::istream& is) {
    PublicDataset d;
    nlohmann::json header;
    detail::parse_lines(is, header, [&](const nlohmann::json& j) {
        LoggedEpisode e{j.at("id").get<std::int64_t>(), {}, detail::read_obs(j.at("terminal"))};
        for (const auto& s : j.at("steps"))
            e.steps.push_back({detail::read_obs(s), s.at("a_p").get<double>(), s.at("a_d").get<double>()});
        d.episodes.push_back(std::move(e));
    });
    d.env = env_from_json(header.at("env"));
    d.seed = header.value("seed", std::uint64_t{0});
    return d;
}

inline TrajectorySet load_trajectory_set(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path);
    return read_trajectory_set(is);
}

inline PublicDataset load_public_dataset(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path);
    return read_public_dataset(is);
}

}  // namespace demer::env
