#pragma once

// Run configuration and the five pipeline commands behind the command-line tool:
// gen-data -> train -> eval -> export-maps -> cross-eval, all under one output directory.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "demer/eval.hpp"
#include "demer/trainers.hpp"

namespace demer::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

/// Bad flags, malformed config or missing inputs; maps to exit code 1.
class UsageError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

struct RunConfig {
    std::uint64_t seed = 0;
    std::string out = "runs/default";
    int workers = 0;  // 0: number of processors
    std::string method = "demer";
    int iterations = 300;
    std::string dataset;  // empty: <out>/data/trajectories.jsonl
    std::vector<std::string> checkpoint;

    env::EnvParams env;
    std::size_t episodes = 5000;
    double test_fraction = 0.2;
    train::TrainConfig train;

    int bins = 20;
    int mc_draws = 64;
    std::vector<double> map_r_values = eval::default_r_values();
    std::map<std::string, std::string> simulators;  // name -> checkpoint; empty: mail and demer under <out>/train
    int cross_episodes = 1000;

    int resolved_workers() const {
        if (workers > 0) return workers;
        return static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
    }

    train::TrainConfig train_config() const {
        train::TrainConfig c = train;
        c.iterations = iterations;
        c.seed = seed;
        c.workers = resolved_workers();
        return c;
    }

    std::string dataset_path() const { return dataset.empty() ? (fs::path(out) / "data" / "trajectories.jsonl").string() : dataset; }

    void validate() const {
        try {
            train::method_from_string(method);
            env.validate();
            train_config().validate();
        } catch (const std::invalid_argument& e) {
            throw UsageError(e.what());
        }
        if (method == "truth") throw UsageError("method must be one of sup|gail|mail|demer");
        if (episodes < 1) throw UsageError("data.episodes must be >= 1");
        if (!(test_fraction > 0 && test_fraction < 1)) throw UsageError("data.test_fraction must lie in (0, 1)");
        if (bins < 2) throw UsageError("eval.bins must be >= 2");
        if (mc_draws < 1) throw UsageError("eval.mc_draws must be >= 1");
        if (map_r_values.empty()) throw UsageError("maps.r_values must be non-empty");
        if (cross_episodes < 1) throw UsageError("cross_eval.episodes must be >= 1");
        if (out.empty()) throw UsageError("out must be non-empty");
    }

    json to_json() const {
        const auto& t = train;
        return {
            {"seed", seed},
            {"out", out},
            {"workers", workers},
            {"method", method},
            {"iterations", iterations},
            {"dataset", dataset},
            {"checkpoint", checkpoint},
            {"env", env::env_to_json(env)},
            {"data", {{"episodes", episodes}, {"test_fraction", test_fraction}}},
            {"train",
             {{"N", t.episodes_per_step}, {"K", t.generator_steps}, {"gamma", t.gamma}, {"gae_lambda", t.gae_lambda},
              {"entropy_coef", t.trpo.entropy_coef}, {"max_kl", t.trpo.max_kl}, {"cg_iters", t.trpo.cg_iters},
              {"cg_damping", t.trpo.cg_damping}, {"backtrack_steps", t.trpo.backtrack_steps},
              {"backtrack_ratio", t.trpo.backtrack_ratio}, {"hidden", t.hidden}, {"value_epochs", t.value_epochs},
              {"value_lr", t.value_lr}, {"value_batch", t.value_batch}, {"disc_lr", t.disc_lr},
              {"disc_rows", t.disc_rows}, {"bc_epochs", t.bc_epochs}, {"bc_lr", t.bc_lr}, {"bc_batch", t.bc_batch},
              {"rl_iterations", t.rl_iterations}, {"rl_episodes", t.rl_episodes},
              {"checkpoint_every", t.checkpoint_every}, {"record_wallclock", t.record_wallclock}}},
            {"eval", {{"bins", bins}, {"mc_draws", mc_draws}}},
            {"maps", {{"r_values", map_r_values}}},
            {"cross_eval", {{"simulators", simulators}, {"episodes", cross_episodes}}},
        };
    }

    /// Strict: unknown keys are rejected so typos do not silently fall back to defaults.
    static RunConfig from_json(const json& j) {
        RunConfig c;
        try {
            c.merge(j);
        } catch (const json::exception& e) {
            throw UsageError(std::string("config: ") + e.what());
        }
        return c;
    }

    /// Hash of the resolved configuration. Leaves out `workers`, which only changes rollout
    /// sharding, and the output and dataset paths; data content is covered by data_hash.
    std::string hash() const {
        json j = to_json();
        for (const char* k : {"workers", "out", "dataset"}) j.erase(k);
        return hex64(fnv1a(j.dump()));
    }

private:
    static void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
        if (!j.is_object()) throw UsageError("config: '" + where + "' must be an object");
        for (const auto& [k, v] : j.items()) {
            bool ok = false;
            for (const char* a : allowed) ok = ok || k == a;
            if (!ok) throw UsageError("config: unknown key '" + where + (where.empty() ? "" : ".") + k + "'");
        }
    }

    template <class T>
    static void take(const json& j, const char* key, T& dst) {
        if (j.contains(key)) dst = j.at(key).get<T>();
    }

    void merge(const json& j) {
        check_keys(j, {"seed", "out", "workers", "method", "iterations", "dataset", "checkpoint", "env", "data", "train",
                       "eval", "maps", "cross_eval"},
                   "");
        take(j, "seed", seed);
        take(j, "out", out);
        take(j, "workers", workers);
        take(j, "method", method);
        take(j, "iterations", iterations);
        take(j, "dataset", dataset);
        take(j, "checkpoint", checkpoint);
        if (j.contains("env")) {
            check_keys(j["env"], {"TP", "TH", "wave", "period", "horizon", "v_center"}, "env");
            env = env::env_from_json(j["env"]);
        }
        if (j.contains("data")) {
            check_keys(j["data"], {"episodes", "test_fraction"}, "data");
            take(j["data"], "episodes", episodes);
            take(j["data"], "test_fraction", test_fraction);
        }
        if (j.contains("train")) {
            const auto& t = j["train"];
            check_keys(t, {"N", "K", "gamma", "gae_lambda", "entropy_coef", "max_kl", "cg_iters", "cg_damping",
                           "backtrack_steps", "backtrack_ratio", "hidden", "value_epochs", "value_lr", "value_batch",
                           "disc_lr", "disc_rows", "bc_epochs", "bc_lr", "bc_batch", "rl_iterations", "rl_episodes",
                           "checkpoint_every", "record_wallclock"},
                       "train");
            take(t, "N", train.episodes_per_step);
            take(t, "K", train.generator_steps);
            take(t, "gamma", train.gamma);
            take(t, "gae_lambda", train.gae_lambda);
            take(t, "entropy_coef", train.trpo.entropy_coef);
            take(t, "max_kl", train.trpo.max_kl);
            take(t, "cg_iters", train.trpo.cg_iters);
            take(t, "cg_damping", train.trpo.cg_damping);
            take(t, "backtrack_steps", train.trpo.backtrack_steps);
            take(t, "backtrack_ratio", train.trpo.backtrack_ratio);
            take(t, "hidden", train.hidden);
            take(t, "value_epochs", train.value_epochs);
            take(t, "value_lr", train.value_lr);
            take(t, "value_batch", train.value_batch);
            take(t, "disc_lr", train.disc_lr);
            take(t, "disc_rows", train.disc_rows);
            take(t, "bc_epochs", train.bc_epochs);
            take(t, "bc_lr", train.bc_lr);
            take(t, "bc_batch", train.bc_batch);
            take(t, "rl_iterations", train.rl_iterations);
            take(t, "rl_episodes", train.rl_episodes);
            take(t, "checkpoint_every", train.checkpoint_every);
            take(t, "record_wallclock", train.record_wallclock);
        }
        if (j.contains("eval")) {
            check_keys(j["eval"], {"bins", "mc_draws"}, "eval");
            take(j["eval"], "bins", bins);
            take(j["eval"], "mc_draws", mc_draws);
        }
        if (j.contains("maps")) {
            check_keys(j["maps"], {"r_values"}, "maps");
            take(j["maps"], "r_values", map_r_values);
        }
        if (j.contains("cross_eval")) {
            check_keys(j["cross_eval"], {"simulators", "episodes"}, "cross_eval");
            take(j["cross_eval"], "simulators", simulators);
            take(j["cross_eval"], "episodes", cross_episodes);
        }
    }
};

inline RunConfig load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw UsageError("cannot open config " + path);
    json j;
    try {
        j = json::parse(is);
    } catch (const json::exception& e) {
        throw UsageError("config " + path + ": " + e.what());
    }
    return RunConfig::from_json(j);
}

// ---------------------------------------------------------------------------
// helpers

inline std::ostream* log_stream = &std::cerr;

inline void log(const std::string& msg) {
    if (log_stream) *log_stream << "[demer] " << msg << "\n" << std::flush;
}

inline std::string file_hash(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw UsageError("cannot open " + path);
    std::ostringstream ss;
    ss << is.rdbuf();
    return hex64(fnv1a(ss.str()));
}

inline void write_text(const fs::path& path, const std::string& text) {
    fs::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os << text;
    if (!os) throw std::runtime_error("write failed: " + path.string());
}

inline eval::Provenance provenance(const RunConfig& c, const std::string& data_hash = "0000000000000000") {
    return {c.hash(), data_hash, c.seed};
}

struct LoadedData {
    env::Split split;
    std::string hash;
};

inline LoadedData load_split(const RunConfig& c) {
    const std::string path = c.dataset_path();
    if (!fs::exists(path)) throw UsageError("dataset " + path + " does not exist (run gen-data first)");
    const auto data = env::load_public_dataset(path);
    return {env::split_by_id(data, c.test_fraction), file_hash(path)};
}

inline fs::path train_dir(const RunConfig& c, const std::string& method) { return fs::path(c.out) / "train" / method; }

inline std::string checkpoint_path(const RunConfig& c, const std::string& method) {
    return (train_dir(c, method) / "model.json").string();
}

inline train::ModelBundle load_checkpoint(const std::string& path) {
    if (path == "truth") return train::ground_truth_model();
    if (!fs::exists(path)) throw UsageError("missing checkpoint " + path);
    return train::load_bundle(path);
}

/// Named models for eval/export: explicit --checkpoint paths, or whatever the train
/// command left under <out>/train, always preceded by the ground truth.
inline std::vector<std::pair<std::string, train::ModelBundle>> resolve_models(const RunConfig& c, const env::EnvParams& p) {
    std::vector<std::pair<std::string, train::ModelBundle>> out{{"truth", train::ground_truth_model(p)}};
    std::vector<std::string> paths = c.checkpoint;
    if (paths.empty())
        for (const char* m : {"sup", "gail", "mail", "demer"})
            if (fs::exists(checkpoint_path(c, m))) paths.push_back(checkpoint_path(c, m));
    std::map<std::string, int> seen{{"truth", 1}};
    for (const auto& path : paths) {
        if (path == "truth") continue;
        auto m = load_checkpoint(path);
        std::string label = train::to_string(m.method);
        if (seen[label]++) label += "_" + std::to_string(seen[label]);
        out.emplace_back(label, std::move(m));
    }
    return out;
}

// ---------------------------------------------------------------------------
// commands

/// Trajectory file plus a manifest with counts, hashes and the train/test boundary.
inline void cmd_gen_data(const RunConfig& c) {
    c.validate();
    const auto set = env::generate_dataset(c.episodes, c.env, c.seed);
    const fs::path path = c.dataset.empty() ? fs::path(c.out) / "data" / "trajectories.jsonl" : fs::path(c.dataset);
    fs::create_directories(path.parent_path());
    env::save_trajectory_set(path.string(), set);
    const auto boundary = env::split_boundary(set.episodes.size(), c.test_fraction);
    const json manifest = {
        {"kind", "manifest"},
        {"file", path.filename().string()},
        {"episodes", set.episodes.size()},
        {"lines", set.episodes.size() + 1},
        {"rows_per_episode", c.env.horizon},
        {"seed", c.seed},
        {"env", env::env_to_json(c.env)},
        {"split",
         {{"test_fraction", c.test_fraction},
          {"boundary", boundary},
          {"train", {{"first_id", 0}, {"end_id", boundary}, {"count", boundary}}},
          {"test",
           {{"first_id", boundary},
            {"end_id", static_cast<std::int64_t>(set.episodes.size())},
            {"count", static_cast<std::int64_t>(set.episodes.size()) - boundary}}}}},
        {"data_hash", file_hash(path.string())},
        {"config_hash", c.hash()},
        {"version", std::string(kVersion)},
    };
    write_text(path.parent_path() / "manifest.json", manifest.dump(2) + "\n");
    log("gen-data: wrote " + std::to_string(set.episodes.size()) + " episodes to " + path.string());
}

inline std::string metrics_header() { return "iteration,mean_r_A,mean_r_HB,disc_loss_hb,disc_loss_a,kl_a,kl_hb,wallclock\n"; }

inline std::string metrics_row(const train::IterationMetrics& m) {
    return std::to_string(m.iteration) + "," + fmt_double(m.mean_r_A) + "," + fmt_double(m.mean_r_HB) + "," +
           fmt_double(m.disc_loss_hb) + "," + fmt_double(m.disc_loss_a) + "," + fmt_double(m.kl_a) + "," +
           fmt_double(m.kl_hb) + "," + fmt_double(m.wallclock) + "\n";
}

/// Trains the configured method on the train split; writes model.json, periodic
/// checkpoints and metrics.csv under <out>/train/<method>.
inline train::ModelBundle cmd_train(const RunConfig& c) {
    c.validate();
    const auto data = load_split(c);
    const auto method = train::method_from_string(c.method);
    const auto cfg = c.train_config();
    const fs::path dir = train_dir(c, c.method);
    fs::create_directories(dir);
    const auto prov = provenance(c, data.hash);

    std::ofstream metrics(dir / "metrics.csv", std::ios::binary);
    if (!metrics) throw std::runtime_error("cannot write " + (dir / "metrics.csv").string());
    metrics << prov.comment() << "\n";
    std::string last_checkpoint = "none";

    train::TrainHooks hooks;
    if (method == train::Method::sup) {
        metrics << "epoch,train_log_likelihood\n";
        hooks.on_epoch = [&](int epoch, const agents::GaussianPolicy& p) {
            train::ModelBundle m{train::Method::sup, cfg.seed, data.split.train.env, {},
                                 train::driver_joint(p, data.split.train.env.period), {}};
            const double ll = eval::mean_log_likelihood(m, data.split.train);
            metrics << epoch << "," << fmt_double(ll) << "\n";
            log("train sup: epoch " + std::to_string(epoch) + " train_ll=" + fmt_double(ll));
        };
    } else {
        metrics << metrics_header();
        hooks.on_iteration = [&](const train::IterationMetrics& m) {
            metrics << metrics_row(m) << std::flush;
            std::ostringstream ss;
            ss << "train " << c.method << ": iteration " << m.iteration << " disc_update steps=2 loss_hb=" << m.disc_loss_hb
               << " loss_a=" << m.disc_loss_a << " r_A=" << m.mean_r_A << " r_HB=" << m.mean_r_HB;
            log(ss.str());
        };
        hooks.on_checkpoint = [&](int it, const train::ModelBundle& m) {
            const auto p = dir / ("checkpoint_" + std::to_string(it) + ".json");
            train::save_bundle(p.string(), m);
            last_checkpoint = p.string();
        };
    }
    log("train: method=" + c.method + " iterations=" + std::to_string(cfg.iterations) + " train_episodes=" +
        std::to_string(data.split.train.episodes.size()) + " seed=" + std::to_string(cfg.seed));
    try {
        auto model = train::train_method(method, data.split.train, cfg, hooks);
        train::save_bundle(checkpoint_path(c, c.method), model);
        log("train: wrote " + checkpoint_path(c, c.method));
        return model;
    } catch (const NumericError& e) {
        throw NumericError(std::string(e.what()) + "; last good checkpoint: " + last_checkpoint);
    }
}

/// Held-out log-likelihood, v and a_d trend correlations and the response-distribution
/// error for every model; one consolidated CSV plus the per-bin distribution table.
inline std::vector<eval::MetricReport> cmd_eval(const RunConfig& c) {
    c.validate();
    const auto data = load_split(c);
    const auto& test = data.split.test;
    if (test.episodes.empty()) throw UsageError("test split is empty");
    const std::string sh = eval::split_hash(test);
    std::vector<eval::MetricReport> rows;
    std::ostringstream dist;
    const auto prov = provenance(c, data.hash);
    dist << prov.comment() << "\nmethod,bin,lo,hi,simulated,real,error\n";
    for (const auto& [label, m] : resolve_models(c, test.env)) {
        auto add = [&](const std::string& metric, double v, std::optional<int> bin = {}) {
            rows.push_back({label, metric, bin, v, "test", c.seed, sh, m.method == train::Method::truth ? "truth" : label});
        };
        add("log_likelihood", eval::mean_log_likelihood(m, test, c.mc_draws, c.seed));
        for (auto ind : {eval::Indicator::v, eval::Indicator::a_d}) {
            double r = std::numeric_limits<double>::quiet_NaN();
            try {
                r = eval::trend_correlation(m, test, ind, agents::ActMode::sample, c.seed);
            } catch (const UndefinedStatistic&) {
            }
            add("trend_corr_" + eval::to_string(ind), r);
        }
        const auto de = eval::response_distribution_error(m, test, c.bins, c.seed);
        double l1 = 0;
        for (int b = 0; b < c.bins; ++b) {
            const auto i = static_cast<std::size_t>(b);
            l1 += std::abs(de.error[i]);
            dist << label << "," << b << "," << fmt_double(de.edges[i]) << "," << fmt_double(de.edges[i + 1]) << ","
                 << fmt_double(de.simulated[i]) << "," << fmt_double(de.real[i]) << "," << fmt_double(de.error[i]) << "\n";
        }
        add("dist_error_l1", l1);
        log("eval: " + label + " log_likelihood=" + fmt_double(rows[rows.size() - 4].value) +
            " trend_v=" + fmt_double(rows[rows.size() - 3].value) + " dist_l1=" + fmt_double(l1));
    }
    std::ostringstream os;
    eval::write_reports_csv(os, rows, prov);
    write_text(fs::path(c.out) / "eval" / "metrics.csv", os.str());
    write_text(fs::path(c.out) / "eval" / "distribution.csv", dist.str());
    return rows;
}

struct MapErrorRow {
    std::string label, target;
    double r = 0;
    eval::MapError error;
};

/// Ground-truth and learned maps of the platform (v x tw), confounder and driver (v x a_p)
/// functions at each configured r, plus their errors against the rules.
inline std::vector<MapErrorRow> cmd_export_maps(const RunConfig& c) {
    c.validate();
    const env::EnvParams p = fs::exists(c.dataset_path()) ? load_split(c).split.train.env : c.env;
    const auto prov = provenance(c);
    const auto models = resolve_models(c, p);
    const auto& truth = models.front().second;
    std::vector<MapErrorRow> errors;
    std::size_t rows = 0;
    for (const auto& [label, m] : models) {
        std::vector<eval::PolicyMap> maps;
        for (double r : c.map_r_values)
            for (auto t : {eval::MapTarget::platform, eval::MapTarget::confounder, eval::MapTarget::driver}) {
                eval::MapFn fn;
                try {
                    fn = eval::model_map(m, t);
                } catch (const DimensionError&) {
                    continue;
                }
                const auto grid = eval::default_grid(t, r);
                std::ostringstream name;
                name << eval::to_string(t) << "_r" << fmt_double(r);
                maps.push_back(eval::export_policy_map(fn, grid, name.str()));
                errors.push_back({label, eval::to_string(t), r, eval::map_mse(maps.back().values, eval::model_map(truth, t)(maps.back().points))});
                rows += maps.back().points.size();
            }
        std::ostringstream os;
        eval::write_map_csv(os, maps, prov);
        write_text(fs::path(c.out) / "maps" / (label + ".csv"), os.str());
    }
    std::ostringstream os;
    os << prov.comment() << "\nmethod,target,r,mse,mae,pearson\n";
    for (const auto& e : errors)
        os << e.label << "," << e.target << "," << fmt_double(e.r) << "," << fmt_double(e.error.mse) << ","
           << fmt_double(e.error.mae) << "," << (e.error.pearson ? fmt_double(*e.error.pearson) : "nan") << "\n";
    write_text(fs::path(c.out) / "maps" / "map_errors.csv", os.str());
    log("export-maps: " + std::to_string(rows) + " grid rows for " + std::to_string(models.size()) + " models");
    return errors;
}

struct CrossEvalMatrix {
    std::vector<std::string> policies;
    std::vector<std::string> envs;
    std::vector<std::vector<eval::CrossEvalResult>> cells;  // [policy][env]
};

/// Trains one recommendation policy per learned simulator, then scores every policy and
/// the reference defaults in every evaluation environment (learned simulators restarted
/// from held-out initial states, and the ground truth).
inline CrossEvalMatrix cmd_cross_eval(const RunConfig& c) {
    c.validate();
    const auto data = load_split(c);
    std::map<std::string, std::string> sims = c.simulators;
    if (sims.empty())
        for (const char* m : {"mail", "demer"}) sims[m] = checkpoint_path(c, m);
    const auto cfg = c.train_config();
    const auto norm = train::observation_norm(data.split.train, agents::encoded_dim(data.split.train.env.period));

    CrossEvalMatrix out;
    std::vector<eval::PlatformFn> policies;
    std::vector<train::SimulatorEnv> envs;
    std::vector<std::pair<std::string, agents::GaussianPolicy>> trained;
    for (const auto& [name, path] : sims) {
        auto model = load_checkpoint(path);
        const auto sim = train::SimulatorEnv::learned(name, model, train::initial_pool(data.split.train));
        log("cross-eval: training policy in simulator " + name);
        auto policy = train::train_policy_in_simulator(sim, cfg, norm, [&](const train::RlProgress& p) {
            if (p.iteration % 10 == 0)
                log("cross-eval: " + name + " iteration " + std::to_string(p.iteration) + " return=" + fmt_double(p.mean_return));
        });
        out.policies.push_back("pi_" + name);
        policies.push_back(eval::policy_platform_fn(policy, data.split.train.env.period));
        trained.emplace_back(name, std::move(policy));
        envs.push_back(train::SimulatorEnv::learned("evalenv_" + name, std::move(model),
                                                    train::initial_pool(data.split.test.episodes.empty() ? data.split.train
                                                                                                         : data.split.test)));
    }
    out.policies.push_back("data_default");
    policies.push_back(eval::rule_platform_fn(data.split.train.env));
    out.policies.push_back("zero_action");
    policies.push_back(eval::constant_platform_fn(0.0));
    envs.push_back(train::SimulatorEnv::ground_truth(data.split.train.env));
    for (const auto& e : envs) out.envs.push_back(e.name());

    for (std::size_t i = 0; i < policies.size(); ++i) {
        out.cells.emplace_back();
        for (const auto& e : envs) out.cells.back().push_back(eval::cross_evaluate(policies[i], e, c.cross_episodes, c.seed));
    }

    const auto prov = provenance(c, data.hash);
    std::ostringstream os;
    os << prov.comment() << "\npolicy,env,mean_return,stderr,episodes\n";
    for (std::size_t i = 0; i < out.policies.size(); ++i)
        for (std::size_t k = 0; k < out.envs.size(); ++k) {
            const auto& r = out.cells[i][k];
            os << out.policies[i] << "," << out.envs[k] << "," << fmt_double(r.mean) << "," << fmt_double(r.stderr_) << ","
               << r.episodes << "\n";
        }
    write_text(fs::path(c.out) / "cross_eval" / "matrix.csv", os.str());
    for (const auto& [name, policy] : trained)
        write_text(fs::path(c.out) / "cross_eval" / ("policy_" + name + ".json"), agents::to_checkpoint(policy).dump() + "\n");
    log("cross-eval: wrote " + std::to_string(out.policies.size()) + "x" + std::to_string(out.envs.size()) + " matrix");
    return out;
}

}  // namespace demer::pipeline
