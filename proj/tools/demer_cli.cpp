// demer: generate toy data, train simulators, evaluate them and cross-evaluate policies.

#include <CLI11.hpp>

#include "demer/pipeline.hpp"

namespace {

using demer::pipeline::RunConfig;

struct Flags {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    std::optional<std::string> method;
    std::optional<int> iterations;
    std::optional<int> workers;
    std::optional<std::string> dataset;
    std::vector<std::string> checkpoint;
};

void add_common(CLI::App* cmd, Flags& f) {
    cmd->add_option("--config", f.config, "JSON run configuration");
    cmd->add_option("--seed", f.seed, "master seed");
    cmd->add_option("--out", f.out, "output directory");
    cmd->add_option("--workers", f.workers, "rollout worker threads (default: number of processors)")->check(CLI::NonNegativeNumber);
    cmd->add_option("--dataset", f.dataset, "trajectory file (default: <out>/data/trajectories.jsonl)");
}

RunConfig resolve(const Flags& f) {
    RunConfig c = f.config.empty() ? RunConfig{} : demer::pipeline::load_config(f.config);
    if (f.seed) c.seed = *f.seed;
    if (f.out) c.out = *f.out;
    if (f.method) c.method = *f.method;
    if (f.iterations) c.iterations = *f.iterations;
    if (f.workers) c.workers = *f.workers;
    if (f.dataset) c.dataset = *f.dataset;
    if (!f.checkpoint.empty()) c.checkpoint = f.checkpoint;
    c.validate();
    return c;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Confounded multi-agent environment reconstruction on the toy driver-program task"};
    app.set_version_flag("--version", std::string(demer::kVersion));
    app.require_subcommand(1);
    Flags f;

    auto* gen = app.add_subcommand("gen-data", "generate ground-truth trajectories and a manifest");
    add_common(gen, f);

    auto* tr = app.add_subcommand("train", "train sup, gail, mail or demer on the train split");
    add_common(tr, f);
    tr->add_option("--method", f.method, "training method")->check(CLI::IsMember({"sup", "gail", "mail", "demer"}));
    tr->add_option("--iterations", f.iterations, "training iterations")->check(CLI::NonNegativeNumber);

    auto* ev = app.add_subcommand("eval", "held-out likelihood, trend correlation and distribution error");
    add_common(ev, f);
    ev->add_option("--checkpoint", f.checkpoint, "model checkpoint (repeatable; 'truth' for the rules)");

    auto* maps = app.add_subcommand("export-maps", "policy-function maps and their errors against the rules");
    add_common(maps, f);
    maps->add_option("--checkpoint", f.checkpoint, "model checkpoint (repeatable)");

    auto* cross = app.add_subcommand("cross-eval", "train policies in learned simulators and cross-evaluate them");
    add_common(cross, f);
    cross->add_option("--iterations", f.iterations, "unused by cross-eval; accepted for config symmetry");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        const RunConfig c = resolve(f);
        if (gen->parsed()) demer::pipeline::cmd_gen_data(c);
        if (tr->parsed()) demer::pipeline::cmd_train(c);
        if (ev->parsed()) demer::pipeline::cmd_eval(c);
        if (maps->parsed()) demer::pipeline::cmd_export_maps(c);
        if (cross->parsed()) demer::pipeline::cmd_cross_eval(c);
    } catch (const demer::pipeline::UsageError& e) {
        std::cerr << "demer: error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "demer: failed: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
