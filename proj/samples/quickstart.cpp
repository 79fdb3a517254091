// Generate toy logs, train a small DEMER simulator and score it against the hidden rules.

#include <iostream>

#include "demer/eval.hpp"

int main() {
    using namespace demer;
    const auto logs = env::generate_dataset(400, {}, 1);
    const auto split = env::split_by_id(logs.public_view());

    train::TrainConfig cfg;
    cfg.iterations = 20;
    cfg.episodes_per_step = 50;
    cfg.seed = 1;
    train::TrainHooks hooks;
    hooks.on_iteration = [](const train::IterationMetrics& m) {
        if (m.iteration % 5 == 0)
            std::cout << "iteration " << m.iteration << "  r_A " << m.mean_r_A << "  r_HB " << m.mean_r_HB << "\n";
    };
    const auto model = train::demer_train(split.train, cfg, hooks);

    const auto truth = train::ground_truth_model();
    const auto platform = eval::map_mse(eval::model_map(model, eval::MapTarget::platform),
                                        eval::model_map(truth, eval::MapTarget::platform),
                                        eval::default_grid(eval::MapTarget::platform, 1.3));
    std::cout << "held-out log-likelihood  " << eval::mean_log_likelihood(model, split.test) << "\n"
              << "trend correlation (v)    " << eval::trend_correlation(model, split.test, eval::Indicator::v) << "\n"
              << "platform map MAE, r=1.3  " << platform.mae << "\n";
}
