// Library walk-through on the synthetic fixture: train a small denoiser, forecast the
// test split, score against climatology and backtest MVP/GOP portfolios.
//
//   demo_forecast [workdir] [steps]
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>

#include "diffolio/diffolio.hpp"

using namespace diffolio;

int main(int argc, char** argv) {
    const std::string dir = argc > 1 ? argv[1] : (std::filesystem::temp_directory_path() / "diffolio_demo").string();
    const int steps = argc > 2 ? std::stoi(argv[2]) : 600;

    try {
        RunConfig cfg = validate_config(write_synthetic_fixture(dir));
        cfg.train.steps = steps;
        cfg.train.warmup = steps / 10;
        cfg.train.val_every = 0;
        cfg.sample.samples = 32;
        const auto in = load_inputs(cfg);
        const auto data = prepare_inputs(cfg, in);
        const auto init = init_params(model_config_for(cfg, data), cfg.seed);
        std::printf("%zu training anchors, %zu test anchors, %zu parameters\n", data.train_anchors.size(),
                    data.test_anchors.size(), init.values.size());

        const auto sched = cfg.train.schedule();
        const auto sampling = cfg.sampler_settings(sched);
        TrainHooks hooks;
        hooks.on_log = [&](const TrainLogRow& r) {
            if (r.step % std::max(1, steps / 6) == 0) std::printf("  step %5d  mse %.4f  l_corr %.4f\n", r.step, r.mse, r.l_corr);
        };
        const auto res = train(data, init, cfg.train, sampling, cfg.parallel(), hooks);

        const auto anchors = thin_anchors(data.test_anchors, 200);
        const auto ens = forecast_anchors(res.best, data, anchors, sched, sampling, cfg.parallel());
        const Matrix real = realized_for(in.panel, ens);
        std::vector<Date> dates;
        for (const auto& e : ens) dates.push_back(e.date);
        const auto clim = climatology_ensembles(data.excess.middleRows(data.split.train.first, data.split.train.count),
                                                dates, cfg.sample.samples, cfg.seed);
        const auto model = evaluate_forecasts(real, ens);
        const auto base = evaluate_forecasts(real, clim);
        std::printf("\n%-12s %10s %10s %10s\n", "", "CRPS", "ES", "CorrScore");
        std::printf("%-12s %10.6f %10.6f %10.4f\n", "model", model.crps_mean, model.es, model.corr_score);
        std::printf("%-12s %10.6f %10.6f %10.4f\n", "climatology", base.crps_mean, base.es, base.corr_score);

        std::printf("\n%-5s %8s %8s %8s %8s %8s\n", "", "SR", "Ret", "Vol", "MDD", "CE");
        for (const auto& s : run_strategies(ens, real, cfg.parallel())) {
            const auto& r = s.report;
            std::printf("%-5s %8.3f %8.4f %8.4f %8.4f %8.4f\n", s.name.c_str(), r.sr, r.ret, r.vol, r.mdd, r.ce);
        }
    } catch (const Error& e) {
        std::cerr << "demo failed: " << e.what() << "\n";
        return static_cast<int>(e.code());
    }
    return 0;
}
