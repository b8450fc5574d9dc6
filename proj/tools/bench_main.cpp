#include "mvce/bench.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <sstream>
#include <string>

namespace {

std::vector<std::string> split_methods(const std::string& csv)
{
    std::vector<std::string> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Constrained minimum-variance estimation benchmark harness"};
    app.require_subcommand(1);

    auto* run = app.add_subcommand("run", "Simulate a scenario and write MSE/cost artifacts");
    std::string config_path;
    run->add_option("--config", config_path, "Scenario config (JSON)")->required();
    int paths = -1;
    run->add_option("--paths", paths, "Override number of Monte-Carlo paths");
    long long seed = -1;
    run->add_option("--seed", seed, "Override master seed");
    int horizon = -1;
    run->add_option("--horizon", horizon, "Override estimation horizon N");
    std::string methods;
    run->add_option("--methods", methods, "Comma-separated estimator list (kf,mhe,cmhe,cfie,memhe)");
    std::string out_dir;
    run->add_option("--out", out_dir, "Override output directory");
    bool dump_traj = false;
    run->add_flag("--dump-trajectories", dump_traj, "Also write per-path trajectories CSV");

    CLI11_PARSE(app, argc, argv);

    try {
        auto cfg = mvce::load_scenario(config_path);
        if (paths >= 1) cfg.paths = paths;
        if (seed >= 0) cfg.seed = static_cast<std::uint64_t>(seed);
        if (horizon >= 0) cfg.horizon = horizon;
        if (!methods.empty()) cfg.estimators = split_methods(methods);
        if (!out_dir.empty()) cfg.out_dir = out_dir;
        if (dump_traj) cfg.dump_trajectories = true;
        return mvce::run_benchmark(cfg);
    } catch (const std::exception& e) {
        std::cerr << "bench: " << e.what() << "\n";
        return 1;
    }
}
