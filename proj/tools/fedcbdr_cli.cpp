#include <cstdint>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fedcbdr/config.hpp"
#include "fedcbdr/runner.hpp"
#include "json.hpp"

namespace {

using fedcbdr::config::ExperimentConfig;
using nlohmann::ordered_json;

std::string cell_dir_name(double tau_old, double tau_new, double w_old, double w_new) {
    std::ostringstream name;
    name << "tau_old=" << tau_old << "_tau_new=" << tau_new << "_w_old=" << w_old
         << "_w_new=" << w_new;
    return name.str();
}

int run_grid(const std::string& config_path, const std::string& out_dir,
             std::vector<double> tau_old, std::vector<double> tau_new, std::vector<double> w_old,
             std::vector<double> w_new) {
    ExperimentConfig cfg;
    try {
        cfg = fedcbdr::config::load_config(config_path);
    } catch (const std::exception& ex) {
        std::cerr << "config error: " << ex.what() << "\n";
        return 2;
    }
    // absent axes collapse to the configured value
    if (tau_old.empty()) tau_old = {cfg.tts.tau_old};
    if (tau_new.empty()) tau_new = {cfg.tts.tau_new};
    if (w_old.empty()) w_old = {cfg.tts.w_old};
    if (w_new.empty()) w_new = {cfg.tts.w_new};

    ordered_json cells = ordered_json::array();
    for (double to : tau_old)
        for (double tn : tau_new)
            for (double wo : w_old)
                for (double wn : w_new) {
                    ExperimentConfig cell = cfg;
                    cell.tts = {to, tn, wo, wn};
                    const std::string name = cell_dir_name(to, tn, wo, wn);
                    const std::string dir = out_dir + "/" + name;
                    std::cout << "grid cell " << name << "\n";
                    const int rc = fedcbdr::runner::run_experiment_cfg(cell, dir);
                    if (rc != 0) return rc;

                    std::ifstream in(dir + "/summary.json");
                    ordered_json summary = ordered_json::parse(in);
                    ordered_json row;
                    row["tau_old"] = to;
                    row["tau_new"] = tn;
                    row["w_old"] = wo;
                    row["w_new"] = wn;
                    row["dir"] = name;
                    row["methods"] = summary["methods"];
                    cells.push_back(std::move(row));
                }

    ordered_json grid_summary;
    grid_summary["config"] = config_path;
    grid_summary["cells"] = std::move(cells);
    std::ofstream out(out_dir + "/grid_summary.json");
    out << grid_summary.dump(2) << "\n";
    if (!out) {
        std::cerr << "error: cannot write " << out_dir << "/grid_summary.json\n";
        return 1;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Desk-scale federated class-incremental learning with FedCBDR replay"};
    app.require_subcommand(1);

    std::string run_config, run_out = "out", run_method;
    std::vector<std::uint64_t> run_seeds;
    double run_beta = -1.0;
    auto* run = app.add_subcommand("run", "Run the configured experiment");
    run->add_option("config", run_config, "experiment config (JSON)")->required();
    run->add_option("--seed", run_seeds, "override the seed list (repeatable)");
    run->add_option("--method", run_method,
                    "run a single method: Finetune, LocalRandomReplay or FedCBDR");
    run->add_option("--beta", run_beta, "override the Dirichlet concentration (> 0)");
    run->add_option("--out", run_out, "output directory (default: out)");

    std::string balance_metrics;
    auto* balance =
        app.add_subcommand("balance-report", "Buffer balance statistics from a metrics file");
    balance->add_option("metrics", balance_metrics, "metrics.jsonl path")->required();

    std::string grid_config, grid_out = "grid_out";
    std::vector<double> grid_tau_old, grid_tau_new, grid_w_old, grid_w_new;
    auto* grid = app.add_subcommand("grid", "Temperature/weight sensitivity sweep");
    grid->add_option("config", grid_config, "experiment config (JSON)")->required();
    grid->add_option("--tau-old", grid_tau_old, "old-task temperatures to sweep");
    grid->add_option("--tau-new", grid_tau_new, "new-task temperatures to sweep");
    grid->add_option("--w-old", grid_w_old, "old-group loss weights to sweep");
    grid->add_option("--w-new", grid_w_new, "new-group loss weights to sweep");
    grid->add_option("--out", grid_out, "output directory (default: grid_out)");

    CLI11_PARSE(app, argc, argv);

    if (run->parsed()) {
        fedcbdr::runner::Overrides overrides;
        overrides.seeds = run_seeds;
        overrides.method = run_method;
        overrides.beta = run_beta;
        return fedcbdr::runner::run_experiment(run_config, run_out, overrides);
    }
    if (balance->parsed()) {
        try {
            std::cout << fedcbdr::runner::balance_to_json(
                fedcbdr::runner::report_buffer_balance(balance_metrics));
            return 0;
        } catch (const std::exception& ex) {
            std::cerr << "error: " << ex.what() << "\n";
            return 1;
        }
    }
    return run_grid(grid_config, grid_out, grid_tau_old, grid_tau_new, grid_w_old, grid_w_new);
}
