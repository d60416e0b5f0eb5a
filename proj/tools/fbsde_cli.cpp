// Command-line front end: forward simulation, backward solve, PDE reference,
// importance-sampled estimation, the four-row benchmark table, and the
// early-horizon workflow. Exit codes: 0 success, 1 configuration/validation
// error, 2 numerical failure.

#include <CLI11.hpp>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "fbsde/fbsde.hpp"

namespace fs = std::filesystem;
using fbsde::json;

namespace {

struct CommonArgs {
    std::string config_path;
    std::string out_dir;
    std::optional<std::uint64_t> seed_override;
    int workers = 1;
    int verbosity = 0;
};

std::string default_out_dir() {
    if (const char* env = std::getenv("FBSDE_OUT")) return env;
    return "results";
}

json load_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("cannot read config file: " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw std::invalid_argument("config parse error in " + path + ": " + e.what());
    }
    return j;
}

fbsde::ExperimentConfig load_config(const CommonArgs& args) {
    auto cfg = fbsde::config_from_json(load_json(args.config_path));
    if (args.seed_override) cfg.seed = *args.seed_override;
    cfg.workers = args.workers;
    return cfg;
}

void write_text(const fs::path& path, const std::string& content) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << content;
}

// results are byte-stable for a fixed seed; wall-clock metadata goes to a
// separate file so result.json stays reproducible
void write_run_meta(const fs::path& dir, double seconds) {
    json meta;
    const auto now = std::chrono::system_clock::now();
    meta["finished_unix_ms"] =
        std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count();
    meta["runtime_seconds"] = seconds;
    write_text(dir / "run_meta.json", meta.dump(2) + "\n");
}

fs::path prepare_out_dir(const std::string& dir) {
    fs::path p(dir);
    fs::create_directories(p);
    return p;
}

struct Timer {
    std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    }
};

int cmd_simulate(const CommonArgs& args, bool dump_paths) {
    auto cfg = load_config(args);
    const auto spec = cfg.problem();
    const auto grid = fbsde::TimeGrid::from_horizon(cfg.horizon, cfg.dt);
    const double x0[1] = {cfg.x0};
    Timer timer;
    auto batch = fbsde::simulate_forward(spec, grid, x0, cfg.n_paths, cfg.seed, true, cfg.workers);

    double mean = 0.0, var = 0.0;
    for (std::size_t m = 0; m < batch.n_paths; ++m) mean += batch.state(m, grid.n_steps)[0];
    mean /= batch.n_paths;
    for (std::size_t m = 0; m < batch.n_paths; ++m) {
        const double d = batch.state(m, grid.n_steps)[0] - mean;
        var += d * d;
    }
    var /= (batch.n_paths > 1 ? batch.n_paths - 1 : 1);

    json summary{{"paths", batch.n_paths},
                 {"steps", grid.n_steps},
                 {"exit_fraction", batch.exit_fraction()},
                 {"failed_paths", batch.failed_count()},
                 {"terminal_mean", mean},
                 {"terminal_variance", var}};
    const auto dir = prepare_out_dir(args.out_dir);
    write_text(dir / "simulate.json", summary.dump(2) + "\n");
    if (dump_paths) fbsde::write_batch_csv((dir / "paths.csv").string(), batch);
    write_run_meta(dir, timer.seconds());
    std::cout << "exit fraction " << batch.exit_fraction() << ", summary in "
              << (dir / "simulate.json").string() << "\n";
    return 0;
}

int cmd_solve(const CommonArgs& args) {
    auto cfg = load_config(args);
    const auto spec = cfg.problem();
    const auto grid = fbsde::TimeGrid::from_horizon(cfg.horizon, cfg.dt);
    const double x0[1] = {cfg.x0};
    Timer timer;

    fbsde::ProblemSpec sim_spec = spec;
    if (cfg.drift_tilt) sim_spec.drift = cfg.tilted_drift();
    auto basis = fbsde::make_adaptive_basis(sim_spec, grid, x0, cfg.basis_size, cfg.basis_width,
                                            cfg.seed);
    auto batch = fbsde::simulate_forward(sim_spec, grid, x0, cfg.n_paths, cfg.seed,
                                         cfg.stopping_mode == fbsde::StoppingMode::FreezeAll,
                                         cfg.workers);
    const auto driver = cfg.drift_tilt
                            ? fbsde::drift_changed_driver(spec, cfg.tilted_drift())
                            : fbsde::free_energy_driver(spec);
    auto sol = fbsde::backward_solve(batch, basis, driver, spec, cfg.lsmc());

    const auto dir = prepare_out_dir(args.out_dir);
    fbsde::write_coefficients_csv((dir / "coefficients.csv").string(), sol.coeffs);
    fbsde::write_diagnostics_csv((dir / "diagnostics.csv").string(), sol);
    json result{{"gamma_estimate", sol.gamma_estimate},
                {"exit_probability",
                 fbsde::exit_probability_from_value(sol.gamma_estimate, cfg.epsilon).value},
                {"max_rank", sol.max_rank},
                {"recommended_K", sol.recommended_basis_size},
                {"min_active", sol.min_active},
                {"rank_deficient", sol.any_rank_deficient},
                {"skipped_paths", sol.skipped_paths},
                {"config", fbsde::config_to_json(cfg)}};
    write_text(dir / "result.json", result.dump(2) + "\n");
    write_run_meta(dir, timer.seconds());
    std::cout << "gamma_estimate " << sol.gamma_estimate << ", outputs in " << dir.string()
              << "\n";
    return 0;
}

int cmd_reference(const CommonArgs& args, double sigma, double horizon, double x, double epsilon,
                  const std::string& psi_csv) {
    fbsde::ExperimentConfig cfg;
    if (!args.config_path.empty()) {
        cfg = load_config(args);
    } else {
        cfg.sigma = sigma;
        cfg.horizon = horizon;
        cfg.x0 = x;
        cfg.epsilon = epsilon;
        cfg.validate();
    }
    const auto spec = cfg.problem();
    Timer timer;
    auto psi = fbsde::solve_exit_probability(spec, cfg.pde_grid);
    const double p = psi(cfg.x0);
    const double v_ref = -std::log(p + cfg.epsilon);
    if (!psi_csv.empty()) fbsde::write_psi_csv(psi_csv, psi);
    json out{{"V_ref", v_ref},
             {"exit_probability", p},
             {"sigma", cfg.sigma},
             {"T", cfg.horizon},
             {"x", cfg.x0},
             {"epsilon", cfg.epsilon}};
    if (!args.out_dir.empty()) {
        const auto dir = prepare_out_dir(args.out_dir);
        write_text(dir / "reference.json", out.dump(2) + "\n");
        write_run_meta(dir, timer.seconds());
    }
    std::cout << "V_ref " << v_ref << " (exit probability " << p << ")\n";
    return 0;
}

int cmd_estimate(const CommonArgs& args, bool dump_weights) {
    auto cfg = load_config(args);
    cfg.run_importance = true;
    Timer timer;
    auto result = fbsde::run_experiment(cfg);
    const auto dir = prepare_out_dir(args.out_dir);
    write_text(dir / "result.json", fbsde::result_to_json(result).dump(2) + "\n");
    if (result.importance) {
        write_text(dir / "is_report.json",
                   fbsde::is_report_to_json(*result.importance).dump(2) + "\n");
        if (dump_weights)
            fbsde::write_weights_csv((dir / "weights.csv").string(),
                                     result.importance->log_weights);
    }
    write_run_meta(dir, timer.seconds());
    const auto& rep = *result.importance;
    std::cout << "IS estimate " << rep.estimate << " (free energy " << rep.free_energy
              << "), variance reduction " << rep.variance_reduction_factor << "x\n";
    return 0;
}

int cmd_experiment(const CommonArgs& args) {
    auto cfg = load_config(args);
    Timer timer;
    auto result = fbsde::run_experiment(cfg);
    const auto dir = prepare_out_dir(args.out_dir);
    json out = fbsde::result_to_json(result);
    out["config"] = fbsde::config_to_json(cfg);
    write_text(dir / "result.json", out.dump(2) + "\n");
    write_run_meta(dir, timer.seconds());
    std::cout << "V_bar " << result.mean << " S2 " << result.variance;
    if (result.v_ref) std::cout << " V_ref " << *result.v_ref;
    std::cout << "\n";
    return 0;
}

fbsde::ExperimentConfig table1_row(int row, std::uint64_t seed, int repetitions) {
    fbsde::ExperimentConfig cfg;
    cfg.epsilon = 0.01;
    cfg.x0 = -1.0;
    cfg.seed = seed;
    cfg.repetitions = repetitions;
    switch (row) {
        case 1: cfg.sigma = 1.0; cfg.horizon = 5.0; cfg.basis_size = 8; cfg.n_paths = 300; cfg.dt = 1e-3; break;
        case 2: cfg.sigma = 1.0; cfg.horizon = 1.0; cfg.basis_size = 5; cfg.n_paths = 300; cfg.dt = 1e-3; break;
        case 3: cfg.sigma = 0.6; cfg.horizon = 1.0; cfg.basis_size = 5; cfg.n_paths = 400; cfg.dt = 1e-4; break;
        case 4: cfg.sigma = 0.5; cfg.horizon = 1.0; cfg.basis_size = 6; cfg.n_paths = 450; cfg.dt = 1e-4; break;
        default: throw std::invalid_argument("table1: row must be 1..4");
    }
    return cfg;
}

int cmd_table1(const CommonArgs& args, std::vector<int> rows) {
    std::uint64_t seed = 20210401;
    int repetitions = 20;
    if (!args.config_path.empty()) {
        auto j = load_json(args.config_path);
        if (j.contains("seed")) seed = j.at("seed").get<std::uint64_t>();
        if (j.contains("repetitions")) repetitions = j.at("repetitions").get<int>();
        if (rows.empty() && j.contains("rows")) rows = j.at("rows").get<std::vector<int>>();
    }
    if (args.seed_override) seed = *args.seed_override;
    if (rows.empty()) rows = {1, 2, 3, 4};
    for (int r : rows)
        if (r < 1 || r > 4) throw std::invalid_argument("table1: rows must be within 1..4");

    Timer timer;
    const auto dir = prepare_out_dir(args.out_dir);
    std::ofstream csv(dir / "table1.csv");
    if (!csv) throw std::runtime_error("cannot write table1.csv");
    csv << "row,V_ref,V_bar,S2\n";

    std::printf("%-44s %10s %10s %12s\n", "configuration", "V_ref", "V_bar", "S2");
    json all = json::array();
    for (int r : rows) {
        auto cfg = table1_row(r, seed, repetitions);
        cfg.workers = args.workers;
        auto result = fbsde::run_experiment(cfg);
        char label[64];
        std::snprintf(label, sizeof(label), "K=%d M=%d T=%g dt=%g sigma=%g", cfg.basis_size,
                      cfg.n_paths, cfg.horizon, cfg.dt, cfg.sigma);
        std::printf("%-44s %10.4f %10.4f %12.3e\n", label, result.v_ref.value_or(0.0),
                    result.mean, result.variance);
        csv << r << ',' << result.v_ref.value_or(0.0) << ',' << result.mean << ','
            << result.variance << "\n";
        json entry = fbsde::result_to_json(result);
        entry["row"] = r;
        entry["config"] = fbsde::config_to_json(cfg);
        all.push_back(entry);
    }
    write_text(dir / "table1.json", all.dump(2) + "\n");
    write_run_meta(dir, timer.seconds());
    return 0;
}

int cmd_early_horizon(const CommonArgs& args) {
    auto cfg = load_config(args);
    Timer timer;
    auto result = fbsde::run_early_horizon(cfg);
    const auto dir = prepare_out_dir(args.out_dir);
    json out = fbsde::result_to_json(result);
    out["config"] = fbsde::config_to_json(cfg);
    write_text(dir / "result.json", out.dump(2) + "\n");
    write_run_meta(dir, timer.seconds());
    std::cout << "V_bar " << result.mean << " S2 " << result.variance << " T_eff "
              << result.effective_horizon.value_or(0.0) << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Path-space free energies of stopped diffusions via least-squares Monte Carlo, "
                 "with adaptive importance sampling"};
    app.require_subcommand(1);

    CommonArgs args;
    args.out_dir = default_out_dir();

    auto add_common = [&](CLI::App* cmd, bool need_config) {
        auto* opt = cmd->add_option("--config", args.config_path, "JSON configuration file");
        if (need_config) opt->required()->check(CLI::ExistingFile);
        cmd->add_option("--out", args.out_dir, "output directory");
        std::uint64_t seed_val = 0;
        cmd->add_option_function<std::uint64_t>(
            "--seed", [&args](std::uint64_t s) { args.seed_override = s; },
            "override the master seed");
        (void)seed_val;
        cmd->add_option("--workers", args.workers, "worker threads (outputs are independent of it)")
            ->check(CLI::PositiveNumber);
        cmd->add_flag("-v,--verbose", args.verbosity, "more logging");
    };

    bool dump_paths = false;
    auto* sim = app.add_subcommand("simulate", "forward ensemble and summary statistics");
    add_common(sim, true);
    sim->add_flag("--dump-paths", dump_paths, "write the full trajectory batch as CSV");

    auto* solve = app.add_subcommand("solve", "backward LSMC solve with coefficient dumps");
    add_common(solve, true);

    double ref_sigma = 1.0, ref_T = 1.0, ref_x = -1.0, ref_eps = 0.01;
    std::string psi_csv;
    auto* ref = app.add_subcommand("reference", "finite-difference reference value");
    add_common(ref, false);
    ref->add_option("--sigma", ref_sigma, "noise intensity");
    ref->add_option("--T", ref_T, "horizon");
    ref->add_option("--x", ref_x, "initial state");
    ref->add_option("--epsilon", ref_eps, "regularisation");
    ref->add_option("--psi-csv", psi_csv, "dump psi(., T) to this CSV file");

    bool dump_weights = false;
    auto* est = app.add_subcommand("estimate", "fit the control and run importance sampling");
    add_common(est, true);
    est->add_flag("--dump-weights", dump_weights, "write per-path weights as CSV");

    auto* exp = app.add_subcommand("experiment", "repeated solve with mean/variance aggregation");
    add_common(exp, true);

    std::vector<int> rows;
    auto* t1 = app.add_subcommand("table1", "run the benchmark configurations");
    add_common(t1, false);
    t1->add_option("--rows", rows, "subset of rows to run (default all)");

    auto* eh = app.add_subcommand("early-horizon", "tilted drift with truncated backward solve");
    add_common(eh, true);

    try {
        app.parse(argc, argv);
        if (sim->parsed()) return cmd_simulate(args, dump_paths);
        if (solve->parsed()) return cmd_solve(args);
        if (ref->parsed()) return cmd_reference(args, ref_sigma, ref_T, ref_x, ref_eps, psi_csv);
        if (est->parsed()) return cmd_estimate(args, dump_weights);
        if (exp->parsed()) return cmd_experiment(args);
        if (t1->parsed()) return cmd_table1(args, rows);
        if (eh->parsed()) return cmd_early_horizon(args);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
