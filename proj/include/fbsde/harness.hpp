#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "fbsde/basis.hpp"
#include "fbsde/control.hpp"
#include "fbsde/lsmc.hpp"
#include "fbsde/model.hpp"
#include "fbsde/parallel.hpp"
#include "fbsde/pde.hpp"
#include "fbsde/simulate.hpp"

namespace fbsde {

using json = nlohmann::json;

/// One full experiment definition for the double-well exit problem:
/// problem parameters, solver parameters, optional drift change and
/// importance-sampling stage.
struct ExperimentConfig {
    // problem
    double sigma = 1.0;
    double epsilon = 0.01;
    double horizon = 1.0;  // T
    double x0 = -1.0;

    // solver
    int basis_size = 5;     // K, adaptive centres
    int n_paths = 300;      // M
    double dt = 1e-3;
    double basis_width = 0.1;  // delta
    ZScheme z_scheme = ZScheme::GradientAnsatz;
    StoppingMode stopping_mode = StoppingMode::FreezeAll;
    std::uint64_t seed = 1;
    int repetitions = 1;  // R
    double clip = 1e3;
    double ridge = 0.0;
    double rank_tolerance = 1e-8;
    bool tame_driver = true;
    double boundary_pin_time = -1.0;  // auto

    // optional constant drift tilt b0 = b + tilt (push toward the boundary)
    std::optional<double> drift_tilt;

    // reference PDE solve
    bool run_reference = true;
    PdeGrid pde_grid;

    // importance-sampling stage, fitted on the first repetition
    bool run_importance = false;
    int importance_paths = 0;  // 0 = same as n_paths

    int workers = 1;

    void validate() const {
        auto fail = [](const std::string& field, const std::string& why) {
            throw std::invalid_argument(field + ": " + why);
        };
        if (!(sigma > 0.0)) fail("problem.sigma", "must be positive");
        if (!(epsilon > 0.0 && epsilon < 1.0)) fail("problem.epsilon", "must be in (0, 1)");
        if (!(horizon > 0.0)) fail("problem.T", "must be positive");
        if (!(x0 < 0.0)) fail("problem.x0", "must lie in the left well (x < 0)");
        if (basis_size < 1) fail("solver.K", "must be >= 1");
        if (n_paths < 1) fail("solver.M", "must be >= 1");
        if (!(dt > 0.0)) fail("solver.dt", "must be positive");
        if (dt > horizon) fail("solver.dt", "must not exceed the horizon");
        if (!(basis_width > 0.0)) fail("solver.delta", "must be positive");
        if (repetitions < 1) fail("solver.repetitions", "must be >= 1");
        if (!(clip > 0.0)) fail("solver.clip", "must be positive");
        if (ridge < 0.0) fail("solver.ridge", "must be >= 0");
        if (!(rank_tolerance > 0.0)) fail("solver.rank_tolerance", "must be positive");
        if (importance_paths < 0) fail("importance_sampling.M", "must be >= 0");
        if (workers < 1) fail("workers", "must be >= 1");
        pde_grid.validate();
    }

    ProblemSpec problem() const { return make_double_well(sigma, epsilon, horizon); }

    DriftFn tilted_drift() const {
        const double c = drift_tilt.value_or(0.0);
        return [c](std::span<const double> x, double, std::span<double> out) {
            out[0] = DoubleWell::drift(x[0]) + c;
        };
    }

    LsmcConfig lsmc() const {
        LsmcConfig cfg;
        cfg.z_scheme = z_scheme;
        cfg.stopping_mode = stopping_mode;
        cfg.rank_tolerance = rank_tolerance;
        cfg.ridge = ridge;
        cfg.tame_driver = tame_driver;
        cfg.boundary_pin_time = boundary_pin_time;
        return cfg;
    }
};

struct RepetitionRecord {
    int index = 0;
    std::uint64_t seed = 0;
    bool failed = false;
    std::string error;
    double gamma = 0.0;
    int max_rank = 0;
    int min_active = 0;
    bool rank_deficient = false;
};

struct ExperimentResult {
    std::vector<RepetitionRecord> repetitions;
    std::vector<double> gamma_samples;  // successful repetitions only
    double mean = 0.0;        // V bar
    double variance = 0.0;    // unbiased S^2
    std::optional<double> v_ref;
    std::optional<double> exit_probability_ref;
    std::optional<ISReport> importance;
    int max_rank = 0;
    int min_active = 0;
    int recommended_basis_size = 0;
    bool any_rank_deficient = false;
    std::optional<double> effective_horizon;  // T tilde, early-horizon runs
    std::size_t failed_repetitions = 0;
};

/// Largest observed exit time over the batch.
inline double effective_horizon(const TrajectoryBatch& batch) {
    int worst = -1;
    for (std::size_t m = 0; m < batch.n_paths; ++m)
        if (batch.exited(m)) worst = std::max(worst, batch.exit_step[m]);
    if (worst < 0)
        throw std::runtime_error(
            "effective_horizon: no trajectory exited; early-horizon mode is inapplicable");
    return batch.grid.time(worst);
}

namespace detail {

struct RepOutcome {
    RepetitionRecord record;
    double gamma = 0.0;
    // kept from the first repetition for the importance-sampling stage
    std::optional<BasisSet> basis;
    std::optional<CoefficientSchedule> coeffs;
    std::optional<double> t_eff;
};

inline void aggregate(const std::vector<RepOutcome>& outcomes, const ExperimentConfig& config,
                      ExperimentResult& result) {
    for (const auto& o : outcomes) {
        result.repetitions.push_back(o.record);
        if (o.record.failed) {
            ++result.failed_repetitions;
            continue;
        }
        result.gamma_samples.push_back(o.gamma);
        result.max_rank = std::max(result.max_rank, o.record.max_rank);
        result.min_active = result.gamma_samples.size() == 1
                                ? o.record.min_active
                                : std::min(result.min_active, o.record.min_active);
        result.any_rank_deficient = result.any_rank_deficient || o.record.rank_deficient;
        if (o.t_eff) {
            result.effective_horizon = result.effective_horizon
                                           ? std::max(*result.effective_horizon, *o.t_eff)
                                           : *o.t_eff;
        }
    }
    if (result.failed_repetitions * 2 > static_cast<std::size_t>(config.repetitions))
        throw std::runtime_error("run_experiment: more than half of the repetitions failed");
    const auto& g = result.gamma_samples;
    double s = 0.0;
    for (double v : g) s += v;
    result.mean = s / g.size();
    double ss = 0.0;
    for (double v : g) ss += (v - result.mean) * (v - result.mean);
    result.variance = g.size() > 1 ? ss / (g.size() - 1) : 0.0;
    result.recommended_basis_size = result.max_rank;
}

}  // namespace detail

/// R repetitions of simulate -> backward solve with derived seeds, aggregated
/// into empirical mean and unbiased variance; optional PDE reference and a
/// post-fit importance-sampling stage using the first repetition's value
/// function.
inline ExperimentResult run_experiment(const ExperimentConfig& config) {
    config.validate();
    const ProblemSpec spec = config.problem();
    const TimeGrid grid = TimeGrid::from_horizon(config.horizon, config.dt);
    const double x0v[1] = {config.x0};
    const std::span<const double> x0(x0v, 1);
    const bool tilted = config.drift_tilt.has_value();

    ProblemSpec sim_spec = spec;
    if (tilted) sim_spec.drift = config.tilted_drift();

    std::vector<detail::RepOutcome> outcomes(config.repetitions);
    parallel_for(config.repetitions, config.workers, [&](std::size_t r) {
        auto& out = outcomes[r];
        out.record.index = static_cast<int>(r);
        out.record.seed = config.seed + r;
        try {
            auto basis = make_adaptive_basis(sim_spec, grid, x0, config.basis_size,
                                             config.basis_width, out.record.seed);
            const bool freeze = config.stopping_mode == StoppingMode::FreezeAll;
            auto batch = simulate_forward(sim_spec, grid, x0, config.n_paths, out.record.seed,
                                          freeze);
            const Driver driver = tilted ? drift_changed_driver(spec, config.tilted_drift())
                                         : free_energy_driver(spec);
            auto sol = backward_solve(batch, basis, driver, spec, config.lsmc());
            out.gamma = sol.gamma_estimate;
            out.record.gamma = sol.gamma_estimate;
            out.record.max_rank = sol.max_rank;
            out.record.min_active = sol.min_active;
            out.record.rank_deficient = sol.any_rank_deficient;
            if (r == 0) {
                out.basis = std::move(basis);
                out.coeffs = std::move(sol.coeffs);
            }
        } catch (const std::exception& e) {
            out.record.failed = true;
            out.record.error = e.what();
        }
    });

    ExperimentResult result;
    detail::aggregate(outcomes, config, result);

    if (config.run_reference) {
        result.v_ref = reference_value(spec, config.pde_grid, config.x0, config.epsilon);
        result.exit_probability_ref =
            exit_probability_from_value(*result.v_ref, config.epsilon).value;
    }

    if (config.run_importance) {
        if (!outcomes[0].basis)
            throw std::runtime_error("run_experiment: importance stage needs repetition 0");
        auto policy = make_policy(*outcomes[0].basis, *outcomes[0].coeffs, spec, config.clip);
        const std::size_t m_is = config.importance_paths > 0
                                     ? static_cast<std::size_t>(config.importance_paths)
                                     : static_cast<std::size_t>(config.n_paths);
        result.importance =
            importance_sample(spec, grid, x0, m_is, derive_seed(config.seed, stream_tag::importance),
                              policy, {.workers = config.workers});
    }
    return result;
}

/// The large-horizon workflow: simulate under the tilted drift b0, truncate
/// the grid at the observed effective horizon, and run the per-trajectory
/// backward solve with the drift-changed driver.
inline ExperimentResult run_early_horizon(const ExperimentConfig& config) {
    config.validate();
    if (!config.drift_tilt)
        throw std::invalid_argument("run_early_horizon: drift_change must be configured");

    const ProblemSpec spec = config.problem();
    const TimeGrid grid = TimeGrid::from_horizon(config.horizon, config.dt);
    const double x0v[1] = {config.x0};
    const std::span<const double> x0(x0v, 1);

    ProblemSpec sim_spec = spec;
    sim_spec.drift = config.tilted_drift();

    std::vector<detail::RepOutcome> outcomes(config.repetitions);
    parallel_for(config.repetitions, config.workers, [&](std::size_t r) {
        auto& out = outcomes[r];
        out.record.index = static_cast<int>(r);
        out.record.seed = config.seed + r;
        try {
            auto batch = simulate_forward(sim_spec, grid, x0, config.n_paths, out.record.seed,
                                          /*freeze=*/false);
            const double t_eff = effective_horizon(batch);
            const int n_eff = std::max(2, static_cast<int>(std::lround(t_eff / config.dt)));
            auto truncated = batch.truncated(std::min(n_eff, grid.n_steps));
            out.t_eff = t_eff;

            auto basis = make_adaptive_basis(sim_spec, truncated.grid, x0, config.basis_size,
                                             config.basis_width, out.record.seed);
            auto cfg = config.lsmc();
            cfg.stopping_mode = StoppingMode::PerTrajectory;
            auto sol = backward_solve(truncated, basis, drift_changed_driver(spec, config.tilted_drift()),
                                      spec, cfg);
            out.gamma = sol.gamma_estimate;
            out.record.gamma = sol.gamma_estimate;
            out.record.max_rank = sol.max_rank;
            out.record.min_active = sol.min_active;
            out.record.rank_deficient = sol.any_rank_deficient;
        } catch (const std::exception& e) {
            out.record.failed = true;
            out.record.error = e.what();
        }
    });

    ExperimentResult result;
    detail::aggregate(outcomes, config, result);

    if (config.run_reference) {
        result.v_ref = reference_value(spec, config.pde_grid, config.x0, config.epsilon);
        result.exit_probability_ref =
            exit_probability_from_value(*result.v_ref, config.epsilon).value;
    }
    return result;
}

// ---------------------------------------------------------------------------
// JSON configuration and result serialisation
// ---------------------------------------------------------------------------

inline std::string to_string(ZScheme s) {
    return s == ZScheme::GradientAnsatz ? "gradient-ansatz" : "martingale-increment";
}
inline std::string to_string(StoppingMode m) {
    return m == StoppingMode::FreezeAll ? "freeze-all" : "per-trajectory";
}

inline ZScheme z_scheme_from_string(const std::string& s) {
    if (s == "gradient-ansatz") return ZScheme::GradientAnsatz;
    if (s == "martingale-increment") return ZScheme::MartingaleIncrement;
    throw std::invalid_argument("solver.z_scheme: unknown value '" + s + "'");
}
inline StoppingMode stopping_mode_from_string(const std::string& s) {
    if (s == "freeze-all") return StoppingMode::FreezeAll;
    if (s == "per-trajectory") return StoppingMode::PerTrajectory;
    throw std::invalid_argument("solver.stopping_mode: unknown value '" + s + "'");
}

namespace detail {

template <class T>
T get_field(const json& j, const std::string& section, const std::string& key, T fallback) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const json::exception&) {
        throw std::invalid_argument(section + "." + key + ": wrong type");
    }
}

}  // namespace detail

inline ExperimentConfig config_from_json(const json& j) {
    ExperimentConfig c;
    if (j.contains("problem")) {
        const auto& p = j.at("problem");
        c.sigma = detail::get_field(p, "problem", "sigma", c.sigma);
        c.epsilon = detail::get_field(p, "problem", "epsilon", c.epsilon);
        c.horizon = detail::get_field(p, "problem", "T", c.horizon);
        c.x0 = detail::get_field(p, "problem", "x0", c.x0);
    }
    if (j.contains("solver")) {
        const auto& s = j.at("solver");
        c.basis_size = detail::get_field(s, "solver", "K", c.basis_size);
        c.n_paths = detail::get_field(s, "solver", "M", c.n_paths);
        c.dt = detail::get_field(s, "solver", "dt", c.dt);
        c.basis_width = detail::get_field(s, "solver", "delta", c.basis_width);
        c.seed = detail::get_field<std::uint64_t>(s, "solver", "seed", c.seed);
        c.repetitions = detail::get_field(s, "solver", "repetitions", c.repetitions);
        c.clip = detail::get_field(s, "solver", "clip", c.clip);
        c.ridge = detail::get_field(s, "solver", "ridge", c.ridge);
        c.rank_tolerance = detail::get_field(s, "solver", "rank_tolerance", c.rank_tolerance);
        c.tame_driver = detail::get_field(s, "solver", "tame_driver", c.tame_driver);
        c.boundary_pin_time =
            detail::get_field(s, "solver", "boundary_pin_time", c.boundary_pin_time);
        if (s.contains("z_scheme"))
            c.z_scheme = z_scheme_from_string(s.at("z_scheme").get<std::string>());
        if (s.contains("stopping_mode"))
            c.stopping_mode = stopping_mode_from_string(s.at("stopping_mode").get<std::string>());
    }
    if (j.contains("drift_change")) {
        c.drift_tilt = detail::get_field(j.at("drift_change"), "drift_change", "tilt", 0.0);
    }
    if (j.contains("reference")) {
        const auto& r = j.at("reference");
        c.run_reference = detail::get_field(r, "reference", "enabled", c.run_reference);
        c.pde_grid.x_min = detail::get_field(r, "reference", "x_min", c.pde_grid.x_min);
        c.pde_grid.n_x = detail::get_field(r, "reference", "n_x", c.pde_grid.n_x);
        c.pde_grid.dt = detail::get_field(r, "reference", "dt", c.pde_grid.dt);
    }
    if (j.contains("importance_sampling")) {
        const auto& is = j.at("importance_sampling");
        c.run_importance = detail::get_field(is, "importance_sampling", "enabled", false);
        c.importance_paths = detail::get_field(is, "importance_sampling", "M", 0);
    }
    c.validate();
    return c;
}

inline json config_to_json(const ExperimentConfig& c) {
    json j;
    j["problem"] = {{"sigma", c.sigma}, {"epsilon", c.epsilon}, {"T", c.horizon}, {"x0", c.x0}};
    j["solver"] = {{"K", c.basis_size},
                   {"M", c.n_paths},
                   {"dt", c.dt},
                   {"delta", c.basis_width},
                   {"z_scheme", to_string(c.z_scheme)},
                   {"stopping_mode", to_string(c.stopping_mode)},
                   {"seed", c.seed},
                   {"repetitions", c.repetitions},
                   {"clip", c.clip},
                   {"ridge", c.ridge},
                   {"rank_tolerance", c.rank_tolerance},
                   {"tame_driver", c.tame_driver},
                   {"boundary_pin_time", c.boundary_pin_time}};
    if (c.drift_tilt) j["drift_change"] = {{"tilt", *c.drift_tilt}};
    j["reference"] = {{"enabled", c.run_reference},
                      {"x_min", c.pde_grid.x_min},
                      {"n_x", c.pde_grid.n_x},
                      {"dt", c.pde_grid.dt}};
    if (c.run_importance)
        j["importance_sampling"] = {{"enabled", true}, {"M", c.importance_paths}};
    return j;
}

inline json is_report_to_json(const ISReport& r) {
    return json{{"estimate", r.estimate},
                {"free_energy", r.free_energy},
                {"sample_variance", r.sample_variance},
                {"vanilla_estimate", r.vanilla_estimate},
                {"vanilla_free_energy", r.vanilla_free_energy},
                {"vanilla_variance", r.vanilla_variance},
                {"variance_reduction_factor", r.variance_reduction_factor},
                {"ess", r.ess},
                {"clipped_fraction", r.clipped_fraction},
                {"max_log_weight", r.max_log_weight},
                {"min_log_weight", r.min_log_weight},
                {"paths", r.n_paths}};
}

inline json result_to_json(const ExperimentResult& r) {
    json reps = json::array();
    for (const auto& rec : r.repetitions) {
        json e{{"index", rec.index}, {"seed", rec.seed}, {"failed", rec.failed}};
        if (rec.failed)
            e["error"] = rec.error;
        else
            e["gamma"] = rec.gamma;
        reps.push_back(e);
    }
    json j;
    j["gamma"] = {{"per_repetition", r.gamma_samples},
                  {"mean", r.mean},
                  {"variance", r.variance}};
    j["repetitions"] = reps;
    j["diagnostics"] = {{"max_rank", r.max_rank},
                        {"min_active", r.min_active},
                        {"recommended_K", r.recommended_basis_size},
                        {"rank_deficient", r.any_rank_deficient},
                        {"failed_repetitions", r.failed_repetitions}};
    if (r.v_ref) {
        j["reference"] = {{"V_ref", *r.v_ref}, {"exit_probability", *r.exit_probability_ref}};
    }
    if (r.importance) j["importance_sampling"] = is_report_to_json(*r.importance);
    if (r.effective_horizon) j["effective_horizon"] = *r.effective_horizon;
    return j;
}

}  // namespace fbsde
