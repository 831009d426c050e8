#pragma once

// Plant-in-the-loop simulation. The plant is the LM model driven by actuator
// openings: each opening is turned into a flow by the conversion functions at
// the realised network conditions, optionally perturbed, and then applied.

#include "uds/actuation.hpp"
#include "uds/control.hpp"
#include "uds/datafit.hpp"
#include "uds/lm_model.hpp"
#include "uds/scenario.hpp"

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace uds::loop {

enum class ControllerKind { mpc, rbc, fixed };

inline const char* controller_name(ControllerKind k) {
    switch (k) {
        case ControllerKind::mpc: return "mpc";
        case ControllerKind::rbc: return "rbc";
        case ControllerKind::fixed: return "fixed";
    }
    return "";
}

inline ControllerKind controller_from_name(const std::string& s) {
    if (s == "mpc") return ControllerKind::mpc;
    if (s == "rbc") return ControllerKind::rbc;
    if (s == "fixed") return ControllerKind::fixed;
    throw UsageError("unknown controller '" + s + "' (expected mpc, rbc or fixed)");
}

/// Plant/model mismatch: each converted flow is scaled by (1 + u), u uniform
/// in [-perturbation, perturbation], drawn from a generator seeded per run.
struct PlantConfig {
    double perturbation = 0.0;
    std::uint64_t seed = 1;

    friend bool operator==(const PlantConfig&, const PlantConfig&) = default;
};

struct InitialConfig {
    LmState state{};
    ctl::OpeningPair openings{100.0, 0.0};  ///< applied at the first step

    friend bool operator==(const InitialConfig&, const InitialConfig&) = default;
};

struct LoopConfig {
    LmParams model;
    act::ActuationTables tables = act::default_tables();
    ctl::OcpConfig ocp;
    ctl::RbcRuleSet rbc = ctl::RbcRuleSet::defaults();
    ctl::OpeningPair fixed{100.0, 0.0};
    PlantConfig plant;
    InitialConfig initial;

    void validate() const {
        model.validate();
        tables.validate();
        ocp.validate();
        rbc.validate(tables.grid);
        for (double o : {fixed.bypass, fixed.empty, initial.openings.bypass, initial.openings.empty}) {
            if (!(o >= 0.0 && o <= 100.0)) throw SchemaError("openings must lie in [0, 100]");
        }
        if (!(plant.perturbation >= 0.0 && plant.perturbation < 1.0)) {
            throw SchemaError("plant.perturbation must lie in [0, 1)");
        }
        const auto& s = initial.state;
        if (!(s.v_abro >= 0.0 && s.v_abro <= model.v_abro_max)) throw SchemaError("initial.v_abro outside [0, v_max]");
        if (!std::isfinite(s.l7_prev)) throw SchemaError("initial.l7_prev must be finite");
        if (!(s.u_prev.g_outA >= 0.0) || !(s.u_prev.g_emptA >= 0.0)) {
            throw SchemaError("initial.u_prev flows must be >= 0");
        }
    }
};

struct StepLog {
    double time_s = 0.0;
    LmInputs inputs;
    LmOutputs outputs;
    MassCorrections corrections;
    ClampRecord clamps;
    ctl::OpeningPair openings;  ///< setpoints applied at this step
};

/// Cumulative volumes in 10³ m³.
struct KpiReport {
    double cso4 = 0.0;
    double cso5 = 0.0;
    double cso_sur = 0.0;
    double wwtp_sur = 0.0;
    double la_gavia = 0.0;

    double total_cso() const { return cso4 + cso5 + cso_sur; }

    friend bool operator==(const KpiReport&, const KpiReport&) = default;
};

inline KpiReport kpi_from_log(const std::vector<StepLog>& log, double dt) {
    double s4 = 0, s5 = 0, ssur = 0, swwtp = 0, slg = 0;
    for (const auto& l : log) {
        s4 += l.outputs.q_cso4;
        s5 += l.outputs.q_cso5;
        ssur += l.outputs.q_cso_sur;
        swwtp += l.outputs.q_wwtp_sur;
        slg += l.outputs.q_la_gavia;
    }
    return {dt * s4 / 1000.0, dt * s5 / 1000.0, dt * ssur / 1000.0, dt * swwtp / 1000.0, dt * slg / 1000.0};
}

/// Predicted flow at k = t+1 against the flow the plant realised there.
struct ConversionSample {
    std::size_t step = 0;  ///< plant step the prediction refers to
    double opening_bypass = 0.0;
    double opening_empty = 0.0;
    Flow predicted_g_outA = 0.0;
    Flow realized_g_outA = 0.0;
    Flow predicted_g_emptA = 0.0;
    Flow realized_g_emptA = 0.0;
    bool saturated = false;
};

struct ConversionDiagnostics {
    std::vector<ConversionSample> samples;
    std::optional<double> r2_g_outA;
    std::optional<double> r2_g_emptA;
    std::optional<double> rmse_g_outA;
    std::optional<double> rmse_g_emptA;
};

inline void summarize(ConversionDiagnostics& d) {
    if (d.samples.empty()) return;
    std::vector<double> pa, ra, pe, re;
    for (const auto& s : d.samples) {
        pa.push_back(s.predicted_g_outA);
        ra.push_back(s.realized_g_outA);
        pe.push_back(s.predicted_g_emptA);
        re.push_back(s.realized_g_emptA);
    }
    const auto ma = fit::metrics(ra, pa);
    const auto me = fit::metrics(re, pe);
    d.r2_g_outA = ma.r2;
    d.r2_g_emptA = me.r2;
    d.rmse_g_outA = ma.rmse;
    d.rmse_g_emptA = me.rmse;
}

struct SolverStats {
    long long evaluations = 0;
    int solves = 0;
    int budget_exhausted = 0;
    int saturated_decisions = 0;
};

struct RunResult {
    std::string scenario;
    ControllerKind controller = ControllerKind::mpc;
    double dt = 300.0;
    LmState initial_state;
    LmState final_state;
    std::vector<StepLog> log;
    KpiReport kpi;
    ConversionDiagnostics conversion;
    SolverStats solver;
    std::vector<ctl::SolveResult> solves;  ///< kept only when tracing
};

/// Volume accounting over a run, m³. The residual should vanish up to rounding.
struct MassClosure {
    double inflow = 0.0;
    double storage_change = 0.0;
    double treated = 0.0;
    double overflow = 0.0;
    double corrections = 0.0;

    double residual() const { return inflow - (storage_change + treated + overflow + corrections); }
    double relative_residual() const { return std::abs(residual()) / std::max(1.0, std::abs(inflow)); }
};

inline MassClosure mass_closure(const RunResult& r) {
    MassClosure m;
    for (const auto& l : r.log) {
        const auto& i = l.inputs;
        const auto& o = l.outputs;
        m.inflow += r.dt * (i.q_in4 + i.q_in5 + i.q_in6 + i.q_md_mi);
        m.treated += r.dt * (o.q_wwtp_sur + o.q_la_gavia);
        m.overflow += r.dt * (o.q_cso4 + o.q_cso5 + o.q_cso_sur);
        m.corrections += r.dt * l.corrections.net();
    }
    m.storage_change = r.final_state.v_abro - r.initial_state.v_abro;
    return m;
}

namespace detail {

class Plant {
public:
    Plant(const LoopConfig& cfg) : cfg_(cfg), rng_(cfg.plant.seed) {}

    /// Flows the plant realises for the openings at the current conditions,
    /// before the model's own feasibility clamp.
    ControlPair convert(const LmState& s, const LmInputs& in, const ctl::OpeningPair& op) {
        const auto& p = cfg_.model;
        act::ConversionContext ctx{in.q_in5, s.v_abro / p.tank_area(), 0.0, in.q_in4};
        Flow g_out = perturb(act::conversion_at(act::Family::fill, op.bypass, ctx, cfg_.tables));
        g_out = std::clamp(g_out, std::max(0.0, in.q_in5 - p.tank_inflow_max), in.q_in5);
        ctx.g_outA = g_out;
        const Flow g_empt = perturb(act::conversion_at(act::Family::empty, op.empty, ctx, cfg_.tables));
        return {g_out, g_empt};
    }

private:
    double perturb(double q) {
        if (cfg_.plant.perturbation == 0.0) return q;
        const double u = static_cast<double>(rng_() >> 11) * 0x1.0p-53;
        return q * (1.0 + cfg_.plant.perturbation * (2.0 * u - 1.0));
    }

    const LoopConfig& cfg_;
    std::mt19937_64 rng_;
};

}  // namespace detail

/// Runs the scenario with the chosen controller. Setpoints decided at step t
/// are applied at t+1; the first step uses the configured initial openings.
inline RunResult run_closed_loop(const Scenario& scenario, ControllerKind kind, const LoopConfig& cfg,
                                 bool keep_solves = false) {
    scenario.validate();
    cfg.validate();
    if (kind == ControllerKind::mpc && scenario.dt != cfg.ocp.dt) {
        throw SchemaError("scenario dt " + std::to_string(scenario.dt) + " s differs from ocp.dt " +
                          std::to_string(cfg.ocp.dt) + " s");
    }
    const StepInterval dt(scenario.dt);
    const auto& p = cfg.model;

    RunResult run;
    run.scenario = scenario.name;
    run.controller = kind;
    run.dt = scenario.dt;
    run.initial_state = cfg.initial.state;
    run.log.reserve(scenario.steps());

    detail::Plant plant(cfg);
    LmState state = cfg.initial.state;
    ctl::OpeningPair openings = kind == ControllerKind::fixed ? cfg.fixed : cfg.initial.openings;
    ctl::ControlPlan warm;
    std::optional<ConversionSample> pending;

    for (std::size_t t = 0; t < scenario.steps(); ++t) {
        const LmInputs& in = scenario.inflows[t];
        const ControlPair requested = plant.convert(state, in, openings);
        const LmStepResult step = lm_step(state, in, requested, dt, p);
        const ControlPair applied{step.outputs.g_outA, step.outputs.g_emptA};

        StepLog entry;
        entry.time_s = static_cast<double>(t) * scenario.dt;
        entry.inputs = in;
        entry.outputs = step.outputs;
        entry.corrections = step.corrections;
        entry.clamps = step.clamps;
        entry.openings = openings;
        run.log.push_back(entry);

        if (pending) {
            pending->realized_g_outA = applied.g_outA;
            pending->realized_g_emptA = applied.g_emptA;
            run.conversion.samples.push_back(*pending);
            pending.reset();
        }

        switch (kind) {
            case ControllerKind::fixed: break;
            case ControllerKind::rbc: {
                const ctl::RbcObservation obs{in, step.state, step.outputs};
                openings = ctl::rbc_step(obs, cfg.rbc, cfg.tables, p);
                break;
            }
            case ControllerKind::mpc: {
                if (t + 1 == scenario.steps()) break;
                const auto window = ctl::forecast_window(scenario.inflows, t,
                                                         static_cast<std::size_t>(cfg.ocp.horizon) + 1,
                                                         cfg.ocp.forecast);
                auto rhc = ctl::receding_horizon_controller(state, window, warm, applied, cfg.ocp, p, cfg.tables);
                openings = {rhc.bypass.opening, rhc.empty.opening};
                warm = std::move(rhc.next_warm_start);
                ++run.solver.solves;
                run.solver.evaluations += rhc.solve.evaluations;
                if (rhc.solve.budget_exhausted) ++run.solver.budget_exhausted;
                const bool sat = rhc.bypass.saturated || rhc.empty.saturated;
                if (sat) ++run.solver.saturated_decisions;
                ConversionSample s;
                s.step = t + 1;
                s.opening_bypass = openings.bypass;
                s.opening_empty = openings.empty;
                s.predicted_g_outA = rhc.planned.g_outA;
                s.predicted_g_emptA = rhc.planned.g_emptA;
                s.saturated = sat;
                pending = s;
                if (keep_solves) run.solves.push_back(std::move(rhc.solve));
                break;
            }
        }
        state = step.state;
    }

    run.final_state = state;
    run.kpi = kpi_from_log(run.log, scenario.dt);
    summarize(run.conversion);
    return run;
}

/// Percentage change from the baseline, (candidate − baseline)/baseline·100.
/// Zero over zero counts as no change; a nonzero change from zero is infinite.
inline double percent_delta(double baseline, double candidate) {
    if (baseline == 0.0) {
        if (candidate == 0.0) return 0.0;
        return candidate > 0.0 ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity();
    }
    return (candidate - baseline) / baseline * 100.0;
}

struct ComparisonRow {
    std::string label;
    double baseline = 0.0;
    double candidate = 0.0;
    double delta_percent = 0.0;
};

struct Comparison {
    std::string scenario;
    RainMetadata metadata;
    std::string baseline_name = "RBC";
    std::string candidate_name = "MPC";
    std::vector<ComparisonRow> rows;
};

inline Comparison compare_kpis(const KpiReport& baseline, const KpiReport& candidate) {
    Comparison c;
    auto row = [&](const char* label, double b, double m) { c.rows.push_back({label, b, m, percent_delta(b, m)}); };
    row("Q_CSO4", baseline.cso4, candidate.cso4);
    row("Q_CSO5", baseline.cso5, candidate.cso5);
    row("Q_CSOSur", baseline.cso_sur, candidate.cso_sur);
    row("Q_WWTPSur", baseline.wwtp_sur, candidate.wwtp_sur);
    row("Q_LaGavia", baseline.la_gavia, candidate.la_gavia);
    row("Total CSO", baseline.total_cso(), candidate.total_cso());
    return c;
}

struct ComparisonRun {
    RunResult rbc;
    RunResult mpc;
    Comparison table;
};

inline ComparisonRun compare_controllers(const Scenario& scenario, const LoopConfig& cfg) {
    ComparisonRun out;
    out.rbc = run_closed_loop(scenario, ControllerKind::rbc, cfg);
    out.mpc = run_closed_loop(scenario, ControllerKind::mpc, cfg);
    out.table = compare_kpis(out.rbc.kpi, out.mpc.kpi);
    out.table.scenario = scenario.name;
    out.table.metadata = scenario.metadata;
    return out;
}

}  // namespace uds::loop
