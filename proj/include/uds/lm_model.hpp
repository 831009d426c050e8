#pragma once

// Discrete-time simplified model of the Madrid left-margin (LM) interceptor:
// Abroñigales tank with its bypass, the La Gavia WWTP area with pump P7, and
// the Sur WWTP junction with the right-margin inflow.
//
// The pump loop (P7 -> La Gavia -> outfall -> CSO5 -> L7 -> P7) is broken
// with a one-step delay on the virtual level L7.

#include "uds/errors.hpp"
#include "uds/hydraulics.hpp"

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

namespace uds {

/// a·x² + b·x + c
struct QuadraticCoeffs {
    double quadratic = 0.0;
    double linear = 0.0;
    double constant = 0.0;

    double operator()(double x) const { return quadratic * x * x + linear * x + constant; }
    friend bool operator==(const QuadraticCoeffs&, const QuadraticCoeffs&) = default;
};

/// Regression on the two flows entering node N12 (Q_1216 and Q_mi), no cross term.
struct N12Coeffs {
    double q1216_sq = 0.0;
    double q_mi_sq = 0.0;
    double q1216 = 0.0;
    double q_mi = 0.0;

    double operator()(double q_1216, double q_mi_value) const {
        return q1216_sq * q_1216 * q_1216 + q_mi_sq * q_mi_value * q_mi_value + q1216 * q_1216 +
               q_mi * q_mi_value;
    }
    friend bool operator==(const N12Coeffs&, const N12Coeffs&) = default;
};

/// Virtual level of N12 as a linear map of its flows.
struct LevelCoeffs {
    double q_mi2 = 0.0;
    double q_cso5 = 0.0;
    double q1216 = 0.0;
    double q_mi = 0.0;
    double constant = 0.0;
    friend bool operator==(const LevelCoeffs&, const LevelCoeffs&) = default;
};

/// Pump level-to-flow curve: amplitude / (offset + exp(slope·L + intercept)) + floor.
struct LogisticCoeffs {
    double amplitude = 0.0;
    double offset = 0.0;
    double slope = 0.0;
    double intercept = 0.0;
    double floor = 0.0;

    double operator()(double level) const {
        return amplitude / (offset + std::exp(slope * level + intercept)) + floor;
    }
    friend bool operator==(const LogisticCoeffs&, const LogisticCoeffs&) = default;
};

struct LmParams {
    double v_abro_max = 2e5;           ///< m³
    double tank_depth_max = 10.0;      ///< m, constant cross-section
    Flow tank_inflow_max = 40.0;       ///< m³/s
    Flow tank_outflow_max = 2.5;       ///< m³/s
    Flow la_gavia_cap = 1.5;
    Flow la_gavia_biol_cap = 1.25;
    Flow sur_cap = 6.0;

    QuadraticCoeffs q1216{0.003, 0.921, -0.538};
    N12Coeffs q_mi2{-0.003, -0.041, 0.167, 0.874};
    N12Coeffs q_cso5_1{0.006, 0.042, 0.707, 0.155};
    LevelCoeffs l7{-0.254, -0.6, 0.583, 0.77, 0.868};
    LogisticCoeffs p7{0.455, 0.883, -65.998, 77.339, 0.132};

    double tank_area() const { return v_abro_max / tank_depth_max; }

    TankParams tank() const { return {v_abro_max, tank_inflow_max, tank_outflow_max}; }

    void validate() const {
        const double caps[] = {v_abro_max, tank_depth_max, tank_inflow_max, tank_outflow_max,
                               la_gavia_cap, la_gavia_biol_cap, sur_cap};
        for (double c : caps) {
            if (!(c > 0.0) || !std::isfinite(c)) throw DomainError("LM capacities must be positive and finite");
        }
    }

    friend bool operator==(const LmParams&, const LmParams&) = default;
};

/// Default L7 at all-zero flows (the constant of the level regression).
inline constexpr double kQuiescentLevel = 0.868;

struct ControlPair {
    Flow g_outA = 0.0;   ///< bypass around the tank
    Flow g_emptA = 0.0;  ///< tank emptying

    friend bool operator==(const ControlPair&, const ControlPair&) = default;
};

struct LmState {
    double v_abro = 0.0;              ///< m³
    double l7_prev = kQuiescentLevel; ///< L7 from the previous step
    ControlPair u_prev{};

    friend bool operator==(const LmState&, const LmState&) = default;
};

struct LmInputs {
    Flow q_in4 = 0.0;
    Flow q_in5 = 0.0;
    Flow q_in6 = 0.0;
    Flow q_md_mi = 0.0;  ///< boundary inflow from the right margin

    friend bool operator==(const LmInputs&, const LmInputs&) = default;
};

struct LmOutputs {
    Flow q_mi = 0.0;
    Flow g_outA = 0.0;   ///< bypass actually applied (after feasibility clamp)
    Flow g_inA = 0.0;
    Flow g_emptA = 0.0;  ///< emptying actually applied
    Flow q_cso4 = 0.0;
    Flow q_1216 = 0.0;
    Flow q_la_gavia = 0.0;
    Flow q_biol = 0.0;
    Flow q_sec = 0.0;
    Flow q_out_la_gavia = 0.0;
    Flow q_mi2 = 0.0;
    Flow q_cso5_1 = 0.0;
    Flow q_cso5 = 0.0;
    double l7 = 0.0;
    Flow p7 = 0.0;
    Flow q_mi3 = 0.0;
    Flow q_wwtp_sur = 0.0;
    Flow q_cso_sur = 0.0;
    double v_abro = 0.0;  ///< end-of-step tank volume, m³

    friend bool operator==(const LmOutputs&, const LmOutputs&) = default;
};

/// Every adjustment lm_step makes that is not plain mass conservation, in m³/s.
/// With inflow = q_in4 + q_in5 + q_in6 + q_md_mi,
///   treated = q_wwtp_sur + q_la_gavia,
///   overflow = q_cso4 + q_cso5 + q_cso_sur,
/// the step satisfies
///   inflow = Δv/dt + treated + overflow + net()
/// up to rounding.
struct MassCorrections {
    Flow tank_floor = 0.0;         ///< volume created by clamping the tank at 0, per dt
    Flow n16_diversion_clamp = 0.0;///< flow created by clamping (Q_in6 − Q_1216) at 0
    Flow pump_p7 = 0.0;            ///< P7 delivery to La Gavia, not withdrawn from N12
    Flow la_gavia_excess = 0.0;    ///< N16 inflow above the La Gavia limit, dropped
    Flow la_gavia_outfall = 0.0;   ///< La Gavia outfall counted as CSO without withdrawal
    Flow n12_imbalance = 0.0;      ///< (Q_mi + Q_1216) − (Q_mi2 + Q_CSO5.1)

    Flow net() const {
        return -tank_floor - n16_diversion_clamp - pump_p7 + la_gavia_excess - la_gavia_outfall +
               n12_imbalance;
    }
};

/// Clamps applied to the model's raw equation outputs and to the controls.
struct ClampRecord {
    Flow q1216_floor = 0.0;        ///< raised to 0
    Flow q_mi2_floor = 0.0;
    Flow q_cso5_1_floor = 0.0;
    Flow out_la_gavia_floor = 0.0;
    Flow g_outA_adjust = 0.0;      ///< applied − requested
    Flow g_emptA_adjust = 0.0;

    bool controls_clamped() const { return g_outA_adjust != 0.0 || g_emptA_adjust != 0.0; }
};

struct LmStepResult {
    LmState state;
    LmOutputs outputs;
    MassCorrections corrections;
    ClampRecord clamps;
};

inline double level_from_volume(double volume, const LmParams& params) {
    if (!(volume >= 0.0) || volume > params.v_abro_max) {
        throw DomainError("level_from_volume: volume outside [0, v_abro_max]");
    }
    return volume / params.tank_area();
}

/// Feasible box for the actuator flows at the given state and inflows.
struct ControlBox {
    ControlPair lo;
    ControlPair hi;
};

inline ControlBox feasible_controls(const LmState& state, const LmInputs& in, StepInterval dt,
                                    const LmParams& p) {
    ControlBox box;
    // bypass: G_inA = Q_in5 − G_outA must lie in [0, tank_inflow_max]
    box.lo.g_outA = std::max(0.0, in.q_in5 - p.tank_inflow_max);
    box.hi.g_outA = in.q_in5;
    box.lo.g_emptA = 0.0;
    box.hi.g_emptA = std::min(p.tank_outflow_max, state.v_abro / dt.seconds());
    return box;
}

namespace detail {

inline double finite_or_throw(double value, const char* equation) {
    if (!std::isfinite(value)) {
        throw ModelError(std::string("non-finite value in ") + equation);
    }
    return value;
}

inline void require_inputs(const LmInputs& in) {
    require_flow(in.q_in4, "q_in4");
    require_flow(in.q_in5, "q_in5");
    require_flow(in.q_in6, "q_in6");
    require_flow(in.q_md_mi, "q_md_mi");
}

}  // namespace detail

/// One step of the LM model. Controls outside their feasible box are clamped;
/// the adjustment is reported in the result's ClampRecord.
inline LmStepResult lm_step(const LmState& state, const LmInputs& in, const ControlPair& controls,
                            StepInterval dt, const LmParams& p) {
    detail::require_inputs(in);
    if (!std::isfinite(controls.g_outA) || !std::isfinite(controls.g_emptA)) {
        throw DomainError("lm_step: controls must be finite");
    }
    if (!(state.v_abro >= 0.0) || state.v_abro > p.v_abro_max) {
        throw DomainError("lm_step: v_abro outside [0, v_abro_max]");
    }
    if (!std::isfinite(state.l7_prev)) throw DomainError("lm_step: l7_prev must be finite");

    LmStepResult r;
    LmOutputs& o = r.outputs;
    MassCorrections& mc = r.corrections;
    ClampRecord& cl = r.clamps;

    const ControlBox box = feasible_controls(state, in, dt, p);
    const Flow g_outA = std::clamp(controls.g_outA, box.lo.g_outA, box.hi.g_outA);
    const Flow g_emptA = std::clamp(controls.g_emptA, box.lo.g_emptA, box.hi.g_emptA);
    cl.g_outA_adjust = g_outA - controls.g_outA;
    cl.g_emptA_adjust = g_emptA - controls.g_emptA;

    // pump P7 from the delayed level
    o.p7 = detail::finite_or_throw(p.p7(state.l7_prev), "pump P7 level-to-flow curve");

    // passive split of Q_in6
    const double q1216_raw = detail::finite_or_throw(p.q1216(in.q_in6), "Q_1216 regression");
    o.q_1216 = std::max(0.0, q1216_raw);
    cl.q1216_floor = o.q_1216 - q1216_raw;

    // La Gavia inflow at N16
    const double diversion_raw = in.q_in6 - o.q_1216;
    const double diversion = std::max(0.0, diversion_raw);
    mc.n16_diversion_clamp = diversion - diversion_raw;
    const double n16_inflow = o.p7 + diversion;
    o.q_la_gavia = std::min(p.la_gavia_cap, n16_inflow);
    mc.pump_p7 = o.p7;
    mc.la_gavia_excess = n16_inflow - o.q_la_gavia;

    o.q_biol = std::min(p.la_gavia_biol_cap, o.q_la_gavia);
    o.q_sec = o.q_la_gavia - o.q_biol;
    const double outfall_raw = o.q_sec - o.q_biol;
    o.q_out_la_gavia = std::max(0.0, outfall_raw);
    cl.out_la_gavia_floor = o.q_out_la_gavia - outfall_raw;
    mc.la_gavia_outfall = o.q_out_la_gavia;

    // tank diversion and N11
    o.g_outA = g_outA;
    o.g_emptA = g_emptA;
    o.g_inA = in.q_in5 - g_outA;
    o.q_mi = junction_balance({in.q_in4, g_emptA, g_outA});

    // N12 regressions
    const double q_mi2_raw = detail::finite_or_throw(p.q_mi2(o.q_1216, o.q_mi), "Q_mi2 regression");
    o.q_mi2 = std::max(0.0, q_mi2_raw);
    cl.q_mi2_floor = o.q_mi2 - q_mi2_raw;
    const double cso51_raw = detail::finite_or_throw(p.q_cso5_1(o.q_1216, o.q_mi), "Q_CSO5.1 regression");
    o.q_cso5_1 = std::max(0.0, cso51_raw);
    cl.q_cso5_1_floor = o.q_cso5_1 - cso51_raw;
    o.q_cso5 = o.q_cso5_1 + o.q_out_la_gavia;
    mc.n12_imbalance = (o.q_mi + o.q_1216) - (o.q_mi2 + o.q_cso5_1);

    // virtual level, used by the pump at the next step
    o.l7 = detail::finite_or_throw(p.l7.q_mi2 * o.q_mi2 + p.l7.q_cso5 * o.q_cso5 + p.l7.q1216 * o.q_1216 +
                                       p.l7.q_mi * o.q_mi + p.l7.constant,
                                   "N12 level regression");

    // Abroñigales tank
    const TankStepResult tank = tank_step(TankState{state.v_abro}, o.g_inA, g_emptA, dt, p.tank());
    o.q_cso4 = tank.cso;
    o.v_abro = tank.state.volume;
    mc.tank_floor = tank.deficit / dt.seconds();

    // Sur WWTP
    o.q_mi3 = junction_balance({o.q_mi2, in.q_md_mi});
    const SplitResult sur = capacity_split(o.q_mi3, p.sur_cap);
    o.q_wwtp_sur = sur.out;
    o.q_cso_sur = sur.cso;

    r.state.v_abro = tank.state.volume;
    r.state.l7_prev = o.l7;
    r.state.u_prev = ControlPair{g_outA, g_emptA};
    return r;
}

struct LmTrajectory {
    std::vector<LmOutputs> outputs;
    std::vector<MassCorrections> corrections;
    std::vector<ClampRecord> clamps;
    LmState final_state;
};

/// Batch driver over lm_step.
inline LmTrajectory lm_simulate(const LmState& initial, std::span<const LmInputs> inputs,
                                std::span<const ControlPair> controls, StepInterval dt, const LmParams& p) {
    if (inputs.size() != controls.size()) {
        throw UsageError("lm_simulate: inputs has " + std::to_string(inputs.size()) + " steps, controls has " +
                         std::to_string(controls.size()));
    }
    if (inputs.empty()) throw UsageError("lm_simulate: empty series");
    LmTrajectory traj;
    traj.outputs.reserve(inputs.size());
    traj.corrections.reserve(inputs.size());
    traj.clamps.reserve(inputs.size());
    LmState s = initial;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        LmStepResult r = lm_step(s, inputs[k], controls[k], dt, p);
        traj.outputs.push_back(r.outputs);
        traj.corrections.push_back(r.corrections);
        traj.clamps.push_back(r.clamps);
        s = r.state;
    }
    traj.final_state = s;
    return traj;
}

}  // namespace uds
