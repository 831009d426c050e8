#include "uds/control.hpp"
#include "uds/scenario.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace uds;
using namespace uds::ctl;

namespace {

const LmParams kP{};
const act::ActuationTables kT = act::default_tables();

double p7_at(double level) {
    return 0.455 / (0.883 + std::exp(-65.998 * level + 77.339)) + 0.132;
}

std::vector<LmInputs> storm_window(std::size_t start, std::size_t n) {
    const auto sc = storm_fixture();
    return {sc.inflows.begin() + static_cast<std::ptrdiff_t>(start),
            sc.inflows.begin() + static_cast<std::ptrdiff_t>(start + n)};
}

OcpConfig small_config(int h) {
    OcpConfig c;
    c.horizon = h;
    return c;
}

}  // namespace

TEST(OcpConfig, Validation) {
    OcpConfig c;
    EXPECT_NO_THROW(c.validate());
    c.horizon = 0;
    EXPECT_THROW(c.validate(), SchemaError);
    c = {};
    c.weights.wwtp = -1.0;
    EXPECT_THROW(c.validate(), SchemaError);
    c = {};
    c.budget.max_evaluations = 0;
    EXPECT_THROW(c.validate(), SchemaError);
}

TEST(EvaluateCost, QuiescentZeroPlan) {
    const std::vector<LmInputs> fc(3);
    const ControlPlan plan(3);
    const auto c = evaluate_cost(plan, LmState{}, fc, small_config(3), kP);
    EXPECT_EQ(c.j_cso, 0.0);
    EXPECT_EQ(c.j_smooth, 0.0);
    // only the pump floor reaches La Gavia; the level stays at its constant
    const double lg = p7_at(0.868);
    EXPECT_NEAR(c.j_wwtp, 3 * 300.0 * (6.0 + 1.5 - lg), 1e-9);
    EXPECT_NEAR(c.j_total, 1.0 * c.j_wwtp, 1e-9);
}

TEST(EvaluateCost, ConstantControlsHaveNoSmoothingCost) {
    LmState s;
    s.v_abro = 50000.0;
    s.u_prev = {0.7, 0.4};
    const std::vector<LmInputs> fc(5, LmInputs{1.0, 2.0, 3.0, 1.0});
    const ControlPlan plan(5, s.u_prev);
    EXPECT_EQ(evaluate_cost(plan, s, fc, small_config(5), kP).j_smooth, 0.0);
}

TEST(EvaluateCost, SurOverflowEntersCsoTerm) {
    // Q_md_mi = 8.3 alone: Q_mi2 = 0, Q_mi3 = 8.3, 2.3 spills at Sur
    const std::vector<LmInputs> fc{LmInputs{0.0, 0.0, 0.0, 8.3}};
    const auto c = evaluate_cost(ControlPlan(1), LmState{}, fc, small_config(1), kP);
    EXPECT_NEAR(c.j_cso, 300.0 * (8.3 - 6.0), 1e-9);
    EXPECT_NEAR(c.j_wwtp, 300.0 * (0.0 + 1.5 - p7_at(0.868)), 1e-9);
}

TEST(EvaluateCost, LengthMismatchIsUsageError) {
    const std::vector<LmInputs> fc(3);
    EXPECT_THROW(evaluate_cost(ControlPlan(2), LmState{}, fc, small_config(3), kP), UsageError);
}

TEST(EvaluateCost, DecompositionIdentity) {
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 200; ++trial) {
        OcpConfig cfg = small_config(6);
        cfg.weights = {u(rng) * 3, u(rng) * 3, u(rng)};
        LmState s{u(rng) * 1e5, 0.5 + u(rng), {u(rng), u(rng)}};
        std::vector<LmInputs> fc(6);
        ControlPlan plan(6);
        for (int k = 0; k < 6; ++k) {
            fc[k] = {3 * u(rng), 6 * u(rng), 10 * u(rng), 4 * u(rng)};
            plan[k] = {fc[k].q_in5 * u(rng), 2.5 * u(rng)};
        }
        const auto c = evaluate_cost(plan, s, fc, cfg, kP);
        const double recomposed = cfg.weights.cso * c.j_cso + cfg.weights.wwtp * c.j_wwtp + cfg.weights.smooth * c.j_smooth;
        EXPECT_NEAR(c.j_total, recomposed, 1e-9 * std::abs(recomposed));
        EXPECT_GE(c.j_cso, 0.0);
        EXPECT_GE(c.j_smooth, 0.0);
    }
}

TEST(SolveMpc, NothingToControlWithoutInflow) {
    const std::vector<LmInputs> fc(4);
    const auto cfg = small_config(4);
    const auto r = solve_mpc(LmState{}, fc, {}, cfg, kP);
    for (const auto& u : r.effective) {
        EXPECT_EQ(u.g_outA, 0.0);
        EXPECT_EQ(u.g_emptA, 0.0);
    }
    const auto zero = evaluate_cost(ControlPlan(4), LmState{}, fc, cfg, kP);
    EXPECT_NEAR(r.cost.j_total, zero.j_total, 1e-9);
}

TEST(SolveMpc, WarmStartAtOptimumIsKept) {
    // one step, dry, full tank: emptying is the only lever and it is bounded
    const std::vector<LmInputs> fc{LmInputs{0.5, 0.5, 1.0, 1.0}};
    LmState s{1e5, 0.868, {}};
    const auto cfg = small_config(1);
    const auto first = solve_mpc(s, fc, {}, cfg, kP);
    const auto again = solve_mpc(s, fc, first.plan, cfg, kP);
    EXPECT_NEAR(again.cost.j_total, first.cost.j_total, 1e-9 * std::abs(first.cost.j_total));
    EXPECT_LE(again.cost.j_total, again.warm_cost.j_total + 1e-12);
}

TEST(SolveMpc, FeasibleImprovingAndDeterministic) {
    std::mt19937_64 rng(8);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    OcpConfig cfg = small_config(6);
    cfg.budget.max_evaluations = 4000;
    for (int trial = 0; trial < 25; ++trial) {
        LmState s{u(rng) * 1e5, 0.5 + u(rng), {u(rng), u(rng)}};
        std::vector<LmInputs> fc(6);
        ControlPlan warm(6);
        for (int k = 0; k < 6; ++k) {
            fc[k] = {3 * u(rng), 6 * u(rng), 10 * u(rng), 4 * u(rng)};
            warm[k] = {8 * u(rng) - 1, 4 * u(rng) - 1};  // partly outside the box
        }
        const auto r = solve_mpc(s, fc, warm, cfg, kP);
        const auto box = plan_bounds(fc, cfg, kP);
        for (int k = 0; k < 6; ++k) {
            EXPECT_GE(r.plan[k].g_outA, box.lo[k].g_outA);
            EXPECT_LE(r.plan[k].g_outA, box.hi[k].g_outA);
            EXPECT_GE(r.plan[k].g_emptA, box.lo[k].g_emptA);
            EXPECT_LE(r.plan[k].g_emptA, box.hi[k].g_emptA);
        }
        const auto warm_cost = evaluate_cost(clamp_plan(warm, box), s, fc, cfg, kP);
        EXPECT_EQ(r.warm_cost.j_total, warm_cost.j_total);
        EXPECT_LE(r.cost.j_total, warm_cost.j_total + 1e-12);
        const auto again = solve_mpc(s, fc, warm, cfg, kP);
        EXPECT_EQ(again.plan, r.plan);
        EXPECT_EQ(again.evaluations, r.evaluations);
        ASSERT_FALSE(r.cost_trace.empty());
        for (std::size_t i = 1; i < r.cost_trace.size(); ++i) EXPECT_LE(r.cost_trace[i], r.cost_trace[i - 1]);
    }
}

TEST(SolveMpc, TinyBudgetReturnsBestSoFar) {
    const auto fc = storm_window(24, 6);
    OcpConfig cfg = small_config(6);
    cfg.budget.max_evaluations = 10;
    const auto r = solve_mpc(LmState{20000.0, 1.0, {}}, fc, {}, cfg, kP);
    EXPECT_TRUE(r.budget_exhausted);
    EXPECT_LE(r.cost.j_total, r.warm_cost.j_total);
    EXPECT_LE(r.evaluations, 10);
}

TEST(SolveMpc, PinnedFirstControlIsHonoured) {
    const auto fc = storm_window(30, 5);
    const ControlPair pin{1.0, 0.2};
    const auto r = solve_mpc(LmState{20000.0, 1.0, {}}, fc, {}, small_config(5), kP, pin);
    EXPECT_EQ(r.plan[0], pin);
    EXPECT_EQ(r.effective[0], pin);
}

TEST(SolveMpc, StormPulseIsStoredAndBeatsFullBypass) {
    // rising limb of the first pulse, tank empty
    const auto fc = storm_window(22, 8);
    const auto cfg = small_config(8);
    const LmState s{};
    const auto r = solve_mpc(s, fc, {}, cfg, kP);
    ControlPlan bypass(fc.size());
    for (std::size_t k = 0; k < fc.size(); ++k) bypass[k] = {fc[k].q_in5, 0.0};
    const auto all_bypass = evaluate_cost(bypass, s, fc, cfg, kP);
    EXPECT_LT(r.cost.j_cso, all_bypass.j_cso);
    EXPECT_LT(r.cost.j_total, all_bypass.j_total);
    bool diverted = false;
    for (std::size_t k = 0; k < fc.size(); ++k) diverted |= r.effective[k].g_outA < fc[k].q_in5 - 1e-6;
    EXPECT_TRUE(diverted);
}

TEST(SolveMpc, NoWorseThanLatticeBruteForce) {
    // every plan on a 5-level lattice of the box, H = 4: 5^8 candidates
    const int levels = 5;
    for (std::size_t start : {22u, 27u, 36u}) {
        const auto fc = storm_window(start, 4);
        const auto cfg = small_config(4);
        const LmState s{15000.0, 1.1, {0.5, 0.0}};
        const auto box = plan_bounds(fc, cfg, kP);
        double lattice_best = std::numeric_limits<double>::infinity();
        ControlPlan plan(4);
        for (int code = 0; code < 390625; ++code) {
            int c = code;
            for (int k = 0; k < 4; ++k) {
                const int a = c % levels;
                c /= levels;
                const int e = c % levels;
                c /= levels;
                plan[k].g_outA = box.lo[k].g_outA + (box.hi[k].g_outA - box.lo[k].g_outA) * a / (levels - 1);
                plan[k].g_emptA = box.lo[k].g_emptA + (box.hi[k].g_emptA - box.lo[k].g_emptA) * e / (levels - 1);
            }
            lattice_best = std::min(lattice_best, evaluate_cost(plan, s, fc, cfg, kP).j_total);
        }
        const auto r = solve_mpc(s, fc, {}, cfg, kP);
        EXPECT_LE(r.cost.j_total, lattice_best + 1e-9 * std::abs(lattice_best)) << "window " << start;
    }
}

TEST(SolveMpc, ActuatorReachCapsPlannedFlows) {
    // shallow tank: the fully open orifice delivers less than the 2.5 bound
    const std::vector<LmInputs> fc(3, LmInputs{0.6, 0.4, 0.8, 2.5});
    const LmState s{4000.0, 0.868, {}};
    const auto r = solve_mpc(s, fc, {}, small_config(3), kP, std::nullopt, &kT);
    double v = s.v_abro;
    for (std::size_t k = 0; k < 3; ++k) {
        const double depth = v / kP.tank_area();
        double cap = 0.0;
        for (std::size_t i = 0; i < 11; ++i) {
            cap = std::max(cap, act::empty_flow(i, depth, r.effective[k].g_outA, fc[k].q_in4, kT));
        }
        EXPECT_LE(r.effective[k].g_emptA, cap + 1e-12);
        v = r.predicted_volume[k];
    }
}

TEST(Rbc, DefaultRuleTable) {
    const auto rules = RbcRuleSet::defaults();
    EXPECT_NO_THROW(rules.validate(kT.grid));
    RbcObservation o;
    o.inputs = {0.6, 0.4, 0.8, 2.5};
    EXPECT_EQ(rbc_step(o, rules, kT, kP), (OpeningPair{100.0, 0.0}));
    o.inputs.q_in5 = 3.0;
    EXPECT_EQ(rbc_step(o, rules, kT, kP).bypass, 50.0);
    o.inputs.q_in5 = 4.0;
    EXPECT_EQ(rbc_step(o, rules, kT, kP).bypass, 50.0);
    o.inputs.q_in5 = 4.01;
    EXPECT_EQ(rbc_step(o, rules, kT, kP).bypass, 0.0);
}

TEST(Rbc, EmptyTankStaysClosed) {
    RbcObservation o;
    o.inputs = {0.6, 0.2, 0.8, 0.0};
    o.state.v_abro = 0.0;
    EXPECT_EQ(rbc_step(o, RbcRuleSet::defaults(), kT, kP).empty, 0.0);
}

TEST(Rbc, EmptyingTracksSpareSurCapacity) {
    // depth 1 m, last step: Q_mi3 = 4, no emptying, bypass 0.5; Q_in4 = 0.6
    // target min(2.5, 6 − 4 + 0) = 2; rows at this context (hand evaluated):
    //   70%: 1.628  80%: 1.844  90%: 2.471  → 80% is closest
    RbcObservation o;
    o.inputs = {0.6, 0.5, 0.8, 2.0};
    o.state.v_abro = 20000.0;
    o.last.q_mi3 = 4.0;
    o.last.g_outA = 0.5;
    EXPECT_DOUBLE_EQ(spare_capacity_target(o, kP), 2.0);
    EXPECT_EQ(rbc_step(o, RbcRuleSet::defaults(), kT, kP).empty, 80.0);
    // storm inflow: emptying off
    o.inputs.q_in5 = 1.5;
    EXPECT_EQ(rbc_step(o, RbcRuleSet::defaults(), kT, kP).empty, 0.0);
    // Sur full and nothing being emptied: target 0 → closed
    o.inputs.q_in5 = 0.5;
    o.last.q_mi3 = 7.0;
    EXPECT_EQ(rbc_step(o, RbcRuleSet::defaults(), kT, kP).empty, 0.0);
}

TEST(Rbc, DeterministicForEqualObservations) {
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const auto rules = RbcRuleSet::defaults();
    for (int i = 0; i < 1000; ++i) {
        RbcObservation o;
        o.inputs = {2 * u(rng), 6 * u(rng), 5 * u(rng), 3 * u(rng)};
        o.state.v_abro = 1e5 * u(rng);
        o.last.q_mi3 = 8 * u(rng);
        o.last.g_outA = 3 * u(rng);
        o.last.g_emptA = 2 * u(rng);
        const auto a = rbc_step(o, rules, kT, kP);
        EXPECT_EQ(a, rbc_step(o, rules, kT, kP));
        EXPECT_TRUE(kT.grid.index_of(a.bypass).has_value());
        EXPECT_TRUE(kT.grid.index_of(a.empty).has_value());
    }
}

TEST(Rbc, MalformedRuleSetsRejected) {
    auto r = RbcRuleSet::defaults();
    r.bypass.back().when.push_back({RbcVariable::q_in5, RbcOp::gt, 4.0});
    EXPECT_THROW(r.validate(kT.grid), SchemaError);
    r = RbcRuleSet::defaults();
    r.empty.front().opening = 45.0;
    EXPECT_THROW(r.validate(kT.grid), SchemaError);
    r = RbcRuleSet::defaults();
    r.bypass.front().track_spare_capacity = true;
    EXPECT_THROW(r.validate(kT.grid), SchemaError);
    r = RbcRuleSet::defaults();
    r.empty.clear();
    EXPECT_THROW(r.validate(kT.grid), SchemaError);
}

TEST(ForecastWindow, PadsAndPersists) {
    const std::vector<LmInputs> in{{1, 1, 1, 1}, {2, 2, 2, 2}, {3, 3, 3, 3}};
    const auto w = forecast_window(in, 1, 4, ForecastMode::perfect);
    EXPECT_EQ(w[0].q_in5, 2.0);
    EXPECT_EQ(w[1].q_in5, 3.0);
    EXPECT_EQ(w[3].q_in5, 3.0);
    const auto p = forecast_window(in, 0, 3, ForecastMode::persistence);
    for (const auto& x : p) EXPECT_EQ(x.q_in5, 1.0);
    EXPECT_THROW(forecast_window(in, 3, 2, ForecastMode::perfect), UsageError);
}

TEST(RecedingHorizon, QuiescentFixedPoint) {
    OcpConfig cfg = small_config(4);
    const std::vector<LmInputs> window(5);
    ControlPlan warm;
    act::SetpointDecision last_b, last_e;
    for (int t = 0; t < 3; ++t) {
        auto step = receding_horizon_controller(LmState{}, window, warm, ControlPair{}, cfg, kP, kT);
        EXPECT_EQ(step.bypass.opening, 0.0);
        EXPECT_EQ(step.empty.opening, 0.0);
        EXPECT_FALSE(step.bypass.saturated);
        if (t > 0) {
            EXPECT_EQ(step.bypass, last_b);
            EXPECT_EQ(step.empty, last_e);
        }
        last_b = step.bypass;
        last_e = step.empty;
        ASSERT_EQ(step.next_warm_start.size(), 5u);
        warm = step.next_warm_start;
    }
}

TEST(RecedingHorizon, ShiftsPlanAndConvertsNextStep) {
    OcpConfig cfg = small_config(6);
    const auto window = storm_window(30, 7);
    const LmState s{30000.0, 1.2, {0.0, 0.0}};
    const ControlPair applied{0.0, 0.0};
    const auto step = receding_horizon_controller(s, window, {}, applied, cfg, kP, kT);
    const auto& plan = step.solve.plan;
    ASSERT_EQ(plan.size(), 7u);
    EXPECT_EQ(plan[0], applied);
    for (std::size_t k = 0; k + 1 < plan.size(); ++k) EXPECT_EQ(step.next_warm_start[k], plan[k + 1]);
    EXPECT_EQ(step.next_warm_start.back(), plan.back());
    // the openings reproduce the planned flows under the predicted context
    EXPECT_NEAR(act::conversion_at(act::Family::fill, step.bypass.opening, step.context, kT), step.planned.g_outA,
                1e-9);
    EXPECT_NEAR(act::conversion_at(act::Family::empty, step.empty.opening, step.context, kT), step.planned.g_emptA,
                1e-9);
    const auto again = receding_horizon_controller(s, window, {}, applied, cfg, kP, kT);
    EXPECT_EQ(again.bypass, step.bypass);
    EXPECT_EQ(again.empty, step.empty);
}
