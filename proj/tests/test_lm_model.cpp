#include "uds/lm_model.hpp"
#include "uds/scenario.hpp"

#include <gtest/gtest.h>

#include <cstring>
#include <random>

using namespace uds;

namespace {

const StepInterval kDt(300.0);

LmState state_with(double v, double l7_prev) {
    LmState s;
    s.v_abro = v;
    s.l7_prev = l7_prev;
    return s;
}

double inflow_total(const LmInputs& in) { return in.q_in4 + in.q_in5 + in.q_in6 + in.q_md_mi; }

}  // namespace

TEST(LmParams, DefaultsMatchReferenceCoefficients) {
    const LmParams p;
    EXPECT_EQ(p.v_abro_max, 2e5);
    EXPECT_EQ(p.la_gavia_cap, 1.5);
    EXPECT_EQ(p.la_gavia_biol_cap, 1.25);
    EXPECT_EQ(p.sur_cap, 6.0);
    EXPECT_EQ(p.q1216, (QuadraticCoeffs{0.003, 0.921, -0.538}));
    EXPECT_EQ(p.q_mi2, (N12Coeffs{-0.003, -0.041, 0.167, 0.874}));
    EXPECT_EQ(p.q_cso5_1, (N12Coeffs{0.006, 0.042, 0.707, 0.155}));
    EXPECT_EQ(p.l7, (LevelCoeffs{-0.254, -0.6, 0.583, 0.77, 0.868}));
    EXPECT_EQ(p.p7, (LogisticCoeffs{0.455, 0.883, -65.998, 77.339, 0.132}));
}

TEST(LmStep, QuiescentPumpFloorAndZeroDiversion) {
    const LmParams p;
    auto r = lm_step(state_with(0.0, -10.0), LmInputs{}, ControlPair{}, kDt, p);
    EXPECT_NEAR(r.outputs.p7, 0.132, 1e-12);
    EXPECT_EQ(r.outputs.q_1216, 0.0);
    EXPECT_DOUBLE_EQ(r.clamps.q1216_floor, 0.538);
    EXPECT_EQ(r.state.v_abro, 0.0);
}

TEST(LmStep, Q1216Regression) {
    const LmParams p;
    LmInputs in;
    in.q_in6 = 10.0;
    auto r = lm_step(LmState{}, in, ControlPair{}, kDt, p);
    EXPECT_NEAR(r.outputs.q_1216, 8.972, 1e-12);
}

TEST(LmStep, SurSplitAtCapacity) {
    const LmParams p;
    LmInputs in;
    in.q_md_mi = 8.3;
    auto r = lm_step(LmState{}, in, ControlPair{}, kDt, p);
    EXPECT_EQ(r.outputs.q_mi2, 0.0);
    EXPECT_EQ(r.outputs.q_mi3, 8.3);
    EXPECT_EQ(r.outputs.q_wwtp_sur, 6.0);
    EXPECT_NEAR(r.outputs.q_cso_sur, 2.3, 1e-15);
}

TEST(LmStep, LaGaviaBiologicalCap) {
    const LmParams p;
    LmInputs in;
    in.q_in6 = 10.0;
    auto r = lm_step(state_with(0.0, 2.0), in, ControlPair{}, kDt, p);
    EXPECT_EQ(r.outputs.q_la_gavia, 1.5);
    EXPECT_EQ(r.outputs.q_biol, 1.25);
    EXPECT_DOUBLE_EQ(r.outputs.q_sec, 0.25);
    EXPECT_EQ(r.outputs.q_out_la_gavia, 0.0);
    EXPECT_DOUBLE_EQ(r.clamps.out_la_gavia_floor, 1.0);
}

// Values frozen from an independent evaluation of the model equations.
TEST(LmStep, FullStepAgainstIndependentEvaluation) {
    const LmParams p;
    const LmInputs in{1.0, 3.0, 5.0, 2.0};
    auto r = lm_step(state_with(1000.0, 1.2), in, ControlPair{2.0, 0.5}, kDt, p);
    const auto& o = r.outputs;
    EXPECT_NEAR(o.p7, 0.5699671405187989, 1e-14);
    EXPECT_NEAR(o.q_1216, 4.142, 1e-14);
    EXPECT_NEAR(o.q_la_gavia, 1.4279671405187986, 1e-14);
    EXPECT_NEAR(o.q_biol, 1.25, 1e-14);
    EXPECT_NEAR(o.q_sec, 0.17796714051879858, 1e-14);
    EXPECT_EQ(o.q_out_la_gavia, 0.0);
    EXPECT_NEAR(o.q_mi, 3.5, 1e-14);
    EXPECT_NEAR(o.g_inA, 1.0, 1e-14);
    EXPECT_NEAR(o.q_mi2, 3.196995508, 1e-12);
    EXPECT_NEAR(o.q_cso5_1, 4.088330984000001, 1e-12);
    EXPECT_NEAR(o.q_cso5, 4.088330984000001, 1e-12);
    EXPECT_NEAR(o.l7, 2.7127505505679994, 1e-12);
    EXPECT_NEAR(r.state.v_abro, 1150.0, 1e-9);
    EXPECT_EQ(o.q_cso4, 0.0);
    EXPECT_NEAR(o.q_mi3, 5.1969955080000005, 1e-12);
    EXPECT_NEAR(o.q_wwtp_sur, 5.1969955080000005, 1e-12);
    EXPECT_EQ(o.q_cso_sur, 0.0);
    EXPECT_EQ(r.state.l7_prev, o.l7);
    EXPECT_EQ(r.state.u_prev, (ControlPair{2.0, 0.5}));
}

TEST(LmStep, ControlsAreClampedToFeasibleBox) {
    const LmParams p;
    const LmInputs in{1.0, 3.0, 0.0, 0.0};
    // bypass above the arriving flow, emptying above v/dt
    auto r = lm_step(state_with(300.0, 1.0), in, ControlPair{5.0, 3.0}, kDt, p);
    EXPECT_EQ(r.outputs.g_outA, 3.0);
    EXPECT_EQ(r.outputs.g_emptA, 1.0);
    EXPECT_EQ(r.clamps.g_outA_adjust, -2.0);
    EXPECT_EQ(r.clamps.g_emptA_adjust, -2.0);
    EXPECT_TRUE(r.clamps.controls_clamped());
    EXPECT_EQ(r.state.v_abro, 0.0);
    auto neg = lm_step(state_with(300.0, 1.0), in, ControlPair{-1.0, -1.0}, kDt, p);
    EXPECT_EQ(neg.outputs.g_outA, 0.0);
    EXPECT_EQ(neg.outputs.g_emptA, 0.0);
}

TEST(LmStep, RejectsNegativeInputsAndNonFiniteControls) {
    const LmParams p;
    EXPECT_THROW(lm_step(LmState{}, LmInputs{-1.0, 0, 0, 0}, ControlPair{}, kDt, p), DomainError);
    EXPECT_THROW(lm_step(LmState{}, LmInputs{}, ControlPair{std::nan(""), 0.0}, kDt, p), DomainError);
    EXPECT_THROW(lm_step(state_with(3e5, 0.868), LmInputs{}, ControlPair{}, kDt, p), DomainError);
}

TEST(LmStep, NonFiniteIntermediateNamesEquation) {
    LmParams p;
    p.p7.intercept = std::numeric_limits<double>::infinity();
    p.p7.offset = 0.0;
    p.p7.amplitude = std::numeric_limits<double>::infinity();
    try {
        lm_step(LmState{}, LmInputs{}, ControlPair{}, kDt, p);
        FAIL();
    } catch (const ModelError& e) {
        EXPECT_NE(std::string(e.what()).find("pump P7"), std::string::npos);
    }
}

TEST(LmStep, SameStepOutputsIgnoreCurrentLevel) {
    // Shifting the level regression changes L7 at step k but nothing else at step k.
    LmParams a;
    LmParams b = a;
    b.l7.constant -= 5.0;
    const LmInputs in{2.0, 4.0, 6.0, 3.0};
    auto ra = lm_step(state_with(5e4, 1.1), in, ControlPair{1.0, 0.5}, kDt, a);
    auto rb = lm_step(state_with(5e4, 1.1), in, ControlPair{1.0, 0.5}, kDt, b);
    EXPECT_NE(ra.outputs.l7, rb.outputs.l7);
    LmOutputs oa = ra.outputs, ob = rb.outputs;
    oa.l7 = ob.l7 = 0.0;
    EXPECT_EQ(oa, ob);
    // and the delayed level does act at the next step
    auto na = lm_step(ra.state, in, ControlPair{1.0, 0.5}, kDt, a);
    auto nb = lm_step(rb.state, in, ControlPair{1.0, 0.5}, kDt, a);
    EXPECT_NE(na.outputs.p7, nb.outputs.p7);
}

TEST(LmStep, FullBypassKeepsTankConstant) {
    const LmParams p;
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> q(0.0, 12.0);
    LmState s = state_with(7.5e4, 0.868);
    for (int k = 0; k < 200; ++k) {
        LmInputs in{q(rng), q(rng), q(rng), q(rng)};
        auto r = lm_step(s, in, ControlPair{in.q_in5, 0.0}, kDt, p);
        ASSERT_EQ(r.state.v_abro, 7.5e4);
        s = r.state;
    }
}

TEST(LmStep, PropertiesOverRandomTrajectories) {
    const LmParams p;
    std::mt19937_64 rng(17);
    std::uniform_real_distribution<double> q(0.0, 25.0);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 40; ++trial) {
        LmState s = state_with(u(rng) * p.v_abro_max, 0.868);
        for (int k = 0; k < 100; ++k) {
            LmInputs in{q(rng), q(rng), q(rng), q(rng)};
            ControlPair c{u(rng) * in.q_in5 * 1.2, u(rng) * 4.0};
            auto r = lm_step(s, in, c, kDt, p);
            const auto& o = r.outputs;
            for (double f : {o.q_mi, o.g_inA, o.q_cso4, o.q_1216, o.q_la_gavia, o.q_biol, o.q_sec, o.q_out_la_gavia,
                             o.q_mi2, o.q_cso5_1, o.q_cso5, o.p7, o.q_mi3, o.q_wwtp_sur, o.q_cso_sur}) {
                ASSERT_GE(f, 0.0);
            }
            ASSERT_LE(o.q_wwtp_sur, 6.0);
            ASSERT_LE(o.q_la_gavia, 1.5);
            ASSERT_LE(o.q_biol, 1.25);
            ASSERT_LE(r.state.v_abro, p.v_abro_max);
            // capacity splits partition their inflow
            ASSERT_EQ(o.q_wwtp_sur + o.q_cso_sur, o.q_mi3);
            ASSERT_EQ(o.q_biol + o.q_sec, o.q_la_gavia);
            // overflow only when the unclamped update exceeds the tank
            const double unclamped = s.v_abro + kDt.seconds() * (o.g_inA - o.g_emptA);
            ASSERT_EQ(o.q_cso4 > 0.0, unclamped > p.v_abro_max);
            // step mass balance including the logged corrections
            const double lhs = inflow_total(in);
            const double rhs = (r.state.v_abro - s.v_abro) / kDt.seconds() + o.q_wwtp_sur + o.q_la_gavia + o.q_cso4 +
                               o.q_cso5 + o.q_cso_sur + r.corrections.net();
            ASSERT_NEAR(lhs, rhs, 1e-10 * std::max(1.0, lhs));
            s = r.state;
        }
    }
}

TEST(LmStep, SurInflowMonotoneAndSaturating) {
    const LmParams p;
    double prev = -1.0;
    for (double md = 0.0; md <= 20.0; md += 0.01) {
        LmInputs in;
        in.q_md_mi = md;
        auto r = lm_step(LmState{}, in, ControlPair{}, kDt, p);
        ASSERT_GE(r.outputs.q_wwtp_sur, prev);
        prev = r.outputs.q_wwtp_sur;
    }
    EXPECT_EQ(prev, 6.0);
}

TEST(LevelFromVolume, ConstantCrossSection) {
    const LmParams p;
    EXPECT_EQ(p.tank_area(), 2e4);
    EXPECT_EQ(level_from_volume(0.0, p), 0.0);
    EXPECT_EQ(level_from_volume(p.v_abro_max, p), 10.0);
    EXPECT_EQ(level_from_volume(1e5, p), 5.0);
    EXPECT_THROW(level_from_volume(-1.0, p), DomainError);
}

TEST(LmSimulate, SingletonMatchesStep) {
    const LmParams p;
    const LmInputs in{1.0, 3.0, 5.0, 2.0};
    const ControlPair c{2.0, 0.5};
    const LmState s0 = state_with(1000.0, 1.2);
    auto traj = lm_simulate(s0, std::span(&in, 1), std::span(&c, 1), kDt, p);
    auto r = lm_step(s0, in, c, kDt, p);
    ASSERT_EQ(traj.outputs.size(), 1u);
    EXPECT_EQ(traj.outputs[0], r.outputs);
    EXPECT_EQ(traj.final_state, r.state);
}

TEST(LmSimulate, QuiescentSystemKeepsVolume) {
    const LmParams p;
    std::vector<LmInputs> in(50);
    std::vector<ControlPair> c(50);
    auto traj = lm_simulate(state_with(1234.5, 0.868), in, c, kDt, p);
    for (const auto& o : traj.outputs) EXPECT_EQ(o.v_abro, 1234.5);
}

TEST(LmSimulate, LengthMismatchIsUsageError) {
    const LmParams p;
    std::vector<LmInputs> in(3);
    std::vector<ControlPair> c(2);
    EXPECT_THROW(lm_simulate(LmState{}, in, c, kDt, p), UsageError);
}

TEST(LmSimulate, CalibrationRainReplayIsBitIdentical) {
    const LmParams p;
    const Scenario sc = calibration_scenario(kCalibrationRains[0]);
    ASSERT_EQ(*sc.metadata.date, "2016-10-22");
    std::vector<ControlPair> c;
    for (const auto& q : sc.inflows) c.push_back({0.5 * q.q_in5, 0.3});
    auto a = lm_simulate(LmState{}, sc.inflows, c, StepInterval(sc.dt), p);
    auto b = lm_simulate(LmState{}, sc.inflows, c, StepInterval(sc.dt), p);
    ASSERT_EQ(a.outputs.size(), b.outputs.size());
    EXPECT_EQ(std::memcmp(a.outputs.data(), b.outputs.data(), a.outputs.size() * sizeof(LmOutputs)), 0);
}
