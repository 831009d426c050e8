#pragma once

// Receding-horizon MPC over the LM model and a rule-based baseline.
//
// The optimal control problem is reduced by direct single shooting: the
// decision vector holds the 2H actuator flows, states come from forward
// simulation, and a box-projected local search minimises the weighted cost.

#include "uds/actuation.hpp"
#include "uds/errors.hpp"
#include "uds/lm_model.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace uds::ctl {

struct Weights {
    double cso = 1.0;
    double wwtp = 1.0;
    double smooth = 0.01;

    friend bool operator==(const Weights&, const Weights&) = default;
};

enum class ForecastMode { perfect, persistence };

struct OptimizerBudget {
    int max_evaluations = 60000;  ///< objective evaluations per solve
    double tolerance = 1e-9;      ///< relative improvement that ends a local search
    double fd_step = 1e-4;        ///< finite-difference step, m³/s
    int max_sweeps = 30;          ///< coordinate sweeps per start
    bool multistart = true;       ///< also start from the corners and the box centre

    friend bool operator==(const OptimizerBudget&, const OptimizerBudget&) = default;
};

struct OcpConfig {
    int horizon = 12;
    double dt = 300.0;
    Weights weights;
    Flow g_emptA_max = 2.5;  ///< emptying bound; the bypass is bounded by Q_in5
    ForecastMode forecast = ForecastMode::perfect;
    bool actuator_reach = true;  ///< cap planned flows at what the actuation tables can deliver
    OptimizerBudget budget;

    void validate() const {
        if (horizon < 1) throw SchemaError("ocp.horizon must be >= 1");
        if (!(dt > 0.0) || !std::isfinite(dt)) throw SchemaError("ocp.dt must be positive");
        for (double w : {weights.cso, weights.wwtp, weights.smooth}) {
            if (!(w >= 0.0) || !std::isfinite(w)) throw SchemaError("ocp weights must be finite and >= 0");
        }
        if (!(g_emptA_max >= 0.0) || !std::isfinite(g_emptA_max)) throw SchemaError("ocp.g_emptA_max must be >= 0");
        if (budget.max_evaluations < 1) throw SchemaError("ocp.budget.max_evaluations must be >= 1");
        if (!(budget.fd_step > 0.0)) throw SchemaError("ocp.budget.fd_step must be > 0");
        if (!(budget.tolerance >= 0.0)) throw SchemaError("ocp.budget.tolerance must be >= 0");
        if (budget.max_sweeps < 0) throw SchemaError("ocp.budget.max_sweeps must be >= 0");
    }

    friend bool operator==(const OcpConfig&, const OcpConfig&) = default;
};

using ControlPlan = std::vector<ControlPair>;

struct CostBreakdown {
    double j_total = 0.0;
    double j_cso = 0.0;    ///< m³
    double j_wwtp = 0.0;   ///< m³ of unused treatment capacity
    double j_smooth = 0.0; ///< (m³/s)²
};

/// Per-step box of the decision variables.
struct PlanBounds {
    std::vector<ControlPair> lo;
    std::vector<ControlPair> hi;
};

inline PlanBounds plan_bounds(std::span<const LmInputs> forecast, const OcpConfig& cfg, const LmParams& p) {
    PlanBounds b;
    b.lo.resize(forecast.size());
    b.hi.resize(forecast.size());
    const Flow e_max = std::min(cfg.g_emptA_max, p.tank_outflow_max);
    for (std::size_t k = 0; k < forecast.size(); ++k) {
        b.lo[k] = {std::max(0.0, forecast[k].q_in5 - p.tank_inflow_max), 0.0};
        b.hi[k] = {forecast[k].q_in5, e_max};
    }
    return b;
}

inline ControlPlan clamp_plan(const ControlPlan& plan, const PlanBounds& b) {
    ControlPlan out(plan.size());
    for (std::size_t k = 0; k < plan.size(); ++k) {
        out[k].g_outA = std::clamp(plan[k].g_outA, b.lo[k].g_outA, b.hi[k].g_outA);
        out[k].g_emptA = std::clamp(plan[k].g_emptA, b.lo[k].g_emptA, b.hi[k].g_emptA);
    }
    return out;
}

namespace detail {

/// Accumulates the three sub-objectives over one simulated step.
inline void add_stage(CostBreakdown& c, const LmOutputs& o, const ControlPair& prev, double dt, const LmParams& p) {
    c.j_cso += dt * (o.q_cso4 + o.q_cso5 + o.q_cso_sur);
    c.j_wwtp += dt * ((p.sur_cap - o.q_wwtp_sur) + (p.la_gavia_cap - o.q_la_gavia));
    const double da = o.g_outA - prev.g_outA;
    const double de = o.g_emptA - prev.g_emptA;
    c.j_smooth += da * da + de * de;
}

inline void total(CostBreakdown& c, const Weights& w) {
    c.j_total = w.cso * c.j_cso + w.wwtp * c.j_wwtp + w.smooth * c.j_smooth;
}

inline std::vector<double> flatten(const ControlPlan& plan) {
    std::vector<double> z(2 * plan.size());
    for (std::size_t k = 0; k < plan.size(); ++k) {
        z[2 * k] = plan[k].g_outA;
        z[2 * k + 1] = plan[k].g_emptA;
    }
    return z;
}

inline ControlPlan unflatten(std::span<const double> z) {
    ControlPlan plan(z.size() / 2);
    for (std::size_t k = 0; k < plan.size(); ++k) plan[k] = {z[2 * k], z[2 * k + 1]};
    return plan;
}

/// Shooting problem data. With actuation tables attached, every control is
/// additionally capped at the largest flow any opening can deliver under the
/// step's conditions; any flow between 0 and that cap is reachable because
/// the closed opening gives 0 and conversion is interpolated continuously.
class Shooting {
public:
    Shooting(const LmState& state, std::span<const LmInputs> forecast, const OcpConfig& cfg, const LmParams& p,
             const act::ActuationTables* reach, bool free_first)
        : state_(state), forecast_(forecast), cfg_(cfg), p_(p), dt_(cfg.dt), reach_(reach), free_first_(free_first) {
        if (reach_) {
            fill_cap_.resize(forecast.size());
            for (std::size_t k = 0; k < forecast.size(); ++k) {
                Flow cap = 0.0;
                for (std::size_t i = 0; i < reach_->grid.size(); ++i) {
                    cap = std::max(cap, act::fill_flow(i, forecast[k].q_in5, *reach_));
                }
                fill_cap_[k] = cap;
            }
        }
    }

    /// Controls as the model will see them at step k from state s.
    ControlPair effective(const LmState& s, std::size_t k, ControlPair u) const {
        if (!reach_ || (k == 0 && free_first_)) return u;
        const LmInputs& in = forecast_[k];
        u.g_outA = std::min(u.g_outA, fill_cap_[k]);
        const Flow g_out = std::clamp(u.g_outA, std::max(0.0, in.q_in5 - p_.tank_inflow_max), in.q_in5);
        const double depth = s.v_abro / p_.tank_area();
        Flow cap = 0.0;
        for (const auto& row : reach_->empty) cap = std::max(cap, row.raw(depth, g_out, in.q_in4));
        u.g_emptA = std::min(u.g_emptA, cap);
        return u;
    }

    CostBreakdown cost(std::span<const double> z) const {
        CostBreakdown c;
        LmState s = state_;
        for (std::size_t k = 0; k < forecast_.size(); ++k) {
            const ControlPair u = effective(s, k, ControlPair{z[2 * k], z[2 * k + 1]});
            const LmStepResult r = lm_step(s, forecast_[k], u, dt_, p_);
            add_stage(c, r.outputs, s.u_prev, cfg_.dt, p_);
            s = r.state;
        }
        total(c, cfg_.weights);
        return c;
    }

    std::vector<LmStepResult> simulate(std::span<const double> z) const {
        std::vector<LmStepResult> out;
        out.reserve(forecast_.size());
        LmState s = state_;
        for (std::size_t k = 0; k < forecast_.size(); ++k) {
            const ControlPair u = effective(s, k, ControlPair{z[2 * k], z[2 * k + 1]});
            out.push_back(lm_step(s, forecast_[k], u, dt_, p_));
            s = out.back().state;
        }
        return out;
    }

    const OcpConfig& config() const { return cfg_; }

private:
    LmState state_;
    std::span<const LmInputs> forecast_;
    const OcpConfig& cfg_;
    const LmParams& p_;
    StepInterval dt_;
    const act::ActuationTables* reach_;
    bool free_first_;
    std::vector<Flow> fill_cap_;
};

}  // namespace detail

/// Forward-simulates the plan and returns the weighted cost and its parts.
/// Controls are clamped to the model's feasible box inside the simulation and,
/// when `reach` is given, to what the actuators can deliver.
inline CostBreakdown evaluate_cost(const ControlPlan& plan, const LmState& state, std::span<const LmInputs> forecast,
                                   const OcpConfig& cfg, const LmParams& p,
                                   const act::ActuationTables* reach = nullptr) {
    if (plan.size() != forecast.size()) {
        throw UsageError("evaluate_cost: plan has " + std::to_string(plan.size()) + " entries, forecast has " +
                         std::to_string(forecast.size()));
    }
    if (plan.empty()) throw UsageError("evaluate_cost: empty horizon");
    const auto z = detail::flatten(plan);
    return detail::Shooting(state, forecast, cfg, p, reach, false).cost(z);
}

struct SolveResult {
    ControlPlan plan;                      ///< decision variables, inside the box
    ControlPlan effective;                 ///< flows the model applies after its clamps
    std::vector<double> predicted_volume;  ///< tank volume after each step
    CostBreakdown cost;
    CostBreakdown warm_cost;
    int evaluations = 0;
    int accepted_steps = 0;
    bool budget_exhausted = false;
    std::vector<double> cost_trace;  ///< best j_total after every accepted step
};

namespace detail {

class ShootingSearch {
public:
    ShootingSearch(const Shooting& problem, std::vector<double> lo, std::vector<double> hi)
        : problem_(problem), cfg_(problem.config()), lo_(std::move(lo)), hi_(std::move(hi)) {}

    bool exhausted() const { return evals_ >= cfg_.budget.max_evaluations; }
    int evaluations() const { return evals_; }
    int accepted() const { return accepted_; }
    const std::vector<double>& trace() const { return trace_; }
    const std::vector<double>& best() const { return best_z_; }
    double best_cost() const { return best_f_; }

    /// Past the budget every probe reads as +inf, so searches wind down.
    double eval(const std::vector<double>& z) {
        if (exhausted()) return std::numeric_limits<double>::infinity();
        ++evals_;
        const double f = problem_.cost(z).j_total;
        if (f < best_f_) {
            best_f_ = f;
            best_z_ = z;
        }
        return f;
    }

    /// Local search from z: projected gradient descent, then coordinate sweeps.
    void run(std::vector<double> z) {
        double f = eval(z);
        note_accept(f);
        projected_gradient(z, f);
        coordinate_sweeps(z, f);
    }

private:
    void note_accept(double) {
        ++accepted_;
        trace_.push_back(best_f_);
    }

    bool converged(double before, double after) const {
        return before - after <= cfg_.budget.tolerance * std::max(1.0, std::abs(after));
    }

    void gradient(const std::vector<double>& z, std::vector<double>& g) {
        const double h = cfg_.budget.fd_step;
        std::vector<double> w = z;
        for (std::size_t i = 0; i < z.size(); ++i) {
            g[i] = 0.0;
            if (lo_[i] == hi_[i]) continue;
            const double up = std::min(hi_[i], z[i] + h);
            const double dn = std::max(lo_[i], z[i] - h);
            if (up == dn) continue;
            w[i] = up;
            const double fu = eval(w);
            w[i] = dn;
            const double fd = eval(w);
            w[i] = z[i];
            g[i] = (fu - fd) / (up - dn);
        }
    }

    void projected_gradient(std::vector<double>& z, double& f) {
        const std::size_t n = z.size();
        std::vector<double> g(n), d(n), trial(n);
        for (int it = 0; it < 50 && !exhausted(); ++it) {
            gradient(z, g);
            double dmax = 0.0, width = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                const bool pinned_lo = z[i] <= lo_[i] && g[i] > 0.0;
                const bool pinned_hi = z[i] >= hi_[i] && g[i] < 0.0;
                d[i] = (pinned_lo || pinned_hi) ? 0.0 : -g[i];
                dmax = std::max(dmax, std::abs(d[i]));
                width = std::max(width, hi_[i] - lo_[i]);
            }
            if (dmax == 0.0) return;
            double alpha = width / dmax;
            bool accepted = false;
            double f_new = f;
            for (int bt = 0; bt < 40 && !exhausted(); ++bt, alpha *= 0.5) {
                double decrease = 0.0;
                for (std::size_t i = 0; i < n; ++i) {
                    trial[i] = std::clamp(z[i] + alpha * d[i], lo_[i], hi_[i]);
                    decrease += g[i] * (trial[i] - z[i]);
                }
                f_new = eval(trial);
                if (f_new <= f + 1e-4 * decrease && f_new < f) {
                    accepted = true;
                    break;
                }
            }
            if (!accepted) return;
            const double before = f;
            z = trial;
            f = f_new;
            note_accept(f);
            if (converged(before, f)) return;
        }
    }

    /// One-dimensional search per coordinate: a 9-point scan of the whole
    /// interval, then golden-section refinement around the best sample.
    void coordinate_sweeps(std::vector<double>& z, double& f) {
        constexpr double kInvPhi = 0.6180339887498949;
        for (int sweep = 0; sweep < cfg_.budget.max_sweeps && !exhausted(); ++sweep) {
            const double f_start = f;
            for (std::size_t i = 0; i < z.size() && !exhausted(); ++i) {
                const double lo = lo_[i], hi = hi_[i];
                if (lo == hi) continue;
                const double x0 = z[i];
                double bx = x0, bf = f;
                auto probe = [&](double x) {
                    z[i] = x;
                    const double fx = eval(z);
                    if (fx < bf) {
                        bf = fx;
                        bx = x;
                    }
                    return fx;
                };
                for (int j = 0; j <= 8; ++j) {
                    const double x = j == 8 ? hi : lo + (hi - lo) * j / 8.0;
                    if (x != x0) probe(x);
                }
                double a = std::max(lo, bx - (hi - lo) / 8.0);
                double b = std::min(hi, bx + (hi - lo) / 8.0);
                double c = b - kInvPhi * (b - a);
                double e = a + kInvPhi * (b - a);
                double fc = probe(c), fe = probe(e);
                for (int k = 0; k < 24 && b - a > 1e-9 && !exhausted(); ++k) {
                    if (fc <= fe) {
                        b = e;
                        e = c;
                        fe = fc;
                        c = b - kInvPhi * (b - a);
                        fc = probe(c);
                    } else {
                        a = c;
                        c = e;
                        fc = fe;
                        e = a + kInvPhi * (b - a);
                        fe = probe(e);
                    }
                }
                z[i] = bx;
                if (bf < f) {
                    f = bf;
                    note_accept(f);
                }
            }
            if (converged(f_start, f)) break;
        }
    }

    const Shooting& problem_;
    const OcpConfig& cfg_;
    std::vector<double> lo_, hi_;
    int evals_ = 0;
    int accepted_ = 0;
    double best_f_ = std::numeric_limits<double>::infinity();
    std::vector<double> best_z_;
    std::vector<double> trace_;
};

}  // namespace detail

/// Direct-shooting MPC solve over the forecast window. The warm start is
/// clamped into the box first; the returned cost never exceeds its cost.
/// `pinned_first` fixes u(0), e.g. to the flows already being applied.
inline SolveResult solve_mpc(const LmState& state, std::span<const LmInputs> forecast, const ControlPlan& warm_start,
                             const OcpConfig& cfg, const LmParams& p,
                             const std::optional<ControlPair>& pinned_first = std::nullopt,
                             const act::ActuationTables* reach = nullptr) {
    cfg.validate();
    if (forecast.empty()) throw UsageError("solve_mpc: empty forecast");
    if (!warm_start.empty() && warm_start.size() != forecast.size()) {
        throw UsageError("solve_mpc: warm start has " + std::to_string(warm_start.size()) + " entries, forecast has " +
                         std::to_string(forecast.size()));
    }
    PlanBounds box = plan_bounds(forecast, cfg, p);
    if (pinned_first) box.lo[0] = box.hi[0] = *pinned_first;

    const ControlPlan warm = clamp_plan(warm_start.empty() ? ControlPlan(forecast.size()) : warm_start, box);
    const auto lo = detail::flatten(box.lo);
    const auto hi = detail::flatten(box.hi);

    const detail::Shooting problem(state, forecast, cfg, p, reach, pinned_first.has_value());
    detail::ShootingSearch search(problem, lo, hi);
    const auto z_warm = detail::flatten(warm);
    search.run(z_warm);

    if (cfg.budget.multistart) {
        const std::size_t n = lo.size();
        std::vector<std::vector<double>> starts;
        std::vector<double> s(n);
        for (std::size_t i = 0; i < n; ++i) s[i] = lo[i];
        starts.push_back(s);  // store everything
        for (std::size_t i = 0; i < n; ++i) s[i] = (i % 2 == 0) ? hi[i] : lo[i];
        starts.push_back(s);  // full bypass
        for (std::size_t i = 0; i < n; ++i) s[i] = hi[i];
        starts.push_back(s);  // full bypass and full emptying
        for (std::size_t i = 0; i < n; ++i) s[i] = 0.5 * (lo[i] + hi[i]);
        starts.push_back(s);
        for (const auto& start : starts) {
            if (search.exhausted()) break;
            search.run(start);
        }
    }

    SolveResult r;
    r.plan = detail::unflatten(search.best());
    r.cost = problem.cost(search.best());
    r.warm_cost = problem.cost(z_warm);
    for (const auto& step : problem.simulate(search.best())) {
        r.effective.push_back({step.outputs.g_outA, step.outputs.g_emptA});
        r.predicted_volume.push_back(step.state.v_abro);
    }
    r.evaluations = search.evaluations();
    r.accepted_steps = search.accepted();
    r.budget_exhausted = search.exhausted();
    r.cost_trace = search.trace();
    return r;
}

// ---------------------------------------------------------------------------
// Rule-based control

/// What a rule may test. `*_last` are flows of the most recent plant step.
enum class RbcVariable { q_in4, q_in5, q_in6, q_md_mi, v_abro, d_abro, q_mi3_last, g_outA_last, g_emptA_last };

inline constexpr std::array<std::pair<RbcVariable, const char*>, 9> kRbcVariables{{
    {RbcVariable::q_in4, "q_in4"},
    {RbcVariable::q_in5, "q_in5"},
    {RbcVariable::q_in6, "q_in6"},
    {RbcVariable::q_md_mi, "q_md_mi"},
    {RbcVariable::v_abro, "v_abro"},
    {RbcVariable::d_abro, "d_abro"},
    {RbcVariable::q_mi3_last, "q_mi3_last"},
    {RbcVariable::g_outA_last, "g_outA_last"},
    {RbcVariable::g_emptA_last, "g_emptA_last"},
}};

enum class RbcOp { lt, le, gt, ge };

inline constexpr std::array<std::pair<RbcOp, const char*>, 4> kRbcOps{{
    {RbcOp::lt, "<"}, {RbcOp::le, "<="}, {RbcOp::gt, ">"}, {RbcOp::ge, ">="}}};

namespace detail {
template <class E, std::size_t N>
const char* name_of(const std::array<std::pair<E, const char*>, N>& table, E value) {
    for (const auto& [e, n] : table) {
        if (e == value) return n;
    }
    return "?";
}
template <class E, std::size_t N>
std::optional<E> lookup(const std::array<std::pair<E, const char*>, N>& table, std::string_view name) {
    for (const auto& [e, n] : table) {
        if (name == n) return e;
    }
    return std::nullopt;
}
}  // namespace detail

inline const char* rbc_variable_name(RbcVariable v) { return detail::name_of(kRbcVariables, v); }
inline const char* rbc_op_name(RbcOp op) { return detail::name_of(kRbcOps, op); }
inline std::optional<RbcVariable> rbc_variable_from_name(std::string_view s) { return detail::lookup(kRbcVariables, s); }
inline std::optional<RbcOp> rbc_op_from_name(std::string_view s) { return detail::lookup(kRbcOps, s); }

struct RbcCondition {
    RbcVariable variable = RbcVariable::q_in5;
    RbcOp op = RbcOp::le;
    double value = 0.0;

    friend bool operator==(const RbcCondition&, const RbcCondition&) = default;
};

struct RbcRule {
    std::vector<RbcCondition> when;  ///< all must hold; empty means always
    bool track_spare_capacity = false;
    double opening = 0.0;            ///< used when not tracking

    friend bool operator==(const RbcRule&, const RbcRule&) = default;
};

struct RbcRuleSet {
    std::vector<RbcRule> bypass;
    std::vector<RbcRule> empty;

    /// Bypass open below 2 m³/s on Q_in5, half open to 4, closed above. The tank
    /// empties only when Q_in5 < 1, at the opening that best fills the spare
    /// Sur capacity.
    static RbcRuleSet defaults() {
        RbcRuleSet r;
        r.bypass = {
            {{{RbcVariable::q_in5, RbcOp::le, 2.0}}, false, 100.0},
            {{{RbcVariable::q_in5, RbcOp::le, 4.0}}, false, 50.0},
            {{}, false, 0.0},
        };
        r.empty = {
            {{{RbcVariable::v_abro, RbcOp::le, 0.0}}, false, 0.0},
            {{{RbcVariable::q_in5, RbcOp::lt, 1.0}}, true, 0.0},
            {{}, false, 0.0},
        };
        return r;
    }

    void validate(const act::SetpointGrid& grid) const {
        auto check = [&](const std::vector<RbcRule>& rules, const char* which) {
            if (rules.empty() || !rules.back().when.empty()) {
                throw SchemaError(std::string("rbc.") + which + ": last rule must be unconditional so some rule always fires");
            }
            for (const auto& rule : rules) {
                if (!rule.track_spare_capacity && !grid.index_of(rule.opening)) {
                    throw SchemaError(std::string("rbc.") + which + ": opening " + std::to_string(rule.opening) +
                                      " is not on the setpoint grid");
                }
                for (const auto& c : rule.when) {
                    if (!std::isfinite(c.value)) throw SchemaError(std::string("rbc.") + which + ": non-finite threshold");
                }
            }
        };
        check(bypass, "bypass");
        for (const auto& rule : bypass) {
            if (rule.track_spare_capacity) {
                throw SchemaError("rbc.bypass: track_spare_capacity applies to the emptying actuator only");
            }
        }
        check(empty, "empty");
    }

    friend bool operator==(const RbcRuleSet&, const RbcRuleSet&) = default;
};

struct RbcObservation {
    LmInputs inputs;   ///< current inflows
    LmState state;     ///< current state
    LmOutputs last;    ///< outputs of the most recent step
};

struct OpeningPair {
    double bypass = 100.0;  ///< percent
    double empty = 0.0;

    friend bool operator==(const OpeningPair&, const OpeningPair&) = default;
};

namespace detail {

inline double observe(RbcVariable v, const RbcObservation& o, const LmParams& p) {
    switch (v) {
        case RbcVariable::q_in4: return o.inputs.q_in4;
        case RbcVariable::q_in5: return o.inputs.q_in5;
        case RbcVariable::q_in6: return o.inputs.q_in6;
        case RbcVariable::q_md_mi: return o.inputs.q_md_mi;
        case RbcVariable::v_abro: return o.state.v_abro;
        case RbcVariable::d_abro: return o.state.v_abro / p.tank_area();
        case RbcVariable::q_mi3_last: return o.last.q_mi3;
        case RbcVariable::g_outA_last: return o.last.g_outA;
        case RbcVariable::g_emptA_last: return o.last.g_emptA;
    }
    return 0.0;
}

inline bool holds(const RbcCondition& c, const RbcObservation& o, const LmParams& p) {
    const double x = observe(c.variable, o, p);
    switch (c.op) {
        case RbcOp::lt: return x < c.value;
        case RbcOp::le: return x <= c.value;
        case RbcOp::gt: return x > c.value;
        case RbcOp::ge: return x >= c.value;
    }
    return false;
}

inline const RbcRule& first_match(const std::vector<RbcRule>& rules, const RbcObservation& o, const LmParams& p) {
    for (const auto& r : rules) {
        if (std::all_of(r.when.begin(), r.when.end(), [&](const RbcCondition& c) { return holds(c, o, p); })) return r;
    }
    return rules.back();
}

}  // namespace detail

/// Spare Sur capacity estimate the emptying rule tracks:
/// min(q_out_max, max(0, sur_cap − Q_mi3) + G_emptA) over the last step.
inline Flow spare_capacity_target(const RbcObservation& o, const LmParams& p) {
    const Flow spare = std::max(0.0, p.sur_cap - o.last.q_mi3) + o.last.g_emptA;
    return std::min(p.tank_outflow_max, spare);
}

/// First matching rule per actuator. Tracking picks the grid opening whose
/// emptying conversion is closest to the spare-capacity target (ties to the
/// lower opening).
inline OpeningPair rbc_step(const RbcObservation& obs, const RbcRuleSet& rules, const act::ActuationTables& tables,
                            const LmParams& p) {
    OpeningPair out;
    const RbcRule& b = detail::first_match(rules.bypass, obs, p);
    const RbcRule& e = detail::first_match(rules.empty, obs, p);
    out.bypass = b.opening;
    if (!e.track_spare_capacity) {
        out.empty = e.opening;
        return out;
    }
    const Flow target = spare_capacity_target(obs, p);
    const act::ConversionContext ctx{obs.inputs.q_in5, obs.state.v_abro / p.tank_area(), obs.last.g_outA,
                                     obs.inputs.q_in4};
    std::size_t best = 0;
    double best_err = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < tables.grid.size(); ++i) {
        const double err = std::abs(act::conversion(act::Family::empty, i, ctx, tables) - target);
        if (err < best_err) {
            best_err = err;
            best = i;
        }
    }
    out.empty = tables.grid.openings[best];
    return out;
}

// ---------------------------------------------------------------------------
// Receding-horizon step

struct RhcStep {
    act::SetpointDecision bypass;
    act::SetpointDecision empty;
    ControlPair planned;            ///< flows the plan asks for at the next step
    act::ConversionContext context; ///< predicted conditions at the next step
    ControlPlan next_warm_start;    ///< plan shifted one step, last entry duplicated
    SolveResult solve;
};

/// Forecast window of length n starting at t. Perfect mode reads the series
/// and holds the last sample past its end; persistence mode holds inputs[t].
inline std::vector<LmInputs> forecast_window(std::span<const LmInputs> inputs, std::size_t t, std::size_t n,
                                             ForecastMode mode) {
    if (t >= inputs.size()) throw UsageError("forecast_window: start beyond the series");
    std::vector<LmInputs> w(n);
    for (std::size_t k = 0; k < n; ++k) {
        const std::size_t idx = mode == ForecastMode::persistence ? t : std::min(t + k, inputs.size() - 1);
        w[k] = inputs[idx];
    }
    return w;
}

/// One controller step at time t. `applied` is the flow pair the plant is
/// realising at t (decided one step earlier); it is pinned as u(0) and the
/// horizon extends H steps beyond it. The plan entry for t+1 is converted to
/// openings under the predicted conditions at t+1.
inline RhcStep receding_horizon_controller(const LmState& state, std::span<const LmInputs> window,
                                           const ControlPlan& previous_plan, const ControlPair& applied,
                                           const OcpConfig& cfg, const LmParams& p,
                                           const act::ActuationTables& tables) {
    const std::size_t n = static_cast<std::size_t>(cfg.horizon) + 1;
    if (window.empty()) throw UsageError("receding_horizon_controller: empty forecast window");
    std::vector<LmInputs> fc(window.begin(), window.begin() + static_cast<std::ptrdiff_t>(std::min(n, window.size())));
    while (fc.size() < n) fc.push_back(fc.back());

    ControlPlan warm = previous_plan;
    if (warm.size() != n) warm.assign(n, applied);

    RhcStep step;
    step.solve = solve_mpc(state, fc, warm, cfg, p, applied, cfg.actuator_reach ? &tables : nullptr);

    // predicted conditions at k = 1
    step.planned = step.solve.effective[1];
    step.context = {fc[1].q_in5, step.solve.predicted_volume[0] / p.tank_area(), step.planned.g_outA, fc[1].q_in4};

    step.bypass = act::select_setpoint(act::Family::fill, step.planned.g_outA, step.context, tables);
    step.empty = act::select_setpoint(act::Family::empty, step.planned.g_emptA, step.context, tables);

    step.next_warm_start.assign(step.solve.plan.begin() + 1, step.solve.plan.end());
    step.next_warm_start.push_back(step.solve.plan.back());
    return step;
}

}  // namespace uds::ctl
