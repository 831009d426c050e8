#pragma once

// Conceptual hydraulic primitives shared by every drainage model: junction
// mass balance, storage tank dynamics with overflow, and capacity-limited
// splits at treatment plants and overflow points.

#include "uds/errors.hpp"

#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <span>
#include <sstream>
#include <string>
#include <vector>

namespace uds {

/// Flow rate in m³/s.
using Flow = double;

/// Absolute tolerance for flow comparisons in bound checks, m³/s.
inline constexpr double kFlowTolerance = 1e-9;

/// Sampling interval in seconds. Always strictly positive and finite.
class StepInterval {
public:
    explicit StepInterval(double seconds) : seconds_(seconds) {
        if (!(seconds > 0.0) || !std::isfinite(seconds)) {
            throw DomainError("step interval must be positive and finite, got " + std::to_string(seconds));
        }
    }

    double seconds() const noexcept { return seconds_; }

    friend bool operator==(StepInterval, StepInterval) = default;

private:
    double seconds_;
};

struct TankParams {
    double v_max;      ///< m³
    Flow q_in_max;     ///< m³/s
    Flow q_out_max;    ///< m³/s

    void validate() const {
        if (!(v_max > 0.0 && q_in_max > 0.0 && q_out_max > 0.0) ||
            !std::isfinite(v_max) || !std::isfinite(q_in_max) || !std::isfinite(q_out_max)) {
            throw DomainError("tank parameters must be strictly positive and finite");
        }
    }
};

struct TankState {
    double volume = 0.0;  ///< m³
};

struct TankStepResult {
    TankState state;
    Flow cso = 0.0;        ///< overflow released this step, m³/s
    double deficit = 0.0;  ///< volume added by the lower clamp at 0, m³
};

struct SplitResult {
    Flow out = 0.0;
    Flow cso = 0.0;
};

namespace detail {

inline void require_flow(Flow q, const char* name) {
    if (!std::isfinite(q) || q < 0.0) {
        std::ostringstream os;
        os << name << " must be finite and nonnegative, got " << q;
        throw DomainError(os.str());
    }
}

}  // namespace detail

/// Single-outflow junction: the outflow equals the sum of the inflows.
inline Flow junction_balance(std::span<const Flow> inflows) {
    Flow total = 0.0;
    for (Flow q : inflows) {
        detail::require_flow(q, "junction inflow");
        total += q;
    }
    return total;
}

inline Flow junction_balance(std::initializer_list<Flow> inflows) {
    return junction_balance(std::span<const Flow>(inflows.begin(), inflows.size()));
}

/// One explicit step of the storage tank mass balance. Water above v_max
/// leaves as overflow; the committed volume is clamped to [0, v_max].
inline TankStepResult tank_step(TankState state, Flow inflow, Flow outflow, StepInterval dt,
                                const TankParams& params) {
    params.validate();
    const double h = dt.seconds();

    std::vector<std::string> violated;
    if (!std::isfinite(state.volume) || state.volume < 0.0 || state.volume > params.v_max) {
        violated.push_back("0 <= volume <= v_max");
    }
    if (!std::isfinite(inflow) || inflow < -kFlowTolerance) violated.push_back("inflow >= 0");
    if (inflow > params.q_in_max + kFlowTolerance) violated.push_back("inflow <= q_in_max");
    if (!std::isfinite(outflow) || outflow < -kFlowTolerance) violated.push_back("outflow >= 0");
    if (outflow > params.q_out_max + kFlowTolerance) violated.push_back("outflow <= q_out_max");
    if (outflow > state.volume / h + inflow + kFlowTolerance) violated.push_back("outflow <= volume/dt + inflow");
    if (!violated.empty()) {
        std::ostringstream os;
        os << "tank_step bound violation:";
        for (const auto& v : violated) os << ' ' << v << ';';
        throw DomainError(os.str());
    }

    const double unclamped = state.volume + h * (inflow - outflow);
    TankStepResult r;
    if (unclamped > params.v_max) {
        r.state.volume = params.v_max;
        r.cso = (unclamped - params.v_max) / h;
    } else if (unclamped < 0.0) {
        r.state.volume = 0.0;
        r.deficit = -unclamped;
    } else {
        r.state.volume = unclamped;
    }
    return r;
}

/// Capacity-limited element: q_out = min(inflow, q_max), the rest overflows.
inline SplitResult capacity_split(Flow inflow, Flow q_max) {
    detail::require_flow(inflow, "capacity_split inflow");
    if (!(q_max > 0.0) || !std::isfinite(q_max)) {
        throw DomainError("capacity_split q_max must be positive and finite");
    }
    SplitResult r;
    r.out = std::min(inflow, q_max);
    r.cso = inflow - r.out;
    return r;
}

}  // namespace uds
