#pragma once

// Flow/setpoint conversion for the two tank actuators. Each discrete orifice
// opening has its own fitted function predicting the flow it produces; an
// optimised flow is mapped back to an opening by bracketing and linear
// interpolation over the grid.

#include "uds/errors.hpp"
#include "uds/hydraulics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

namespace uds::act {

struct SetpointGrid {
    std::vector<double> openings;  // percent

    static SetpointGrid tenths() {
        SetpointGrid g;
        for (int k = 0; k <= 10; ++k) g.openings.push_back(10.0 * k);
        return g;
    }

    std::size_t size() const { return openings.size(); }

    void validate() const {
        if (openings.size() < 2) throw SchemaError("setpoint grid needs at least 2 openings");
        if (openings.front() != 0.0 || openings.back() != 100.0) {
            throw SchemaError("setpoint grid must start at 0 and end at 100");
        }
        for (std::size_t i = 1; i < openings.size(); ++i) {
            if (!(openings[i] > openings[i - 1])) throw SchemaError("setpoint grid must be strictly increasing");
        }
    }

    /// Grid index of an exact opening, if it is on the grid.
    std::optional<std::size_t> index_of(double opening) const {
        for (std::size_t i = 0; i < openings.size(); ++i) {
            if (openings[i] == opening) return i;
        }
        return std::nullopt;
    }

    friend bool operator==(const SetpointGrid&, const SetpointGrid&) = default;
};

/// Bypass row: linear below the discontinuity p, quadratic-plus-log above.
struct FillRow {
    double m = 0, x = 0, y = 0, p = 0;
    double a = 0, b = 0, c = 0, d = 0, e = 0;

    double linear(double q) const { return m * (q - x) + y; }
    double saturation(double q) const {
        double v = a * q * q + b * q + c;
        if (e > 0.0 && q > 0.0) v += d * std::log(e * q);
        return v;
    }
    double raw(double q) const { return q < p ? linear(q) : saturation(q); }

    friend bool operator==(const FillRow&, const FillRow&) = default;
};

/// Emptying row: quadratic in tank depth plus linear in bypass and Q_in4.
struct EmptyRow {
    double f = 0, g = 0, h = 0, r = 0, s = 0;

    double raw(double depth, double g_outA, double q_in4) const {
        return f * depth * depth + g * depth + h * g_outA + r * q_in4 + s;
    }

    friend bool operator==(const EmptyRow&, const EmptyRow&) = default;
};

struct ActuationTables {
    SetpointGrid grid = SetpointGrid::tenths();
    std::vector<FillRow> fill;
    std::vector<EmptyRow> empty;

    void validate() const {
        grid.validate();
        if (fill.size() != grid.size() || empty.size() != grid.size()) {
            throw SchemaError("actuation tables need one fill and one empty row per grid opening");
        }
        for (const auto& r : fill) {
            for (double v : {r.m, r.x, r.y, r.p, r.a, r.b, r.c, r.d, r.e}) {
                if (!std::isfinite(v)) throw SchemaError("fill conversion row has a non-finite entry");
            }
        }
        for (const auto& r : empty) {
            for (double v : {r.f, r.g, r.h, r.r, r.s}) {
                if (!std::isfinite(v)) throw SchemaError("empty conversion row has a non-finite entry");
            }
        }
    }

    friend bool operator==(const ActuationTables&, const ActuationTables&) = default;
};

/// Parameters for the Abroñigales bypass and emptying orifices at 0, 10, ..., 100 %.
inline ActuationTables default_tables() {
    ActuationTables t;
    const double m[] = {0, 0.59, 0.93, 0.94, 1.04, 1.05, 1.10, 1.10, 1.06, 1.09, 1.08};
    const double y[] = {0.10, 0.10, 0.17, 0.21, 0.24, 0.26, 0.26, 0.26, 0.26, 0.26, 0.26};
    const double p[] = {0, 0.90, 1.10, 1.50, 1.80, 2.20, 2.50, 2.90, 3.40, 3.65, 4.00};
    const double a[] = {0, 5e-6, 3e-5, -2e-5, -9e-5, -2e-4, -9e-5, -2e-4, -6e-4, -3e-4, 8e-6};
    const double b[] = {0, 6e-4, 6e-4, 4e-3, 8e-3, 1e-2, 9e-3, 2e-2, 4e-2, 2e-2, -7e-3};
    const double c[] = {0, 0.40, 0.84, 1.32, 1.86, 2.18, 6.10, 2.86, 3.13, 11.20, 21.19};
    const double d[] = {0, 0.01, 0.02, 0.04, 0.03, 0.03, 0.08, 0.05, -8e-3, 0.20, 0.42};
    const double e[] = {0.3, 5.3e3, 1.5e2, 1.80, 0.18, 9.50, 0, 64.1, 0, 0, 0};
    const double f[] = {0, -0.00, -0.01, -0.02, -0.03, -0.03, -0.04, -0.05, -0.06, -0.04, -0.05};
    const double g[] = {0, 0.12, 0.30, 0.47, 0.62, 0.78, 0.93, 1.09, 1.25, 1.11, 1.29};
    const double h[] = {0, -0.02, -0.04, -0.07, -0.10, -0.12, -0.15, -0.18, -0.20, -0.23, -0.27};
    const double r[] = {0, -0.02, -0.03, -0.05, -0.07, -0.10, -0.13, -0.17, -0.21, -0.24, -0.28};
    const double s[] = {0, 0.24, 0.29, 0.36, 0.46, 0.56, 0.66, 0.78, 0.88, 1.66, 1.71};
    for (int i = 0; i <= 10; ++i) {
        t.fill.push_back({m[i], 0.26, y[i], p[i], a[i], b[i], c[i], d[i], e[i]});
        t.empty.push_back({f[i], g[i], h[i], r[i], s[i]});
    }
    return t;
}

enum class Family { fill, empty };

inline const char* family_name(Family f) { return f == Family::fill ? "fill" : "empty"; }

/// Network conditions the conversion functions depend on.
struct ConversionContext {
    Flow q_in5 = 0.0;    ///< fill input
    double d_abro = 0.0; ///< tank depth, m
    Flow g_outA = 0.0;
    Flow q_in4 = 0.0;

    friend bool operator==(const ConversionContext&, const ConversionContext&) = default;
};

namespace detail {

inline void check_index(std::size_t i, const ActuationTables& t) {
    if (i >= t.grid.size()) {
        throw DomainError("grid index " + std::to_string(i) + " outside setpoint grid of size " +
                          std::to_string(t.grid.size()));
    }
}

}  // namespace detail

/// Bypass flow G_outA at grid index i. Negative values are raised to 0; the
/// cap at Q_in5 is left to the plant's feasibility clamp.
inline Flow fill_flow(std::size_t i, Flow q_in5, const ActuationTables& t) {
    detail::check_index(i, t);
    uds::detail::require_flow(q_in5, "fill_flow q_in5");
    return std::max(0.0, t.fill[i].raw(q_in5));
}

/// Tank emptying flow G_emptA at grid index i, raised to 0 if negative.
inline Flow empty_flow(std::size_t i, double d_abro, Flow g_outA, Flow q_in4, const ActuationTables& t) {
    detail::check_index(i, t);
    uds::detail::require_flow(d_abro, "empty_flow d_abro");
    uds::detail::require_flow(g_outA, "empty_flow g_outA");
    uds::detail::require_flow(q_in4, "empty_flow q_in4");
    return std::max(0.0, t.empty[i].raw(d_abro, g_outA, q_in4));
}

/// Jump of row i's raw fill function at its discontinuity point,
/// saturation(p) − linear(p). Zero when p = 0 (linear branch unreachable).
inline double fill_branch_jump(std::size_t i, const ActuationTables& t) {
    detail::check_index(i, t);
    const FillRow& r = t.fill[i];
    if (r.p <= 0.0) return 0.0;
    return r.saturation(r.p) - r.linear(r.p);
}

inline Flow conversion(Family fam, std::size_t i, const ConversionContext& ctx, const ActuationTables& t) {
    return fam == Family::fill ? fill_flow(i, ctx.q_in5, t) : empty_flow(i, ctx.d_abro, ctx.g_outA, ctx.q_in4, t);
}

/// Flow at any opening in [0, 100]: linear in opening between the two
/// neighbouring grid functions evaluated at the same context.
inline Flow conversion_at(Family fam, double opening, const ConversionContext& ctx, const ActuationTables& t) {
    const auto& o = t.grid.openings;
    if (!(opening >= o.front() && opening <= o.back())) {
        throw DomainError("opening " + std::to_string(opening) + " outside [0, 100]");
    }
    if (auto i = t.grid.index_of(opening)) return conversion(fam, *i, ctx, t);
    const auto upper = static_cast<std::size_t>(std::upper_bound(o.begin(), o.end(), opening) - o.begin());
    const std::size_t lower = upper - 1;
    const double w = (opening - o[lower]) / (o[upper] - o[lower]);
    const double lo = conversion(fam, lower, ctx, t);
    const double hi = conversion(fam, upper, ctx, t);
    return lo + w * (hi - lo);
}

struct SetpointDecision {
    double opening = 0.0;  ///< percent
    std::size_t lower = 0; ///< bracketing grid indices, lower ≤ upper
    std::size_t upper = 0;
    Flow target = 0.0;
    Flow predicted = 0.0;  ///< conversion value at the chosen opening
    bool saturated = false;///< no bracket existed; nearest grid value taken

    friend bool operator==(const SetpointDecision&, const SetpointDecision&) = default;
};

/// Opening whose conversion value matches the target flow. All grid values are
/// evaluated under the context; an exact grid hit returns that opening, else the
/// adjacent pair bracketing the target whose nearer endpoint is closest (ties to
/// the lower opening) is interpolated linearly. Unbracketable targets take the
/// closest grid value and set the saturation flag.
inline SetpointDecision select_setpoint(Family fam, Flow target, const ConversionContext& ctx,
                                        const ActuationTables& t) {
    uds::detail::require_flow(target, "select_setpoint target");
    const std::size_t n = t.grid.size();
    std::vector<double> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = conversion(fam, i, ctx, t);

    SetpointDecision dec;
    dec.target = target;
    const auto& o = t.grid.openings;

    for (std::size_t i = 0; i < n; ++i) {
        if (v[i] == target) {
            dec.opening = o[i];
            dec.lower = dec.upper = i;
            dec.predicted = v[i];
            return dec;
        }
    }

    double best = std::numeric_limits<double>::infinity();
    std::optional<std::size_t> bracket;
    for (std::size_t i = 0; i + 1 < n; ++i) {
        const double lo = std::min(v[i], v[i + 1]);
        const double hi = std::max(v[i], v[i + 1]);
        if (!(lo < target && target < hi)) continue;
        const double dist = std::min(std::abs(v[i] - target), std::abs(v[i + 1] - target));
        if (dist < best) {
            best = dist;
            bracket = i;
        }
    }

    if (bracket) {
        const std::size_t i = *bracket;
        const double w = (target - v[i]) / (v[i + 1] - v[i]);
        dec.lower = i;
        dec.upper = i + 1;
        dec.opening = std::clamp(o[i] + w * (o[i + 1] - o[i]), o[i], o[i + 1]);
        dec.predicted = conversion_at(fam, dec.opening, ctx, t);
        return dec;
    }

    std::size_t closest = 0;
    for (std::size_t i = 1; i < n; ++i) {
        if (std::abs(v[i] - target) < std::abs(v[closest] - target)) closest = i;
    }
    dec.opening = o[closest];
    dec.lower = dec.upper = closest;
    dec.predicted = v[closest];
    dec.saturated = true;
    return dec;
}

}  // namespace uds::act
