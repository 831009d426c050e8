#pragma once

// Rain scenarios as inflow time series for the four LM inlets, plus the
// synthetic storm generator used for the bundled fixtures.

#include "uds/errors.hpp"
#include "uds/lm_model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace uds {

/// Descriptive rain metadata. Carried through reports, never used to compute inflows.
struct RainMetadata {
    std::optional<double> precipitation_mm;
    std::optional<double> max_intensity_mm_h;
    std::optional<std::string> date;
    std::optional<std::string> duration;

    friend bool operator==(const RainMetadata&, const RainMetadata&) = default;
};

struct Scenario {
    std::string name;
    RainMetadata metadata;
    double dt = 300.0;  ///< s
    std::vector<LmInputs> inflows;

    std::size_t steps() const { return inflows.size(); }

    void validate() const {
        if (!(dt > 0.0) || !std::isfinite(dt)) throw SchemaError("scenario dt must be positive");
        if (inflows.empty()) throw SchemaError("scenario '" + name + "' has no samples");
        for (std::size_t k = 0; k < inflows.size(); ++k) {
            const auto& q = inflows[k];
            for (double v : {q.q_in4, q.q_in5, q.q_in6, q.q_md_mi}) {
                if (!std::isfinite(v) || v < 0.0) {
                    throw SchemaError("scenario '" + name + "' sample " + std::to_string(k) +
                                      " has a negative or non-finite flow");
                }
            }
        }
    }
};

/// Shape of a synthetic storm: dry-weather base flows plus triangular pulses
/// whose peaks scale with the rain's maximum intensity.
struct StormShape {
    double duration_h = 11.0;     ///< rain duration
    double tail_h = 3.0;          ///< dry recession appended after the rain
    double max_intensity_mm_h = 40.0;
    int pulses = 2;
    double dt = 300.0;

    LmInputs base{0.6, 0.4, 0.8, 2.5};
    /// m³/s of pulse peak per mm/h of maximum intensity, per inlet
    LmInputs peak_per_intensity{0.06, 0.13, 0.22, 0.05};
    double jitter = 0.1;  ///< relative amplitude jitter of each pulse
};

/// Deterministic for a given shape and seed.
inline Scenario synthetic_storm(const std::string& name, const StormShape& shape, std::uint64_t seed,
                                RainMetadata metadata = {}) {
    if (shape.pulses < 1) throw UsageError("synthetic_storm needs at least one pulse");
    Scenario sc;
    sc.name = name;
    sc.metadata = std::move(metadata);
    sc.dt = shape.dt;
    const auto rain_steps = static_cast<std::size_t>(std::lround(shape.duration_h * 3600.0 / shape.dt));
    const auto tail_steps = static_cast<std::size_t>(std::lround(shape.tail_h * 3600.0 / shape.dt));
    const std::size_t n = std::max<std::size_t>(1, rain_steps + tail_steps);
    sc.inflows.assign(n, shape.base);

    std::mt19937_64 rng(seed);
    auto unit = [&rng] { return static_cast<double>(rng() >> 11) * 0x1.0p-53; };

    // pulses are spread evenly over the rain period, first one the strongest
    const double slot = static_cast<double>(std::max<std::size_t>(rain_steps, 1)) / shape.pulses;
    for (int j = 0; j < shape.pulses; ++j) {
        const double strength = (j == 0 ? 1.0 : 0.55 + 0.35 * unit()) * (1.0 + shape.jitter * (2.0 * unit() - 1.0));
        const double centre = slot * (j + 0.35 + 0.3 * unit());
        const double half_width = std::max(2.0, slot * (0.25 + 0.1 * unit()));
        for (std::size_t k = 0; k < n; ++k) {
            const double w = std::max(0.0, 1.0 - std::abs(static_cast<double>(k) - centre) / half_width);
            if (w == 0.0) continue;
            const double peak = strength * shape.max_intensity_mm_h * w;
            auto& q = sc.inflows[k];
            q.q_in4 += peak * shape.peak_per_intensity.q_in4;
            q.q_in5 += peak * shape.peak_per_intensity.q_in5;
            q.q_in6 += peak * shape.peak_per_intensity.q_in6;
            q.q_md_mi += peak * shape.peak_per_intensity.q_md_mi;
        }
    }
    return sc;
}

/// All-zero inflows.
inline Scenario dry_scenario(std::size_t steps = 24, double dt = 300.0) {
    Scenario sc;
    sc.name = "dry";
    sc.metadata.precipitation_mm = 0.0;
    sc.metadata.max_intensity_mm_h = 0.0;
    sc.dt = dt;
    sc.inflows.assign(steps, LmInputs{});
    return sc;
}

/// Stand-in for the 11-hour validation event.
inline Scenario storm_fixture() {
    StormShape shape;
    shape.duration_h = 11.0;
    shape.tail_h = 0.0;
    shape.max_intensity_mm_h = 40.0;
    shape.pulses = 3;
    RainMetadata meta;
    meta.precipitation_mm = 21.9;
    meta.max_intensity_mm_h = 40.0;
    meta.date = "synthetic";
    meta.duration = "11h";
    return synthetic_storm("storm_fixture", shape, 20241012, meta);
}

struct CalibrationRain {
    double precipitation_mm;
    double max_intensity_mm_h;
    const char* date;
    const char* duration;
    double duration_h;
};

/// The six calibration rains (precipitation, peak intensity, date, duration).
inline constexpr CalibrationRain kCalibrationRains[] = {
    {17.0, 31.2, "2016-10-22", "10h 10min", 10.0 + 10.0 / 60.0},
    {35.8, 76.8, "2017-01-09", "17h 20min", 17.0 + 20.0 / 60.0},
    {23.6, 50.4, "2017-02-07", "5h 35 min", 5.0 + 35.0 / 60.0},
    {15.4, 33.6, "2017-12-12", "3h 50 min", 3.0 + 50.0 / 60.0},
    {21.3, 36.0, "2018-03-04", "13h 45 min", 13.0 + 45.0 / 60.0},
    {19.4, 60.0, "2018-03-10", "1h 5 min", 1.0 + 5.0 / 60.0},
};

/// Synthetic inflows shaped after one of the calibration rains' metadata.
inline Scenario calibration_scenario(const CalibrationRain& rain, std::uint64_t seed = 1) {
    StormShape shape;
    shape.duration_h = rain.duration_h;
    shape.tail_h = 2.0;
    shape.max_intensity_mm_h = rain.max_intensity_mm_h;
    shape.pulses = rain.duration_h > 10.0 ? 3 : (rain.duration_h > 4.0 ? 2 : 1);
    RainMetadata meta;
    meta.precipitation_mm = rain.precipitation_mm;
    meta.max_intensity_mm_h = rain.max_intensity_mm_h;
    meta.date = rain.date;
    meta.duration = rain.duration;
    return synthetic_storm(std::string("rain_") + rain.date, shape, seed, meta);
}

}  // namespace uds
