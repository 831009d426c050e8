#pragma once

// File formats: scenario CSV plus metadata sidecar, the application config
// document, run reports, fit datasets and fit results.
//
// Every number written by this header goes through format_number (shortest
// round-trip form) or a fixed printf precision, so reports are byte-stable.

#include "uds/closed_loop.hpp"
#include "uds/datafit.hpp"
#include "uds/errors.hpp"

#include <json.hpp>

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <istream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

namespace uds::io {

using json = nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------- numbers

inline std::string format_number(double v) {
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

inline std::string format_fixed(double v, int decimals) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
    std::string s(buf);
    // never print a signed zero
    if (s.front() == '-' && s.find_first_not_of("-0.") == std::string::npos) s.erase(0, 1);
    return s;
}

/// "-23.9%", "+7.9%", "0.0%"; "n/a" when the baseline is zero and the candidate is not.
inline std::string format_percent(double delta) {
    if (!std::isfinite(delta)) return "n/a";
    std::string s = format_fixed(delta, 1);
    if (s != "0.0" && s.front() != '-') s.insert(0, "+");
    return s + "%";
}

inline std::optional<double> parse_number(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t')) s.remove_suffix(1);
    if (!s.empty() && s.front() == '+') s.remove_prefix(1);
    double v = 0.0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (s.empty() || r.ec != std::errc{} || r.ptr != s.data() + s.size() || !std::isfinite(v)) return std::nullopt;
    return v;
}

inline std::uint64_t fnv1a64(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

// ---------------------------------------------------------------- files

inline std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw UsageError("cannot open '" + path.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
    out << text;
    if (!out) throw std::runtime_error("write failed for '" + path.string() + "'");
}

// ---------------------------------------------------------------- CSV

/// Numeric table: one header row of unique names, every other row all numbers.
struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<double>> rows;
    std::vector<int> lines;  ///< source line of each row, 1-based

    std::optional<std::size_t> column(std::string_view name) const {
        for (std::size_t i = 0; i < header.size(); ++i) {
            if (header[i] == name) return i;
        }
        return std::nullopt;
    }
};

namespace detail {

inline std::vector<std::string> split_fields(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    out.push_back(cur);
    return out;
}

inline std::string trim(std::string s) {
    const auto b = s.find_first_not_of(" \t");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t");
    return s.substr(b, e - b + 1);
}

}  // namespace detail

/// Comma separated, '.' decimal, no quoting. Blank lines are skipped.
/// Errors carry the 1-based line and field column.
inline CsvTable parse_csv(std::istream& in) {
    CsvTable t;
    std::string line;
    int lineno = 0;
    bool have_header = false;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (lineno == 1 && line.rfind("\xEF\xBB\xBF", 0) == 0) line.erase(0, 3);
        if (detail::trim(line).empty()) continue;
        auto fields = detail::split_fields(line);
        if (!have_header) {
            for (std::size_t i = 0; i < fields.size(); ++i) {
                std::string name = detail::trim(fields[i]);
                if (name.empty()) throw SchemaError("empty column name", lineno, static_cast<int>(i + 1));
                for (const auto& prev : t.header) {
                    if (prev == name) throw SchemaError("duplicate column '" + name + "'", lineno, static_cast<int>(i + 1));
                }
                t.header.push_back(std::move(name));
            }
            have_header = true;
            continue;
        }
        if (fields.size() != t.header.size()) {
            throw SchemaError("expected " + std::to_string(t.header.size()) + " fields, found " +
                                  std::to_string(fields.size()),
                              lineno, static_cast<int>(std::min(fields.size(), t.header.size()) + 1));
        }
        std::vector<double> row;
        row.reserve(fields.size());
        for (std::size_t i = 0; i < fields.size(); ++i) {
            const auto v = parse_number(fields[i]);
            if (!v) {
                throw SchemaError("column '" + t.header[i] + "': '" + detail::trim(fields[i]) + "' is not a finite number",
                                  lineno, static_cast<int>(i + 1));
            }
            row.push_back(*v);
        }
        t.rows.push_back(std::move(row));
        t.lines.push_back(lineno);
    }
    if (!have_header) throw SchemaError("empty CSV, header row expected", 1, 1);
    return t;
}

inline CsvTable parse_csv(const std::string& text) {
    std::istringstream in(text);
    return parse_csv(in);
}

// ---------------------------------------------------------------- JSON helpers

namespace detail {

/// Line and column of a byte offset, both 1-based.
inline std::pair<int, int> locate(const std::string& text, std::size_t byte) {
    int line = 1, col = 1;
    for (std::size_t i = 0; i < text.size() && i + 1 < byte; ++i) {
        if (text[i] == '\n') {
            ++line;
            col = 1;
        } else {
            ++col;
        }
    }
    return {line, col};
}

inline json parse_json(const std::string& text) {
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        const auto [line, col] = locate(text, e.byte);
        std::string msg = e.what();
        if (const auto p = msg.find("parse error"); p != std::string::npos) msg = msg.substr(p);
        throw SchemaError("invalid JSON: " + msg, line, col);
    }
}

inline std::string join(const std::string& path, std::string_view key) {
    return path.empty() ? std::string(key) : path + "." + std::string(key);
}

/// Objects only; every key must be one of `allowed`.
inline void expect_keys(const json& j, const std::string& path, std::initializer_list<std::string_view> allowed) {
    if (!j.is_object()) throw SchemaError((path.empty() ? std::string("document") : path) + ": expected an object");
    for (const auto& [key, value] : j.items()) {
        bool ok = false;
        for (auto a : allowed) ok = ok || key == a;
        if (!ok) throw SchemaError("unknown key '" + join(path, key) + "'");
    }
}

inline void require(const json& j, const std::string& path, std::initializer_list<std::string_view> keys) {
    for (auto k : keys) {
        if (!j.contains(k)) throw SchemaError("missing key '" + join(path, k) + "'");
    }
}

inline void read(const json& j, std::string_view key, const std::string& path, double& out) {
    const auto it = j.find(key);
    if (it == j.end()) return;
    if (!it->is_number()) throw SchemaError(join(path, key) + ": expected a number");
    out = it->get<double>();
}

inline void read(const json& j, std::string_view key, const std::string& path, int& out) {
    const auto it = j.find(key);
    if (it == j.end()) return;
    if (!it->is_number_integer()) throw SchemaError(join(path, key) + ": expected an integer");
    const auto v = it->get<long long>();
    if (v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max()) {
        throw SchemaError(join(path, key) + ": integer out of range");
    }
    out = static_cast<int>(v);
}

inline void read(const json& j, std::string_view key, const std::string& path, std::uint64_t& out) {
    const auto it = j.find(key);
    if (it == j.end()) return;
    if (!it->is_number_unsigned()) throw SchemaError(join(path, key) + ": expected a non-negative integer");
    out = it->get<std::uint64_t>();
}

inline void read(const json& j, std::string_view key, const std::string& path, bool& out) {
    const auto it = j.find(key);
    if (it == j.end()) return;
    if (!it->is_boolean()) throw SchemaError(join(path, key) + ": expected true or false");
    out = it->get<bool>();
}

inline void read(const json& j, std::string_view key, const std::string& path, std::string& out) {
    const auto it = j.find(key);
    if (it == j.end()) return;
    if (!it->is_string()) throw SchemaError(join(path, key) + ": expected a string");
    out = it->get<std::string>();
}

inline void read(const json& j, std::string_view key, const std::string& path, std::optional<double>& out) {
    const auto it = j.find(key);
    if (it == j.end()) return;
    if (it->is_null()) {
        out.reset();
        return;
    }
    double v = 0.0;
    read(j, key, path, v);
    out = v;
}

inline void read(const json& j, std::string_view key, const std::string& path, std::optional<std::string>& out) {
    const auto it = j.find(key);
    if (it == j.end()) return;
    if (it->is_null()) {
        out.reset();
        return;
    }
    std::string v;
    read(j, key, path, v);
    out = v;
}

inline const json* array_at(const json& j, std::string_view key, const std::string& path) {
    const auto it = j.find(key);
    if (it == j.end()) return nullptr;
    if (!it->is_array()) throw SchemaError(join(path, key) + ": expected an array");
    return &*it;
}

inline std::string index_path(const std::string& path, std::string_view key, std::size_t i) {
    return join(path, key) + "[" + std::to_string(i) + "]";
}

inline json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

}  // namespace detail

// ---------------------------------------------------------------- scenarios

inline constexpr std::array<const char*, 5> kScenarioColumns{"time_s", "q_in4", "q_in5", "q_in6", "q_md_mi"};

inline json metadata_json(const std::string& name, const RainMetadata& m) {
    json j = json::object();
    j["name"] = name;
    j["precipitation_mm"] = detail::optional_json(m.precipitation_mm);
    j["max_intensity_mm_h"] = detail::optional_json(m.max_intensity_mm_h);
    j["date"] = m.date ? json(*m.date) : json(nullptr);
    j["duration"] = m.duration ? json(*m.duration) : json(nullptr);
    return j;
}

inline void read_metadata(const json& j, std::string& name, RainMetadata& m) {
    detail::expect_keys(j, "", {"name", "precipitation_mm", "max_intensity_mm_h", "date", "duration"});
    detail::read(j, "name", "", name);
    detail::read(j, "precipitation_mm", "", m.precipitation_mm);
    detail::read(j, "max_intensity_mm_h", "", m.max_intensity_mm_h);
    detail::read(j, "date", "", m.date);
    detail::read(j, "duration", "", m.duration);
}

/// Scenario from CSV text. Time must increase in uniform steps; dt is their spacing.
inline Scenario parse_scenario_csv(const std::string& text, std::string name) {
    const CsvTable t = parse_csv(text);
    for (const char* col : kScenarioColumns) {
        if (!t.column(col)) throw SchemaError(std::string("missing column '") + col + "'", 1, 0);
    }
    for (std::size_t i = 0; i < t.header.size(); ++i) {
        bool known = false;
        for (const char* col : kScenarioColumns) known = known || t.header[i] == col;
        if (!known) throw SchemaError("unexpected column '" + t.header[i] + "'", 1, static_cast<int>(i + 1));
    }
    if (t.rows.size() < 2) throw SchemaError("scenario needs at least 2 samples to fix the time step", 2, 0);

    const std::size_t ct = *t.column("time_s");
    const std::size_t c4 = *t.column("q_in4"), c5 = *t.column("q_in5"), c6 = *t.column("q_in6"),
                      cm = *t.column("q_md_mi");
    Scenario sc;
    sc.name = std::move(name);
    sc.dt = t.rows[1][ct] - t.rows[0][ct];
    if (!(sc.dt > 0.0)) throw SchemaError("time_s must be strictly increasing", t.lines[1], static_cast<int>(ct + 1));
    const double t0 = t.rows[0][ct];
    for (std::size_t k = 0; k < t.rows.size(); ++k) {
        const auto& r = t.rows[k];
        const double expected = t0 + static_cast<double>(k) * sc.dt;
        if (std::abs(r[ct] - expected) > 1e-6 * sc.dt) {
            throw SchemaError(k > 0 && r[ct] <= t.rows[k - 1][ct] ? "time_s must be strictly increasing"
                                                                  : "time_s must be uniformly spaced",
                              t.lines[k], static_cast<int>(ct + 1));
        }
        const LmInputs in{r[c4], r[c5], r[c6], r[cm]};
        const std::size_t cols[] = {c4, c5, c6, cm};
        for (std::size_t c : cols) {
            if (r[c] < 0.0) {
                throw SchemaError("column '" + t.header[c] + "': flows must be >= 0", t.lines[k], static_cast<int>(c + 1));
            }
        }
        sc.inflows.push_back(in);
    }
    sc.validate();
    return sc;
}

/// Reads `<stem>.csv` and, when present, the sidecar `<stem>.json`.
inline Scenario load_scenario(const fs::path& csv) {
    Scenario sc = parse_scenario_csv(read_text(csv), csv.stem().string());
    fs::path sidecar = csv;
    sidecar.replace_extension(".json");
    if (fs::exists(sidecar)) read_metadata(detail::parse_json(read_text(sidecar)), sc.name, sc.metadata);
    return sc;
}

inline std::string scenario_csv(const Scenario& sc) {
    std::string out = "time_s,q_in4,q_in5,q_in6,q_md_mi\n";
    for (std::size_t k = 0; k < sc.inflows.size(); ++k) {
        const auto& q = sc.inflows[k];
        out += format_number(static_cast<double>(k) * sc.dt);
        for (double v : {q.q_in4, q.q_in5, q.q_in6, q.q_md_mi}) out += "," + format_number(v);
        out += "\n";
    }
    return out;
}

/// Writes `<dir>/<stem>.csv` and its sidecar; returns the CSV path.
inline fs::path save_scenario(const Scenario& sc, const fs::path& dir, const std::string& stem) {
    const fs::path csv = dir / (stem + ".csv");
    write_text(csv, scenario_csv(sc));
    write_text(dir / (stem + ".json"), metadata_json(sc.name, sc.metadata).dump(2) + "\n");
    return csv;
}

/// The scenarios shipped under data/scenarios, keyed by file stem.
inline std::vector<std::pair<std::string, Scenario>> bundled_scenarios() {
    std::vector<std::pair<std::string, Scenario>> out;
    out.emplace_back("storm_fixture", storm_fixture());
    out.emplace_back("dry", dry_scenario());
    for (const auto& rain : kCalibrationRains) {
        Scenario sc = calibration_scenario(rain);
        std::string stem = sc.name;
        for (char& c : stem) {
            if (c == '-') c = '_';
        }
        out.emplace_back(stem, std::move(sc));
    }
    return out;
}

// ---------------------------------------------------------------- config

struct OutputConfig {
    std::string dir = "run";
    bool trace = false;  ///< also write solver_trace.csv for MPC runs

    friend bool operator==(const OutputConfig&, const OutputConfig&) = default;
};

struct AppConfig {
    loop::LoopConfig loop;
    OutputConfig output;
};

namespace detail {

inline json quad_json(const QuadraticCoeffs& c) {
    return {{"quadratic", c.quadratic}, {"linear", c.linear}, {"constant", c.constant}};
}
inline json n12_json(const N12Coeffs& c) {
    return {{"q1216_sq", c.q1216_sq}, {"q_mi_sq", c.q_mi_sq}, {"q1216", c.q1216}, {"q_mi", c.q_mi}};
}

inline json rules_json(const std::vector<ctl::RbcRule>& rules) {
    json arr = json::array();
    for (const auto& r : rules) {
        json when = json::array();
        for (const auto& c : r.when) {
            when.push_back({{"variable", ctl::rbc_variable_name(c.variable)},
                            {"op", ctl::rbc_op_name(c.op)},
                            {"value", c.value}});
        }
        json jr = {{"when", when}, {"track_spare_capacity", r.track_spare_capacity}};
        if (!r.track_spare_capacity) jr["opening"] = r.opening;
        arr.push_back(jr);
    }
    return arr;
}

inline void read_quad(const json& j, std::string_view key, const std::string& path, QuadraticCoeffs& c) {
    const auto it = j.find(key);
    if (it == j.end()) return;
    const std::string p = join(path, key);
    expect_keys(*it, p, {"quadratic", "linear", "constant"});
    read(*it, "quadratic", p, c.quadratic);
    read(*it, "linear", p, c.linear);
    read(*it, "constant", p, c.constant);
}

inline void read_n12(const json& j, std::string_view key, const std::string& path, N12Coeffs& c) {
    const auto it = j.find(key);
    if (it == j.end()) return;
    const std::string p = join(path, key);
    expect_keys(*it, p, {"q1216_sq", "q_mi_sq", "q1216", "q_mi"});
    read(*it, "q1216_sq", p, c.q1216_sq);
    read(*it, "q_mi_sq", p, c.q_mi_sq);
    read(*it, "q1216", p, c.q1216);
    read(*it, "q_mi", p, c.q_mi);
}

inline void read_model(const json& j, LmParams& m) {
    const std::string p = "model";
    expect_keys(j, p, {"v_abro_max", "tank_depth_max", "tank_inflow_max", "tank_outflow_max", "la_gavia_cap",
                       "la_gavia_biol_cap", "sur_cap", "q1216", "q_mi2", "q_cso5_1", "l7", "p7"});
    read(j, "v_abro_max", p, m.v_abro_max);
    read(j, "tank_depth_max", p, m.tank_depth_max);
    read(j, "tank_inflow_max", p, m.tank_inflow_max);
    read(j, "tank_outflow_max", p, m.tank_outflow_max);
    read(j, "la_gavia_cap", p, m.la_gavia_cap);
    read(j, "la_gavia_biol_cap", p, m.la_gavia_biol_cap);
    read(j, "sur_cap", p, m.sur_cap);
    read_quad(j, "q1216", p, m.q1216);
    read_n12(j, "q_mi2", p, m.q_mi2);
    read_n12(j, "q_cso5_1", p, m.q_cso5_1);
    if (const auto it = j.find("l7"); it != j.end()) {
        const std::string q = p + ".l7";
        expect_keys(*it, q, {"q_mi2", "q_cso5", "q1216", "q_mi", "constant"});
        read(*it, "q_mi2", q, m.l7.q_mi2);
        read(*it, "q_cso5", q, m.l7.q_cso5);
        read(*it, "q1216", q, m.l7.q1216);
        read(*it, "q_mi", q, m.l7.q_mi);
        read(*it, "constant", q, m.l7.constant);
    }
    if (const auto it = j.find("p7"); it != j.end()) {
        const std::string q = p + ".p7";
        expect_keys(*it, q, {"amplitude", "offset", "slope", "intercept", "floor"});
        read(*it, "amplitude", q, m.p7.amplitude);
        read(*it, "offset", q, m.p7.offset);
        read(*it, "slope", q, m.p7.slope);
        read(*it, "intercept", q, m.p7.intercept);
        read(*it, "floor", q, m.p7.floor);
    }
}

inline void read_actuation(const json& j, act::ActuationTables& t) {
    const std::string p = "actuation";
    expect_keys(j, p, {"grid", "fill", "empty"});
    if (const json* g = array_at(j, "grid", p)) {
        t.grid.openings.clear();
        for (std::size_t i = 0; i < g->size(); ++i) {
            if (!(*g)[i].is_number()) throw SchemaError(index_path(p, "grid", i) + ": expected a number");
            t.grid.openings.push_back((*g)[i].get<double>());
        }
    }
    if (const json* f = array_at(j, "fill", p)) {
        t.fill.clear();
        for (std::size_t i = 0; i < f->size(); ++i) {
            const std::string q = index_path(p, "fill", i);
            const json& r = (*f)[i];
            expect_keys(r, q, {"m", "x", "y", "p", "a", "b", "c", "d", "e"});
            require(r, q, {"m", "x", "y", "p", "a", "b", "c", "d", "e"});
            act::FillRow row;
            read(r, "m", q, row.m);
            read(r, "x", q, row.x);
            read(r, "y", q, row.y);
            read(r, "p", q, row.p);
            read(r, "a", q, row.a);
            read(r, "b", q, row.b);
            read(r, "c", q, row.c);
            read(r, "d", q, row.d);
            read(r, "e", q, row.e);
            t.fill.push_back(row);
        }
    }
    if (const json* e = array_at(j, "empty", p)) {
        t.empty.clear();
        for (std::size_t i = 0; i < e->size(); ++i) {
            const std::string q = index_path(p, "empty", i);
            const json& r = (*e)[i];
            expect_keys(r, q, {"f", "g", "h", "r", "s"});
            require(r, q, {"f", "g", "h", "r", "s"});
            act::EmptyRow row;
            read(r, "f", q, row.f);
            read(r, "g", q, row.g);
            read(r, "h", q, row.h);
            read(r, "r", q, row.r);
            read(r, "s", q, row.s);
            t.empty.push_back(row);
        }
    }
}

inline void read_ocp(const json& j, ctl::OcpConfig& c) {
    const std::string p = "ocp";
    expect_keys(j, p, {"horizon", "dt", "weights", "g_emptA_max", "forecast", "actuator_reach", "budget"});
    read(j, "horizon", p, c.horizon);
    read(j, "dt", p, c.dt);
    read(j, "g_emptA_max", p, c.g_emptA_max);
    read(j, "actuator_reach", p, c.actuator_reach);
    if (j.contains("forecast")) {
        std::string mode;
        read(j, "forecast", p, mode);
        if (mode == "perfect") c.forecast = ctl::ForecastMode::perfect;
        else if (mode == "persistence") c.forecast = ctl::ForecastMode::persistence;
        else throw SchemaError("ocp.forecast: expected \"perfect\" or \"persistence\", got \"" + mode + "\"");
    }
    if (const auto it = j.find("weights"); it != j.end()) {
        expect_keys(*it, "ocp.weights", {"cso", "wwtp", "smooth"});
        read(*it, "cso", "ocp.weights", c.weights.cso);
        read(*it, "wwtp", "ocp.weights", c.weights.wwtp);
        read(*it, "smooth", "ocp.weights", c.weights.smooth);
    }
    if (const auto it = j.find("budget"); it != j.end()) {
        const std::string q = "ocp.budget";
        expect_keys(*it, q, {"max_evaluations", "tolerance", "fd_step", "max_sweeps", "multistart"});
        read(*it, "max_evaluations", q, c.budget.max_evaluations);
        read(*it, "tolerance", q, c.budget.tolerance);
        read(*it, "fd_step", q, c.budget.fd_step);
        read(*it, "max_sweeps", q, c.budget.max_sweeps);
        read(*it, "multistart", q, c.budget.multistart);
    }
}

inline std::vector<ctl::RbcRule> read_rules(const json& arr, const std::string& path) {
    std::vector<ctl::RbcRule> rules;
    for (std::size_t i = 0; i < arr.size(); ++i) {
        const std::string q = path + "[" + std::to_string(i) + "]";
        const json& r = arr[i];
        expect_keys(r, q, {"when", "track_spare_capacity", "opening"});
        ctl::RbcRule rule;
        read(r, "track_spare_capacity", q, rule.track_spare_capacity);
        if (!rule.track_spare_capacity) require(r, q, {"opening"});
        read(r, "opening", q, rule.opening);
        if (const json* when = array_at(r, "when", q)) {
            for (std::size_t k = 0; k < when->size(); ++k) {
                const std::string w = q + ".when[" + std::to_string(k) + "]";
                const json& c = (*when)[k];
                expect_keys(c, w, {"variable", "op", "value"});
                require(c, w, {"variable", "op", "value"});
                std::string var, op;
                ctl::RbcCondition cond;
                read(c, "variable", w, var);
                read(c, "op", w, op);
                read(c, "value", w, cond.value);
                const auto v = ctl::rbc_variable_from_name(var);
                if (!v) throw SchemaError(w + ".variable: unknown observation '" + var + "'");
                const auto o = ctl::rbc_op_from_name(op);
                if (!o) throw SchemaError(w + ".op: unknown comparison '" + op + "'");
                cond.variable = *v;
                cond.op = *o;
                rule.when.push_back(cond);
            }
        }
        rules.push_back(std::move(rule));
    }
    return rules;
}

inline void read_openings(const json& j, const std::string& path, ctl::OpeningPair& o) {
    expect_keys(j, path, {"bypass", "empty"});
    read(j, "bypass", path, o.bypass);
    read(j, "empty", path, o.empty);
}

}  // namespace detail

inline json config_json(const AppConfig& cfg) {
    const auto& L = cfg.loop;
    const auto& m = L.model;
    json model = {
        {"v_abro_max", m.v_abro_max},
        {"tank_depth_max", m.tank_depth_max},
        {"tank_inflow_max", m.tank_inflow_max},
        {"tank_outflow_max", m.tank_outflow_max},
        {"la_gavia_cap", m.la_gavia_cap},
        {"la_gavia_biol_cap", m.la_gavia_biol_cap},
        {"sur_cap", m.sur_cap},
        {"q1216", detail::quad_json(m.q1216)},
        {"q_mi2", detail::n12_json(m.q_mi2)},
        {"q_cso5_1", detail::n12_json(m.q_cso5_1)},
        {"l7",
         {{"q_mi2", m.l7.q_mi2}, {"q_cso5", m.l7.q_cso5}, {"q1216", m.l7.q1216}, {"q_mi", m.l7.q_mi},
          {"constant", m.l7.constant}}},
        {"p7",
         {{"amplitude", m.p7.amplitude}, {"offset", m.p7.offset}, {"slope", m.p7.slope},
          {"intercept", m.p7.intercept}, {"floor", m.p7.floor}}},
    };
    json fill = json::array(), empty = json::array();
    for (const auto& r : L.tables.fill) {
        fill.push_back({{"m", r.m}, {"x", r.x}, {"y", r.y}, {"p", r.p}, {"a", r.a}, {"b", r.b}, {"c", r.c},
                        {"d", r.d}, {"e", r.e}});
    }
    for (const auto& r : L.tables.empty) {
        empty.push_back({{"f", r.f}, {"g", r.g}, {"h", r.h}, {"r", r.r}, {"s", r.s}});
    }
    const auto& o = L.ocp;
    json ocp = {
        {"horizon", o.horizon},
        {"dt", o.dt},
        {"weights", {{"cso", o.weights.cso}, {"wwtp", o.weights.wwtp}, {"smooth", o.weights.smooth}}},
        {"g_emptA_max", o.g_emptA_max},
        {"forecast", o.forecast == ctl::ForecastMode::perfect ? "perfect" : "persistence"},
        {"actuator_reach", o.actuator_reach},
        {"budget",
         {{"max_evaluations", o.budget.max_evaluations}, {"tolerance", o.budget.tolerance},
          {"fd_step", o.budget.fd_step}, {"max_sweeps", o.budget.max_sweeps},
          {"multistart", o.budget.multistart}}},
    };
    const auto& s = L.initial.state;
    return {
        {"model", model},
        {"actuation", {{"grid", L.tables.grid.openings}, {"fill", fill}, {"empty", empty}}},
        {"ocp", ocp},
        {"rbc", {{"bypass", detail::rules_json(L.rbc.bypass)}, {"empty", detail::rules_json(L.rbc.empty)}}},
        {"fixed", {{"bypass", L.fixed.bypass}, {"empty", L.fixed.empty}}},
        {"plant", {{"perturbation", L.plant.perturbation}, {"seed", L.plant.seed}}},
        {"initial",
         {{"v_abro", s.v_abro},
          {"l7_prev", s.l7_prev},
          {"u_prev", {{"g_outA", s.u_prev.g_outA}, {"g_emptA", s.u_prev.g_emptA}}},
          {"openings", {{"bypass", L.initial.openings.bypass}, {"empty", L.initial.openings.empty}}}}},
        {"output", {{"dir", cfg.output.dir}, {"trace", cfg.output.trace}}},
    };
}

/// Canonical text: sorted keys, two-space indent, trailing newline.
inline std::string config_text(const AppConfig& cfg) { return config_json(cfg).dump(2) + "\n"; }

/// Applies a (possibly partial) document over `base`. Scalars and objects merge
/// key by key; arrays (grid, table rows, rule lists) replace the whole list.
inline AppConfig apply_config(const json& j, AppConfig base = {}) {
    using namespace detail;
    expect_keys(j, "", {"model", "actuation", "ocp", "rbc", "fixed", "plant", "initial", "output"});
    auto& L = base.loop;
    if (const auto it = j.find("model"); it != j.end()) read_model(*it, L.model);
    if (const auto it = j.find("actuation"); it != j.end()) read_actuation(*it, L.tables);
    if (const auto it = j.find("ocp"); it != j.end()) read_ocp(*it, L.ocp);
    if (const auto it = j.find("rbc"); it != j.end()) {
        expect_keys(*it, "rbc", {"bypass", "empty"});
        if (const json* a = array_at(*it, "bypass", "rbc")) L.rbc.bypass = read_rules(*a, "rbc.bypass");
        if (const json* a = array_at(*it, "empty", "rbc")) L.rbc.empty = read_rules(*a, "rbc.empty");
    }
    if (const auto it = j.find("fixed"); it != j.end()) read_openings(*it, "fixed", L.fixed);
    if (const auto it = j.find("plant"); it != j.end()) {
        expect_keys(*it, "plant", {"perturbation", "seed"});
        read(*it, "perturbation", "plant", L.plant.perturbation);
        read(*it, "seed", "plant", L.plant.seed);
    }
    if (const auto it = j.find("initial"); it != j.end()) {
        const json& s = *it;
        expect_keys(s, "initial", {"v_abro", "l7_prev", "u_prev", "openings"});
        read(s, "v_abro", "initial", L.initial.state.v_abro);
        read(s, "l7_prev", "initial", L.initial.state.l7_prev);
        if (const auto u = s.find("u_prev"); u != s.end()) {
            expect_keys(*u, "initial.u_prev", {"g_outA", "g_emptA"});
            read(*u, "g_outA", "initial.u_prev", L.initial.state.u_prev.g_outA);
            read(*u, "g_emptA", "initial.u_prev", L.initial.state.u_prev.g_emptA);
        }
        if (const auto o = s.find("openings"); o != s.end()) read_openings(*o, "initial.openings", L.initial.openings);
    }
    if (const auto it = j.find("output"); it != j.end()) {
        expect_keys(*it, "output", {"dir", "trace"});
        read(*it, "dir", "output", base.output.dir);
        read(*it, "trace", "output", base.output.trace);
    }
    try {
        L.validate();
    } catch (const DomainError& e) {
        throw SchemaError(e.what());
    }
    return base;
}

inline AppConfig parse_config(const std::string& text) { return apply_config(detail::parse_json(text)); }

inline AppConfig load_config(const fs::path& path) { return parse_config(read_text(path)); }

/// Checksum of the embedded model coefficients and actuation tables.
inline std::string parameter_checksum(const AppConfig& cfg = {}) {
    const json j = config_json(cfg);
    const json params = {{"model", j["model"]}, {"actuation", j["actuation"]}};
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(params.dump())));
    return buf;
}

// ---------------------------------------------------------------- run reports

inline constexpr std::array<const char*, 19> kOutputColumns{
    "q_mi",   "g_outA", "g_inA",   "g_emptA", "q_cso4",   "q_1216", "q_la_gavia", "q_biol",    "q_sec", "q_out_la_gavia",
    "q_mi2",  "q_cso5_1", "q_cso5", "l7",     "p7",       "q_mi3",  "q_wwtp_sur", "q_cso_sur", "v_abro"};

inline std::array<double, 19> output_values(const LmOutputs& o) {
    return {o.q_mi,  o.g_outA,   o.g_inA,  o.g_emptA, o.q_cso4, o.q_1216, o.q_la_gavia,
            o.q_biol, o.q_sec,   o.q_out_la_gavia, o.q_mi2, o.q_cso5_1, o.q_cso5, o.l7,
            o.p7,    o.q_mi3,    o.q_wwtp_sur, o.q_cso_sur, o.v_abro};
}

/// Inputs, applied openings, every model output and the net mass correction, one row per step.
inline std::string trajectories_csv(const loop::RunResult& r) {
    std::string out = "time_s,q_in4,q_in5,q_in6,q_md_mi,opening_bypass,opening_empty";
    for (const char* c : kOutputColumns) out += std::string(",") + c;
    out += ",correction_net\n";
    for (const auto& l : r.log) {
        out += format_number(l.time_s);
        for (double v : {l.inputs.q_in4, l.inputs.q_in5, l.inputs.q_in6, l.inputs.q_md_mi, l.openings.bypass,
                         l.openings.empty}) {
            out += "," + format_number(v);
        }
        for (double v : output_values(l.outputs)) out += "," + format_number(v);
        out += "," + format_number(l.corrections.net()) + "\n";
    }
    return out;
}

inline std::string conversion_csv(const loop::RunResult& r) {
    std::string out =
        "step,opening_bypass,opening_empty,predicted_g_outA,realized_g_outA,predicted_g_emptA,realized_g_emptA,saturated\n";
    for (const auto& s : r.conversion.samples) {
        out += std::to_string(s.step);
        for (double v : {s.opening_bypass, s.opening_empty, s.predicted_g_outA, s.realized_g_outA, s.predicted_g_emptA,
                         s.realized_g_emptA}) {
            out += "," + format_number(v);
        }
        out += s.saturated ? ",1\n" : ",0\n";
    }
    return out;
}

inline json kpi_json(const loop::RunResult& r) {
    const auto m = loop::mass_closure(r);
    const auto& c = r.conversion;
    return {
        {"scenario", r.scenario},
        {"controller", loop::controller_name(r.controller)},
        {"dt_s", r.dt},
        {"steps", r.log.size()},
        {"units", "1000 m3"},
        {"kpi",
         {{"Q_CSO4", r.kpi.cso4},
          {"Q_CSO5", r.kpi.cso5},
          {"Q_CSOSur", r.kpi.cso_sur},
          {"Q_WWTPSur", r.kpi.wwtp_sur},
          {"Q_LaGavia", r.kpi.la_gavia},
          {"total_cso", r.kpi.total_cso()}}},
        {"mass_closure_m3",
         {{"inflow", m.inflow},
          {"storage_change", m.storage_change},
          {"treated", m.treated},
          {"overflow", m.overflow},
          {"corrections", m.corrections},
          {"residual", m.residual()},
          {"relative_residual", m.relative_residual()}}},
        {"conversion",
         {{"samples", c.samples.size()},
          {"r2_g_outA", detail::optional_json(c.r2_g_outA)},
          {"r2_g_emptA", detail::optional_json(c.r2_g_emptA)},
          {"rmse_g_outA", detail::optional_json(c.rmse_g_outA)},
          {"rmse_g_emptA", detail::optional_json(c.rmse_g_emptA)}}},
        {"solver",
         {{"solves", r.solver.solves},
          {"evaluations", r.solver.evaluations},
          {"budget_exhausted", r.solver.budget_exhausted},
          {"saturated_decisions", r.solver.saturated_decisions}}},
        {"final_state",
         {{"v_abro", r.final_state.v_abro},
          {"l7_prev", r.final_state.l7_prev},
          {"g_outA", r.final_state.u_prev.g_outA},
          {"g_emptA", r.final_state.u_prev.g_emptA}}},
    };
}

/// One row per MPC solve: effort and the cost of the warm start versus the optimum.
inline std::string solver_trace_csv(const loop::RunResult& r) {
    std::string out =
        "solve,evaluations,accepted_steps,budget_exhausted,warm_j_total,j_total,j_cso,j_wwtp,j_smooth,plan_g_outA,plan_g_emptA\n";
    for (std::size_t k = 0; k < r.solves.size(); ++k) {
        const auto& s = r.solves[k];
        out += std::to_string(k) + "," + std::to_string(s.evaluations) + "," + std::to_string(s.accepted_steps) + "," +
               (s.budget_exhausted ? "1" : "0");
        for (double v : {s.warm_cost.j_total, s.cost.j_total, s.cost.j_cso, s.cost.j_wwtp, s.cost.j_smooth}) {
            out += "," + format_number(v);
        }
        const ControlPair u = s.effective.size() > 1 ? s.effective[1] : s.effective.front();
        out += "," + format_number(u.g_outA) + "," + format_number(u.g_emptA) + "\n";
    }
    return out;
}

/// Writes trajectories.csv, kpi.json, conversion.csv and, when tracing, solver_trace.csv.
inline void write_run(const fs::path& dir, const loop::RunResult& r, bool trace) {
    fs::create_directories(dir);
    write_text(dir / "trajectories.csv", trajectories_csv(r));
    write_text(dir / "kpi.json", kpi_json(r).dump(2) + "\n");
    write_text(dir / "conversion.csv", conversion_csv(r));
    if (trace) write_text(dir / "solver_trace.csv", solver_trace_csv(r));
}

namespace detail {

inline std::string describe_rain(const RainMetadata& m) {
    std::vector<std::string> parts;
    if (m.date) parts.push_back("date " + *m.date);
    if (m.duration) parts.push_back("duration " + *m.duration);
    if (m.precipitation_mm) parts.push_back("precipitation " + format_fixed(*m.precipitation_mm, 1) + " mm");
    if (m.max_intensity_mm_h) parts.push_back("max intensity " + format_fixed(*m.max_intensity_mm_h, 1) + " mm/h");
    std::string out;
    for (std::size_t i = 0; i < parts.size(); ++i) out += (i ? ", " : "") + parts[i];
    return out;
}

}  // namespace detail

/// KPI table in Markdown: volumes in 1000 m³ to 2 decimals, deltas to 1 decimal.
inline std::string comparison_markdown(const loop::Comparison& c) {
    std::string out = "# KPI comparison: " + c.scenario + "\n\n";
    if (const auto rain = detail::describe_rain(c.metadata); !rain.empty()) out += "Rain: " + rain + "\n\n";
    out += "| KPI (1000 m3) | " + c.baseline_name + " | " + c.candidate_name + " | Delta |\n";
    out += "|---|---:|---:|---:|\n";
    for (const auto& row : c.rows) {
        out += "| " + row.label + " | " + format_fixed(row.baseline, 2) + " | " + format_fixed(row.candidate, 2) + " | " +
               format_percent(row.delta_percent) + " |\n";
    }
    out += "\nDelta = (" + c.candidate_name + " - " + c.baseline_name + ") / " + c.baseline_name + ".\n";
    return out;
}

// ---------------------------------------------------------------- fitting

/// Dataset from a numeric CSV: `target` is the response, `features` (all other
/// columns when empty) the regressors, in the order given.
inline fit::Dataset dataset_from_table(const CsvTable& t, const std::string& target,
                                       std::vector<std::string> features = {}) {
    const auto tc = t.column(target);
    if (!tc) throw SchemaError("missing column '" + target + "'", 1, 0);
    if (features.empty()) {
        for (const auto& h : t.header) {
            if (h != target) features.push_back(h);
        }
    }
    std::vector<std::size_t> cols;
    for (const auto& f : features) {
        const auto c = t.column(f);
        if (!c) throw SchemaError("missing column '" + f + "'", 1, 0);
        if (*c == *tc) throw UsageError("column '" + f + "' is both target and feature");
        cols.push_back(*c);
    }
    fit::Dataset d;
    d.feature_names = features;
    d.inputs.resize(static_cast<Eigen::Index>(t.rows.size()), static_cast<Eigen::Index>(cols.size()));
    d.targets.resize(static_cast<Eigen::Index>(t.rows.size()));
    for (std::size_t i = 0; i < t.rows.size(); ++i) {
        for (std::size_t k = 0; k < cols.size(); ++k) {
            d.inputs(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = t.rows[i][cols[k]];
        }
        d.targets(static_cast<Eigen::Index>(i)) = t.rows[i][*tc];
    }
    return d;
}

inline std::string dataset_csv(const fit::Dataset& d, const std::string& target) {
    std::string out;
    for (const auto& f : d.feature_names) out += f + ",";
    out += target + "\n";
    for (std::size_t i = 0; i < d.samples(); ++i) {
        for (double v : d.row(i)) out += format_number(v) + ",";
        out += format_number(d.targets(static_cast<Eigen::Index>(i))) + "\n";
    }
    return out;
}

/// Initial parameters: a JSON array in template order, or an object keyed by parameter name.
inline std::vector<double> parse_init(const std::string& text, const std::vector<std::string>& names) {
    const json j = detail::parse_json(text);
    std::vector<double> out;
    if (j.is_array()) {
        for (std::size_t i = 0; i < j.size(); ++i) {
            if (!j[i].is_number()) throw SchemaError("init[" + std::to_string(i) + "]: expected a number");
            out.push_back(j[i].get<double>());
        }
    } else if (j.is_object()) {
        for (const auto& [key, value] : j.items()) {
            if (std::find(names.begin(), names.end(), key) == names.end()) {
                throw SchemaError("unknown key 'init." + key + "'");
            }
        }
        for (const auto& n : names) {
            if (!j.contains(n)) throw SchemaError("missing key 'init." + n + "'");
            if (!j[n].is_number()) throw SchemaError("init." + n + ": expected a number");
            out.push_back(j[n].get<double>());
        }
    } else {
        throw SchemaError("init: expected an array or an object of parameters");
    }
    if (out.size() != names.size()) {
        throw SchemaError("init: expected " + std::to_string(names.size()) + " parameters, got " +
                          std::to_string(out.size()));
    }
    return out;
}

struct FitReport {
    std::string template_name;
    std::string target;
    std::vector<std::string> features;
    std::string method;  ///< "lls" or "nlls"
    std::size_t samples = 0;
    fit::FitResult result;
    std::optional<double> holdout;
    std::optional<fit::Metrics> test;  ///< metrics on the held-out rows
};

inline json fit_report_json(const FitReport& r) {
    json params = json::object();
    for (std::size_t i = 0; i < r.result.params.size(); ++i) params[r.result.param_names[i]] = r.result.params[i];
    json j = {
        {"template", r.template_name},
        {"target", r.target},
        {"features", r.features},
        {"method", r.method},
        {"samples", r.samples},
        {"param_order", r.result.param_names},
        {"params", params},
        {"rmse", r.result.rmse},
        {"mae", r.result.mae},
        {"r2", detail::optional_json(r.result.r2)},
        {"iterations", r.result.iterations},
        {"converged", r.result.converged},
    };
    if (r.holdout) {
        j["holdout"] = {{"fraction", *r.holdout},
                        {"rmse", r.test->rmse},
                        {"mae", r.test->mae},
                        {"r2", detail::optional_json(r.test->r2)}};
    }
    return j;
}

/// One summary line: template, target, RMSE, MAE, R², sample count, status.
inline std::string fit_summary_row(const FitReport& r) {
    auto num = [](double v) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.4g", v);
        return std::string(buf);
    };
    std::string row = "| " + r.template_name + " | " + r.target + " | " + num(r.result.rmse) + " | " +
                      num(r.result.mae) + " | " + (r.result.r2 ? format_fixed(*r.result.r2, 4) : "undefined") + " | " +
                      std::to_string(r.samples) + " | " + (r.result.converged ? "converged" : "not converged") + " |";
    if (r.test) {
        row += " test RMSE " + num(r.test->rmse) + ", MAE " + num(r.test->mae) + ", R2 " +
               (r.test->r2 ? format_fixed(*r.test->r2, 4) : "undefined") + " |";
    }
    return row;
}

}  // namespace uds::io
