#pragma once

// udsctl command-line front end.
//
//   simulate  --scenario <csv> --controller {mpc|rbc|fixed} [--config <json>] [--out <dir>] [--trace]
//   compare   --scenario <csv> [--config <json>] [--out <dir>]
//   fit       --data <csv> --template <name> --target <col> [--features a,b] [--init <json>]
//             [--holdout <fraction>] [--max-iterations <n>] [--out <json>]
//   convert   --family {fill|empty} [--opening <pct>] --inputs k=v,... [--interpolate]
//             [--select --target <flow>] [--config <json>]
//   config    [--config <json>]          print the effective configuration
//   export-scenarios --out <dir>         write the bundled scenarios
//   --version                            tool version and parameter checksum
//
// Exit status: 0 success, 1 runtime failure or non-convergence, 2 invalid
// input. Every failure prints exactly one line to stderr starting with
// "error[<kind>]".

#include "uds/closed_loop.hpp"
#include "uds/datafit.hpp"
#include "uds/errors.hpp"
#include "uds/io.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace uds::cli {

inline constexpr const char* kVersion = "1.0.0";

namespace detail {

inline std::string one_line(std::string s) {
    for (char& c : s) {
        if (c == '\n' || c == '\r') c = ' ';
    }
    return s;
}

inline std::string num(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

/// Prefixes schema errors raised while reading `source` with its location.
template <class F>
auto with_source(const std::string& source, F&& f) -> decltype(f()) {
    try {
        return f();
    } catch (const SchemaError& e) {
        std::string where = source;
        if (e.line() > 0) where += ":" + std::to_string(e.line());
        if (e.column() > 0) where += ":" + std::to_string(e.column());
        throw SchemaError(where + ": " + e.what(), e.line(), e.column());
    }
}

inline io::AppConfig load_app_config(const std::string& path) {
    if (path.empty()) return {};
    return with_source(path, [&] { return io::load_config(path); });
}

inline Scenario load_scenario(const std::string& path) {
    return with_source(path, [&] { return io::load_scenario(path); });
}

/// "q_in5=1.0,d_abro=2" into a conversion context; unknown keys are rejected.
inline act::ConversionContext parse_inputs(const std::string& text) {
    act::ConversionContext ctx{};
    if (text.empty()) return ctx;
    std::map<std::string, double*> slots{
        {"q_in5", &ctx.q_in5}, {"d_abro", &ctx.d_abro}, {"g_outA", &ctx.g_outA}, {"q_in4", &ctx.q_in4}};
    std::size_t start = 0;
    while (start <= text.size()) {
        const std::size_t end = std::min(text.find(',', start), text.size());
        const std::string item = text.substr(start, end - start);
        const auto eq = item.find('=');
        if (eq == std::string::npos) throw UsageError("--inputs: expected key=value, got '" + item + "'");
        const std::string key = item.substr(0, eq);
        const auto slot = slots.find(key);
        if (slot == slots.end()) {
            throw UsageError("--inputs: unknown key '" + key + "' (expected q_in5, d_abro, g_outA, q_in4)");
        }
        const auto v = io::parse_number(item.substr(eq + 1));
        if (!v) throw UsageError("--inputs: '" + item.substr(eq + 1) + "' is not a number for " + key);
        *slot->second = *v;
        start = end + 1;
    }
    return ctx;
}

inline std::string read_init_text(const std::string& arg) {
    if (!arg.empty() && (arg.front() == '[' || arg.front() == '{')) return arg;
    return io::read_text(arg);
}

inline void print_kpis(std::ostream& out, const loop::RunResult& r) {
    out << "scenario " << r.scenario << ", controller " << loop::controller_name(r.controller) << ", " << r.log.size()
        << " steps\n";
    out << "  Q_CSO4    " << io::format_fixed(r.kpi.cso4, 2) << "\n"
        << "  Q_CSO5    " << io::format_fixed(r.kpi.cso5, 2) << "\n"
        << "  Q_CSOSur  " << io::format_fixed(r.kpi.cso_sur, 2) << "\n"
        << "  Q_WWTPSur " << io::format_fixed(r.kpi.wwtp_sur, 2) << "\n"
        << "  Q_LaGavia " << io::format_fixed(r.kpi.la_gavia, 2) << "\n"
        << "  total CSO " << io::format_fixed(r.kpi.total_cso(), 2) << "  (1000 m3)\n";
    if (r.conversion.r2_g_outA || r.conversion.r2_g_emptA) {
        auto r2 = [](const std::optional<double>& v) { return v ? io::format_fixed(*v, 4) : std::string("undefined"); };
        out << "  conversion R2: G_outA " << r2(r.conversion.r2_g_outA) << ", G_emptA " << r2(r.conversion.r2_g_emptA)
            << "\n";
    }
}

}  // namespace detail

struct SimulateArgs {
    std::string scenario, controller, config, out;
    bool trace = false;
};

inline int cmd_simulate(const SimulateArgs& a, std::ostream& out) {
    io::AppConfig cfg = detail::load_app_config(a.config);
    if (a.trace) cfg.output.trace = true;
    const std::string dir = a.out.empty() ? cfg.output.dir : a.out;
    const auto kind = loop::controller_from_name(a.controller);
    const Scenario sc = detail::load_scenario(a.scenario);
    const auto run = loop::run_closed_loop(sc, kind, cfg.loop, cfg.output.trace);
    io::write_run(dir, run, cfg.output.trace);
    io::write_text(io::fs::path(dir) / "config.json", io::config_text(cfg));
    detail::print_kpis(out, run);
    out << "wrote " << dir << "\n";
    return 0;
}

struct CompareArgs {
    std::string scenario, config, out;
};

inline int cmd_compare(const CompareArgs& a, std::ostream& out) {
    const io::AppConfig cfg = detail::load_app_config(a.config);
    const std::string dir = a.out.empty() ? cfg.output.dir : a.out;
    const Scenario sc = detail::load_scenario(a.scenario);
    const auto cmp = loop::compare_controllers(sc, cfg.loop);
    const std::string md = io::comparison_markdown(cmp.table);
    io::write_run(io::fs::path(dir) / "rbc", cmp.rbc, false);
    io::write_run(io::fs::path(dir) / "mpc", cmp.mpc, false);
    io::write_text(io::fs::path(dir) / "comparison.md", md);
    out << md;
    return 0;
}

struct FitArgs {
    std::string data, template_name, target, features, init, out = "fit_result.json";
    std::optional<double> holdout;
    std::optional<int> max_iterations;
};

inline int cmd_fit(const FitArgs& a, std::ostream& out, std::ostream& err) {
    const auto tpl = fit::ExpressionTemplate::from_name(a.template_name);
    std::vector<std::string> features;
    for (std::size_t s = 0; !a.features.empty() && s <= a.features.size();) {
        const std::size_t e = std::min(a.features.find(',', s), a.features.size());
        features.push_back(a.features.substr(s, e - s));
        s = e + 1;
    }
    const fit::Dataset all = detail::with_source(a.data, [&] {
        return io::dataset_from_table(io::parse_csv(io::read_text(a.data)), a.target, features);
    });
    tpl.check_features(all.features());

    io::FitReport rep;
    rep.template_name = tpl.name();
    rep.target = a.target;
    rep.features = all.feature_names;
    fit::Dataset cal = all, test;
    if (a.holdout) {
        auto parts = fit::split_holdout(all, *a.holdout);
        cal = std::move(parts.first);
        test = std::move(parts.second);
        rep.holdout = a.holdout;
    }
    rep.samples = cal.samples();

    if (a.init.empty()) {
        if (!tpl.linear_in_params()) {
            throw UsageError("template '" + tpl.name() + "' is nonlinear in its parameters; --init is required");
        }
        rep.method = "lls";
        rep.result = fit::fit_lls(cal, tpl);
    } else {
        const auto names = tpl.param_names(cal.feature_names);
        const auto init =
            detail::with_source(a.init.front() == '[' || a.init.front() == '{' ? std::string("--init") : a.init,
                                [&] { return io::parse_init(detail::read_init_text(a.init), names); });
        fit::NllsOptions opt;
        if (a.max_iterations) opt.max_iterations = *a.max_iterations;
        rep.method = "nlls";
        rep.result = fit::fit_nlls(cal, tpl, init, opt);
    }
    if (a.holdout) rep.test = fit::evaluate_fit(test, tpl, rep.result.params);

    io::write_text(a.out, io::fit_report_json(rep).dump(2) + "\n");
    out << "| template | target | RMSE | MAE | R2 | n | status |\n";
    out << io::fit_summary_row(rep) << "\n";
    out << "params";
    for (std::size_t i = 0; i < rep.result.params.size(); ++i) {
        out << " " << rep.result.param_names[i] << "=" << io::format_number(rep.result.params[i]);
    }
    out << "\nwrote " << a.out << "\n";
    if (!rep.result.converged) {
        err << "error[not-converged] fit stopped after " << rep.result.iterations << " iterations without converging\n";
        return 1;
    }
    return 0;
}

struct ConvertArgs {
    std::string family, inputs, config;
    std::optional<double> opening, target;
    bool interpolate = false, select = false;
};

inline int cmd_convert(const ConvertArgs& a, std::ostream& out) {
    const io::AppConfig cfg = detail::load_app_config(a.config);
    const auto& tables = cfg.loop.tables;
    act::Family fam;
    if (a.family == "fill") fam = act::Family::fill;
    else if (a.family == "empty") fam = act::Family::empty;
    else throw UsageError("--family must be fill or empty, got '" + a.family + "'");
    const auto ctx = detail::parse_inputs(a.inputs);
    if (!a.opening && !a.select) throw UsageError("convert needs --opening, --select, or both");

    if (a.opening) {
        if (!(*a.opening >= 0.0 && *a.opening <= 100.0)) {
            throw DomainError("opening " + detail::num(*a.opening) + " outside [0, 100]");
        }
        if (!tables.grid.index_of(*a.opening) && !a.interpolate) {
            throw UsageError("opening " + detail::num(*a.opening) +
                             " is not on the setpoint grid; pass --interpolate to blend neighbouring openings");
        }
        out << "flow=" << detail::num(act::conversion_at(fam, *a.opening, ctx, tables)) << "\n";
    }
    if (a.select) {
        if (!a.target) throw UsageError("--select needs --target <flow>");
        const auto d = act::select_setpoint(fam, *a.target, ctx, tables);
        out << "opening=" << detail::num(d.opening) << " lower=" << detail::num(tables.grid.openings[d.lower])
            << " upper=" << detail::num(tables.grid.openings[d.upper]) << " target=" << detail::num(d.target)
            << " predicted=" << detail::num(d.predicted) << " saturated=" << (d.saturated ? "true" : "false") << "\n";
    }
    return 0;
}

inline std::string version_line() {
    return std::string("udsctl ") + kVersion + " parameters fnv1a64:" + io::parameter_checksum();
}

/// Parses the command line, runs one subcommand and maps failures to exit codes.
inline int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Urban drainage left-margin simulator, fitter and controller"};
    app.name("udsctl");
    app.require_subcommand(0, 1);
    bool version = false;
    app.add_flag("--version", version, "print version and the embedded parameter checksum");

    SimulateArgs sim;
    auto* s = app.add_subcommand("simulate", "run one controller in closed loop and write a run directory");
    s->add_option("--scenario", sim.scenario, "scenario CSV")->required();
    s->add_option("--controller", sim.controller, "mpc, rbc or fixed")->required();
    s->add_option("--config", sim.config, "configuration JSON");
    s->add_option("--out", sim.out, "run directory (default: output.dir)");
    s->add_flag("--trace", sim.trace, "also write solver_trace.csv");

    CompareArgs cmp;
    auto* c = app.add_subcommand("compare", "run RBC and MPC and write comparison.md");
    c->add_option("--scenario", cmp.scenario, "scenario CSV")->required();
    c->add_option("--config", cmp.config, "configuration JSON");
    c->add_option("--out", cmp.out, "output directory (default: output.dir)");

    FitArgs fa;
    double holdout = 0.0;
    int max_iter = 0;
    auto* f = app.add_subcommand("fit", "fit an expression template to a CSV dataset");
    f->add_option("--data", fa.data, "dataset CSV")->required();
    f->add_option("--template", fa.template_name,
                  "linear, quadratic, cubic, polynomial:<d>, multivariate-quadratic, quad-plus-log, logistic")
        ->required();
    f->add_option("--target", fa.target, "response column")->required();
    f->add_option("--features", fa.features, "comma-separated regressor columns (default: all others)");
    f->add_option("--init", fa.init, "initial parameters: JSON file, or inline JSON array/object");
    auto* ho = f->add_option("--holdout", holdout, "fraction of trailing rows kept out of the fit for testing");
    auto* mi = f->add_option("--max-iterations", max_iter, "NLLS iteration limit");
    f->add_option("--out", fa.out, "FitResult JSON path");

    ConvertArgs cv;
    double opening = 0.0, target = 0.0;
    auto* v = app.add_subcommand("convert", "evaluate the flow-setpoint conversion");
    v->add_option("--family", cv.family, "fill or empty")->required();
    auto* op = v->add_option("--opening", opening, "opening in percent");
    v->add_option("--inputs", cv.inputs, "q_in5=..,d_abro=..,g_outA=..,q_in4=..");
    v->add_flag("--interpolate", cv.interpolate, "allow openings between grid points");
    v->add_flag("--select", cv.select, "choose the opening that delivers --target");
    auto* tg = v->add_option("--target", target, "target flow for --select, m3/s");
    v->add_option("--config", cv.config, "configuration JSON (actuation tables)");

    std::string show_config;
    auto* g = app.add_subcommand("config", "print the effective configuration as canonical JSON");
    g->add_option("--config", show_config, "configuration JSON to merge over the defaults");

    std::string export_dir;
    auto* x = app.add_subcommand("export-scenarios", "write the bundled scenarios as CSV plus sidecar JSON");
    x->add_option("--out", export_dir, "destination directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e, out, err);
        err << "error[usage] " << detail::one_line(e.what()) << "\n";
        return 2;
    }

    try {
        if (version) {
            out << version_line() << "\n";
            return 0;
        }
        if (s->parsed()) return cmd_simulate(sim, out);
        if (c->parsed()) return cmd_compare(cmp, out);
        if (f->parsed()) {
            if (ho->count()) fa.holdout = holdout;
            if (mi->count()) fa.max_iterations = max_iter;
            return cmd_fit(fa, out, err);
        }
        if (v->parsed()) {
            if (op->count()) cv.opening = opening;
            if (tg->count()) cv.target = target;
            return cmd_convert(cv, out);
        }
        if (g->parsed()) {
            out << io::config_text(detail::load_app_config(show_config));
            return 0;
        }
        if (x->parsed()) {
            for (const auto& [stem, sc] : io::bundled_scenarios()) {
                out << io::save_scenario(sc, export_dir, stem).string() << "\n";
            }
            return 0;
        }
        err << "error[usage] a subcommand is required (simulate, compare, fit, convert, config, export-scenarios); "
               "see --help\n";
        return 2;
    } catch (const SchemaError& e) {
        err << "error[schema] " << detail::one_line(e.what()) << "\n";
        return 2;
    } catch (const UsageError& e) {
        err << "error[usage] " << detail::one_line(e.what()) << "\n";
        return 2;
    } catch (const RankError& e) {
        err << "error[rank] " << detail::one_line(e.what()) << "\n";
        return 2;
    } catch (const DomainError& e) {
        err << "error[domain] " << detail::one_line(e.what()) << "\n";
        return 2;
    } catch (const fit::FitInitError& e) {
        err << "error[fit-init] " << detail::one_line(e.what()) << "\n";
        return 1;
    } catch (const ModelError& e) {
        err << "error[model] " << detail::one_line(e.what()) << "\n";
        return 1;
    } catch (const std::exception& e) {
        err << "error[runtime] " << detail::one_line(e.what()) << "\n";
        return 1;
    }
}

}  // namespace uds::cli
