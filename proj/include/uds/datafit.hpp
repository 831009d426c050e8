#pragma once

// Data-fitting for parametrized network elements: expression templates,
// linear least squares (closed form, rank-checked), damped Gauss-Newton
// nonlinear least squares, and the RMSE / MAE / R² goodness-of-fit metrics.

#include "uds/errors.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

namespace uds::fit {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Fit could not start: non-finite residual or Jacobian at the initial parameters.
class FitInitError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct Dataset {
    std::vector<std::string> feature_names;
    RowMatrix inputs;        ///< samples × features
    Eigen::VectorXd targets; ///< samples

    std::size_t samples() const { return static_cast<std::size_t>(targets.size()); }
    std::size_t features() const { return static_cast<std::size_t>(inputs.cols()); }

    std::span<const double> row(std::size_t i) const {
        return {inputs.data() + i * inputs.cols(), static_cast<std::size_t>(inputs.cols())};
    }

    void validate() const {
        if (inputs.rows() != targets.size()) throw UsageError("dataset: inputs and targets differ in length");
        if (targets.size() < 2) throw UsageError("dataset: at least 2 samples required");
        if (static_cast<std::size_t>(inputs.cols()) != feature_names.size()) {
            throw UsageError("dataset: feature name count does not match columns");
        }
        std::set<std::string> seen(feature_names.begin(), feature_names.end());
        if (seen.size() != feature_names.size()) throw UsageError("dataset: feature names must be unique");
        if (!inputs.allFinite() || !targets.allFinite()) throw UsageError("dataset: non-finite entry");
    }
};

enum class TemplateKind { linear, polynomial, multivariate_quadratic, quad_plus_log, logistic };

/// Parametrized expression family chosen by the modeller.
///
///  linear                  y = Σ β_j x_j + β_0                        params [β_1..β_n, β_0]
///  polynomial(d)           y = Σ c_k x^k, single feature              params highest degree first
///  multivariate-quadratic  y = Σ a_j x_j² + Σ b_j x_j + c, no cross terms
///  quad-plus-log           y = a x² + b x + c + d·ln(e x), single feature
///  logistic                y = A / (B + exp(C x + D)) + E, single feature
class ExpressionTemplate {
public:
    static ExpressionTemplate linear() { return ExpressionTemplate(TemplateKind::linear, 1); }
    static ExpressionTemplate polynomial(int degree) {
        if (degree < 0) throw UsageError("polynomial degree must be >= 0");
        return ExpressionTemplate(TemplateKind::polynomial, degree);
    }
    static ExpressionTemplate multivariate_quadratic() {
        return ExpressionTemplate(TemplateKind::multivariate_quadratic, 2);
    }
    static ExpressionTemplate quad_plus_log() { return ExpressionTemplate(TemplateKind::quad_plus_log, 2); }
    static ExpressionTemplate logistic() { return ExpressionTemplate(TemplateKind::logistic, 0); }

    /// Accepts: linear, quadratic, cubic, polynomial:<d>, multivariate-quadratic,
    /// quad-plus-log, logistic.
    static ExpressionTemplate from_name(std::string_view name) {
        if (name == "linear") return linear();
        if (name == "quadratic") return polynomial(2);
        if (name == "cubic") return polynomial(3);
        if (name == "multivariate-quadratic") return multivariate_quadratic();
        if (name == "quad-plus-log") return quad_plus_log();
        if (name == "logistic") return logistic();
        constexpr std::string_view prefix = "polynomial:";
        if (name.starts_with(prefix)) {
            const std::string digits(name.substr(prefix.size()));
            if (!digits.empty() && digits.size() < 3 && std::all_of(digits.begin(), digits.end(), ::isdigit)) {
                return polynomial(std::stoi(digits));
            }
        }
        throw UsageError("unknown template '" + std::string(name) + "'");
    }

    TemplateKind kind() const { return kind_; }
    int degree() const { return degree_; }

    std::string name() const {
        switch (kind_) {
            case TemplateKind::linear: return "linear";
            case TemplateKind::polynomial:
                return degree_ == 2 ? "quadratic" : "polynomial:" + std::to_string(degree_);
            case TemplateKind::multivariate_quadratic: return "multivariate-quadratic";
            case TemplateKind::quad_plus_log: return "quad-plus-log";
            case TemplateKind::logistic: return "logistic";
        }
        return {};
    }

    bool linear_in_params() const {
        return kind_ == TemplateKind::linear || kind_ == TemplateKind::polynomial ||
               kind_ == TemplateKind::multivariate_quadratic;
    }

    bool single_feature() const {
        return kind_ == TemplateKind::polynomial || kind_ == TemplateKind::quad_plus_log ||
               kind_ == TemplateKind::logistic;
    }

    void check_features(std::size_t n) const {
        if (n == 0) throw UsageError("template '" + name() + "' needs at least one feature");
        if (single_feature() && n != 1) {
            throw UsageError("template '" + name() + "' takes exactly one feature, got " + std::to_string(n));
        }
    }

    std::size_t arity(std::size_t n_features) const {
        switch (kind_) {
            case TemplateKind::linear: return n_features + 1;
            case TemplateKind::polynomial: return static_cast<std::size_t>(degree_) + 1;
            case TemplateKind::multivariate_quadratic: return 2 * n_features + 1;
            case TemplateKind::quad_plus_log: return 5;
            case TemplateKind::logistic: return 5;
        }
        return 0;
    }

    std::vector<std::string> param_names(const std::vector<std::string>& features) const {
        std::vector<std::string> out;
        switch (kind_) {
            case TemplateKind::linear:
                out = features;
                out.push_back("1");
                break;
            case TemplateKind::polynomial:
                for (int k = degree_; k >= 0; --k) {
                    out.push_back(k == 0 ? "1" : (k == 1 ? features.at(0) : features.at(0) + "^" + std::to_string(k)));
                }
                break;
            case TemplateKind::multivariate_quadratic:
                for (const auto& f : features) out.push_back(f + "^2");
                for (const auto& f : features) out.push_back(f);
                out.push_back("1");
                break;
            case TemplateKind::quad_plus_log: out = {"a", "b", "c", "d", "e"}; break;
            case TemplateKind::logistic: out = {"amplitude", "offset", "slope", "intercept", "floor"}; break;
        }
        return out;
    }

    /// Design-matrix row for templates linear in their parameters.
    void basis(std::span<const double> x, std::span<double> out) const {
        switch (kind_) {
            case TemplateKind::linear:
                for (std::size_t j = 0; j < x.size(); ++j) out[j] = x[j];
                out[x.size()] = 1.0;
                return;
            case TemplateKind::polynomial: {
                double power = 1.0;
                for (int k = degree_; k >= 0; --k) {
                    out[static_cast<std::size_t>(k)] = power;
                    power *= x[0];
                }
                return;
            }
            case TemplateKind::multivariate_quadratic:
                for (std::size_t j = 0; j < x.size(); ++j) {
                    out[j] = x[j] * x[j];
                    out[x.size() + j] = x[j];
                }
                out[2 * x.size()] = 1.0;
                return;
            default: throw UsageError("template '" + name() + "' is not linear in its parameters");
        }
    }

    double evaluate(std::span<const double> params, std::span<const double> x) const {
        switch (kind_) {
            case TemplateKind::linear:
            case TemplateKind::polynomial:
            case TemplateKind::multivariate_quadratic: {
                double buf[64];
                std::vector<double> heap;
                const std::size_t p = arity(x.size());
                double* b = buf;
                if (p > 64) {
                    heap.resize(p);
                    b = heap.data();
                }
                basis(x, std::span<double>(b, p));
                double y = 0.0;
                for (std::size_t j = 0; j < p; ++j) y += params[j] * b[j];
                return y;
            }
            case TemplateKind::quad_plus_log: {
                const double q = x[0];
                double y = params[0] * q * q + params[1] * q + params[2];
                if (params[4] > 0.0 && q > 0.0) y += params[3] * std::log(params[4] * q);
                return y;
            }
            case TemplateKind::logistic:
                return params[0] / (params[1] + std::exp(params[2] * x[0] + params[3])) + params[4];
        }
        return 0.0;
    }

    friend bool operator==(const ExpressionTemplate&, const ExpressionTemplate&) = default;

private:
    ExpressionTemplate(TemplateKind k, int degree) : kind_(k), degree_(degree) {}

    TemplateKind kind_;
    int degree_;
};

struct Metrics {
    double rmse = 0.0;
    double mae = 0.0;
    std::optional<double> r2;  ///< empty when the targets have zero variance
};

inline Metrics metrics(std::span<const double> y_true, std::span<const double> y_pred) {
    if (y_true.size() != y_pred.size() || y_true.empty()) {
        throw UsageError("metrics: series must have equal nonzero length");
    }
    const double n = static_cast<double>(y_true.size());
    double sse = 0.0, sae = 0.0, mean = 0.0;
    for (std::size_t i = 0; i < y_true.size(); ++i) {
        const double e = y_true[i] - y_pred[i];
        sse += e * e;
        sae += std::abs(e);
        mean += y_true[i];
    }
    mean /= n;
    double sst = 0.0;
    for (double y : y_true) sst += (y - mean) * (y - mean);
    Metrics m;
    m.rmse = std::sqrt(sse / n);
    m.mae = sae / n;
    if (sst > 0.0) m.r2 = 1.0 - sse / sst;
    return m;
}

struct FitResult {
    std::vector<double> params;
    std::vector<std::string> param_names;
    double rmse = 0.0;
    double mae = 0.0;
    std::optional<double> r2;
    int iterations = 0;
    bool converged = false;
    std::vector<double> sse_trace;  ///< SSE of every accepted iterate, initial point first
};

inline std::vector<double> predict(const Dataset& data, const ExpressionTemplate& tpl, std::span<const double> params) {
    std::vector<double> y(data.samples());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = tpl.evaluate(params, data.row(i));
    return y;
}

inline Metrics evaluate_fit(const Dataset& data, const ExpressionTemplate& tpl, std::span<const double> params) {
    const auto y = predict(data, tpl, params);
    return metrics(std::span<const double>(data.targets.data(), data.samples()), y);
}

namespace detail {

inline void finish(FitResult& r, const Dataset& data, const ExpressionTemplate& tpl) {
    const Metrics m = evaluate_fit(data, tpl, r.params);
    r.rmse = m.rmse;
    r.mae = m.mae;
    r.r2 = m.r2;
    r.param_names = tpl.param_names(data.feature_names);
}

}  // namespace detail

/// Closed-form least squares for templates linear in their parameters.
/// Columns are normalised before the SVD; singular values below 1e-10 of the
/// largest mark the design as rank deficient.
inline FitResult fit_lls(const Dataset& data, const ExpressionTemplate& tpl) {
    data.validate();
    if (!tpl.linear_in_params()) throw UsageError("fit_lls: template '" + tpl.name() + "' is not linear in its parameters");
    tpl.check_features(data.features());

    const std::size_t n = data.samples();
    const std::size_t p = tpl.arity(data.features());
    if (n < p) throw RankError("fit_lls: " + std::to_string(n) + " samples for " + std::to_string(p) + " parameters");
    const auto names = tpl.param_names(data.feature_names);

    Eigen::MatrixXd x(n, p);
    std::vector<double> row(p);
    for (std::size_t i = 0; i < n; ++i) {
        tpl.basis(data.row(i), row);
        for (std::size_t j = 0; j < p; ++j) x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = row[j];
    }

    Eigen::VectorXd scale = x.colwise().norm().transpose();
    std::vector<std::string> zero_cols;
    for (Eigen::Index j = 0; j < scale.size(); ++j) {
        if (scale(j) == 0.0) zero_cols.push_back(names[static_cast<std::size_t>(j)]);
    }
    if (!zero_cols.empty()) {
        std::string msg = "fit_lls: rank-deficient design, all-zero columns:";
        for (const auto& c : zero_cols) msg += " " + c;
        throw RankError(msg);
    }
    const Eigen::MatrixXd xs = x * scale.cwiseInverse().asDiagonal();

    Eigen::JacobiSVD<Eigen::MatrixXd> svd(xs, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const Eigen::VectorXd& sv = svd.singularValues();
    const double threshold = 1e-10 * sv(0);
    std::set<std::size_t> collinear;
    for (Eigen::Index k = 0; k < sv.size(); ++k) {
        if (sv(k) > threshold) continue;
        const Eigen::VectorXd v = svd.matrixV().col(k);
        const double vmax = v.cwiseAbs().maxCoeff();
        for (Eigen::Index j = 0; j < v.size(); ++j) {
            if (std::abs(v(j)) > 1e-6 * vmax) collinear.insert(static_cast<std::size_t>(j));
        }
    }
    if (!collinear.empty()) {
        std::string msg = "fit_lls: rank-deficient design, collinear columns:";
        for (auto j : collinear) msg += " " + names[j];
        throw RankError(msg);
    }

    const Eigen::VectorXd beta_scaled = svd.solve(data.targets);
    FitResult r;
    r.params.resize(p);
    for (std::size_t j = 0; j < p; ++j) r.params[j] = beta_scaled(static_cast<Eigen::Index>(j)) / scale(static_cast<Eigen::Index>(j));
    r.iterations = 1;
    r.converged = true;
    detail::finish(r, data, tpl);
    r.sse_trace = {r.rmse * r.rmse * static_cast<double>(n)};
    return r;
}

struct NllsOptions {
    double tolerance = 1e-10;     ///< relative SSE change that ends the iteration
    int max_iterations = 200;
    double initial_damping = 1e-3;
    double damping_up = 10.0;
    double damping_down = 10.0;
};

/// Damped Gauss-Newton (Levenberg-Marquardt) with Marquardt diagonal scaling and
/// central finite-difference Jacobians, step 1e-6·max(1, |p|).
inline FitResult fit_nlls(const Dataset& data, const ExpressionTemplate& tpl, std::span<const double> initial,
                          const NllsOptions& opt = {}) {
    data.validate();
    tpl.check_features(data.features());
    const std::size_t n = data.samples();
    const std::size_t p = tpl.arity(data.features());
    if (initial.size() != p) {
        throw UsageError("fit_nlls: template '" + tpl.name() + "' takes " + std::to_string(p) + " parameters, got " +
                         std::to_string(initial.size()));
    }

    auto residuals = [&](const Eigen::VectorXd& params, Eigen::VectorXd& r) {
        const std::span<const double> ps(params.data(), p);
        for (std::size_t i = 0; i < n; ++i) {
            r(static_cast<Eigen::Index>(i)) = tpl.evaluate(ps, data.row(i)) - data.targets(static_cast<Eigen::Index>(i));
        }
    };
    auto jacobian = [&](const Eigen::VectorXd& params, Eigen::MatrixXd& jac) {
        Eigen::VectorXd rp(n), rm(n);
        Eigen::VectorXd shifted = params;
        for (std::size_t j = 0; j < p; ++j) {
            const auto jj = static_cast<Eigen::Index>(j);
            const double h = 1e-6 * std::max(1.0, std::abs(params(jj)));
            shifted(jj) = params(jj) + h;
            residuals(shifted, rp);
            shifted(jj) = params(jj) - h;
            residuals(shifted, rm);
            shifted(jj) = params(jj);
            jac.col(jj) = (rp - rm) / (2.0 * h);
        }
    };

    Eigen::VectorXd params = Eigen::Map<const Eigen::VectorXd>(initial.data(), static_cast<Eigen::Index>(p));
    Eigen::VectorXd r(n);
    Eigen::MatrixXd jac(n, p);
    residuals(params, r);
    jacobian(params, jac);
    if (!r.allFinite()) throw FitInitError("fit_nlls: non-finite residual at the initial parameters");
    if (!jac.allFinite()) throw FitInitError("fit_nlls: non-finite Jacobian at the initial parameters");

    FitResult out;
    double sse = r.squaredNorm();
    out.sse_trace.push_back(sse);
    const double exact_fit = 1e-30 * std::max(1.0, data.targets.squaredNorm());
    double lambda = opt.initial_damping;
    Eigen::VectorXd trial(p), r_trial(n);

    for (int it = 1; it <= opt.max_iterations; ++it) {
        out.iterations = it;
        if (sse <= exact_fit) {
            out.converged = true;
            break;
        }
        const Eigen::MatrixXd jtj = jac.transpose() * jac;
        const Eigen::VectorXd g = jac.transpose() * r;
        Eigen::VectorXd diag = jtj.diagonal();
        const double floor = 1e-12 * std::max(diag.maxCoeff(), 1e-300);
        diag = diag.cwiseMax(floor);

        Eigen::MatrixXd damped = jtj;
        damped.diagonal() += lambda * diag;
        const Eigen::VectorXd step = damped.ldlt().solve(-g);
        trial = params + step;
        residuals(trial, r_trial);
        const double sse_trial = r_trial.allFinite() ? r_trial.squaredNorm() : std::numeric_limits<double>::infinity();

        if (step.allFinite() && sse_trial < sse) {
            const double rel = (sse - sse_trial) / sse;
            params = trial;
            r = r_trial;
            sse = sse_trial;
            out.sse_trace.push_back(sse);
            lambda = std::max(lambda / opt.damping_down, 1e-15);
            if (rel < opt.tolerance || sse <= exact_fit) {
                out.converged = true;
                break;
            }
            jacobian(params, jac);
            if (!jac.allFinite()) break;
        } else {
            lambda *= opt.damping_up;
            if (lambda > 1e16) {
                // no descent direction left at working precision
                out.converged = true;
                break;
            }
        }
    }

    out.params.assign(params.data(), params.data() + p);
    detail::finish(out, data, tpl);
    return out;
}

/// Calibration/test split: the last `holdout` fraction of rows becomes the test set.
inline std::pair<Dataset, Dataset> split_holdout(const Dataset& data, double holdout) {
    if (!(holdout > 0.0 && holdout < 1.0)) throw UsageError("holdout fraction must lie in (0, 1)");
    const auto n = static_cast<Eigen::Index>(data.samples());
    const auto n_test = static_cast<Eigen::Index>(std::floor(static_cast<double>(n) * holdout));
    const Eigen::Index n_cal = n - n_test;
    if (n_cal < 2 || n_test < 2) throw UsageError("holdout leaves fewer than 2 samples on one side");
    Dataset cal{data.feature_names, data.inputs.topRows(n_cal), data.targets.head(n_cal)};
    Dataset test{data.feature_names, data.inputs.bottomRows(n_test), data.targets.tail(n_test)};
    return {std::move(cal), std::move(test)};
}

}  // namespace uds::fit
