#pragma once
#include <glmmfa/errors.hpp>
#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <string>

namespace glmmfa {

enum class PenaltyKind
{
    Lasso,
    MCP,
    SCAD,
};

inline std::string to_string(PenaltyKind k)
{
    switch (k) {
        case PenaltyKind::Lasso: return "lasso";
        case PenaltyKind::MCP: return "MCP";
        case PenaltyKind::SCAD: return "SCAD";
    }
    return "unknown";
}

inline PenaltyKind penalty_from_string(const std::string& s)
{
    if (s == "lasso" || s == "LASSO" || s == "Lasso") return PenaltyKind::Lasso;
    if (s == "MCP" || s == "mcp") return PenaltyKind::MCP;
    if (s == "SCAD" || s == "scad") return PenaltyKind::SCAD;
    throw ConfigError("unknown penalty '" + s + "'");
}

inline double default_gamma(PenaltyKind k)
{
    return k == PenaltyKind::SCAD ? 3.7 : 3.0;
}

/**
 * Folded-concave penalty with an optional ridge blend.
 *
 * For a coefficient magnitude u the penalty is
 *
 *      rho(u; pi * lambda, gamma) + (1 - pi) * lambda / 2 * u^2,
 *
 * so pi = 1 gives the pure LASSO/MCP/SCAD penalty and pi -> 0 approaches ridge.
 */
struct PenaltySpec
{
    PenaltyKind kind = PenaltyKind::MCP;
    double lambda = 0.0;
    double gamma = 3.0;
    double pi = 1.0;

    static PenaltySpec make(PenaltyKind kind, double lambda, double pi = 1.0)
    {
        return {kind, lambda, default_gamma(kind), pi};
    }

    PenaltySpec with_lambda(double l) const
    {
        PenaltySpec s = *this;
        s.lambda = l;
        return s;
    }

    void validate() const
    {
        if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigError("lambda must be >= 0");
        if (!(pi > 0.0 && pi <= 1.0)) throw ConfigError("elastic-net mix pi must lie in (0, 1]");
        if (kind == PenaltyKind::MCP && !(gamma > 1.0)) throw ConfigError("MCP requires gamma > 1");
        if (kind == PenaltyKind::SCAD && !(gamma > 2.0)) throw ConfigError("SCAD requires gamma > 2");
    }
};

namespace detail {

/// Folded-concave part evaluated at u >= 0 with threshold l = pi * lambda.
inline double folded_concave(double u, double l, const PenaltySpec& spec)
{
    const double g = spec.gamma;
    switch (spec.kind) {
        case PenaltyKind::Lasso:
            return l * u;
        case PenaltyKind::MCP:
            return u <= g * l ? l * u - u * u / (2.0 * g) : 0.5 * g * l * l;
        case PenaltyKind::SCAD:
            if (u <= l) return l * u;
            if (u <= g * l) return (2.0 * g * l * u - u * u - l * l) / (2.0 * (g - 1.0));
            return 0.5 * l * l * (g + 1.0);
    }
    return 0.0;
}

/**
 * Global minimizer over u >= 0 of (a/2) u^2 - c u + rho(u) with c > 0,
 * by minimizing each quadratic piece of the objective on its interval.
 * Handles the non-convex regime a <= concavity of rho.
 */
inline double piecewise_minimizer(double a, double c, double l, const PenaltySpec& spec)
{
    struct Piece { double lo, hi, quad, lin; };
    const double g = spec.gamma;
    const double inf = std::numeric_limits<double>::infinity();
    std::array<Piece, 3> pieces{};
    int n = 0;
    switch (spec.kind) {
        case PenaltyKind::Lasso:
            pieces[n++] = {0.0, inf, a, -(c - l)};
            break;
        case PenaltyKind::MCP:
            pieces[n++] = {0.0, g * l, a - 1.0 / g, -(c - l)};
            pieces[n++] = {g * l, inf, a, -c};
            break;
        case PenaltyKind::SCAD:
            pieces[n++] = {0.0, l, a, -(c - l)};
            pieces[n++] = {l, g * l, a - 1.0 / (g - 1.0), -(c - g * l / (g - 1.0))};
            pieces[n++] = {g * l, inf, a, -c};
            break;
    }
    auto objective = [&](double u) { return 0.5 * a * u * u - c * u + folded_concave(u, l, spec); };
    double best_u = 0.0;
    double best_f = 0.0;
    for (int i = 0; i < n; ++i) {
        const auto& pc = pieces[i];
        std::array<double, 3> cand{pc.lo, pc.hi, pc.lo};
        if (pc.quad > 0.0) cand[2] = std::clamp(-pc.lin / pc.quad, pc.lo, pc.hi);
        for (double u : cand) {
            if (!std::isfinite(u)) continue;
            const double f = objective(u);
            if (f < best_f || (f == best_f && u < best_u)) {
                best_f = f;
                best_u = u;
            }
        }
    }
    return best_u;
}

} // namespace detail

/**
 * Minimizer of (v/2) (beta - z/v)^2 + pen(beta).
 *
 * Closed forms follow the usual LASSO/MCP/SCAD branches with the ridge part
 * folded into the curvature a = v + (1 - pi) lambda. When a does not exceed the
 * concavity of the penalty (1/gamma for MCP, 1/(gamma-1) for SCAD) the problem is
 * non-convex and the exact global minimizer is returned instead.
 */
inline double scalar_threshold(double z, double v, const PenaltySpec& spec)
{
    if (z == 0.0) return 0.0;
    const double s = z > 0 ? 1.0 : -1.0;
    const double az = std::abs(z);
    const double l = spec.pi * spec.lambda;
    const double a = v + (1.0 - spec.pi) * spec.lambda;
    const double g = spec.gamma;

    switch (spec.kind) {
        case PenaltyKind::Lasso:
            return az <= l ? 0.0 : s * (az - l) / a;
        case PenaltyKind::MCP:
            if (a > 1.0 / g) {
                if (az <= l) return 0.0;
                if (az <= a * g * l) return s * (az - l) / (a - 1.0 / g);
                return z / a;
            }
            break;
        case PenaltyKind::SCAD:
            if (a > 1.0 / (g - 1.0)) {
                if (az <= l) return 0.0;
                if (az <= l * (a + 1.0)) return s * (az - l) / a;
                if (az <= a * g * l) return s * (az - g * l / (g - 1.0)) / (a - 1.0 / (g - 1.0));
                return z / a;
            }
            break;
    }
    return s * detail::piecewise_minimizer(a, az, l, spec);
}

/// Group version: thresholds the norm of z and keeps its direction.
inline Eigen::VectorXd group_threshold(const Eigen::Ref<const Eigen::VectorXd>& z, double v,
                                       const PenaltySpec& spec)
{
    const double norm = z.norm();
    if (norm == 0.0) return Eigen::VectorXd::Zero(z.size());
    const double shrunk = scalar_threshold(norm, v, spec);
    return (shrunk / norm) * z;
}

/// Penalty for a single coefficient magnitude (or group norm) u.
inline double penalty_rho(double u, const PenaltySpec& spec)
{
    u = std::abs(u);
    const double l = spec.pi * spec.lambda;
    return detail::folded_concave(u, l, spec) + 0.5 * (1.0 - spec.pi) * spec.lambda * u * u;
}

/**
 * lambda0 sum_j rho0(beta_j) + lambda1 sum_t rho1(||b_t||_2), with beta[0] (the
 * intercept) and row `intercept_row` of B left unpenalized. Pass intercept_row = -1
 * when no row corresponds to the intercept.
 */
inline double penalty_value(const Eigen::Ref<const Eigen::VectorXd>& beta,
                            const Eigen::Ref<const Eigen::MatrixXd>& B, const PenaltySpec& spec0,
                            const PenaltySpec& spec1, int intercept_row = 0)
{
    double total = 0.0;
    for (Eigen::Index j = 1; j < beta.size(); ++j) total += penalty_rho(beta(j), spec0);
    for (Eigen::Index t = 0; t < B.rows(); ++t) {
        if (t == intercept_row) continue;
        total += penalty_rho(B.row(t).norm(), spec1);
    }
    return total;
}

} // namespace glmmfa
