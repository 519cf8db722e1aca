#pragma once
#include <glmmfa/family.hpp>
#include <glmmfa/penalties.hpp>
#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

namespace glmmfa {

struct GlmControl
{
    int max_outer = 100;
    int max_inner = 500;
    double tol = 1e-9;
};

struct GlmFit
{
    Eigen::VectorXd coef; // intercept first
    bool converged = false;
    int iterations = 0;
    double objective = 0.0;
};

namespace detail {

inline double glm_loss(const Eigen::VectorXd& eta, const Eigen::VectorXd& y,
                       const Eigen::VectorXd& w, const Family& family)
{
    double loss = 0.0;
    for (Eigen::Index i = 0; i < y.size(); ++i) {
        loss += w(i) * (family.cumulant(eta(i)) - y(i) * eta(i));
    }
    return loss;
}

inline double glm_objective(const Eigen::VectorXd& coef, const Eigen::MatrixXd& X,
                            const Eigen::VectorXd& y, const Eigen::VectorXd& w,
                            const Family& family, const PenaltySpec& spec)
{
    Eigen::VectorXd eta = (X * coef.tail(X.cols())).array() + coef(0);
    double obj = glm_loss(eta, y, w, family);
    for (Eigen::Index j = 1; j < coef.size(); ++j) obj += penalty_rho(coef(j), spec);
    return obj;
}

inline double clamp_mean(const Family& family, double mu)
{
    switch (family.kind) {
        case FamilyKind::BinomialLogit: return std::clamp(mu, 1e-6, 1.0 - 1e-6);
        case FamilyKind::PoissonLog: return std::max(mu, 1e-6);
        case FamilyKind::GaussianIdentity: return mu;
    }
    return mu;
}

} // namespace detail

/// Unpenalized intercept-only estimate g(weighted mean of y).
inline double intercept_only(const Eigen::VectorXd& y, const Eigen::VectorXd& w, const Family& family)
{
    const double mu = (w.array() * y.array()).sum() / w.sum();
    return family.link(detail::clamp_mean(family, mu));
}

/**
 * Smallest lambda for which every slope of the penalized GLM is zero:
 * max_j |sum_i w_i x_ij (y_i - mu_0)| / pi at the intercept-only fit.
 */
inline double glm_lambda_max(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                             const Eigen::VectorXd& w, const Family& family, double pi = 1.0)
{
    if (X.cols() == 0) return 0.0;
    const double mu0 = family.mean(intercept_only(y, w, family));
    const Eigen::VectorXd resid = w.array() * (y.array() - mu0);
    return (X.transpose() * resid).cwiseAbs().maxCoeff() / pi;
}

/**
 * Penalized GLM with an unpenalized intercept,
 *
 *      min sum_i w_i (b(eta_i) - y_i eta_i) + sum_j pen(coef_j),
 *
 * solved by proximal Newton: a weighted quadratic model per outer iteration,
 * minimized by cyclic coordinate descent, followed by step halving on the
 * true objective.
 */
inline GlmFit fit_penalized_glm(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                                const Eigen::VectorXd& w, const Family& family,
                                const PenaltySpec& spec, const Eigen::VectorXd* start = nullptr,
                                const GlmControl& ctl = {})
{
    const Eigen::Index n = X.rows();
    const Eigen::Index m = X.cols();
    GlmFit fit;
    fit.coef = Eigen::VectorXd::Zero(m + 1);
    if (start && start->size() == m + 1) fit.coef = *start;
    else fit.coef(0) = intercept_only(y, w, family);

    auto objective = [&](const Eigen::VectorXd& c) {
        return detail::glm_objective(c, X, y, w, family, spec);
    };
    double obj = objective(fit.coef);
    if (!std::isfinite(obj)) {
        fit.coef.setZero();
        fit.coef(0) = intercept_only(y, w, family);
        obj = objective(fit.coef);
    }

    Eigen::VectorXd eta(n), grad_w(n), omega(n), deta(n);
    for (int outer = 0; outer < ctl.max_outer; ++outer) {
        fit.iterations = outer + 1;
        eta = (X * fit.coef.tail(m)).array() + fit.coef(0);
        for (Eigen::Index i = 0; i < n; ++i) {
            grad_w(i) = w(i) * (y(i) - family.mean(eta(i)));
            double v = family.variance(std::min(eta(i), 30.0));
            omega(i) = w(i) * std::max(v, 1e-5);
        }

        // coordinate descent on the quadratic model in delta-eta
        Eigen::VectorXd proposal = fit.coef;
        deta.setZero();
        for (int inner = 0; inner < ctl.max_inner; ++inner) {
            double max_change = 0.0;
            {
                const double g = (omega.array() * deta.array()).sum() - grad_w.sum();
                const double v = omega.sum();
                const double delta = -g / v;
                proposal(0) += delta;
                deta.array() += delta;
                max_change = std::max(max_change, std::abs(delta));
            }
            for (Eigen::Index j = 0; j < m; ++j) {
                const auto xj = X.col(j);
                const double v = (omega.array() * xj.array().square()).sum();
                if (v <= 0.0) continue;
                const double g = (xj.array() * (omega.array() * deta.array() - grad_w.array())).sum();
                const double old = proposal(j + 1);
                const double nb = scalar_threshold(v * old - g, v, spec);
                const double delta = nb - old;
                if (delta != 0.0) {
                    proposal(j + 1) = nb;
                    deta += delta * xj;
                    max_change = std::max(max_change, std::abs(delta) * std::sqrt(v / omega.sum()));
                }
            }
            if (max_change < 1e-10) break;
        }

        // step halving on the true objective
        Eigen::VectorXd step = proposal - fit.coef;
        double new_obj = objective(proposal);
        int halvings = 0;
        while ((!std::isfinite(new_obj) || new_obj > obj + 1e-12 * std::abs(obj)) && halvings < 40) {
            step *= 0.5;
            proposal = fit.coef + step;
            new_obj = objective(proposal);
            ++halvings;
        }
        if (!std::isfinite(new_obj) || new_obj > obj + 1e-12 * std::abs(obj)) {
            fit.converged = std::isfinite(obj);
            break;
        }
        const double change = step.cwiseAbs().maxCoeff();
        const double rel = std::abs(obj - new_obj) / (std::abs(new_obj) + 1e-12);
        fit.coef = proposal;
        obj = new_obj;
        if (rel < ctl.tol && change < std::sqrt(ctl.tol)) {
            fit.converged = true;
            break;
        }
    }
    fit.objective = obj;
    if (!fit.coef.allFinite() || !std::isfinite(obj)) fit.converged = false;
    return fit;
}

} // namespace glmmfa
