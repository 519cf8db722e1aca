#pragma once
#include <glmmfa/data.hpp>
#include <glmmfa/errors.hpp>
#include <glmmfa/family.hpp>
#include <glmmfa/glm.hpp>
#include <glmmfa/penalties.hpp>
#include <glmmfa/posterior.hpp>
#include <glmmfa/theta.hpp>
#include <Eigen/Dense>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

namespace glmmfa {

struct FitControl
{
    double em_tol = 1e-3;
    int em_consecutive = 2;
    int max_em_iter = 50;
    double mstep_tol = 1e-4;
    int max_mstep_iter = 100;
    /// Run one more E-step with m_schedule.final_draws draws at the fitted theta.
    bool final_estep = true;

    void validate() const
    {
        if (!(em_tol > 0.0) || em_consecutive < 1 || max_em_iter < 1 || !(mstep_tol > 0.0) || max_mstep_iter < 1) {
            throw ConfigError("fit control values must all be positive");
        }
    }
};

struct MStepResult
{
    ThetaState theta;
    int cycles = 0;
    bool converged = false;
    int backtracks = 0;
    std::vector<double> objective_trace; // objective at the start and after every cycle
};

struct FitResult
{
    ThetaState theta;
    std::vector<double> q1_trace;
    int em_iterations = 0;
    bool converged = false;
    double timing = 0.0;
    PosteriorDraws final_draws;
    std::vector<int> mstep_cycles;
};

/**
 * Initial theta: beta from the penalized GLM that ignores grouping (falling back to
 * an intercept-only beta if that fit fails), every loading row set to c times a unit
 * vector, cycling through the r axes, and tau = 1 or the residual variance of the
 * initial GLM for the Gaussian family.
 */
inline ThetaState initialize(const ModelFrame& frame, const Family& family, const PenaltySpec& spec0, int r,
                             double c = 0.1)
{
    if (r < 1) throw ConfigError("initialize: r must be >= 1");
    const int p = frame.p();
    ThetaState theta;
    theta.tau = 1.0;
    const Eigen::MatrixXd X = frame.X1.rightCols(p);
    const GlmFit glm = fit_penalized_glm(X, frame.y, frame.weight, family, spec0);
    if (glm.converged && glm.coef.allFinite()) {
        theta.beta = glm.coef;
    } else {
        theta.beta = Eigen::VectorXd::Zero(p + 1);
        theta.beta(0) = intercept_only(frame.y, frame.weight, family);
    }
    theta.B = Eigen::MatrixXd::Zero(frame.q(), r);
    for (int t = 0; t < frame.q(); ++t) theta.B(t, t % r) = c;
    if (family.dispersion_free()) {
        const Eigen::VectorXd resid = frame.y - frame.X1 * theta.beta;
        theta.tau = std::max(resid.squaredNorm() / frame.N(), 1e-8);
    }
    return theta;
}

inline ThetaState initialize(const GroupedDataset& data, const Family& family, const PenaltySpec& spec0, int r,
                             double c = 0.1)
{
    return initialize(make_frame(data), family, spec0, r, c);
}

namespace detail {

/// Per-observation moments of the loss under the draws, at a fixed theta.
struct SurrogateMoments
{
    double loss = 0.0;     // weighted MC average of -log f
    Eigen::VectorXd g;     // mean_m (y - mu)
    Eigen::MatrixXd G;     // r x N, mean_m (y - mu) alpha
    Eigen::VectorXd W0;    // mean_m omega
    Eigen::MatrixXd W1;    // r x N, mean_m omega alpha
    Eigen::MatrixXd W2;    // r*r x N, mean_m omega alpha alpha^T
    Eigen::VectorXd rss;   // per-group weighted mean_m sum_i (y - eta)^2, Gaussian only
};

/// Curvature of b(eta) used by the quadratic surrogate: exact for Gaussian, local
/// (floored or capped) for logit and Poisson.
inline double working_weight(const Family& family, double eta)
{
    switch (family.kind) {
        case FamilyKind::BinomialLogit: {
            const double t = std::exp(-std::abs(eta));
            return std::max(t / ((1.0 + t) * (1.0 + t)), 1e-6);
        }
        case FamilyKind::GaussianIdentity: return 1.0;
        case FamilyKind::PoissonLog: return std::exp(std::min(eta, 30.0));
    }
    return 1.0;
}

inline SurrogateMoments surrogate_moments(const PosteriorDraws& draws, const ModelFrame& frame,
                                          const ThetaState& theta, const Family& family)
{
    const int N = frame.N();
    const int r = theta.r();
    const int K = frame.K();
    SurrogateMoments s;
    s.g.resize(N);
    s.G.resize(r, N);
    s.W0.resize(N);
    s.W1.resize(r, N);
    s.W2.resize(r * r, N);
    s.rss = Eigen::VectorXd::Zero(K);
    const bool local = family.kind != FamilyKind::GaussianIdentity;
    std::vector<double> group_loss(K, 0.0);
    std::vector<double> log_base(K, 0.0);

#pragma omp parallel for schedule(dynamic)
    for (int k = 0; k < K; ++k) {
        const int st = frame.start[k];
        const int n = frame.size[k];
        const Eigen::MatrixXd& A = draws.draws[k];
        const double M = static_cast<double>(A.rows());
        const Eigen::VectorXd off = frame.X1.middleRows(st, n) * theta.beta;
        const Eigen::MatrixXd C = frame.Z.middleRows(st, n) * theta.B; // n x r
        Eigen::MatrixXd eta = A * C.transpose();                       // M x n
        eta.rowwise() += off.transpose();
        Eigen::MatrixXd R(eta.rows(), n);
        Eigen::MatrixXd Om;
        if (local) Om.resize(eta.rows(), n);
        double loss = 0.0;
        double rss = 0.0;
        for (int i = 0; i < n; ++i) {
            const double y = frame.y(st + i);
            for (Eigen::Index m = 0; m < eta.rows(); ++m) {
                const double e = eta(m, i);
                double b, mu;
                family.cumulant_and_mean(e, b, mu);
                loss += b - y * e;
                R(m, i) = y - mu;
                if (local) Om(m, i) = working_weight(family, e);
                if (family.kind == FamilyKind::GaussianIdentity) rss += (y - e) * (y - e);
            }
            log_base[k] += family.log_base_measure(y, theta.tau);
        }
        group_loss[k] = loss / M;
        s.rss(k) = rss / M;
        s.g.segment(st, n) = R.colwise().mean().transpose();
        s.G.middleCols(st, n) = A.transpose() * R / M;
        if (local) {
            s.W0.segment(st, n) = Om.colwise().mean().transpose();
            s.W1.middleCols(st, n) = A.transpose() * Om / M;
            // column c*r+a of P is alpha_a * alpha_c, so P^T Om stacks every W2 at once
            Eigen::MatrixXd P(A.rows(), r * r);
            for (int c = 0; c < r; ++c)
                for (int a = 0; a < r; ++a) P.col(c * r + a) = A.col(a).cwiseProduct(A.col(c));
            s.W2.middleCols(st, n).noalias() = P.transpose() * Om / M;
        } else {
            const double w = working_weight(family, 0.0);
            const Eigen::VectorXd abar = A.colwise().mean().transpose();
            const Eigen::MatrixXd S = A.transpose() * A / M;
            s.W0.segment(st, n).setConstant(w);
            for (int i = 0; i < n; ++i) {
                s.W1.col(st + i) = w * abar;
                s.W2.col(st + i) = w * Eigen::Map<const Eigen::VectorXd>(S.data(), r * r);
            }
        }
    }
    for (int k = 0; k < K; ++k) {
        s.loss += frame.weight(frame.start[k]) * (group_loss[k] / theta.tau - log_base[k]);
    }
    return s;
}

} // namespace detail

/**
 * Weighted Monte Carlo loss plus penalty at fixed draws:
 * sum_k w_k (1/M) sum_m sum_i -log f(y_ki | eta_ki(alpha_k^(m))) + penalty, with w_k = 1/(K n_k).
 */
inline double mstep_objective(const PosteriorDraws& draws, const ModelFrame& frame, const ThetaState& theta,
                              const Family& family, const PenaltySpec& spec0, const PenaltySpec& spec1)
{
    const auto s = detail::surrogate_moments(draws, frame, theta, family);
    return s.loss + penalty_value(theta.beta, theta.B, spec0, spec1, frame.intercept_row);
}

/**
 * One M-step at fixed draws. Each cycle builds a quadratic majorizer of the Monte
 * Carlo loss at the current theta (local curvature weights, exact for Gaussian)
 * and minimizes it by coordinate sweeps: every beta_j by
 * thresholding, then every loading row b_t by group thresholding, repeated until the
 * sweep moves nothing by more than mstep_tol / 10. A cycle that raises the true
 * objective is halved back toward its start. Gaussian tau is updated last.
 */
inline MStepResult m_step(const PosteriorDraws& draws, const ModelFrame& frame, const ThetaState& theta_prev,
                          const PenaltySpec& spec0, const PenaltySpec& spec1, const FitControl& ctrl,
                          const Family& family)
{
    if (draws.K() != frame.K()) throw DimensionError("m_step: draws and data disagree on K");
    if (draws.r() != theta_prev.r()) throw DimensionError("m_step: draws and theta disagree on r");
    const int N = frame.N();
    const int p1 = frame.p() + 1;
    const int q = frame.q();
    const int r = theta_prev.r();
    const int irow = frame.intercept_row;

    MStepResult res;
    ThetaState theta = theta_prev;
    const double tau = theta.tau;
    auto penalty = [&](const ThetaState& th) {
        return penalty_value(th.beta, th.B, spec0, spec1, irow);
    };
    auto mom = detail::surrogate_moments(draws, frame, theta, family);
    double obj = mom.loss + penalty(theta);
    if (!std::isfinite(obj)) throw NumericalError("M-step: non-finite objective at the starting point");
    res.objective_trace.push_back(obj);

    const Eigen::VectorXd wobs = frame.weight / tau;
    constexpr int kMaxSweeps = 50;

    for (int h = 1; h <= ctrl.max_mstep_iter; ++h) {
        res.cycles = h;
        ThetaState next = theta;
        auto fail = [&](const std::string& coord) {
            throw NumericalError("M-step cycle " + std::to_string(h) + ", coordinate " + coord +
                                 ": non-finite update");
        };

        // curvatures of the majorizer are fixed within a cycle
        Eigen::VectorXd vbeta(p1);
        for (int j = 0; j < p1; ++j) {
            vbeta(j) = (wobs.array() * frame.X1.col(j).array().square() * mom.W0.array()).sum();
        }
        std::vector<Eigen::MatrixXd> Hrow(q);
        Eigen::VectorXd vrow(q);
        for (int t = 0; t < q; ++t) {
            const auto zt = frame.Z.col(t);
            Eigen::VectorXd acc = Eigen::VectorXd::Zero(r * r);
            for (int i = 0; i < N; ++i) {
                if (zt(i) != 0.0) acc.noalias() += (wobs(i) * zt(i) * zt(i)) * mom.W2.col(i);
            }
            Hrow[t] = Eigen::Map<const Eigen::MatrixXd>(acc.data(), r, r);
            if (t == irow) {
                Hrow[t].diagonal().array() += 1e-12 * std::max(1.0, Hrow[t].diagonal().maxCoeff());
                vrow(t) = 0.0;
            } else {
                Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(Hrow[t], Eigen::EigenvaluesOnly);
                vrow(t) = es.eigenvalues().maxCoeff();
            }
        }

        // Coordinate sweeps on the frozen majorizer until it stops moving. With d, e the
        // displacements of (x^T beta, z^T B) since the cycle start, the surrogate gradients
        // are driven by sres = -g + W0 d + W1^T e and ures = -G + W1 d + W2 e, kept current.
        Eigen::VectorXd sres = -mom.g;
        Eigen::MatrixXd ures = -mom.G;
        Eigen::VectorXd step(N);
        for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
            double moved = 0.0;

            // fixed effects, intercept first and unpenalized
            for (int j = 0; j < p1; ++j) {
                const double v = vbeta(j);
                if (!(v > 0.0)) continue;
                const auto xj = frame.X1.col(j);
                const double grad = (wobs.array() * xj.array() * sres.array()).sum();
                const double old = next.beta(j);
                const double nb = j == 0 ? old - grad / v : scalar_threshold(v * old - grad, v, spec0);
                if (!std::isfinite(nb)) fail("beta_" + std::to_string(j));
                const double delta = nb - old;
                if (delta != 0.0) {
                    next.beta(j) = nb;
                    step = delta * xj;
                    sres.array() += mom.W0.array() * step.array();
                    ures.array() += mom.W1.array().rowwise() * step.transpose().array();
                    moved = std::max(moved, std::abs(delta));
                }
            }

            // loading rows
            for (int t = 0; t < q; ++t) {
                const auto zt = frame.Z.col(t);
                const Eigen::VectorXd grad = ures * wobs.cwiseProduct(zt);
                const Eigen::VectorXd old = next.B.row(t).transpose();
                Eigen::VectorXd nb;
                if (t == irow) {
                    nb = old - Hrow[t].ldlt().solve(grad);
                } else {
                    if (!(vrow(t) > 0.0)) continue;
                    nb = group_threshold(vrow(t) * old - grad, vrow(t), spec1);
                }
                if (!nb.allFinite()) fail("b_" + std::to_string(t));
                const Eigen::VectorXd delta = nb - old;
                if (delta.squaredNorm() != 0.0) {
                    next.B.row(t) = nb.transpose();
                    sres.noalias() += (mom.W1.transpose() * delta).cwiseProduct(zt);
                    for (int c = 0; c < r; ++c) {
                        step = (delta(c) * zt);
                        ures.array() += mom.W2.middleRows(c * r, r).array().rowwise() * step.transpose().array();
                    }
                    moved = std::max(moved, delta.cwiseAbs().maxCoeff());
                }
            }
            if (moved < 0.1 * ctrl.mstep_tol) break;
        }

        // accept, halving back toward the cycle start if the true objective rose
        auto next_mom = detail::surrogate_moments(draws, frame, next, family);
        double next_obj = next_mom.loss + penalty(next);
        const double slack = 1e-12 * std::max(1.0, std::abs(obj));
        int halvings = 0;
        while (!(next_obj <= obj + slack) && halvings < 30) {
            ++halvings;
            next.beta = 0.5 * (next.beta + theta.beta);
            next.B = 0.5 * (next.B + theta.B);
            next_mom = detail::surrogate_moments(draws, frame, next, family);
            next_obj = next_mom.loss + penalty(next);
        }
        res.backtracks += halvings;
        if (!std::isfinite(next_obj)) throw NumericalError("M-step cycle " + std::to_string(h) + ": non-finite objective");
        if (!(next_obj <= obj + slack)) {
            res.converged = true; // no descent direction left at this resolution
            break;
        }
        const double change = next.max_change(theta);
        theta = std::move(next);
        mom = std::move(next_mom);
        obj = next_obj;
        res.objective_trace.push_back(obj);
        if (change < ctrl.mstep_tol) {
            res.converged = true;
            break;
        }
    }

    if (family.dispersion_free()) {
        double num = 0.0;
        double den = 0.0;
        for (int k = 0; k < frame.K(); ++k) {
            const double w = frame.weight(frame.start[k]);
            num += w * mom.rss(k);
            den += w * frame.size[k];
        }
        theta.tau = std::max(num / den, 1e-10);
    }
    res.theta = std::move(theta);
    return res;
}

/// True iff the last em_consecutive consecutive changes in (beta, b) are all below em_tol.
inline bool check_convergence(const std::vector<ThetaState>& trace, const FitControl& ctrl)
{
    if (trace.size() < 2) return false;
    int run = 0;
    for (std::size_t i = trace.size() - 1; i >= 1; --i) {
        if (trace[i].max_change(trace[i - 1]) < ctrl.em_tol) {
            if (++run >= ctrl.em_consecutive) return true;
        } else {
            return false;
        }
    }
    return false;
}

/**
 * MCECM for one (lambda0, lambda1) pair: alternates the Monte Carlo E-step and the
 * M-step until theta changes by less than em_tol em_consecutive times in a row or
 * max_em_iter is reached. Chains persist across iterations (and across calls when
 * `chains` is supplied) so each E-step starts where the previous one stopped.
 */
inline FitResult fit_mcecm(const ModelFrame& frame, const Family& family, const PenaltySpec& spec0,
                           const PenaltySpec& spec1, const ThetaState& init, const FitControl& ctrl,
                           const SamplerConfig& sampler, std::uint64_t seed,
                           std::vector<ChainState>* chains = nullptr)
{
    ctrl.validate();
    sampler.validate();
    spec0.validate();
    spec1.validate();
    if (init.q() != frame.q() || init.p() != frame.p()) throw DimensionError("fit_mcecm: init does not match data");
    init.validate();
    const auto t0 = std::chrono::steady_clock::now();

    std::vector<ChainState> local_chains;
    std::vector<ChainState>& ch = chains ? *chains : local_chains;
    FitResult out;
    ThetaState theta = init;
    int consecutive = 0;
    for (int s = 0; s < ctrl.max_em_iter; ++s) {
        const int M = sampler.m_schedule(s);
        const PosteriorDraws draws = e_step(frame, theta, family, sampler, M, seed, s, &ch);
        MStepResult ms = m_step(draws, frame, theta, spec0, spec1, ctrl, family);
        out.q1_trace.push_back(q1_estimate(draws, frame, ms.theta, family));
        out.mstep_cycles.push_back(ms.cycles);
        const double change = ms.theta.max_change(theta);
        theta = std::move(ms.theta);
        out.em_iterations = s + 1;
        consecutive = change < ctrl.em_tol ? consecutive + 1 : 0;
        if (consecutive >= ctrl.em_consecutive) {
            out.converged = true;
            break;
        }
    }
    if (ctrl.final_estep) {
        out.final_draws = e_step(frame, theta, family, sampler, sampler.m_schedule.final_draws, seed,
                                 ctrl.max_em_iter + 1, &ch);
    }
    out.theta = std::move(theta);
    out.timing = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return out;
}

inline FitResult fit_mcecm(const GroupedDataset& data, const Family& family, const PenaltySpec& spec0,
                           const PenaltySpec& spec1, const ThetaState& init, const FitControl& ctrl,
                           const SamplerConfig& sampler, std::uint64_t seed)
{
    return fit_mcecm(make_frame(data), family, spec0, spec1, init, ctrl, sampler, seed);
}

} // namespace glmmfa
