#pragma once
#include <glmmfa/data.hpp>
#include <glmmfa/errors.hpp>
#include <glmmfa/family.hpp>
#include <glmmfa/theta.hpp>
#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <vector>

namespace glmmfa {

/// Per-group quantities the latent-factor posterior depends on.
struct GroupTerms
{
    Eigen::VectorXd y;
    Eigen::VectorXd offset;   // x_ki^T beta
    Eigen::MatrixXd loadings; // n_k x r, row i = (B^T z_ki)^T
    double tau = 1.0;
};

inline GroupTerms group_terms(const ModelFrame& frame, int k, const ThetaState& theta)
{
    const int s = frame.start[k];
    const int n = frame.size[k];
    GroupTerms g;
    g.y = frame.y.segment(s, n);
    g.offset = frame.X1.middleRows(s, n) * theta.beta;
    g.loadings = frame.Z.middleRows(s, n) * theta.B;
    g.tau = theta.tau;
    return g;
}

struct LogPosterior
{
    double value = 0.0;
    Eigen::VectorXd gradient;
};

/**
 * log phi(alpha | y_k) up to a constant: sum_i log f(y_ki | eta_ki(alpha)) - |alpha|^2 / 2,
 * with the standard-normal prior on the latent factors, and its exact gradient.
 */
inline LogPosterior log_posterior_unnorm(const Eigen::VectorXd& alpha, const GroupTerms& g,
                                         const Family& family)
{
    LogPosterior out;
    const Eigen::VectorXd eta = g.offset + g.loadings * alpha;
    Eigen::VectorXd resid(eta.size());
    double ll = 0.0;
    for (Eigen::Index i = 0; i < eta.size(); ++i) {
        ll += g.y(i) * eta(i) - family.cumulant(eta(i));
        resid(i) = g.y(i) - family.mean(eta(i));
    }
    out.value = ll / g.tau - 0.5 * alpha.squaredNorm();
    out.gradient = g.loadings.transpose() * resid / g.tau - alpha;
    return out;
}

inline LogPosterior log_posterior_unnorm(const Eigen::VectorXd& alpha, const ModelFrame& frame, int k,
                                         const ThetaState& theta, const Family& family)
{
    return log_posterior_unnorm(alpha, group_terms(frame, k, theta), family);
}

/// Negative Hessian of the log posterior: I + sum_i b''(eta_i) c_i c_i^T / tau.
inline Eigen::MatrixXd posterior_precision(const Eigen::VectorXd& alpha, const GroupTerms& g,
                                           const Family& family)
{
    const Eigen::VectorXd eta = g.offset + g.loadings * alpha;
    Eigen::VectorXd w(eta.size());
    for (Eigen::Index i = 0; i < eta.size(); ++i) w(i) = family.variance(std::min(eta(i), 30.0)) / g.tau;
    const Eigen::Index r = alpha.size();
    Eigen::MatrixXd H = Eigen::MatrixXd::Identity(r, r);
    H.noalias() += g.loadings.transpose() * w.asDiagonal() * g.loadings;
    return H;
}

/// Number of retained draws as a function of the EM iteration (0-based).
struct MSchedule
{
    int base = 250;
    int increment = 100;
    int cap = 3000;
    int final_draws = 10000;

    int operator()(int iteration) const
    {
        return std::min(base + increment * std::max(iteration, 0), cap);
    }
};

struct SamplerConfig
{
    int burn_in = 250;
    MSchedule m_schedule;
    double step_size = 1.0;
    double adapt_target = 0.57;

    void validate() const
    {
        if (burn_in < 0) throw ConfigError("burn_in must be >= 0");
        if (m_schedule.base < 1 || m_schedule.increment < 0 || m_schedule.cap < m_schedule.base ||
            m_schedule.final_draws < 1) {
            throw ConfigError("M schedule must be positive and nondecreasing");
        }
        if (!(step_size > 0.0)) throw ConfigError("step_size must be positive");
        if (!(adapt_target > 0.0 && adapt_target < 1.0)) throw ConfigError("adapt_target must lie in (0, 1)");
    }
};

/// Persistent per-group chain state, carried across E-steps for warm starts.
struct ChainState
{
    Eigen::VectorXd alpha;
    double log_step = std::numeric_limits<double>::quiet_NaN();
};

struct SampleStats
{
    double acceptance_rate = 0.0;
    double step_size = 0.0;
};

/// Independent stream for (seed, group, iteration).
inline std::mt19937_64 make_stream(std::uint64_t seed, std::uint64_t group, std::uint64_t iteration)
{
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(group), static_cast<std::uint32_t>(iteration),
                      0x9e3779b9u};
    return std::mt19937_64(seq);
}

namespace detail {

/// Damped Newton ascent toward the posterior mode; used only to build the preconditioner.
inline Eigen::VectorXd approximate_mode(Eigen::VectorXd alpha, const GroupTerms& g, const Family& family)
{
    LogPosterior cur = log_posterior_unnorm(alpha, g, family);
    for (int it = 0; it < 25; ++it) {
        const Eigen::MatrixXd H = posterior_precision(alpha, g, family);
        const Eigen::VectorXd step = H.llt().solve(cur.gradient);
        double scale = 1.0;
        bool moved = false;
        for (int h = 0; h < 30; ++h, scale *= 0.5) {
            const Eigen::VectorXd cand = alpha + scale * step;
            LogPosterior next = log_posterior_unnorm(cand, g, family);
            if (std::isfinite(next.value) && next.value >= cur.value) {
                alpha = cand;
                cur = std::move(next);
                moved = true;
                break;
            }
        }
        if (!moved || scale * step.norm() < 1e-8) break;
    }
    return alpha;
}

} // namespace detail

/**
 * Preconditioned Metropolis-adjusted Langevin sampler for one group's latent factors.
 *
 * The preconditioner is the inverse posterior precision at the approximate mode and
 * the step size adapts toward cfg.adapt_target during burn-in only; the retained M
 * draws come from the fixed kernel. The chain starts from chain->alpha when given
 * (warm start) and leaves its final state there.
 */
inline Eigen::MatrixXd sample_posterior(const GroupTerms& g, const Family& family,
                                        const SamplerConfig& cfg, int M, std::mt19937_64& rng,
                                        ChainState* chain = nullptr, SampleStats* stats = nullptr)
{
    if (M < 1) throw ConfigError("sample_posterior: M must be >= 1");
    const Eigen::Index r = g.loadings.cols();
    Eigen::MatrixXd draws(M, r);
    if (r == 0) return draws;

    Eigen::VectorXd alpha = Eigen::VectorXd::Zero(r);
    if (chain && chain->alpha.size() == r && chain->alpha.allFinite()) alpha = chain->alpha;
    LogPosterior cur = log_posterior_unnorm(alpha, g, family);
    if (!std::isfinite(cur.value) || !cur.gradient.allFinite()) {
        throw NumericalError("sample_posterior: non-finite log posterior at the initial state");
    }

    const Eigen::VectorXd mode = detail::approximate_mode(alpha, g, family);
    const Eigen::MatrixXd precision = posterior_precision(mode, g, family);
    const Eigen::MatrixXd cov = precision.inverse();
    const Eigen::MatrixXd L = cov.llt().matrixL();        // cov = L L^T
    const Eigen::MatrixXd Pchol = precision.llt().matrixL(); // precision = P P^T

    double log_h = (chain && std::isfinite(chain->log_step)) ? chain->log_step : std::log(cfg.step_size);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    Eigen::VectorXd xi(r);

    // log q(to | from) up to a constant, given the drift at `from`.
    auto log_q = [&](const Eigen::VectorXd& to, const Eigen::VectorXd& from,
                     const Eigen::VectorXd& grad_from, double h) {
        const Eigen::VectorXd mean = from + 0.5 * h * h * (cov * grad_from);
        const Eigen::VectorXd d = Pchol.transpose() * (to - mean); // |d|^2 = (to-mean)^T precision (to-mean)
        return -0.5 * d.squaredNorm() / (h * h);
    };

    const int total = cfg.burn_in + M;
    int accepted = 0;
    for (int it = 0; it < total; ++it) {
        const double h = std::exp(log_h);
        for (Eigen::Index c = 0; c < r; ++c) xi(c) = normal(rng);
        const Eigen::VectorXd prop = alpha + 0.5 * h * h * (cov * cur.gradient) + h * (L * xi);
        LogPosterior next = log_posterior_unnorm(prop, g, family);
        double accept_prob = 0.0;
        if (std::isfinite(next.value) && next.gradient.allFinite()) {
            const double log_ratio = next.value - cur.value + log_q(alpha, prop, next.gradient, h) -
                                     log_q(prop, alpha, cur.gradient, h);
            accept_prob = log_ratio >= 0.0 ? 1.0 : std::exp(log_ratio);
        }
        if (unif(rng) < accept_prob) {
            alpha = prop;
            cur = std::move(next);
            if (it >= cfg.burn_in) ++accepted;
        }
        if (it < cfg.burn_in) {
            log_h += (accept_prob - cfg.adapt_target) / std::pow(it + 1.0, 0.6);
            log_h = std::clamp(log_h, std::log(1e-3), std::log(5.0));
        } else {
            draws.row(it - cfg.burn_in) = alpha.transpose();
        }
    }
    if (chain) {
        chain->alpha = alpha;
        chain->log_step = log_h;
    }
    if (stats) {
        stats->acceptance_rate = static_cast<double>(accepted) / M;
        stats->step_size = std::exp(log_h);
    }
    return draws;
}

inline Eigen::MatrixXd sample_posterior(const GroupTerms& g, const Family& family,
                                        const SamplerConfig& cfg, int M, std::uint64_t seed,
                                        ChainState* chain = nullptr, SampleStats* stats = nullptr)
{
    auto rng = make_stream(seed, 0, 0);
    return sample_posterior(g, family, cfg, M, rng, chain, stats);
}

/// Retained posterior draws for every group from one E-step.
struct PosteriorDraws
{
    std::vector<Eigen::MatrixXd> draws; // K entries, each M x r
    int burn_in = 0;
    int M = 0;
    std::vector<double> acceptance;

    int K() const { return static_cast<int>(draws.size()); }
    int r() const { return draws.empty() ? 0 : static_cast<int>(draws.front().cols()); }
};

/**
 * Monte Carlo E-step: samples every group's posterior under theta. Group k at EM
 * iteration s uses the stream make_stream(seed, k, s), so results do not depend on
 * the number of threads.
 */
inline PosteriorDraws e_step(const ModelFrame& frame, const ThetaState& theta, const Family& family,
                             const SamplerConfig& cfg, int M, std::uint64_t seed, int iteration,
                             std::vector<ChainState>* chains = nullptr)
{
    const int K = frame.K();
    PosteriorDraws out;
    out.draws.resize(K);
    out.acceptance.assign(K, 0.0);
    out.burn_in = cfg.burn_in;
    out.M = M;
    if (chains && static_cast<int>(chains->size()) != K) chains->assign(K, ChainState{});
    std::vector<std::string> errors(K);
#pragma omp parallel for schedule(dynamic)
    for (int k = 0; k < K; ++k) {
        try {
            const GroupTerms g = group_terms(frame, k, theta);
            auto rng = make_stream(seed, static_cast<std::uint64_t>(k), static_cast<std::uint64_t>(iteration));
            SampleStats st;
            out.draws[k] = sample_posterior(g, family, cfg, M, rng, chains ? &(*chains)[k] : nullptr, &st);
            out.acceptance[k] = st.acceptance_rate;
        } catch (const std::exception& e) {
            errors[k] = e.what();
        }
    }
    for (int k = 0; k < K; ++k) {
        if (!errors[k].empty()) throw NumericalError("E-step, group " + std::to_string(k + 1) + ": " + errors[k]);
    }
    return out;
}

/**
 * Q1 ~ -(1/M) sum_m sum_k log f(y_k | X_k, alpha_k^(m); theta), the Monte Carlo
 * average of the negative complete-data log-likelihood.
 */
inline double q1_estimate(const PosteriorDraws& draws, const ModelFrame& frame, const ThetaState& theta,
                          const Family& family)
{
    if (draws.K() != frame.K()) throw DimensionError("q1_estimate: draws and data disagree on K");
    double total = 0.0;
    for (int k = 0; k < frame.K(); ++k) {
        const GroupTerms g = group_terms(frame, k, theta);
        const Eigen::MatrixXd& A = draws.draws[k];
        if (A.rows() == 0) continue;
        const Eigen::MatrixXd eta = (g.loadings * A.transpose()).colwise() + g.offset; // n_k x M
        double sum = 0.0;
        for (Eigen::Index m = 0; m < eta.cols(); ++m)
            for (Eigen::Index i = 0; i < eta.rows(); ++i)
                sum += log_density_unchecked(family, g.y(i), eta(i, m), theta.tau);
        total -= sum / static_cast<double>(A.rows());
    }
    return total;
}

inline double q1_estimate(const PosteriorDraws& draws, const GroupedDataset& data, const ThetaState& theta,
                          const Family& family)
{
    return q1_estimate(draws, make_frame(data), theta, family);
}

} // namespace glmmfa
