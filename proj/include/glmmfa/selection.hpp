#pragma once
#include <glmmfa/data.hpp>
#include <glmmfa/errors.hpp>
#include <glmmfa/factor_model.hpp>
#include <glmmfa/family.hpp>
#include <glmmfa/glm.hpp>
#include <glmmfa/mcecm.hpp>
#include <glmmfa/penalties.hpp>
#include <glmmfa/posterior.hpp>
#include <Eigen/Dense>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

namespace glmmfa {

/// S1 holds column indices of selected fixed effects (0 = intercept, always present);
/// S2 holds the column indices of random effects whose loading row is nonzero.
struct SelectedSets
{
    std::vector<int> S1;
    std::vector<int> S2;
};

/// Row t of B is reported as z_columns[t]; an empty z_columns means row t is column t.
inline SelectedSets select_effects(const ThetaState& theta, double tol = 0.0, const std::vector<int>& z_columns = {})
{
    SelectedSets s;
    s.S1.push_back(kIntercept);
    for (int j = 1; j <= theta.p(); ++j)
        if (std::abs(theta.beta(j)) > tol) s.S1.push_back(j);
    for (int t = 0; t < theta.q(); ++t) {
        if (theta.B.row(t).norm() > tol) s.S2.push_back(z_columns.empty() ? t : z_columns[t]);
    }
    std::sort(s.S2.begin(), s.S2.end());
    return s;
}

/// Smallest lambda zeroing every slope of the fixed-effects-only penalized GLM.
inline double lambda_max(const ModelFrame& frame, const Family& family, double pi = 1.0)
{
    const Eigen::MatrixXd X = frame.X1.rightCols(frame.p());
    const double lm = glm_lambda_max(X, frame.y, frame.weight, family, pi);
    if (!(lm > 0.0)) throw NumericalError("lambda_max is zero; the response carries no signal");
    return lm;
}

/// n values log-spaced from lmax down to ratio * lmax, descending.
inline std::vector<double> lambda_grid(double lmax, int n = 10, double ratio = 0.05)
{
    if (n < 1 || !(lmax > 0.0) || !(ratio > 0.0 && ratio <= 1.0)) throw ConfigError("invalid lambda grid settings");
    std::vector<double> g(n);
    if (n == 1) {
        g[0] = lmax;
        return g;
    }
    for (int i = 0; i < n; ++i) g[i] = lmax * std::pow(ratio, static_cast<double>(i) / (n - 1));
    return g;
}

/// Dataset restricted to a subset of its random-effect candidates (positions into z_columns).
inline GroupedDataset restrict_random_effects(const GroupedDataset& data, const std::vector<int>& keep)
{
    GroupedDataset out = data;
    out.z_columns.clear();
    for (int t : keep) out.z_columns.push_back(data.z_columns.at(t));
    return out;
}

inline ModelFrame restrict_frame(const ModelFrame& frame, const std::vector<int>& keep)
{
    ModelFrame out = frame;
    out.Z.resize(frame.N(), static_cast<Eigen::Index>(keep.size()));
    out.z_columns.clear();
    out.intercept_row = -1;
    for (std::size_t i = 0; i < keep.size(); ++i) {
        out.Z.col(i) = frame.Z.col(keep[i]);
        out.z_columns.push_back(frame.z_columns[keep[i]]);
        if (frame.z_columns[keep[i]] == kIntercept) out.intercept_row = static_cast<int>(i);
    }
    return out;
}

/// Settings shared by every fit of a selection run.
struct SelectionOptions
{
    PenaltyKind penalty = PenaltyKind::MCP;
    double gamma0 = 3.0;
    double gamma1 = 3.0;
    double pi = 1.0;
    int r = 1;
    int grid_size = 10;
    double grid_ratio = 0.05;
    int prescreen_em_iter = 15;
    /// lambda1 used by the prescreen fit, as a fraction of lambda_max.
    double prescreen_lambda1_fraction = 0.2;
    double prescreen_drop_ratio = 1e-2;
    double init_c = 0.1;

    PenaltySpec spec0(double lambda) const { return {penalty, lambda, gamma0, pi}; }
    PenaltySpec spec1(double lambda) const { return {penalty, lambda, gamma1, pi}; }
};

struct PrescreenResult
{
    std::vector<int> retained; // positions into the input candidate list
    std::vector<double> norms;
    ThetaState theta;
};

namespace detail {

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index)
{
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (index + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

/// Warm start: copy theta and give zero loading rows a small nonzero value again.
inline ThetaState reseed_rows(ThetaState theta, double c)
{
    for (int t = 0; t < theta.q(); ++t) {
        if (theta.B.row(t).squaredNorm() == 0.0) theta.B(t, t % theta.r()) = c;
    }
    return theta;
}

} // namespace detail

/**
 * Fits one model at (lambda0_min, moderate lambda1) with a short EM budget and keeps
 * the candidate rows whose loading norm is at least drop_ratio times the largest one.
 * The intercept row is always kept; if nothing survives the intercept alone remains.
 */
inline PrescreenResult prescreen(const ModelFrame& frame, const Family& family, const SamplerConfig& sampler,
                                 std::uint64_t seed, const SelectionOptions& opt = {}, FitControl ctrl = {},
                                 std::optional<double> lambda0 = std::nullopt,
                                 std::optional<double> lambda1 = std::nullopt)
{
    const double lmax = lambda_max(frame, family, opt.pi);
    const double l0 = lambda0.value_or(lmax * opt.grid_ratio);
    const double l1 = lambda1.value_or(lmax * opt.prescreen_lambda1_fraction);
    ctrl.max_em_iter = opt.prescreen_em_iter;
    ctrl.final_estep = false;
    const ThetaState init = initialize(frame, family, opt.spec0(l0), opt.r, opt.init_c);
    const FitResult fit =
        fit_mcecm(frame, family, opt.spec0(l0), opt.spec1(l1), init, ctrl, sampler, detail::derive_seed(seed, 7777));

    PrescreenResult out;
    out.theta = fit.theta;
    double max_norm = 0.0;
    for (int t = 0; t < frame.q(); ++t) {
        out.norms.push_back(fit.theta.B.row(t).norm());
        if (t != frame.intercept_row) max_norm = std::max(max_norm, out.norms.back());
    }
    for (int t = 0; t < frame.q(); ++t) {
        const bool keep = t == frame.intercept_row ||
                          (max_norm > 0.0 && out.norms[t] >= opt.prescreen_drop_ratio * max_norm);
        if (keep) out.retained.push_back(t);
    }
    if (out.retained.empty()) {
        // no intercept candidate and nothing survived: keep the strongest row so r stays meaningful
        const auto it = std::max_element(out.norms.begin(), out.norms.end());
        out.retained.push_back(static_cast<int>(it - out.norms.begin()));
    }
    return out;
}

/// Orthogonal Q minimizing ||B_fit Q - B_ref||_F.
inline Eigen::MatrixXd procrustes_rotation(const Eigen::MatrixXd& B_fit, const Eigen::MatrixXd& B_ref)
{
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(B_fit.transpose() * B_ref, Eigen::ComputeFullU | Eigen::ComputeFullV);
    return svd.matrixU() * svd.matrixV().transpose();
}

inline int df_fixed(const ThetaState& theta)
{
    int df = 0;
    for (Eigen::Index j = 0; j < theta.beta.size(); ++j) df += theta.beta(j) != 0.0 ? 1 : 0;
    return df;
}

inline int df_random(const ThetaState& theta)
{
    int df = 0;
    for (Eigen::Index i = 0; i < theta.B.size(); ++i) df += theta.B.data()[i] != 0.0 ? 1 : 0;
    return df;
}

/**
 * BIC-ICQ = -2 * (M-averaged complete-data log-likelihood of the fit's theta against the
 * reference model's posterior draws) + log(N) * (nonzero beta + nonzero b entries).
 * The fit's loadings are first rotated onto the reference loadings, which makes the
 * criterion independent of the arbitrary rotation of the latent factors.
 */
inline double bic_icq(const FitResult& fit, const FitResult& reference, const ModelFrame& frame,
                      const Family& family)
{
    if (reference.final_draws.K() != frame.K() || reference.final_draws.M == 0) {
        throw NumericalError("bic_icq: reference posterior draws are missing");
    }
    if (fit.theta.q() != reference.theta.q() || fit.theta.r() != reference.theta.r()) {
        throw DimensionError("bic_icq: fit and reference have different loading shapes");
    }
    ThetaState aligned = fit.theta;
    aligned.B = fit.theta.B * procrustes_rotation(fit.theta.B, reference.theta.B);
    const double q1 = q1_estimate(reference.final_draws, frame, aligned, family);
    const double df = df_fixed(fit.theta) + df_random(fit.theta);
    return 2.0 * q1 + std::log(static_cast<double>(frame.N())) * df;
}

struct PathEntry
{
    double lambda0 = 0.0;
    double lambda1 = 0.0;
    int stage = 0;
    bool failed = false;
    std::string message;
    FitResult fit;
    double bic_icq = std::numeric_limits<double>::infinity();
    int df_fixed = 0;
    int df_random = 0;
};

struct SelectionPath
{
    std::vector<PathEntry> entries;
    int best_index = -1;
    FitResult reference_fit;

    const PathEntry& best() const { return entries.at(best_index); }
};

namespace detail {

/// Lower bic wins; ties go to the larger (lambda0, lambda1).
inline bool better(const PathEntry& a, const PathEntry& b)
{
    if (a.failed != b.failed) return !a.failed;
    if (a.bic_icq != b.bic_icq) return a.bic_icq < b.bic_icq;
    if (a.lambda0 != b.lambda0) return a.lambda0 > b.lambda0;
    return a.lambda1 > b.lambda1;
}

} // namespace detail

/**
 * Abbreviated two-stage grid search. Stage 1 fixes lambda0 at its smallest grid value
 * and sweeps lambda1 from large to small; stage 2 fixes the stage-1 winner for lambda1
 * and sweeps lambda0. Each fit starts from the previous grid point's theta. The best
 * entry minimizes BIC-ICQ against a reference fit at the smallest penalties.
 */
inline SelectionPath grid_search(const ModelFrame& frame, const Family& family, std::vector<double> lambda0_grid,
                                 std::vector<double> lambda1_grid, const FitControl& ctrl,
                                 const SamplerConfig& sampler, std::uint64_t seed, const SelectionOptions& opt,
                                 const ThetaState* start = nullptr)
{
    if (lambda0_grid.empty() || lambda1_grid.empty()) throw ConfigError("grid_search: empty lambda grid");
    std::sort(lambda0_grid.rbegin(), lambda0_grid.rend());
    std::sort(lambda1_grid.rbegin(), lambda1_grid.rend());
    const double l0_min = lambda0_grid.back();
    const double l1_min = lambda1_grid.back();

    SelectionPath path;
    std::vector<ChainState> chains;
    const ThetaState init0 = start ? *start : initialize(frame, family, opt.spec0(l0_min), opt.r, opt.init_c);

    FitControl ref_ctrl = ctrl;
    ref_ctrl.final_estep = true;
    path.reference_fit = fit_mcecm(frame, family, opt.spec0(l0_min), opt.spec1(l1_min), init0, ref_ctrl, sampler,
                                   detail::derive_seed(seed, 0), &chains);

    FitControl grid_ctrl = ctrl;
    grid_ctrl.final_estep = false;
    std::uint64_t fit_index = 1;
    ThetaState warm = init0;
    std::vector<std::vector<ChainState>> chain_snapshots;
    auto run = [&](double l0, double l1, int stage) {
        PathEntry e;
        e.lambda0 = l0;
        e.lambda1 = l1;
        e.stage = stage;
        try {
            e.fit = fit_mcecm(frame, family, opt.spec0(l0), opt.spec1(l1), detail::reseed_rows(warm, opt.init_c),
                              grid_ctrl, sampler, detail::derive_seed(seed, fit_index++), &chains);
            e.bic_icq = bic_icq(e.fit, path.reference_fit, frame, family);
            e.df_fixed = df_fixed(e.fit.theta);
            e.df_random = df_random(e.fit.theta);
        } catch (const NumericalError& err) {
            e.failed = true;
            e.message = err.what();
        }
        path.entries.push_back(std::move(e));
    };

    // stage 1: lambda1 descending at the smallest lambda0, each fit warm-started from the last
    for (double l1 : lambda1_grid) {
        run(l0_min, l1, 1);
        if (!path.entries.back().failed) warm = path.entries.back().fit.theta;
        chain_snapshots.push_back(chains);
    }
    int stage1_best = -1;
    for (int i = 0; i < static_cast<int>(path.entries.size()); ++i) {
        if (stage1_best < 0 || detail::better(path.entries[i], path.entries[stage1_best])) stage1_best = i;
    }
    const double l1_star = path.entries[stage1_best].lambda1;

    // Stage 2 walks lambda0 upward from the stage-1 winner, warm-starting each fit from
    // the previous one. Walking down from a lambda0 that zeroes beta instead lets the
    // random effects absorb the fixed effects for the rest of the path.
    if (!path.entries[stage1_best].failed) warm = path.entries[stage1_best].fit.theta;
    chains = chain_snapshots[stage1_best];
    for (auto it = lambda0_grid.rbegin(); it != lambda0_grid.rend(); ++it) {
        if (*it == l0_min) continue; // already fitted in stage 1
        run(*it, l1_star, 2);
        if (!path.entries.back().failed) warm = path.entries.back().fit.theta;
    }

    for (int i = 0; i < static_cast<int>(path.entries.size()); ++i) {
        if (path.best_index < 0 || detail::better(path.entries[i], path.entries[path.best_index])) path.best_index = i;
    }
    if (path.entries[path.best_index].failed) throw NumericalError("grid_search: every grid fit failed");
    return path;
}

/// How the number of latent factors is chosen.
struct RankOptions
{
    bool growth_ratio = true;
    int fixed_r = 0;
    int U = 0; // 0 = default_growth_ratio_U
    double pseudo_lambda_fraction = 0.01;
};

inline int choose_rank(const GroupedDataset& data, const Family& family, const RankOptions& ro,
                       std::optional<GrowthRatioResult>* gr_out = nullptr)
{
    if (!ro.growth_ratio) {
        if (ro.fixed_r < 1) throw ConfigError("fixed r must be >= 1");
        return ro.fixed_r;
    }
    const auto pe = pseudo_random_effects(data, family, ro.pseudo_lambda_fraction);
    const int q = static_cast<int>(pe.G.rows());
    const int K = static_cast<int>(pe.G.cols());
    if (std::min(q, K) < 2) return 1;
    const int U = ro.U > 0 ? ro.U : default_growth_ratio_U(q, K);
    auto gr = growth_ratio(pe.G, U);
    gr.warnings.insert(gr.warnings.begin(), pe.warnings.begin(), pe.warnings.end());
    const int r = gr.r_hat;
    if (gr_out) *gr_out = std::move(gr);
    return r;
}

/// Everything a full selection run produces. theta is expressed on the full candidate list.
struct SelectionReport
{
    SelectionPath path;
    ThetaState theta;
    SelectedSets sets;
    int r_used = 0;
    std::optional<GrowthRatioResult> growth_ratio;
    std::vector<int> retained; // positions into data.z_columns
    std::vector<double> prescreen_norms;
    std::vector<double> lambda0_grid;
    std::vector<double> lambda1_grid;
    double timing = 0.0;
};

/**
 * Rank choice, prescreening, two-stage grid search and extraction of the selected
 * sets for a standardized dataset.
 */
inline SelectionReport run_selection(const GroupedDataset& data, const Family& family, const RankOptions& ro,
                                     SelectionOptions opt, const FitControl& ctrl, const SamplerConfig& sampler,
                                     std::uint64_t seed, bool do_prescreen = true)
{
    const auto t0 = std::chrono::steady_clock::now();
    validate_dataset(data, family);
    SelectionReport rep;
    rep.r_used = choose_rank(data, family, ro, &rep.growth_ratio);
    opt.r = rep.r_used;

    const ModelFrame full = make_frame(data);
    const double lmax = lambda_max(full, family, opt.pi);
    rep.lambda0_grid = lambda_grid(lmax, opt.grid_size, opt.grid_ratio);
    rep.lambda1_grid = rep.lambda0_grid;

    if (do_prescreen) {
        const auto ps = prescreen(full, family, sampler, seed, opt, ctrl, rep.lambda0_grid.back());
        rep.retained = ps.retained;
        rep.prescreen_norms = ps.norms;
    } else {
        for (int t = 0; t < full.q(); ++t) rep.retained.push_back(t);
    }
    const ModelFrame frame = restrict_frame(full, rep.retained);
    rep.path = grid_search(frame, family, rep.lambda0_grid, rep.lambda1_grid, ctrl, sampler, seed, opt);

    const ThetaState& best = rep.path.best().fit.theta;
    rep.theta.beta = best.beta;
    rep.theta.tau = best.tau;
    rep.theta.B = Eigen::MatrixXd::Zero(full.q(), best.r());
    for (std::size_t i = 0; i < rep.retained.size(); ++i) rep.theta.B.row(rep.retained[i]) = best.B.row(i);
    rep.sets = select_effects(rep.theta, 0.0, data.z_columns);
    rep.timing = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return rep;
}

} // namespace glmmfa
