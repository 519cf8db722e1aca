#pragma once
#include <glmmfa/data.hpp>
#include <glmmfa/errors.hpp>
#include <glmmfa/factor_model.hpp>
#include <glmmfa/family.hpp>
#include <glmmfa/selection.hpp>
#include <Eigen/Dense>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <random>
#include <set>
#include <string>
#include <vector>

namespace glmmfa {

enum class BKind
{
    Large,
    Moderate,
};

inline std::string to_string(BKind k) { return k == BKind::Large ? "large" : "moderate"; }

inline BKind bkind_from_string(const std::string& s)
{
    if (s == "large") return BKind::Large;
    if (s == "moderate") return BKind::Moderate;
    throw ConfigError("unknown B kind '" + s + "' (expected large or moderate)");
}

/**
 * Loading matrix of the simulation designs with q rows (intercept first). The first
 * block of rows holds the design pattern (11 rows for the binomial designs, 6 for the
 * Poisson design) and every remaining row is zero.
 */
inline Eigen::MatrixXd b_matrix(BKind kind, int r, FamilyKind family, int q)
{
    Eigen::MatrixXd block;
    if (family == FamilyKind::BinomialLogit) {
        if (r == 3) {
            block.resize(3, 11);
            block << 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1,
                     0, -1, -1, -1, -1, -1, 1, 1, 1, 1, 1,
                     -2, 2, -1, 0, 1, -1, 0, 1, -1, 0, 1;
        } else if (r == 5) {
            block.resize(5, 11);
            block << 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1,
                     0, -1, -1, -1, -1, -1, 1, 1, 1, 1, 1,
                     -2, 2, -1, 0, 1, -1, 0, 1, -1, 0, 1,
                     -1, 1, 1, -1, -1, 1, 1, -1, -1, 1, -1,
                     -1, -1, 0, 1, 1, -1, -1, 0, 1, 1, -2;
        } else {
            throw ConfigError("binomial designs exist for r = 3 and r = 5 only");
        }
        if (kind == BKind::Moderate) block *= r == 3 ? 0.75 : 0.80;
    } else if (family == FamilyKind::PoissonLog) {
        if (r != 3 || kind != BKind::Moderate) throw ConfigError("the Poisson design is moderate with r = 3 only");
        block.resize(3, 6);
        block << 1, 1, 1, 1, 1, 1,
                 -1, -1, -1, 1, 1, 1,
                 -1, 0, 1, -1, 0, 1;
        block *= 0.75;
    } else {
        throw ConfigError("no simulation design for the Gaussian family");
    }
    if (q < block.cols()) {
        throw ConfigError("b_matrix needs q >= " + std::to_string(block.cols()) + " rows");
    }
    Eigen::MatrixXd B = Eigen::MatrixXd::Zero(q, r);
    B.topRows(block.cols()) = block.transpose();
    return B;
}

/// Generating parameters. Index 0 (the intercept) is always part of S1_true, and of
/// S2_true when its loading row is nonzero; the metrics leave it out.
struct SimTruth
{
    Eigen::VectorXd beta_true;
    Eigen::MatrixXd B_true;
    std::vector<int> S1_true;
    std::vector<int> S2_true;
    Eigen::MatrixXd alpha_true; // K x r latent factors, gamma_k = B_true alpha_k
    Family family;
    int N = 0;
    int K = 0;
    int p = 0;
    int r = 0;
};

namespace detail {

inline void fill_truth_sets(SimTruth& t)
{
    t.S1_true = {kIntercept};
    for (int j = 1; j <= t.p; ++j)
        if (t.beta_true(j) != 0.0) t.S1_true.push_back(j);
    t.S2_true.clear();
    for (int j = 0; j < t.B_true.rows(); ++j)
        if (t.B_true.row(j).norm() != 0.0) t.S2_true.push_back(j);
}

inline void check_design(int N, int K, int p, const Eigen::MatrixXd& B)
{
    if (K < 1 || N < K || N % K != 0) throw ConfigError("N must be a positive multiple of K");
    if (p < 1) throw ConfigError("p must be >= 1");
    if (B.rows() != p + 1) throw DimensionError("B must have p + 1 rows (intercept plus p predictors)");
}

} // namespace detail

/**
 * Logistic mixed model with equal group sizes: predictors N(0, 1) then standardized,
 * the first n_true slopes equal beta_effect and the rest zero, gamma_k = B alpha_k with
 * alpha_k ~ N(0, I), and every predictor plus the intercept a random-effect candidate.
 */
inline std::pair<GroupedDataset, SimTruth> simulate_binomial(int N, int K, int p, double beta_effect,
                                                             const Eigen::MatrixXd& B, std::uint64_t seed,
                                                             int n_true = 10)
{
    detail::check_design(N, K, p, B);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd;
    std::uniform_real_distribution<double> unif;

    Eigen::MatrixXd Xraw(N, p);
    for (int i = 0; i < N; ++i)
        for (int j = 0; j < p; ++j) Xraw(i, j) = nd(rng);
    auto [X, info] = standardize(Xraw);

    SimTruth truth;
    truth.family = Family::binomial();
    truth.N = N;
    truth.K = K;
    truth.p = p;
    truth.r = static_cast<int>(B.cols());
    truth.beta_true = Eigen::VectorXd::Zero(p + 1);
    for (int j = 1; j <= std::min(n_true, p); ++j) truth.beta_true(j) = beta_effect;
    truth.B_true = B;
    detail::fill_truth_sets(truth);

    GroupedDataset d;
    d.num_groups = K;
    d.X = X;
    d.y.resize(N);
    d.group.resize(N);
    d.z_columns = all_columns(p);
    const int n = N / K;
    truth.alpha_true.resize(K, truth.r);
    for (int k = 0; k < K; ++k) {
        Eigen::VectorXd alpha(truth.r);
        for (int c = 0; c < truth.r; ++c) alpha(c) = nd(rng);
        truth.alpha_true.row(k) = alpha.transpose();
        const Eigen::VectorXd gamma = B * alpha;
        for (int i = k * n; i < (k + 1) * n; ++i) {
            d.group[i] = k + 1;
            const double eta = truth.beta_true(0) + X.row(i).dot(truth.beta_true.tail(p)) + gamma(0) +
                               X.row(i).dot(gamma.tail(p));
            d.y(i) = unif(rng) < truth.family.mean(eta) ? 1.0 : 0.0;
        }
    }
    return {std::move(d), std::move(truth)};
}

/**
 * Poisson mixed model: raw predictors N(0, x_sd^2), the first n_true slopes equal
 * beta_effect, and y ~ Poisson(exp(eta)). The returned design is standardized and the
 * truth is re-expressed on the standardized scale (slopes and loading rows scale by the
 * column sd, the column means fold into the intercept and intercept row).
 */
inline std::pair<GroupedDataset, SimTruth> simulate_poisson(int N, int K, int p, const Eigen::MatrixXd& B,
                                                            std::uint64_t seed, int n_true = 5,
                                                            double beta_effect = 1.0, double x_sd = 0.10)
{
    detail::check_design(N, K, p, B);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd;
    const int r = static_cast<int>(B.cols());

    Eigen::MatrixXd Xraw(N, p);
    for (int i = 0; i < N; ++i)
        for (int j = 0; j < p; ++j) Xraw(i, j) = x_sd * nd(rng);
    Eigen::VectorXd beta_raw = Eigen::VectorXd::Zero(p + 1);
    for (int j = 1; j <= std::min(n_true, p); ++j) beta_raw(j) = beta_effect;

    GroupedDataset d;
    d.num_groups = K;
    d.y.resize(N);
    d.group.resize(N);
    d.z_columns = all_columns(p);
    const int n = N / K;
    Eigen::MatrixXd alphas(K, r);
    for (int k = 0; k < K; ++k) {
        Eigen::VectorXd alpha(r);
        for (int c = 0; c < r; ++c) alpha(c) = nd(rng);
        alphas.row(k) = alpha.transpose();
        const Eigen::VectorXd gamma = B * alpha;
        for (int i = k * n; i < (k + 1) * n; ++i) {
            d.group[i] = k + 1;
            const double eta = beta_raw(0) + Xraw.row(i).dot(beta_raw.tail(p)) + gamma(0) +
                               Xraw.row(i).dot(gamma.tail(p));
            std::poisson_distribution<long long> pois(std::exp(eta));
            d.y(i) = static_cast<double>(pois(rng));
        }
    }
    auto [X, info] = standardize(Xraw);
    d.X = X;

    SimTruth truth;
    truth.family = Family::poisson();
    truth.N = N;
    truth.K = K;
    truth.p = p;
    truth.r = r;
    truth.beta_true = beta_raw;
    truth.B_true = B;
    truth.alpha_true = alphas;
    for (int j = 1; j <= p; ++j) {
        truth.beta_true(0) += beta_raw(j) * info.means(j - 1);
        truth.beta_true(j) = beta_raw(j) * info.scales(j - 1);
        truth.B_true.row(0) += info.means(j - 1) * B.row(j);
        truth.B_true.row(j) = info.scales(j - 1) * B.row(j);
    }
    detail::fill_truth_sets(truth);
    return {std::move(d), std::move(truth)};
}

/// One row of the simulation tables; percentages exclude the intercept.
struct MetricsRow
{
    double tp_fixed_pct = 0.0;
    double fp_fixed_pct = 0.0;
    double tp_random_pct = 0.0;
    double fp_random_pct = 0.0;
    double mean_abs_dev = 0.0;
    double wall_hours = 0.0;
    int r_used = 0;
    int r_true = 0;
};

/**
 * TP% = 100 |S & S_true| / |S_true| and FP% = 100 |S \ S_true| / (candidates - |S_true|),
 * separately for fixed and random effects with the intercept left out; mean_abs_dev is
 * the mean of |beta_hat_j - beta*_j| over the p slopes.
 */
inline MetricsRow selection_metrics(const SelectedSets& est, const ThetaState& theta_hat, const SimTruth& truth,
                                    int random_candidates = -1)
{
    if (theta_hat.p() != truth.p) throw DimensionError("selection_metrics: p of estimate and truth differ");
    MetricsRow m;
    auto rates = [](const std::vector<int>& sel, const std::vector<int>& tru, int candidates, double& tp, double& fp) {
        std::set<int> t;
        for (int x : tru)
            if (x != kIntercept) t.insert(x);
        int hit = 0, miss = 0;
        for (int x : sel) {
            if (x == kIntercept) continue;
            if (t.count(x)) ++hit;
            else ++miss;
        }
        tp = t.empty() ? 100.0 : 100.0 * hit / static_cast<double>(t.size());
        const int nulls = candidates - static_cast<int>(t.size());
        fp = nulls > 0 ? 100.0 * miss / nulls : 0.0;
    };
    rates(est.S1, truth.S1_true, truth.p, m.tp_fixed_pct, m.fp_fixed_pct);
    rates(est.S2, truth.S2_true, random_candidates >= 0 ? random_candidates : truth.p, m.tp_random_pct,
          m.fp_random_pct);
    double dev = 0.0;
    for (int j = 1; j <= truth.p; ++j) dev += std::abs(theta_hat.beta(j) - truth.beta_true(j));
    m.mean_abs_dev = truth.p > 0 ? dev / truth.p : 0.0;
    m.r_true = truth.r;
    m.r_used = theta_hat.r();
    return m;
}

/// A simulation scenario and the estimation settings applied to each replicate.
struct Scenario
{
    std::string name = "p25";
    FamilyKind family = FamilyKind::BinomialLogit;
    int N = 2500;
    int K = 25;
    int p = 25;
    int r = 3;
    BKind b_kind = BKind::Moderate;
    double beta_effect = 1.0;
    int n_true = 10;
    RankOptions rank;
    SelectionOptions selection;
    FitControl control;
    SamplerConfig sampler;
    bool prescreen = true;
};

struct ReplicateResult
{
    int index = 0;
    std::uint64_t seed = 0;
    bool failed = false;
    std::string message;
    MetricsRow metrics;
    int r_hat = 0;
};

/// Mean metrics over completed replicates plus the rank accuracy summary.
struct ReplicationSummary
{
    MetricsRow mean;
    double median_wall_hours = 0.0;
    double mean_r_used = 0.0;
    double pct_r_under = 0.0;
    double pct_r_exact = 0.0;
    double pct_r_over = 0.0;
    int completed = 0;
    int failed = 0;
};

struct ReplicationTable
{
    std::vector<ReplicateResult> rows;
    ReplicationSummary summary;
};

inline std::pair<GroupedDataset, SimTruth> simulate_scenario(const Scenario& sc, std::uint64_t seed)
{
    const Eigen::MatrixXd B = b_matrix(sc.b_kind, sc.r, sc.family, sc.p + 1);
    if (sc.family == FamilyKind::PoissonLog) return simulate_poisson(sc.N, sc.K, sc.p, B, seed, sc.n_true, sc.beta_effect);
    return simulate_binomial(sc.N, sc.K, sc.p, sc.beta_effect, B, seed, sc.n_true);
}

inline ReplicationSummary summarize(const std::vector<ReplicateResult>& rows)
{
    ReplicationSummary s;
    std::vector<double> hours;
    for (const auto& r : rows) {
        if (r.failed) {
            ++s.failed;
            continue;
        }
        ++s.completed;
        s.mean.tp_fixed_pct += r.metrics.tp_fixed_pct;
        s.mean.fp_fixed_pct += r.metrics.fp_fixed_pct;
        s.mean.tp_random_pct += r.metrics.tp_random_pct;
        s.mean.fp_random_pct += r.metrics.fp_random_pct;
        s.mean.mean_abs_dev += r.metrics.mean_abs_dev;
        s.mean.wall_hours += r.metrics.wall_hours;
        s.mean_r_used += r.metrics.r_used;
        s.mean.r_true = r.metrics.r_true;
        if (r.metrics.r_used < r.metrics.r_true) s.pct_r_under += 1.0;
        else if (r.metrics.r_used == r.metrics.r_true) s.pct_r_exact += 1.0;
        else s.pct_r_over += 1.0;
        hours.push_back(r.metrics.wall_hours);
    }
    if (s.completed > 0) {
        const double n = s.completed;
        s.mean.tp_fixed_pct /= n;
        s.mean.fp_fixed_pct /= n;
        s.mean.tp_random_pct /= n;
        s.mean.fp_random_pct /= n;
        s.mean.mean_abs_dev /= n;
        s.mean.wall_hours /= n;
        s.mean_r_used /= n;
        s.pct_r_under *= 100.0 / n;
        s.pct_r_exact *= 100.0 / n;
        s.pct_r_over *= 100.0 / n;
        std::sort(hours.begin(), hours.end());
        const std::size_t h = hours.size();
        s.median_wall_hours = h % 2 ? hours[h / 2] : 0.5 * (hours[h / 2 - 1] + hours[h / 2]);
        s.mean.r_used = static_cast<int>(std::lround(s.mean_r_used));
    }
    return s;
}

/**
 * generate -> choose r -> prescreen -> grid search -> metrics, per replicate. Replicate i
 * uses the seed derived from (master_seed, i); failures are recorded and left out of
 * the means. `on_row` (optional) observes each finished replicate.
 */
template <typename Callback = std::nullptr_t>
inline ReplicationTable run_replications(const Scenario& sc, int n_reps, std::uint64_t master_seed,
                                         Callback on_row = nullptr)
{
    if (n_reps < 1) throw ConfigError("n_reps must be >= 1");
    ReplicationTable table;
    for (int i = 0; i < n_reps; ++i) {
        ReplicateResult row;
        row.index = i;
        row.seed = detail::derive_seed(master_seed, static_cast<std::uint64_t>(i));
        const auto t0 = std::chrono::steady_clock::now();
        try {
            auto [data, truth] = simulate_scenario(sc, row.seed);
            RankOptions ro = sc.rank;
            if (!ro.growth_ratio && ro.fixed_r < 1) ro.fixed_r = truth.r;
            const auto rep = run_selection(data, truth.family, ro, sc.selection, sc.control, sc.sampler,
                                           detail::derive_seed(row.seed, 99), sc.prescreen);
            row.metrics = selection_metrics(rep.sets, rep.theta, truth);
            row.r_hat = rep.r_used;
        } catch (const Error& e) {
            row.failed = true;
            row.message = e.what();
        }
        row.metrics.wall_hours = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / 3600.0;
        if constexpr (!std::is_same_v<Callback, std::nullptr_t>) on_row(row);
        table.rows.push_back(std::move(row));
    }
    table.summary = summarize(table.rows);
    return table;
}

} // namespace glmmfa
