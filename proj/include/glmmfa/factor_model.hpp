#pragma once
#include <glmmfa/data.hpp>
#include <glmmfa/errors.hpp>
#include <glmmfa/glm.hpp>
#include <glmmfa/penalties.hpp>
#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

namespace glmmfa {

/// Row-stacked b = (b_1^T, ..., b_q^T)^T of a q x r loading matrix.
inline Eigen::VectorXd stack_rows(const Eigen::MatrixXd& B)
{
    Eigen::VectorXd b(B.size());
    for (Eigen::Index t = 0; t < B.rows(); ++t) b.segment(t * B.cols(), B.cols()) = B.row(t).transpose();
    return b;
}

inline Eigen::MatrixXd unstack_rows(const Eigen::VectorXd& b, int q, int r)
{
    if (b.size() != static_cast<Eigen::Index>(q) * r) throw DimensionError("unstack_rows: size mismatch");
    Eigen::MatrixXd B(q, r);
    for (int t = 0; t < q; ++t) B.row(t) = b.segment(t * r, r).transpose();
    return B;
}

/**
 * The permutation J with vec(B) = J b, stored as an index map:
 * vec(B)[i] = b[perm[i]]. vec() stacks columns, b stacks rows.
 */
struct PermutationJ
{
    int q = 0;
    int r = 0;
    std::vector<int> perm;

    Eigen::VectorXd apply(const Eigen::VectorXd& b) const
    {
        Eigen::VectorXd out(b.size());
        for (std::size_t i = 0; i < perm.size(); ++i) out(i) = b(perm[i]);
        return out;
    }

    Eigen::VectorXd apply_inverse(const Eigen::VectorXd& vec_b) const
    {
        Eigen::VectorXd out(vec_b.size());
        for (std::size_t i = 0; i < perm.size(); ++i) out(perm[i]) = vec_b(i);
        return out;
    }

    /// Dense (qr) x (qr) matrix, for diagnostics and tests.
    Eigen::MatrixXd matrix() const
    {
        Eigen::MatrixXd J = Eigen::MatrixXd::Zero(perm.size(), perm.size());
        for (std::size_t i = 0; i < perm.size(); ++i) J(i, perm[i]) = 1.0;
        return J;
    }
};

inline PermutationJ build_J(int q, int r)
{
    if (q < 1 || r < 1) throw DimensionError("build_J requires q >= 1 and r >= 1");
    PermutationJ J{q, r, std::vector<int>(static_cast<std::size_t>(q) * r)};
    for (int c = 0; c < r; ++c)
        for (int t = 0; t < q; ++t) J.perm[c * q + t] = t * r + c;
    return J;
}

/// eta = x^T beta + z^T B alpha, where x includes the leading 1 for the intercept.
inline double linear_predictor(const Eigen::Ref<const Eigen::VectorXd>& beta,
                               const Eigen::Ref<const Eigen::MatrixXd>& B,
                               const Eigen::Ref<const Eigen::VectorXd>& alpha,
                               const Eigen::Ref<const Eigen::VectorXd>& x,
                               const Eigen::Ref<const Eigen::VectorXd>& z)
{
    if (x.size() != beta.size() || z.size() != B.rows() || alpha.size() != B.cols()) {
        throw DimensionError("linear_predictor: dimensions of beta/x, z/B or alpha/B disagree");
    }
    return x.dot(beta) + z.dot(B * alpha);
}

/**
 * Augmented design for one observation: row m is (alpha_m kron z)^T J, so that
 * row m dotted with the row-stacked b equals z^T B alpha_m.
 */
inline Eigen::MatrixXd augmented_design(const Eigen::Ref<const Eigen::VectorXd>& z,
                                        const Eigen::Ref<const Eigen::MatrixXd>& alpha_draws,
                                        const PermutationJ& J)
{
    const int q = static_cast<int>(z.size());
    const int r = static_cast<int>(alpha_draws.cols());
    if (q != J.q || r != J.r) throw DimensionError("augmented_design: dimensions disagree with J");
    Eigen::MatrixXd A(alpha_draws.rows(), q * r);
    for (Eigen::Index m = 0; m < alpha_draws.rows(); ++m) {
        for (int c = 0; c < r; ++c) {
            for (int t = 0; t < q; ++t) {
                // (alpha kron z)[c*q + t] = alpha_c z_t, moved to position perm[c*q + t]
                A(m, J.perm[c * q + t]) = alpha_draws(m, c) * z(t);
            }
        }
    }
    return A;
}

inline Eigen::MatrixXd implied_covariance(const Eigen::MatrixXd& B)
{
    return B * B.transpose();
}

/// q x K matrix of centered per-group coefficient estimates.
struct PseudoEffectsMatrix
{
    Eigen::MatrixXd G;
    std::vector<int> groups_used; // 1-based labels of the columns of G
    std::vector<std::string> warnings;
};

/**
 * Pseudo random effects: fits an elastic-net GLM (pi = 0.5, LASSO part) to each
 * group alone over the random-effect candidate columns, with
 * lambda = lambda_fraction * lambda_max_k, then centers each row across groups.
 * A group whose fit diverges is dropped with a warning as long as at least K - 2
 * groups remain.
 */
inline PseudoEffectsMatrix pseudo_random_effects(const GroupedDataset& data, const Family& family,
                                                 double lambda_fraction = 0.01, double pi = 0.5)
{
    const ModelFrame frame = make_frame(data);
    const int K = frame.K();
    const int q = frame.q();
    std::vector<int> slope_cols; // positions in z_columns of non-intercept columns
    for (int t = 0; t < q; ++t)
        if (frame.z_columns[t] != kIntercept) slope_cols.push_back(t);

    for (int k = 0; k < K; ++k) {
        if (frame.size[k] < 2) {
            throw DataError("pseudo random effects need at least 2 observations in group " +
                            std::to_string(k + 1));
        }
    }

    PseudoEffectsMatrix out;
    Eigen::MatrixXd G(q, K);
    std::vector<char> ok(K, 1);
    for (int k = 0; k < K; ++k) {
        const int n = frame.size[k];
        const int s = frame.start[k];
        Eigen::MatrixXd Xk(n, static_cast<Eigen::Index>(slope_cols.size()));
        for (std::size_t j = 0; j < slope_cols.size(); ++j) Xk.col(j) = frame.Z.col(slope_cols[j]).segment(s, n);
        const Eigen::VectorXd yk = frame.y.segment(s, n);
        const Eigen::VectorXd wk = Eigen::VectorXd::Ones(n);
        const double lmax = glm_lambda_max(Xk, yk, wk, family, pi);
        const PenaltySpec spec{PenaltyKind::Lasso, lambda_fraction * lmax, 3.0, pi};
        const GlmFit fit = fit_penalized_glm(Xk, yk, wk, family, spec);
        if (!fit.coef.allFinite() || !fit.converged) {
            ok[k] = 0;
            continue;
        }
        for (int t = 0, j = 0; t < q; ++t) {
            G(t, k) = frame.z_columns[t] == kIntercept ? fit.coef(0) : fit.coef(1 + j++);
        }
    }

    int n_ok = 0;
    for (int k = 0; k < K; ++k) n_ok += ok[k];
    if (n_ok < K) {
        if (n_ok < K - 2 || n_ok < 2) {
            throw NumericalError("pseudo random effects: " + std::to_string(K - n_ok) +
                                 " group fits diverged");
        }
        for (int k = 0; k < K; ++k) {
            if (!ok[k]) out.warnings.push_back("group " + std::to_string(k + 1) + " fit diverged; excluded");
        }
    }
    out.G.resize(q, n_ok);
    for (int k = 0, c = 0; k < K; ++k) {
        if (!ok[k]) continue;
        out.G.col(c++) = G.col(k);
        out.groups_used.push_back(k + 1);
    }
    const Eigen::VectorXd row_means = out.G.rowwise().mean();
    out.G.colwise() -= row_means;
    return out;
}

struct GrowthRatioResult
{
    int r_hat = 0;
    Eigen::VectorXd gr_values;   // GR(1..U_used)
    Eigen::VectorXd eigenvalues; // of G G^T / (qK), descending, length min(q, K)
    int U_used = 0;
    std::vector<std::string> warnings;
};

/// min(floor(min(q, K) / 2), 15), at least 1.
inline int default_growth_ratio_U(int q, int K)
{
    return std::max(1, std::min(std::min(q, K) / 2, 15));
}

/**
 * Growth Ratio estimate of the number of factors from a q x K pseudo-effects matrix.
 * GR(j) = log(1 + mu*_j) / log(1 + mu*_{j+1}) with mu*_j = mu_j / V(j) and
 * V(j) = sum_{l > j} mu_l; the estimate is the maximizing j in 1..U.
 */
inline GrowthRatioResult growth_ratio(const Eigen::MatrixXd& G, int U)
{
    const Eigen::Index q = G.rows();
    const Eigen::Index K = G.cols();
    const Eigen::Index m = std::min(q, K);
    if (q == 0 || K == 0) throw DimensionError("growth_ratio: empty matrix");
    if (U < 1 || U >= m) {
        throw ConfigError("growth_ratio: U must satisfy 1 <= U < min(q, K) = " + std::to_string(m));
    }
    if (G.cwiseAbs().maxCoeff() == 0.0) throw NumericalError("growth_ratio: pseudo-effects matrix is all zero");

    // Smaller Gram matrix; the non-zero spectra coincide.
    const double denom = static_cast<double>(q) * static_cast<double>(K);
    Eigen::MatrixXd gram = K < q ? Eigen::MatrixXd(G.transpose() * G / denom)
                                 : Eigen::MatrixXd(G * G.transpose() / denom);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(gram, Eigen::EigenvaluesOnly);
    Eigen::VectorXd ev = es.eigenvalues().reverse().head(m).cwiseMax(0.0);

    GrowthRatioResult res;
    res.eigenvalues = ev;
    // V(j) for j = 0..m
    Eigen::VectorXd V = Eigen::VectorXd::Zero(m + 1);
    for (Eigen::Index j = m - 1; j >= 0; --j) V(j) = V(j + 1) + ev(j);
    const double tiny = 1e-14 * V(0);

    auto growth = [&](Eigen::Index j) { return std::log1p(ev(j - 1) / V(j)); };
    int U_used = 0;
    bool truncated = false;
    std::vector<double> gr;
    for (int j = 1; j <= U; ++j) {
        if (V(j + 1) <= tiny || ev(j) <= tiny) {
            res.warnings.push_back("remaining eigenvalue mass vanished at j = " + std::to_string(j) +
                                   "; U truncated to " + std::to_string(U_used));
            truncated = true;
            break;
        }
        gr.push_back(growth(j) / growth(j + 1));
        ++U_used;
    }
    res.U_used = U_used;
    if (truncated) {
        // The spectrum has exact finite rank; the ratio at that rank is unbounded.
        int rank = 0;
        for (Eigen::Index j = 0; j < m; ++j) rank += ev(j) > tiny ? 1 : 0;
        res.r_hat = std::max(1, rank);
        if (U_used > 0) res.gr_values = Eigen::Map<Eigen::VectorXd>(gr.data(), U_used);
        return res;
    }
    res.gr_values = Eigen::Map<Eigen::VectorXd>(gr.data(), U_used);
    Eigen::Index best;
    res.gr_values.maxCoeff(&best);
    res.r_hat = static_cast<int>(best) + 1;
    return res;
}

} // namespace glmmfa
