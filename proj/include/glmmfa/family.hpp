#pragma once
#include <glmmfa/errors.hpp>
#include <cmath>
#include <limits>
#include <string>

namespace glmmfa {

enum class FamilyKind
{
    BinomialLogit,
    PoissonLog,
    GaussianIdentity,
};

/**
 * Exponential family with canonical link,
 *
 *      log f(y | eta) = log c(y, tau) + (y * eta - b(eta)) / tau.
 *
 * Binomial and Poisson fix the dispersion tau at 1; the Gaussian family
 * estimates it.
 */
struct Family
{
    FamilyKind kind = FamilyKind::BinomialLogit;

    static constexpr Family binomial() { return {FamilyKind::BinomialLogit}; }
    static constexpr Family poisson() { return {FamilyKind::PoissonLog}; }
    static constexpr Family gaussian() { return {FamilyKind::GaussianIdentity}; }

    constexpr bool dispersion_free() const { return kind == FamilyKind::GaussianIdentity; }

    /// Cumulant function b(eta).
    double cumulant(double eta) const
    {
        switch (kind) {
            case FamilyKind::BinomialLogit:
                // softplus, stable for large |eta|
                return eta > 0 ? eta + std::log1p(std::exp(-eta)) : std::log1p(std::exp(eta));
            case FamilyKind::PoissonLog:
                return std::exp(eta);
            case FamilyKind::GaussianIdentity:
                return 0.5 * eta * eta;
        }
        return 0.0;
    }

    /// Mean function b'(eta).
    double mean(double eta) const
    {
        switch (kind) {
            case FamilyKind::BinomialLogit:
                if (eta >= 0) return 1.0 / (1.0 + std::exp(-eta));
                else {
                    const double e = std::exp(eta);
                    return e / (1.0 + e);
                }
            case FamilyKind::PoissonLog:
                return std::exp(eta);
            case FamilyKind::GaussianIdentity:
                return eta;
        }
        return 0.0;
    }

    /// Variance function b''(eta).
    double variance(double eta) const
    {
        switch (kind) {
            case FamilyKind::BinomialLogit: {
                const double mu = mean(eta);
                return mu * (1.0 - mu);
            }
            case FamilyKind::PoissonLog:
                return std::exp(eta);
            case FamilyKind::GaussianIdentity:
                return 1.0;
        }
        return 0.0;
    }

    /// Canonical link g(mu), used to seed intercepts.
    double link(double mu) const
    {
        switch (kind) {
            case FamilyKind::BinomialLogit: return std::log(mu / (1.0 - mu));
            case FamilyKind::PoissonLog: return std::log(mu);
            case FamilyKind::GaussianIdentity: return mu;
        }
        return 0.0;
    }

    bool valid_response(double y) const
    {
        if (!std::isfinite(y)) return false;
        switch (kind) {
            case FamilyKind::BinomialLogit: return y == 0.0 || y == 1.0;
            case FamilyKind::PoissonLog: return y >= 0.0 && y == std::floor(y);
            case FamilyKind::GaussianIdentity: return true;
        }
        return false;
    }

    /// log c(y, tau). Zero for Binomial, -log(y!) for Poisson.
    double log_base_measure(double y, double tau) const
    {
        switch (kind) {
            case FamilyKind::BinomialLogit: return 0.0;
            case FamilyKind::PoissonLog: return -std::lgamma(y + 1.0);
            case FamilyKind::GaussianIdentity:
                return -0.5 * y * y / tau - 0.5 * std::log(2.0 * M_PI * tau);
        }
        return 0.0;
    }

    /// b(eta) and b'(eta) together, sharing one exponential.
    void cumulant_and_mean(double eta, double& b, double& mu) const
    {
        switch (kind) {
            case FamilyKind::BinomialLogit: {
                const double t = std::exp(-std::abs(eta));
                const double sp = std::log1p(t);
                if (eta >= 0) {
                    b = eta + sp;
                    mu = 1.0 / (1.0 + t);
                } else {
                    b = sp;
                    mu = t / (1.0 + t);
                }
                return;
            }
            case FamilyKind::PoissonLog:
                mu = std::exp(eta);
                b = mu;
                return;
            case FamilyKind::GaussianIdentity:
                b = 0.5 * eta * eta;
                mu = eta;
                return;
        }
    }

    /// y * eta - b(eta), written to avoid cancellation for the logit at large |eta|.
    double natural_term(double y, double eta) const
    {
        if (kind == FamilyKind::BinomialLogit) {
            auto softplus = [](double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); };
            return -(1.0 - y) * softplus(eta) - y * softplus(-eta);
        }
        return y * eta - cumulant(eta);
    }

    /// Upper bound on b''(eta) when one exists (used as majorization weight).
    double curvature_bound() const
    {
        switch (kind) {
            case FamilyKind::BinomialLogit: return 0.25;
            case FamilyKind::GaussianIdentity: return 1.0;
            case FamilyKind::PoissonLog: return std::numeric_limits<double>::infinity();
        }
        return 0.0;
    }
};

inline std::string to_string(FamilyKind k)
{
    switch (k) {
        case FamilyKind::BinomialLogit: return "binomial";
        case FamilyKind::PoissonLog: return "poisson";
        case FamilyKind::GaussianIdentity: return "gaussian";
    }
    return "unknown";
}

inline Family family_from_string(const std::string& s)
{
    if (s == "binomial" || s == "logit" || s == "bernoulli") return Family::binomial();
    if (s == "poisson") return Family::poisson();
    if (s == "gaussian" || s == "normal") return Family::gaussian();
    throw ConfigError("unknown family '" + s + "'");
}

/// log f(y | eta) with dispersion tau. Throws DomainError for y outside the support.
inline double log_density(const Family& family, double y, double eta, double tau = 1.0)
{
    if (!(tau > 0.0)) throw DomainError("dispersion must be positive");
    if (!family.valid_response(y)) {
        throw DomainError("response " + std::to_string(y) + " outside the support of the " +
                          to_string(family.kind) + " family");
    }
    return family.log_base_measure(y, tau) + family.natural_term(y, eta) / tau;
}

/// Same as log_density without the support check; used in hot loops on validated data.
inline double log_density_unchecked(const Family& family, double y, double eta, double tau)
{
    return family.log_base_measure(y, tau) + family.natural_term(y, eta) / tau;
}

} // namespace glmmfa
