#pragma once
#include <glmmfa/errors.hpp>
#include <glmmfa/factor_model.hpp>
#include <Eigen/Dense>
#include <cmath>

namespace glmmfa {

/**
 * Model parameters theta = (beta, b, tau).
 *
 * beta has length p + 1 with the intercept at index 0. B is the q x r loading
 * matrix whose rows are ordered like the random-effect columns of the frame;
 * b() gives its row-stacked vector form.
 */
struct ThetaState
{
    Eigen::VectorXd beta;
    Eigen::MatrixXd B;
    double tau = 1.0;

    int p() const { return static_cast<int>(beta.size()) - 1; }
    int q() const { return static_cast<int>(B.rows()); }
    int r() const { return static_cast<int>(B.cols()); }
    Eigen::VectorXd b() const { return stack_rows(B); }

    void validate() const
    {
        if (!(tau > 0.0)) throw NumericalError("dispersion tau must be positive");
        if (!beta.allFinite() || !B.allFinite()) throw NumericalError("non-finite parameter values");
    }

    /// Largest absolute change in (beta, b) relative to another state of equal shape.
    double max_change(const ThetaState& other) const
    {
        double d = (beta - other.beta).cwiseAbs().maxCoeff();
        if (B.size() > 0) d = std::max(d, (B - other.B).cwiseAbs().maxCoeff());
        return d;
    }
};

} // namespace glmmfa
