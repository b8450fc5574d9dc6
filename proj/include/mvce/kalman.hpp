#pragma once

#include "mvce/model.hpp"

#include <vector>

namespace mvce {

struct SingularInnovation : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Gaussian state belief (mean, covariance).
struct GaussianBelief {
    Vector mean;
    Matrix cov;
};

/// Time update: mean' = A mean, cov' = A cov A' + Q (symmetrized).
inline GaussianBelief kf_predict(const GaussianBelief& belief, const ValidatedModel& model)
{
    if (belief.mean.size() != model.state_dim())
        throw DimensionMismatch("kf_predict: belief dimension mismatch");
    GaussianBelief out;
    out.mean = model.A() * belief.mean;
    out.cov = symmetrize(model.A() * belief.cov * model.A().transpose() + model.Q());
    return out;
}

/// Measurement update with innovation solve via Cholesky of C cov C' + R.
inline GaussianBelief kf_update(const GaussianBelief& belief, const Vector& y,
                                const ValidatedModel& model)
{
    if (belief.mean.size() != model.state_dim())
        throw DimensionMismatch("kf_update: belief dimension mismatch");
    if (y.size() != model.meas_dim())
        throw DimensionMismatch("kf_update: measurement dimension mismatch");

    const Matrix cs = model.C() * belief.cov;                          // q x d
    const Matrix s = symmetrize(cs * model.C().transpose() + model.R());
    Eigen::LLT<Matrix> llt(s);
    if (llt.info() != Eigen::Success)
        throw SingularInnovation("kf_update: innovation covariance not positive definite");
    const Matrix l = llt.matrixL();
    if (l.diagonal().minCoeff() <= 1e-14 * (1.0 + l.diagonal().maxCoeff()))
        throw SingularInnovation("kf_update: innovation covariance numerically singular");

    GaussianBelief out;
    out.mean = belief.mean + cs.transpose() * llt.solve(y - model.C() * belief.mean);
    out.cov = symmetrize(belief.cov - cs.transpose() * llt.solve(cs));
    return out;
}

/// Filter pass: update with y_0 on the initial prior, then predict/update.
/// Returns the posterior belief at each step.
inline std::vector<GaussianBelief> kf_run(const ValidatedModel& model,
                                          const std::vector<Vector>& measurements)
{
    if (measurements.empty())
        throw std::invalid_argument("kf_run: measurements must be nonempty");
    std::vector<GaussianBelief> out;
    out.reserve(measurements.size());
    GaussianBelief belief{model.prior_mean(), model.prior_cov()};
    for (size_t t = 0; t < measurements.size(); ++t) {
        if (t > 0) belief = kf_predict(belief, model);
        belief = kf_update(belief, measurements[t], model);
        out.push_back(belief);
    }
    return out;
}

} // namespace mvce
