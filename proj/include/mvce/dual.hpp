#pragma once

#include "mvce/model.hpp"

#include <span>
#include <vector>

namespace mvce {

struct WindowLengthMismatch : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Gain matrices alpha_0..alpha_L of the dual process, each q x d.
/// Index convention: alpha_0 pairs with the newest measurement in the window.
struct DualControlSequence {
    std::vector<Matrix> alphas;

    int horizon() const { return static_cast<int>(alphas.size()) - 1; }
};

/// Dual states z_0..z_L, each d x d:
///   z_0 = I + C' alpha_0,   z_{i+1} = A' z_i + C' alpha_{i+1}.
/// Only identity initialization is supported; estimating a general linear
/// function of the state would re-seed z_0 and is a deliberate extension
/// point, not implemented here.
struct DualTrajectory {
    std::vector<Matrix> zs;
};

/// Full error-covariance surrogate of a control sequence:
///   sigma = terminal_part + stage_part,
///   terminal_part = z_L' P z_L,
///   stage_part    = alpha_L' R alpha_L + sum_{i<L} (z_i' Q z_i + alpha_i' R alpha_i).
struct CostMatrices {
    Matrix sigma;
    Matrix terminal_part;
    Matrix stage_part;
    double trace_value = 0.0;
};

inline DualTrajectory dual_rollout(const ValidatedModel& model, const DualControlSequence& controls)
{
    const int d = model.state_dim();
    const int q = model.meas_dim();
    if (controls.alphas.empty())
        throw std::invalid_argument("dual_rollout: control sequence must be nonempty");
    for (const auto& a : controls.alphas)
        if (a.rows() != q || a.cols() != d)
            throw DimensionMismatch("dual_rollout: every alpha must be q x d");

    DualTrajectory traj;
    traj.zs.reserve(controls.alphas.size());
    const Matrix at = model.A().transpose();
    const Matrix ct = model.C().transpose();
    Matrix z = Matrix::Identity(d, d) + ct * controls.alphas[0];
    traj.zs.push_back(z);
    for (size_t i = 1; i < controls.alphas.size(); ++i) {
        z = at * z + ct * controls.alphas[i];
        traj.zs.push_back(z);
    }
    return traj;
}

/// Estimate from dual controls over a measurement window ordered oldest
/// first (y_{t-L}..y_t):  xhat = z_L' prior_mean - sum_i alpha_i' y_{t-i}.
inline Vector assemble_estimate(const DualTrajectory& traj, const DualControlSequence& controls,
                                const Vector& prior_mean, std::span<const Vector> window)
{
    const int L = controls.horizon();
    if (static_cast<int>(window.size()) != L + 1)
        throw WindowLengthMismatch("assemble_estimate: window length must be L + 1");
    if (traj.zs.size() != controls.alphas.size())
        throw DimensionMismatch("assemble_estimate: trajectory/control length mismatch");

    Vector xhat = traj.zs.back().transpose() * prior_mean;
    for (int i = 0; i <= L; ++i)
        xhat -= controls.alphas[static_cast<size_t>(i)].transpose() * window[static_cast<size_t>(L - i)];
    return xhat;
}

/// Cost matrices for a rolled-out control sequence; terminal_cov is the
/// prior covariance weighting z_L (the arrival-cost matrix for MHE modes).
inline CostMatrices dual_cost(const ValidatedModel& model, const Matrix& terminal_cov,
                              const DualControlSequence& controls, const DualTrajectory& traj)
{
    const int d = model.state_dim();
    if (terminal_cov.rows() != d || terminal_cov.cols() != d)
        throw DimensionMismatch("dual_cost: terminal_cov must be d x d");
    if (traj.zs.size() != controls.alphas.size() || traj.zs.empty())
        throw DimensionMismatch("dual_cost: trajectory/control length mismatch");

    const int L = controls.horizon();
    const Matrix& r = model.R();
    const Matrix& q = model.Q();

    CostMatrices out;
    out.stage_part = Matrix::Zero(d, d);
    for (int i = 0; i < L; ++i) {
        const Matrix& z = traj.zs[static_cast<size_t>(i)];
        const Matrix& a = controls.alphas[static_cast<size_t>(i)];
        out.stage_part += z.transpose() * q * z + a.transpose() * r * a;
    }
    const Matrix& aL = controls.alphas.back();
    out.stage_part += aL.transpose() * r * aL;
    out.terminal_part = traj.zs.back().transpose() * terminal_cov * traj.zs.back();
    out.sigma = out.terminal_part + out.stage_part;
    out.trace_value = out.sigma.trace();
    return out;
}

/// All-zero control sequence of horizon L for a q x d dual process.
inline DualControlSequence zero_controls(int q, int d, int L)
{
    DualControlSequence c;
    c.alphas.assign(static_cast<size_t>(L) + 1, Matrix::Zero(q, d));
    return c;
}

} // namespace mvce
