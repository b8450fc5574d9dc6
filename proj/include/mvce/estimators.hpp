#pragma once

#include "mvce/kalman.hpp"
#include "mvce/qp.hpp"

#include <chrono>
#include <deque>
#include <optional>
#include <ostream>
#include <utility>
#include <vector>

namespace mvce {

enum class EstimatorMode { Fie, Mhe, Cfie, Cmhe };

inline const char* to_string(EstimatorMode m)
{
    switch (m) {
        case EstimatorMode::Fie: return "fie";
        case EstimatorMode::Mhe: return "mhe";
        case EstimatorMode::Cfie: return "cfie";
        case EstimatorMode::Cmhe: return "cmhe";
    }
    return "unknown";
}

struct SolverInfeasible : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Per-step estimator output.
struct EstimateRecord {
    int t = 0;
    Vector x_hat;
    Matrix sigma;
    double cost_trace = 0.0;
    QpStatus solver_status = QpStatus::Optimal;
    bool fallback = false;  // infeasible step replaced by projected unconstrained estimate
    std::vector<int> active_rows;
    double wall_time = 0.0;  // seconds
};

inline std::string record_status_string(const EstimateRecord& rec)
{
    return rec.fallback ? "infeasible_fallback" : to_string(rec.solver_status);
}

/// Shared prior propagation (serves both the unconstrained and the
/// constrained recursion; only the source of the pair differs):
/// Sigma_minus = A Sigma A' + Q (symmetrized), xhat_minus = A xhat.
inline std::pair<Matrix, Vector> propagate_prior(const Matrix& sigma_prev, const Vector& xhat_prev,
                                                 const ValidatedModel& model)
{
    return {symmetrize(model.A() * sigma_prev * model.A().transpose() + model.Q()),
            model.A() * xhat_prev};
}

/// Sequential driver for the four estimators. Single-owner: step() advances
/// time; distinct instances are independent.
///
/// FIE/CFIE solve the growing problem over all measurements (O(t) memory);
/// MHE/CMHE keep the last N+1 measurements and a delay line of posteriors so
/// the arrival pair at the window head is the one-step prediction of the
/// posterior computed N+1 steps earlier. For t <= N the MHE modes run their
/// full-information counterpart (CFIE keeps startup estimates feasible).
class Estimator {
public:
    Estimator(ValidatedModel model, EstimatorMode mode, int horizon,
              std::optional<PolyhedralSet> constraint)
        : model_(std::move(model)), mode_(mode), horizon_(horizon), constraint_(std::move(constraint))
    {
        const bool constrained = mode_ == EstimatorMode::Cfie || mode_ == EstimatorMode::Cmhe;
        if (constrained && !constraint_)
            throw std::invalid_argument("Estimator: constrained mode requires a constraint set");
        if (!constrained && constraint_)
            throw std::invalid_argument("Estimator: unconstrained mode must not carry a constraint set");
        if ((mode_ == EstimatorMode::Mhe || mode_ == EstimatorMode::Cmhe) && horizon_ < 0)
            throw std::invalid_argument("Estimator: MHE horizon must be >= 0");
        if (constraint_ && constraint_->H.cols() != model_.state_dim())
            throw DimensionMismatch("Estimator: constraint dimension mismatch");
        n_ = observability_index(model_);
    }

    EstimatorMode mode() const { return mode_; }
    int horizon() const { return horizon_; }
    int observability_idx() const { return n_; }
    int time() const { return t_; }
    const std::vector<Vector>& window() const { return window_; }
    const ValidatedModel& model() const { return model_; }

    EstimateRecord step(const Vector& y)
    {
        if (y.size() != model_.meas_dim())
            throw DimensionMismatch("Estimator::step: measurement dimension mismatch");
        const auto t0 = std::chrono::steady_clock::now();
        ++t_;
        push_measurement(y);

        EstimateRecord rec;
        switch (mode_) {
            case EstimatorMode::Fie:
                rec = solve_full_information(false);
                break;
            case EstimatorMode::Cfie:
                rec = solve_full_information(true);
                break;
            case EstimatorMode::Mhe:
                rec = t_ <= horizon_ ? solve_full_information(false) : solve_moving_horizon(false);
                break;
            case EstimatorMode::Cmhe:
                rec = t_ <= horizon_ ? solve_full_information(true) : solve_moving_horizon(true);
                break;
        }
        rec.t = t_;

        if (mode_ == EstimatorMode::Mhe || mode_ == EstimatorMode::Cmhe) {
            posteriors_.emplace_back(rec.x_hat, rec.sigma);
            while (static_cast<int>(posteriors_.size()) > horizon_ + 1) posteriors_.pop_front();
        }
        rec.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        return rec;
    }

private:
    void push_measurement(const Vector& y)
    {
        window_.push_back(y);
        const bool moving = mode_ == EstimatorMode::Mhe || mode_ == EstimatorMode::Cmhe;
        if (moving && static_cast<int>(window_.size()) > horizon_ + 1)
            window_.erase(window_.begin());
    }

    EstimateRecord solve_full_information(bool constrained)
    {
        auto prob = build_fie_qp(model_, constrained ? constraint_ : std::nullopt,
                                 std::span<const Vector>(window_), t_, n_);
        return solve_and_assemble(prob, model_.prior_mean(), model_.prior_cov(), constrained,
                                  /*lag_shift=*/1);
    }

    EstimateRecord solve_moving_horizon(bool constrained)
    {
        // Arrival pair: one-step prediction of the posterior at t - N - 1.
        const auto& [xprev, sprev] = posteriors_.front();
        auto [sigma_minus, xhat_minus] = propagate_prior(sprev, xprev, model_);
        auto prob = build_mhe_qp(model_, constrained ? constraint_ : std::nullopt,
                                 std::span<const Vector>(window_), xhat_minus, sigma_minus,
                                 horizon_);
        return solve_and_assemble(prob, xhat_minus, sigma_minus, constrained, /*lag_shift=*/0);
    }

    EstimateRecord solve_and_assemble(const QpProblem& prob, const Vector& prior_mean,
                                      const Matrix& terminal_cov, bool constrained, int lag_shift)
    {
        QpSolveOptions opts;
        if (constrained) opts.warm_active_rows = mapped_warm_rows(prob, lag_shift);
        auto sol = solve_qp(prob, model_.tol(), opts);

        EstimateRecord rec;
        if (sol.status == QpStatus::Infeasible) {
            // Benchmark runs must not abort: fall back to the unconstrained
            // estimate projected onto the constraint set, flagged.
            QpProblem relaxed = prob;
            relaxed.G = Matrix::Zero(0, prob.num_vars());
            relaxed.g = Vector::Zero(0);
            relaxed.meta.row_lag.clear();
            auto usol = solve_qp(relaxed, model_.tol());
            auto traj = dual_rollout(model_, usol.alphas);
            Vector xhat = assemble_estimate(traj, usol.alphas, prior_mean,
                                            std::span<const Vector>(window_));
            rec.x_hat = project_onto_polyhedron(*constraint_, xhat, model_.tol());
            auto cost = dual_cost(model_, terminal_cov, usol.alphas, traj);
            rec.sigma = symmetrize(cost.sigma);
            rec.cost_trace = cost.trace_value;
            rec.solver_status = QpStatus::Infeasible;
            rec.fallback = true;
            last_active_.clear();
            return rec;
        }

        auto traj = dual_rollout(model_, sol.alphas);
        rec.x_hat = assemble_estimate(traj, sol.alphas, prior_mean, std::span<const Vector>(window_));
        auto cost = dual_cost(model_, terminal_cov, sol.alphas, traj);
        rec.sigma = symmetrize(cost.sigma);
        rec.cost_trace = cost.trace_value;
        rec.solver_status = sol.status;
        rec.active_rows = sol.active_rows;
        if (constrained) remember_active(prob, sol.active_rows);
        return rec;
    }

    std::vector<int> mapped_warm_rows(const QpProblem& prob, int lag_shift) const
    {
        std::vector<int> rows;
        if (last_active_.empty() || !constraint_) return rows;
        const int prows = constraint_->rows();
        int max_lag = -1;
        for (int lag : prob.meta.row_lag) max_lag = std::max(max_lag, lag);
        for (const auto& [lag, r] : last_active_) {
            const int new_lag = lag + lag_shift;
            if (new_lag <= max_lag) rows.push_back(new_lag * prows + r);
        }
        return rows;
    }

    void remember_active(const QpProblem& prob, const std::vector<int>& active)
    {
        last_active_.clear();
        if (!constraint_) return;
        const int prows = constraint_->rows();
        for (int k : active)
            if (k >= 0 && k < static_cast<int>(prob.meta.row_lag.size()))
                last_active_.emplace_back(prob.meta.row_lag[static_cast<size_t>(k)], k % prows);
    }

    ValidatedModel model_;
    EstimatorMode mode_;
    int horizon_;
    std::optional<PolyhedralSet> constraint_;
    int n_ = 0;
    int t_ = -1;
    std::vector<Vector> window_;
    std::deque<std::pair<Vector, Matrix>> posteriors_;
    std::vector<std::pair<int, int>> last_active_;  // (lag, constraint row)
};

/// Unconstrained full-information estimates via the dynamic-programming
/// (Kalman) recursion instead of a growing problem. Must coincide with the
/// explicit FIE path; used as its fast route and cross-check.
inline std::vector<EstimateRecord> fie_fast_path(const ValidatedModel& model,
                                                 std::span<const Vector> measurements)
{
    std::vector<EstimateRecord> out;
    out.reserve(measurements.size());
    GaussianBelief belief{model.prior_mean(), model.prior_cov()};
    for (size_t t = 0; t < measurements.size(); ++t) {
        const auto t0 = std::chrono::steady_clock::now();
        if (t > 0) belief = kf_predict(belief, model);
        belief = kf_update(belief, measurements[t], model);
        EstimateRecord rec;
        rec.t = static_cast<int>(t);
        rec.x_hat = belief.mean;
        rec.sigma = belief.cov;
        rec.cost_trace = belief.cov.trace();
        rec.solver_status = QpStatus::Optimal;
        rec.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        out.push_back(std::move(rec));
    }
    return out;
}

/// Trajectory CSV (RFC 4180, CRLF): t, x_hat[0..d), cost_trace, status,
/// active_row_count.
inline void write_trajectory_csv(std::ostream& os, std::span<const EstimateRecord> records)
{
    if (records.empty()) return;
    const auto d = records.front().x_hat.size();
    os << "t";
    for (Eigen::Index i = 0; i < d; ++i) os << ",x_hat_" << i;
    os << ",cost_trace,status,active_row_count\r\n";
    for (const auto& rec : records) {
        os << rec.t;
        for (Eigen::Index i = 0; i < d; ++i) os << "," << rec.x_hat(i);
        os << "," << rec.cost_trace << "," << record_status_string(rec) << ","
           << rec.active_rows.size() << "\r\n";
    }
}

} // namespace mvce
