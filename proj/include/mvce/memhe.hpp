#pragma once

#include "mvce/estimators.hpp"

#include <deque>
#include <optional>
#include <vector>

namespace mvce {

/// Minimum-energy moving-horizon baseline: over a window of N+1 measurements,
/// minimize (chi - xbar)' P^{-1} (chi - xbar) + sum w_k' Q^{-1} w_k
/// + sum (y_k - C x_k)' R^{-1} (y_k - C x_k) subject to x_{k+1} = A x_k + w_k
/// and x_k in X for all window steps; the window-terminal state is returned.
///
/// The arrival pair (xbar, P) at the window head is the one-step prediction
/// of a parallel unconstrained Kalman filter's posterior (the filter runs
/// alongside; its Riccati recursion supplies the arrival weight). Requires
/// Q positive definite.
class MemheEstimator {
public:
    MemheEstimator(ValidatedModel model, int horizon, std::optional<PolyhedralSet> constraint)
        : model_(std::move(model)), horizon_(horizon), constraint_(std::move(constraint))
    {
        if (horizon_ < 0) throw std::invalid_argument("MemheEstimator: horizon must be >= 0");
        if (!is_pd(model_.Q(), model_.tol().psd_tol)) throw NotPd("Q");
        if (constraint_ && constraint_->H.cols() != model_.state_dim())
            throw DimensionMismatch("MemheEstimator: constraint dimension mismatch");
        const int d = model_.state_dim();
        qinv_ = invert_spd(model_.Q());
        rinv_ = invert_spd(model_.R());
        kf_belief_ = GaussianBelief{model_.prior_mean(), model_.prior_cov()};
        identity_ = Matrix::Identity(d, d);
    }

    int time() const { return t_; }
    int horizon() const { return horizon_; }

    EstimateRecord step(const Vector& y)
    {
        if (y.size() != model_.meas_dim())
            throw DimensionMismatch("MemheEstimator::step: measurement dimension mismatch");
        const auto t0 = std::chrono::steady_clock::now();
        ++t_;
        window_.push_back(y);
        if (static_cast<int>(window_.size()) > horizon_ + 1) window_.erase(window_.begin());

        Vector xbar;
        Matrix p_arrival;
        if (t_ <= horizon_) {
            xbar = model_.prior_mean();
            p_arrival = model_.prior_cov();
        } else {
            const auto& head_post = kf_posteriors_.front();  // posterior at t - N - 1
            auto [pm, xm] = propagate_prior(head_post.cov, head_post.mean, model_);
            p_arrival = pm;
            xbar = xm;
        }

        auto prob = build_window_qp(xbar, p_arrival);
        QpSolveOptions opts;
        opts.warm_active_rows = mapped_warm_rows(prob);
        auto sol = solve_qp(prob, model_.tol(), opts);

        EstimateRecord rec;
        rec.t = t_;
        const int wlen = static_cast<int>(window_.size());
        if (sol.status == QpStatus::Infeasible) {
            QpProblem relaxed = prob;
            relaxed.G = Matrix::Zero(0, prob.num_vars());
            relaxed.g = Vector::Zero(0);
            auto usol = solve_qp(relaxed, model_.tol());
            Vector xterm = terminal_map_ * usol.u;
            rec.x_hat = constraint_ ? project_onto_polyhedron(*constraint_, xterm, model_.tol())
                                    : xterm;
            rec.cost_trace = usol.objective_value;
            rec.solver_status = QpStatus::Infeasible;
            rec.fallback = true;
            last_active_.clear();
        } else {
            rec.x_hat = terminal_map_ * sol.u;
            rec.cost_trace = sol.objective_value;
            rec.solver_status = sol.status;
            rec.active_rows = sol.active_rows;
            remember_active(prob, sol.active_rows, wlen);
        }

        // Advance the parallel filter and its posterior delay line.
        if (t_ > 0) kf_belief_ = kf_predict(kf_belief_, model_);
        kf_belief_ = kf_update(kf_belief_, y, model_);
        kf_posteriors_.push_back(kf_belief_);
        while (static_cast<int>(kf_posteriors_.size()) > horizon_ + 1) kf_posteriors_.pop_front();

        rec.sigma = kf_belief_.cov;  // unconstrained surrogate; the baseline has no own covariance
        rec.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        return rec;
    }

private:
    static Matrix invert_spd(const Matrix& m)
    {
        Eigen::LLT<Matrix> llt(symmetrize(m));
        if (llt.info() != Eigen::Success) throw NotPd("memhe weight matrix");
        return llt.solve(Matrix::Identity(m.rows(), m.cols()));
    }

    /// Decision variables v = (chi, w_0..w_{W-2}); x_k = E_k v.
    QpProblem build_window_qp(const Vector& xbar, const Matrix& p_arrival)
    {
        const int d = model_.state_dim();
        const int wlen = static_cast<int>(window_.size());
        const int nv = d * wlen;
        const Matrix pinv = invert_spd(p_arrival);

        std::vector<Matrix> emaps(static_cast<size_t>(wlen));
        emaps[0] = Matrix::Zero(d, nv);
        emaps[0].leftCols(d) = identity_;
        for (int k = 1; k < wlen; ++k) {
            emaps[static_cast<size_t>(k)] = model_.A() * emaps[static_cast<size_t>(k - 1)];
            emaps[static_cast<size_t>(k)].middleCols(k * d, d) += identity_;
        }
        terminal_map_ = emaps.back();

        Matrix h = Matrix::Zero(nv, nv);
        h.topLeftCorner(d, d) = pinv;
        for (int k = 1; k < wlen; ++k) h.block(k * d, k * d, d, d) = qinv_;
        Vector c = Vector::Zero(nv);
        c.head(d) = -pinv * xbar;
        double constant = xbar.dot(pinv * xbar);

        const Matrix crc = model_.C().transpose() * rinv_ * model_.C();
        for (int k = 0; k < wlen; ++k) {
            const auto& e = emaps[static_cast<size_t>(k)];
            const Vector& yk = window_[static_cast<size_t>(k)];
            h += e.transpose() * crc * e;
            c -= e.transpose() * (model_.C().transpose() * (rinv_ * yk));
            constant += yk.dot(rinv_ * yk);
        }

        QpProblem p;
        p.hessian_blocks = {2.0 * symmetrize(h)};
        p.linear_blocks = {2.0 * c};
        p.constant = constant;
        p.meta.state_dim = 1;
        p.meta.meas_dim = nv;
        p.meta.horizon = 0;
        if (constraint_) {
            const int prows = constraint_->rows();
            p.G = Matrix(static_cast<Eigen::Index>(prows) * wlen, nv);
            p.g = Vector(static_cast<Eigen::Index>(prows) * wlen);
            for (int k = 0; k < wlen; ++k) {
                p.G.middleRows(k * prows, prows) = constraint_->H * emaps[static_cast<size_t>(k)];
                p.g.segment(k * prows, prows) = constraint_->h;
                for (int r = 0; r < prows; ++r) p.meta.row_lag.push_back(k);
            }
        } else {
            p.G = Matrix::Zero(0, nv);
            p.g = Vector::Zero(0);
        }
        return p;
    }

    std::vector<int> mapped_warm_rows(const QpProblem& prob) const
    {
        std::vector<int> rows;
        if (last_active_.empty() || !constraint_) return rows;
        const int prows = constraint_->rows();
        const int wlen = static_cast<int>(window_.size());
        const int shift = t_ <= horizon_ ? 0 : -1;  // window slides once full
        for (const auto& [k, r] : last_active_) {
            const int nk = k + shift;
            if (nk >= 0 && nk < wlen) rows.push_back(nk * prows + r);
        }
        (void)prob;
        return rows;
    }

    void remember_active(const QpProblem& prob, const std::vector<int>& active, int wlen)
    {
        last_active_.clear();
        if (!constraint_) return;
        const int prows = constraint_->rows();
        (void)wlen;
        for (int k : active)
            if (k >= 0 && k < static_cast<int>(prob.meta.row_lag.size()))
                last_active_.emplace_back(prob.meta.row_lag[static_cast<size_t>(k)], k % prows);
    }

    ValidatedModel model_;
    int horizon_;
    std::optional<PolyhedralSet> constraint_;
    Matrix qinv_, rinv_, identity_, terminal_map_;
    GaussianBelief kf_belief_;
    std::deque<GaussianBelief> kf_posteriors_;
    std::vector<Vector> window_;
    std::vector<std::pair<int, int>> last_active_;  // (window step, constraint row)
    int t_ = -1;
};

} // namespace mvce
