#pragma once

#include "mvce/estimators.hpp"

#include <json.hpp>

#include <cmath>
#include <optional>
#include <vector>

namespace mvce {

struct RiccatiNoConverge : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Monotone-nondecreasing cost condition: Q - Sigma_0^- PSD.
inline bool check_lemma3(const Matrix& Q, const Matrix& prior_cov, double psd_tol)
{
    return is_psd(symmetrize(Q - prior_cov), psd_tol);
}

inline bool check_lemma3(const ValidatedModel& model)
{
    return check_lemma3(model.Q(), model.prior_cov(), model.tol().psd_tol);
}

/// Monotone-nonincreasing cost condition for a stationary gain K (q x d):
/// with At = A' + C'K, requires At' S At - S + K'RK + Q to be negative
/// semidefinite (eigmax below the relative psd slack).
inline bool check_lemma4(const Matrix& A, const Matrix& C, const Matrix& prior_cov,
                         const Matrix& Q, const Matrix& R, const Matrix& K, double psd_tol)
{
    if (K.rows() != C.rows() || K.cols() != A.cols())
        throw DimensionMismatch("check_lemma4: K must be q x d");
    const Matrix at = A.transpose() + C.transpose() * K;
    const Matrix m = symmetrize(at.transpose() * prior_cov * at - prior_cov +
                                K.transpose() * R * K + Q);
    const Vector ev = sym_eigenvalues(m);
    const double hi = ev.cwiseAbs().maxCoeff();
    return ev.maxCoeff() <= psd_tol * (1.0 + hi);
}

inline bool check_lemma4(const ValidatedModel& model, const Matrix& K)
{
    return check_lemma4(model.A(), model.C(), model.prior_cov(), model.Q(), model.R(), K,
                        model.tol().psd_tol);
}

/// Prior-form Riccati fixed point (predict-update composition), iterated
/// from the model prior. Throws RiccatiNoConverge past max_iter.
inline Matrix riccati_fixed_point(const ValidatedModel& model, int max_iter = 10000,
                                  double tol = 1e-12)
{
    Matrix sigma_minus = model.prior_cov();
    const Matrix& c = model.C();
    for (int k = 0; k < max_iter; ++k) {
        const Matrix cs = c * sigma_minus;
        Eigen::LLT<Matrix> llt(symmetrize(cs * c.transpose() + model.R()));
        const Matrix posterior = symmetrize(sigma_minus - cs.transpose() * llt.solve(cs));
        const Matrix next = symmetrize(model.A() * posterior * model.A().transpose() + model.Q());
        const double diff = (next - sigma_minus).cwiseAbs().maxCoeff();
        sigma_minus = next;
        if (diff <= tol * (1.0 + sigma_minus.cwiseAbs().maxCoeff())) return sigma_minus;
    }
    throw RiccatiNoConverge("riccati_fixed_point: no convergence");
}

/// Heuristic stationary candidate for check_lemma4: the steady-state gain of
/// the dual regulator, K = -(C S C' + R)^{-1} C S A' with S the prior-form
/// Riccati fixed point. Then A' + C'K is the transposed steady-state filter
/// error dynamics.
inline Matrix candidate_gain(const ValidatedModel& model, int max_iter = 10000, double tol = 1e-12)
{
    observability_index(model);  // reject unobservable pairs upfront
    const Matrix s = riccati_fixed_point(model, max_iter, tol);
    const Matrix cs = s * model.C().transpose();
    Eigen::LLT<Matrix> llt(symmetrize(model.C() * cs + model.R()));
    return -llt.solve(model.C() * s * model.A().transpose());
}

/// Deadbeat dual policy (horizon-n pseudoinverse construction, zeros after):
/// drives z_i to 0 for all i >= n, making the estimate prior-independent on
/// nominal data. `cost` is the policy's value s = trace(G_0(z_t) + S_t(beta)).
struct DeadbeatPolicy {
    DualControlSequence controls;
    DualTrajectory trajectory;
    double cost = 0.0;
};

inline DeadbeatPolicy deadbeat_policy(const ValidatedModel& model, int t, const Matrix& alpha0)
{
    const int d = model.state_dim();
    const int q = model.meas_dim();
    const int n = observability_index(model);
    if (t < n) throw std::invalid_argument("deadbeat_policy: t must be >= observability index");
    if (alpha0.rows() != q || alpha0.cols() != d)
        throw DimensionMismatch("deadbeat_policy: alpha0 must be q x d");

    const Matrix at = model.A().transpose();
    const Matrix ct = model.C().transpose();
    const Matrix rn = reachability_matrix(at, ct, n);
    const Matrix stacked = -pseudoinverse(rn, model.tol().rank_tol) * matrix_power(at, n) *
                           (Matrix::Identity(d, d) + ct * alpha0);

    DeadbeatPolicy out;
    out.controls.alphas.reserve(static_cast<size_t>(t) + 1);
    out.controls.alphas.push_back(alpha0);
    for (int i = 1; i <= n; ++i)
        out.controls.alphas.push_back(stacked.middleRows((i - 1) * q, q));
    for (int i = n + 1; i <= t; ++i)
        out.controls.alphas.push_back(Matrix::Zero(q, d));

    out.trajectory = dual_rollout(model, out.controls);
    for (int i = n; i <= t; ++i)
        if (out.trajectory.zs[static_cast<size_t>(i)].norm() > 1e-9)
            throw std::runtime_error("deadbeat_policy: dual state not driven to zero");
    out.cost = dual_cost(model, model.prior_cov(), out.controls, out.trajectory).trace_value;
    return out;
}

/// Prop. 1/2 error bound: epsilon = sqrt(s / lambda_min(Sigma_0^-)) * delta.
inline double observer_error_bound(double s, const Matrix& sigma0, double delta)
{
    if (s <= 0) throw std::invalid_argument("observer_error_bound: s must be positive");
    if (delta < 0) throw std::invalid_argument("observer_error_bound: delta must be nonnegative");
    const double lmin = sym_eigenvalues(symmetrize(sigma0)).minCoeff();
    if (lmin <= 0) throw NotPd("sigma0");
    return std::sqrt(s / lmin) * delta;
}

enum class CostTrend { Nondecreasing, Nonincreasing, Mixed };

inline const char* to_string(CostTrend t)
{
    switch (t) {
        case CostTrend::Nondecreasing: return "nondecreasing";
        case CostTrend::Nonincreasing: return "nonincreasing";
        case CostTrend::Mixed: return "mixed";
    }
    return "unknown";
}

/// Classify a cost-trace tail (entries from index `from` on) within slack.
inline CostTrend classify_trend(const std::vector<double>& costs, int from, double slack)
{
    bool up = true, down = true;
    for (size_t i = static_cast<size_t>(std::max(from, 1)); i < costs.size(); ++i) {
        const double diff = costs[i] - costs[i - 1];
        if (diff < -slack) up = false;
        if (diff > slack) down = false;
    }
    if (up) return CostTrend::Nondecreasing;
    if (down) return CostTrend::Nonincreasing;
    return CostTrend::Mixed;
}

struct ObserverDeltaResult {
    double delta = 0.0;
    double epsilon_bound = 0.0;   // sqrt(s / lambda_min) * delta
    double max_error_tail = 0.0;  // max error over n <= t <= T (bound's range)
    double final_error = 0.0;
    bool bound_holds = false;
    bool convergence_proxy = false;  // final_error <= proxy_factor * delta
    CostTrend trend = CostTrend::Mixed;
    std::vector<double> errors;
    std::vector<double> cost_trace;
};

struct StabilityReport {
    bool lemma3_holds = false;
    std::optional<bool> lemma4_holds;  // absent when no candidate gain is available
    Matrix lemma4_gain;
    double deadbeat_cost = 0.0;  // s
    double lambda_min_prior = 0.0;
    int observability_idx = 0;
    std::vector<ObserverDeltaResult> results;
};

/// Empirical observer-stability run on the noiseless system y_t = C A^t x0.
/// For each delta the initial prior mean is placed on the delta-sphere around
/// x0 (fixed alternating-sign direction, projected into X) and the estimator
/// runs for T steps. The error bound and convergence proxy carry a solver_tol
/// slack so the delta = 0 case is exact up to solver accuracy.
inline StabilityReport nominal_observer_test(const ValidatedModel& model,
                                             const PolyhedralSet& constraint, const Vector& x0,
                                             EstimatorMode mode, int N, int T,
                                             const std::vector<double>& delta_grid,
                                             double proxy_factor = 0.01)
{
    const int d = model.state_dim();
    if (x0.size() != d) throw DimensionMismatch("nominal_observer_test: x0 dimension mismatch");
    const auto& tol = model.tol();
    if (!polyhedron_contains(constraint, x0, tol))
        throw std::invalid_argument("nominal_observer_test: x0 must lie in the constraint set");

    StabilityReport report;
    report.observability_idx = observability_index(model);
    report.lemma3_holds = check_lemma3(model);
    try {
        report.lemma4_gain = candidate_gain(model);
        report.lemma4_holds = check_lemma4(model, report.lemma4_gain);
    } catch (const std::exception&) {
        report.lemma4_holds = std::nullopt;
    }
    const auto deadbeat =
        deadbeat_policy(model, report.observability_idx, Matrix::Zero(model.meas_dim(), d));
    report.deadbeat_cost = deadbeat.cost;
    report.lambda_min_prior = sym_eigenvalues(model.prior_cov()).minCoeff();

    // Nominal trajectory and data.
    std::vector<Vector> xs(static_cast<size_t>(T) + 1), ys(static_cast<size_t>(T) + 1);
    xs[0] = x0;
    ys[0] = model.C() * x0;
    for (int t = 1; t <= T; ++t) {
        xs[static_cast<size_t>(t)] = model.A() * xs[static_cast<size_t>(t - 1)];
        ys[static_cast<size_t>(t)] = model.C() * xs[static_cast<size_t>(t)];
    }

    Vector dir(d);
    for (int i = 0; i < d; ++i) dir(i) = (i % 2 == 0) ? 1.0 : -1.0;
    dir /= dir.norm();

    const int n = report.observability_idx;
    for (double delta : delta_grid) {
        Vector prior0 = x0 + delta * dir;
        if (!polyhedron_contains(constraint, prior0, tol))
            prior0 = project_onto_polyhedron(constraint, prior0, tol);

        const bool constrained = mode == EstimatorMode::Cfie || mode == EstimatorMode::Cmhe;
        Estimator est(model.with_prior(prior0, model.prior_cov()), mode, N,
                      constrained ? std::optional<PolyhedralSet>(constraint) : std::nullopt);

        ObserverDeltaResult res;
        res.delta = delta;
        res.epsilon_bound = observer_error_bound(report.deadbeat_cost, model.prior_cov(), delta);
        for (int t = 0; t <= T; ++t) {
            auto rec = est.step(ys[static_cast<size_t>(t)]);
            res.errors.push_back((rec.x_hat - xs[static_cast<size_t>(t)]).norm());
            res.cost_trace.push_back(rec.cost_trace);
        }
        res.final_error = res.errors.back();
        res.max_error_tail = 0.0;
        for (int t = n; t <= T; ++t)
            res.max_error_tail = std::max(res.max_error_tail, res.errors[static_cast<size_t>(t)]);
        res.bound_holds = res.max_error_tail <= res.epsilon_bound + tol.solver_tol;
        res.convergence_proxy = res.final_error <= proxy_factor * delta + tol.solver_tol;
        double cmax = 0.0;
        for (double c : res.cost_trace) cmax = std::max(cmax, std::abs(c));
        res.trend = classify_trend(res.cost_trace, n + 1, tol.solver_tol * (1.0 + cmax));
        report.results.push_back(std::move(res));
    }
    return report;
}

inline nlohmann::json stability_report_to_json(const StabilityReport& r)
{
    nlohmann::json j;
    j["lemma3_holds"] = r.lemma3_holds;
    if (r.lemma4_holds) {
        j["lemma4_holds"] = *r.lemma4_holds;
        nlohmann::json k = nlohmann::json::array();
        for (Eigen::Index row = 0; row < r.lemma4_gain.rows(); ++row) {
            nlohmann::json rr = nlohmann::json::array();
            for (Eigen::Index col = 0; col < r.lemma4_gain.cols(); ++col)
                rr.push_back(r.lemma4_gain(row, col));
            k.push_back(std::move(rr));
        }
        j["lemma4_gain"] = std::move(k);
    } else {
        j["lemma4_holds"] = nullptr;
    }
    j["deadbeat_cost"] = r.deadbeat_cost;
    j["lambda_min_prior"] = r.lambda_min_prior;
    j["observability_index"] = r.observability_idx;
    j["results"] = nlohmann::json::array();
    for (const auto& res : r.results) {
        j["results"].push_back({{"delta", res.delta},
                                {"epsilon_bound", res.epsilon_bound},
                                {"max_error_tail", res.max_error_tail},
                                {"final_error", res.final_error},
                                {"bound_holds", res.bound_holds},
                                {"convergence_proxy", res.convergence_proxy},
                                {"trend", to_string(res.trend)},
                                {"errors", res.errors},
                                {"cost_trace", res.cost_trace}});
    }
    return j;
}

} // namespace mvce
