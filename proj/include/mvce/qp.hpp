#pragma once

#include "mvce/dual.hpp"
#include "mvce/model.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <vector>

namespace mvce {

enum class QpStatus { Optimal, Infeasible, MaxIterations };

inline const char* to_string(QpStatus s)
{
    switch (s) {
        case QpStatus::Optimal: return "optimal";
        case QpStatus::Infeasible: return "infeasible";
        case QpStatus::MaxIterations: return "max_iterations";
    }
    return "unknown";
}

struct KktResiduals {
    double stationarity = 0.0;
    double primal = 0.0;
    double complementarity = 0.0;
};

/// Provenance and shape of a problem. For dual-process problems the stacked
/// variable vector u unstacks to alpha matrices column-major: entry
/// u[c*q*(L+1) + i*q + r] = alpha_i(r, c). row_lag records, per constraint
/// row, which lag j of the intermediate-constraint family produced it.
struct QpMeta {
    int horizon = 0;              // L
    int state_dim = 1;            // d == number of Hessian blocks
    int meas_dim = 0;             // q
    bool dual_structure = false;  // true when u unstacks to a DualControlSequence
    std::vector<int> row_lag;
};

/// Dense convex QP  min c0 + 1/2 u'Hu + c'u  s.t.  Gu <= g,  with H given as
/// a block-diagonal list (columns of the matrix decision variable decouple in
/// the objective; constraint rows couple them).
struct QpProblem {
    std::vector<Matrix> hessian_blocks;
    std::vector<Vector> linear_blocks;
    Matrix G;
    Vector g;
    double constant = 0.0;
    QpMeta meta;

    int num_vars() const
    {
        int n = 0;
        for (const auto& h : hessian_blocks) n += static_cast<int>(h.rows());
        return n;
    }
    int num_rows() const { return static_cast<int>(G.rows()); }

    std::vector<int> block_offsets() const
    {
        std::vector<int> off;
        off.reserve(hessian_blocks.size() + 1);
        int n = 0;
        for (const auto& h : hessian_blocks) {
            off.push_back(n);
            n += static_cast<int>(h.rows());
        }
        off.push_back(n);
        return off;
    }

    Vector stacked_linear() const
    {
        Vector c(num_vars());
        int at = 0;
        for (const auto& b : linear_blocks) {
            c.segment(at, b.size()) = b;
            at += static_cast<int>(b.size());
        }
        return c;
    }

    Vector hessian_times(const Vector& u) const
    {
        Vector out(u.size());
        int at = 0;
        for (const auto& h : hessian_blocks) {
            const int nb = static_cast<int>(h.rows());
            out.segment(at, nb) = h * u.segment(at, nb);
            at += nb;
        }
        return out;
    }

    double objective(const Vector& u) const
    {
        return constant + 0.5 * u.dot(hessian_times(u)) + stacked_linear().dot(u);
    }

    double max_violation(const Vector& u) const
    {
        if (num_rows() == 0) return 0.0;
        return (G * u - g).maxCoeff();
    }
};

struct QpSolution {
    Vector u;
    DualControlSequence alphas;  // populated when meta.dual_structure
    QpStatus status = QpStatus::MaxIterations;
    double objective_value = std::numeric_limits<double>::quiet_NaN();
    std::vector<int> active_rows;
    Vector lambda;  // multipliers (Farkas-type certificate when Infeasible)
    KktResiduals kkt;
    int iterations = 0;
};

struct QpSolveOptions {
    std::vector<int> warm_active_rows;
    bool monolithic_kkt = false;  // single dense factorization instead of block-wise
    int max_iterations = 0;       // 0 -> derived from problem size
};

/// Unstack a solution vector into alpha matrices per the frozen ordering.
inline DualControlSequence solution_alphas(const QpMeta& meta, const Vector& u)
{
    const int L = meta.horizon;
    const int d = meta.state_dim;
    const int q = meta.meas_dim;
    DualControlSequence seq;
    if (d <= 0 || q <= 0 || static_cast<Eigen::Index>(d) * q * (L + 1) != u.size()) return seq;
    seq.alphas.assign(static_cast<size_t>(L) + 1, Matrix::Zero(q, d));
    const int nb = q * (L + 1);
    for (int c = 0; c < d; ++c)
        for (int i = 0; i <= L; ++i)
            for (int r = 0; r < q; ++r)
                seq.alphas[static_cast<size_t>(i)](r, c) = u[c * nb + i * q + r];
    return seq;
}

namespace qp_detail {

/// Cholesky of the (block-diagonal) Hessian; block-wise by default, one
/// dense factorization when monolithic is requested.
class HessianFactor {
public:
    HessianFactor(const QpProblem& p, bool monolithic) : offsets_(p.block_offsets())
    {
        if (monolithic) {
            const int n = p.num_vars();
            Matrix full = Matrix::Zero(n, n);
            for (size_t b = 0; b < p.hessian_blocks.size(); ++b) {
                const int at = offsets_[b];
                const int nb = static_cast<int>(p.hessian_blocks[b].rows());
                full.block(at, at, nb, nb) = p.hessian_blocks[b];
            }
            mono_.emplace(full);
            if (mono_->info() != Eigen::Success) throw NotPd("qp hessian");
        } else {
            llts_.reserve(p.hessian_blocks.size());
            for (const auto& h : p.hessian_blocks) {
                llts_.emplace_back(symmetrize(h));
                if (llts_.back().info() != Eigen::Success) throw NotPd("qp hessian block");
            }
        }
    }

    Vector solve(const Vector& rhs) const
    {
        if (mono_) return mono_->solve(rhs);
        Vector out(rhs.size());
        for (size_t b = 0; b < llts_.size(); ++b) {
            const int at = offsets_[b];
            const int nb = offsets_[b + 1] - offsets_[b];
            out.segment(at, nb) = llts_[b].solve(rhs.segment(at, nb));
        }
        return out;
    }

private:
    std::vector<int> offsets_;
    std::vector<Eigen::LLT<Matrix>> llts_;
    std::optional<Eigen::LLT<Matrix>> mono_;
};

struct CoreResult {
    Vector u;
    std::vector<int> working;  // active working set at exit
    Vector lambda_w;           // multipliers for `working`
    bool optimal = false;
    int iterations = 0;
};

/// Primal active-set loop. Requires a feasible start (within feas_tol).
/// Pivot rules are index-deterministic: most-negative multiplier to drop,
/// smallest-index blocking row to add. With kkt_lu the equality subproblems
/// are solved through the assembled KKT matrix instead of the Schur
/// complement; needed when the Hessian is deliberately ill-scaled (phase 1).
inline CoreResult active_set_loop(const QpProblem& p, const HessianFactor& hf, Vector u,
                                  std::vector<int> working, const ToleranceConfig& tol,
                                  int max_iter, bool kkt_lu = false)
{
    const Vector c = p.stacked_linear();
    const int m = p.num_rows();
    const int n = p.num_vars();

    auto gather_rows = [&](const std::vector<int>& w) {
        Matrix gw(w.size(), n);
        for (size_t i = 0; i < w.size(); ++i) gw.row(static_cast<Eigen::Index>(i)) = p.G.row(w[i]);
        return gw;
    };

    Matrix hfull;
    if (kkt_lu) {
        hfull = Matrix::Zero(n, n);
        const auto offsets = p.block_offsets();
        for (size_t b = 0; b < p.hessian_blocks.size(); ++b) {
            const int at = offsets[b];
            const int nb = static_cast<int>(p.hessian_blocks[b].rows());
            hfull.block(at, at, nb, nb) = p.hessian_blocks[b];
        }
    }

    CoreResult res;
    res.u = std::move(u);
    res.working = std::move(working);

    for (int iter = 0; iter < max_iter; ++iter) {
        res.iterations = iter + 1;
        const Vector grad = p.hessian_times(res.u) + c;

        Vector pstep;
        Vector lam;
        if (res.working.empty()) {
            pstep = -hf.solve(grad);
        } else if (kkt_lu) {
            const Matrix gw = gather_rows(res.working);
            const int k = static_cast<int>(gw.rows());
            Matrix kkt = Matrix::Zero(n + k, n + k);
            kkt.topLeftCorner(n, n) = hfull;
            kkt.topRightCorner(n, k) = gw.transpose();
            kkt.bottomLeftCorner(k, n) = gw;
            Vector rhs = Vector::Zero(n + k);
            rhs.head(n) = -grad;
            const Vector sol = Eigen::FullPivLU<Matrix>(kkt).solve(rhs);
            pstep = sol.head(n);
            lam = sol.tail(k);
        } else {
            const Matrix gw = gather_rows(res.working);
            Matrix hs(n, gw.rows());
            for (Eigen::Index i = 0; i < gw.rows(); ++i)
                hs.col(i) = hf.solve(gw.row(i).transpose());
            const Matrix schur = gw * hs;
            Eigen::LDLT<Matrix> ldlt(symmetrize(schur));
            lam = ldlt.solve(-(gw * hf.solve(grad)));
            pstep = -hf.solve(grad + gw.transpose() * lam);
        }

        const double step_scale = 1.0 + res.u.cwiseAbs().maxCoeff();
        if (pstep.cwiseAbs().maxCoeff() <= 1e-11 * step_scale) {
            // Stationary on the working set; check multiplier signs.
            if (res.working.empty()) {
                res.optimal = true;
                return res;
            }
            const double lam_scale = 1.0 + lam.cwiseAbs().maxCoeff();
            int drop = -1;
            double most_negative = -1e-10 * lam_scale;
            for (Eigen::Index i = 0; i < lam.size(); ++i) {
                if (lam(i) < most_negative) {
                    most_negative = lam(i);
                    drop = static_cast<int>(i);
                }
            }
            if (drop < 0) {
                res.lambda_w = lam;
                res.optimal = true;
                return res;
            }
            res.working.erase(res.working.begin() + drop);
            continue;
        }

        // Ratio test over rows outside the working set.
        double alpha = 1.0;
        int blocking = -1;
        for (int r = 0; r < m; ++r) {
            if (std::find(res.working.begin(), res.working.end(), r) != res.working.end())
                continue;
            const double dir = p.G.row(r).dot(pstep);
            if (dir <= 1e-14 * (1.0 + p.G.row(r).cwiseAbs().maxCoeff() * pstep.cwiseAbs().maxCoeff()))
                continue;
            const double slack = p.g(r) - p.G.row(r).dot(res.u);
            const double ratio = std::max(slack, 0.0) / dir;
            if (ratio < alpha - 1e-15) {
                alpha = ratio;
                blocking = r;
            }
        }
        res.u += alpha * pstep;
        if (blocking >= 0) res.working.push_back(blocking);
    }
    return res;  // iteration cap; res.u is the best (monotone) iterate
}

/// Keep a maximal linearly independent subset of the given constraint rows.
inline std::vector<int> prune_dependent_rows(const QpProblem& p, std::vector<int> rows)
{
    std::sort(rows.begin(), rows.end());
    rows.erase(std::unique(rows.begin(), rows.end()), rows.end());
    rows.erase(std::remove_if(rows.begin(), rows.end(),
                              [&](int r) { return r < 0 || r >= p.num_rows(); }),
               rows.end());
    if (rows.empty()) return rows;

    Matrix gt(p.num_vars(), rows.size());
    for (size_t i = 0; i < rows.size(); ++i) gt.col(static_cast<Eigen::Index>(i)) = p.G.row(rows[i]).transpose();
    Eigen::ColPivHouseholderQR<Matrix> qr(gt);
    qr.setThreshold(1e-12);
    const int rank = static_cast<int>(qr.rank());
    std::vector<int> keep;
    keep.reserve(static_cast<size_t>(rank));
    const auto& perm = qr.colsPermutation().indices();
    for (int i = 0; i < rank; ++i) keep.push_back(rows[static_cast<size_t>(perm(i))]);
    std::sort(keep.begin(), keep.end());
    return keep;
}

/// Minimizer of the QP restricted to equality on the given rows.
inline Vector equality_qp_point(const QpProblem& p, const HessianFactor& hf,
                                const std::vector<int>& rows)
{
    const Vector c = p.stacked_linear();
    if (rows.empty()) return -hf.solve(c);
    Matrix gw(rows.size(), p.num_vars());
    Vector gww(rows.size());
    for (size_t i = 0; i < rows.size(); ++i) {
        gw.row(static_cast<Eigen::Index>(i)) = p.G.row(rows[i]);
        gww(static_cast<Eigen::Index>(i)) = p.g(rows[i]);
    }
    Matrix hs(p.num_vars(), gw.rows());
    for (Eigen::Index i = 0; i < gw.rows(); ++i) hs.col(i) = hf.solve(gw.row(i).transpose());
    Eigen::LDLT<Matrix> ldlt(symmetrize(gw * hs));
    const Vector lam = ldlt.solve(-(gww + gw * hf.solve(c)));
    return -hf.solve(c + gw.transpose() * lam);
}

/// Lawson-Hanson nonnegative least squares: min ||A x - b||, x >= 0.
inline Vector nnls(const Matrix& a, const Vector& b, int max_iter = 0)
{
    const int k = static_cast<int>(a.cols());
    Vector x = Vector::Zero(k);
    if (k == 0) return x;
    if (max_iter == 0) max_iter = 30 * (k + 1);
    std::vector<bool> passive(static_cast<size_t>(k), false);
    const double tol = 1e-12 * (1.0 + b.cwiseAbs().maxCoeff());

    for (int outer = 0; outer < max_iter; ++outer) {
        const Vector w = a.transpose() * (b - a * x);
        int best = -1;
        double best_w = tol;
        for (int i = 0; i < k; ++i)
            if (!passive[static_cast<size_t>(i)] && w(i) > best_w) {
                best_w = w(i);
                best = i;
            }
        if (best < 0) break;
        passive[static_cast<size_t>(best)] = true;

        for (int inner = 0; inner < max_iter; ++inner) {
            std::vector<int> pidx;
            for (int i = 0; i < k; ++i)
                if (passive[static_cast<size_t>(i)]) pidx.push_back(i);
            Matrix ap(a.rows(), pidx.size());
            for (size_t i = 0; i < pidx.size(); ++i) ap.col(static_cast<Eigen::Index>(i)) = a.col(pidx[i]);
            const Vector zp = ap.colPivHouseholderQr().solve(b);

            bool all_pos = true;
            for (Eigen::Index i = 0; i < zp.size(); ++i)
                if (zp(i) <= 0) all_pos = false;
            if (all_pos) {
                x.setZero();
                for (size_t i = 0; i < pidx.size(); ++i) x(pidx[i]) = zp(static_cast<Eigen::Index>(i));
                break;
            }
            double alpha = 1.0;
            for (size_t i = 0; i < pidx.size(); ++i) {
                const double zi = zp(static_cast<Eigen::Index>(i));
                if (zi <= 0) {
                    const double xi = x(pidx[i]);
                    if (xi - zi > 0) alpha = std::min(alpha, xi / (xi - zi));
                }
            }
            for (size_t i = 0; i < pidx.size(); ++i) {
                const double zi = zp(static_cast<Eigen::Index>(i));
                x(pidx[i]) += alpha * (zi - x(pidx[i]));
                if (x(pidx[i]) <= 1e-14) {
                    x(pidx[i]) = 0.0;
                    passive[static_cast<size_t>(pidx[i])] = false;
                }
            }
        }
    }
    return x;
}

} // namespace qp_detail

/// KKT residuals of a candidate solution. Multipliers are re-derived by
/// nonnegative least squares on the reported active rows, independently of
/// the solver's internal multipliers.
inline KktResiduals kkt_residuals(const QpProblem& p, const QpSolution& sol)
{
    KktResiduals out;
    const Vector grad = p.hessian_times(sol.u) + p.stacked_linear();
    if (p.num_rows() > 0) {
        const Vector resid = p.G * sol.u - p.g;
        out.primal = std::max(0.0, resid.maxCoeff());
    }
    Matrix at(p.num_vars(), sol.active_rows.size());
    for (size_t i = 0; i < sol.active_rows.size(); ++i)
        at.col(static_cast<Eigen::Index>(i)) = p.G.row(sol.active_rows[i]).transpose();
    const Vector lam = qp_detail::nnls(at, -grad);
    Vector full = grad;
    if (lam.size() > 0) full += at * lam;
    out.stationarity = full.size() > 0 ? full.cwiseAbs().maxCoeff() : 0.0;
    double comp = 0.0;
    for (size_t i = 0; i < sol.active_rows.size(); ++i) {
        const int r = sol.active_rows[i];
        comp = std::max(comp, std::abs(lam(static_cast<Eigen::Index>(i)) *
                                       (p.G.row(r).dot(sol.u) - p.g(r))));
    }
    out.complementarity = comp;
    return out;
}

/// Primal active-set solve of a strictly convex QP. Phase-1 (a regularized
/// min-max-violation problem solved by the same loop) supplies a feasible
/// start when the unconstrained minimizer violates constraints. Deterministic
/// for identical inputs; never labels an infeasible point Optimal.
inline QpSolution solve_qp(const QpProblem& p, const ToleranceConfig& tol = {},
                           const QpSolveOptions& opts = {})
{
    using namespace qp_detail;
    tol.require_valid();
    if (p.hessian_blocks.size() != p.linear_blocks.size())
        throw DimensionMismatch("solve_qp: hessian/linear block count mismatch");
    for (size_t b = 0; b < p.hessian_blocks.size(); ++b)
        if (p.hessian_blocks[b].rows() != p.hessian_blocks[b].cols() ||
            p.hessian_blocks[b].rows() != p.linear_blocks[b].size())
            throw DimensionMismatch("solve_qp: block shape mismatch");
    if (p.num_rows() > 0 && p.G.cols() != p.num_vars())
        throw DimensionMismatch("solve_qp: G column count must equal variable count");
    if (p.num_rows() != p.g.size())
        throw DimensionMismatch("solve_qp: G rows must match g length");

    HessianFactor hf(p, opts.monolithic_kkt);
    const int max_iter =
        opts.max_iterations > 0 ? opts.max_iterations : 100 + 20 * (p.num_vars() + p.num_rows());

    QpSolution sol;
    sol.lambda = Vector::Zero(p.num_rows());

    Vector start;
    std::vector<int> working;
    bool have_start = false;
    int extra_iters = 0;

    if (!opts.warm_active_rows.empty()) {
        auto rows = prune_dependent_rows(p, opts.warm_active_rows);
        if (!rows.empty()) {
            Vector uw = equality_qp_point(p, hf, rows);
            if (p.max_violation(uw) <= tol.feas_tol) {
                start = std::move(uw);
                working = std::move(rows);
                have_start = true;
            }
        }
    }

    if (!have_start) {
        Vector u0 = -hf.solve(p.stacked_linear());
        if (p.max_violation(u0) <= tol.feas_tol) {
            start = std::move(u0);
            have_start = true;
        } else {
            // Phase 1: minimize (a strictly convex surrogate of) the max violation.
            const int n = p.num_vars();
            const double rho = 1e-10;
            QpProblem aux;
            Matrix haux = Matrix::Zero(n + 1, n + 1);
            haux.topLeftCorner(n, n) = rho * Matrix::Identity(n, n);
            haux(n, n) = 1.0;
            Vector caux(n + 1);
            caux.head(n) = -rho * u0;
            caux(n) = 1.0;
            aux.hessian_blocks = {haux};
            aux.linear_blocks = {caux};
            aux.G = Matrix(p.num_rows(), n + 1);
            aux.G.leftCols(n) = p.G;
            aux.G.col(n).setConstant(-1.0);
            aux.g = p.g;

            Vector uaux(n + 1);
            uaux.head(n) = u0;
            uaux(n) = p.max_violation(u0) + 1.0;
            HessianFactor hfaux(aux, false);
            auto ph1 = active_set_loop(aux, hfaux, std::move(uaux), {}, tol, max_iter,
                                       /*kkt_lu=*/true);
            extra_iters = ph1.iterations;
            const double viol = ph1.u(n);
            if (viol > tol.feas_tol || p.max_violation(ph1.u.head(n)) > tol.feas_tol) {
                if (!ph1.optimal) {
                    // Could not even finish phase 1; report the best iterate.
                    sol.status = QpStatus::MaxIterations;
                    sol.u = ph1.u.head(n);
                    sol.iterations = ph1.iterations;
                    sol.kkt.primal = p.max_violation(sol.u);
                    return sol;
                }
                sol.status = QpStatus::Infeasible;
                sol.u = ph1.u.head(n);
                sol.iterations = ph1.iterations;
                // Farkas-type certificate from the phase-1 multipliers.
                Vector cert = Vector::Zero(p.num_rows());
                for (size_t i = 0; i < ph1.working.size(); ++i)
                    if (ph1.lambda_w.size() == static_cast<Eigen::Index>(ph1.working.size()))
                        cert(ph1.working[i]) = std::max(0.0, ph1.lambda_w(static_cast<Eigen::Index>(i)));
                if (cert.sum() > 0) cert /= cert.sum();
                sol.lambda = cert;
                sol.kkt.primal = p.max_violation(sol.u);
                return sol;
            }
            start = ph1.u.head(n);
            have_start = true;
        }
    }

    auto core = active_set_loop(p, hf, std::move(start), std::move(working), tol, max_iter);
    sol.u = core.u;
    sol.iterations = core.iterations + extra_iters;
    sol.active_rows = core.working;
    std::sort(sol.active_rows.begin(), sol.active_rows.end());
    for (size_t i = 0; i < core.working.size(); ++i)
        if (core.lambda_w.size() == static_cast<Eigen::Index>(core.working.size()))
            sol.lambda(core.working[i]) = core.lambda_w(static_cast<Eigen::Index>(i));

    sol.objective_value = p.objective(sol.u);
    if (p.meta.dual_structure) sol.alphas = solution_alphas(p.meta, sol.u);

    // Residuals with the solver's own multipliers.
    const Vector grad = p.hessian_times(sol.u) + p.stacked_linear();
    Vector full = grad;
    if (p.num_rows() > 0) full += p.G.transpose() * sol.lambda;
    sol.kkt.stationarity = full.size() > 0 ? full.cwiseAbs().maxCoeff() : 0.0;
    sol.kkt.primal = p.max_violation(sol.u);
    double comp = 0.0;
    for (int r : sol.active_rows)
        comp = std::max(comp, std::abs(sol.lambda(r) * (p.G.row(r).dot(sol.u) - p.g(r))));
    sol.kkt.complementarity = comp;

    const double stat_scale =
        1.0 + p.stacked_linear().cwiseAbs().maxCoeff() +
        (sol.u.size() > 0 ? p.hessian_times(sol.u).cwiseAbs().maxCoeff() : 0.0);
    if (core.optimal && sol.kkt.primal <= tol.feas_tol &&
        sol.kkt.stationarity <= tol.solver_tol * stat_scale) {
        sol.status = QpStatus::Optimal;
    } else {
        sol.status = QpStatus::MaxIterations;
    }
    return sol;
}

/// Single-block convenience constructor for generic dense QPs.
inline QpProblem make_qp_problem(Matrix h, Vector c, Matrix G, Vector g, double constant = 0.0)
{
    QpProblem p;
    p.meta.state_dim = 1;
    p.meta.meas_dim = static_cast<int>(h.rows());
    p.meta.horizon = 0;
    p.hessian_blocks = {std::move(h)};
    p.linear_blocks = {std::move(c)};
    p.G = std::move(G);
    p.g = std::move(g);
    p.constant = constant;
    return p;
}

/// Euclidean projection onto {x : Hx <= h}.
inline Vector project_onto_polyhedron(const PolyhedralSet& set, const Vector& x,
                                      const ToleranceConfig& tol = {})
{
    if (polyhedron_contains(set, x, tol)) return x;
    const int d = static_cast<int>(x.size());
    auto p = make_qp_problem(2.0 * Matrix::Identity(d, d), -2.0 * x, set.H, set.h, x.squaredNorm());
    auto sol = solve_qp(p, tol);
    if (sol.status == QpStatus::Infeasible)
        throw std::runtime_error("project_onto_polyhedron: set is empty");
    return sol.u;
}

// ---------------------------------------------------------------------------
// Dual-process problem assembly
// ---------------------------------------------------------------------------

namespace qp_detail {

struct DualQpInput {
    Matrix terminal_cov;
    Vector prior_mean;
    std::span<const Vector> window;  // oldest first, length L + 1
    const PolyhedralSet* constraint = nullptr;
    std::vector<int> lags;  // intermediate-constraint lags j (ascending)
};

/// Assemble min trace(z_L' P z_L + S_L(alpha)) over stacked alphas, with the
/// estimate-membership rows H xhat_{L-j} <= h for each requested lag. The
/// objective separates per column of the alpha matrices; the Hessian block is
/// identical for every column, the linear terms differ.
inline QpProblem build_dual_qp(const ValidatedModel& model, const DualQpInput& in)
{
    const int d = model.state_dim();
    const int q = model.meas_dim();
    const int L = static_cast<int>(in.window.size()) - 1;
    if (L < 0) throw DimensionMismatch("build_dual_qp: window must be nonempty");
    for (const auto& y : in.window)
        if (y.size() != q) throw DimensionMismatch("build_dual_qp: measurement dimension mismatch");
    if (in.prior_mean.size() != d) throw DimensionMismatch("build_dual_qp: prior mean dimension");
    if (in.terminal_cov.rows() != d || in.terminal_cov.cols() != d)
        throw DimensionMismatch("build_dual_qp: terminal covariance must be d x d");
    if (in.constraint && in.constraint->H.cols() != d)
        throw DimensionMismatch("build_dual_qp: constraint dimension mismatch");

    const int nb = q * (L + 1);  // per-column variable count
    const Matrix at = model.A().transpose();
    const Matrix ct = model.C().transpose();

    // T[i] = (A')^i and F[i]: z_i column = T[i] e_c + F[i] u_c.
    std::vector<Matrix> tpow(static_cast<size_t>(L) + 1);
    std::vector<Matrix> f(static_cast<size_t>(L) + 1);
    tpow[0] = Matrix::Identity(d, d);
    f[0] = Matrix::Zero(d, nb);
    f[0].middleCols(0, q) = ct;
    for (int i = 1; i <= L; ++i) {
        tpow[static_cast<size_t>(i)] = at * tpow[static_cast<size_t>(i - 1)];
        f[static_cast<size_t>(i)] = at * f[static_cast<size_t>(i - 1)];
        f[static_cast<size_t>(i)].middleCols(i * q, q) += ct;
    }

    Matrix hblock = Matrix::Zero(nb, nb);
    Matrix clin = Matrix::Zero(nb, d);  // column c -> linear term of column c (before the factor 2)
    double constant = 0.0;
    for (int i = 0; i < L; ++i) {
        const Matrix qf = model.Q() * f[static_cast<size_t>(i)];
        hblock += f[static_cast<size_t>(i)].transpose() * qf;
        clin += f[static_cast<size_t>(i)].transpose() * (model.Q() * tpow[static_cast<size_t>(i)]);
        constant += (tpow[static_cast<size_t>(i)].transpose() * model.Q() * tpow[static_cast<size_t>(i)]).trace();
    }
    hblock += f[static_cast<size_t>(L)].transpose() * in.terminal_cov * f[static_cast<size_t>(L)];
    clin += f[static_cast<size_t>(L)].transpose() * (in.terminal_cov * tpow[static_cast<size_t>(L)]);
    constant += (tpow[static_cast<size_t>(L)].transpose() * in.terminal_cov * tpow[static_cast<size_t>(L)]).trace();
    for (int i = 0; i <= L; ++i) hblock.block(i * q, i * q, q, q) += model.R();
    hblock = symmetrize(hblock);

    QpProblem p;
    p.meta.horizon = L;
    p.meta.state_dim = d;
    p.meta.meas_dim = q;
    p.meta.dual_structure = true;
    p.hessian_blocks.assign(static_cast<size_t>(d), 2.0 * hblock);
    p.linear_blocks.reserve(static_cast<size_t>(d));
    for (int c = 0; c < d; ++c) p.linear_blocks.push_back(2.0 * clin.col(c));
    p.constant = constant;

    if (in.constraint && !in.lags.empty()) {
        const auto& set = *in.constraint;
        const int prows = set.rows();
        p.G = Matrix::Zero(static_cast<Eigen::Index>(in.lags.size()) * prows, static_cast<Eigen::Index>(d) * nb);
        p.g = Vector::Zero(static_cast<Eigen::Index>(in.lags.size()) * prows);
        p.meta.row_lag.reserve(in.lags.size() * static_cast<size_t>(prows));
        int row_at = 0;
        for (int j : in.lags) {
            const int m = L - j;
            if (m < 0) throw std::invalid_argument("build_dual_qp: lag exceeds horizon");
            // xhat_{L-j}[e] = v[e] + w' u_e with the lag's own measurement slice.
            Vector w = f[static_cast<size_t>(m)].transpose() * in.prior_mean;
            for (int i = 0; i <= m; ++i)
                w.segment(i * q, q) -= in.window[static_cast<size_t>(m - i)];
            const Vector v = tpow[static_cast<size_t>(m)].transpose() * in.prior_mean;
            for (int r = 0; r < prows; ++r) {
                for (int e = 0; e < d; ++e)
                    p.G.row(row_at).segment(e * nb, nb) = set.H(r, e) * w.transpose();
                p.g(row_at) = set.h(r) - set.H.row(r).dot(v);
                p.meta.row_lag.push_back(j);
                ++row_at;
            }
        }
    } else {
        p.G = Matrix::Zero(0, static_cast<Eigen::Index>(d) * nb);
        p.g = Vector::Zero(0);
    }
    return p;
}

} // namespace qp_detail

/// Full-information problem at time t over alpha_0..alpha_t. Intermediate
/// constraint lags: j = 0 only for t <= n, j in {0..t-n} for t >= n+1.
inline QpProblem build_fie_qp(const ValidatedModel& model,
                              const std::optional<PolyhedralSet>& constraint,
                              std::span<const Vector> measurements, int t, int n)
{
    if (static_cast<int>(measurements.size()) != t + 1)
        throw DimensionMismatch("build_fie_qp: need measurements y_0..y_t");
    qp_detail::DualQpInput in;
    in.terminal_cov = model.prior_cov();
    in.prior_mean = model.prior_mean();
    in.window = measurements;
    if (constraint) {
        in.constraint = &*constraint;
        const int jmax = t <= n ? 0 : t - n;
        for (int j = 0; j <= jmax; ++j) in.lags.push_back(j);
    }
    return qp_detail::build_dual_qp(model, in);
}

/// Moving-horizon problem over alpha_0..alpha_N with arrival pair
/// (prior_mean, terminal_cov) at the window head; single constraint block.
inline QpProblem build_mhe_qp(const ValidatedModel& model,
                              const std::optional<PolyhedralSet>& constraint,
                              std::span<const Vector> window, const Vector& prior_mean,
                              const Matrix& terminal_cov, int N)
{
    if (static_cast<int>(window.size()) != N + 1)
        throw DimensionMismatch("build_mhe_qp: window length must be N + 1");
    qp_detail::DualQpInput in;
    in.terminal_cov = terminal_cov;
    in.prior_mean = prior_mean;
    in.window = window;
    if (constraint) {
        in.constraint = &*constraint;
        in.lags = {0};
    }
    return qp_detail::build_dual_qp(model, in);
}

/// JSON dump of a problem for cross-solver debugging.
inline nlohmann::json qp_problem_to_json(const QpProblem& p)
{
    nlohmann::json j;
    auto mat = [](const Matrix& m) {
        nlohmann::json rows = nlohmann::json::array();
        for (Eigen::Index r = 0; r < m.rows(); ++r) {
            nlohmann::json row = nlohmann::json::array();
            for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
            rows.push_back(std::move(row));
        }
        return rows;
    };
    auto vec = [](const Vector& v) {
        nlohmann::json arr = nlohmann::json::array();
        for (Eigen::Index i = 0; i < v.size(); ++i) arr.push_back(v(i));
        return arr;
    };
    j["hessian_blocks"] = nlohmann::json::array();
    for (const auto& h : p.hessian_blocks) j["hessian_blocks"].push_back(mat(h));
    j["linear_blocks"] = nlohmann::json::array();
    for (const auto& c : p.linear_blocks) j["linear_blocks"].push_back(vec(c));
    j["G"] = mat(p.G);
    j["g"] = vec(p.g);
    j["constant"] = p.constant;
    j["meta"] = {{"horizon", p.meta.horizon},
                 {"state_dim", p.meta.state_dim},
                 {"meas_dim", p.meta.meas_dim},
                 {"dual_structure", p.meta.dual_structure},
                 {"row_lag", p.meta.row_lag}};
    return j;
}

} // namespace mvce
