#pragma once

#include "mvce/linalg.hpp"

#include <optional>
#include <stdexcept>
#include <string>
#include <utility>

namespace mvce {

/// Numeric tolerances shared across the toolkit. All must be strictly positive.
struct ToleranceConfig {
    double rank_tol = 1e-10;   ///< singular-value cutoff for rank / pseudoinverse
    double psd_tol = 1e-9;     ///< relative eigenvalue slack for (semi)definiteness tests
    double feas_tol = 1e-8;    ///< constraint violation slack
    double solver_tol = 1e-8;  ///< QP stationarity / KKT tolerance

    void require_valid() const
    {
        if (rank_tol <= 0 || psd_tol <= 0 || feas_tol <= 0 || solver_tol <= 0)
            throw std::invalid_argument("ToleranceConfig: all tolerances must be strictly positive");
    }
};

/// Polyhedron {x : Hx <= h}. The caller declares the set nonempty.
struct PolyhedralSet {
    Matrix H;  // p x d
    Vector h;  // p

    int rows() const { return static_cast<int>(H.rows()); }
    int dim() const { return static_cast<int>(H.cols()); }
};

inline bool polyhedron_contains(const PolyhedralSet& set, const Vector& x,
                                const ToleranceConfig& tol)
{
    if (set.H.rows() < 1 || set.H.rows() != set.h.size())
        throw DimensionMismatch("PolyhedralSet: H rows must match h length and p >= 1");
    if (x.size() != set.H.cols())
        throw DimensionMismatch("polyhedron_contains: x dimension does not match H");
    return ((set.H * x - set.h).maxCoeff() <= tol.feas_tol);
}

/// Axis-aligned nonnegativity set {x >= 0} in dimension d (H = -I, h = 0).
inline PolyhedralSet nonnegative_orthant(int d)
{
    return PolyhedralSet{-Matrix::Identity(d, d), Vector::Zero(d)};
}

/// Plant description: x_{t+1} = A x_t + w_t, y_t = C x_t + v_t,
/// w ~ (0, Q), v ~ (0, R), x_0 ~ (prior_mean, prior_cov).
struct SystemModel {
    Matrix A;           // d x d
    Matrix C;           // q x d
    Matrix Q;           // d x d, symmetric PSD
    Matrix R;           // q x q, symmetric PD
    Vector prior_mean;  // d
    Matrix prior_cov;   // d x d, symmetric PD
};

struct NotPsd : std::invalid_argument {
    explicit NotPsd(const std::string& which)
        : std::invalid_argument("matrix " + which + " is not positive semidefinite") {}
};

struct NotPd : std::invalid_argument {
    explicit NotPd(const std::string& which)
        : std::invalid_argument("matrix " + which + " is not positive definite") {}
};

struct NotObservable : std::runtime_error {
    using std::runtime_error::runtime_error;
};

class ValidatedModel;
ValidatedModel validate_model(const SystemModel& model, const ToleranceConfig& tol);

/// A SystemModel whose invariants have been checked; Q, R and the prior
/// covariance are stored symmetrized. Immutable after construction.
class ValidatedModel {
public:
    const Matrix& A() const { return m_.A; }
    const Matrix& C() const { return m_.C; }
    const Matrix& Q() const { return m_.Q; }
    const Matrix& R() const { return m_.R; }
    const Vector& prior_mean() const { return m_.prior_mean; }
    const Matrix& prior_cov() const { return m_.prior_cov; }
    const SystemModel& system() const { return m_; }
    const ToleranceConfig& tol() const { return tol_; }

    int state_dim() const { return static_cast<int>(m_.A.rows()); }
    int meas_dim() const { return static_cast<int>(m_.C.rows()); }

    /// Copy with a different initial prior (dimensions must match).
    ValidatedModel with_prior(const Vector& mean, const Matrix& cov) const
    {
        SystemModel m = m_;
        m.prior_mean = mean;
        m.prior_cov = cov;
        return validate_model(m, tol_);
    }

private:
    friend ValidatedModel validate_model(const SystemModel&, const ToleranceConfig&);
    ValidatedModel(SystemModel m, ToleranceConfig tol) : m_(std::move(m)), tol_(tol) {}

    SystemModel m_;
    ToleranceConfig tol_;
};

/// Checks dimensions and definiteness; symmetrizes Q, R, prior_cov by
/// (M + M')/2 before testing. Throws DimensionMismatch / NotPsd / NotPd.
inline ValidatedModel validate_model(const SystemModel& model, const ToleranceConfig& tol = {})
{
    tol.require_valid();
    const auto d = model.A.rows();
    const auto q = model.C.rows();
    if (model.A.cols() != d) throw DimensionMismatch("A must be square");
    if (model.C.cols() != d) throw DimensionMismatch("C must have d columns");
    if (model.Q.rows() != d || model.Q.cols() != d) throw DimensionMismatch("Q must be d x d");
    if (model.R.rows() != q || model.R.cols() != q) throw DimensionMismatch("R must be q x q");
    if (model.prior_mean.size() != d) throw DimensionMismatch("prior_mean must have length d");
    if (model.prior_cov.rows() != d || model.prior_cov.cols() != d)
        throw DimensionMismatch("prior_cov must be d x d");

    SystemModel m = model;
    m.Q = symmetrize(model.Q);
    m.R = symmetrize(model.R);
    m.prior_cov = symmetrize(model.prior_cov);

    if (!is_psd(m.Q, tol.psd_tol)) throw NotPsd("Q");
    if (!is_pd(m.R, tol.psd_tol)) throw NotPd("R");
    if (!is_pd(m.prior_cov, tol.psd_tol)) throw NotPd("prior_cov");
    return ValidatedModel(std::move(m), tol);
}

/// Validating an already-validated model is the identity.
inline const ValidatedModel& validate_model(const ValidatedModel& model) { return model; }

/// Smallest n <= d with rank(R_n(A', C')) = d. Throws NotObservable.
inline int observability_index(const Matrix& A, const Matrix& C, const ToleranceConfig& tol = {})
{
    if (A.rows() != A.cols()) throw DimensionMismatch("observability_index: A must be square");
    if (C.cols() != A.rows()) throw DimensionMismatch("observability_index: C must have d columns");
    const int d = static_cast<int>(A.rows());
    for (int n = 1; n <= d; ++n) {
        if (svd_rank(reachability_matrix(A.transpose(), C.transpose(), n), tol.rank_tol) == d)
            return n;
    }
    throw NotObservable("(A, C) is not observable");
}

inline int observability_index(const ValidatedModel& model)
{
    return observability_index(model.A(), model.C(), model.tol());
}

} // namespace mvce
