#pragma once

#include <Eigen/Dense>

#include <stdexcept>
#include <string>

namespace mvce {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

struct DimensionMismatch : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

inline Matrix symmetrize(const Matrix& m) { return 0.5 * (m + m.transpose()); }

/// Eigenvalues of a symmetric matrix, ascending.
inline Vector sym_eigenvalues(const Matrix& m)
{
    Eigen::SelfAdjointEigenSolver<Matrix> es(m, Eigen::EigenvaluesOnly);
    return es.eigenvalues();
}

/// PSD test with relative slack: eigmin >= -psd_tol * (1 + max|eig|).
inline bool is_psd(const Matrix& sym, double psd_tol)
{
    if (sym.size() == 0) return true;
    Vector ev = sym_eigenvalues(sym);
    double hi = ev.cwiseAbs().maxCoeff();
    return ev.minCoeff() >= -psd_tol * (1.0 + hi);
}

/// Strict PD test with the same relative slack on the positive side.
inline bool is_pd(const Matrix& sym, double psd_tol)
{
    if (sym.size() == 0) return false;
    Vector ev = sym_eigenvalues(sym);
    double hi = ev.cwiseAbs().maxCoeff();
    return ev.minCoeff() > psd_tol * (1.0 + hi);
}

/// A^p by repeated multiplication, p >= 0.
inline Matrix matrix_power(const Matrix& a, int p)
{
    if (a.rows() != a.cols()) throw DimensionMismatch("matrix_power: matrix must be square");
    if (p < 0) throw std::invalid_argument("matrix_power: negative exponent");
    Matrix out = Matrix::Identity(a.rows(), a.cols());
    for (int i = 0; i < p; ++i) out = a * out;
    return out;
}

/// Numerical rank from singular values above rank_tol * sigma_max.
inline int svd_rank(const Matrix& m, double rank_tol)
{
    if (m.size() == 0) return 0;
    Eigen::JacobiSVD<Matrix> svd(m);
    const auto& sv = svd.singularValues();
    if (sv.size() == 0 || sv(0) <= 0.0) return 0;
    double cutoff = rank_tol * sv(0);
    int r = 0;
    for (int i = 0; i < sv.size(); ++i)
        if (sv(i) > cutoff) ++r;
    return r;
}

/// Moore-Penrose pseudoinverse via SVD with relative cutoff.
inline Matrix pseudoinverse(const Matrix& m, double rank_tol)
{
    Eigen::JacobiSVD<Matrix> svd(m, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const auto& sv = svd.singularValues();
    double cutoff = sv.size() > 0 ? rank_tol * sv(0) : 0.0;
    Vector inv = Vector::Zero(sv.size());
    for (int i = 0; i < sv.size(); ++i)
        if (sv(i) > cutoff) inv(i) = 1.0 / sv(i);
    return svd.matrixV() * inv.asDiagonal() * svd.matrixU().transpose();
}

/// t-step reachability matrix [A^{t-1}B, ..., AB, B], size d x (m*t).
inline Matrix reachability_matrix(const Matrix& a, const Matrix& b, int t)
{
    if (a.rows() != a.cols()) throw DimensionMismatch("reachability_matrix: A must be square");
    if (b.rows() != a.rows()) throw DimensionMismatch("reachability_matrix: B row count must match A");
    if (t < 1) throw std::invalid_argument("reachability_matrix: t must be >= 1");
    const auto d = a.rows();
    const auto m = b.cols();
    Matrix out(d, m * t);
    Matrix block = b;  // A^0 B
    for (int k = t - 1; k >= 0; --k) {
        out.middleCols(k * m, m) = block;
        if (k > 0) block = a * block;
    }
    return out;
}

} // namespace mvce
