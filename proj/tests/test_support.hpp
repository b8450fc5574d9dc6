#pragma once

#include "mvce/model.hpp"

#include <random>
#include <vector>

namespace test_support {

/// Well-mixed isothermal batch reactor benchmark model.
inline mvce::SystemModel batch_reactor()
{
    mvce::SystemModel m;
    m.A = mvce::Matrix(3, 3);
    m.A << 0.8831, 0.0078, 0.0022,
           0.1150, 0.9563, 0.0028,
           0.1178, 0.0102, 0.9954;
    m.C = mvce::Matrix(1, 3);
    m.C << 32.84, 32.84, 32.84;
    m.Q = 0.0001 * mvce::Matrix::Identity(3, 3);
    m.R = mvce::Matrix::Constant(1, 1, 0.0625);
    m.prior_mean = mvce::Vector(3);
    m.prior_mean << 1.0, 1.0, 4.0;
    m.prior_cov = mvce::Matrix::Identity(3, 3);
    return m;
}

inline mvce::PolyhedralSet reactor_constraint() { return mvce::nonnegative_orthant(3); }

inline mvce::SystemModel scalar_model(double a, double c, double q, double r, double mean,
                                      double cov)
{
    mvce::SystemModel m;
    m.A = mvce::Matrix::Constant(1, 1, a);
    m.C = mvce::Matrix::Constant(1, 1, c);
    m.Q = mvce::Matrix::Constant(1, 1, q);
    m.R = mvce::Matrix::Constant(1, 1, r);
    m.prior_mean = mvce::Vector::Constant(1, mean);
    m.prior_cov = mvce::Matrix::Constant(1, 1, cov);
    return m;
}

/// Simulated measurement run of a model (independent of the bench module).
struct SimulatedRun {
    std::vector<mvce::Vector> states;        // x_0..x_T
    std::vector<mvce::Vector> measurements;  // y_0..y_T
};

inline mvce::Matrix cov_sqrt(const mvce::Matrix& cov)
{
    Eigen::SelfAdjointEigenSolver<mvce::Matrix> es(mvce::symmetrize(cov));
    return es.eigenvectors() * es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal();
}

inline SimulatedRun simulate(const mvce::SystemModel& m, int steps, std::uint64_t seed,
                             bool noisy = true)
{
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n01(0.0, 1.0);
    const auto d = m.A.rows();
    const auto q = m.C.rows();
    const mvce::Matrix qs = cov_sqrt(m.Q);
    const mvce::Matrix rs = cov_sqrt(m.R);
    const mvce::Matrix ps = cov_sqrt(m.prior_cov);
    auto draw = [&](const mvce::Matrix& factor) {
        mvce::Vector z(factor.cols());
        for (Eigen::Index i = 0; i < z.size(); ++i) z(i) = n01(rng);
        return mvce::Vector(factor * z);
    };

    SimulatedRun run;
    mvce::Vector x = m.prior_mean + (noisy ? draw(ps) : mvce::Vector::Zero(d));
    for (int t = 0; t <= steps; ++t) {
        if (t > 0) x = m.A * x + (noisy ? draw(qs) : mvce::Vector::Zero(d));
        run.states.push_back(x);
        run.measurements.push_back(m.C * x + (noisy ? draw(rs) : mvce::Vector::Zero(q)));
    }
    return run;
}

inline mvce::Matrix random_matrix(std::mt19937_64& rng, int rows, int cols, double scale = 1.0)
{
    std::normal_distribution<double> n01(0.0, 1.0);
    mvce::Matrix m(rows, cols);
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) m(r, c) = scale * n01(rng);
    return m;
}

inline mvce::Matrix random_spd(std::mt19937_64& rng, int n, double ridge = 0.1)
{
    mvce::Matrix m = random_matrix(rng, n, n);
    return mvce::Matrix(m.transpose() * m + ridge * mvce::Matrix::Identity(n, n));
}

} // namespace test_support
