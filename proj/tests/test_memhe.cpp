#include "mvce/memhe.hpp"
#include "test_support.hpp"

#include <catch2/catch_amalgamated.hpp>

using namespace mvce;
using test_support::batch_reactor;

namespace {

/// Independent full-information least-squares oracle: minimize over the whole
/// state path x_0..x_t the prior plus noise energies, return x_t. Solved by
/// stacking the normal equations directly.
Vector batch_least_squares_terminal(const SystemModel& m, const std::vector<Vector>& ys)
{
    const int d = static_cast<int>(m.A.rows());
    const int t = static_cast<int>(ys.size()) - 1;
    const int nv = d * (t + 1);
    const Matrix pinv = m.prior_cov.inverse();
    const Matrix qinv = m.Q.inverse();
    const Matrix rinv = m.R.inverse();

    Matrix h = Matrix::Zero(nv, nv);
    Vector b = Vector::Zero(nv);
    h.topLeftCorner(d, d) += pinv;
    b.head(d) += pinv * m.prior_mean;
    for (int k = 0; k <= t; ++k) {
        h.block(k * d, k * d, d, d) += m.C.transpose() * rinv * m.C;
        b.segment(k * d, d) += m.C.transpose() * rinv * ys[static_cast<size_t>(k)];
    }
    for (int k = 0; k < t; ++k) {
        // w_k = x_{k+1} - A x_k
        Matrix j = Matrix::Zero(d, nv);
        j.middleCols((k + 1) * d, d) = Matrix::Identity(d, d);
        j.middleCols(k * d, d) = -m.A;
        h += j.transpose() * qinv * j;
    }
    const Vector x = h.ldlt().solve(b);
    return x.segment(t * d, d);
}

} // namespace

TEST_CASE("MEMHE requires positive definite Q")
{
    auto m = batch_reactor();
    m.Q = Matrix::Zero(3, 3);
    auto vm = validate_model(m);
    CHECK_THROWS_AS(MemheEstimator(vm, 4, std::nullopt), NotPd);
}

TEST_CASE("unconstrained MEMHE with N=0 equals the Kalman filter")
{
    auto m = batch_reactor();
    auto vm = validate_model(m);
    auto run = test_support::simulate(m, 15, 202);
    auto beliefs = kf_run(vm, run.measurements);
    MemheEstimator est(vm, 0, std::nullopt);
    for (size_t t = 0; t < run.measurements.size(); ++t) {
        auto rec = est.step(run.measurements[t]);
        CHECK((rec.x_hat - beliefs[t].mean).cwiseAbs().maxCoeff() < 1e-8);
    }
}

TEST_CASE("unconstrained MEMHE matches the batch least-squares oracle")
{
    auto m = batch_reactor();
    auto vm = validate_model(m);
    auto run = test_support::simulate(m, 10, 303);
    MemheEstimator est(vm, 4, std::nullopt);
    for (size_t t = 0; t < run.measurements.size(); ++t) {
        auto rec = est.step(run.measurements[t]);
        std::vector<Vector> prefix(run.measurements.begin(),
                                   run.measurements.begin() + static_cast<long>(t) + 1);
        const Vector oracle = batch_least_squares_terminal(m, prefix);
        CHECK((rec.x_hat - oracle).cwiseAbs().maxCoeff() < 1e-6);
    }
}

TEST_CASE("noiseless consistent data is tracked exactly")
{
    auto m = batch_reactor();
    auto vm = validate_model(m);
    auto run = test_support::simulate(m, 10, 0, /*noisy=*/false);
    MemheEstimator est(vm, 4, test_support::reactor_constraint());
    for (size_t t = 0; t < run.measurements.size(); ++t) {
        auto rec = est.step(run.measurements[t]);
        CHECK((rec.x_hat - run.states[t]).cwiseAbs().maxCoeff() < 1e-8);
    }
}

TEST_CASE("active constraints keep the estimate in the set")
{
    // Strongly negative measurements drive the unconstrained estimate below
    // zero; the constrained one must stay feasible.
    auto m = test_support::scalar_model(1.0, 1.0, 0.05, 0.1, 0.5, 1.0);
    auto vm = validate_model(m);
    MemheEstimator con(vm, 2, nonnegative_orthant(1));
    MemheEstimator unc(vm, 2, std::nullopt);
    bool saw_negative_unconstrained = false;
    for (int t = 0; t <= 6; ++t) {
        const Vector y = Vector::Constant(1, -2.0);
        auto rc = con.step(y);
        auto ru = unc.step(y);
        saw_negative_unconstrained = saw_negative_unconstrained || ru.x_hat(0) < -0.1;
        CHECK(rc.x_hat(0) >= -vm.tol().feas_tol);
    }
    CHECK(saw_negative_unconstrained);
}

TEST_CASE("removing a redundant constraint cannot increase the optimum")
{
    auto m = test_support::scalar_model(1.0, 1.0, 0.05, 0.1, 0.5, 1.0);
    auto vm = validate_model(m);

    PolyhedralSet doubled;
    doubled.H = Matrix(2, 1);
    doubled.H << -1.0, -1.0;  // the second row repeats the first
    doubled.h = Vector::Zero(2);

    MemheEstimator with(vm, 2, doubled);
    MemheEstimator without(vm, 2, nonnegative_orthant(1));
    for (int t = 0; t <= 5; ++t) {
        const Vector y = Vector::Constant(1, -1.5);
        auto a = with.step(y);
        auto b = without.step(y);
        CHECK(b.cost_trace <= a.cost_trace + vm.tol().solver_tol * (1.0 + std::abs(a.cost_trace)));
        CHECK(std::abs(a.x_hat(0) - b.x_hat(0)) <= 1e-8);
    }
}
