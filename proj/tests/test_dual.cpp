#include "mvce/dual.hpp"
#include "mvce/kalman.hpp"
#include "mvce/qp.hpp"
#include "mvce/stability.hpp"
#include "test_support.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <random>

using namespace mvce;
using test_support::batch_reactor;

namespace {

DualControlSequence random_controls(std::mt19937_64& rng, int q, int d, int L, double scale)
{
    DualControlSequence c;
    for (int i = 0; i <= L; ++i) c.alphas.push_back(test_support::random_matrix(rng, q, d, scale));
    return c;
}

} // namespace

TEST_CASE("dual rollout with zero controls gives powers of A'")
{
    auto vm = validate_model(batch_reactor());
    auto traj = dual_rollout(vm, zero_controls(1, 3, 4));
    for (int i = 0; i <= 4; ++i)
        CHECK(traj.zs[static_cast<size_t>(i)].isApprox(matrix_power(vm.A().transpose(), i), 1e-14));
}

TEST_CASE("dual rollout matches the closed-form expansion")
{
    // z_L' = A^L + sum_i alpha_i' C A^{L-i}
    auto vm = validate_model(batch_reactor());
    std::mt19937_64 rng(21);
    for (int trial = 0; trial < 10; ++trial) {
        const int L = 1 + static_cast<int>(rng() % 5);
        auto controls = random_controls(rng, 1, 3, L, 0.02);
        auto traj = dual_rollout(vm, controls);
        Matrix closed = matrix_power(vm.A(), L);
        for (int i = 0; i <= L; ++i)
            closed += controls.alphas[static_cast<size_t>(i)].transpose() * vm.C() *
                      matrix_power(vm.A(), L - i);
        CHECK((traj.zs.back().transpose() - closed).cwiseAbs().maxCoeff() < 1e-10);
    }
}

TEST_CASE("dual rollout at L=0 with the filter gain")
{
    auto vm = validate_model(batch_reactor());
    const Matrix s = vm.C() * vm.prior_cov() * vm.C().transpose() + vm.R();
    const Matrix alpha0 = -s.inverse() * vm.C() * vm.prior_cov();
    DualControlSequence controls{{alpha0}};
    auto traj = dual_rollout(vm, controls);
    CHECK(traj.zs[0].isApprox(Matrix::Identity(3, 3) + vm.C().transpose() * alpha0, 1e-14));
}

TEST_CASE("dual rollout rejects misshaped controls")
{
    auto vm = validate_model(batch_reactor());
    DualControlSequence bad{{Matrix::Zero(2, 3)}};
    CHECK_THROWS_AS(dual_rollout(vm, bad), DimensionMismatch);
}

TEST_CASE("assemble_estimate")
{
    auto m = batch_reactor();
    auto vm = validate_model(m);

    SECTION("zero controls give the open-loop prediction")
    {
        const int L = 5;
        auto controls = zero_controls(1, 3, L);
        auto traj = dual_rollout(vm, controls);
        auto run = test_support::simulate(m, L, 3);
        Vector xhat = assemble_estimate(traj, controls, vm.prior_mean(),
                                        std::span<const Vector>(run.measurements));
        CHECK(xhat.isApprox(matrix_power(m.A, L) * vm.prior_mean(), 1e-12));
    }
    SECTION("L=0 filter gain reproduces kf_update")
    {
        const Matrix s = vm.C() * vm.prior_cov() * vm.C().transpose() + vm.R();
        const Matrix alpha0 = -s.inverse() * vm.C() * vm.prior_cov();
        DualControlSequence controls{{alpha0}};
        auto traj = dual_rollout(vm, controls);
        Vector y = Vector::Constant(1, 150.0);
        std::vector<Vector> window{y};
        Vector xhat =
            assemble_estimate(traj, controls, vm.prior_mean(), std::span<const Vector>(window));
        auto kf = kf_update({vm.prior_mean(), vm.prior_cov()}, y, vm);
        CHECK((xhat - kf.mean).cwiseAbs().maxCoeff() < 1e-10);
    }
    SECTION("deadbeat controls make the estimate prior-independent on nominal data")
    {
        const int n = 3;
        auto policy = deadbeat_policy(vm, n, Matrix::Zero(1, 3));
        auto nominal = test_support::simulate(m, n, 0, /*noisy=*/false);
        std::mt19937_64 rng(9);
        for (int trial = 0; trial < 5; ++trial) {
            Vector prior = test_support::random_matrix(rng, 3, 1).col(0);
            Vector xhat = assemble_estimate(policy.trajectory, policy.controls, prior,
                                            std::span<const Vector>(nominal.measurements));
            CHECK((xhat - nominal.states.back()).cwiseAbs().maxCoeff() < 1e-9);
        }
    }
    SECTION("window length is checked")
    {
        auto controls = zero_controls(1, 3, 2);
        auto traj = dual_rollout(vm, controls);
        std::vector<Vector> window{Vector::Zero(1)};
        CHECK_THROWS_AS(assemble_estimate(traj, controls, vm.prior_mean(),
                                          std::span<const Vector>(window)),
                        WindowLengthMismatch);
    }
}

TEST_CASE("dual_cost")
{
    SECTION("zero controls and zero Q leave only the terminal term")
    {
        auto m = batch_reactor();
        m.Q = Matrix::Zero(3, 3);
        auto vm = validate_model(m);
        const int L = 4;
        auto controls = zero_controls(1, 3, L);
        auto cost = dual_cost(vm, vm.prior_cov(), controls, dual_rollout(vm, controls));
        const Matrix al = matrix_power(m.A, L);
        CHECK(cost.trace_value ==
              Catch::Approx((al.transpose() * vm.prior_cov() * al).trace()).epsilon(1e-12));
        CHECK(cost.stage_part.cwiseAbs().maxCoeff() == 0.0);
    }
    SECTION("scalar L=0 optimum value is 0.5")
    {
        auto vm = validate_model(test_support::scalar_model(1, 1, 0, 1, 0, 1));
        const Matrix alpha0 = Matrix::Constant(1, 1, -0.5);  // -(C S C' + R)^{-1} C S
        DualControlSequence controls{{alpha0}};
        auto cost = dual_cost(vm, vm.prior_cov(), controls, dual_rollout(vm, controls));
        CHECK(cost.trace_value == Catch::Approx(0.5).epsilon(1e-12));
    }
    SECTION("cost matrices satisfy their invariants")
    {
        auto vm = validate_model(batch_reactor());
        std::mt19937_64 rng(31);
        for (int trial = 0; trial < 10; ++trial) {
            auto controls = random_controls(rng, 1, 3, 4, 0.02);
            auto cost = dual_cost(vm, vm.prior_cov(), controls, dual_rollout(vm, controls));
            const double scale = 1.0 + cost.sigma.cwiseAbs().maxCoeff();
            CHECK((cost.sigma - cost.terminal_part - cost.stage_part).cwiseAbs().maxCoeff() <=
                  1e-14 * scale);
            CHECK(std::abs(cost.trace_value - cost.sigma.trace()) <=
                  1e-10 * (1.0 + std::abs(cost.trace_value)));
            CHECK(is_psd(symmetrize(cost.sigma), vm.tol().psd_tol));
        }
    }
}

TEST_CASE("duality identity: Monte-Carlo MSE matches the cost trace")
{
    // For a fixed control sequence the expected squared error over the
    // (x_0, w, v) ensemble equals trace(G_0(z_L) + S_L(alpha)).
    auto m = batch_reactor();
    auto vm = validate_model(m);
    const int L = 4;
    std::mt19937_64 rng(123);
    auto controls = random_controls(rng, 1, 3, L, 0.01);
    auto traj = dual_rollout(vm, controls);
    const double expected = dual_cost(vm, vm.prior_cov(), controls, traj).trace_value;

    const int paths = 100000;
    std::normal_distribution<double> n01(0.0, 1.0);
    const Matrix qs = test_support::cov_sqrt(m.Q);
    const Matrix rs = test_support::cov_sqrt(m.R);
    const Matrix ps = test_support::cov_sqrt(m.prior_cov);
    double sum = 0.0, sumsq = 0.0;
    std::vector<Vector> ys(static_cast<size_t>(L) + 1);
    for (int i = 0; i < paths; ++i) {
        Vector z3(3), z1(1);
        for (int k = 0; k < 3; ++k) z3(k) = n01(rng);
        Vector x = m.prior_mean + ps * z3;
        for (int t = 0; t <= L; ++t) {
            if (t > 0) {
                for (int k = 0; k < 3; ++k) z3(k) = n01(rng);
                x = m.A * x + qs * z3;
            }
            z1(0) = n01(rng);
            ys[static_cast<size_t>(t)] = m.C * x + rs * z1;
        }
        Vector xhat =
            assemble_estimate(traj, controls, vm.prior_mean(), std::span<const Vector>(ys));
        const double err = (x - xhat).squaredNorm();
        sum += err;
        sumsq += err * err;
    }
    const double mean = sum / paths;
    const double var = sumsq / paths - mean * mean;
    const double sem = std::sqrt(var / paths);
    CHECK(std::abs(mean - expected) <= 3.0 * sem);
}

TEST_CASE("shift consistency of the optimal cost")
{
    // Reducing the horizon by one step while replacing the terminal weight by
    // the propagated posterior leaves the optimal value unchanged.
    auto m = batch_reactor();
    auto vm = validate_model(m);
    auto run = test_support::simulate(m, 4, 17);

    const int t = 4;
    auto fie = build_fie_qp(vm, std::nullopt, std::span<const Vector>(run.measurements), t, 3);
    auto fie_sol = solve_qp(fie, vm.tol());

    auto post0 = kf_update({vm.prior_mean(), vm.prior_cov()}, run.measurements[0], vm);
    auto pred1 = kf_predict(post0, vm);
    std::vector<Vector> window(run.measurements.begin() + 1, run.measurements.end());
    auto mhe = build_mhe_qp(vm, std::nullopt, std::span<const Vector>(window), pred1.mean,
                            pred1.cov, t - 1);
    auto mhe_sol = solve_qp(mhe, vm.tol());

    CHECK(fie_sol.objective_value ==
          Catch::Approx(mhe_sol.objective_value).epsilon(1e-9));
}
