#include <gtest/gtest.h>

#include <cmath>

#include "mtvsr/phantom.hpp"
#include "mtvsr/regularization.hpp"
#include "test_util.hpp"

using namespace mtvsr;

TEST(ScalingFit, ExactLineThroughOrigin)
{
    const ScalingFit f = fit_scaling(std::vector<IntensityGradientSample>{{100.0, 30.0}, {200.0, 60.0}, {50.0, 15.0}});
    EXPECT_NEAR(f.slope, 0.3, 1e-15);
    EXPECT_NEAR(f.residual_rms, 0.0, 1e-12);
    EXPECT_EQ(f.n_samples, 3u);
}

TEST(ScalingFit, SinglePoint)
{
    EXPECT_DOUBLE_EQ(fit_scaling(std::vector<IntensityGradientSample>{{80.0, 20.0}}).slope, 0.25);
}

TEST(ScalingFit, MatchesNormalEquation)
{
    const auto mu = testutil::random_vector(40, 1), s = testutil::random_vector(40, 2);
    std::vector<IntensityGradientSample> samples;
    Eigen::VectorXd x(40), y(40);
    for (int i = 0; i < 40; ++i) {
        samples.push_back({100.0 + 20.0 * mu[i], 30.0 + 3.0 * s[i] + 0.2 * mu[i]});
        x[i] = samples.back().mean_intensity;
        y[i] = samples.back().gradient_sd;
    }
    const double expect = x.colPivHouseholderQr().solve(y)(0);
    EXPECT_NEAR(fit_scaling(samples).slope, expect, 1e-12 * expect);
}

TEST(ScalingFit, RejectsDegenerateInput)
{
    EXPECT_THROW(fit_scaling(std::vector<IntensityGradientSample>{}), std::invalid_argument);
    EXPECT_THROW(fit_scaling(std::vector<IntensityGradientSample>{{0.0, 1.0}}), EstimationError);
}

TEST(Lambda, FromGradientSd)
{
    // Laplace scale b = sqrt(2/2) = 1, lambda = 1/b^2
    EXPECT_NEAR(lambda_from_gradient_sd(std::sqrt(2.0)), 1.0, 1e-15);
    EXPECT_NEAR(lambda_from_gradient_sd(0.5), 8.0, 1e-12);
    EXPECT_THROW(lambda_from_gradient_sd(0.0), EstimationError);
}

TEST(Lambda, FromMeanTissueIntensity)
{
    ScalingFit f;
    f.slope = 0.25;
    // sigma_grad = 50, lambda = 2 / 2500
    EXPECT_NEAR(estimate_lambda(200.0, f), 8e-4, 1e-16);
    f.slope = 0.0;
    EXPECT_THROW(estimate_lambda(200.0, f), std::invalid_argument);
}

TEST(Lambda, ScalesInverselyWithSquaredIntensity)
{
    ScalingFit f;
    f.slope = kDefaultScalingSlope;
    Volume v = make_phantom(5, Contrast::T1, {.size = 40});
    add_rician_noise(v, 0.03 * v.max(), 1);
    Volume w = v;
    for (auto& x : w.values())
        x *= 4.0;
    const double a = estimate_lambda(v, f), b = estimate_lambda(w, f);
    EXPECT_NEAR(a / b, 16.0, 0.05 * 16.0);
}

TEST(Lambda, DefaultGrid)
{
    const auto g = default_lambda_grid();
    ASSERT_EQ(g.size(), 26u);
    EXPECT_NEAR(g.front(), 1e-4, 1e-18);
    EXPECT_NEAR(g.back(), 10.0, 1e-12);
    for (std::size_t i = 1; i < g.size(); ++i)
        EXPECT_NEAR(g[i] / g[i - 1], std::pow(10.0, 0.2), 1e-12);
}

TEST(Lambda, PhantomSampleIsPositive)
{
    const IntensityGradientSample s = intensity_gradient_sample(make_phantom(1000, Contrast::T1, {.size = 40}));
    EXPECT_GT(s.mean_intensity, 10.0);
    EXPECT_GT(s.gradient_sd, 0.0);
}

namespace {

ReconProblem small_problem(const Volume& truth, double noise_percent, std::uint64_t seed)
{
    auto op = std::make_shared<const ProjectionOperator>(
        make_projection(truth.grid(), thick_slice_meta(truth.grid(), 2, 4.0), SliceProfileKind::Gaussian));
    ReconProblem p;
    p.hr_grid = truth.grid();
    p.prior = Prior::TV;
    const double sigma = noise_percent / 100.0 * truth.max();
    p.groups.push_back({"t1", {{simulate_lr(*op, truth, noise_percent, seed), op, 1.0 / (sigma * sigma)}}, 1.0});
    p.settings.max_admm_iter = 60;
    p.settings.record_timing = false;
    return p;
}

} // namespace

TEST(GridSearch, ProducesOneRowPerLambda)
{
    const Volume truth = make_phantom(3, Contrast::T1, {.size = 24});
    const ReconProblem p = small_problem(truth, 3.0, 1);
    const std::vector<double> lambdas{1e-4, 1e-2, 1.0, 100.0};
    const auto rows = grid_search_lambda(p, lambdas, truth);
    ASSERT_EQ(rows.size(), 4u);
    for (std::size_t i = 0; i < 4; ++i)
        EXPECT_EQ(rows[i].lambda, lambdas[i]);
    // very strong smoothing washes the image out
    EXPECT_LT(rows[3].psnr_db, rows[1].psnr_db);
    EXPECT_THROW(grid_search_lambda(p, {}, truth), std::invalid_argument);
    EXPECT_THROW(grid_search_lambda(p, {-1.0}, truth), std::invalid_argument);
}

TEST(GridSearch, CurveHasSingleInteriorPeak)
{
    const Volume truth = make_phantom(4, Contrast::T2, {.size = 24});
    const ReconProblem p = small_problem(truth, 8.0, 2);
    std::vector<double> lambdas;
    for (int e = -8; e <= 2; ++e)
        lambdas.push_back(std::pow(10.0, 0.5 * e));
    const auto rows = grid_search_lambda(p, lambdas, truth);
    std::size_t best = 0;
    for (std::size_t i = 1; i < rows.size(); ++i)
        if (rows[i].psnr_db > rows[best].psnr_db)
            best = i;
    // rises to the best value then falls, allowing 0.05 dB of solver jitter
    for (std::size_t i = 1; i <= best; ++i)
        EXPECT_GE(rows[i].psnr_db, rows[i - 1].psnr_db - 0.05) << i;
    for (std::size_t i = best + 1; i < rows.size(); ++i)
        EXPECT_LE(rows[i].psnr_db, rows[i - 1].psnr_db + 0.05) << i;
    EXPECT_LT(rows.back().psnr_db, rows[best].psnr_db - 1.0);
}
