#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "mtvsr/forward_model.hpp"
#include "mtvsr/phantom.hpp"
#include "mtvsr/rician.hpp"

using namespace mtvsr;

namespace {

// Magnitudes drawn from a two-class mixture.
std::vector<double> sample_mixture(const std::vector<RicianClass>& classes, std::size_t n, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd;
    std::uniform_real_distribution<double> u;
    std::vector<double> out(n);
    for (auto& x : out) {
        double r = u(rng);
        std::size_t k = 0;
        while (k + 1 < classes.size() && r > classes[k].weight) {
            r -= classes[k].weight;
            ++k;
        }
        x = std::hypot(classes[k].nu + classes[k].sigma * nd(rng), classes[k].sigma * nd(rng));
    }
    return out;
}

} // namespace

TEST(RicianPdf, RayleighAtSigma)
{
    const double s = 2.0;
    EXPECT_NEAR(rician_pdf(s, 0.0, s), std::exp(-0.5) / s, 1e-14);
    EXPECT_EQ(rician_pdf(0.0, 3.0, 1.0), 0.0);
}

TEST(RicianPdf, LogBesselMatchesStd)
{
    for (double z : {0.0, 0.1, 1.0, 5.0, 30.0, 200.0})
        EXPECT_NEAR(log_bessel_i0(z), std::log(std::cyl_bessel_i(0.0, z)), 1e-10 * (1.0 + z));
    EXPECT_TRUE(std::isfinite(log_bessel_i0(1e5)));
}

TEST(RicianPdf, IntegratesToOne)
{
    for (const auto& [nu, sigma] : std::vector<std::pair<double, double>>{{0.0, 1.0}, {3.0, 1.0}, {50.0, 4.0}}) {
        // Simpson's rule on [0, nu + 12 sigma]
        const int n = 20000;
        const double hi = nu + 12.0 * sigma, h = hi / n;
        double acc = rician_pdf(0.0, nu, sigma) + rician_pdf(hi, nu, sigma);
        for (int i = 1; i < n; ++i)
            acc += (i % 2 ? 4.0 : 2.0) * rician_pdf(i * h, nu, sigma);
        EXPECT_NEAR(acc * h / 3.0, 1.0, 1e-6) << nu << " " << sigma;
    }
}

TEST(Histogram, BinsAndClamping)
{
    const std::vector<double> v{-1.0, 0.0, 1.0, 2.0, 4.0};
    std::size_t neg = 0;
    const Histogram h = make_histogram(v, 4, &neg);
    EXPECT_EQ(neg, 1u);
    EXPECT_DOUBLE_EQ(h.bin_width, 1.0);
    EXPECT_DOUBLE_EQ(h.centers[0], 0.5);
    EXPECT_EQ(h.counts, (std::vector<double>{2.0, 1.0, 1.0, 1.0}));
    EXPECT_THROW(make_histogram(std::vector<double>{0.0, 0.0}, 4), EstimationError);
    EXPECT_THROW(make_histogram(v, 1), std::invalid_argument);
}

TEST(Mixture, RecoversKnownTwoClassParameters)
{
    const std::vector<RicianClass> truth{{0.0, 20.0, 0.3}, {500.0, 40.0, 0.7}};
    const auto x = sample_mixture(truth, 1000000, 5);
    const RicianMixtureFit fit = fit_rician_mixture(make_histogram(x, 1024));
    ASSERT_EQ(fit.classes.size(), 2u);
    EXPECT_NEAR(fit.air().sigma, 20.0, 1.0);
    EXPECT_NEAR(fit.air().weight, 0.3, 0.015);
    EXPECT_NEAR(fit.classes[1].nu, 500.0, 5.0);
    EXPECT_NEAR(fit.classes[1].sigma, 40.0, 2.0);
    EXPECT_NEAR(fit.classes[1].weight, 0.7, 0.015);
}

TEST(Mixture, PureRayleighCollapsesToOneClass)
{
    const auto x = sample_mixture({{0.0, 10.0, 1.0}}, 200000, 8);
    const RicianMixtureFit fit = fit_rician_mixture(make_histogram(x, 1024));
    double wmax = 0.0;
    for (const auto& c : fit.classes)
        wmax = std::max(wmax, c.weight);
    EXPECT_GE(wmax, 0.95);
    EXPECT_NEAR(fit.air().sigma, 10.0, 0.5);
}

TEST(Mixture, LogLikelihoodNeverDecreases)
{
    const auto x = sample_mixture({{0.0, 5.0, 0.5}, {60.0, 6.0, 0.5}}, 50000, 3);
    const RicianMixtureFit fit = fit_rician_mixture(make_histogram(x, 512));
    ASSERT_GE(fit.log_likelihood_trace.size(), 2u);
    for (std::size_t i = 1; i < fit.log_likelihood_trace.size(); ++i)
        EXPECT_GE(fit.log_likelihood_trace[i], fit.log_likelihood_trace[i - 1] - 1e-9 * std::abs(fit.log_likelihood_trace[i - 1]));
}

TEST(Mixture, ClassesSortedByNu)
{
    const auto x = sample_mixture({{0.0, 5.0, 0.4}, {60.0, 6.0, 0.3}, {150.0, 6.0, 0.3}}, 100000, 4);
    MixtureSettings s;
    s.classes = 3;
    const RicianMixtureFit fit = fit_rician_mixture(make_histogram(x, 1024), s);
    ASSERT_EQ(fit.classes.size(), 3u);
    for (std::size_t k = 1; k < 3; ++k)
        EXPECT_LE(fit.classes[k - 1].nu, fit.classes[k].nu);
    EXPECT_DOUBLE_EQ(mean_tissue_intensity(fit), fit.classes[2].nu);
    EXPECT_NEAR(fit.classes[2].nu, 150.0, 3.0);
}

TEST(Mixture, ResponsibilitiesSumToOne)
{
    const auto x = sample_mixture({{0.0, 5.0, 0.5}, {60.0, 6.0, 0.5}}, 20000, 6);
    const RicianMixtureFit fit = fit_rician_mixture(make_histogram(x, 256));
    for (double v : {0.5, 10.0, 30.0, 60.0, 100.0})
        EXPECT_NEAR(class_responsibility(fit, 0, v) + class_responsibility(fit, 1, v), 1.0, 1e-12);
    EXPECT_GT(class_responsibility(fit, 0, 2.0), 0.99);
    EXPECT_GT(class_responsibility(fit, 1, 60.0), 0.99);
}

TEST(EstimateTau, PhantomAtKnownNoise)
{
    Volume v = make_phantom(31, Contrast::T1, {.size = 48});
    const double sigma = 0.125 * v.max();
    add_rician_noise(v, sigma, 7);
    const NoiseEstimate est = estimate_tau(v);
    EXPECT_NEAR(est.tau, 1.0 / (sigma * sigma), 0.2 / (sigma * sigma));
    EXPECT_DOUBLE_EQ(est.tau, 1.0 / (est.sigma * est.sigma));
}

TEST(EstimateTau, StableAcrossBinCounts)
{
    Volume v = make_phantom(32, Contrast::T2, {.size = 48});
    const double sigma = 0.05 * v.max();
    add_rician_noise(v, sigma, 9);
    for (std::size_t bins : {512u, 1024u, 2048u, 4096u})
        EXPECT_NEAR(estimate_tau(v, bins).sigma, sigma, 0.15 * sigma) << bins;
}

TEST(EstimateTau, ScalesWithIntensity)
{
    Volume v = make_phantom(33, Contrast::PD, {.size = 40});
    add_rician_noise(v, 0.04 * v.max(), 10);
    Volume w = v;
    for (auto& x : w.values())
        x *= 37.0;
    const double a = estimate_tau(v).sigma, b = estimate_tau(w).sigma;
    EXPECT_NEAR(b / a, 37.0, 0.05 * 37.0);
    EXPECT_NEAR(estimate_tau(v).percent_of_max, estimate_tau(w).percent_of_max, 0.05 * estimate_tau(v).percent_of_max);
}

TEST(EstimateTau, ConstantImageFails)
{
    EXPECT_THROW(estimate_tau(Volume(make_grid({4, 4, 4}), 0.0)), EstimationError);
    EXPECT_THROW(mean_tissue_intensity(RicianMixtureFit{}), EstimationError);
}
