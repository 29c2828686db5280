#pragma once

// Regularisation weights from image statistics. A TV prior is a Laplace
// distribution on gradient magnitudes with rate 1/b, b = sqrt(sigma^2 / 2),
// where sigma is the standard deviation of the HR gradient magnitude. That
// sigma is predicted from the mean tissue intensity of an LR scan through a
// proportional fit learnt on HR volumes. The weight lambda sits inside the
// squared norm of the prior, so lambda = (1/b)^2 = 2 / sigma^2.

#include <cmath>
#include <stdexcept>
#include <utility>
#include <vector>

#include "errors.hpp"
#include "metrics.hpp"
#include "rician.hpp"
#include "solver.hpp"
#include "volume.hpp"

namespace mtvsr {

struct ScalingFit {
    double slope = 0.0; // gradient-magnitude SD per intensity unit
    std::size_t n_samples = 0;
    double residual_rms = 0.0;
};

// Slope of the phantom calibration corpus shipped with the tools: 24 seeded
// 64^3 head phantoms (t1, t2, pd; seeds 1000-1007) at peak intensity 100,
// as produced by `mtvsr fit-scaling --phantoms 1000-1007`.
inline constexpr double kDefaultScalingSlope = 0.5798;

struct IntensityGradientSample {
    double mean_intensity = 0.0; // mean tissue intensity (mu)
    double gradient_sd = 0.0;    // SD of ||D y|| over foreground voxels (s)
};

// Least-squares line through the origin: slope = sum(mu s) / sum(mu^2).
inline ScalingFit fit_scaling(const std::vector<IntensityGradientSample>& samples)
{
    if (samples.empty())
        throw std::invalid_argument("scaling fit needs at least one sample");
    double smu = 0.0, smm = 0.0;
    for (const auto& s : samples) {
        smu += s.mean_intensity * s.gradient_sd;
        smm += s.mean_intensity * s.mean_intensity;
    }
    if (!(smm > 0.0))
        throw EstimationError("scaling fit: all mean intensities are zero");
    ScalingFit fit;
    fit.slope = smu / smm;
    fit.n_samples = samples.size();
    double r2 = 0.0;
    for (const auto& s : samples) {
        const double r = s.gradient_sd - fit.slope * s.mean_intensity;
        r2 += r * r;
    }
    fit.residual_rms = std::sqrt(r2 / static_cast<double>(samples.size()));
    if (!(fit.slope > 0.0))
        throw EstimationError("scaling fit: slope is not positive");
    return fit;
}

// (mu, s) for one HR volume: mu from the Rician mixture, s over voxels whose
// tissue-class responsibility exceeds one half.
inline IntensityGradientSample intensity_gradient_sample(const Volume& hr, std::size_t bins = 1024)
{
    const NoiseEstimate est = estimate_tau(hr, bins);
    const RicianMixtureFit& fit = est.fit;
    const double mu = mean_tissue_intensity(fit);
    const std::size_t tissue = fit.classes.size() - 1;

    const GradientField g = gradient(hr);
    double sum = 0.0, sum2 = 0.0, count = 0.0;
    for (std::size_t n = 0; n < hr.size(); ++n) {
        if (class_responsibility(fit, tissue, hr[n]) <= 0.5)
            continue;
        const double m = g.norm_at(n);
        sum += m;
        sum2 += m * m;
        count += 1.0;
    }
    if (count < 2.0)
        throw EstimationError("no foreground voxels for gradient statistics");
    const double mean = sum / count;
    IntensityGradientSample s;
    s.mean_intensity = mu;
    s.gradient_sd = std::sqrt(std::max(sum2 / count - mean * mean, 0.0));
    return s;
}

inline ScalingFit fit_scaling(const std::vector<Volume>& corpus, std::size_t bins = 1024)
{
    if (corpus.empty())
        throw std::invalid_argument("scaling fit needs a non-empty corpus");
    std::vector<IntensityGradientSample> samples;
    samples.reserve(corpus.size());
    for (const auto& v : corpus)
        samples.push_back(intensity_gradient_sample(v, bins));
    return fit_scaling(samples);
}

inline double lambda_from_gradient_sd(double sigma_grad)
{
    if (!(sigma_grad > 0.0) || !std::isfinite(sigma_grad))
        throw EstimationError("predicted gradient SD must be positive");
    const double b = std::sqrt(sigma_grad * sigma_grad / 2.0);
    const double rate = 1.0 / b;
    return rate * rate;
}

inline double estimate_lambda(double mean_tissue, const ScalingFit& fit)
{
    if (!(fit.slope > 0.0))
        throw std::invalid_argument("scaling slope must be positive");
    return lambda_from_gradient_sd(fit.slope * mean_tissue);
}

inline double estimate_lambda(const Volume& lr, const ScalingFit& fit, std::size_t bins = 1024)
{
    if (lr.size() == 0)
        throw std::invalid_argument("empty volume");
    const NoiseEstimate est = estimate_tau(lr, bins);
    return estimate_lambda(mean_tissue_intensity(est.fit), fit);
}

// 10^e for e = -4, -3.8, ..., 1.
inline std::vector<double> default_lambda_grid()
{
    std::vector<double> g;
    for (int i = 0; i <= 25; ++i)
        g.push_back(std::pow(10.0, -4.0 + 0.2 * i));
    return g;
}

struct LambdaScore {
    double lambda = 0.0;
    double psnr_db = 0.0;
    bool converged = false;
};

// Single-contrast TV reconstructions of `problem` at every lambda, scored
// against `reference`. The problem's own lambda and prior are ignored.
inline std::vector<LambdaScore> grid_search_lambda(const ReconProblem& problem, const std::vector<double>& lambdas,
                                                   const Volume& reference)
{
    if (lambdas.empty())
        throw std::invalid_argument("lambda grid is empty");
    if (problem.groups.size() != 1)
        throw std::invalid_argument("grid search takes a single-contrast problem");
    if (!reference.grid().same_geometry(problem.hr_grid))
        throw std::invalid_argument("reference is not on the reconstruction grid");
    std::vector<LambdaScore> table;
    table.reserve(lambdas.size());
    ReconProblem p = problem;
    p.prior = Prior::TV;
    for (double lambda : lambdas) {
        if (!(lambda > 0.0))
            throw std::invalid_argument("lambda values must be positive");
        p.groups[0].lambda = lambda;
        const ReconResult r = admm_reconstruct(p);
        table.push_back({lambda, psnr(reference, r.images[0]), r.diagnostics.converged});
    }
    return table;
}

} // namespace mtvsr
