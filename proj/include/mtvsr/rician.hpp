#pragma once

// Rician mixture fitting on intensity histograms, used to estimate the
// observation-noise precision (from the air class) and the mean tissue
// intensity of a scan.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "errors.hpp"
#include "volume.hpp"

namespace mtvsr {

// log I0(z) for z >= 0: power series below 20, asymptotic expansion above.
inline double log_bessel_i0(double z)
{
    z = std::abs(z);
    if (z < 20.0) {
        const double q = 0.25 * z * z;
        double term = 1.0, sum = 1.0;
        for (int k = 1; k < 200; ++k) {
            term *= q / (double(k) * double(k));
            sum += term;
            if (term < 1e-17 * sum)
                break;
        }
        return std::log(sum);
    }
    // I0(z) ~ e^z / sqrt(2 pi z) * sum_k ((2k-1)!!)^2 / (k! (8z)^k)
    const double inv8z = 1.0 / (8.0 * z);
    double term = 1.0, sum = 1.0;
    for (int k = 1; k < 30; ++k) {
        const double odd = 2.0 * k - 1.0;
        term *= odd * odd * inv8z / k;
        sum += term;
        if (term < 1e-17 * sum)
            break;
    }
    return z - 0.5 * std::log(2.0 * std::numbers::pi * z) + std::log(sum);
}

inline double rician_log_pdf(double x, double nu, double sigma)
{
    if (x <= 0.0)
        return -std::numeric_limits<double>::infinity();
    const double s2 = sigma * sigma;
    return std::log(x) - std::log(s2) - (x * x + nu * nu) / (2.0 * s2) + log_bessel_i0(x * nu / s2);
}

inline double rician_pdf(double x, double nu, double sigma)
{
    if (!std::isfinite(x) || !std::isfinite(nu) || !std::isfinite(sigma))
        throw std::invalid_argument("rician_pdf: non-finite input");
    if (!(sigma > 0.0) || x < 0.0 || nu < 0.0)
        throw std::invalid_argument("rician_pdf: requires sigma > 0, x >= 0, nu >= 0");
    if (x == 0.0)
        return 0.0;
    return std::exp(rician_log_pdf(x, nu, sigma));
}

struct RicianClass {
    double nu = 0.0;
    double sigma = 1.0;
    double weight = 1.0;
};

struct RicianMixtureFit {
    std::vector<RicianClass> classes; // ascending nu: classes.front() is air
    double log_likelihood = -std::numeric_limits<double>::infinity();
    int iterations = 0;
    bool converged = false;
    std::vector<double> log_likelihood_trace;

    const RicianClass& air() const { return classes.front(); }
};

struct Histogram {
    std::vector<double> centers;
    std::vector<double> counts;
    double bin_width = 1.0;
};

// Histogram of non-negative intensities on [0, max]; negatives are clamped to 0.
inline Histogram make_histogram(std::span<const double> values, std::size_t bins,
                                std::size_t* negatives_clamped = nullptr)
{
    if (bins < 2)
        throw std::invalid_argument("histogram needs at least 2 bins");
    double hi = 0.0;
    std::size_t negatives = 0;
    for (double v : values) {
        if (v < 0.0)
            ++negatives;
        else
            hi = std::max(hi, v);
    }
    if (negatives_clamped)
        *negatives_clamped = negatives;
    if (!(hi > 0.0))
        throw EstimationError("intensity histogram has no spread");
    Histogram h;
    h.bin_width = hi / static_cast<double>(bins);
    h.centers.resize(bins);
    h.counts.assign(bins, 0.0);
    for (std::size_t b = 0; b < bins; ++b)
        h.centers[b] = (static_cast<double>(b) + 0.5) * h.bin_width;
    for (double v : values) {
        const double x = std::max(v, 0.0);
        const auto b = std::min(static_cast<std::size_t>(x / h.bin_width), bins - 1);
        h.counts[b] += 1.0;
    }
    return h;
}

struct MixtureSettings {
    int classes = 2;
    int max_iter = 500;
    double tol = 1e-8;
    // Non-air classes are kept at nu >= min_tissue_snr * sigma. Without it a
    // broad multi-tissue histogram is matched by a near-Rayleigh class.
    double min_tissue_snr = 1.0;
};

namespace detail {

inline double hist_quantile(const Histogram& h, double q)
{
    const double total = std::accumulate(h.counts.begin(), h.counts.end(), 0.0);
    double acc = 0.0;
    for (std::size_t b = 0; b < h.counts.size(); ++b) {
        acc += h.counts[b];
        if (acc >= q * total)
            return h.centers[b];
    }
    return h.centers.back();
}

// Golden-section maximisation of f on [lo, hi], preceded by a coarse scan so a
// secondary local mode does not capture the search.
template <typename F>
double bounded_maximize(F&& f, double lo, double hi, int scan = 12, int iters = 40)
{
    double best_x = lo, best_f = f(lo);
    const double step = (hi - lo) / scan;
    for (int s = 1; s <= scan; ++s) {
        const double x = lo + s * step;
        const double fx = f(x);
        if (fx > best_f) {
            best_f = fx;
            best_x = x;
        }
    }
    double a = std::max(lo, best_x - step), b = std::min(hi, best_x + step);
    const double g = 0.5 * (std::sqrt(5.0) - 1.0);
    double c = b - g * (b - a), d = a + g * (b - a);
    double fc = f(c), fd = f(d);
    for (int it = 0; it < iters; ++it) {
        if (fc > fd) {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    const double xm = fc > fd ? c : d;
    const double fm = std::max(fc, fd);
    return fm > best_f ? xm : best_x;
}

} // namespace detail

namespace detail {

// EM on binned data. The E-step uses the Rician density at bin centres; the
// M-step sets weights in closed form and maximises each class's weighted
// log-likelihood over (nu, sigma) by bounded coordinate searches, accepting
// only improvements so the likelihood never decreases.
inline RicianMixtureFit fit_fixed_classes(const Histogram& hist, const MixtureSettings& settings)
{
    const int K = settings.classes;
    if (K < 1)
        throw std::invalid_argument("mixture needs at least one class");
    const std::size_t B = hist.centers.size();
    if (hist.counts.size() != B)
        throw std::invalid_argument("histogram centers/counts length mismatch");
    std::size_t nonempty = 0;
    double total = 0.0;
    for (double c : hist.counts) {
        if (c < 0.0 || !std::isfinite(c))
            throw std::invalid_argument("histogram counts must be non-negative");
        if (c > 0.0)
            ++nonempty;
        total += c;
    }
    if (total <= 0.0)
        throw EstimationError("histogram is empty");
    if (nonempty < 2)
        throw EstimationError("histogram needs at least two non-empty bins");

    const double x_max = *std::max_element(hist.centers.begin(), hist.centers.end());
    const double sigma_min = 0.5 * hist.bin_width;
    const double sigma_max = x_max;

    std::vector<RicianClass> cls(K);
    const double q10 = detail::hist_quantile(hist, 0.1);
    double median = detail::hist_quantile(hist, 0.5);
    if (K == 1) {
        double mean = 0.0, sq = 0.0;
        for (std::size_t b = 0; b < B; ++b) {
            mean += hist.counts[b] * hist.centers[b];
            sq += hist.counts[b] * hist.centers[b] * hist.centers[b];
        }
        mean /= total;
        cls[0] = {mean, std::max(std::sqrt(std::max(sq / total - mean * mean, 0.0)), sigma_min), 1.0};
    } else {
        if (median <= q10)
            median = detail::hist_quantile(hist, 0.75);
        if (median <= q10)
            median = 0.5 * x_max;
        cls[0] = {0.0, std::clamp(0.5 * q10, sigma_min, sigma_max), 0.5};
        for (int k = 1; k < K; ++k) {
            const double q = K == 2 ? 0.5 : 0.5 + 0.45 * (k - 1) / double(K - 2);
            double nu = k == 1 ? median : detail::hist_quantile(hist, q);
            nu = std::max(nu, median);
            cls[k] = {nu, std::clamp(0.2 * nu, sigma_min, sigma_max), 0.5 / (K - 1)};
        }
    }

    std::vector<double> logp(static_cast<std::size_t>(K) * B);
    std::vector<double> resp(static_cast<std::size_t>(K) * B);
    auto e_step = [&]() {
        double ll = 0.0;
        for (std::size_t b = 0; b < B; ++b) {
            if (hist.counts[b] <= 0.0)
                continue;
            double m = -std::numeric_limits<double>::infinity();
            for (int k = 0; k < K; ++k) {
                const double lp = std::log(cls[k].weight) + rician_log_pdf(hist.centers[b], cls[k].nu, cls[k].sigma);
                logp[k * B + b] = lp;
                m = std::max(m, lp);
            }
            double s = 0.0;
            for (int k = 0; k < K; ++k)
                s += std::exp(logp[k * B + b] - m);
            const double lse = m + std::log(s);
            for (int k = 0; k < K; ++k)
                resp[k * B + b] = std::exp(logp[k * B + b] - lse);
            ll += hist.counts[b] * lse;
        }
        return ll;
    };

    RicianMixtureFit fit;
    double ll = e_step();
    fit.log_likelihood_trace.push_back(ll);
    std::vector<double> xs, ws;
    for (int it = 1; it <= settings.max_iter; ++it) {
        for (int k = 0; k < K; ++k) {
            xs.clear();
            ws.clear();
            double wsum = 0.0;
            for (std::size_t b = 0; b < B; ++b) {
                const double w = hist.counts[b] * resp[k * B + b];
                wsum += w;
                if (w > 1e-12 * total) {
                    xs.push_back(hist.centers[b]);
                    ws.push_back(w);
                }
            }
            cls[k].weight = std::max(wsum / total, 1e-300);
            if (ws.empty())
                continue;
            auto q = [&](double nu, double sigma) {
                double acc = 0.0;
                for (std::size_t n = 0; n < xs.size(); ++n)
                    acc += ws[n] * rician_log_pdf(xs[n], nu, sigma);
                return acc;
            };
            double nu = cls[k].nu, sigma = cls[k].sigma;
            double best = q(nu, sigma);
            for (int sweep = 0; sweep < 2; ++sweep) {
                const double s_hi = k == 0 ? sigma_max
                                           : std::clamp(nu / settings.min_tissue_snr, sigma_min, sigma_max);
                const double log_sigma = detail::bounded_maximize(
                    [&](double ls) { return q(nu, std::exp(ls)); }, std::log(sigma_min), std::log(s_hi));
                const double s_new = std::exp(log_sigma);
                if (const double v = q(nu, s_new); v > best) {
                    best = v;
                    sigma = s_new;
                }
                const double nu_lo = k == 0 ? 0.0 : std::min(settings.min_tissue_snr * sigma, x_max);
                const double nu_new = detail::bounded_maximize([&](double n) { return q(n, sigma); }, nu_lo, x_max);
                if (const double v = q(nu_new, sigma); v > best) {
                    best = v;
                    nu = nu_new;
                }
            }
            cls[k].nu = nu;
            cls[k].sigma = sigma;
        }
        const double ll_new = e_step();
        fit.log_likelihood_trace.push_back(ll_new);
        fit.iterations = it;
        const double change = std::abs(ll_new - ll);
        ll = ll_new;
        if (change <= settings.tol * std::abs(ll)) {
            fit.converged = true;
            break;
        }
    }
    std::sort(cls.begin(), cls.end(), [](const RicianClass& a, const RicianClass& b) { return a.nu < b.nu; });
    fit.classes = std::move(cls);
    fit.log_likelihood = ll;
    return fit;
}

// A single class sits on a flat ridge of nearly equal likelihood when the
// data are close to Rayleigh. Prefer the closed-form Rayleigh fit (nu = 0)
// unless the free nu earns its BIC cost.
inline RicianMixtureFit prefer_rayleigh(const Histogram& hist, RicianMixtureFit fit)
{
    double n = 0.0, m2 = 0.0;
    for (std::size_t b = 0; b < hist.counts.size(); ++b) {
        n += hist.counts[b];
        m2 += hist.counts[b] * hist.centers[b] * hist.centers[b];
    }
    const double sigma = std::sqrt(m2 / (2.0 * n));
    double ll = 0.0;
    for (std::size_t b = 0; b < hist.counts.size(); ++b)
        if (hist.counts[b] > 0.0)
            ll += hist.counts[b] * rician_log_pdf(hist.centers[b], 0.0, sigma);
    if (ll < fit.log_likelihood - 0.5 * std::log(n))
        return fit;
    fit.classes = {{0.0, sigma, 1.0}};
    fit.log_likelihood = ll;
    return fit;
}

} // namespace detail

// Fits settings.classes classes, or a single class when the extra ones do not
// pay for their parameters under BIC (a histogram of pure noise, say).
inline RicianMixtureFit fit_rician_mixture(const Histogram& hist, const MixtureSettings& settings = {})
{
    RicianMixtureFit fit = detail::fit_fixed_classes(hist, settings);
    MixtureSettings one = settings;
    one.classes = 1;
    RicianMixtureFit single = detail::prefer_rayleigh(
        hist, settings.classes == 1 ? std::move(fit) : detail::fit_fixed_classes(hist, one));
    if (settings.classes == 1)
        return single;
    const double n = std::accumulate(hist.counts.begin(), hist.counts.end(), 0.0);
    const double penalty = 0.5 * 3.0 * (settings.classes - 1) * std::log(n);
    return single.log_likelihood >= fit.log_likelihood - penalty ? single : fit;
}

// Posterior probability that intensity x belongs to class `k` of the fit.
inline double class_responsibility(const RicianMixtureFit& fit, std::size_t k, double x)
{
    x = std::max(x, 1e-300);
    double m = -std::numeric_limits<double>::infinity();
    std::vector<double> lp(fit.classes.size());
    for (std::size_t c = 0; c < fit.classes.size(); ++c) {
        lp[c] = std::log(fit.classes[c].weight) + rician_log_pdf(x, fit.classes[c].nu, fit.classes[c].sigma);
        m = std::max(m, lp[c]);
    }
    double s = 0.0;
    for (double v : lp)
        s += std::exp(v - m);
    return std::exp(lp[k] - m) / s;
}

inline double mean_tissue_intensity(const RicianMixtureFit& fit)
{
    if (fit.classes.empty())
        throw EstimationError("mixture has not been fitted");
    return std::max_element(fit.classes.begin(), fit.classes.end(),
                            [](const RicianClass& a, const RicianClass& b) { return a.nu < b.nu; })
        ->nu;
}

struct NoiseEstimate {
    double sigma = 0.0;
    double tau = 0.0;
    double percent_of_max = 0.0;
    std::size_t negatives_clamped = 0;
    RicianMixtureFit fit;
};

inline NoiseEstimate estimate_tau(const Volume& v, std::size_t bins = 1024, const MixtureSettings& settings = {})
{
    NoiseEstimate est;
    const Histogram h = make_histogram(v.data(), bins, &est.negatives_clamped);
    est.fit = fit_rician_mixture(h, settings);
    est.sigma = est.fit.air().sigma;
    if (!(est.sigma > 0.0) || !std::isfinite(est.sigma))
        throw EstimationError("air-class noise scale is not positive");
    est.tau = 1.0 / (est.sigma * est.sigma);
    est.percent_of_max = 100.0 * est.sigma / v.max();
    return est;
}

} // namespace mtvsr
