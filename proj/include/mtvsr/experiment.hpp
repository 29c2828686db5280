#pragma once

// Desk-scale experiment harness: degrade ground-truth volumes, estimate the
// hyper-parameters, reconstruct with each method and score against the truth.
// Every random draw is seeded from the row's seed, so reports are repeatable.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <istream>
#include <limits>
#include <map>
#include <memory>
#include <ostream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "forward_model.hpp"
#include "metrics.hpp"
#include "nifti.hpp"
#include "phantom.hpp"
#include "regularization.hpp"
#include "rician.hpp"
#include "solver.hpp"

namespace mtvsr {

enum class ExperimentKind { Noise, LambdaGrid, LrCount, Multimodal };

inline ExperimentKind parse_experiment_kind(const std::string& s)
{
    if (s == "noise")
        return ExperimentKind::Noise;
    if (s == "lambda-grid")
        return ExperimentKind::LambdaGrid;
    if (s == "lr-count")
        return ExperimentKind::LrCount;
    if (s == "multimodal")
        return ExperimentKind::Multimodal;
    throw std::invalid_argument("unknown experiment '" + s + "'");
}

inline std::string to_string(ExperimentKind k)
{
    switch (k) {
    case ExperimentKind::Noise: return "noise";
    case ExperimentKind::LambdaGrid: return "lambda-grid";
    case ExperimentKind::LrCount: return "lr-count";
    case ExperimentKind::Multimodal: return "multimodal";
    }
    return "?";
}

enum class Method { BS, FOT, TV, MTV };

inline Method parse_method(const std::string& s)
{
    if (s == "bs")
        return Method::BS;
    if (s == "fot")
        return Method::FOT;
    if (s == "tv")
        return Method::TV;
    if (s == "mtv")
        return Method::MTV;
    throw std::invalid_argument("unknown method '" + s + "'");
}

inline std::string to_string(Method m)
{
    switch (m) {
    case Method::BS: return "bs";
    case Method::FOT: return "fot";
    case Method::TV: return "tv";
    case Method::MTV: return "mtv";
    }
    return "?";
}

struct ExperimentSpec {
    ExperimentKind kind = ExperimentKind::Noise;
    std::vector<std::uint64_t> seeds;
    std::vector<Method> methods;                  // empty: the experiment's default set
    std::vector<Contrast> contrasts{Contrast::T1};
    std::vector<std::string> references;          // HR NIfTI ground truths, one per contrast
    std::size_t phantom_size = 64;
    std::vector<double> noise_levels{1.0, 2.5, 5.0, 10.0};
    double noise_percent = 2.5;
    int factor = 7;
    std::vector<int> lr_counts{1, 2, 3, 4};
    std::vector<int> factors;                     // multimodal; 0 draws a factor from {2..8}
    std::vector<double> lambdas;                  // empty: default 26-point grid
    SliceProfileKind profile = SliceProfileKind::Gaussian;
    double scaling_slope = kDefaultScalingSlope;
    SolverSettings solver = [] {
        SolverSettings s;
        s.max_admm_iter = 60;
        s.record_timing = false;
        return s;
    }();
    std::string save_dir;                         // per-cell reconstructions when non-empty

    void validate() const;
    std::vector<Method> effective_methods() const;
};

namespace detail {

inline std::string trim(const std::string& s)
{
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos)
        return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s)
{
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ','))
        if (auto t = trim(item); !t.empty())
            out.push_back(t);
    return out;
}

inline double parse_double(const std::string& key, const std::string& v)
{
    std::size_t used = 0;
    double d = 0.0;
    try {
        d = std::stod(v, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used != v.size())
        throw std::invalid_argument("experiment config: '" + key + "' expects a number, got '" + v + "'");
    return d;
}

inline long long parse_int(const std::string& key, const std::string& v)
{
    std::size_t used = 0;
    long long n = 0;
    try {
        n = std::stoll(v, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used != v.size())
        throw std::invalid_argument("experiment config: '" + key + "' expects an integer, got '" + v + "'");
    return n;
}

// "1,2,5" or "1000-1009" or a mix of both.
inline std::vector<std::uint64_t> parse_seeds(const std::string& v)
{
    std::vector<std::uint64_t> out;
    for (const auto& item : split_list(v)) {
        const auto dash = item.find('-', 1);
        if (dash == std::string::npos) {
            out.push_back(static_cast<std::uint64_t>(parse_int("seeds", item)));
            continue;
        }
        const long long a = parse_int("seeds", trim(item.substr(0, dash)));
        const long long b = parse_int("seeds", trim(item.substr(dash + 1)));
        if (a < 0 || b < a)
            throw std::invalid_argument("experiment config: bad seed range '" + item + "'");
        for (long long s = a; s <= b; ++s)
            out.push_back(static_cast<std::uint64_t>(s));
    }
    return out;
}

inline std::uint64_t splitmix64(std::uint64_t x)
{
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0)
{
    return splitmix64(splitmix64(splitmix64(seed) ^ a) ^ b);
}

inline std::string fmt(double v)
{
    if (std::isnan(v))
        return {};
    if (std::isinf(v))
        return v > 0 ? "inf" : "-inf";
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

template <typename T, typename F>
std::string join(const std::vector<T>& xs, F&& f)
{
    std::string s;
    for (std::size_t i = 0; i < xs.size(); ++i)
        s += (i ? "," : "") + f(xs[i]);
    return s;
}

} // namespace detail

inline ExperimentSpec parse_experiment_spec(std::istream& in)
{
    ExperimentSpec spec;
    bool have_kind = false;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos)
            line.erase(hash);
        line = detail::trim(line);
        if (line.empty())
            continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("experiment config line " + std::to_string(lineno) + ": expected key = value");
        const std::string key = detail::trim(line.substr(0, eq));
        const std::string val = detail::trim(line.substr(eq + 1));
        auto& s = spec.solver;
        if (key == "experiment") {
            spec.kind = parse_experiment_kind(val);
            have_kind = true;
        } else if (key == "seeds") {
            spec.seeds = detail::parse_seeds(val);
        } else if (key == "methods") {
            spec.methods.clear();
            for (const auto& m : detail::split_list(val))
                spec.methods.push_back(parse_method(m));
        } else if (key == "contrasts") {
            spec.contrasts.clear();
            for (const auto& c : detail::split_list(val))
                spec.contrasts.push_back(parse_contrast(c));
        } else if (key == "references") {
            spec.references = detail::split_list(val);
        } else if (key == "phantom_size") {
            spec.phantom_size = static_cast<std::size_t>(detail::parse_int(key, val));
        } else if (key == "noise_levels") {
            spec.noise_levels.clear();
            for (const auto& v : detail::split_list(val))
                spec.noise_levels.push_back(detail::parse_double(key, v));
        } else if (key == "noise") {
            spec.noise_percent = detail::parse_double(key, val);
        } else if (key == "factor") {
            spec.factor = static_cast<int>(detail::parse_int(key, val));
        } else if (key == "lr_counts") {
            spec.lr_counts.clear();
            for (const auto& v : detail::split_list(val))
                spec.lr_counts.push_back(static_cast<int>(detail::parse_int(key, v)));
        } else if (key == "factors") {
            spec.factors.clear();
            for (const auto& v : detail::split_list(val))
                spec.factors.push_back(v == "random" ? 0 : static_cast<int>(detail::parse_int(key, v)));
        } else if (key == "lambdas") {
            spec.lambdas.clear();
            if (val != "default")
                for (const auto& v : detail::split_list(val))
                    spec.lambdas.push_back(detail::parse_double(key, v));
        } else if (key == "profile") {
            spec.profile = parse_profile_kind(val);
        } else if (key == "scaling_slope") {
            spec.scaling_slope = detail::parse_double(key, val);
        } else if (key == "rho") {
            s.rho = detail::parse_double(key, val);
        } else if (key == "max_admm_iter") {
            s.max_admm_iter = static_cast<int>(detail::parse_int(key, val));
        } else if (key == "cg_tol") {
            s.cg_tol = detail::parse_double(key, val);
        } else if (key == "cg_max_iter") {
            s.cg_max_iter = static_cast<int>(detail::parse_int(key, val));
        } else if (key == "eps_rel") {
            s.eps_rel = detail::parse_double(key, val);
        } else if (key == "threads") {
            s.threads = static_cast<int>(detail::parse_int(key, val));
        } else if (key == "save_dir") {
            spec.save_dir = val;
        } else {
            throw std::invalid_argument("experiment config: unknown key '" + key + "'");
        }
    }
    if (!have_kind)
        throw std::invalid_argument("experiment config: missing 'experiment'");
    spec.validate();
    return spec;
}

inline ExperimentSpec parse_experiment_spec(const std::string& text)
{
    std::istringstream in(text);
    return parse_experiment_spec(in);
}

// Canonical key = value form; parsing it gives back the same spec.
inline std::string to_config(const ExperimentSpec& spec)
{
    std::ostringstream os;
    const auto& s = spec.solver;
    os << "experiment = " << to_string(spec.kind) << "\n";
    os << "seeds = " << detail::join(spec.seeds, [](std::uint64_t v) { return std::to_string(v); }) << "\n";
    os << "methods = " << detail::join(spec.effective_methods(), [](Method m) { return to_string(m); }) << "\n";
    os << "contrasts = " << detail::join(spec.contrasts, [](Contrast c) { return to_string(c); }) << "\n";
    if (!spec.references.empty())
        os << "references = " << detail::join(spec.references, [](const std::string& p) { return p; }) << "\n";
    os << "phantom_size = " << spec.phantom_size << "\n";
    os << "noise_levels = " << detail::join(spec.noise_levels, detail::fmt) << "\n";
    os << "noise = " << detail::fmt(spec.noise_percent) << "\n";
    os << "factor = " << spec.factor << "\n";
    os << "lr_counts = " << detail::join(spec.lr_counts, [](int v) { return std::to_string(v); }) << "\n";
    if (!spec.factors.empty())
        os << "factors = "
           << detail::join(spec.factors, [](int v) { return v == 0 ? std::string("random") : std::to_string(v); })
           << "\n";
    os << "lambdas = " << (spec.lambdas.empty() ? std::string("default") : detail::join(spec.lambdas, detail::fmt))
       << "\n";
    os << "profile = " << to_string(spec.profile) << "\n";
    os << "scaling_slope = " << detail::fmt(spec.scaling_slope) << "\n";
    os << "rho = " << detail::fmt(s.rho) << "\n";
    os << "max_admm_iter = " << s.max_admm_iter << "\n";
    os << "cg_tol = " << detail::fmt(s.cg_tol) << "\n";
    os << "cg_max_iter = " << s.cg_max_iter << "\n";
    os << "eps_rel = " << detail::fmt(s.eps_rel) << "\n";
    os << "threads = " << s.threads << "\n";
    if (!spec.save_dir.empty())
        os << "save_dir = " << spec.save_dir << "\n";
    return os.str();
}

inline std::vector<Method> ExperimentSpec::effective_methods() const
{
    if (!methods.empty())
        return methods;
    switch (kind) {
    case ExperimentKind::Noise: return {};
    case ExperimentKind::LambdaGrid: return {Method::TV};
    case ExperimentKind::LrCount: return {Method::BS, Method::TV};
    case ExperimentKind::Multimodal: return {Method::BS, Method::FOT, Method::TV, Method::MTV};
    }
    return {};
}

inline void ExperimentSpec::validate() const
{
    if (seeds.empty())
        throw std::invalid_argument("experiment: seeds must be listed explicitly");
    if (contrasts.empty())
        throw std::invalid_argument("experiment: at least one contrast is required");
    if (!references.empty() && references.size() != contrasts.size())
        throw std::invalid_argument("experiment: need one reference volume per contrast");
    if (phantom_size < 8)
        throw std::invalid_argument("experiment: phantom_size must be >= 8");
    if (kind != ExperimentKind::Noise && effective_methods().empty())
        throw std::invalid_argument("experiment: at least one method is required");
    if (kind == ExperimentKind::Noise && noise_levels.empty())
        throw std::invalid_argument("experiment: noise_levels is empty");
    for (double p : noise_levels)
        if (!(p >= 0.0))
            throw std::invalid_argument("experiment: noise levels must be non-negative");
    if (!(noise_percent >= 0.0))
        throw std::invalid_argument("experiment: noise must be non-negative");
    if (factor < 1)
        throw std::invalid_argument("experiment: factor must be >= 1");
    for (int c : lr_counts)
        if (c < 1)
            throw std::invalid_argument("experiment: lr_counts must be >= 1");
    for (int f : factors)
        if (f < 0)
            throw std::invalid_argument("experiment: factors must be >= 1 (or 'random')");
    for (double l : lambdas)
        if (!(l > 0.0))
            throw std::invalid_argument("experiment: lambdas must be positive");
    if (!(scaling_slope > 0.0))
        throw std::invalid_argument("experiment: scaling_slope must be positive");
    const auto ms = effective_methods();
    if (kind == ExperimentKind::LambdaGrid && (ms.size() != 1 || ms[0] != Method::TV))
        throw std::invalid_argument("experiment: lambda-grid only supports the tv method");
    if (kind == ExperimentKind::LrCount && std::count(ms.begin(), ms.end(), Method::MTV))
        throw std::invalid_argument("experiment: lr-count is single-contrast; use tv instead of mtv");
}

struct ExperimentRow {
    std::string experiment;
    std::string condition;
    std::string method;
    std::uint64_t seed = 0;
    double psnr_db = std::numeric_limits<double>::quiet_NaN();
    double rmse = std::numeric_limits<double>::quiet_NaN();
    double estimate = std::numeric_limits<double>::quiet_NaN();
    std::string status = "ok";
};

inline constexpr const char* kReportHeader = "experiment,condition,method,seed,psnr_db,rmse,estimate,status";

inline void write_report_csv(std::ostream& os, const std::vector<ExperimentRow>& rows)
{
    os << kReportHeader << "\n";
    for (const auto& r : rows)
        os << r.experiment << ',' << r.condition << ',' << r.method << ',' << r.seed << ',' << detail::fmt(r.psnr_db)
           << ',' << detail::fmt(r.rmse) << ',' << detail::fmt(r.estimate) << ',' << r.status << "\n";
}

using ProgressLog = std::function<void(const std::string&)>;

namespace detail {

struct Stack {
    AcquisitionMeta meta;
    std::shared_ptr<const ProjectionOperator> op;
};

inline Stack make_stack(const GridSpec& hr, int axis, int factor, double shift_mm, SliceProfileKind profile)
{
    Stack s;
    s.meta = thick_slice_meta(hr, axis, factor, shift_mm);
    s.op = std::make_shared<const ProjectionOperator>(make_projection(hr, s.meta, profile));
    return s;
}

// Observation with estimated tau, plus the tissue mean used for lambda.
inline std::pair<Observation, double> observe(const Stack& st, const Volume& truth, double noise_percent,
                                              std::uint64_t seed)
{
    Observation o;
    o.x = simulate_lr(*st.op, truth, noise_percent, seed);
    o.op = st.op;
    const NoiseEstimate est = estimate_tau(o.x);
    o.tau = est.tau;
    return {std::move(o), mean_tissue_intensity(est.fit)};
}

inline std::string clean_status(std::string s)
{
    for (auto& c : s)
        if (c == ',' || c == '\n' || c == '\r')
            c = ';';
    return "error: " + s;
}

inline std::string safe_name(std::string s)
{
    for (auto& c : s)
        if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '-' || c == '_'))
            c = '_';
    return s;
}

class Harness {
public:
    Harness(const ExperimentSpec& spec, ProgressLog log) : spec_(spec), log_(std::move(log)) {}

    std::vector<ExperimentRow> run()
    {
        switch (spec_.kind) {
        case ExperimentKind::Noise: noise(); break;
        case ExperimentKind::LambdaGrid: lambda_grid(); break;
        case ExperimentKind::LrCount: lr_count(); break;
        case ExperimentKind::Multimodal: multimodal(); break;
        }
        return std::move(rows_);
    }

private:
    Volume truth(std::uint64_t seed, std::size_t c)
    {
        if (spec_.references.empty()) {
            PhantomSettings ps;
            ps.size = spec_.phantom_size;
            return make_phantom(seed, spec_.contrasts[c], ps);
        }
        if (refs_.empty())
            for (const auto& p : spec_.references)
                refs_.push_back(load_volume(p));
        return refs_[c];
    }

    std::string contrast_name(std::size_t c) const
    {
        return spec_.references.empty() ? to_string(spec_.contrasts[c]) : "ref" + std::to_string(c);
    }

    void note(const std::string& msg)
    {
        if (log_)
            log_(msg);
    }

    ExperimentRow row(const std::string& condition, const std::string& method, std::uint64_t seed) const
    {
        ExperimentRow r;
        r.experiment = to_string(spec_.kind);
        r.condition = condition;
        r.method = method;
        r.seed = seed;
        return r;
    }

    void score(ExperimentRow& r, const Volume& ref, const Volume& img)
    {
        const MetricReport m = evaluate(ref, img);
        r.psnr_db = m.psnr_db;
        r.rmse = m.rmse;
        if (!spec_.save_dir.empty())
            save_volume(img, spec_.save_dir + "/" +
                                 safe_name(r.experiment + "_" + r.condition + "_" + r.method + "_" +
                                           std::to_string(r.seed)) +
                                 ".nii.gz");
    }

    ReconProblem problem(std::vector<ContrastGroup> groups, const GridSpec& grid, Prior prior) const
    {
        ReconProblem p;
        p.groups = std::move(groups);
        p.hr_grid = grid;
        p.prior = prior;
        p.settings = spec_.solver;
        return p;
    }

    double lambda_for(const std::vector<double>& tissue_means) const
    {
        double mu = 0.0;
        for (double m : tissue_means)
            mu += m;
        mu /= static_cast<double>(tissue_means.size());
        ScalingFit fit;
        fit.slope = spec_.scaling_slope;
        return estimate_lambda(mu, fit);
    }

    // Runs `f` and fills a failure status on the row when it throws.
    template <typename F>
    void guarded(ExperimentRow r, F&& f)
    {
        try {
            f(r);
        } catch (const std::exception& e) {
            r.psnr_db = r.rmse = std::numeric_limits<double>::quiet_NaN();
            r.status = clean_status(e.what());
        }
        note(r.experiment + " " + r.condition + " " + r.method + " seed " + std::to_string(r.seed) + ": " +
             fmt(r.psnr_db) + " dB " + r.status);
        rows_.push_back(std::move(r));
    }

    void noise()
    {
        for (std::uint64_t seed : spec_.seeds)
            for (std::size_t c = 0; c < spec_.contrasts.size(); ++c) {
                const Volume y = truth(seed, c);
                const double peak = y.max();
                for (std::size_t l = 0; l < spec_.noise_levels.size(); ++l) {
                    const double p = spec_.noise_levels[l];
                    std::string cond = "noise=" + fmt(p);
                    if (spec_.contrasts.size() > 1)
                        cond = contrast_name(c) + ":" + cond;
                    guarded(row(cond, "em", seed), [&](ExperimentRow& r) {
                        Volume x = y;
                        add_rician_noise(x, p / 100.0 * peak, derive_seed(seed, 1, c * 1000 + l));
                        const NoiseEstimate est = estimate_tau(x);
                        r.estimate = 100.0 * est.sigma / peak;
                    });
                }
            }
    }

    void lambda_grid()
    {
        const std::vector<double> grid = spec_.lambdas.empty() ? default_lambda_grid() : spec_.lambdas;
        for (std::uint64_t seed : spec_.seeds)
            for (std::size_t c = 0; c < spec_.contrasts.size(); ++c) {
                const Volume y = truth(seed, c);
                const Stack st = make_stack(y.grid(), 2, spec_.factor, 0.0, spec_.profile);
                auto [obs, mu] = observe(st, y, spec_.noise_percent, derive_seed(seed, 2, c));
                ContrastGroup g;
                g.id = contrast_name(c);
                g.observations.push_back(obs);
                ReconProblem p = problem({g}, y.grid(), Prior::TV);
                const std::string name = contrast_name(c);
                guarded(row(name + ":estimated", "tv", seed), [&](ExperimentRow& r) {
                    p.groups[0].lambda = lambda_for({mu});
                    r.estimate = p.groups[0].lambda;
                    const ReconResult res = admm_reconstruct(p);
                    score(r, y, res.images[0]);
                    if (!res.diagnostics.converged)
                        r.status = "max-iter";
                });
                for (double lambda : grid)
                    guarded(row(name + ":lambda=" + fmt(lambda), "tv", seed), [&](ExperimentRow& r) {
                        p.groups[0].lambda = lambda;
                        r.estimate = lambda;
                        const ReconResult res = admm_reconstruct(p);
                        score(r, y, res.images[0]);
                        if (!res.diagnostics.converged)
                            r.status = "max-iter";
                    });
            }
    }

    // Stacks 1-3 take orthogonal slice axes (z, y, x); later ones repeat the
    // cycle with a 1 mm shift per pass.
    void lr_count()
    {
        const int max_count = *std::max_element(spec_.lr_counts.begin(), spec_.lr_counts.end());
        for (std::uint64_t seed : spec_.seeds)
            for (std::size_t c = 0; c < spec_.contrasts.size(); ++c) {
                const Volume y = truth(seed, c);
                std::vector<Observation> obs;
                std::vector<double> mus;
                for (int s = 0; s < max_count; ++s) {
                    const int axis = 2 - s % 3;
                    const Stack st = make_stack(y.grid(), axis, spec_.factor, static_cast<double>(s / 3), spec_.profile);
                    auto [o, mu] = observe(st, y, spec_.noise_percent, derive_seed(seed, 3, c * 1000 + s));
                    obs.push_back(std::move(o));
                    mus.push_back(mu);
                }
                for (int count : spec_.lr_counts) {
                    std::string cond = "stacks=" + std::to_string(count);
                    if (spec_.contrasts.size() > 1)
                        cond = contrast_name(c) + ":" + cond;
                    ContrastGroup g;
                    g.id = contrast_name(c);
                    g.observations.assign(obs.begin(), obs.begin() + count);
                    g.lambda = lambda_for(std::vector<double>(mus.begin(), mus.begin() + count));
                    for (Method m : spec_.effective_methods())
                        guarded(row(cond, to_string(m), seed), [&](ExperimentRow& r) {
                            if (m == Method::BS) {
                                score(r, y, bs_average_reconstruct(g, y.grid()));
                                return;
                            }
                            r.estimate = g.lambda;
                            const ReconResult res =
                                admm_reconstruct(problem({g}, y.grid(), m == Method::FOT ? Prior::FOT : Prior::TV));
                            score(r, y, res.images[0]);
                            if (!res.diagnostics.converged)
                                r.status = "max-iter";
                        });
                }
            }
    }

    // One thick-slice stack per contrast; contrast m is sliced along axis
    // z, y, x (cycling), so the contrasts miss detail in different directions.
    void multimodal()
    {
        const std::size_t M = spec_.contrasts.size();
        const std::vector<int> factors = spec_.factors.empty() ? std::vector<int>{spec_.factor} : spec_.factors;
        for (std::uint64_t seed : spec_.seeds)
            for (std::size_t fi = 0; fi < factors.size(); ++fi) {
                std::vector<int> f(M, factors[fi]);
                if (factors[fi] == 0) {
                    std::mt19937_64 rng(derive_seed(seed, 4, fi));
                    std::uniform_int_distribution<int> pick(2, 8);
                    for (auto& v : f)
                        v = pick(rng);
                }
                std::string cond = "factor=" + std::to_string(f[0]);
                for (std::size_t m = 1; m < M; ++m)
                    cond += "/" + std::to_string(f[m]);

                std::vector<Volume> ys;
                std::vector<ContrastGroup> groups;
                bool ok = true;
                std::string failure;
                try {
                    for (std::size_t m = 0; m < M; ++m) {
                        ys.push_back(truth(seed, m));
                        const Stack st =
                            make_stack(ys[m].grid(), 2 - static_cast<int>(m % 3), f[m], 0.0, spec_.profile);
                        auto [o, mu] = observe(st, ys[m], spec_.noise_percent, derive_seed(seed, 5, fi * 1000 + m));
                        ContrastGroup g;
                        g.id = contrast_name(m);
                        g.observations.push_back(std::move(o));
                        g.lambda = lambda_for({mu});
                        groups.push_back(std::move(g));
                    }
                } catch (const std::exception& e) {
                    ok = false;
                    failure = clean_status(e.what());
                }
                for (Method method : spec_.effective_methods()) {
                    if (!ok) {
                        for (std::size_t m = 0; m < M; ++m) {
                            auto r = row(cond + ":" + contrast_name(m), to_string(method), seed);
                            r.status = failure;
                            rows_.push_back(r);
                        }
                        continue;
                    }
                    run_multimodal_method(method, cond, seed, ys, groups);
                }
            }
    }

    void run_multimodal_method(Method method, const std::string& cond, std::uint64_t seed, const std::vector<Volume>& ys,
                               const std::vector<ContrastGroup>& groups)
    {
        const std::size_t M = groups.size();
        std::vector<Volume> images;
        std::string status = "ok";
        try {
            if (method == Method::BS) {
                for (std::size_t m = 0; m < M; ++m)
                    images.push_back(bs_average_reconstruct(groups[m], ys[m].grid()));
            } else {
                const Prior prior = method == Method::MTV ? Prior::MTV : method == Method::TV ? Prior::TV : Prior::FOT;
                ReconResult res = admm_reconstruct(problem(groups, ys[0].grid(), prior));
                images = std::move(res.images);
                if (!res.diagnostics.converged)
                    status = "max-iter";
            }
        } catch (const std::exception& e) {
            status = clean_status(e.what());
        }
        for (std::size_t m = 0; m < M; ++m)
            guarded(row(cond + ":" + contrast_name(m), to_string(method), seed), [&](ExperimentRow& r) {
                if (images.size() != M)
                    throw std::runtime_error(status.substr(status.find(' ') + 1));
                if (method != Method::BS)
                    r.estimate = groups[m].lambda;
                score(r, ys[m], images[m]);
                r.status = status;
            });
    }

    const ExperimentSpec& spec_;
    ProgressLog log_;
    std::vector<Volume> refs_;
    std::vector<ExperimentRow> rows_;
};

} // namespace detail

inline std::vector<ExperimentRow> run_experiment(const ExperimentSpec& spec, ProgressLog log = {})
{
    spec.validate();
    return detail::Harness(spec, std::move(log)).run();
}

} // namespace mtvsr
