#pragma once

// MAP reconstruction of M high-resolution contrasts from their thick-sliced
// observations:
//
//   min_Y  sum_{m,s} tau_ms/2 ||A_ms y_m - x_ms||^2 + R(Y)
//
// with R the multi-channel TV  sum_n sqrt(sum_m lambda_m ||D_n y_m||^2),
// per-contrast isotropic TV, or first-order Tikhonov. TV-type priors are
// solved by ADMM on the split z_m = sqrt(lambda_m) D y_m (unscaled duals U);
// the quadratic y-subproblem is solved by warm-started conjugate gradients.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <future>
#include <limits>
#include <memory>
#include <numeric>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "errors.hpp"
#include "forward_model.hpp"
#include "resample.hpp"
#include "volume.hpp"

namespace mtvsr {

enum class Prior { MTV, TV, FOT };

inline Prior parse_prior(const std::string& s)
{
    if (s == "mtv" || s == "MTV")
        return Prior::MTV;
    if (s == "tv" || s == "TV")
        return Prior::TV;
    if (s == "fot" || s == "FOT")
        return Prior::FOT;
    throw std::invalid_argument("unknown prior '" + s + "'");
}

inline std::string to_string(Prior p)
{
    switch (p) {
    case Prior::MTV: return "mtv";
    case Prior::TV: return "tv";
    case Prior::FOT: return "fot";
    }
    return "?";
}

struct Observation {
    Volume x;
    std::shared_ptr<const ProjectionOperator> op;
    double tau = 1.0;
};

struct ContrastGroup {
    std::string id;
    std::vector<Observation> observations;
    double lambda = 1.0;
};

struct SolverSettings {
    double rho = 1.0;
    int max_admm_iter = 200;
    double cg_tol = 1e-4;
    int cg_max_iter = 50;
    double eps_rel = 1e-3;
    std::uint64_t seed = 0;
    bool adapt_rho = true;
    int threads = 1;
    bool record_timing = true;
};

struct ReconProblem {
    std::vector<ContrastGroup> groups;
    GridSpec hr_grid;
    Prior prior = Prior::MTV;
    SolverSettings settings;

    void validate() const
    {
        hr_grid.validate();
        if (groups.empty())
            throw std::invalid_argument("reconstruction needs at least one contrast");
        const auto& s = settings;
        if (!(s.rho > 0) || s.max_admm_iter < 1 || !(s.cg_tol > 0) || s.cg_max_iter < 1 || !(s.eps_rel > 0)
            || !(s.eps_rel < 1))
            throw std::invalid_argument("invalid solver settings");
        for (const auto& g : groups) {
            if (g.observations.empty())
                throw std::invalid_argument("contrast '" + g.id + "' has no observations");
            if (!(g.lambda > 0) || !std::isfinite(g.lambda))
                throw std::invalid_argument("contrast '" + g.id + "' needs lambda > 0");
            for (const auto& o : g.observations) {
                if (!o.op)
                    throw std::invalid_argument("observation without projection operator");
                if (!(o.tau > 0) || !std::isfinite(o.tau))
                    throw std::invalid_argument("contrast '" + g.id + "' needs tau > 0");
                if (!o.op->hr_grid().same_geometry(hr_grid))
                    throw std::invalid_argument("projection operator is not defined on the reconstruction grid");
                if (o.x.dims() != o.op->lr_grid().dims)
                    throw std::invalid_argument("observation does not match its operator's LR grid");
            }
        }
    }
};

struct IterationRecord {
    int iter = 0;
    double objective = 0.0;
    double primal_res = 0.0;
    double dual_res = 0.0;
    int cg_iters = 0;
    double wall_ms = 0.0;
    double rho = 0.0;
};

struct Diagnostics {
    std::vector<IterationRecord> trace;
    bool converged = false;
    int iterations = 0;
};

// Iterate bundle of the ADMM loop.
struct AdmmState {
    std::vector<Volume> y;
    std::vector<GradientField> z;
    std::vector<GradientField> u;
    int iteration = 0;
    double rho = 1.0;
    double primal_residual = 0.0;
    double dual_residual = 0.0;
    std::vector<double> objective_trace;
};

struct ReconResult {
    std::vector<Volume> images;
    Diagnostics diagnostics;
};

// ---------------------------------------------------------------------------
// Objective

inline double data_term(const Volume& y, const ContrastGroup& g)
{
    double e = 0.0;
    std::vector<double> ax;
    for (const auto& o : g.observations) {
        ax.resize(o.x.size());
        o.op->apply(y.data(), ax);
        double r2 = 0.0;
        for (std::size_t n = 0; n < ax.size(); ++n) {
            const double r = ax[n] - o.x[n];
            r2 += r * r;
        }
        e += 0.5 * o.tau * r2;
    }
    return e;
}

inline double prior_term(const std::vector<Volume>& ys, const ReconProblem& p)
{
    const std::size_t m_count = p.groups.size();
    std::vector<GradientField> g(m_count);
    for (std::size_t m = 0; m < m_count; ++m)
        g[m] = gradient(ys[m]);
    const std::size_t n_vox = p.hr_grid.size();
    double e = 0.0;
    for (std::size_t n = 0; n < n_vox; ++n) {
        if (p.prior == Prior::MTV) {
            double s = 0.0;
            for (std::size_t m = 0; m < m_count; ++m) {
                const double gn = g[m].norm_at(n);
                s += p.groups[m].lambda * gn * gn;
            }
            e += std::sqrt(s);
        } else {
            for (std::size_t m = 0; m < m_count; ++m) {
                const double gn = g[m].norm_at(n);
                e += p.prior == Prior::TV ? std::sqrt(p.groups[m].lambda) * gn : p.groups[m].lambda * gn * gn;
            }
        }
    }
    return e;
}

// Negative log-posterior up to constants.
inline double objective(const std::vector<Volume>& ys, const ReconProblem& p)
{
    if (ys.size() != p.groups.size())
        throw std::invalid_argument("objective: one image per contrast required");
    for (const auto& y : ys)
        if (!y.grid().same_geometry(p.hr_grid))
            throw std::invalid_argument("objective: image is not on the reconstruction grid");
    double e = 0.0;
    for (std::size_t m = 0; m < ys.size(); ++m)
        e += data_term(ys[m], p.groups[m]);
    return e + prior_term(ys, p);
}

// ---------------------------------------------------------------------------
// Proximal operators

// argmin_z t||z|| + 1/2||z - v||^2 for a single vector.
inline std::vector<double> prox_mtv(std::span<const double> v, double t)
{
    if (!(t >= 0.0))
        throw std::invalid_argument("prox threshold must be non-negative");
    const double nv = norm2(v);
    std::vector<double> z(v.begin(), v.end());
    const double scale = nv > 0.0 ? std::max(0.0, 1.0 - t / nv) : 0.0;
    for (auto& x : z)
        x *= scale;
    return z;
}

// Per-voxel shrinkage of the stacked field. Coupled: one joint 3M-vector norm
// per voxel (multi-channel TV). Decoupled: a 3-vector norm per contrast.
inline void prox_fields(std::vector<GradientField>& v, double t, bool coupled)
{
    if (v.empty())
        return;
    const std::size_t n_vox = v.front().size();
    for (std::size_t n = 0; n < n_vox; ++n) {
        if (coupled) {
            double s = 0.0;
            for (const auto& f : v)
                s += f.d[0][n] * f.d[0][n] + f.d[1][n] * f.d[1][n] + f.d[2][n] * f.d[2][n];
            const double nv = std::sqrt(s);
            const double scale = nv > 0.0 ? std::max(0.0, 1.0 - t / nv) : 0.0;
            for (auto& f : v)
                for (auto& c : f.d)
                    c[n] *= scale;
        } else {
            for (auto& f : v) {
                const double nv = f.norm_at(n);
                const double scale = nv > 0.0 ? std::max(0.0, 1.0 - t / nv) : 0.0;
                for (auto& c : f.d)
                    c[n] *= scale;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Conjugate gradients

struct CgResult {
    std::vector<double> x;
    int iterations = 0;
    double relative_residual = 0.0;
    bool converged = false;
};

using LinearMap = std::function<void(std::span<const double>, std::span<double>)>;

inline CgResult cg_solve(const LinearMap& op, std::span<const double> rhs, std::span<const double> x0, double tol,
                         int max_iter)
{
    const std::size_t n = rhs.size();
    CgResult res;
    res.x.assign(x0.begin(), x0.end());
    if (res.x.size() != n)
        res.x.assign(n, 0.0);
    const double bnorm = norm2(rhs);
    if (!std::isfinite(bnorm))
        throw SolverError("cg: non-finite right-hand side");
    if (bnorm == 0.0) {
        std::fill(res.x.begin(), res.x.end(), 0.0);
        res.converged = true;
        return res;
    }
    std::vector<double> r(n), p(n), ap(n);
    op(res.x, ap);
    for (std::size_t i = 0; i < n; ++i)
        r[i] = rhs[i] - ap[i];
    double rr = dot(r, r);
    res.relative_residual = std::sqrt(rr) / bnorm;
    if (res.relative_residual <= tol) {
        res.converged = true;
        return res;
    }
    p = r;
    for (int it = 1; it <= max_iter; ++it) {
        op(p, ap);
        const double pap = dot(p, ap);
        if (!std::isfinite(pap))
            throw SolverError("cg: operator produced non-finite values");
        if (pap <= 0.0)
            break;
        const double alpha = rr / pap;
        for (std::size_t i = 0; i < n; ++i) {
            res.x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        const double rr_new = dot(r, r);
        res.iterations = it;
        res.relative_residual = std::sqrt(rr_new) / bnorm;
        if (!std::isfinite(res.relative_residual))
            throw SolverError("cg: non-finite residual");
        if (res.relative_residual <= tol) {
            res.converged = true;
            break;
        }
        const double beta = rr_new / rr;
        rr = rr_new;
        for (std::size_t i = 0; i < n; ++i)
            p[i] = r[i] + beta * p[i];
    }
    return res;
}

// ---------------------------------------------------------------------------
// Reconstruction

namespace detail {

// y -> sum_s tau_s A_s^T A_s y + reg * D^T D y
class NormalOperator {
public:
    NormalOperator(const GridSpec& grid, const ContrastGroup& g) : grid_(grid), group_(g), grad_(grid.dims)
    {
        for (const auto& o : g.observations)
            lr_.emplace_back(o.x.size());
        tmp_.resize(grid.size());
    }

    void set_regularization(double reg) { reg_ = reg; }

    void operator()(std::span<const double> in, std::span<double> out)
    {
        std::fill(out.begin(), out.end(), 0.0);
        for (std::size_t s = 0; s < group_.observations.size(); ++s) {
            const auto& o = group_.observations[s];
            o.op->apply(in, lr_[s]);
            o.op->apply_adjoint(lr_[s], tmp_);
            for (std::size_t n = 0; n < out.size(); ++n)
                out[n] += o.tau * tmp_[n];
        }
        if (reg_ != 0.0) {
            gradient(grid_, in, grad_);
            gradient_adjoint(grid_, grad_, tmp_);
            for (std::size_t n = 0; n < out.size(); ++n)
                out[n] += reg_ * tmp_[n];
        }
    }

private:
    const GridSpec& grid_;
    const ContrastGroup& group_;
    GradientField grad_;
    std::vector<std::vector<double>> lr_;
    std::vector<double> tmp_;
    double reg_ = 0.0;
};

// sum_s tau_s A_s^T x_s and the tau-weighted adjoint-normalised average.
inline std::vector<double> data_rhs(const GridSpec& grid, const ContrastGroup& g)
{
    std::vector<double> rhs(grid.size(), 0.0), tmp(grid.size());
    for (const auto& o : g.observations) {
        o.op->apply_adjoint(o.x.data(), tmp);
        for (std::size_t n = 0; n < rhs.size(); ++n)
            rhs[n] += o.tau * tmp[n];
    }
    return rhs;
}

inline std::vector<double> initial_estimate(const GridSpec& grid, const ContrastGroup& g,
                                            const std::vector<double>& rhs)
{
    std::vector<double> denom(grid.size(), 0.0), tmp(grid.size());
    for (const auto& o : g.observations) {
        const std::vector<double> ones(o.x.size(), 1.0);
        o.op->apply_adjoint(ones, tmp);
        for (std::size_t n = 0; n < denom.size(); ++n)
            denom[n] += o.tau * tmp[n];
    }
    const double dmax = *std::max_element(denom.begin(), denom.end());
    std::vector<double> y(grid.size(), 0.0);
    for (std::size_t n = 0; n < y.size(); ++n)
        if (denom[n] > 1e-8 * dmax)
            y[n] = rhs[n] / denom[n];
    return y;
}

template <typename F>
void for_each_contrast(std::size_t count, int threads, F&& f)
{
    if (threads <= 1 || count <= 1) {
        for (std::size_t m = 0; m < count; ++m)
            f(m);
        return;
    }
    std::vector<std::future<void>> jobs;
    for (std::size_t m = 0; m < count; ++m)
        jobs.push_back(std::async(std::launch::async, [&f, m] { f(m); }));
    for (auto& j : jobs)
        j.get();
}

inline void scaled_gradient(const GridSpec& grid, const Volume& y, double scale, GradientField& out)
{
    gradient(grid, y.data(), out);
    for (auto& c : out.d)
        for (auto& v : c)
            v *= scale;
}

} // namespace detail

inline ReconResult admm_reconstruct(const ReconProblem& problem)
{
    problem.validate();
    using clock = std::chrono::steady_clock;
    const auto t_start = clock::now();
    const auto& grid = problem.hr_grid;
    const auto& s = problem.settings;
    const std::size_t m_count = problem.groups.size();
    const std::size_t n_vox = grid.size();
    auto elapsed_ms = [&]() {
        return s.record_timing ? std::chrono::duration<double, std::milli>(clock::now() - t_start).count() : 0.0;
    };

    std::vector<std::vector<double>> rhs0(m_count);
    AdmmState st;
    st.rho = s.rho;
    for (std::size_t m = 0; m < m_count; ++m) {
        rhs0[m] = detail::data_rhs(grid, problem.groups[m]);
        st.y.emplace_back(grid, detail::initial_estimate(grid, problem.groups[m], rhs0[m]));
    }

    ReconResult result;
    auto& diag = result.diagnostics;

    if (problem.prior == Prior::FOT) {
        // Quadratic prior lambda ||D y||^2: a single linear solve per contrast.
        std::vector<int> cg_counts(m_count, 0);
        detail::for_each_contrast(m_count, s.threads, [&](std::size_t m) {
            detail::NormalOperator op(grid, problem.groups[m]);
            op.set_regularization(2.0 * problem.groups[m].lambda);
            const auto cg = cg_solve(std::ref(op), rhs0[m], st.y[m].data(), std::min(s.cg_tol, 1e-6),
                                     std::max(s.cg_max_iter, 500));
            std::copy(cg.x.begin(), cg.x.end(), st.y[m].values().begin());
            cg_counts[m] = cg.iterations;
        });
        IterationRecord rec;
        rec.iter = 1;
        rec.objective = objective(st.y, problem);
        rec.cg_iters = std::accumulate(cg_counts.begin(), cg_counts.end(), 0);
        rec.wall_ms = elapsed_ms();
        rec.rho = 0.0;
        diag.trace.push_back(rec);
        diag.converged = true;
        diag.iterations = 1;
        result.images = std::move(st.y);
        return result;
    }

    const bool coupled = problem.prior == Prior::MTV;
    std::vector<double> sqrt_lambda(m_count);
    for (std::size_t m = 0; m < m_count; ++m)
        sqrt_lambda[m] = std::sqrt(problem.groups[m].lambda);

    std::vector<GradientField> gy(m_count, GradientField(grid.dims));
    st.z.assign(m_count, GradientField(grid.dims));
    st.u.assign(m_count, GradientField(grid.dims));
    for (std::size_t m = 0; m < m_count; ++m)
        detail::scaled_gradient(grid, st.y[m], sqrt_lambda[m], st.z[m]);

    std::vector<detail::NormalOperator> ops;
    ops.reserve(m_count);
    for (std::size_t m = 0; m < m_count; ++m)
        ops.emplace_back(grid, problem.groups[m]);

    std::vector<GradientField> z_old(m_count, GradientField(grid.dims));
    std::vector<GradientField> work(m_count, GradientField(grid.dims));
    std::vector<std::vector<double>> rhs(m_count, std::vector<double>(n_vox));
    std::vector<std::vector<double>> hr_tmp(m_count, std::vector<double>(n_vox));
    std::vector<int> cg_iters(m_count, 0);
    double cg_tol = s.cg_tol;

    for (int it = 1; it <= s.max_admm_iter; ++it) {
        // y-step: (sum tau A^T A + rho lambda D^T D) y = sum tau A^T x + sqrt(lambda) D^T (rho z - u)
        detail::for_each_contrast(m_count, s.threads, [&](std::size_t m) {
            auto& w = work[m];
            for (int a = 0; a < 3; ++a)
                for (std::size_t n = 0; n < n_vox; ++n)
                    w.d[a][n] = st.rho * st.z[m].d[a][n] - st.u[m].d[a][n];
            gradient_adjoint(grid, w, hr_tmp[m]);
            for (std::size_t n = 0; n < n_vox; ++n)
                rhs[m][n] = rhs0[m][n] + sqrt_lambda[m] * hr_tmp[m][n];
            ops[m].set_regularization(st.rho * problem.groups[m].lambda);
            const auto cg = cg_solve(std::ref(ops[m]), rhs[m], st.y[m].data(), cg_tol, s.cg_max_iter);
            std::copy(cg.x.begin(), cg.x.end(), st.y[m].values().begin());
            cg_iters[m] = cg.iterations;
        });

        // z-step: shrink G(Y) + U/rho with threshold 1/rho.
        for (std::size_t m = 0; m < m_count; ++m) {
            detail::scaled_gradient(grid, st.y[m], sqrt_lambda[m], gy[m]);
            std::swap(z_old[m], st.z[m]);
            for (int a = 0; a < 3; ++a)
                for (std::size_t n = 0; n < n_vox; ++n)
                    st.z[m].d[a][n] = gy[m].d[a][n] + st.u[m].d[a][n] / st.rho;
        }
        prox_fields(st.z, 1.0 / st.rho, coupled);

        // Dual ascent and residuals.
        double r2 = 0.0, gy2 = 0.0, z2 = 0.0, s2 = 0.0, gtu2 = 0.0;
        for (std::size_t m = 0; m < m_count; ++m) {
            for (int a = 0; a < 3; ++a)
                for (std::size_t n = 0; n < n_vox; ++n) {
                    const double diff = gy[m].d[a][n] - st.z[m].d[a][n];
                    st.u[m].d[a][n] += st.rho * diff;
                    r2 += diff * diff;
                    gy2 += gy[m].d[a][n] * gy[m].d[a][n];
                    z2 += st.z[m].d[a][n] * st.z[m].d[a][n];
                    work[m].d[a][n] = st.z[m].d[a][n] - z_old[m].d[a][n];
                }
            gradient_adjoint(grid, work[m], hr_tmp[m]);
            s2 += st.rho * st.rho * problem.groups[m].lambda * dot(hr_tmp[m], hr_tmp[m]);
            gradient_adjoint(grid, st.u[m], hr_tmp[m]);
            gtu2 += problem.groups[m].lambda * dot(hr_tmp[m], hr_tmp[m]);
        }
        const double tiny = std::numeric_limits<double>::min();
        st.primal_residual = std::sqrt(r2) / std::max(std::sqrt(std::max(gy2, z2)), tiny);
        st.dual_residual = std::sqrt(s2) / std::max(std::sqrt(gtu2), tiny);
        if (!std::isfinite(st.primal_residual) || !std::isfinite(st.dual_residual))
            throw SolverError("admm: non-finite state");
        st.iteration = it;

        IterationRecord rec;
        rec.iter = it;
        rec.objective = objective(st.y, problem);
        rec.primal_res = st.primal_residual;
        rec.dual_res = st.dual_residual;
        for (int c : cg_iters)
            rec.cg_iters += c;
        rec.wall_ms = elapsed_ms();
        rec.rho = st.rho;
        st.objective_trace.push_back(rec.objective);
        diag.trace.push_back(rec);
        diag.iterations = it;

        if (std::max(st.primal_residual, st.dual_residual) <= s.eps_rel) {
            diag.converged = true;
            break;
        }
        if (s.adapt_rho) {
            if (st.primal_residual > 10.0 * st.dual_residual)
                st.rho *= 2.0;
            else if (st.dual_residual > 10.0 * st.primal_residual)
                st.rho *= 0.5;
        }
        if (it % 10 == 0)
            cg_tol = std::max(0.5 * cg_tol, 1e-10);
    }
    result.images = std::move(st.y);
    return result;
}

// Cubic B-spline reslicing of every observation onto the HR grid, averaged
// voxel-wise over the observations whose field of view covers the voxel.
inline Volume bs_average_reconstruct(const ContrastGroup& group, const GridSpec& hr_grid)
{
    hr_grid.validate();
    if (group.observations.empty())
        throw std::invalid_argument("BS averaging needs at least one observation");
    Volume sum(hr_grid);
    std::vector<double> count(hr_grid.size(), 0.0);
    std::vector<std::uint8_t> mask;
    for (const auto& o : group.observations) {
        const Volume r = resample(o.x, hr_grid, Interpolation::CubicBSpline, &mask);
        for (std::size_t n = 0; n < sum.size(); ++n)
            if (mask[n]) {
                sum[n] += r[n];
                count[n] += 1.0;
            }
    }
    for (std::size_t n = 0; n < sum.size(); ++n)
        sum[n] = count[n] > 0.0 ? sum[n] / count[n] : 0.0;
    return sum;
}

inline void write_diagnostics_csv(std::ostream& os, const Diagnostics& d)
{
    os << "iter,objective,primal_res,dual_res,cg_iters,wall_ms\n";
    char buf[256];
    for (const auto& r : d.trace) {
        std::snprintf(buf, sizeof(buf), "%d,%.12g,%.9g,%.9g,%d,%.3f\n", r.iter, r.objective, r.primal_res, r.dual_res,
                      r.cg_iters, r.wall_ms);
        os << buf;
    }
}

} // namespace mtvsr
