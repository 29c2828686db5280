#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "volume.hpp"

namespace mtvsr {

enum class Interpolation { Trilinear, CubicBSpline };

namespace detail {

// Whole-sample mirror index for a line of length n.
inline std::size_t mirror_index(long i, std::size_t n)
{
    if (n == 1)
        return 0;
    const long period = 2 * static_cast<long>(n) - 2;
    i = std::abs(i) % period;
    if (i >= static_cast<long>(n))
        i = period - i;
    return static_cast<std::size_t>(i);
}

inline double bspline_causal_init(const double* c, std::size_t stride, std::size_t n, double z)
{
    const double tol = 1e-16;
    const std::size_t horizon = static_cast<std::size_t>(std::ceil(std::log(tol) / std::log(std::abs(z))));
    if (horizon < n) {
        double zn = z;
        double sum = c[0];
        for (std::size_t k = 1; k < horizon; ++k) {
            sum += zn * c[k * stride];
            zn *= z;
        }
        return sum;
    }
    double zn = z;
    const double iz = 1.0 / z;
    double z2n = std::pow(z, static_cast<double>(n - 1));
    double sum = c[0] + z2n * c[(n - 1) * stride];
    z2n *= z2n * iz;
    for (std::size_t k = 1; k + 1 < n; ++k) {
        sum += (zn + z2n) * c[k * stride];
        zn *= z;
        z2n *= iz;
    }
    return sum / (1.0 - zn * zn);
}

// In-place cubic B-spline interpolation prefilter along one line.
inline void bspline_prefilter_line(double* c, std::size_t stride, std::size_t n)
{
    if (n < 2)
        return;
    const double z = std::sqrt(3.0) - 2.0;
    const double gain = (1.0 - z) * (1.0 - 1.0 / z);
    for (std::size_t k = 0; k < n; ++k)
        c[k * stride] *= gain;
    c[0] = bspline_causal_init(c, stride, n, z);
    for (std::size_t k = 1; k < n; ++k)
        c[k * stride] += z * c[(k - 1) * stride];
    c[(n - 1) * stride] = (z / (z * z - 1.0)) * (z * c[(n - 2) * stride] + c[(n - 1) * stride]);
    for (std::size_t k = n - 1; k-- > 0;)
        c[k * stride] = z * (c[(k + 1) * stride] - c[k * stride]);
}

inline std::vector<double> bspline_coefficients(const Volume& v)
{
    std::vector<double> c(v.values());
    const auto& d = v.dims();
    for (std::size_t k = 0; k < d[2]; ++k)
        for (std::size_t j = 0; j < d[1]; ++j)
            bspline_prefilter_line(&c[v.grid().index(0, j, k)], 1, d[0]);
    for (std::size_t k = 0; k < d[2]; ++k)
        for (std::size_t i = 0; i < d[0]; ++i)
            bspline_prefilter_line(&c[v.grid().index(i, 0, k)], d[0], d[1]);
    for (std::size_t j = 0; j < d[1]; ++j)
        for (std::size_t i = 0; i < d[0]; ++i)
            bspline_prefilter_line(&c[v.grid().index(i, j, 0)], d[0] * d[1], d[2]);
    return c;
}

inline void cubic_weights(double t, double w[4])
{
    const double t2 = t * t, t3 = t2 * t;
    const double omt = 1.0 - t;
    w[0] = omt * omt * omt / 6.0;
    w[1] = (4.0 - 6.0 * t2 + 3.0 * t3) / 6.0;
    w[2] = (1.0 + 3.0 * t + 3.0 * t2 - 3.0 * t3) / 6.0;
    w[3] = t3 / 6.0;
}

inline bool inside_field(const Eigen::Vector3d& q, const Dims& dims)
{
    for (int a = 0; a < 3; ++a)
        if (!(q[a] >= -0.5 && q[a] <= static_cast<double>(dims[a]) - 0.5))
            return false;
    return true;
}

inline double sample_trilinear(const Volume& v, const Eigen::Vector3d& q)
{
    const auto& d = v.dims();
    std::size_t i0[3], i1[3];
    double f[3];
    for (int a = 0; a < 3; ++a) {
        const double hi = static_cast<double>(d[a] - 1);
        const double x = std::clamp(q[a], 0.0, hi);
        const double fl = std::floor(x);
        i0[a] = static_cast<std::size_t>(fl);
        i1[a] = std::min(i0[a] + 1, d[a] - 1);
        f[a] = x - fl;
    }
    double acc = 0.0;
    for (int c = 0; c < 8; ++c) {
        const std::size_t ii = (c & 1) ? i1[0] : i0[0];
        const std::size_t jj = (c & 2) ? i1[1] : i0[1];
        const std::size_t kk = (c & 4) ? i1[2] : i0[2];
        const double w = ((c & 1) ? f[0] : 1.0 - f[0]) * ((c & 2) ? f[1] : 1.0 - f[1]) * ((c & 4) ? f[2] : 1.0 - f[2]);
        acc += w * v(ii, jj, kk);
    }
    return acc;
}

inline double sample_cubic(const GridSpec& g, const std::vector<double>& coef, const Eigen::Vector3d& q)
{
    double w[3][4];
    std::size_t idx[3][4];
    for (int a = 0; a < 3; ++a) {
        const double fl = std::floor(q[a]);
        cubic_weights(q[a] - fl, w[a]);
        for (int t = 0; t < 4; ++t)
            idx[a][t] = mirror_index(static_cast<long>(fl) - 1 + t, g.dims[a]);
    }
    double acc = 0.0;
    for (int c = 0; c < 4; ++c)
        for (int b = 0; b < 4; ++b) {
            double row = 0.0;
            const std::size_t base = g.index(0, idx[1][b], idx[2][c]);
            for (int a = 0; a < 4; ++a)
                row += w[0][a] * coef[base + idx[0][a]];
            acc += w[2][c] * w[1][b] * row;
        }
    return acc;
}

} // namespace detail

// Pulls `v` onto `target`: each target voxel centre is mapped through both
// affines into v's voxel space. Centres outside v's field of view (beyond half
// a voxel from the outermost centres) are set to 0 and flagged in `in_field`.
inline Volume resample(const Volume& v, const GridSpec& target, Interpolation method,
                       std::vector<std::uint8_t>* in_field = nullptr)
{
    target.validate();
    const Affine m = v.grid().world_to_voxel() * target.voxel_to_world;
    const Eigen::Matrix3d lin = m.topLeftCorner<3, 3>();
    const Eigen::Vector3d off = m.topRightCorner<3, 1>();

    std::vector<double> coef;
    if (method == Interpolation::CubicBSpline)
        coef = detail::bspline_coefficients(v);

    Volume out(target);
    if (in_field)
        in_field->assign(target.size(), 0);
    const auto& td = target.dims;
    for (std::size_t k = 0; k < td[2]; ++k)
        for (std::size_t j = 0; j < td[1]; ++j)
            for (std::size_t i = 0; i < td[0]; ++i) {
                const Eigen::Vector3d q = lin * Eigen::Vector3d(double(i), double(j), double(k)) + off;
                if (!detail::inside_field(q, v.dims()))
                    continue;
                const std::size_t n = target.index(i, j, k);
                out[n] = method == Interpolation::Trilinear ? detail::sample_trilinear(v, q)
                                                            : detail::sample_cubic(v.grid(), coef, q);
                if (in_field)
                    (*in_field)[n] = 1;
            }
    return out;
}

} // namespace mtvsr
