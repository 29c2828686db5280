#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace mtvsr {

using Affine = Eigen::Matrix4d;
using Dims = std::array<std::size_t, 3>;
using Vec3 = std::array<double, 3>;

// Geometry of a voxel lattice: dims, spacing and the voxel -> world (mm) map.
struct GridSpec {
    Dims dims{1, 1, 1};
    Vec3 voxel_size{1.0, 1.0, 1.0};
    Affine voxel_to_world = Affine::Identity();

    std::size_t size() const { return dims[0] * dims[1] * dims[2]; }

    std::size_t index(std::size_t i, std::size_t j, std::size_t k) const
    {
        return i + dims[0] * (j + dims[1] * k);
    }

    void validate() const
    {
        for (int a = 0; a < 3; ++a) {
            if (dims[a] < 1)
                throw std::invalid_argument("grid dimension must be >= 1");
            if (!(voxel_size[a] > 0.0) || !std::isfinite(voxel_size[a]))
                throw std::invalid_argument("voxel size must be positive and finite");
        }
        if (!voxel_to_world.allFinite())
            throw std::invalid_argument("affine has non-finite entries");
        const double det = voxel_to_world.topLeftCorner<3, 3>().determinant();
        if (!(std::abs(det) > 1e-12))
            throw std::invalid_argument("affine is not invertible");
        const Eigen::RowVector4d last = voxel_to_world.row(3);
        if (last != Eigen::RowVector4d(0, 0, 0, 1))
            throw std::invalid_argument("affine last row must be (0,0,0,1)");
    }

    Affine world_to_voxel() const { return voxel_to_world.inverse(); }

    Eigen::Vector3d to_world(const Eigen::Vector3d& voxel) const
    {
        return voxel_to_world.topLeftCorner<3, 3>() * voxel + voxel_to_world.topRightCorner<3, 1>();
    }

    bool same_geometry(const GridSpec& other, double tol = 1e-6) const
    {
        if (dims != other.dims)
            return false;
        for (int a = 0; a < 3; ++a)
            if (std::abs(voxel_size[a] - other.voxel_size[a]) > tol)
                return false;
        return (voxel_to_world - other.voxel_to_world).cwiseAbs().maxCoeff() <= tol;
    }

    bool is_isotropic_1mm(double tol = 1e-6) const
    {
        return std::all_of(voxel_size.begin(), voxel_size.end(),
                           [tol](double s) { return std::abs(s - 1.0) <= tol; });
    }
};

// Axis-aligned grid with the given spacing; voxel (0,0,0) sits at `origin`.
inline GridSpec make_grid(Dims dims, Vec3 voxel_size = {1.0, 1.0, 1.0}, Vec3 origin = {0.0, 0.0, 0.0})
{
    GridSpec g;
    g.dims = dims;
    g.voxel_size = voxel_size;
    g.voxel_to_world = Affine::Identity();
    for (int a = 0; a < 3; ++a) {
        g.voxel_to_world(a, a) = voxel_size[a];
        g.voxel_to_world(a, 3) = origin[a];
    }
    g.validate();
    return g;
}

// World-axis-aligned grid with isotropic `spacing` covering the fields of view
// of all `grids`, centred on their joint bounding box.
inline GridSpec bounding_grid(const std::vector<GridSpec>& grids, double spacing = 1.0)
{
    if (grids.empty())
        throw std::invalid_argument("bounding grid needs at least one input grid");
    if (!(spacing > 0.0) || !std::isfinite(spacing))
        throw std::invalid_argument("spacing must be positive");
    Eigen::Vector3d lo = Eigen::Vector3d::Constant(std::numeric_limits<double>::infinity());
    Eigen::Vector3d hi = -lo;
    for (const auto& g : grids) {
        g.validate();
        for (int c = 0; c < 8; ++c) {
            Eigen::Vector3d v;
            for (int a = 0; a < 3; ++a)
                v[a] = (c >> a) & 1 ? static_cast<double>(g.dims[a]) - 0.5 : -0.5;
            const Eigen::Vector3d w = g.to_world(v);
            lo = lo.cwiseMin(w);
            hi = hi.cwiseMax(w);
        }
    }
    Dims dims{};
    Vec3 origin{};
    for (int a = 0; a < 3; ++a) {
        const double extent = hi[a] - lo[a];
        dims[a] = static_cast<std::size_t>(std::max(1.0, std::ceil(extent / spacing - 1e-9)));
        origin[a] = 0.5 * (lo[a] + hi[a]) - 0.5 * (static_cast<double>(dims[a]) - 1.0) * spacing;
    }
    return make_grid(dims, {spacing, spacing, spacing}, origin);
}

// Voxel spacing implied by an affine: the norms of its first three columns.
inline Vec3 spacing_from_affine(const Affine& m)
{
    return {m.col(0).head<3>().norm(), m.col(1).head<3>().norm(), m.col(2).head<3>().norm()};
}

class Volume {
public:
    Volume() = default;

    explicit Volume(GridSpec grid, double fill = 0.0) : grid_(std::move(grid))
    {
        grid_.validate();
        data_.assign(grid_.size(), fill);
    }

    Volume(GridSpec grid, std::vector<double> data) : grid_(std::move(grid)), data_(std::move(data))
    {
        grid_.validate();
        if (data_.size() != grid_.size())
            throw std::invalid_argument("volume data length does not match grid dims");
    }

    const GridSpec& grid() const { return grid_; }
    const Dims& dims() const { return grid_.dims; }
    std::size_t size() const { return data_.size(); }

    double& operator()(std::size_t i, std::size_t j, std::size_t k) { return data_[grid_.index(i, j, k)]; }
    double operator()(std::size_t i, std::size_t j, std::size_t k) const { return data_[grid_.index(i, j, k)]; }
    double& operator[](std::size_t n) { return data_[n]; }
    double operator[](std::size_t n) const { return data_[n]; }

    std::span<double> data() { return data_; }
    std::span<const double> data() const { return data_; }
    std::vector<double>& values() { return data_; }
    const std::vector<double>& values() const { return data_; }

    double max() const { return data_.empty() ? 0.0 : *std::max_element(data_.begin(), data_.end()); }
    double min() const { return data_.empty() ? 0.0 : *std::min_element(data_.begin(), data_.end()); }

    bool all_finite() const
    {
        return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
    }

private:
    GridSpec grid_;
    std::vector<double> data_;
};

// Per-voxel forward differences, stored as three planes (x, y, z).
struct GradientField {
    Dims dims{1, 1, 1};
    std::array<std::vector<double>, 3> d;

    GradientField() = default;
    explicit GradientField(Dims dims_) : dims(dims_)
    {
        const std::size_t n = dims[0] * dims[1] * dims[2];
        for (auto& c : d)
            c.assign(n, 0.0);
    }

    std::size_t size() const { return d[0].size(); }

    double norm_at(std::size_t n) const
    {
        return std::sqrt(d[0][n] * d[0][n] + d[1][n] * d[1][n] + d[2][n] * d[2][n]);
    }
};

inline double dot(std::span<const double> a, std::span<const double> b)
{
    return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
}

inline double dot(const GradientField& a, const GradientField& b)
{
    return dot(a.d[0], b.d[0]) + dot(a.d[1], b.d[1]) + dot(a.d[2], b.d[2]);
}

inline double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }
inline double norm2(const GradientField& a) { return std::sqrt(dot(a, a)); }

namespace detail {

// Stride of each axis in the linear index.
inline std::array<std::size_t, 3> strides(const Dims& dims) { return {1, dims[0], dims[0] * dims[1]}; }

} // namespace detail

// Forward differences scaled by 1/voxel_size; the last slice along each axis
// has zero difference on that axis (replicate boundary).
inline void gradient(const GridSpec& grid, std::span<const double> v, GradientField& g)
{
    const auto& dims = grid.dims;
    if (g.dims != dims || g.size() != grid.size())
        g = GradientField(dims);
    const auto stride = detail::strides(dims);
    for (int a = 0; a < 3; ++a) {
        const double inv_h = 1.0 / grid.voxel_size[a];
        auto& out = g.d[a];
        for (std::size_t k = 0; k < dims[2]; ++k)
            for (std::size_t j = 0; j < dims[1]; ++j) {
                const std::size_t base = grid.index(0, j, k);
                for (std::size_t i = 0; i < dims[0]; ++i) {
                    const std::size_t n = base + i;
                    const std::size_t pos = a == 0 ? i : (a == 1 ? j : k);
                    out[n] = pos + 1 < dims[a] ? (v[n + stride[a]] - v[n]) * inv_h : 0.0;
                }
            }
    }
}

inline GradientField gradient(const Volume& v)
{
    GradientField g(v.dims());
    gradient(v.grid(), v.data(), g);
    return g;
}

// Exact adjoint of gradient(): a negative divergence with the matching boundary.
inline void gradient_adjoint(const GridSpec& grid, const GradientField& g, std::span<double> out)
{
    const auto& dims = grid.dims;
    const auto stride = detail::strides(dims);
    std::fill(out.begin(), out.end(), 0.0);
    for (int a = 0; a < 3; ++a) {
        const double inv_h = 1.0 / grid.voxel_size[a];
        const auto& in = g.d[a];
        for (std::size_t k = 0; k < dims[2]; ++k)
            for (std::size_t j = 0; j < dims[1]; ++j) {
                const std::size_t base = grid.index(0, j, k);
                for (std::size_t i = 0; i < dims[0]; ++i) {
                    const std::size_t n = base + i;
                    const std::size_t pos = a == 0 ? i : (a == 1 ? j : k);
                    double acc = 0.0;
                    if (pos + 1 < dims[a])
                        acc -= in[n];
                    if (pos >= 1)
                        acc += in[n - stride[a]];
                    out[n] += acc * inv_h;
                }
            }
    }
}

inline Volume gradient_adjoint(const GridSpec& grid, const GradientField& g)
{
    if (g.dims != grid.dims)
        throw std::invalid_argument("gradient field dims do not match grid");
    Volume out(grid);
    gradient_adjoint(grid, g, out.data());
    return out;
}

} // namespace mtvsr
