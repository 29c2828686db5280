#pragma once

// Observation model of a thick-sliced acquisition: rigid resampling of the
// high-resolution volume, through-plane slice-profile blur and decimation onto
// the low-resolution lattice, stored as a sparse matrix with its transpose.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "errors.hpp"
#include "volume.hpp"

namespace mtvsr {

enum class SliceProfileKind { Gaussian, Rect, Delta };

inline SliceProfileKind parse_profile_kind(const std::string& s)
{
    if (s == "gaussian")
        return SliceProfileKind::Gaussian;
    if (s == "rect")
        return SliceProfileKind::Rect;
    if (s == "delta")
        return SliceProfileKind::Delta;
    throw std::invalid_argument("unknown slice profile '" + s + "'");
}

inline std::string to_string(SliceProfileKind k)
{
    switch (k) {
    case SliceProfileKind::Gaussian: return "gaussian";
    case SliceProfileKind::Rect: return "rect";
    case SliceProfileKind::Delta: return "delta";
    }
    return "?";
}

// Through-plane weights sampled at the HR spacing, centred on index half_width.
struct SliceProfile {
    SliceProfileKind kind = SliceProfileKind::Gaussian;
    double hr_spacing = 1.0;
    int half_width = 0;
    std::vector<double> weights{1.0};

    double offset_mm(int tap) const { return (tap - half_width) * hr_spacing; }
};

inline SliceProfile make_slice_profile(SliceProfileKind kind, double thickness_mm, double hr_spacing_mm)
{
    if (!(thickness_mm > 0.0) || !(hr_spacing_mm > 0.0) || !std::isfinite(thickness_mm)
        || !std::isfinite(hr_spacing_mm))
        throw std::invalid_argument("slice thickness and spacing must be positive");

    SliceProfile p;
    p.kind = kind;
    p.hr_spacing = hr_spacing_mm;
    switch (kind) {
    case SliceProfileKind::Delta:
        p.half_width = 0;
        p.weights = {1.0};
        return p;
    case SliceProfileKind::Gaussian: {
        // FWHM equal to the slice thickness, truncated at +-4 sigma.
        const double sigma = thickness_mm / (2.0 * std::sqrt(2.0 * std::log(2.0)));
        p.half_width = static_cast<int>(std::floor(4.0 * sigma / hr_spacing_mm));
        p.weights.assign(2 * p.half_width + 1, 0.0);
        for (int t = -p.half_width; t <= p.half_width; ++t) {
            const double x = t * hr_spacing_mm;
            p.weights[t + p.half_width] = std::exp(-0.5 * x * x / (sigma * sigma));
        }
        break;
    }
    case SliceProfileKind::Rect: {
        // Boxcar of width = thickness; edge bins get their fractional overlap.
        const double half = 0.5 * thickness_mm;
        p.half_width = static_cast<int>(std::ceil(half / hr_spacing_mm - 0.5 - 1e-12));
        p.half_width = std::max(p.half_width, 0);
        p.weights.assign(2 * p.half_width + 1, 0.0);
        for (int t = -p.half_width; t <= p.half_width; ++t) {
            const double lo = std::max((t - 0.5) * hr_spacing_mm, -half);
            const double hi = std::min((t + 0.5) * hr_spacing_mm, half);
            p.weights[t + p.half_width] = std::max(hi - lo, 0.0);
        }
        break;
    }
    }
    // Symmetric pairwise sums keep the kernel exactly symmetric after normalisation.
    double total = p.weights[p.half_width];
    for (int t = 1; t <= p.half_width; ++t)
        total += p.weights[p.half_width - t] + p.weights[p.half_width + t];
    for (auto& w : p.weights)
        w /= total;
    return p;
}

struct AcquisitionMeta {
    int slice_axis = 2;
    double slice_thickness_mm = 1.0;
    std::array<double, 2> in_plane_voxel_mm{1.0, 1.0};
    Affine lr_to_world = Affine::Identity();
    Dims lr_dims{1, 1, 1};

    GridSpec lr_grid() const
    {
        GridSpec g;
        g.dims = lr_dims;
        g.voxel_to_world = lr_to_world;
        g.voxel_size = spacing_from_affine(lr_to_world);
        return g;
    }
};

// Slice axis = voxel axis with the largest spacing; ties go to the highest axis index.
inline AcquisitionMeta meta_from_grid(const GridSpec& lr)
{
    lr.validate();
    const Vec3 sp = spacing_from_affine(lr.voxel_to_world);
    int axis = 2;
    for (int a = 1; a >= 0; --a)
        if (sp[a] > sp[axis] * (1.0 + 1e-6))
            axis = a;
    AcquisitionMeta m;
    m.slice_axis = axis;
    m.slice_thickness_mm = sp[axis];
    int c = 0;
    for (int a = 0; a < 3; ++a)
        if (a != axis)
            m.in_plane_voxel_mm[c++] = sp[a];
    m.lr_to_world = lr.voxel_to_world;
    m.lr_dims = lr.dims;
    return m;
}

// Thick-slice acquisition of an HR grid: spacing multiplied by `factor` along
// `axis`, centred on the HR field and optionally shifted by `shift_mm`.
inline AcquisitionMeta thick_slice_meta(const GridSpec& hr, int axis, double factor, double shift_mm = 0.0)
{
    hr.validate();
    if (axis < 0 || axis > 2)
        throw std::invalid_argument("slice axis must be 0, 1 or 2");
    if (!(factor > 0.0))
        throw std::invalid_argument("decimation factor must be positive");
    const double n = static_cast<double>(hr.dims[axis]);
    const auto m = static_cast<std::size_t>(std::max(1.0, std::round(n / factor)));
    Affine lr_to_hr = Affine::Identity();
    lr_to_hr(axis, axis) = factor;
    lr_to_hr(axis, 3) = 0.5 * (n - 1.0) - 0.5 * (static_cast<double>(m) - 1.0) * factor
        + shift_mm / hr.voxel_size[axis];

    AcquisitionMeta meta;
    meta.slice_axis = axis;
    meta.lr_dims = hr.dims;
    meta.lr_dims[axis] = m;
    meta.lr_to_world = hr.voxel_to_world * lr_to_hr;
    const Vec3 sp = spacing_from_affine(meta.lr_to_world);
    meta.slice_thickness_mm = sp[axis];
    int c = 0;
    for (int a = 0; a < 3; ++a)
        if (a != axis)
            meta.in_plane_voxel_mm[c++] = sp[a];
    return meta;
}

// Compressed sparse row matrix.
struct SparseMatrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<std::size_t> row_ptr{0};
    std::vector<std::uint32_t> col;
    std::vector<double> val;

    std::size_t nnz() const { return val.size(); }

    void multiply(std::span<const double> x, std::span<double> y) const
    {
        for (std::size_t r = 0; r < rows; ++r) {
            double acc = 0.0;
            for (std::size_t p = row_ptr[r]; p < row_ptr[r + 1]; ++p)
                acc += val[p] * x[col[p]];
            y[r] = acc;
        }
    }

    SparseMatrix transposed() const
    {
        SparseMatrix t;
        t.rows = cols;
        t.cols = rows;
        t.row_ptr.assign(cols + 1, 0);
        for (auto c : col)
            ++t.row_ptr[c + 1];
        for (std::size_t c = 0; c < cols; ++c)
            t.row_ptr[c + 1] += t.row_ptr[c];
        t.col.resize(nnz());
        t.val.resize(nnz());
        std::vector<std::size_t> next(t.row_ptr.begin(), t.row_ptr.end() - 1);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t p = row_ptr[r]; p < row_ptr[r + 1]; ++p) {
                const std::size_t dst = next[col[p]]++;
                t.col[dst] = static_cast<std::uint32_t>(r);
                t.val[dst] = val[p];
            }
        return t;
    }
};

class ProjectionOperator {
public:
    ProjectionOperator(GridSpec hr_grid, AcquisitionMeta meta, SliceProfile profile, SparseMatrix forward)
        : hr_grid_(std::move(hr_grid)), meta_(std::move(meta)), profile_(std::move(profile)),
          lr_grid_(meta_.lr_grid()), forward_(std::move(forward)), adjoint_(forward_.transposed())
    {
    }

    const GridSpec& hr_grid() const { return hr_grid_; }
    const GridSpec& lr_grid() const { return lr_grid_; }
    const AcquisitionMeta& meta() const { return meta_; }
    const SliceProfile& profile() const { return profile_; }
    const SparseMatrix& matrix() const { return forward_; }

    void apply(std::span<const double> hr, std::span<double> lr) const { forward_.multiply(hr, lr); }
    void apply_adjoint(std::span<const double> lr, std::span<double> hr) const { adjoint_.multiply(lr, hr); }

    Volume apply(const Volume& y) const
    {
        if (!y.grid().same_geometry(hr_grid_))
            throw std::invalid_argument("apply: volume is not on the operator's HR grid");
        Volume out(lr_grid_);
        apply(y.data(), out.data());
        return out;
    }

    Volume apply_adjoint(const Volume& x) const
    {
        if (x.dims() != lr_grid_.dims)
            throw std::invalid_argument("apply_adjoint: volume is not on the operator's LR grid");
        Volume out(hr_grid_);
        apply_adjoint(x.data(), out.data());
        return out;
    }

private:
    GridSpec hr_grid_;
    AcquisitionMeta meta_;
    SliceProfile profile_;
    GridSpec lr_grid_;
    SparseMatrix forward_;
    SparseMatrix adjoint_;
};

inline ProjectionOperator make_projection(const GridSpec& hr_grid, const AcquisitionMeta& meta,
                                          SliceProfileKind profile_kind)
{
    hr_grid.validate();
    const GridSpec lr = meta.lr_grid();
    lr.validate();
    if (meta.slice_axis < 0 || meta.slice_axis > 2)
        throw std::invalid_argument("slice axis must be 0, 1 or 2");
    const double h = hr_grid.voxel_size[0];
    if (std::abs(hr_grid.voxel_size[1] - h) > 1e-6 * h || std::abs(hr_grid.voxel_size[2] - h) > 1e-6 * h)
        throw std::invalid_argument("reconstruction grid must be isotropic");
    if (hr_grid.size() > std::size_t{0xffffffffu})
        throw std::invalid_argument("reconstruction grid too large");

    const SliceProfile profile = make_slice_profile(profile_kind, meta.slice_thickness_mm, h);
    const Eigen::Vector3d slice_dir = meta.lr_to_world.col(meta.slice_axis).head<3>().normalized();
    const Affine lr_to_hr = hr_grid.world_to_voxel() * meta.lr_to_world;
    const Eigen::Matrix3d lin = lr_to_hr.topLeftCorner<3, 3>();
    const Eigen::Vector3d off = lr_to_hr.topRightCorner<3, 1>();
    // Slice-direction step of one HR spacing, expressed in HR voxel coordinates.
    const Eigen::Vector3d tap_step = hr_grid.world_to_voxel().topLeftCorner<3, 3>() * slice_dir * h;

    const auto& hd = hr_grid.dims;
    SparseMatrix a;
    a.rows = lr.size();
    a.cols = hr_grid.size();
    a.row_ptr.assign(1, 0);
    a.row_ptr.reserve(a.rows + 1);

    std::vector<std::pair<std::uint32_t, double>> row;
    for (std::size_t k = 0; k < lr.dims[2]; ++k)
        for (std::size_t j = 0; j < lr.dims[1]; ++j)
            for (std::size_t i = 0; i < lr.dims[0]; ++i) {
                row.clear();
                const Eigen::Vector3d centre = lin * Eigen::Vector3d(double(i), double(j), double(k)) + off;
                for (std::size_t t = 0; t < profile.weights.size(); ++t) {
                    const double pw = profile.weights[t];
                    const Eigen::Vector3d q = centre + tap_step * double(static_cast<int>(t) - profile.half_width);
                    bool inside = true;
                    std::size_t i0[3], i1[3];
                    double f[3];
                    for (int ax = 0; ax < 3; ++ax) {
                        const double hi = static_cast<double>(hd[ax]) - 1.0;
                        if (!(q[ax] >= -0.5 && q[ax] <= hi + 0.5)) {
                            inside = false;
                            break;
                        }
                        const double x = std::clamp(q[ax], 0.0, hi);
                        const double fl = std::floor(x);
                        i0[ax] = static_cast<std::size_t>(fl);
                        i1[ax] = std::min(i0[ax] + 1, hd[ax] - 1);
                        f[ax] = x - fl;
                    }
                    if (!inside)
                        continue;
                    for (int c = 0; c < 8; ++c) {
                        const double w = pw * ((c & 1) ? f[0] : 1.0 - f[0]) * ((c & 2) ? f[1] : 1.0 - f[1])
                            * ((c & 4) ? f[2] : 1.0 - f[2]);
                        if (w == 0.0)
                            continue;
                        const std::size_t n = hr_grid.index((c & 1) ? i1[0] : i0[0], (c & 2) ? i1[1] : i0[1],
                                                            (c & 4) ? i1[2] : i0[2]);
                        row.emplace_back(static_cast<std::uint32_t>(n), w);
                    }
                }
                std::sort(row.begin(), row.end(),
                          [](const auto& l, const auto& r) { return l.first < r.first; });
                for (std::size_t p = 0; p < row.size();) {
                    const std::uint32_t c = row[p].first;
                    double w = 0.0;
                    for (; p < row.size() && row[p].first == c; ++p)
                        w += row[p].second;
                    a.col.push_back(c);
                    a.val.push_back(w);
                }
                a.row_ptr.push_back(a.col.size());
            }
    return ProjectionOperator(hr_grid, meta, profile, std::move(a));
}

// Replaces every value v by |v + sigma (e1 + i e2)| with e1, e2 standard
// normal draws from mt19937_64(seed). sigma = 0 leaves |v|.
inline void add_rician_noise(Volume& x, double sigma, std::uint64_t seed)
{
    if (!(sigma >= 0.0) || !std::isfinite(sigma))
        throw std::invalid_argument("noise sigma must be non-negative");
    if (sigma == 0.0) {
        for (auto& v : x.values())
            v = std::abs(v);
        return;
    }
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (auto& v : x.values()) {
        const double re = v + sigma * normal(rng);
        const double im = sigma * normal(rng);
        v = std::hypot(re, im);
    }
}

// Observation of `y` through `a` with Rician noise of scale
// sigma = noise_percent/100 * max(y). Deterministic in `seed`.
inline Volume simulate_lr(const ProjectionOperator& a, const Volume& y, double noise_percent, std::uint64_t seed)
{
    if (!(noise_percent >= 0.0) || !std::isfinite(noise_percent))
        throw std::invalid_argument("noise percent must be non-negative");
    Volume x = a.apply(y);
    add_rician_noise(x, noise_percent / 100.0 * y.max(), seed);
    return x;
}

inline Volume simulate_lr(const Volume& y, const AcquisitionMeta& meta, SliceProfileKind profile_kind,
                          double noise_percent, std::uint64_t seed)
{
    if (!(noise_percent >= 0.0) || !std::isfinite(noise_percent))
        throw std::invalid_argument("noise percent must be non-negative");
    return simulate_lr(make_projection(y.grid(), meta, profile_kind), y, noise_percent, seed);
}

} // namespace mtvsr
