#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "mtvsr/forward_model.hpp"
#include "test_util.hpp"

using namespace mtvsr;

namespace {

double sum(const std::vector<double>& w) { return std::accumulate(w.begin(), w.end(), 0.0); }

Eigen::MatrixXd dense(const ProjectionOperator& a)
{
    const auto& m = a.matrix();
    Eigen::MatrixXd d = Eigen::MatrixXd::Zero(m.rows, m.cols);
    for (std::size_t r = 0; r < m.rows; ++r)
        for (std::size_t p = m.row_ptr[r]; p < m.row_ptr[r + 1]; ++p)
            d(r, m.col[p]) += m.val[p];
    return d;
}

double adjoint_gap(const ProjectionOperator& a, std::uint64_t seed)
{
    const Volume y = testutil::random_volume(a.hr_grid(), seed);
    const Volume x = testutil::random_volume(a.lr_grid(), seed + 1);
    const Volume ay = a.apply(y);
    const Volume atx = a.apply_adjoint(x);
    const double lhs = dot(ay.data(), x.data()), rhs = dot(y.data(), atx.data());
    const double scale = norm2(ay.data()) * norm2(x.data()) + norm2(y.data()) * norm2(atx.data());
    return std::abs(lhs - rhs) / std::max(scale, 1e-300);
}

} // namespace

TEST(SliceProfile, GaussianHasFwhmEqualToThickness)
{
    const SliceProfile p = make_slice_profile(SliceProfileKind::Gaussian, 3.0, 1.0);
    EXPECT_NEAR(sum(p.weights), 1.0, 1e-12);
    // sigma = 3 / 2.3548 = 1.274 mm: taps within +-1 mm carry most of the mass
    const double centre = p.weights[p.half_width - 1] + p.weights[p.half_width] + p.weights[p.half_width + 1];
    EXPECT_GT(centre, 0.6);
    // half maximum is reached at +-1.5 mm
    const double sigma = 3.0 / (2.0 * std::sqrt(2.0 * std::log(2.0)));
    EXPECT_NEAR(std::exp(-0.5 * 1.5 * 1.5 / (sigma * sigma)), 0.5, 1e-12);
    EXPECT_EQ(p.half_width, static_cast<int>(std::floor(4.0 * sigma)));
    for (int t = 1; t <= p.half_width; ++t)
        EXPECT_DOUBLE_EQ(p.weights[p.half_width - t], p.weights[p.half_width + t]);
}

TEST(SliceProfile, ThinGaussianConcentratesNearCentre)
{
    const SliceProfile p = make_slice_profile(SliceProfileKind::Gaussian, 1.0, 1.0);
    double inside = 0.0;
    for (int t = -1; t <= 1; ++t)
        if (t + p.half_width >= 0 && t + p.half_width < int(p.weights.size()))
            inside += p.weights[t + p.half_width];
    EXPECT_GT(inside, 0.9);
}

TEST(SliceProfile, RectIsUniformOverThickness)
{
    const SliceProfile p = make_slice_profile(SliceProfileKind::Rect, 3.0, 1.0);
    ASSERT_EQ(p.weights.size(), 3u);
    for (double w : p.weights)
        EXPECT_NEAR(w, 1.0 / 3.0, 1e-12);
    const SliceProfile q = make_slice_profile(SliceProfileKind::Rect, 2.0, 1.0);
    ASSERT_EQ(q.weights.size(), 3u);
    EXPECT_NEAR(q.weights[0], 0.25, 1e-12);
    EXPECT_NEAR(q.weights[1], 0.5, 1e-12);
    EXPECT_NEAR(sum(q.weights), 1.0, 1e-12);
}

TEST(SliceProfile, DeltaAndBadInput)
{
    const SliceProfile p = make_slice_profile(SliceProfileKind::Delta, 7.0, 1.0);
    EXPECT_EQ(p.weights.size(), 1u);
    EXPECT_THROW(make_slice_profile(SliceProfileKind::Gaussian, 0.0, 1.0), std::invalid_argument);
    EXPECT_THROW(make_slice_profile(SliceProfileKind::Gaussian, 3.0, -1.0), std::invalid_argument);
    EXPECT_THROW(parse_profile_kind("triangle"), std::invalid_argument);
    EXPECT_EQ(parse_profile_kind("rect"), SliceProfileKind::Rect);
}

TEST(Meta, SliceAxisIsLargestSpacing)
{
    EXPECT_EQ(meta_from_grid(make_grid({4, 4, 4}, {1.0, 5.0, 1.0})).slice_axis, 1);
    EXPECT_EQ(meta_from_grid(make_grid({4, 4, 4}, {6.0, 5.0, 1.0})).slice_axis, 0);
    EXPECT_EQ(meta_from_grid(make_grid({4, 4, 4}, {2.0, 2.0, 2.0})).slice_axis, 2);
    EXPECT_EQ(meta_from_grid(make_grid({4, 4, 4}, {3.0, 3.0, 1.0})).slice_axis, 1);
    const AcquisitionMeta m = meta_from_grid(make_grid({4, 4, 4}, {0.9, 1.1, 4.0}));
    EXPECT_DOUBLE_EQ(m.slice_thickness_mm, 4.0);
    EXPECT_DOUBLE_EQ(m.in_plane_voxel_mm[0], 0.9);
    EXPECT_DOUBLE_EQ(m.in_plane_voxel_mm[1], 1.1);
}

TEST(Projection, IdentityWhenGridsCoincideWithDeltaProfile)
{
    const GridSpec g = make_grid({5, 4, 3});
    const ProjectionOperator a = make_projection(g, meta_from_grid(g), SliceProfileKind::Delta);
    const Volume y = testutil::random_volume(g, 3);
    const Volume x = a.apply(y);
    for (std::size_t n = 0; n < y.size(); ++n)
        EXPECT_NEAR(x[n], y[n], 1e-14);
}

TEST(Projection, PreservesConstantsAwayFromEdges)
{
    // 8 slices centred on HR planes 3 + 7k; the kernel reaches 11 planes out.
    const GridSpec hr = make_grid({10, 10, 56});
    const ProjectionOperator a = make_projection(hr, thick_slice_meta(hr, 2, 7.0), SliceProfileKind::Gaussian);
    const Volume x = a.apply(Volume(hr, 4.0));
    EXPECT_EQ(x.dims()[2], 8u);
    for (std::size_t k = 2; k <= 5; ++k)
        EXPECT_NEAR(x(5, 5, k), 4.0, 1e-12);
}

TEST(Projection, MatchesDenseDecimatedConvolution)
{
    // 12^3 HR, factor 3 along z. LR slice k sits on HR plane 1 + 3k, so the
    // operator is decimation of a zero-padded z-convolution with the profile.
    const GridSpec hr = make_grid({12, 12, 12});
    const ProjectionOperator a = make_projection(hr, thick_slice_meta(hr, 2, 3.0), SliceProfileKind::Gaussian);
    ASSERT_EQ(a.lr_grid().dims[2], 4u);

    const double sigma = 3.0 / (2.0 * std::sqrt(2.0 * std::log(2.0)));
    const int hw = static_cast<int>(std::floor(4.0 * sigma));
    std::vector<double> w(2 * hw + 1);
    for (int t = -hw; t <= hw; ++t)
        w[t + hw] = std::exp(-0.5 * t * t / (sigma * sigma));
    const double total = sum(w);
    for (auto& x : w)
        x /= total;

    const std::size_t n = hr.size();
    Eigen::MatrixXd conv = Eigen::MatrixXd::Zero(n, n);
    for (std::size_t k = 0; k < 12; ++k)
        for (std::size_t j = 0; j < 12; ++j)
            for (std::size_t i = 0; i < 12; ++i)
                for (int t = -hw; t <= hw; ++t) {
                    const long kk = long(k) + t;
                    if (kk >= 0 && kk < 12)
                        conv(hr.index(i, j, k), hr.index(i, j, std::size_t(kk))) += w[t + hw];
                }
    const GridSpec lr = a.lr_grid();
    Eigen::MatrixXd dec = Eigen::MatrixXd::Zero(lr.size(), n);
    for (std::size_t k = 0; k < 4; ++k)
        for (std::size_t j = 0; j < 12; ++j)
            for (std::size_t i = 0; i < 12; ++i)
                dec(lr.index(i, j, k), hr.index(i, j, 1 + 3 * k)) = 1.0;
    const Eigen::MatrixXd expect = dec * conv;
    EXPECT_LE((dense(a) - expect).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Projection, AdjointIsDenseTranspose)
{
    const GridSpec hr = make_grid({8, 8, 8});
    const ProjectionOperator a = make_projection(hr, thick_slice_meta(hr, 2, 3.0), SliceProfileKind::Gaussian);
    ASSERT_EQ(a.lr_grid().dims, (Dims{8, 8, 3}));
    const Eigen::MatrixXd d = dense(a);
    const Volume x = testutil::random_volume(a.lr_grid(), 8);
    const Volume atx = a.apply_adjoint(x);
    const Eigen::VectorXd expect = d.transpose() * testutil::to_eigen(x.values());
    for (std::size_t p = 0; p < atx.size(); ++p)
        EXPECT_NEAR(atx[p], expect[p], 1e-12);
}

TEST(Projection, AdjointIdentityOnRandomGeometries)
{
    std::mt19937_64 rng(77);
    std::uniform_int_distribution<int> dim(4, 14);
    std::uniform_real_distribution<double> fac(1.5, 6.0), shift(-1.0, 1.0);
    std::uniform_int_distribution<int> axis(0, 2), kind(0, 2);
    for (int t = 0; t < 100; ++t) {
        GridSpec hr = make_grid({std::size_t(dim(rng)), std::size_t(dim(rng)), std::size_t(dim(rng))});
        hr.voxel_to_world = testutil::random_affine(rng, hr.voxel_size);
        const int ax = axis(rng);
        AcquisitionMeta meta = thick_slice_meta(hr, ax, fac(rng), shift(rng));
        // tilt the acquisition slightly relative to the reconstruction grid
        const Eigen::Matrix3d tilt = Eigen::AngleAxisd(0.2 * shift(rng), Eigen::Vector3d::UnitX()).toRotationMatrix();
        meta.lr_to_world.topLeftCorner<3, 3>() = tilt * meta.lr_to_world.topLeftCorner<3, 3>();
        const ProjectionOperator a
            = make_projection(hr, meta, static_cast<SliceProfileKind>(kind(rng)));
        EXPECT_LE(adjoint_gap(a, rng()), 1e-10) << "trial " << t;
    }
}

TEST(Projection, OperatorNormAtMostOne)
{
    const GridSpec hr = make_grid({12, 12, 21});
    for (auto kind : {SliceProfileKind::Gaussian, SliceProfileKind::Rect, SliceProfileKind::Delta}) {
        const ProjectionOperator a = make_projection(hr, thick_slice_meta(hr, 2, 7.0, 0.3), kind);
        Volume v = testutil::random_volume(hr, 5, 0.0, 1.0);
        double est = 0.0;
        for (int it = 0; it < 100; ++it) {
            Volume w = a.apply_adjoint(a.apply(v));
            est = norm2(w.data()) / norm2(v.data());
            const double s = 1.0 / norm2(w.data());
            for (auto& x : w.values())
                x *= s;
            v = std::move(w);
        }
        EXPECT_LE(std::sqrt(est), 1.0 + 1e-6);
    }
}

TEST(Projection, FactorSevenDimensions)
{
    const GridSpec hr = make_grid({70, 70, 70});
    const AcquisitionMeta m = thick_slice_meta(hr, 2, 7.0);
    EXPECT_EQ(m.lr_dims, (Dims{70, 70, 10}));
    EXPECT_DOUBLE_EQ(m.slice_thickness_mm, 7.0);
    EXPECT_EQ(thick_slice_meta(hr, 0, 7.0).lr_dims, (Dims{10, 70, 70}));
}

TEST(Projection, RejectsAnisotropicReconstructionGrid)
{
    const GridSpec hr = make_grid({8, 8, 8}, {1.0, 1.0, 2.0});
    EXPECT_THROW(make_projection(hr, thick_slice_meta(hr, 2, 2.0), SliceProfileKind::Gaussian),
                 std::invalid_argument);
}

TEST(Noise, RayleighMeanOnZeroSignal)
{
    Volume v(make_grid({50, 50, 40}), 0.0);
    add_rician_noise(v, 3.0, 12);
    double mean = 0.0;
    for (double x : v.values())
        mean += x;
    mean /= static_cast<double>(v.size());
    EXPECT_NEAR(mean, 3.0 * std::sqrt(M_PI / 2.0), 0.02 * 3.0 * std::sqrt(M_PI / 2.0));
    for (double x : v.values())
        EXPECT_GE(x, 0.0);
}

TEST(Noise, ZeroSigmaGivesMagnitude)
{
    Volume v(make_grid({2, 1, 1}), std::vector<double>{-2.0, 3.0});
    add_rician_noise(v, 0.0, 1);
    EXPECT_EQ(v[0], 2.0);
    EXPECT_EQ(v[1], 3.0);
    EXPECT_THROW(add_rician_noise(v, -1.0, 1), std::invalid_argument);
}

TEST(Simulate, DeterministicInSeed)
{
    const GridSpec hr = make_grid({14, 14, 14});
    const Volume y = testutil::random_volume(hr, 2, 0.0, 100.0);
    const AcquisitionMeta m = thick_slice_meta(hr, 1, 7.0);
    const Volume a = simulate_lr(y, m, SliceProfileKind::Gaussian, 2.5, 99);
    const Volume b = simulate_lr(y, m, SliceProfileKind::Gaussian, 2.5, 99);
    const Volume c = simulate_lr(y, m, SliceProfileKind::Gaussian, 2.5, 100);
    EXPECT_EQ(a.values(), b.values());
    EXPECT_NE(a.values(), c.values());
    EXPECT_EQ(a.dims(), (Dims{14, 2, 14}));
}
