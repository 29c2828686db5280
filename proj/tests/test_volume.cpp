#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "mtvsr/volume.hpp"
#include "test_util.hpp"

using namespace mtvsr;

TEST(Grid, ValidateRejectsBadGeometry)
{
    GridSpec g = make_grid({4, 4, 4});
    g.dims[1] = 0;
    EXPECT_THROW(g.validate(), std::invalid_argument);
    g = make_grid({4, 4, 4});
    g.voxel_size[2] = 0.0;
    EXPECT_THROW(g.validate(), std::invalid_argument);
    g = make_grid({4, 4, 4});
    g.voxel_to_world(2, 2) = 0.0;
    EXPECT_THROW(g.validate(), std::invalid_argument);
    g = make_grid({4, 4, 4});
    g.voxel_to_world(3, 0) = 1.0;
    EXPECT_THROW(g.validate(), std::invalid_argument);
}

TEST(Volume, DataLengthMustMatchDims)
{
    EXPECT_THROW(Volume(make_grid({2, 2, 2}), std::vector<double>(7)), std::invalid_argument);
    const Volume v(make_grid({2, 3, 4}), 1.5);
    EXPECT_EQ(v.size(), 24u);
    EXPECT_DOUBLE_EQ(v(1, 2, 3), 1.5);
}

TEST(Volume, IndexIsXFastest)
{
    const GridSpec g = make_grid({3, 4, 5});
    EXPECT_EQ(g.index(1, 0, 0), 1u);
    EXPECT_EQ(g.index(0, 1, 0), 3u);
    EXPECT_EQ(g.index(0, 0, 1), 12u);
}

TEST(Gradient, ConstantVolumeHasZeroGradient)
{
    const Volume v(make_grid({5, 4, 3}, {1.0, 2.0, 3.0}), 7.0);
    const GradientField g = gradient(v);
    for (const auto& c : g.d)
        for (double x : c)
            EXPECT_EQ(x, 0.0);
}

TEST(Gradient, RampHasUnitSlopeExceptLastSlice)
{
    const GridSpec grid = make_grid({6, 3, 3});
    Volume v(grid);
    for (std::size_t k = 0; k < 3; ++k)
        for (std::size_t j = 0; j < 3; ++j)
            for (std::size_t i = 0; i < 6; ++i)
                v(i, j, k) = static_cast<double>(i);
    const GradientField g = gradient(v);
    for (std::size_t k = 0; k < 3; ++k)
        for (std::size_t j = 0; j < 3; ++j)
            for (std::size_t i = 0; i < 6; ++i) {
                const std::size_t n = grid.index(i, j, k);
                EXPECT_DOUBLE_EQ(g.d[0][n], i + 1 < 6 ? 1.0 : 0.0);
                EXPECT_DOUBLE_EQ(g.d[1][n], 0.0);
                EXPECT_DOUBLE_EQ(g.d[2][n], 0.0);
            }
}

TEST(Gradient, DividesByVoxelSize)
{
    const GridSpec grid = make_grid({2, 2, 2}, {0.5, 2.0, 4.0});
    Volume v(grid);
    v(1, 0, 0) = 1.0;
    v(0, 1, 0) = 1.0;
    v(0, 0, 1) = 1.0;
    const GradientField g = gradient(v);
    EXPECT_DOUBLE_EQ(g.d[0][0], 2.0);
    EXPECT_DOUBLE_EQ(g.d[1][0], 0.5);
    EXPECT_DOUBLE_EQ(g.d[2][0], 0.25);
}

TEST(Gradient, MatchesDenseMatrixOn5Cubed)
{
    const GridSpec grid = make_grid({5, 5, 5}, {1.0, 1.5, 0.7});
    const Eigen::MatrixXd d = testutil::dense_gradient(grid);
    const Volume v = testutil::random_volume(grid, 11);
    const GradientField g = gradient(v);
    const Eigen::VectorXd expect = d * testutil::to_eigen(v.values());
    const std::size_t n = grid.size();
    for (int a = 0; a < 3; ++a)
        for (std::size_t p = 0; p < n; ++p)
            EXPECT_NEAR(g.d[a][p], expect[a * n + p], 1e-12);
}

TEST(GradientAdjoint, ZeroFieldGivesZeroVolume)
{
    const GridSpec grid = make_grid({3, 3, 3});
    const Volume out = gradient_adjoint(grid, GradientField(grid.dims));
    for (double x : out.values())
        EXPECT_EQ(x, 0.0);
}

TEST(GradientAdjoint, MatchesDenseTransposeOn4Cubed)
{
    const GridSpec grid = make_grid({4, 4, 4}, {1.0, 2.0, 0.5});
    const Eigen::MatrixXd d = testutil::dense_gradient(grid);
    GradientField g(grid.dims);
    const auto r = testutil::random_vector(3 * grid.size(), 5);
    Eigen::VectorXd stacked(3 * grid.size());
    for (int a = 0; a < 3; ++a)
        for (std::size_t p = 0; p < grid.size(); ++p) {
            g.d[a][p] = r[a * grid.size() + p];
            stacked[a * grid.size() + p] = g.d[a][p];
        }
    const Volume out = gradient_adjoint(grid, g);
    const Eigen::VectorXd expect = d.transpose() * stacked;
    for (std::size_t p = 0; p < grid.size(); ++p)
        EXPECT_NEAR(out[p], expect[p], 1e-12);
}

TEST(GradientAdjoint, DotProductIdentity6x5x4)
{
    const GridSpec grid = make_grid({6, 5, 4}, {1.0, 1.0, 1.0});
    const Volume v = testutil::random_volume(grid, 3);
    GradientField g(grid.dims);
    for (int a = 0; a < 3; ++a)
        g.d[a] = testutil::random_vector(grid.size(), 10 + a);
    const double lhs = dot(gradient(v), g);
    const double rhs = dot(v.data(), gradient_adjoint(grid, g).data());
    EXPECT_LE(std::abs(lhs - rhs), 1e-10 * (norm2(gradient(v)) * norm2(g) + norm2(v.data()) * norm2(gradient_adjoint(grid, g).data())));
}

TEST(GradientAdjoint, HundredRandomTrials)
{
    std::mt19937_64 rng(2024);
    std::uniform_int_distribution<int> dim(1, 9);
    std::uniform_real_distribution<double> sp(0.5, 3.0);
    for (int t = 0; t < 100; ++t) {
        const GridSpec grid = make_grid({std::size_t(dim(rng)), std::size_t(dim(rng)), std::size_t(dim(rng))},
                                        {sp(rng), sp(rng), sp(rng)});
        const Volume v = testutil::random_volume(grid, rng());
        GradientField g(grid.dims);
        for (auto& c : g.d)
            c = testutil::random_vector(grid.size(), rng());
        const GradientField dv = gradient(v);
        const Volume dtg = gradient_adjoint(grid, g);
        const double scale = norm2(dv) * norm2(g) + norm2(v.data()) * norm2(dtg.data());
        EXPECT_LE(std::abs(dot(dv, g) - dot(v.data(), dtg.data())), 1e-10 * scale + 1e-300) << "trial " << t;
    }
}

TEST(Gradient, IsLinear)
{
    const GridSpec grid = make_grid({7, 6, 5});
    const Volume v = testutil::random_volume(grid, 1), w = testutil::random_volume(grid, 2);
    const double a = 1.7, b = -0.3;
    Volume c(grid);
    for (std::size_t n = 0; n < c.size(); ++n)
        c[n] = a * v[n] + b * w[n];
    const GradientField gc = gradient(c), gv = gradient(v), gw = gradient(w);
    for (int ax = 0; ax < 3; ++ax)
        for (std::size_t n = 0; n < c.size(); ++n)
            EXPECT_NEAR(gc.d[ax][n], a * gv.d[ax][n] + b * gw.d[ax][n], 1e-12 * (1.0 + std::abs(gc.d[ax][n])));
}

TEST(BoundingGrid, CoversAllFields)
{
    const GridSpec a = make_grid({10, 10, 2}, {1.0, 1.0, 5.0}, {0.0, 0.0, 2.0});
    const GridSpec b = make_grid({2, 10, 10}, {5.0, 1.0, 1.0}, {2.0, 0.0, 0.0});
    const GridSpec g = bounding_grid({a, b}, 1.0);
    EXPECT_TRUE(g.is_isotropic_1mm());
    EXPECT_EQ(g.dims[0], 10u);
    EXPECT_EQ(g.dims[1], 10u);
    EXPECT_EQ(g.dims[2], 10u);
    EXPECT_NEAR(g.voxel_to_world(0, 3), 0.0, 1e-12);
    EXPECT_THROW(bounding_grid({}, 1.0), std::invalid_argument);
}
