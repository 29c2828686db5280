#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mtvsr/volume.hpp"

namespace testutil {

inline mtvsr::Volume random_volume(const mtvsr::GridSpec& g, std::uint64_t seed, double lo = -1.0, double hi = 1.0)
{
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(lo, hi);
    mtvsr::Volume v(g);
    for (auto& x : v.values())
        x = u(rng);
    return v;
}

inline std::vector<double> random_vector(std::size_t n, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd;
    std::vector<double> v(n);
    for (auto& x : v)
        x = nd(rng);
    return v;
}

// Random rigid transform times scaling, as a voxel -> world affine.
inline mtvsr::Affine random_affine(std::mt19937_64& rng, const mtvsr::Vec3& spacing)
{
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    const Eigen::Matrix3d r = (Eigen::AngleAxisd(0.5 * u(rng), Eigen::Vector3d::UnitZ())
                               * Eigen::AngleAxisd(0.5 * u(rng), Eigen::Vector3d::UnitY())
                               * Eigen::AngleAxisd(0.5 * u(rng), Eigen::Vector3d::UnitX()))
                                  .toRotationMatrix();
    mtvsr::Affine a = mtvsr::Affine::Identity();
    a.topLeftCorner<3, 3>() = r * Eigen::Vector3d(spacing[0], spacing[1], spacing[2]).asDiagonal();
    a.topRightCorner<3, 1>() = Eigen::Vector3d(10 * u(rng), 10 * u(rng), 10 * u(rng));
    return a;
}

// Dense forward-difference matrix (3N x N), rows ordered x-block, y-block, z-block.
inline Eigen::MatrixXd dense_gradient(const mtvsr::GridSpec& g)
{
    const std::size_t n = g.size();
    Eigen::MatrixXd d = Eigen::MatrixXd::Zero(3 * n, n);
    for (std::size_t k = 0; k < g.dims[2]; ++k)
        for (std::size_t j = 0; j < g.dims[1]; ++j)
            for (std::size_t i = 0; i < g.dims[0]; ++i) {
                const std::size_t p = g.index(i, j, k);
                const std::size_t q[3] = {i + 1 < g.dims[0] ? g.index(i + 1, j, k) : p,
                                          j + 1 < g.dims[1] ? g.index(i, j + 1, k) : p,
                                          k + 1 < g.dims[2] ? g.index(i, j, k + 1) : p};
                for (int a = 0; a < 3; ++a) {
                    if (q[a] == p)
                        continue;
                    d(a * n + p, q[a]) += 1.0 / g.voxel_size[a];
                    d(a * n + p, p) -= 1.0 / g.voxel_size[a];
                }
            }
    return d;
}

inline Eigen::VectorXd to_eigen(const std::vector<double>& v)
{
    return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

inline std::string temp_path(const std::string& name)
{
    const auto dir = std::filesystem::temp_directory_path() / "mtvsr_tests";
    std::filesystem::create_directories(dir);
    return (dir / name).string();
}

} // namespace testutil
