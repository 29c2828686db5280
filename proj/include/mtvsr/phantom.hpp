#pragma once

// Procedural head phantoms: nested ellipsoidal tissue layers with a folded
// grey/white boundary, deep nuclei, ventricles and small lesions. Geometry
// depends only on the seed, so every contrast of one seed shares its edges.

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "volume.hpp"

namespace mtvsr {

enum class Tissue : int { Air, Scalp, Skull, Csf, Grey, White, Deep, Lesion, Count };

enum class Contrast { T1, T2, PD, DWI };

inline Contrast parse_contrast(const std::string& s)
{
    if (s == "t1" || s == "T1")
        return Contrast::T1;
    if (s == "t2" || s == "T2")
        return Contrast::T2;
    if (s == "pd" || s == "PD")
        return Contrast::PD;
    if (s == "dwi" || s == "DWI")
        return Contrast::DWI;
    throw std::invalid_argument("unknown phantom contrast '" + s + "'");
}

inline std::string to_string(Contrast c)
{
    switch (c) {
    case Contrast::T1: return "t1";
    case Contrast::T2: return "t2";
    case Contrast::PD: return "pd";
    case Contrast::DWI: return "dwi";
    }
    return "?";
}

// Relative tissue intensities per contrast, indexed by Tissue.
inline const std::array<double, 8>& tissue_intensities(Contrast c)
{
    static const std::array<double, 8> t1{0.0, 0.90, 0.10, 0.25, 0.55, 0.80, 0.62, 0.40};
    static const std::array<double, 8> t2{0.0, 0.50, 0.05, 1.00, 0.62, 0.45, 0.52, 0.85};
    static const std::array<double, 8> pd{0.0, 0.70, 0.10, 0.92, 0.80, 0.66, 0.76, 0.88};
    static const std::array<double, 8> dwi{0.0, 0.30, 0.05, 1.00, 0.46, 0.40, 0.44, 0.72};
    switch (c) {
    case Contrast::T1: return t1;
    case Contrast::T2: return t2;
    case Contrast::PD: return pd;
    case Contrast::DWI: return dwi;
    }
    return t1;
}

struct PhantomSettings {
    std::size_t size = 64;
    double peak = 100.0;        // intensity of a relative level of 1.0
    double texture = 0.04;      // amplitude of the smooth multiplicative texture
    int supersample = 2;        // partial-volume sub-samples per axis
};

class HeadPhantom {
public:
    explicit HeadPhantom(std::uint64_t seed, std::size_t size = 64) : size_(size)
    {
        if (size < 8)
            throw std::invalid_argument("phantom size must be >= 8");
        std::mt19937_64 rng(seed ^ 0x5eed5eedULL);
        std::uniform_real_distribution<double> u(-1.0, 1.0);
        const double n = static_cast<double>(size);
        centre_ = {0.5 * (n - 1) + 0.02 * n * u(rng), 0.5 * (n - 1) + 0.02 * n * u(rng), 0.5 * (n - 1)};
        axes_ = {n * (0.38 + 0.03 * u(rng)), n * (0.44 + 0.02 * u(rng)), n * (0.38 + 0.03 * u(rng))};
        const double yaw = 0.12 * u(rng), pitch = 0.08 * u(rng);
        rot_ = Eigen::AngleAxisd(yaw, Eigen::Vector3d::UnitZ()) * Eigen::AngleAxisd(pitch, Eigen::Vector3d::UnitX());
        for (auto& h : folds_) {
            h.l = 3 + static_cast<int>(std::floor(4.0 * (0.5 * u(rng) + 0.5)));
            h.m = 2 + static_cast<int>(std::floor(4.0 * (0.5 * u(rng) + 0.5)));
            h.phase_t = std::numbers::pi * u(rng);
            h.phase_p = std::numbers::pi * u(rng);
            h.amp = 0.035 + 0.02 * u(rng);
        }
        for (auto& b : blobs_) {
            b.centre = {0.35 * u(rng), 0.35 * u(rng), 0.3 * u(rng)};
            b.radius = 0.06 + 0.03 * (0.5 * u(rng) + 0.5);
        }
        for (auto& w : waves_) {
            const double scale = 2.0 * std::numbers::pi / (n * (0.18 + 0.1 * (0.5 * u(rng) + 0.5)));
            w.k = Eigen::Vector3d(u(rng), u(rng), u(rng)).normalized() * scale;
            w.phase = std::numbers::pi * u(rng);
        }
    }

    std::size_t size() const { return size_; }

    GridSpec grid() const
    {
        const double half = 0.5 * (static_cast<double>(size_) - 1.0);
        return make_grid({size_, size_, size_}, {1.0, 1.0, 1.0}, {-half, -half, -half});
    }

    // Tissue label at a continuous voxel-space position.
    Tissue label(const Eigen::Vector3d& p) const
    {
        const Eigen::Vector3d local = rot_.transpose() * (p - centre_);
        const Eigen::Vector3d s(local[0] / axes_[0], local[1] / axes_[1], local[2] / axes_[2]);
        const double rho = s.norm();
        const double scale = std::min({axes_[0], axes_[1], axes_[2]});
        const double vox = 1.0 / scale; // one voxel in normalised radius
        if (rho > 1.0)
            return Tissue::Air;
        if (rho > 1.0 - 2.5 * vox)
            return Tissue::Scalp;
        if (rho > 1.0 - 4.5 * vox)
            return Tissue::Skull;
        if (rho > 1.0 - 6.5 * vox)
            return Tissue::Csf;

        for (std::size_t b = 0; b < blobs_.size(); ++b) {
            const auto& bl = blobs_[b];
            if ((s - bl.centre).norm() < bl.radius)
                return b < 2 ? Tissue::Lesion : Tissue::Deep;
        }
        // Ventricles: two small ellipsoids either side of the midline.
        for (double side : {-1.0, 1.0}) {
            const Eigen::Vector3d v((s[0] - 0.11 * side) / 0.07, (s[1] + 0.05) / 0.22, (s[2] - 0.05) / 0.09);
            if (v.norm() < 1.0)
                return Tissue::Csf;
        }
        const double theta = std::acos(std::clamp(s[2] / std::max(rho, 1e-12), -1.0, 1.0));
        const double phi = std::atan2(s[1], s[0]);
        double fold = 0.0;
        for (const auto& h : folds_)
            fold += h.amp * std::sin(h.l * theta + h.phase_t) * std::cos(h.m * phi + h.phase_p);
        if (rho > 1.0 - 10.5 * vox + fold)
            return Tissue::Grey;
        return Tissue::White;
    }

    double texture_at(const Eigen::Vector3d& p) const
    {
        double t = 0.0;
        for (const auto& w : waves_)
            t += std::sin(w.k.dot(p) + w.phase);
        return t / static_cast<double>(waves_.size());
    }

    Volume render(Contrast c, const PhantomSettings& s = {}) const
    {
        const GridSpec g = grid();
        Volume v(g);
        const auto& table = tissue_intensities(c);
        const int ss = std::max(1, s.supersample);
        const double inv = 1.0 / (ss * ss * ss);
        for (std::size_t k = 0; k < size_; ++k)
            for (std::size_t j = 0; j < size_; ++j)
                for (std::size_t i = 0; i < size_; ++i) {
                    double acc = 0.0;
                    for (int c3 = 0; c3 < ss; ++c3)
                        for (int b = 0; b < ss; ++b)
                            for (int a = 0; a < ss; ++a) {
                                const Eigen::Vector3d p(i + (a + 0.5) / ss - 0.5, j + (b + 0.5) / ss - 0.5,
                                                        k + (c3 + 0.5) / ss - 0.5);
                                acc += table[static_cast<int>(label(p))];
                            }
                    const Eigen::Vector3d centre{double(i), double(j), double(k)};
                    const double level = acc * inv;
                    const double mod = level > 0.0 ? 1.0 + s.texture * texture_at(centre) : 1.0;
                    v(i, j, k) = s.peak * level * mod;
                }
        return v;
    }

private:
    struct Harmonic {
        int l = 3, m = 2;
        double phase_t = 0.0, phase_p = 0.0, amp = 0.0;
    };
    struct Blob {
        Eigen::Vector3d centre;
        double radius = 0.0;
    };
    struct Wave {
        Eigen::Vector3d k;
        double phase = 0.0;
    };

    std::size_t size_;
    Eigen::Vector3d centre_;
    std::array<double, 3> axes_{};
    Eigen::Matrix3d rot_;
    std::array<Harmonic, 4> folds_{};
    std::array<Blob, 5> blobs_{};
    std::array<Wave, 6> waves_{};
};

inline Volume make_phantom(std::uint64_t seed, Contrast contrast, const PhantomSettings& settings = {})
{
    return HeadPhantom(seed, settings.size).render(contrast, settings);
}

} // namespace mtvsr
