#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "volume.hpp"

namespace mtvsr {

struct MetricReport {
    double psnr_db = 0.0;
    double rmse = 0.0;
    std::size_t n_voxels = 0;
    std::string mask = "whole-volume";
};

// Root-mean-square difference over the voxels selected by `mask` (all when empty).
inline double rmse(const Volume& ref, const Volume& test, const std::vector<std::uint8_t>& mask = {})
{
    if (ref.dims() != test.dims())
        throw std::invalid_argument("rmse: volumes are on different grids");
    if (!mask.empty() && mask.size() != ref.size())
        throw std::invalid_argument("rmse: mask size mismatch");
    double acc = 0.0;
    std::size_t count = 0;
    for (std::size_t n = 0; n < ref.size(); ++n) {
        if (!mask.empty() && !mask[n])
            continue;
        const double d = ref[n] - test[n];
        acc += d * d;
        ++count;
    }
    if (count == 0)
        throw std::invalid_argument("rmse: empty mask");
    return std::sqrt(acc / static_cast<double>(count));
}

// 20 log10(max(ref) / rmse); +infinity when the volumes agree exactly.
inline double psnr(const Volume& ref, const Volume& test, const std::vector<std::uint8_t>& mask = {})
{
    const double e = rmse(ref, test, mask);
    if (e == 0.0)
        return std::numeric_limits<double>::infinity();
    return 20.0 * std::log10(ref.max()) - 20.0 * std::log10(e);
}

inline MetricReport evaluate(const Volume& ref, const Volume& test, const std::vector<std::uint8_t>& mask = {})
{
    MetricReport r;
    r.rmse = rmse(ref, test, mask);
    r.psnr_db = r.rmse == 0.0 ? std::numeric_limits<double>::infinity()
                              : 20.0 * std::log10(ref.max()) - 20.0 * std::log10(r.rmse);
    r.n_voxels = 0;
    for (std::size_t n = 0; n < ref.size(); ++n)
        r.n_voxels += mask.empty() || mask[n] ? 1 : 0;
    if (!mask.empty())
        r.mask = "user mask";
    return r;
}

} // namespace mtvsr
