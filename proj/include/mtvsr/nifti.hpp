#pragma once

// NIfTI-1 single-file (.nii / .nii.gz) reading and writing.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include <zlib.h>

#include "errors.hpp"
#include "volume.hpp"

namespace mtvsr {

namespace nifti {

struct Header {
    std::int32_t sizeof_hdr;
    char data_type[10];
    char db_name[18];
    std::int32_t extents;
    std::int16_t session_error;
    char regular;
    char dim_info;
    std::int16_t dim[8];
    float intent_p1;
    float intent_p2;
    float intent_p3;
    std::int16_t intent_code;
    std::int16_t datatype;
    std::int16_t bitpix;
    std::int16_t slice_start;
    float pixdim[8];
    float vox_offset;
    float scl_slope;
    float scl_inter;
    std::int16_t slice_end;
    char slice_code;
    char xyzt_units;
    float cal_max;
    float cal_min;
    float slice_duration;
    float toffset;
    std::int32_t glmax;
    std::int32_t glmin;
    char descrip[80];
    char aux_file[24];
    std::int16_t qform_code;
    std::int16_t sform_code;
    float quatern_b;
    float quatern_c;
    float quatern_d;
    float qoffset_x;
    float qoffset_y;
    float qoffset_z;
    float srow_x[4];
    float srow_y[4];
    float srow_z[4];
    char intent_name[16];
    char magic[4];
};
static_assert(sizeof(Header) == 348, "NIfTI-1 header must be 348 bytes");

enum DataType : std::int16_t {
    kUint8 = 2,
    kInt16 = 4,
    kInt32 = 8,
    kFloat32 = 16,
    kFloat64 = 64,
    kInt8 = 256,
    kUint16 = 512,
    kUint32 = 768,
    kInt64 = 1024,
    kUint64 = 1280,
};

namespace detail {

template <typename T>
void swap_bytes(T& v)
{
    auto* p = reinterpret_cast<unsigned char*>(&v);
    std::reverse(p, p + sizeof(T));
}

template <typename T, std::size_t N>
void swap_array(T (&a)[N])
{
    for (auto& v : a)
        swap_bytes(v);
}

inline void swap_header(Header& h)
{
    swap_bytes(h.sizeof_hdr);
    swap_bytes(h.extents);
    swap_bytes(h.session_error);
    swap_array(h.dim);
    swap_bytes(h.intent_p1);
    swap_bytes(h.intent_p2);
    swap_bytes(h.intent_p3);
    swap_bytes(h.intent_code);
    swap_bytes(h.datatype);
    swap_bytes(h.bitpix);
    swap_bytes(h.slice_start);
    swap_array(h.pixdim);
    swap_bytes(h.vox_offset);
    swap_bytes(h.scl_slope);
    swap_bytes(h.scl_inter);
    swap_bytes(h.slice_end);
    swap_bytes(h.cal_max);
    swap_bytes(h.cal_min);
    swap_bytes(h.slice_duration);
    swap_bytes(h.toffset);
    swap_bytes(h.glmax);
    swap_bytes(h.glmin);
    swap_bytes(h.qform_code);
    swap_bytes(h.sform_code);
    swap_bytes(h.quatern_b);
    swap_bytes(h.quatern_c);
    swap_bytes(h.quatern_d);
    swap_bytes(h.qoffset_x);
    swap_bytes(h.qoffset_y);
    swap_bytes(h.qoffset_z);
    swap_array(h.srow_x);
    swap_array(h.srow_y);
    swap_array(h.srow_z);
}

inline std::size_t bytes_per_voxel(std::int16_t datatype)
{
    switch (datatype) {
    case kUint8:
    case kInt8:
        return 1;
    case kInt16:
    case kUint16:
        return 2;
    case kInt32:
    case kUint32:
    case kFloat32:
        return 4;
    case kFloat64:
    case kInt64:
    case kUint64:
        return 8;
    default:
        return 0;
    }
}

template <typename T>
double read_as(const unsigned char* p, bool swap)
{
    T v;
    std::memcpy(&v, p, sizeof(T));
    if (swap)
        swap_bytes(v);
    return static_cast<double>(v);
}

inline double decode(const unsigned char* p, std::int16_t datatype, bool swap)
{
    switch (datatype) {
    case kUint8: return read_as<std::uint8_t>(p, swap);
    case kInt8: return read_as<std::int8_t>(p, swap);
    case kInt16: return read_as<std::int16_t>(p, swap);
    case kUint16: return read_as<std::uint16_t>(p, swap);
    case kInt32: return read_as<std::int32_t>(p, swap);
    case kUint32: return read_as<std::uint32_t>(p, swap);
    case kFloat32: return read_as<float>(p, swap);
    case kFloat64: return read_as<double>(p, swap);
    case kInt64: return read_as<std::int64_t>(p, swap);
    case kUint64: return read_as<std::uint64_t>(p, swap);
    default: return 0.0;
    }
}

inline bool has_gz_suffix(const std::string& path)
{
    return path.size() >= 3 && path.compare(path.size() - 3, 3, ".gz") == 0;
}

// Minimal RAII handle; gzread passes uncompressed files through unchanged.
class GzFile {
public:
    GzFile(const std::string& path, const char* mode) : f_(gzopen(path.c_str(), mode)) {}
    ~GzFile()
    {
        if (f_)
            gzclose(f_);
    }
    GzFile(const GzFile&) = delete;
    GzFile& operator=(const GzFile&) = delete;

    explicit operator bool() const { return f_ != nullptr; }
    gzFile get() const { return f_; }

    bool read_exact(void* dst, std::size_t n)
    {
        auto* out = static_cast<unsigned char*>(dst);
        while (n > 0) {
            const unsigned chunk = static_cast<unsigned>(std::min<std::size_t>(n, 1u << 30));
            const int got = gzread(f_, out, chunk);
            if (got <= 0)
                return false;
            out += got;
            n -= static_cast<std::size_t>(got);
        }
        return true;
    }

    bool write_all(const void* src, std::size_t n)
    {
        const auto* in = static_cast<const unsigned char*>(src);
        while (n > 0) {
            const unsigned chunk = static_cast<unsigned>(std::min<std::size_t>(n, 1u << 30));
            const int put = gzwrite(f_, in, chunk);
            if (put <= 0)
                return false;
            in += put;
            n -= static_cast<std::size_t>(put);
        }
        return true;
    }

    bool close()
    {
        const int rc = gzclose(f_);
        f_ = nullptr;
        return rc == Z_OK;
    }

private:
    gzFile f_;
};

inline Affine qform_affine(const Header& h)
{
    double b = h.quatern_b, c = h.quatern_c, d = h.quatern_d;
    double a = 1.0 - (b * b + c * c + d * d);
    if (a < 1e-7) {
        const double s = 1.0 / std::sqrt(b * b + c * c + d * d);
        b *= s;
        c *= s;
        d *= s;
        a = 0.0;
    } else {
        a = std::sqrt(a);
    }
    const double qfac = h.pixdim[0] < 0 ? -1.0 : 1.0;
    Eigen::Matrix3d r;
    r << a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c),
        2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b),
        2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b;
    Affine m = Affine::Identity();
    const double sx = std::abs(h.pixdim[1]) > 0 ? std::abs(h.pixdim[1]) : 1.0;
    const double sy = std::abs(h.pixdim[2]) > 0 ? std::abs(h.pixdim[2]) : 1.0;
    const double sz = (std::abs(h.pixdim[3]) > 0 ? std::abs(h.pixdim[3]) : 1.0) * qfac;
    m.topLeftCorner<3, 3>() = r * Eigen::Vector3d(sx, sy, sz).asDiagonal();
    m(0, 3) = h.qoffset_x;
    m(1, 3) = h.qoffset_y;
    m(2, 3) = h.qoffset_z;
    return m;
}

} // namespace detail

// Raw header of a file, for inspection and tests.
inline Header read_header(const std::string& path)
{
    detail::GzFile f(path, "rb");
    if (!f)
        throw IoError("cannot open '" + path + "'");
    Header h{};
    if (!f.read_exact(&h, sizeof(h)))
        throw IoError("'" + path + "' is too short for a NIfTI-1 header");
    if (h.sizeof_hdr != 348) {
        detail::swap_header(h);
        if (h.sizeof_hdr != 348)
            throw IoError("'" + path + "' is not a NIfTI-1 file");
    }
    return h;
}

} // namespace nifti

inline Volume load_volume(const std::string& path)
{
    using namespace nifti;
    nifti::detail::GzFile f(path, "rb");
    if (!f)
        throw IoError("cannot open '" + path + "'");
    Header h{};
    if (!f.read_exact(&h, sizeof(h)))
        throw IoError("'" + path + "' is too short for a NIfTI-1 header");
    bool swap = false;
    if (h.sizeof_hdr != 348) {
        nifti::detail::swap_header(h);
        swap = true;
        if (h.sizeof_hdr != 348)
            throw IoError("'" + path + "' is not a NIfTI-1 file");
    }
    if (std::memcmp(h.magic, "n+1", 4) != 0)
        throw IoError("'" + path + "' is not a single-file NIfTI-1 image (magic)");

    const int ndim = h.dim[0];
    if (ndim < 1 || ndim > 7)
        throw IoError("'" + path + "' has invalid dim[0]");
    Dims dims{1, 1, 1};
    for (int a = 0; a < 3; ++a) {
        if (a < ndim) {
            if (h.dim[a + 1] < 1)
                throw IoError("'" + path + "' has a non-positive dimension");
            dims[a] = static_cast<std::size_t>(h.dim[a + 1]);
        }
    }
    for (int a = 4; a <= ndim; ++a)
        if (h.dim[a] > 1)
            throw IoError("'" + path + "' has more than three dimensions");

    const std::size_t bpv = nifti::detail::bytes_per_voxel(h.datatype);
    if (bpv == 0)
        throw IoError("'" + path + "' has unsupported datatype " + std::to_string(h.datatype));

    Affine affine = Affine::Identity();
    if (h.sform_code > 0) {
        for (int c = 0; c < 4; ++c) {
            affine(0, c) = h.srow_x[c];
            affine(1, c) = h.srow_y[c];
            affine(2, c) = h.srow_z[c];
        }
    } else if (h.qform_code > 0) {
        affine = nifti::detail::qform_affine(h);
    } else {
        for (int a = 0; a < 3; ++a)
            affine(a, a) = std::abs(h.pixdim[a + 1]) > 0 ? std::abs(h.pixdim[a + 1]) : 1.0;
    }

    GridSpec grid;
    grid.dims = dims;
    grid.voxel_to_world = affine;
    const Vec3 from_affine = spacing_from_affine(affine);
    for (int a = 0; a < 3; ++a) {
        const double p = std::abs(h.pixdim[a + 1]);
        grid.voxel_size[a] = p > 0 && std::isfinite(p) ? p : from_affine[a];
    }
    try {
        grid.validate();
    } catch (const std::invalid_argument& e) {
        throw IoError("'" + path + "': " + e.what());
    }

    const long offset = static_cast<long>(h.vox_offset);
    if (offset < static_cast<long>(sizeof(Header)))
        throw IoError("'" + path + "' has invalid vox_offset");
    std::vector<unsigned char> skip(static_cast<std::size_t>(offset) - sizeof(Header));
    if (!skip.empty() && !f.read_exact(skip.data(), skip.size()))
        throw IoError("'" + path + "' is truncated");

    std::vector<unsigned char> raw(grid.size() * bpv);
    if (!f.read_exact(raw.data(), raw.size()))
        throw IoError("'" + path + "' is truncated");

    const bool scaled = h.scl_slope != 0.0f && std::isfinite(h.scl_slope);
    const double slope = scaled ? h.scl_slope : 1.0;
    const double inter = scaled && std::isfinite(h.scl_inter) ? h.scl_inter : 0.0;
    std::vector<double> data(grid.size());
    for (std::size_t n = 0; n < data.size(); ++n) {
        data[n] = nifti::detail::decode(raw.data() + n * bpv, h.datatype, swap) * slope + inter;
        if (!std::isfinite(data[n]))
            throw IoError("'" + path + "' contains non-finite voxel values");
    }
    return Volume(grid, std::move(data));
}

// Writes float32 NIfTI-1 with sform_code 2; gzip-compressed when the path ends
// in ".gz". `description` fills the 80-byte descrip field, truncated.
inline void save_volume(const Volume& v, const std::string& path, const std::string& description = {})
{
    using namespace nifti;
    Header h{};
    h.sizeof_hdr = 348;
    h.regular = 'r';
    const auto& g = v.grid();
    h.dim[0] = 3;
    for (int a = 0; a < 3; ++a) {
        if (g.dims[a] > 32767)
            throw IoError("dimension too large for NIfTI-1");
        h.dim[a + 1] = static_cast<std::int16_t>(g.dims[a]);
    }
    for (int a = 4; a < 8; ++a)
        h.dim[a] = 1;
    h.datatype = kFloat32;
    h.bitpix = 32;
    h.pixdim[0] = 1.0f;
    for (int a = 0; a < 3; ++a)
        h.pixdim[a + 1] = static_cast<float>(g.voxel_size[a]);
    for (int a = 4; a < 8; ++a)
        h.pixdim[a] = 1.0f;
    h.vox_offset = 352.0f;
    h.scl_slope = 1.0f;
    h.scl_inter = 0.0f;
    h.xyzt_units = 2; // mm
    h.qform_code = 0;
    h.sform_code = 2;
    for (int c = 0; c < 4; ++c) {
        h.srow_x[c] = static_cast<float>(g.voxel_to_world(0, c));
        h.srow_y[c] = static_cast<float>(g.voxel_to_world(1, c));
        h.srow_z[c] = static_cast<float>(g.voxel_to_world(2, c));
    }
    std::memcpy(h.magic, "n+1", 4);
    std::memcpy(h.descrip, description.data(), std::min(description.size(), sizeof(h.descrip) - 1));

    std::vector<float> data(v.size());
    std::transform(v.values().begin(), v.values().end(), data.begin(),
                   [](double x) { return static_cast<float>(x); });
    const char extension[4] = {0, 0, 0, 0};

    const char* mode = nifti::detail::has_gz_suffix(path) ? "wb6" : "wbT";
    nifti::detail::GzFile f(path, mode);
    if (!f)
        throw IoError("cannot open '" + path + "' for writing");
    if (!f.write_all(&h, sizeof(h)) || !f.write_all(extension, sizeof(extension))
        || !f.write_all(data.data(), data.size() * sizeof(float)) || !f.close())
        throw IoError("failed writing '" + path + "'");
}

} // namespace mtvsr
