#include "vb/volume.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

namespace vb {

namespace {

constexpr std::int64_t kMaxVoxels = std::int64_t(1) << 31; // sanity cap for header dims

void check_dims(Dims dims) {
    if (dims.d <= 0 || dims.h <= 0 || dims.w <= 0)
        throw VolumeIoError(VolumeIoError::Kind::DimensionOverflow,
                            "volume dimensions must be positive");
    if (dims.numel() > kMaxVoxels)
        throw VolumeIoError(VolumeIoError::Kind::DimensionOverflow,
                            "volume dimensions overflow the supported size");
}

void put_u32_le(std::string& out, std::uint32_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
    out.push_back(static_cast<char>((v >> 16) & 0xff));
    out.push_back(static_cast<char>((v >> 24) & 0xff));
}

void put_f32_le(std::string& out, float f) {
    put_u32_le(out, std::bit_cast<std::uint32_t>(f));
}

std::uint32_t get_u32_le(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

float get_f32_le(const unsigned char* p) {
    return std::bit_cast<float>(get_u32_le(p));
}

struct Header {
    Dims dims;
    Spacing spacing;
};

std::string encode_header(const char* magic, Dims dims, Spacing spacing) {
    std::string out(magic, magic + 4);
    put_u32_le(out, static_cast<std::uint32_t>(dims.d));
    put_u32_le(out, static_cast<std::uint32_t>(dims.h));
    put_u32_le(out, static_cast<std::uint32_t>(dims.w));
    put_f32_le(out, spacing.d);
    put_f32_le(out, spacing.h);
    put_f32_le(out, spacing.w);
    return out;
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw VolumeIoError(VolumeIoError::Kind::OpenFailed, "cannot open " + path);
    std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return data;
}

Header decode_header(const std::string& data, const char* magic, const std::string& path) {
    if (data.size() < 28 || std::memcmp(data.data(), magic, 4) != 0)
        throw VolumeIoError(VolumeIoError::Kind::BadMagic,
                            path + ": bad magic (expected " + std::string(magic) + ")");
    const auto* p = reinterpret_cast<const unsigned char*>(data.data());
    Header h;
    const std::uint32_t d = get_u32_le(p + 4), hh = get_u32_le(p + 8), w = get_u32_le(p + 12);
    if (d == 0 || hh == 0 || w == 0 ||
        static_cast<std::int64_t>(d) * hh * w > kMaxVoxels)
        throw VolumeIoError(VolumeIoError::Kind::DimensionOverflow,
                            path + ": header dimensions out of range");
    h.dims = {static_cast<int>(d), static_cast<int>(hh), static_cast<int>(w)};
    h.spacing = {get_f32_le(p + 16), get_f32_le(p + 20), get_f32_le(p + 24)};
    return h;
}

void write_file(const std::string& path, const std::string& data) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw VolumeIoError(VolumeIoError::Kind::OpenFailed, "cannot write " + path);
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    if (!out)
        throw VolumeIoError(VolumeIoError::Kind::OpenFailed, "short write to " + path);
}

} // namespace

Volume::Volume(Dims dims, Spacing spacing, std::vector<float> voxels)
    : dims_(dims), spacing_(spacing), voxels_(std::move(voxels)) {
    check_dims(dims_);
    if (static_cast<std::int64_t>(voxels_.size()) != dims_.numel())
        throw std::invalid_argument("voxel payload does not match dimensions");
    validate_finite();
}

Volume Volume::filled(Dims dims, float value, Spacing spacing) {
    check_dims(dims);
    Volume v;
    v.dims_ = dims;
    v.spacing_ = spacing;
    v.voxels_.assign(static_cast<std::size_t>(dims.numel()), value);
    return v;
}

void Volume::validate_finite() const {
    for (float f : voxels_)
        if (!std::isfinite(f))
            throw VolumeIoError(VolumeIoError::Kind::NonFiniteVoxel,
                                "volume contains a non-finite voxel");
}

Mask::Mask(Dims dims, Spacing spacing, std::vector<std::uint8_t> bits)
    : dims_(dims), spacing_(spacing), bits_(std::move(bits)) {
    check_dims(dims_);
    if (static_cast<std::int64_t>(bits_.size()) != dims_.numel())
        throw std::invalid_argument("mask payload does not match dimensions");
    for (std::uint8_t b : bits_)
        if (b > 1)
            throw VolumeIoError(VolumeIoError::Kind::BadMaskValue,
                                "mask contains a value other than 0/1");
}

Mask Mask::filled(Dims dims, std::uint8_t value, Spacing spacing) {
    check_dims(dims);
    if (value > 1)
        throw VolumeIoError(VolumeIoError::Kind::BadMaskValue, "mask fill value must be 0/1");
    Mask m;
    m.dims_ = dims;
    m.spacing_ = spacing;
    m.bits_.assign(static_cast<std::size_t>(dims.numel()), value);
    return m;
}

std::int64_t Mask::count() const {
    std::int64_t n = 0;
    for (std::uint8_t b : bits_) n += b;
    return n;
}

PriorMap::PriorMap(Volume v) : vol_(std::move(v)) {
    for (float& f : vol_.voxels()) {
        if (f < 0.0f || f > 1.0f) {
            // Tolerate float dust from filtering, reject real range errors.
            if (f < -1e-5f || f > 1.0f + 1e-5f)
                throw std::invalid_argument("prior map value outside [0, 1]");
            f = std::clamp(f, 0.0f, 1.0f);
        }
    }
}

SliceStack axial_slices(const Volume& v) {
    SliceStack s;
    s.dims = v.dims();
    s.spacing = v.spacing();
    const std::size_t plane = static_cast<std::size_t>(v.dims().h) * v.dims().w;
    s.slices.reserve(static_cast<std::size_t>(v.dims().d));
    for (int d = 0; d < v.dims().d; ++d) {
        const float* base = v.voxels().data() + static_cast<std::size_t>(d) * plane;
        s.slices.emplace_back(base, base + plane);
    }
    return s;
}

Volume restack(const SliceStack& s) {
    const std::size_t plane = static_cast<std::size_t>(s.dims.h) * s.dims.w;
    if (static_cast<int>(s.slices.size()) != s.dims.d)
        throw std::invalid_argument("slice count does not match dims");
    std::vector<float> voxels;
    voxels.reserve(plane * s.slices.size());
    for (const auto& sl : s.slices) {
        if (sl.size() != plane)
            throw std::invalid_argument("slice size does not match dims");
        voxels.insert(voxels.end(), sl.begin(), sl.end());
    }
    return Volume(s.dims, s.spacing, std::move(voxels));
}

void save_volume(const Volume& v, const std::string& path) {
    v.validate_finite();
    std::string data = encode_header("VBV1", v.dims(), v.spacing());
    data.reserve(data.size() + static_cast<std::size_t>(v.numel()) * 4);
    for (float f : v.voxels()) put_f32_le(data, f);
    write_file(path, data);
}

Volume load_volume(const std::string& path) {
    const std::string data = read_file(path);
    const Header h = decode_header(data, "VBV1", path);
    const std::size_t expect = 28 + static_cast<std::size_t>(h.dims.numel()) * 4;
    if (data.size() != expect)
        throw VolumeIoError(VolumeIoError::Kind::TruncatedPayload,
                            path + ": payload size does not match header");
    std::vector<float> voxels(static_cast<std::size_t>(h.dims.numel()));
    const auto* p = reinterpret_cast<const unsigned char*>(data.data()) + 28;
    for (auto& f : voxels) {
        f = get_f32_le(p);
        p += 4;
        if (!std::isfinite(f))
            throw VolumeIoError(VolumeIoError::Kind::NonFiniteVoxel,
                                path + ": non-finite voxel in payload");
    }
    Volume v;
    v = Volume(h.dims, h.spacing, std::move(voxels));
    return v;
}

void save_mask(const Mask& m, const std::string& path) {
    std::string data = encode_header("VBM1", m.dims(), m.spacing());
    data.reserve(data.size() + static_cast<std::size_t>(m.numel()));
    for (std::uint8_t b : m.bits()) data.push_back(static_cast<char>(b));
    write_file(path, data);
}

Mask load_mask(const std::string& path) {
    const std::string data = read_file(path);
    const Header h = decode_header(data, "VBM1", path);
    const std::size_t expect = 28 + static_cast<std::size_t>(h.dims.numel());
    if (data.size() != expect)
        throw VolumeIoError(VolumeIoError::Kind::TruncatedPayload,
                            path + ": payload size does not match header");
    std::vector<std::uint8_t> bits(static_cast<std::size_t>(h.dims.numel()));
    const auto* p = reinterpret_cast<const unsigned char*>(data.data()) + 28;
    for (std::size_t i = 0; i < bits.size(); ++i) {
        bits[i] = p[i];
        if (bits[i] > 1)
            throw VolumeIoError(VolumeIoError::Kind::BadMaskValue,
                                path + ": mask byte is not 0/1");
    }
    return Mask(h.dims, h.spacing, std::move(bits));
}

namespace {

// Nearest input index for output index o on an axis resized n_in -> n_out.
// Voxel centres at t + 0.5; exact ties round toward the lower index.
inline int nearest_index(int o, int n_in, int n_out) {
    const double pos = (o + 0.5) * static_cast<double>(n_in) / n_out - 0.5;
    int idx = static_cast<int>(std::ceil(pos - 0.5));
    return std::clamp(idx, 0, n_in - 1);
}

Spacing rescale_spacing(Spacing s, Dims in, Dims out) {
    return Spacing{s.d * static_cast<float>(in.d) / out.d,
                   s.h * static_cast<float>(in.h) / out.h,
                   s.w * static_cast<float>(in.w) / out.w};
}

template <typename T, typename Img>
std::vector<T> resample_payload(const Img& img, Dims out_dims) {
    const Dims in = img.dims();
    std::vector<int> map_d(out_dims.d), map_i(out_dims.h), map_j(out_dims.w);
    for (int o = 0; o < out_dims.d; ++o) map_d[o] = nearest_index(o, in.d, out_dims.d);
    for (int o = 0; o < out_dims.h; ++o) map_i[o] = nearest_index(o, in.h, out_dims.h);
    for (int o = 0; o < out_dims.w; ++o) map_j[o] = nearest_index(o, in.w, out_dims.w);
    std::vector<T> out;
    out.reserve(static_cast<std::size_t>(out_dims.numel()));
    for (int d = 0; d < out_dims.d; ++d)
        for (int i = 0; i < out_dims.h; ++i)
            for (int j = 0; j < out_dims.w; ++j)
                out.push_back(img(map_d[d], map_i[i], map_j[j]));
    return out;
}

} // namespace

Volume resample_nearest(const Volume& v, Dims out_dims) {
    check_dims(out_dims);
    return Volume(out_dims, rescale_spacing(v.spacing(), v.dims(), out_dims),
                  resample_payload<float>(v, out_dims));
}

Mask resample_nearest(const Mask& m, Dims out_dims) {
    check_dims(out_dims);
    return Mask(out_dims, rescale_spacing(m.spacing(), m.dims(), out_dims),
                resample_payload<std::uint8_t>(m, out_dims));
}

void save_slice_pgm(const Volume& v, int slice, const std::string& path) {
    if (slice < 0 || slice >= v.dims().d)
        throw std::invalid_argument("slice index out of range");
    const int h = v.dims().h, w = v.dims().w;
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    const float* base = v.voxels().data() + static_cast<std::size_t>(slice) * plane;
    float lo = base[0], hi = base[0];
    for (std::size_t i = 0; i < plane; ++i) {
        lo = std::min(lo, base[i]);
        hi = std::max(hi, base[i]);
    }
    const float span = hi - lo;
    std::string data = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    for (std::size_t i = 0; i < plane; ++i) {
        const float t = span > 0.0f ? (base[i] - lo) / span : 0.0f;
        data.push_back(static_cast<char>(static_cast<int>(std::lround(t * 255.0f))));
    }
    write_file(path, data);
}

} // namespace vb
