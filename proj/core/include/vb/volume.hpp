#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace vb {

struct Dims {
    int d = 0; // slowest axis (axial slice index)
    int h = 0; // rows within a slice
    int w = 0; // columns within a slice (fastest axis)

    bool operator==(const Dims&) const = default;
    std::int64_t numel() const {
        return static_cast<std::int64_t>(d) * h * w;
    }
};

struct Spacing {
    float d = 1.0f;
    float h = 1.0f;
    float w = 1.0f;
    bool operator==(const Spacing&) const = default;
};

// Why a bespoke error type: the on-disk formats reject malformed input for
// several distinct reasons and callers (and tests) need to tell them apart.
class VolumeIoError : public std::runtime_error {
public:
    enum class Kind {
        OpenFailed,
        BadMagic,
        DimensionOverflow,
        TruncatedPayload,
        NonFiniteVoxel,
        BadMaskValue,
    };

    VolumeIoError(Kind kind, const std::string& msg)
        : std::runtime_error(msg), kind_(kind) {}
    Kind kind() const { return kind_; }

private:
    Kind kind_;
};

// Dense row-major 3D scalar image: index (d, i, j) maps to
// voxels[(d * H + i) * W + j]. Finite values only.
class Volume {
public:
    Volume() = default;
    Volume(Dims dims, Spacing spacing, std::vector<float> voxels);
    static Volume filled(Dims dims, float value, Spacing spacing = {});

    const Dims& dims() const { return dims_; }
    const Spacing& spacing() const { return spacing_; }
    std::int64_t numel() const { return dims_.numel(); }

    float& operator()(int d, int i, int j) {
        return voxels_[(static_cast<std::size_t>(d) * dims_.h + i) * dims_.w + j];
    }
    float operator()(int d, int i, int j) const {
        return voxels_[(static_cast<std::size_t>(d) * dims_.h + i) * dims_.w + j];
    }

    std::vector<float>& voxels() { return voxels_; }
    const std::vector<float>& voxels() const { return voxels_; }

    // Throws VolumeIoError(NonFiniteVoxel) if any voxel is NaN or Inf.
    void validate_finite() const;

private:
    Dims dims_;
    Spacing spacing_;
    std::vector<float> voxels_;
};

// Binary voxel mask over the same grid layout; values are exactly 0 or 1.
class Mask {
public:
    Mask() = default;
    Mask(Dims dims, Spacing spacing, std::vector<std::uint8_t> bits);
    static Mask filled(Dims dims, std::uint8_t value, Spacing spacing = {});

    const Dims& dims() const { return dims_; }
    const Spacing& spacing() const { return spacing_; }
    std::int64_t numel() const { return dims_.numel(); }

    std::uint8_t& operator()(int d, int i, int j) {
        return bits_[(static_cast<std::size_t>(d) * dims_.h + i) * dims_.w + j];
    }
    std::uint8_t operator()(int d, int i, int j) const {
        return bits_[(static_cast<std::size_t>(d) * dims_.h + i) * dims_.w + j];
    }

    std::vector<std::uint8_t>& bits() { return bits_; }
    const std::vector<std::uint8_t>& bits() const { return bits_; }

    std::int64_t count() const;

private:
    Dims dims_;
    Spacing spacing_;
    std::vector<std::uint8_t> bits_;
};

// Soft localization prior over the voxel grid, values in [0, 1].
// Stored as a Volume; construction clamps float dust but rejects
// genuinely out-of-range values.
class PriorMap {
public:
    PriorMap() = default;
    explicit PriorMap(Volume v);

    const Volume& volume() const { return vol_; }
    Volume& volume() { return vol_; }
    const Dims& dims() const { return vol_.dims(); }

    float operator()(int d, int i, int j) const { return vol_(d, i, j); }

private:
    Volume vol_;
};

// A volume cut into axial slices (fixed d => one H x W image each).
struct SliceStack {
    Dims dims;          // dims of the originating volume
    Spacing spacing;
    std::vector<std::vector<float>> slices; // dims.d entries of h*w pixels
};

SliceStack axial_slices(const Volume& v);
Volume restack(const SliceStack& s);

// On-disk formats, fixed little-endian regardless of host:
//   volume: "VBV1" | u32 d,h,w | f32 spacing d,h,w | d*h*w f32 voxels
//   mask:   "VBM1" | u32 d,h,w | f32 spacing d,h,w | d*h*w u8 bits
void save_volume(const Volume& v, const std::string& path);
Volume load_volume(const std::string& path);
void save_mask(const Mask& m, const std::string& path);
Mask load_mask(const std::string& path);

// Nearest-neighbour resampling onto a new grid spanning the same physical
// extent. Output voxel centres map to the nearest input voxel centre; exact
// ties break toward the lower index. Identity when out_dims == input dims.
Volume resample_nearest(const Volume& v, Dims out_dims);
Mask resample_nearest(const Mask& m, Dims out_dims);

// Writes one axial slice as a binary 8-bit PGM (min/max scaled); used for
// quick visual checks of priors and saliency maps.
void save_slice_pgm(const Volume& v, int slice, const std::string& path);

} // namespace vb
