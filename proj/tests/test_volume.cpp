// Voxel containers, the binary on-disk formats, slicing, and resampling.

#include <doctest.h>

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <unistd.h>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "vb/rng.hpp"
#include "vb/volume.hpp"

namespace fs = std::filesystem;
using vb::Dims;
using vb::Mask;
using vb::Spacing;
using vb::Volume;
using vb::VolumeIoError;

namespace {

fs::path temp_dir() {
    static int counter = 0;
    fs::path p = fs::temp_directory_path() /
                 ("vb_volume_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::create_directories(p);
    return p;
}

Volume random_volume(Dims dims, std::uint64_t seed) {
    vb::Rng rng(seed);
    std::vector<float> vox(static_cast<std::size_t>(dims.numel()));
    for (auto& v : vox) v = static_cast<float>(rng.uniform(-2.0, 5.0));
    return Volume(dims, {0.5f, 1.0f, 2.0f}, std::move(vox));
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void spit(const fs::path& p, const std::string& data) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    REQUIRE(out.good());
}

} // namespace

TEST_CASE("volume construction rejects mismatched payloads and bad dims") {
    CHECK_THROWS_AS(Volume({2, 2, 2}, {}, std::vector<float>(7, 0.0f)), std::invalid_argument);
    CHECK_THROWS_AS(Volume({0, 2, 2}, {}, {}), VolumeIoError);
    CHECK_THROWS_AS(Volume({-1, 2, 2}, {}, {}), VolumeIoError);
    std::vector<float> with_nan(8, 0.0f);
    with_nan[3] = std::numeric_limits<float>::quiet_NaN();
    CHECK_THROWS_AS(Volume({2, 2, 2}, {}, std::move(with_nan)), VolumeIoError);
}

TEST_CASE("mask construction enforces binary payloads") {
    std::vector<std::uint8_t> bad(8, 0);
    bad[5] = 2;
    CHECK_THROWS_AS(Mask({2, 2, 2}, {}, std::move(bad)), VolumeIoError);
    CHECK_THROWS_AS(Mask::filled({2, 2, 2}, 3), VolumeIoError);
    Mask m = Mask::filled({2, 3, 4}, 1);
    CHECK(m.count() == 24);
    m(1, 2, 3) = 0;
    CHECK(m.count() == 23);
}

TEST_CASE("indexing is row-major with the slice axis slowest") {
    Volume v = Volume::filled({2, 3, 4}, 0.0f);
    v(1, 2, 3) = 7.0f;
    // (d * H + i) * W + j = (1*3 + 2)*4 + 3 = 23
    CHECK(v.voxels()[23] == 7.0f);
    CHECK(v(1, 2, 3) == 7.0f);
}

TEST_CASE("volume round-trips through the binary format exactly") {
    const fs::path dir = temp_dir();
    const Volume v = random_volume({5, 6, 7}, 42);
    const fs::path path = dir / "vol.vbv";
    vb::save_volume(v, path.string());

    const std::string raw = slurp(path);
    CHECK(raw.size() == 28 + 5 * 6 * 7 * 4);
    CHECK(raw.substr(0, 4) == "VBV1");

    const Volume back = vb::load_volume(path.string());
    CHECK(back.dims() == v.dims());
    CHECK(back.spacing() == v.spacing());
    REQUIRE(back.voxels().size() == v.voxels().size());
    for (std::size_t i = 0; i < v.voxels().size(); ++i)
        CHECK(back.voxels()[i] == v.voxels()[i]); // bit-exact, not approximate
    fs::remove_all(dir);
}

TEST_CASE("mask round-trips through the binary format exactly") {
    const fs::path dir = temp_dir();
    Mask m = Mask::filled({4, 4, 4}, 0, {2.0f, 2.0f, 2.0f});
    vb::Rng rng(9);
    for (auto& b : m.bits()) b = rng.bernoulli(0.4) ? 1 : 0;
    const fs::path path = dir / "mask.vbm";
    vb::save_mask(m, path.string());

    const std::string raw = slurp(path);
    CHECK(raw.size() == 28 + 64);
    CHECK(raw.substr(0, 4) == "VBM1");

    const Mask back = vb::load_mask(path.string());
    CHECK(back.dims() == m.dims());
    CHECK(back.spacing() == m.spacing());
    CHECK(back.bits() == m.bits());
    fs::remove_all(dir);
}

TEST_CASE("loaders reject each corruption mode with the matching error kind") {
    const fs::path dir = temp_dir();
    const Volume v = random_volume({2, 2, 2}, 3);
    const fs::path path = dir / "vol.vbv";
    vb::save_volume(v, path.string());
    const std::string good = slurp(path);

    auto kind_of = [](auto&& fn) {
        try {
            fn();
        } catch (const VolumeIoError& e) {
            return e.kind();
        }
        FAIL("expected a VolumeIoError");
        return VolumeIoError::Kind::OpenFailed;
    };

    SUBCASE("missing file") {
        CHECK(kind_of([&] { vb::load_volume((dir / "nope.vbv").string()); }) ==
              VolumeIoError::Kind::OpenFailed);
    }
    SUBCASE("wrong magic") {
        std::string bad = good;
        bad[0] = 'X';
        spit(dir / "bad.vbv", bad);
        CHECK(kind_of([&] { vb::load_volume((dir / "bad.vbv").string()); }) ==
              VolumeIoError::Kind::BadMagic);
    }
    SUBCASE("mask magic fed to the volume loader") {
        vb::save_mask(Mask::filled({2, 2, 2}, 1), (dir / "m.vbm").string());
        CHECK(kind_of([&] { vb::load_volume((dir / "m.vbm").string()); }) ==
              VolumeIoError::Kind::BadMagic);
    }
    SUBCASE("truncated payload") {
        spit(dir / "trunc.vbv", good.substr(0, good.size() - 4));
        CHECK(kind_of([&] { vb::load_volume((dir / "trunc.vbv").string()); }) ==
              VolumeIoError::Kind::TruncatedPayload);
    }
    SUBCASE("trailing garbage") {
        spit(dir / "long.vbv", good + "zz");
        CHECK(kind_of([&] { vb::load_volume((dir / "long.vbv").string()); }) ==
              VolumeIoError::Kind::TruncatedPayload);
    }
    SUBCASE("zero dimension in header") {
        std::string bad = good;
        bad[4] = bad[5] = bad[6] = bad[7] = 0; // d = 0
        spit(dir / "zdim.vbv", bad);
        CHECK(kind_of([&] { vb::load_volume((dir / "zdim.vbv").string()); }) ==
              VolumeIoError::Kind::DimensionOverflow);
    }
    SUBCASE("absurd dimensions in header") {
        std::string bad = good;
        bad[4] = bad[5] = bad[6] = bad[7] = static_cast<char>(0xff);
        spit(dir / "huge.vbv", bad);
        CHECK(kind_of([&] { vb::load_volume((dir / "huge.vbv").string()); }) ==
              VolumeIoError::Kind::DimensionOverflow);
    }
    SUBCASE("non-finite voxel in payload") {
        std::string bad = good;
        // Overwrite the first voxel with +inf (0x7f800000 little-endian).
        bad[28] = 0x00;
        bad[29] = 0x00;
        bad[30] = static_cast<char>(0x80);
        bad[31] = 0x7f;
        spit(dir / "inf.vbv", bad);
        CHECK(kind_of([&] { vb::load_volume((dir / "inf.vbv").string()); }) ==
              VolumeIoError::Kind::NonFiniteVoxel);
    }
    SUBCASE("mask byte out of range") {
        vb::save_mask(Mask::filled({2, 2, 2}, 1), (dir / "m2.vbm").string());
        std::string bad = slurp(dir / "m2.vbm");
        bad[28] = 2;
        spit(dir / "m2.vbm", bad);
        CHECK(kind_of([&] { vb::load_mask((dir / "m2.vbm").string()); }) ==
              VolumeIoError::Kind::BadMaskValue);
    }
    fs::remove_all(dir);
}

TEST_CASE("axial slicing splits and restacks losslessly") {
    const Volume v = random_volume({4, 3, 5}, 77);
    const vb::SliceStack s = vb::axial_slices(v);
    REQUIRE(s.slices.size() == 4);
    CHECK(s.slices[0].size() == 15);
    // Slice d holds exactly the (i, j) plane at that depth.
    CHECK(s.slices[2][1 * 5 + 3] == v(2, 1, 3));
    const Volume back = vb::restack(s);
    CHECK(back.voxels() == v.voxels());
    CHECK(back.dims() == v.dims());

    vb::SliceStack broken = s;
    broken.slices.pop_back();
    CHECK_THROWS_AS(vb::restack(broken), std::invalid_argument);
}

TEST_CASE("prior map clamps float dust but rejects real range violations") {
    Volume ok = Volume::filled({2, 2, 2}, 0.5f);
    ok(0, 0, 0) = 1.0f + 5e-6f; // dust above 1 from filtering
    ok(0, 0, 1) = -5e-6f;       // dust below 0
    vb::PriorMap p(ok);
    CHECK(p(0, 0, 0) == 1.0f);
    CHECK(p(0, 0, 1) == 0.0f);

    Volume bad = Volume::filled({2, 2, 2}, 0.5f);
    bad(1, 1, 1) = 1.5f;
    CHECK_THROWS_AS(vb::PriorMap{bad}, std::invalid_argument);
}

TEST_CASE("resample_nearest is the identity at equal dims") {
    const Volume v = random_volume({3, 4, 5}, 5);
    const Volume out = vb::resample_nearest(v, v.dims());
    CHECK(out.voxels() == v.voxels());
    CHECK(out.spacing() == v.spacing());
}

TEST_CASE("resample_nearest doubles by voxel duplication and ties break low") {
    Volume v = Volume::filled({1, 1, 2}, 0.0f);
    v(0, 0, 0) = 1.0f;
    v(0, 0, 1) = 2.0f;
    const Volume up = vb::resample_nearest(v, {1, 1, 4});
    CHECK(up(0, 0, 0) == 1.0f);
    CHECK(up(0, 0, 1) == 1.0f);
    CHECK(up(0, 0, 2) == 2.0f);
    CHECK(up(0, 0, 3) == 2.0f);
    // 2 -> 4 halves the per-voxel extent.
    CHECK(up.spacing().w == doctest::Approx(0.5f * v.spacing().w));

    // 3 -> 2: output centres at input coords 0.25 and 1.75 -> indices 0 and 2.
    Volume t = Volume::filled({1, 1, 3}, 0.0f);
    t(0, 0, 0) = 10.0f;
    t(0, 0, 1) = 20.0f;
    t(0, 0, 2) = 30.0f;
    const Volume down = vb::resample_nearest(t, {1, 1, 2});
    CHECK(down(0, 0, 0) == 10.0f);
    CHECK(down(0, 0, 1) == 30.0f);

    // 2 -> 3: the middle output centre lands exactly between input centres
    // (coord 0.5); the tie must go to the lower index.
    const Volume mid = vb::resample_nearest(v, {1, 1, 3});
    CHECK(mid(0, 0, 0) == 1.0f);
    CHECK(mid(0, 0, 1) == 1.0f);
    CHECK(mid(0, 0, 2) == 2.0f);
}

TEST_CASE("mask resampling preserves binary values") {
    Mask m = Mask::filled({2, 2, 2}, 0);
    m(0, 0, 0) = 1;
    m(1, 1, 1) = 1;
    const Mask up = vb::resample_nearest(m, {4, 4, 4});
    for (std::uint8_t b : up.bits()) CHECK(b <= 1);
    CHECK(up.count() == 2 * 8); // each source voxel covers a 2x2x2 block
    CHECK(up(0, 0, 0) == 1);
    CHECK(up(3, 3, 3) == 1);
    CHECK(up(0, 3, 3) == 0);
}

TEST_CASE("slice export writes a well-formed 8-bit PGM") {
    const fs::path dir = temp_dir();
    Volume v = Volume::filled({2, 2, 3}, 0.0f);
    v(1, 0, 0) = 0.0f;
    v(1, 0, 1) = 0.5f;
    v(1, 0, 2) = 1.0f;
    v(1, 1, 0) = 1.0f;
    v(1, 1, 1) = 0.25f;
    v(1, 1, 2) = 0.75f;
    const fs::path path = dir / "slice.pgm";
    vb::save_slice_pgm(v, 1, path.string());

    const std::string raw = slurp(path);
    const std::string header = "P5\n3 2\n255\n";
    REQUIRE(raw.size() == header.size() + 6);
    CHECK(raw.substr(0, header.size()) == header);
    const auto* px = reinterpret_cast<const unsigned char*>(raw.data() + header.size());
    CHECK(px[0] == 0);   // min maps to 0
    CHECK(px[2] == 255); // max maps to 255
    CHECK(px[1] == 128); // 0.5 of span, rounded

    CHECK_THROWS_AS(vb::save_slice_pgm(v, 5, (dir / "oob.pgm").string()),
                    std::invalid_argument);
    fs::remove_all(dir);
}
