#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "vb/volume.hpp"

namespace vb {

// Per-class lesion appearance. Values are in the same arbitrary intensity
// units as the surrounding tissue (~0.35); classes are told apart by where
// these knobs sit.
struct ClassSignature {
    double intensity_mean = 0.8;    // mean lesion intensity
    double intensity_std = 0.02;    // case-level draw of the lesion mean
    double texture_frequency = 0.2; // cycles/voxel of the internal sinusoidal texture
    double rim_strength = 0.0;      // additive enhancing shell at the lesion boundary
    double heterogeneity = 0.02;    // per-voxel intensity jitter inside the lesion
};

struct PhantomConfig {
    Dims dims{32, 32, 32};
    int n_cases = 8;
    std::vector<ClassSignature> classes{ClassSignature{}};
    double tumor_radius_min = 3.0;
    double tumor_radius_max = 6.0;
    double noise_std = 0.02;           // additive Gaussian noise everywhere
    double brain_margin = 0.1;         // ellipsoid semi-axes = dims/2 * (1 - margin)
    std::uint64_t seed = 1;
    // Optional corruptions so the preprocessing stages have real work:
    double bias_field_strength = 0.0;  // multiplies by exp(random degree-2 field)
    int max_offset_voxels = 0;         // random integer shift of the brain centre
};

struct CaseRecord {
    std::string case_id;
    int class_label = 0;
    std::string volume_path;  // relative to the manifest file
    std::string gt_mask_path; // relative to the manifest file
};

struct CohortManifest {
    std::vector<CaseRecord> cases;
    int k_classes = 0;
    std::string generator_config_echo; // JSON snapshot of the PhantomConfig
};

// One generated case held in memory (the CLI writes these to disk).
struct GeneratedCase {
    CaseRecord record;
    Volume volume;
    Mask gt_mask;
    double tumor_radius = 0.0;
    std::array<double, 3> tumor_center{}; // (d, i, j) voxel coordinates
};

// Deterministic: each case derives its own random stream from cfg.seed and
// its case index, so any generation order (or parallel generation) yields
// bit-identical volumes.
GeneratedCase generate_case(const PhantomConfig& cfg, int case_index);

// Class labels rotate case_index % k so counts stay balanced (difference
// at most 1 for any n_cases).
std::vector<GeneratedCase> generate_cohort(const PhantomConfig& cfg, int jobs = 1);

// Writes volumes/masks under out_dir plus manifest.json; returns the manifest.
CohortManifest write_cohort(const PhantomConfig& cfg, const std::string& out_dir,
                            int jobs = 1);

std::string manifest_to_json(const CohortManifest& m);
CohortManifest manifest_from_json(const std::string& text);
CohortManifest load_manifest(const std::string& path);
void save_manifest(const CohortManifest& m, const std::string& path);

// Per-class statistics over lesion voxels; means are monotone in the
// configured class intensity means, which is the property tests pin down.
struct ClassStats {
    int class_label = 0;
    int n_cases = 0;
    double mean_intensity = 0.0;    // mean over lesion voxels, averaged per case
    double std_intensity = 0.0;     // within-lesion standard deviation, averaged
    double mean_abs_gradient = 0.0; // texture proxy: mean |first difference| inside
    double mean_tumor_voxels = 0.0;
};

std::vector<ClassStats> class_separability_report(const std::vector<GeneratedCase>& cases);
std::string class_stats_to_json(const std::vector<ClassStats>& stats);

std::string phantom_config_to_json(const PhantomConfig& cfg);
PhantomConfig phantom_config_from_json(const std::string& text);

} // namespace vb
