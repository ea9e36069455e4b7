#pragma once

#include <array>
#include <string>
#include <vector>

#include "vb/volume.hpp"

namespace vb {

struct PreprocessConfig {
    double brain_quantile = 0.5;   // intensity quantile for brain extraction
    int bias_poly_degree = 2;      // degree of the fitted log-intensity field
    Dims template_dims{32, 32, 32};
    double bbox_fill = 0.8;        // brain bbox fills this fraction of the template
};

// Thresholds at the given intensity quantile and keeps the largest
// 6-connected component of the strictly-above set. When no voxel lies
// strictly above (an all-equal volume), every voxel is kept -- ties at the
// threshold survive. Voxels outside the mask are zeroed in the returned
// volume.
struct BrainExtractResult {
    Volume volume; // input with non-mask voxels zeroed
    Mask mask;
    float threshold = 0.0f;
};
BrainExtractResult brain_extract(const Volume& v, double quantile);

// Fits a polynomial of the given degree to log-intensities inside the mask
// (least squares over normalized coordinates), zero-means the fitted field
// over the mask, and divides the masked voxels by exp(field). Degree 0 is
// an exact no-op. Throws when a masked voxel is non-positive or the fit is
// rank-deficient (fewer mask voxels than polynomial terms).
struct BiasCorrectResult {
    Volume volume;
    std::vector<double> field_coefficients;
};
BiasCorrectResult bias_correct(const Volume& v, const Mask& mask, int degree);

// Rigid-ish registration stand-in: translate the mask centroid onto the
// template centre and isotropically scale so the mask bounding box fills
// `bbox_fill` of the template extent, then resample (nearest) onto
// template_dims. A single-voxel mask degenerates to scale 1.
struct RegistrationTransform {
    std::array<double, 3> source_center{};   // mask centroid in input voxel coords
    std::array<double, 3> template_center{}; // centre of the template grid
    double scale = 1.0;                      // template voxels per input voxel
    Dims template_dims{};

    // Maps an output (template) voxel index to continuous input coordinates.
    std::array<double, 3> to_source(int d, int i, int j) const;
};

RegistrationTransform compute_registration(const Mask& mask, Dims template_dims,
                                           double bbox_fill);
Volume apply_registration(const Volume& v, const RegistrationTransform& t);
Mask apply_registration(const Mask& m, const RegistrationTransform& t);
Volume register_to_template(const Volume& v, const Mask& mask, const PreprocessConfig& cfg);

// Full chain: brain extraction -> bias correction -> registration, with a
// per-stage log and everything needed to carry other images (ground-truth
// masks) through the same spatial transform.
struct PreprocessResult {
    Volume volume;          // registered, bias-corrected, masked volume
    Mask brain_mask;        // brain mask in template space
    RegistrationTransform transform;
    float brain_threshold = 0.0f;
    std::vector<double> bias_coefficients;
    std::vector<std::string> stage_log; // one entry per stage, in order
};
PreprocessResult preprocess_pipeline(const Volume& v, const PreprocessConfig& cfg);

std::string preprocess_config_to_json(const PreprocessConfig& cfg);
PreprocessConfig preprocess_config_from_json(const std::string& text);

} // namespace vb
