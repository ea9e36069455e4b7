#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "vb/nn/tensor.hpp"
#include "vb/oracle.hpp"
#include "vb/volume.hpp"

namespace vb {

// Tuning knobs for the coarse prior and the voxel-MLP refinement stage.
// The single high-confidence threshold is split three ways because it serves
// three distinct roles: picking positive supervision (tau_pos), picking
// negative supervision (tau_neg), and binarising the coarse map for the
// final union (tau_bin).
struct PriorConfig {
    double gaussian_sigma = 2.0; // voxels; truncated at 3 sigma
    int dilation_radius = 2;     // 6-connected metric ball radius, voxels
    double tau_pos = 0.7;
    double tau_neg = 0.1;
    double tau_bin = 0.5;
    int mlp_hidden = 16;
    int mlp_epochs = 200;
    double neg_sample_ratio = 8.0; // |negatives| = round(ratio * |positives|);
                                   // generous sampling pulls in enough brain-
                                   // tissue voxels that the MLP separates
                                   // lesion from tissue, not just from air
    double mlp_lr = 0.1;           // full-batch gradient-descent step size
    std::uint64_t seed = 1;        // drives negative subsampling and MLP init

    // Enforces tau_neg < tau_bin <= tau_pos, sigma > 0, radius >= 0, and
    // positive MLP dimensions; throws std::invalid_argument otherwise.
    void validate() const;
};

std::string prior_config_to_json(const PriorConfig& cfg);
PriorConfig prior_config_from_json(const std::string& text);

// Per-voxel input of the refinement MLP: appearance (intensity plus local
// 3x3x3 statistics, window clamped at borders) and normalised position.
struct VoxelFeature {
    static constexpr int kDim = 6;

    double intensity = 0.0;
    double local_mean_3 = 0.0;
    double local_std_3 = 0.0; // population std over the window, >= 0
    std::array<double, 3> norm_coords{}; // (d/D, i/H, j/W), each in [0, 1)

    std::array<double, kDim> flat() const {
        return {intensity, local_mean_3, local_std_3,
                norm_coords[0], norm_coords[1], norm_coords[2]};
    }
};

VoxelFeature voxel_feature(const Volume& v, int d, int i, int j);

// Box stacking: voxel (d,i,j) = 1 iff some prediction on slice d covers it
// (half-open box coordinates). Throws std::out_of_range for any box that is
// not fully in-bounds for dims.
Volume stack_boxes(const std::vector<BoxPrediction>& preds, Dims dims);

// Coarse prior: dilate the binary occupancy with a discrete 6-connected
// metric ball of dilation_radius, convolve with a separable truncated
// Gaussian (L1-normalised kernel, zero-padded borders), then rescale so the
// maximum equals 1 (skipped when all-zero). Dilation runs first: it fixes
// coverage, and the smoothing then removes the stacking stair-steps.
PriorMap smooth_and_dilate(const Volume& occupancy, const PriorConfig& cfg);

// Flat voxel indices (row-major) of the MLP supervision sets.
struct PseudoLabels {
    std::vector<std::int64_t> positives;
    std::vector<std::int64_t> negatives;
};

// No voxel cleared the positive threshold -- the case cannot supervise its
// own refinement; callers fall back to the whole-brain mask.
class LocalizationFailure : public std::runtime_error {
public:
    explicit LocalizationFailure(const std::string& msg) : std::runtime_error(msg) {}
};

// positives = {v : prior(v) > tau_pos}; negatives = seeded uniform subsample
// of {v : prior(v) < tau_neg} with round(neg_sample_ratio * |positives|)
// entries (capped at pool size). Disjoint by construction. Throws
// LocalizationFailure when the positive set is empty.
PseudoLabels extract_pseudo_labels(const PriorMap& prior, const PriorConfig& cfg);

// Two-layer perceptron over VoxelFeature: kDim -> hidden (ReLU) -> 1 logit,
// sigmoid output. Weights are row-major [out, in].
struct RefineModel {
    int hidden = 0;
    std::vector<double> w1; // [hidden, VoxelFeature::kDim]
    std::vector<double> b1; // [hidden]
    std::vector<double> w2; // [1, hidden]
    std::vector<double> b2; // [1]
    double initial_loss = 0.0;
    double final_loss = 0.0;

    double logit(const VoxelFeature& f) const;
    double probability(const VoxelFeature& f) const; // sigmoid(logit)
};

// Full-batch gradient descent on binary cross-entropy over the labelled
// voxels' features for cfg.mlp_epochs steps. Zero epochs leaves the model at
// its (seeded) initialisation. Throws std::runtime_error with a config echo
// if the loss degenerates to NaN.
RefineModel train_refine_mlp(const Volume& volume, const PseudoLabels& labels,
                             const PriorConfig& cfg);

// Strict threshold: mask = 1 iff prior > tau.
Mask binarize(const PriorMap& prior, double tau);

// Refined mask = binarize(prior, tau_bin) OR (model probability > 0.5),
// evaluated over every voxel; a superset of the binarised coarse map by
// construction.
Mask refine(const PriorMap& prior, const RefineModel& model, const Volume& volume,
            const PriorConfig& cfg);

struct LocalizeResult {
    PriorMap prior;   // coarse map in [0, 1]
    Mask refined;     // refined mask (or fallback brain mask)
    bool fallback = false; // true when refinement fell back to the brain mask
    int failed_slices = 0; // slices whose predictor call failed outright
    std::vector<std::string> warnings;
};

// End-to-end per-case localization: axial slices -> predictor -> stacking ->
// coarse prior -> pseudo-labels -> MLP -> union. A localization failure
// (no confident prior voxels) falls back to the whole-brain mask: the given
// brain mask when provided, otherwise the volume's nonzero support.
LocalizeResult localize_case(const Volume& volume, BoxPredictor& predictor,
                             const PriorConfig& cfg,
                             const Mask* brain_mask = nullptr);

// Voxel-level overlap between a predicted mask and ground truth.
struct MaskOverlap {
    std::int64_t intersection = 0;
    std::int64_t union_size = 0;
    std::int64_t pred_size = 0;
    std::int64_t gt_size = 0;
    double iou = 0.0;       // 0 when the union is empty
    double recall = 0.0;    // 0 when gt is empty
    double precision = 0.0; // 0 when pred is empty
};

MaskOverlap mask_overlap(const Mask& pred, const Mask& gt);

namespace detail {

// Building blocks exposed for direct verification: the separable smoothing
// path must agree with dense 3D convolution, and dilation with a
// distance-transform scan.
std::vector<double> gaussian_kernel_1d(double sigma); // radius ceil(3*sigma)
Volume dilate_ball(const Volume& occupancy, int radius);
Volume gaussian_smooth_separable(const Volume& v, double sigma);
Volume gaussian_smooth_dense(const Volume& v, double sigma);

// The exact loss graph used by train_refine_mlp, shared so gradient checks
// exercise the production graph. x: [n, kDim]; targets in [0, 1].
nn::Tensor refine_mlp_loss(nn::Tape& tape, nn::Tensor x,
                           const std::vector<double>& targets, nn::Tensor w1,
                           nn::Tensor b1, nn::Tensor w2, nn::Tensor b2);

} // namespace detail

} // namespace vb
