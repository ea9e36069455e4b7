#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vb/diagnoser.hpp"
#include "vb/phantom.hpp"
#include "vb/volume.hpp"

namespace vb {

// Per-case fold indices in manifest order; case ids are carried so a stale
// assignment cannot silently be applied to a reordered cohort.
struct FoldAssignment {
    int k = 5;
    std::vector<std::string> case_ids;
    std::vector<int> fold_of; // same length/order as case_ids, values in [0, k)

    void validate() const; // structural checks (sizes, ranges, partition)
};

std::string fold_assignment_to_json(const FoldAssignment& folds);
FoldAssignment fold_assignment_from_json(const std::string& text);

// Seeded shuffle within each class, then round-robin assignment, giving a
// per-class per-fold count spread of at most one. Throws
// std::invalid_argument when any class has fewer than k cases.
FoldAssignment stratified_kfold(const CohortManifest& manifest, int k,
                                std::uint64_t seed);

struct ConfusionMatrix {
    int k = 0;
    std::vector<std::int64_t> counts; // k*k, row = true class, column = predicted

    std::int64_t at(int true_class, int predicted) const {
        return counts[static_cast<std::size_t>(true_class) * k + predicted];
    }
    std::int64_t total() const;
    std::int64_t trace() const;
};

enum class AverageMode { Macro, Micro, Weighted };

const char* average_mode_name(AverageMode mode);
AverageMode average_mode_from_name(const std::string& name);

struct MetricReport {
    ConfusionMatrix confusion;
    double accuracy = 0.0;
    double precision = 0.0; // averaged per `mode`
    double recall = 0.0;
    double f1 = 0.0;
    std::vector<double> per_class_precision;
    std::vector<double> per_class_recall;
    std::vector<double> per_class_f1;
    AverageMode mode = AverageMode::Macro;
};

// Classes that were never predicted contribute precision 0 (a log line
// records each); classes absent from the labels contribute recall 0.
MetricReport compute_metrics(const std::vector<int>& preds,
                             const std::vector<int>& labels, int k,
                             AverageMode mode = AverageMode::Macro);

std::string metric_report_to_json(const MetricReport& report);

struct FoldOutcome {
    int fold = 0;
    MetricReport metrics;
    std::vector<std::string> test_ids;
    std::vector<int> test_labels;
    std::vector<int> test_preds;
    TrainResult training;
};

struct CvResult {
    std::vector<FoldOutcome> folds; // completed folds only
    MetricReport averaged; // scalar metrics averaged over folds; confusion
                           // summed across folds
    bool completed = true; // false when any fold diverged
    std::string diagnostics;
};

// Trains on each fold's complement and evaluates on the fold (augmentation
// off at evaluation). Per-fold seeds derive from cfg.seed / aug.seed, so
// results are identical whether folds run serially or in parallel. A
// diverged fold is recorded in `diagnostics` and excluded from the average;
// completed folds are always preserved.
CvResult run_cv(const std::vector<DiagnoserCase>& cases, const FoldAssignment& folds,
                const DiagnoserConfig& cfg, const AugmentConfig& aug, int jobs = 1);

std::string cv_result_to_json(const CvResult& result);

// Cached localization products for one case — everything the ablation rows
// need, produced once by the localizer stage.
struct AblationCaseInputs {
    std::string id;
    int label = 0;
    Volume volume;    // preprocessed volume
    Mask whole_brain; // brain-extraction mask
    Mask coarse;      // binarised coarse prior
    Mask refined;     // refined localization mask
};

struct AblationRow {
    std::string name;        // human-readable row label
    std::string mask_source; // "whole-brain" | "coarse" | "refined"
    bool use_mca = false;
    bool mask_input = false;
    MetricReport metrics; // fold-averaged
};

struct AblationResult {
    std::vector<AblationRow> rows; // fixed order: the five head/mask variants
    std::vector<CvResult> runs;    // full CV detail per row, same order
};

// Runs the five-row study from one set of cached localizer products:
// (1) whole-brain mask, no attention; (2) coarse mask, no attention;
// (3) coarse mask + attention; (4) refined mask, no attention;
// (5) refined mask + attention. No-attention rows mask the input volume and
// duplicate the global branch so head width is unchanged.
AblationResult run_ablation(const std::vector<AblationCaseInputs>& cases,
                            const FoldAssignment& folds, const DiagnoserConfig& base,
                            const AugmentConfig& aug, int jobs = 1);

// CSV with header: row,mask,attention,precision,recall,f1_score,accuracy
std::string ablation_to_csv(const AblationResult& result);
std::string ablation_to_json(const AblationResult& result);

struct GradCamResult {
    PriorMap heatmap;                    // volume-resolution, [0, 1]
    std::vector<double> channel_weights; // spatial mean of feature gradients
    Volume feature_heat; // pre-normalisation relu(sum_c w_c F_c) at feature
                         // resolution
};

// Saliency for one case: gradient of the target-class pre-softmax logit
// w.r.t. the final backbone feature map; channel weights are the spatial
// means of those gradients; the weighted feature sum is rectified, min-max
// normalised (all-zero when flat), and nearest-upsampled to volume dims.
GradCamResult grad_cam3d(const nn::ParamStore& params, const DiagnoserConfig& cfg,
                         const Volume& volume, const Mask& mask, int target_class);

struct SaliencyFocus {
    double mass_fraction = 0.0;   // heatmap mass inside the reference mask
    double volume_fraction = 0.0; // reference mask voxels / total voxels
    double ratio = 0.0;           // mass_fraction / volume_fraction (0 if undefined)
};

SaliencyFocus saliency_focus(const PriorMap& heatmap, const Mask& reference);

} // namespace vb
