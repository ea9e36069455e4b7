#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vb/nn/optimizer.hpp"
#include "vb/nn/tensor.hpp"
#include "vb/volume.hpp"

namespace vb {

// One backbone stage: 3x3x3 convolution (zero-pad 1), bias, ReLU, with the
// given output channel count and stride.
struct ConvStage {
    int channels = 8;
    int stride = 2;
    bool operator==(const ConvStage&) const = default;
};

struct DiagnoserConfig {
    std::vector<ConvStage> backbone = {{8, 2}, {16, 2}};
    int mca_hidden = 8;  // bottleneck width of the channel-gate MLP
    int k_classes = 4;
    int epochs = 60;
    double lr = 5e-5;
    double weight_decay = 1e-4;
    int warm_restart_t0 = 10; // cosine schedule period, epochs
    double clip_norm = 2.0;   // global gradient-norm ceiling
    double dropout_p = 0.2;
    double label_smooth = 0.05;
    int batch = 2;       // cases per micro-batch
    int accum_steps = 2; // micro-batches accumulated per optimizer step
    std::uint64_t seed = 1;

    // Head-variant switches used by the ablation rows: with use_mca=false
    // the attended branch is replaced by a second copy of the global branch
    // (head width preserved); with mask_input=true the input volume is
    // multiplied by the case mask before the backbone.
    bool use_mca = true;
    bool mask_input = false;
    double mask_eps = 1e-6; // masked-average-pool stabiliser

    void validate() const;
    int total_stride() const;     // product of stage strides
    int feature_channels() const; // channels after the last stage
    // Feature-map spatial dims; throws std::invalid_argument when the input
    // is not divisible by the total stride.
    Dims feature_dims(Dims input) const;
};

std::string diagnoser_config_to_json(const DiagnoserConfig& cfg);
DiagnoserConfig diagnoser_config_from_json(const std::string& text);

struct AugmentConfig {
    double rot90_p = 0.5; // axial-plane quarter turns, k drawn from {1,2,3}
    double flip_p = 0.5;  // sagittal flip (fastest axis)
    double noise_std = 0.01;
    double noise_p = 0.15;
    double gamma_lo = 0.9;
    double gamma_hi = 1.1;
    double gamma_p = 0.15;
    std::uint64_t seed = 1;

    void validate() const;
};

std::string augment_config_to_json(const AugmentConfig& cfg);
AugmentConfig augment_config_from_json(const std::string& text);

// Augmented pair plus a record of which transforms fired (the draws are a
// pure function of draw_seed). Spatial transforms hit volume and mask alike;
// intensity transforms (noise, gamma) touch the volume only.
struct AugmentResult {
    Volume volume;
    Mask mask;
    bool rotated = false;
    int rot_quarter_turns = 0;
    bool flipped = false;
    bool noised = false;
    bool gamma_adjusted = false;
    double gamma = 1.0;
};

AugmentResult augment(const Volume& v, const Mask& m, const AugmentConfig& cfg,
                      std::uint64_t draw_seed);

// Block-average pooling of a binary mask down to feature resolution (soft
// values in [0,1]). Falls back to nearest resampling, with a log line, when
// the mask dims are not integer multiples of feature_dims.
Volume mask_to_feature_res(const Mask& m, Dims feature_dims);

// Voxelwise product of a volume with a binary mask (the "masked input"
// convention of the no-attention ablation rows).
Volume apply_input_mask(const Volume& v, const Mask& m);

// Creates and He-initialises every learned parameter (backbone stages, the
// channel-gate MLP, the fusion head) in the store, in fixed order, from the
// config seed.
void init_diagnoser_params(nn::ParamStore& params, const DiagnoserConfig& cfg);

// Handles into one forward episode on the tape. `pooled`/`gate` are only
// valid when the config enables the masked-attention branch; `loss` only
// when a label was supplied.
struct ForwardHandles {
    nn::Tensor feature; // backbone output (post-dropout) [C, D', H', W']
    nn::Tensor pooled;  // masked channel statistic z [C]
    nn::Tensor gate;    // channel gate w [C]
    nn::Tensor logits;  // [1, K]
    nn::Tensor probs;   // softmax row [1, K]
    nn::Tensor loss;    // smoothed cross entropy, scalar
    bool has_mca = false;
    bool has_loss = false;
    // (param name, tape leaf) for every learned parameter bound into this
    // episode; the trainer harvests gradients through these handles.
    std::vector<std::pair<std::string, nn::Tensor>> leaves;
};

// Full forward pass on the tape (64-bit): backbone -> dropout ->
// masked pooling + channel gate (or duplicated global branch) ->
// concat(global, attended) -> dropout -> affine -> softmax. `feature_mask`
// must already be at feature resolution. label < 0 skips the loss.
ForwardHandles diagnoser_forward(nn::Tape& tape, const nn::ParamStore& params,
                                 const DiagnoserConfig& cfg, const Volume& volume,
                                 const Volume& feature_mask, bool training,
                                 std::uint64_t dropout_seed, int label = -1);

struct DiagnoserCase {
    std::string id;
    Volume volume; // preprocessed, brain-extracted
    Mask mask;     // localization mask feeding the attention (or input gate)
    int label = 0;
};

struct EpochLog {
    int epoch = 0;
    double lr = 0.0;
    double loss = 0.0;      // mean smoothed cross entropy over the epoch
    double train_acc = 0.0; // argmax accuracy of the training-pass outputs
};

struct TrainResult {
    nn::ParamStore params;
    std::vector<EpochLog> epochs;
    bool diverged = false;   // loss went non-finite; params hold the last
                             // finite state
    std::string diagnostics; // populated when diverged
};

// Full training recipe: decoupled-weight-decay Adam, cosine schedule with
// fixed-period warm restarts, label-smoothed cross entropy as the mean over
// each effective batch (batch * accum_steps cases), gradient accumulation,
// global-norm clipping, per-epoch reshuffling and augmentation. Bit-exactly
// reproducible from (cases, cfg, aug).
TrainResult train_diagnoser(const std::vector<DiagnoserCase>& cases,
                            const DiagnoserConfig& cfg, const AugmentConfig& aug);

struct Prediction {
    std::vector<double> probs; // length K, sums to 1
    int predicted = 0;         // argmax (lowest index wins ties)
};

// Inference path: dropout off, 32-bit arithmetic throughout.
Prediction predict_case(const nn::ParamStore& params, const DiagnoserConfig& cfg,
                        const Volume& volume, const Mask& mask);

// Checkpoint meta: the config echo plus a format tag; the companion parser
// restores the config (rejecting checkpoints written for another layout).
std::string diagnoser_checkpoint_meta(const DiagnoserConfig& cfg);
DiagnoserConfig diagnoser_config_from_checkpoint_meta(const std::string& meta_json);

} // namespace vb
