#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "vb/volume.hpp"

namespace vb {

// One detection on one axial slice. Pixel coordinates are half-open:
// columns x0 <= x < x1, rows y0 <= y < y1.
struct BoxPrediction {
    int slice_index = 0;
    int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
    double confidence = 0.0;
};

// Result of querying one slice. `failed` marks a hard failure (transport or
// malformed payload) -- the caller continues with zero boxes; warnings carry
// per-slice diagnostics either way.
struct SlicePrediction {
    std::vector<BoxPrediction> boxes;
    bool failed = false;
    std::vector<std::string> warnings;
};

// Interchangeable slice-level detector interface; the localizer only ever
// talks to this.
class BoxPredictor {
public:
    virtual ~BoxPredictor() = default;
    virtual SlicePrediction predict(const std::vector<float>& pixels, int h, int w,
                                    int slice_index) = 0;
};

// --- deterministic stub ----------------------------------------------------

struct StubNoiseConfig {
    double jitter_std = 1.0;     // Gaussian jitter on each box coordinate
    double miss_prob = 0.2;      // chance a true box is dropped entirely
    double false_pos_prob = 0.0; // chance of one extra random box per slice
    std::uint64_t seed = 1;
};

// Emits the tight bounding box of the ground-truth slice, jittered, dropped,
// or joined by a false positive per the noise config. The per-slice random
// stream derives from (seed, slice_index) alone, so slice order or
// parallelism cannot change any output.
SlicePrediction stub_predict(const std::vector<std::uint8_t>& gt_slice, int h, int w,
                             int slice_index, const StubNoiseConfig& cfg);

class StubPredictor : public BoxPredictor {
public:
    StubPredictor(Mask gt_mask, StubNoiseConfig cfg);
    SlicePrediction predict(const std::vector<float>& pixels, int h, int w,
                            int slice_index) override;

private:
    Mask gt_;
    StubNoiseConfig cfg_;
};

// --- remote endpoint ---------------------------------------------------------

struct RemoteOracleConfig {
    std::string endpoint = "http://127.0.0.1:8080"; // scheme://host:port
    std::string path = "/predict";
    std::string prompt;       // empty -> default_prompt()
    int timeout_ms = 10000;
    int retries = 2;          // additional attempts after the first
};

// The localization prompt sent with every slice. Stable text, under 2048
// characters, naming the visual cues the detector should weigh.
const std::string& default_prompt();

// Request wire format (JSON): {"slice_b64": base64 of row-major u8 pixels,
// "width": w, "height": h, "prompt": str, "slice_index": n}. Pixel values
// are the slice min/max-rescaled to [0, 255].
struct OracleRequest {
    std::vector<std::uint8_t> pixels;
    int width = 0;
    int height = 0;
    std::string prompt;
    int slice_index = 0;
};

OracleRequest make_oracle_request(const std::vector<float>& pixels, int h, int w,
                                  int slice_index, const std::string& prompt);
std::string oracle_request_to_json(const OracleRequest& req);

// Response wire format: {"boxes": [{"x0","y0","x1","y1","confidence"}...]}.
// Boxes are clamped in-bounds; degenerate boxes and out-of-range confidences
// are rejected with a warning. A malformed body fails the slice.
SlicePrediction parse_oracle_response(const std::string& body, int h, int w, int slice_index);

// POSTs one slice to the endpoint, retrying transport and HTTP failures up
// to cfg.retries extra times; a slice that still fails is returned with
// failed=true (and no boxes) so the pipeline can continue.
SlicePrediction remote_predict(const std::vector<float>& pixels, int h, int w,
                               int slice_index, const RemoteOracleConfig& cfg);

class RemotePredictor : public BoxPredictor {
public:
    explicit RemotePredictor(RemoteOracleConfig cfg) : cfg_(std::move(cfg)) {}
    SlicePrediction predict(const std::vector<float>& pixels, int h, int w,
                            int slice_index) override;

private:
    RemoteOracleConfig cfg_;
};

std::string base64_encode(const std::uint8_t* data, std::size_t len);
std::vector<std::uint8_t> base64_decode(const std::string& text);

std::string stub_noise_config_to_json(const StubNoiseConfig& cfg);
StubNoiseConfig stub_noise_config_from_json(const std::string& text);
std::string remote_oracle_config_to_json(const RemoteOracleConfig& cfg);
RemoteOracleConfig remote_oracle_config_from_json(const std::string& text);

} // namespace vb
