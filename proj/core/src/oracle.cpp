#include "vb/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "vb/log.hpp"
#include "vb/rng.hpp"

namespace vb {

namespace {

using nlohmann::json;

constexpr char kB64Alphabet[] =
    "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

} // namespace

std::string base64_encode(const std::uint8_t* data, std::size_t len) {
    std::string out;
    out.reserve((len + 2) / 3 * 4);
    for (std::size_t i = 0; i < len; i += 3) {
        std::uint32_t chunk = static_cast<std::uint32_t>(data[i]) << 16;
        if (i + 1 < len) chunk |= static_cast<std::uint32_t>(data[i + 1]) << 8;
        if (i + 2 < len) chunk |= static_cast<std::uint32_t>(data[i + 2]);
        out.push_back(kB64Alphabet[(chunk >> 18) & 0x3f]);
        out.push_back(kB64Alphabet[(chunk >> 12) & 0x3f]);
        out.push_back(i + 1 < len ? kB64Alphabet[(chunk >> 6) & 0x3f] : '=');
        out.push_back(i + 2 < len ? kB64Alphabet[chunk & 0x3f] : '=');
    }
    return out;
}

std::vector<std::uint8_t> base64_decode(const std::string& text) {
    auto value_of = [](char c) -> int {
        if (c >= 'A' && c <= 'Z') return c - 'A';
        if (c >= 'a' && c <= 'z') return c - 'a' + 26;
        if (c >= '0' && c <= '9') return c - '0' + 52;
        if (c == '+') return 62;
        if (c == '/') return 63;
        return -1;
    };
    if (text.size() % 4 != 0) throw std::invalid_argument("base64 length must be multiple of 4");
    std::vector<std::uint8_t> out;
    out.reserve(text.size() / 4 * 3);
    for (std::size_t i = 0; i < text.size(); i += 4) {
        int vals[4];
        int pad = 0;
        for (int k = 0; k < 4; ++k) {
            const char c = text[i + k];
            if (c == '=') {
                vals[k] = 0;
                ++pad;
            } else {
                vals[k] = value_of(c);
                if (vals[k] < 0 || pad > 0)
                    throw std::invalid_argument("invalid base64 character");
            }
        }
        const std::uint32_t chunk = (static_cast<std::uint32_t>(vals[0]) << 18) |
                                    (static_cast<std::uint32_t>(vals[1]) << 12) |
                                    (static_cast<std::uint32_t>(vals[2]) << 6) |
                                    static_cast<std::uint32_t>(vals[3]);
        out.push_back(static_cast<std::uint8_t>((chunk >> 16) & 0xff));
        if (pad < 2) out.push_back(static_cast<std::uint8_t>((chunk >> 8) & 0xff));
        if (pad < 1) out.push_back(static_cast<std::uint8_t>(chunk & 0xff));
    }
    return out;
}

const std::string& default_prompt() {
    static const std::string prompt =
        "You are reviewing one axial slice of a preprocessed brain MRI volume. "
        "Locate any tumor-suspicious region and answer with tight bounding boxes. "
        "Weigh these cues: abnormal signal intensities relative to surrounding "
        "parenchyma; irregular boundaries of any focal region; edema-associated "
        "gradients fading outward from a core; and midline asymmetry between the "
        "hemispheres. Ignore skull remnants and background. Respond as JSON: "
        "{\"boxes\": [{\"x0\": int, \"y0\": int, \"x1\": int, \"y1\": int, "
        "\"confidence\": float}]} with half-open pixel coordinates (x right, "
        "y down) and confidence in [0, 1]. Return an empty list when the slice "
        "shows no suspicious region.";
    return prompt;
}

SlicePrediction stub_predict(const std::vector<std::uint8_t>& gt_slice, int h, int w,
                             int slice_index, const StubNoiseConfig& cfg) {
    if (static_cast<std::int64_t>(gt_slice.size()) != static_cast<std::int64_t>(h) * w)
        throw std::invalid_argument("stub_predict: slice payload does not match h*w");
    if (cfg.jitter_std < 0.0 || cfg.miss_prob < 0.0 || cfg.miss_prob > 1.0 ||
        cfg.false_pos_prob < 0.0 || cfg.false_pos_prob > 1.0)
        throw std::invalid_argument("stub_predict: noise config out of range");

    Rng rng(mix(cfg.seed, "oracle-stub", static_cast<std::uint64_t>(slice_index)));
    SlicePrediction out;

    int lo_i = h, hi_i = -1, lo_j = w, hi_j = -1;
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j)
            if (gt_slice[static_cast<std::size_t>(i) * w + j]) {
                lo_i = std::min(lo_i, i);
                hi_i = std::max(hi_i, i);
                lo_j = std::min(lo_j, j);
                hi_j = std::max(hi_j, j);
            }

    if (hi_i >= 0) {
        const bool missed = rng.uniform() < cfg.miss_prob;
        if (!missed) {
            double jitters[4] = {0.0, 0.0, 0.0, 0.0};
            if (cfg.jitter_std > 0.0)
                for (double& jv : jitters) jv = cfg.jitter_std * rng.normal();
            BoxPrediction box;
            box.slice_index = slice_index;
            box.x0 = lo_j + static_cast<int>(std::lround(jitters[0]));
            box.y0 = lo_i + static_cast<int>(std::lround(jitters[1]));
            box.x1 = hi_j + 1 + static_cast<int>(std::lround(jitters[2]));
            box.y1 = hi_i + 1 + static_cast<int>(std::lround(jitters[3]));
            box.x0 = std::clamp(box.x0, 0, w - 1);
            box.x1 = std::clamp(box.x1, box.x0 + 1, w);
            box.y0 = std::clamp(box.y0, 0, h - 1);
            box.y1 = std::clamp(box.y1, box.y0 + 1, h);
            if (cfg.jitter_std > 0.0) {
                const double mean_abs = (std::abs(jitters[0]) + std::abs(jitters[1]) +
                                         std::abs(jitters[2]) + std::abs(jitters[3])) /
                                        4.0;
                box.confidence =
                    std::clamp(1.0 - mean_abs / (3.0 * cfg.jitter_std), 0.05, 1.0);
            } else {
                box.confidence = 1.0;
            }
            out.boxes.push_back(box);
        }
    }

    if (rng.uniform() < cfg.false_pos_prob && w >= 2 && h >= 2) {
        BoxPrediction fp;
        fp.slice_index = slice_index;
        fp.x0 = rng.uniform_int(0, w - 2);
        fp.x1 = rng.uniform_int(fp.x0 + 1, w);
        fp.y0 = rng.uniform_int(0, h - 2);
        fp.y1 = rng.uniform_int(fp.y0 + 1, h);
        fp.confidence = rng.uniform(0.05, 0.3);
        out.boxes.push_back(fp);
    }
    return out;
}

StubPredictor::StubPredictor(Mask gt_mask, StubNoiseConfig cfg)
    : gt_(std::move(gt_mask)), cfg_(cfg) {}

SlicePrediction StubPredictor::predict(const std::vector<float>& pixels, int h, int w,
                                       int slice_index) {
    (void)pixels; // the stub reads the ground truth, not the image
    const Dims dims = gt_.dims();
    if (h != dims.h || w != dims.w || slice_index < 0 || slice_index >= dims.d)
        throw std::invalid_argument("stub predictor: slice does not match the ground truth");
    const std::size_t plane = static_cast<std::size_t>(dims.h) * dims.w;
    std::vector<std::uint8_t> slice(gt_.bits().begin() + static_cast<std::ptrdiff_t>(plane * slice_index),
                                    gt_.bits().begin() + static_cast<std::ptrdiff_t>(plane * (slice_index + 1)));
    return stub_predict(slice, h, w, slice_index, cfg_);
}

OracleRequest make_oracle_request(const std::vector<float>& pixels, int h, int w,
                                  int slice_index, const std::string& prompt) {
    if (static_cast<std::int64_t>(pixels.size()) != static_cast<std::int64_t>(h) * w)
        throw std::invalid_argument("oracle request: slice payload does not match h*w");
    OracleRequest req;
    req.width = w;
    req.height = h;
    req.slice_index = slice_index;
    req.prompt = prompt.empty() ? default_prompt() : prompt;
    float lo = pixels[0], hi = pixels[0];
    for (float p : pixels) {
        lo = std::min(lo, p);
        hi = std::max(hi, p);
    }
    const float span = hi - lo;
    req.pixels.resize(pixels.size());
    for (std::size_t i = 0; i < pixels.size(); ++i) {
        const float t = span > 0.0f ? (pixels[i] - lo) / span : 0.0f;
        req.pixels[i] = static_cast<std::uint8_t>(std::lround(t * 255.0f));
    }
    return req;
}

std::string oracle_request_to_json(const OracleRequest& req) {
    json j;
    j["slice_b64"] = base64_encode(req.pixels.data(), req.pixels.size());
    j["width"] = req.width;
    j["height"] = req.height;
    j["prompt"] = req.prompt;
    j["slice_index"] = req.slice_index;
    return j.dump();
}

SlicePrediction parse_oracle_response(const std::string& body, int h, int w,
                                      int slice_index) {
    SlicePrediction out;
    json j;
    try {
        j = json::parse(body);
    } catch (const std::exception& e) {
        out.failed = true;
        out.warnings.push_back("slice " + std::to_string(slice_index) +
                               ": malformed JSON response: " + e.what());
        return out;
    }
    if (!j.is_object() || !j.contains("boxes") || !j.at("boxes").is_array()) {
        out.failed = true;
        out.warnings.push_back("slice " + std::to_string(slice_index) +
                               ": response has no boxes array");
        return out;
    }
    for (const auto& e : j.at("boxes")) {
        BoxPrediction box;
        box.slice_index = slice_index;
        try {
            box.x0 = e.at("x0").get<int>();
            box.y0 = e.at("y0").get<int>();
            box.x1 = e.at("x1").get<int>();
            box.y1 = e.at("y1").get<int>();
            box.confidence = e.at("confidence").get<double>();
        } catch (const std::exception&) {
            out.warnings.push_back("slice " + std::to_string(slice_index) +
                                   ": box with missing or non-numeric fields dropped");
            continue;
        }
        if (box.confidence < 0.0 || box.confidence > 1.0) {
            out.warnings.push_back("slice " + std::to_string(slice_index) +
                                   ": box with out-of-range confidence rejected");
            continue;
        }
        box.x0 = std::clamp(box.x0, 0, w);
        box.x1 = std::clamp(box.x1, 0, w);
        box.y0 = std::clamp(box.y0, 0, h);
        box.y1 = std::clamp(box.y1, 0, h);
        if (box.x1 <= box.x0 || box.y1 <= box.y0) {
            out.warnings.push_back("slice " + std::to_string(slice_index) +
                                   ": degenerate box dropped");
            continue;
        }
        out.boxes.push_back(box);
    }
    return out;
}

SlicePrediction remote_predict(const std::vector<float>& pixels, int h, int w,
                               int slice_index, const RemoteOracleConfig& cfg) {
    const OracleRequest req = make_oracle_request(pixels, h, w, slice_index, cfg.prompt);
    const std::string body = oracle_request_to_json(req);

    httplib::Client client(cfg.endpoint);
    client.set_connection_timeout(0, cfg.timeout_ms * 1000);
    client.set_read_timeout(cfg.timeout_ms / 1000, (cfg.timeout_ms % 1000) * 1000);

    std::string last_error;
    for (int attempt = 0; attempt <= cfg.retries; ++attempt) {
        auto res = client.Post(cfg.path, body, "application/json");
        if (!res) {
            last_error = "transport failure (" + httplib::to_string(res.error()) + ")";
            continue;
        }
        if (res->status != 200) {
            last_error = "HTTP " + std::to_string(res->status);
            continue;
        }
        return parse_oracle_response(res->body, h, w, slice_index);
    }
    SlicePrediction out;
    out.failed = true;
    out.warnings.push_back("slice " + std::to_string(slice_index) + ": " + last_error +
                           " after " + std::to_string(cfg.retries + 1) + " attempts");
    log_warn(out.warnings.back());
    return out;
}

SlicePrediction RemotePredictor::predict(const std::vector<float>& pixels, int h, int w,
                                         int slice_index) {
    return remote_predict(pixels, h, w, slice_index, cfg_);
}

std::string stub_noise_config_to_json(const StubNoiseConfig& cfg) {
    json j;
    j["jitter_std"] = cfg.jitter_std;
    j["miss_prob"] = cfg.miss_prob;
    j["false_pos_prob"] = cfg.false_pos_prob;
    j["seed"] = cfg.seed;
    return j.dump();
}

StubNoiseConfig stub_noise_config_from_json(const std::string& text) {
    const json j = json::parse(text);
    for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string k = it.key();
        if (k != "jitter_std" && k != "miss_prob" && k != "false_pos_prob" && k != "seed")
            throw std::invalid_argument("unknown key '" + k + "' in stub oracle config");
    }
    StubNoiseConfig cfg;
    if (j.contains("jitter_std")) cfg.jitter_std = j.at("jitter_std").get<double>();
    if (j.contains("miss_prob")) cfg.miss_prob = j.at("miss_prob").get<double>();
    if (j.contains("false_pos_prob")) cfg.false_pos_prob = j.at("false_pos_prob").get<double>();
    if (j.contains("seed")) cfg.seed = j.at("seed").get<std::uint64_t>();
    if (cfg.jitter_std < 0.0 || cfg.miss_prob < 0.0 || cfg.miss_prob > 1.0 ||
        cfg.false_pos_prob < 0.0 || cfg.false_pos_prob > 1.0)
        throw std::invalid_argument("stub oracle config out of range");
    return cfg;
}

std::string remote_oracle_config_to_json(const RemoteOracleConfig& cfg) {
    json j;
    j["endpoint"] = cfg.endpoint;
    j["path"] = cfg.path;
    j["prompt"] = cfg.prompt;
    j["timeout_ms"] = cfg.timeout_ms;
    j["retries"] = cfg.retries;
    return j.dump();
}

RemoteOracleConfig remote_oracle_config_from_json(const std::string& text) {
    const json j = json::parse(text);
    for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string k = it.key();
        if (k != "endpoint" && k != "path" && k != "prompt" && k != "timeout_ms" &&
            k != "retries")
            throw std::invalid_argument("unknown key '" + k + "' in remote oracle config");
    }
    RemoteOracleConfig cfg;
    if (j.contains("endpoint")) cfg.endpoint = j.at("endpoint").get<std::string>();
    if (j.contains("path")) cfg.path = j.at("path").get<std::string>();
    if (j.contains("prompt")) cfg.prompt = j.at("prompt").get<std::string>();
    if (j.contains("timeout_ms")) cfg.timeout_ms = j.at("timeout_ms").get<int>();
    if (j.contains("retries")) cfg.retries = j.at("retries").get<int>();
    if (cfg.timeout_ms <= 0 || cfg.retries < 0)
        throw std::invalid_argument("remote oracle config out of range");
    if (cfg.prompt.size() > 2048)
        throw std::invalid_argument("oracle prompt exceeds 2048 characters");
    return cfg;
}

} // namespace vb
