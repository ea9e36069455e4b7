#pragma once

#include <string>

#include "vb/nn/optimizer.hpp"

namespace vb::nn {

// Checkpoint file layout:
//   "VBC1" | u32 header_len | header JSON (UTF-8) | f64 payloads (little-endian)
// The header lists every parameter (name, shape, element count, payload
// offset in doubles) plus a caller-supplied "meta" object echoing the model
// layout, seed and config. Payload order equals header order.
void save_checkpoint(const std::string& path, const ParamStore& params,
                     const std::string& meta_json);

struct LoadedCheckpoint {
    ParamStore params;
    std::string meta_json;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

} // namespace vb::nn
